"""Self-verification suite behind ``poems check``.

Each check compares an implementation against an independent oracle and
reports its worst error; the suite passes when every check is within its
tolerance.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import model as M
from . import objective as O
from .evaluation import hungarian_acc, nmi
from .numerics import finite_diff_report
from .sparsity import SSLState, ssl_eta_update, ssl_gamma_update

GRAD_TOL = 1e-4
POE_TOL = 1e-6
METRIC_TOL = 1e-12
SSL_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    seconds: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_error) and self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: max_error={self.max_error:.3e} tol={self.tolerance:.0e} time={self.seconds:.2f}s{extra}"


# --------------------------------------------------------------------------
# gradient check on a toy instance
# --------------------------------------------------------------------------


@dataclass
class GradientToy:
    model: M.ModelParams
    xs: List[np.ndarray]
    eps: np.ndarray
    seed: int
    margin: float


def kink_margin(model: M.ModelParams, xs, eps) -> float:
    """Distance of the forward pass from every non-differentiable point:
    relu pre-activations at 0, log-variances at the clamp, loadings at 0."""
    gaps = []
    posts = []
    for x, enc in zip(xs, model.encoders):
        p, cache = M.encode_forward(x, enc)
        posts.append(p)
        gaps += [np.abs(pre).min() for pre, l in zip(cache.mlp.pre, enc.layers) if l.activation == "relu"]
        gaps.append((M.LOGVAR_CLAMP - np.abs(cache.raw_logvar)).min())
    _, gcache = M.gate_forward(posts, model.gating)
    gaps += [np.abs(pre).min() for pre, l in zip(gcache.pre, model.gating.layers) if l.activation == "relu"]
    fused = M.poe_fuse(posts, M.gate(posts, model.gating))
    z = M.reparameterize(fused, eps=eps).z
    for dec, load in zip(model.decoders, model.loadings):
        W = load.W
        masked = (z[:, None, :] * W[None, :, :]).reshape(-1, W.shape[1])
        _, dcache = M.mlp_forward(dec.trunk, masked)
        gaps += [np.abs(pre).min() for pre, l in zip(dcache.pre, dec.trunk.layers) if l.activation == "relu"]
        gaps.append(np.abs(W).min())
    return float(min(gaps))


def gradient_toy(seed: Optional[int] = None, hidden: int = 16, margin: float = 1e-4,
                 n: int = 4, dims=(6, 4), k: int = 3, max_tries: int = 1000) -> GradientToy:
    """Small model plus batch for finite-difference checks.

    Central differences are only meaningful where the loss is smooth, so
    without an explicit seed the first seed whose forward pass stays at
    least ``margin`` away from every kink is used.
    """
    seeds = [seed] if seed is not None else range(max_tries)
    for s in seeds:
        rng = np.random.default_rng([s, 7])
        cfg = O.TrainConfig(latent_dim=k, encoder_hidden=(hidden,), gating_hidden=(hidden,),
                            decoder_hidden=(hidden,), seed=s)
        model = O.build_model([f"omic{v + 1}" for v in range(len(dims))], list(dims), cfg)
        xs = [rng.standard_normal((n, d)) for d in dims]
        eps = rng.standard_normal((n, k))
        m = kink_margin(model, xs, eps)
        if seed is not None or m >= margin:
            return GradientToy(model, xs, eps, s, m)
    raise RuntimeError(f"no kink-free toy instance within {max_tries} seeds")


def loss_closure(toy: GradientToy):
    def fn():
        loss, grads = O.elbo_step(toy.xs, toy.model, toy.eps)
        return loss.total, grads

    return fn


def check_gradients(toy: Optional[GradientToy] = None, kl_sign: float = 1.0, step: float = 1e-5) -> CheckResult:
    """Analytic gradients of the full loss against central differences.

    ``kl_sign=-1`` injects a sign error into the KL gradient (the loss value
    stays correct), which the check must catch.
    """
    t0 = time.perf_counter()
    toy = toy or gradient_toy()
    saved = O.KL_GRAD_SIGN
    O.KL_GRAD_SIGN = kl_sign
    try:
        report = finite_diff_report(loss_closure(toy), toy.model.named_arrays(), step)
    finally:
        O.KL_GRAD_SIGN = saved
    worst = max(report, key=report.get)
    name = "gradient_fd" if kl_sign == 1.0 else "gradient_fd_kl_sign_mutant"
    return CheckResult(name, report[worst], GRAD_TOL, time.perf_counter() - t0,
                       f"worst parameter {worst}, toy seed {toy.seed}")


# --------------------------------------------------------------------------
# product of experts against numerical integration
# --------------------------------------------------------------------------


def tempered_product_moments(mus, variances, alphas, grid_points: int = 20001, width: float = 12.0):
    """Mean and variance of the normalised density proportional to
    prod_v N(x; mu_v, var_v)^alpha_v, by quadrature on a uniform grid."""
    mus = np.asarray(mus, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    # log density, evaluated without any closed-form knowledge of the product
    sd = np.sqrt(variances)
    lo = np.min(mus - width * sd)
    hi = np.max(mus + width * sd)
    x = np.linspace(lo, hi, grid_points)
    logp = np.zeros_like(x)
    for m, v, a in zip(mus, variances, alphas):
        logp += a * (-0.5 * (x - m) ** 2 / v - 0.5 * math.log(2 * math.pi * v))
    # narrow the grid onto the bulk of the mass, then integrate finely
    keep = logp > logp.max() - 60.0
    x = np.linspace(x[keep][0], x[keep][-1], grid_points)
    logp = np.zeros_like(x)
    for m, v, a in zip(mus, variances, alphas):
        logp += a * (-0.5 * (x - m) ** 2 / v)
    w = np.exp(logp - logp.max())
    dx = x[1] - x[0]
    simpson = np.ones_like(x)
    simpson[1:-1:2] = 4.0
    simpson[2:-1:2] = 2.0
    w = w * simpson * dx / 3.0
    z = w.sum()
    mean = (w * x).sum() / z
    var = (w * (x - mean) ** 2).sum() / z
    return mean, var


def random_poe_case(rng: np.random.Generator):
    v = int(rng.integers(1, 5))
    k = int(rng.integers(1, 6))
    posts = [M.ModalityPosterior(rng.normal(0.0, 2.0, (1, k)), rng.uniform(-2.0, 2.0, (1, k))) for _ in range(v)]
    alpha = rng.dirichlet(np.ones(v))[None, :]
    return posts, alpha


def check_poe(n_cases: int = 100, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        posts, alpha = random_poe_case(rng)
        fused = M.poe_fuse(posts, M.GatingWeights(alpha))
        for kk in range(fused.mu.shape[1]):
            mean, var = tempered_product_moments([p.mu[0, kk] for p in posts],
                                                 [p.var[0, kk] for p in posts], alpha[0])
            worst = max(worst, abs(mean - fused.mu[0, kk]), abs(var - fused.var[0, kk]) / max(var, 1e-300))
    return CheckResult("poe_quadrature", worst, POE_TOL, time.perf_counter() - t0, f"{n_cases} cases")


# --------------------------------------------------------------------------
# metrics against exhaustive enumeration
# --------------------------------------------------------------------------


def acc_by_permutation(y, yhat) -> float:
    """Best agreement over every injective relabelling of the clusters."""
    y = list(y)
    yhat = list(yhat)
    classes = sorted(set(y))
    clusters = sorted(set(yhat))
    targets = classes + [None] * max(0, len(clusters) - len(classes))
    best = 0
    for perm in itertools.permutations(targets, len(clusters)):
        mapping = dict(zip(clusters, perm))
        best = max(best, sum(1 for a, b in zip(y, yhat) if mapping[b] == a))
    return best / len(y)


def nmi_by_counting(y, yhat) -> float:
    """Mutual information and entropies summed directly over label pairs."""
    n = len(y)
    py, pc, pj = {}, {}, {}
    for a, b in zip(y, yhat):
        py[a] = py.get(a, 0) + 1
        pc[b] = pc.get(b, 0) + 1
        pj[(a, b)] = pj.get((a, b), 0) + 1
    hy = -sum(c / n * math.log(c / n) for c in py.values())
    hc = -sum(c / n * math.log(c / n) for c in pc.values())
    if hy + hc == 0:
        return 1.0
    mi = sum(c / n * math.log((c / n) / ((py[a] / n) * (pc[b] / n))) for (a, b), c in pj.items())
    return 2.0 * mi / (hy + hc)


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def label_pairs(max_len: int = 8, max_classes: int = 3, raw_len: int = 5):
    """Pairs ``(y, yhat)`` covering every label-vector pair of length
    ``<= max_len`` over ``max_classes`` labels.

    Lengths up to ``raw_len`` are enumerated verbatim. Beyond that the pairs
    are enumerated up to a joint reordering of positions, i.e. one pair per
    contingency table, which leaves both metrics unchanged.
    """
    for n in range(1, raw_len + 1):
        vecs = list(itertools.product(range(max_classes), repeat=n))
        for y in vecs:
            for yh in vecs:
                yield y, yh
    for n in range(raw_len + 1, max_len + 1):
        for counts in _compositions(n, max_classes * max_classes):
            y, yh = [], []
            for cell, c in enumerate(counts):
                y += [cell // max_classes] * c
                yh += [cell % max_classes] * c
            yield tuple(y), tuple(yh)


def check_metrics(max_len: int = 8, max_classes: int = 3, raw_len: int = 5) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    count = 0
    for y, yh in label_pairs(max_len, max_classes, raw_len):
        ya, ca = np.array(y), np.array(yh)
        worst = max(worst, abs(hungarian_acc(ya, ca) - acc_by_permutation(y, yh)),
                    abs(nmi(ya, ca) - nmi_by_counting(y, yh)))
        count += 1
    return CheckResult("metrics_enumeration", worst, METRIC_TOL, time.perf_counter() - t0, f"{count} pairs")


# --------------------------------------------------------------------------
# spike-and-slab spot values
# --------------------------------------------------------------------------


def check_ssl() -> CheckResult:
    t0 = time.perf_counter()
    errs = []
    # at w = 0 with eta = 1/2 the inclusion odds are lambda1 / lambda0 = 1/10
    st = SSLState(np.zeros((1, 1)), np.array([0.5]), 10.0, 1.0, 1.0, 1.0)
    errs.append(abs(ssl_gamma_update(np.zeros((1, 1)), st)[0, 0] - 1.0 / 11.0))
    # uniform Beta prior: the rate is the mean inclusion
    st4 = SSLState(np.zeros((4, 1)), np.array([0.5]))
    errs.append(abs(ssl_eta_update(np.array([[1.0], [1.0], [0.0], [0.0]]), st4)[0] - 0.5))
    return CheckResult("ssl_spot_values", max(errs), SSL_TOL, time.perf_counter() - t0)


CHECKS: Dict[str, Callable[[], CheckResult]] = {
    "gradients": check_gradients,
    "poe": check_poe,
    "metrics": check_metrics,
    "ssl": check_ssl,
}


def run_all(names=None) -> List[CheckResult]:
    names = list(CHECKS) if names is None else list(names)
    return [CHECKS[n]() for n in names]
