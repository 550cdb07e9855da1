"""Negative ELBO with exact gradients, and the training loop.

The per-batch loss is

    sum_v NLL_v + KL(q(z | x^{1:V}) || N(0, I)) + sum_v penalty_v

where the NLL and KL terms are averaged over the samples in the batch and
summed over features / latent dimensions within a sample, and ``penalty_v`` is
the spike-and-slab expected negative log prior of the loadings W_v.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as M
from .errors import ContractError, NumericError, ShapeError
from .numerics import adamw_step, init_opt_state, mlp_grad_dict
from .sparsity import init_ssl_state, ssl_em_update, ssl_penalty_grad, ssl_penalty_value

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
# multiplies the KL gradient; the verification suite sets it to -1 to plant
# a sign error and confirm the gradient check notices
KL_GRAD_SIGN = 1.0


def gaussian_nll(recon, x, obs_variance=1.0) -> float:
    """Per-sample Gaussian negative log-likelihood, summed over features."""
    if recon.shape != x.shape:
        raise ShapeError(f"reconstruction {recon.shape} != data {x.shape}")
    var = np.asarray(obs_variance, dtype=np.float64)
    if np.any(var <= 0):
        raise ContractError("observation variance must be positive")
    r = x - recon
    n = x.shape[0]
    if n == 0:
        return 0.0
    return float((0.5 * (LOG_2PI + np.log(var)) + 0.5 * r * r / var).sum() / n)


def kl_standard_normal(fused: M.FusedPosterior) -> float:
    """KL of a diagonal Gaussian from N(0, I), summed over K, averaged over N."""
    mu, var = fused.mu, fused.var
    n = mu.shape[0]
    if n == 0:
        return 0.0
    return float(0.5 * (var + mu * mu - 1.0 - np.log(var)).sum() / n)


@dataclass
class LossBreakdown:
    recon: List[float]
    kl: float
    penalty: List[float]
    total: float

    @classmethod
    def build(cls, recon, kl, penalty):
        return cls(list(recon), kl, list(penalty), float(sum(recon) + kl + sum(penalty)))

    def as_row(self, prefix: str, omics: Sequence[str]) -> Dict[str, float]:
        row = {f"{prefix}_total": self.total, f"{prefix}_kl": self.kl}
        for name, r, p in zip(omics, self.recon, self.penalty):
            row[f"{prefix}_recon_{name}"] = r
            row[f"{prefix}_penalty_{name}"] = p
        return row


@dataclass
class TrainConfig:
    epochs: int = 5000
    latent_dim: int = 32
    batch_size: int = 512
    lr: float = 9e-4
    weight_decay: float = 1e-4
    patience: int = 100
    seed: int = 21
    obs_variance: str = "fixed"  # or "learned"
    lambda0: float = 10.0
    lambda1: float = 1.0
    beta_a: float = 1.0
    beta_b: float = 1.0
    eta0: float = 0.5
    penalty_scale: str = "per_sample"  # or "full"
    encoder_hidden: Tuple[int, ...] = (256,)
    gating_hidden: Tuple[int, ...] = (64,)
    decoder_hidden: Tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.epochs <= 0 or self.latent_dim <= 0 or self.batch_size <= 0:
            raise ContractError("epochs, latent_dim and batch_size must be positive")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if self.obs_variance not in ("fixed", "learned"):
            raise ContractError("obs_variance must be 'fixed' or 'learned'")
        if self.penalty_scale not in ("per_sample", "full"):
            raise ContractError("penalty_scale must be 'per_sample' or 'full'")
        for name in ("encoder_hidden", "gating_hidden", "decoder_hidden"):
            setattr(self, name, tuple(int(h) for h in getattr(self, name)))

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def build_model(omics, feature_dims, config: TrainConfig) -> M.ModelParams:
    model = M.init_model(
        omics, feature_dims, config.latent_dim, config.encoder_hidden,
        config.gating_hidden, config.decoder_hidden, seed=config.seed,
    )
    model.ssl = [
        init_ssl_state(l.W, config.lambda0, config.lambda1, config.beta_a, config.beta_b, config.eta0)
        for l in model.loadings
    ]
    if config.obs_variance == "learned":
        model.obs_logvar = [np.zeros(d) for d in feature_dims]
    return model


def elbo_step(batch: Sequence[np.ndarray], model: M.ModelParams, eps: np.ndarray,
              ssl_states=None, compute_grads: bool = True, penalty_weight: float = 1.0):
    """Loss terms and (optionally) gradients for one aligned batch.

    ``eps`` is the standard-normal noise for the single latent sample. The
    inclusion probabilities and rates in ``ssl_states`` are constants here.
    ``penalty_weight`` multiplies the prior term (value and gradient).
    """
    states = ssl_states if ssl_states is not None else model.ssl
    nv = len(model.omics)
    if len(batch) != nv:
        raise ContractError(f"batch has {len(batch)} omics, model expects {nv}")
    n = batch[0].shape[0]
    if any(x.shape[0] != n for x in batch):
        raise ContractError("omics in a batch must share samples")
    posts, enc_caches = [], []
    for v in range(nv):
        p, c = M.encode_forward(batch[v], model.encoders[v], model.omics[v])
        posts.append(p)
        enc_caches.append(c)
    alphas, gate_cache = M.gate_forward(posts, model.gating)
    fused = M.poe_fuse(posts, alphas)
    sample = M.reparameterize(fused, eps=eps)
    recons, recon_terms, dec_caches, obs_vars = [], [], [], []
    for v in range(nv):
        r, c = M.sparse_decode_forward(sample.z, model.loadings[v].W, model.decoders[v])
        var = 1.0 if model.obs_logvar is None else np.exp(model.obs_logvar[v])
        recons.append(r)
        dec_caches.append(c)
        obs_vars.append(var)
        recon_terms.append(gaussian_nll(r, batch[v], var))
    kl = kl_standard_normal(fused)
    penalties = [penalty_weight * ssl_penalty_value(model.loadings[v].W, states[v].gamma, states[v])
                 for v in range(nv)]
    loss = LossBreakdown.build(recon_terms, kl, penalties)
    if not math.isfinite(loss.total):
        bad = [f"recon[{model.omics[v]}]" for v in range(nv) if not math.isfinite(recon_terms[v])]
        bad += ["kl"] if not math.isfinite(kl) else []
        bad += [f"penalty[{model.omics[v]}]" for v in range(nv) if not math.isfinite(penalties[v])]
        raise NumericError(f"non-finite loss in {', '.join(bad) or 'total'}")
    if not compute_grads:
        return loss, None

    grads: Dict[str, np.ndarray] = {}
    d_z = np.zeros_like(sample.z)
    for v in range(nv):
        resid = recons[v] - batch[v]
        d_recon = resid / obs_vars[v] / n
        trunk_g, d_bias, dz_v, dW_v = M.sparse_decode_backward(model.decoders[v], dec_caches[v], d_recon)
        d_z += dz_v
        grads.update(mlp_grad_dict(f"dec{v}", trunk_g))
        grads[f"dec{v}.bias"] = d_bias
        W = model.loadings[v].W
        grads[f"W{v}"] = dW_v + penalty_weight * ssl_penalty_grad(W, states[v].gamma, states[v])
        if model.obs_logvar is not None:
            grads[f"obs{v}"] = (0.5 - 0.5 * resid * resid / obs_vars[v]).sum(axis=0) / n
    d_mu_s, d_var_s = M.reparameterize_backward(fused, sample, d_z)
    d_mu_s = d_mu_s + KL_GRAD_SIGN * fused.mu / n
    d_var_s = d_var_s + KL_GRAD_SIGN * 0.5 * (1.0 - 1.0 / fused.var) / n
    poe_parts, d_alpha = M.poe_backward(posts, alphas.alpha, fused, d_mu_s, d_var_s)
    gate_g, gate_parts = M.gate_backward(model.gating, gate_cache, alphas.alpha, d_alpha)
    grads.update(mlp_grad_dict("gate", gate_g))
    for v in range(nv):
        d_mu = poe_parts[v][0] + gate_parts[v][0]
        d_lv = poe_parts[v][1] + gate_parts[v][1]
        grads.update(mlp_grad_dict(f"enc{v}", M.encode_backward(model.encoders[v], enc_caches[v], d_mu, d_lv)))
    return loss, grads


def fused_posterior(model: M.ModelParams, xs: Sequence[np.ndarray]):
    """Deterministic inference pass: per-omic posteriors, gates and fusion."""
    posts = [M.encode(x, e, name) for x, e, name in zip(xs, model.encoders, model.omics)]
    alphas = M.gate(posts, model.gating)
    return posts, alphas, M.poe_fuse(posts, alphas)


@dataclass
class TrainHistory:
    omics: List[str]
    train: List[LossBreakdown] = field(default_factory=list)
    val: List[LossBreakdown] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def n_epochs(self):
        return len(self.val)

    def rows(self):
        out = []
        for e, (tr, va) in enumerate(zip(self.train, self.val), start=1):
            row = {"epoch": e}
            row.update(tr.as_row("train", self.omics))
            row.update(va.as_row("val", self.omics))
            out.append(row)
        return out

    def write_csv(self, path):
        rows = self.rows()
        if not rows:
            raise ContractError("empty history")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = list(rows[0])
            w.writerow(cols)
            for r in rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in cols[1:]])


def _average(parts: List[Tuple[LossBreakdown, int]]) -> LossBreakdown:
    total_n = sum(n for _, n in parts)
    recon = [sum(b.recon[v] * n for b, n in parts) / total_n for v in range(len(parts[0][0].recon))]
    kl = sum(b.kl * n for b, n in parts) / total_n
    pen = [sum(b.penalty[v] * n for b, n in parts) / total_n for v in range(len(parts[0][0].penalty))]
    return LossBreakdown.build(recon, kl, pen)


def train(dataset, split, config: TrainConfig, callback=None):
    """Mini-batch AdamW training with a spike-and-slab EM refresh after every
    step and early stopping on the validation total.

    Returns the parameters of the best validation epoch and the history.
    """
    train_idx = np.asarray(split.train, dtype=np.int64)
    val_idx = np.asarray(split.val, dtype=np.int64)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ContractError("train and validation splits must be non-empty")
    xs = [np.asarray(m.values, dtype=np.float64) for m in dataset.matrices]
    omics = [m.name for m in dataset.matrices]
    model = build_model(omics, [x.shape[1] for x in xs], config)
    params = model.named_arrays()
    opt = init_opt_state(params, lr=config.lr, weight_decay=config.weight_decay)
    k = config.latent_dim
    noise_rng = np.random.default_rng([config.seed, 1])
    val_eps = np.random.default_rng([config.seed, 3]).standard_normal((val_idx.size, k))
    val_batch = [x[val_idx] for x in xs]
    history = TrainHistory(omics)
    best_val = math.inf
    best_model = model.copy()
    since_best = 0
    bs = config.batch_size
    # the prior is counted once per dataset, so on the per-sample scale it
    # carries 1/N_train of its weight
    pw = 1.0 / train_idx.size if config.penalty_scale == "per_sample" else 1.0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(train_idx)
        parts = []
        for start in range(0, order.size, bs):
            idx = order[start:start + bs]
            batch = [x[idx] for x in xs]
            eps = noise_rng.standard_normal((idx.size, k))
            loss, grads = elbo_step(batch, model, eps, penalty_weight=pw)
            adamw_step(params, grads, opt)
            for v, state in enumerate(model.ssl):
                ssl_em_update(model.loadings[v].W, state)
            parts.append((loss, idx.size))
        history.train.append(_average(parts))
        val_loss, _ = elbo_step(val_batch, model, val_eps, compute_grads=False, penalty_weight=pw)
        history.val.append(val_loss)
        if val_loss.total < best_val:
            best_val = val_loss.total
            best_model = model.copy()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if callback is not None:
            callback(epoch, history, model)
        if since_best >= config.patience:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"
    log.info("training stopped after %d epochs (%s), best epoch %d",
             history.n_epochs, history.stop_reason, history.best_epoch + 1)
    return best_model, history
