"""Network pieces: per-omic encoders, the gating network, gated
product-of-experts fusion, reparameterisation and the sparse decoder.

Every differentiable step has a ``*_backward`` companion so the objective can
chain exact gradients without an autodiff engine.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from ._accel import USE_NUMBA
from .errors import ContractError, NumericError, ShapeError
from .numerics import MlpCache, MlpParams, init_mlp, mlp_backward, mlp_forward
from .sparsity import FactorLoadings, SSLState, init_loadings

LOGVAR_CLAMP = 10.0


@dataclass
class ModalityPosterior:
    mu: np.ndarray
    logvar: np.ndarray  # already clamped

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar)

    @property
    def precision(self) -> np.ndarray:
        return np.exp(-self.logvar)


@dataclass
class GatingWeights:
    alpha: np.ndarray  # N x V


@dataclass
class FusedPosterior:
    mu: np.ndarray
    var: np.ndarray


@dataclass
class LatentSample:
    z: np.ndarray
    eps: np.ndarray


@dataclass
class DecoderParams:
    """Shared trunk ``K -> ... -> 1`` plus one output bias per feature."""

    trunk: MlpParams
    bias: np.ndarray

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.trunk.copy(), self.bias.copy())


@dataclass
class ModelParams:
    omics: List[str]
    encoders: List[MlpParams]
    gating: MlpParams
    decoders: List[DecoderParams]
    loadings: List[FactorLoadings]
    ssl: Optional[List[SSLState]] = None
    # per-feature observation log-variances; None means fixed unit variance
    obs_logvar: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        v = len(self.omics)
        if not (len(self.encoders) == len(self.decoders) == len(self.loadings) == v):
            raise ContractError("one encoder, decoder and loading matrix per omic")
        for dec, load in zip(self.decoders, self.loadings):
            if dec.bias.shape != (load.W.shape[0],):
                raise ShapeError("decoder bias length must equal the omic's feature count")

    @property
    def latent_dim(self) -> int:
        return self.loadings[0].W.shape[1]

    @property
    def feature_dims(self) -> List[int]:
        return [l.W.shape[0] for l in self.loadings]

    def named_arrays(self):
        out = {}
        for v in range(len(self.omics)):
            out.update(self.encoders[v].named_arrays(f"enc{v}"))
        out.update(self.gating.named_arrays("gate"))
        for v in range(len(self.omics)):
            out.update(self.decoders[v].trunk.named_arrays(f"dec{v}"))
            out[f"dec{v}.bias"] = self.decoders[v].bias
            out[f"W{v}"] = self.loadings[v].W
            if self.obs_logvar is not None:
                out[f"obs{v}"] = self.obs_logvar[v]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            list(self.omics),
            [e.copy() for e in self.encoders],
            self.gating.copy(),
            [d.copy() for d in self.decoders],
            [FactorLoadings(l.W.copy(), l.omic) for l in self.loadings],
            None if self.ssl is None else [s.copy() for s in self.ssl],
            None if self.obs_logvar is None else [o.copy() for o in self.obs_logvar],
        )


def init_model(
    omics: Sequence[str],
    feature_dims: Sequence[int],
    latent_dim: int = 32,
    encoder_hidden: Sequence[int] = (256,),
    gating_hidden: Sequence[int] = (64,),
    decoder_hidden: Sequence[int] = (64,),
    seed: int = 21,
) -> ModelParams:
    if len(omics) != len(feature_dims) or not omics:
        raise ContractError("need one feature count per omic, at least one omic")
    rng = np.random.default_rng(seed)
    k = latent_dim
    v = len(omics)
    encoders = [init_mlp([d, *encoder_hidden, 2 * k], rng) for d in feature_dims]
    gating = init_mlp([2 * v * k, *gating_hidden, v], rng)
    decoders = [DecoderParams(init_mlp([k, *decoder_hidden, 1], rng), np.zeros(d)) for d in feature_dims]
    loadings = [init_loadings(d, k, rng, name) for d, name in zip(feature_dims, omics)]
    return ModelParams(list(omics), encoders, gating, decoders, loadings)


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------


@dataclass
class EncodeCache:
    mlp: MlpCache
    raw_logvar: np.ndarray


def encode_forward(x, encoder: MlpParams, omic: str = ""):
    if x.ndim != 2 or x.shape[1] != encoder.in_dim:
        raise ShapeError(f"omic {omic!r}: {x.shape[1] if x.ndim == 2 else x.shape} features, encoder expects {encoder.in_dim}")
    out, cache = mlp_forward(encoder, x)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite encoder activations for omic {omic!r}")
    k = out.shape[1] // 2
    raw = out[:, k:]
    post = ModalityPosterior(out[:, :k].copy(), np.clip(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP))
    return post, EncodeCache(cache, raw)


def encode(x, encoder: MlpParams, omic: str = "") -> ModalityPosterior:
    return encode_forward(x, encoder, omic)[0]


def encode_backward(encoder: MlpParams, cache: EncodeCache, d_mu, d_logvar):
    raw = cache.raw_logvar
    inside = (raw > -LOGVAR_CLAMP) & (raw < LOGVAR_CLAMP)
    g = np.concatenate([d_mu, d_logvar * inside], axis=1)
    grads, _ = mlp_backward(encoder, cache.mlp, g)
    return grads


# --------------------------------------------------------------------------
# gating
# --------------------------------------------------------------------------


def gating_input(posteriors: Sequence[ModalityPosterior]) -> np.ndarray:
    if not posteriors:
        raise ContractError("gating needs at least one modality")
    n, k = posteriors[0].mu.shape
    for p in posteriors:
        if p.mu.shape != (n, k):
            raise ShapeError("posteriors disagree on batch size or latent dimension")
    return np.concatenate([np.concatenate([p.mu, p.logvar], axis=1) for p in posteriors], axis=1)


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def gate_forward(posteriors, gating_net: MlpParams):
    inp = gating_input(posteriors)
    logits, cache = mlp_forward(gating_net, inp)
    if logits.shape[1] != len(posteriors):
        raise ShapeError(f"gating net emits {logits.shape[1]} weights for {len(posteriors)} modalities")
    return GatingWeights(softmax(logits)), cache


def gate(posteriors, gating_net: MlpParams) -> GatingWeights:
    return gate_forward(posteriors, gating_net)[0]


def gate_backward(gating_net, cache, alpha, d_alpha):
    """Returns parameter grads and per-omic ``(d_mu, d_logvar)`` pairs."""
    d_logits = alpha * (d_alpha - (d_alpha * alpha).sum(axis=1, keepdims=True))
    grads, d_in = mlp_backward(gating_net, cache, d_logits)
    k = d_in.shape[1] // (2 * alpha.shape[1])
    parts = []
    for v in range(alpha.shape[1]):
        block = d_in[:, 2 * k * v: 2 * k * (v + 1)]
        parts.append((block[:, :k], block[:, k:]))
    return grads, parts


# --------------------------------------------------------------------------
# product of experts
# --------------------------------------------------------------------------


def poe_fuse(posteriors: Sequence[ModalityPosterior], alphas: GatingWeights) -> FusedPosterior:
    """Precision-weighted fusion with per-sample modality weights:
    ``var_s = 1 / sum_v a_v tau_v`` and ``mu_s = var_s * sum_v a_v tau_v mu_v``."""
    if not posteriors:
        raise ContractError("fusion needs at least one posterior")
    alpha = alphas.alpha
    if alpha.shape != (posteriors[0].mu.shape[0], len(posteriors)):
        raise ShapeError(f"alpha shape {alpha.shape} does not match posteriors")
    total = np.zeros_like(posteriors[0].mu)
    weighted = np.zeros_like(total)
    for v, p in enumerate(posteriors):
        t = alpha[:, v:v + 1] * p.precision
        total += t
        weighted += t * p.mu
    if not np.all(total > 0):
        raise NumericError("fused precision is not positive")
    return FusedPosterior(weighted / total, 1.0 / total)


def poe_backward(posteriors, alpha, fused: FusedPosterior, d_mu_s, d_var_s):
    """Gradients w.r.t. each expert's (mu, logvar) and the weights alpha."""
    total = 1.0 / fused.var
    d_alpha = np.empty_like(alpha)
    parts = []
    for v, p in enumerate(posteriors):
        tau = p.precision
        a = alpha[:, v:v + 1]
        t = a * tau
        d_t = d_mu_s * (p.mu - fused.mu) / total - d_var_s / (total * total)
        d_alpha[:, v] = (d_t * tau).sum(axis=1)
        d_mu_v = d_mu_s * t / total
        d_logvar_v = -(d_t * a) * tau
        parts.append((d_mu_v, d_logvar_v))
    return parts, d_alpha


def reparameterize(fused: FusedPosterior, rng=None, eps=None) -> LatentSample:
    if eps is None:
        if rng is None:
            raise ContractError("need either a generator or fixed noise")
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        eps = rng.standard_normal(fused.mu.shape)
    if eps.shape != fused.mu.shape:
        raise ShapeError("noise shape does not match the posterior")
    return LatentSample(fused.mu + np.sqrt(fused.var) * eps, eps)


def reparameterize_backward(fused: FusedPosterior, sample: LatentSample, d_z):
    sd = np.sqrt(fused.var)
    return d_z, d_z * sample.eps / (2.0 * sd)


# --------------------------------------------------------------------------
# sparse decoder
# --------------------------------------------------------------------------


def _as_array(z):
    return z.z if isinstance(z, LatentSample) else np.asarray(z, dtype=np.float64)


def _check_decoder(z, W, decoder: DecoderParams):
    if z.ndim != 2 or W.ndim != 2 or z.shape[1] != W.shape[1]:
        raise ShapeError(f"latent {z.shape} and loadings {W.shape} disagree on K")
    if decoder.trunk.in_dim != W.shape[1] or decoder.trunk.out_dim != 1:
        raise ShapeError("decoder trunk must map K -> 1")
    if decoder.bias.shape != (W.shape[0],):
        raise ShapeError("decoder bias must have one entry per feature")


def fused_trunk(trunk: MlpParams) -> bool:
    """True when the trunk has the single relu hidden layer the numba kernel handles."""
    ls = trunk.layers
    return len(ls) == 2 and ls[0].activation == "relu" and ls[1].activation == "identity"


@dataclass
class DecodeCache:
    z: np.ndarray
    W: np.ndarray
    fused: bool
    pre: Optional[np.ndarray] = None
    mlp: Optional[MlpCache] = None


def sparse_decode_forward(z, W, decoder: DecoderParams, use_kernel: Optional[bool] = None):
    """Batched decode of all features; returns ``(recon, cache)``.

    The numba kernel runs when enabled and the trunk shape allows it;
    otherwise every masked latent ``z[n] * W[j]`` is materialised as one
    ``(N*D, K)`` batch and pushed through the trunk in a single pass.
    """
    z = _as_array(z)
    W = W.W if isinstance(W, FactorLoadings) else W
    _check_decoder(z, W, decoder)
    n, k = z.shape
    d = W.shape[0]
    if use_kernel is None:
        use_kernel = USE_NUMBA
    if use_kernel and fused_trunk(decoder.trunk):
        l1, l2 = decoder.trunk.layers
        out, pre = kernels.decode_forward(
            np.ascontiguousarray(z), np.ascontiguousarray(W), l1.weight, l1.bias,
            np.ascontiguousarray(l2.weight[:, 0]), l2.bias[0], decoder.bias, store_pre=True,
        )
        return out, DecodeCache(z, W, True, pre=pre)
    masked = (z[:, None, :] * W[None, :, :]).reshape(n * d, k)
    out, cache = mlp_forward(decoder.trunk, masked)
    recon = out.reshape(n, d) + decoder.bias
    return recon, DecodeCache(z, W, False, mlp=cache)


def sparse_decode(z, W, decoder: DecoderParams, use_kernel: Optional[bool] = None) -> np.ndarray:
    z = _as_array(z)
    Wm = W.W if isinstance(W, FactorLoadings) else W
    _check_decoder(z, Wm, decoder)
    if (USE_NUMBA if use_kernel is None else use_kernel) and fused_trunk(decoder.trunk):
        l1, l2 = decoder.trunk.layers
        out, _ = kernels.decode_forward(
            np.ascontiguousarray(z), np.ascontiguousarray(Wm), l1.weight, l1.bias,
            np.ascontiguousarray(l2.weight[:, 0]), l2.bias[0], decoder.bias,
        )
        return out
    return sparse_decode_forward(z, Wm, decoder, use_kernel=False)[0]


def sparse_decode_backward(decoder: DecoderParams, cache: DecodeCache, grad):
    """Returns ``(trunk_grads, d_bias, d_z, d_W)``."""
    z, W = cache.z, cache.W
    n, k = z.shape
    d = W.shape[0]
    d_bias = grad.sum(axis=0)
    if cache.fused:
        l1, l2 = decoder.trunk.layers
        dz, dW, dW1, db1, dw2 = kernels.decode_backward(
            np.ascontiguousarray(z), np.ascontiguousarray(W), l1.weight,
            np.ascontiguousarray(l2.weight[:, 0]), cache.pre, np.ascontiguousarray(grad),
        )
        trunk_grads = [(dW1, db1), (dw2[:, None], np.array([grad.sum()]))]
        return trunk_grads, d_bias, dz, dW
    trunk_grads, d_masked = mlp_backward(decoder.trunk, cache.mlp, grad.reshape(n * d, 1))
    d_masked = d_masked.reshape(n, d, k)
    d_z = np.einsum("ndk,dk->nk", d_masked, W)
    d_W = np.einsum("ndk,nk->dk", d_masked, z)
    return trunk_grads, d_bias, d_z, d_W


def sparse_decode_reference(z, W, decoder: DecoderParams) -> np.ndarray:
    """Feature-by-feature decode: one trunk evaluation per masked latent block."""
    z = _as_array(z)
    W = W.W if isinstance(W, FactorLoadings) else W
    _check_decoder(z, W, decoder)
    out = np.empty((z.shape[0], W.shape[0]))
    for j in range(W.shape[0]):
        col, _ = mlp_forward(decoder.trunk, z * W[j])
        out[:, j] = col[:, 0] + decoder.bias[j]
    return out
