"""Cross-modal fusion of paired optical/SAR token grids.

Covers the symmetric token-level contrastive alignment loss, the
learnable-query mutual-attention importance weighting, scale-preserving
reweight-and-concatenate fusion, and token dropping by importance or at
random. Scalar losses are accumulated with ``math.fsum`` so batch
permutations reproduce values exactly.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .model import TokenGrid
from .tensor import DimensionError, DomainError, f32, f64

DEFAULT_TEMPERATURE = 0.07


@dataclasses.dataclass
class ModalityPair:
    optical: TokenGrid
    sar: TokenGrid

    def __post_init__(self):
        if self.optical.tokens.shape != self.sar.tokens.shape or self.optical.grid != self.sar.grid:
            raise DimensionError("paired modalities must share token count, width, and grid")


@dataclasses.dataclass
class FusionParams:
    queries: np.ndarray          # (k, D) learnable
    tau_cl: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.queries.ndim != 2 or self.queries.shape[0] < 1:
            raise DimensionError(f"queries must be (k>=1, D), got {self.queries.shape}")
        if not self.tau_cl > 0:
            raise DomainError("contrastive temperature must be positive")


@dataclasses.dataclass
class ImportanceWeights:
    w_s: np.ndarray
    w_o: np.ndarray


def _unit_tokens(batch, name):
    """Stack a list of (P, D) grids, returning float64 tokens, norms, units."""
    arr = np.stack([np.asarray(t, dtype=f64) for t in batch])
    norms = np.linalg.norm(arr, axis=-1)
    if np.any(norms == 0.0):
        raise DomainError(f"zero token vector in {name} batch")
    return arr, norms, arr / norms[..., None]


def _pairwise_cosine_mean(batch_o, batch_s):
    if len(batch_o) != len(batch_s):
        raise DimensionError("batches must have equal size")
    if len(batch_o) == 0:
        raise DomainError("contrastive loss needs a nonempty batch")
    o, no, ohat = _unit_tokens(batch_o, "optical")
    s, ns, shat = _unit_tokens(batch_s, "sar")
    if o.shape[1:] != s.shape[1:]:
        raise DimensionError(f"token shapes disagree: {o.shape[1:]} vs {s.shape[1:]}")
    cos = np.clip(np.einsum("ipd,jpd->ijp", ohat, shat), -1.0, 1.0)   # (B, B, P)
    return cos.mean(axis=-1), cos, (no, ohat), (ns, shat)


def _lse(values):
    m = float(np.max(values))
    return m + math.log(math.fsum(math.exp(float(v) - m) for v in values))


def contrastive_loss(batch_o: list, batch_s: list, tau: float = DEFAULT_TEMPERATURE) -> float:
    """Symmetric InfoNCE over paired grids with score exp(mean token cosine / tau).

    Each pair index i is the positive for both directions; all other batch
    members are negatives. Zero at batch size 1.
    """
    value, _ = _contrastive_impl(batch_o, batch_s, tau, want_grad=False)
    return value


def contrastive_loss_grad(batch_o: list, batch_s: list, tau: float = DEFAULT_TEMPERATURE):
    """(value, vjp); vjp(dout) returns (d_optical, d_sar) as (B, P, D) arrays."""
    return _contrastive_impl(batch_o, batch_s, tau, want_grad=True)


def _contrastive_impl(batch_o, batch_s, tau, want_grad):
    if not tau > 0:
        raise DomainError("temperature must be positive")
    c, cos, (no, ohat), (ns, shat) = _pairwise_cosine_mean(batch_o, batch_s)
    b = c.shape[0]
    logits = c / tau
    terms = []
    for i in range(b):
        terms.append(logits[i, i] - _lse(logits[i, :]))   # optical -> sar direction
        terms.append(logits[i, i] - _lse(logits[:, i]))   # sar -> optical direction
    value = -math.fsum(terms) / b
    if not want_grad:
        return value, None

    row_sm = np.exp(logits - _softmax_shift(logits, axis=1))
    row_sm /= row_sm.sum(axis=1, keepdims=True)
    col_sm = np.exp(logits - _softmax_shift(logits, axis=0))
    col_sm /= col_sm.sum(axis=0, keepdims=True)
    eye = np.eye(b)
    dc_base = -(1.0 / (b * tau)) * (2.0 * eye - row_sm - col_sm)

    p = cos.shape[-1]

    def vjp(dout: float = 1.0):
        dc = dout * dc_base / p                                # (B, B) shared per token
        d_o = (np.einsum("ij,jpd->ipd", dc, shat)
               - np.einsum("ij,ijp->ip", dc, cos)[..., None] * ohat) / no[..., None]
        d_s = (np.einsum("ij,ipd->jpd", dc, ohat)
               - np.einsum("ij,ijp->jp", dc, cos)[..., None] * shat) / ns[..., None]
        return d_o, d_s

    return value, vjp


def _softmax_shift(x, axis):
    return np.max(x, axis=axis, keepdims=True)


def _importance_scores(reference, modulated_tokens, queries):
    # scores[k, p] = <mean_p(reference), queries[k] * tokens[p]> / sqrt(D)
    d = modulated_tokens.shape[1]
    ref = reference.mean(axis=0)
    return np.einsum("d,kd,pd->kp", ref, queries, modulated_tokens) / math.sqrt(d)


def mutual_attention(pair: ModalityPair, params: FusionParams) -> ImportanceWeights:
    """Per-token importance of each modality in the context of the other.

    Learnable queries modulate one modality's tokens element-wise; scores
    against the other modality's mean token are averaged over queries and
    softmax-normalized over the token axis.
    """
    weights, _ = _mutual_attention_impl(pair, params, want_grad=False)
    return ImportanceWeights(w_s=weights.w_s.astype(f32), w_o=weights.w_o.astype(f32))


def mutual_attention_grad(pair: ModalityPair, params: FusionParams):
    """(ImportanceWeights, vjp); vjp(dw_s, dw_o) -> (d_queries, d_optical, d_sar)."""
    return _mutual_attention_impl(pair, params, want_grad=True)


def _mutual_attention_impl(pair, params, want_grad):
    o = pair.optical.tokens.astype(f64)
    s = pair.sar.tokens.astype(f64)
    qm = params.queries.astype(f64)
    if qm.shape[1] != o.shape[1]:
        raise DimensionError(f"query width {qm.shape[1]} != token width {o.shape[1]}")
    k, d = qm.shape
    p = o.shape[0]
    scale = 1.0 / math.sqrt(d)

    scores_s = _importance_scores(o, s, qm)      # (k, P): SAR tokens scored vs optical context
    scores_o = _importance_scores(s, o, qm)
    mean_s = scores_s.mean(axis=0)
    mean_o = scores_o.mean(axis=0)
    w_s = _stable_softmax(mean_s)
    w_o = _stable_softmax(mean_o)
    weights = ImportanceWeights(w_s=w_s, w_o=w_o)
    if not want_grad:
        return weights, None

    o_mean = o.mean(axis=0)
    s_mean = s.mean(axis=0)

    def vjp(dw_s=None, dw_o=None):
        d_q = np.zeros_like(qm)
        d_o = np.zeros_like(o)
        d_s = np.zeros_like(s)
        if dw_s is not None:
            dm = _softmax_vjp(w_s, np.asarray(dw_s, dtype=f64))
            d_sc = np.broadcast_to(dm / k, (k, p))                     # (k, P)
            d_q += np.einsum("kp,d,pd->kd", d_sc, o_mean, s) * scale
            d_s += np.einsum("kp,d,kd->pd", d_sc, o_mean, qm) * scale
            d_ref = np.einsum("kp,kd,pd->d", d_sc, qm, s) * scale
            d_o += d_ref / p
        if dw_o is not None:
            dm = _softmax_vjp(w_o, np.asarray(dw_o, dtype=f64))
            d_sc = np.broadcast_to(dm / k, (k, p))
            d_q += np.einsum("kp,d,pd->kd", d_sc, s_mean, o) * scale
            d_o += np.einsum("kp,d,kd->pd", d_sc, s_mean, qm) * scale
            d_ref = np.einsum("kp,kd,pd->d", d_sc, qm, o) * scale
            d_s += d_ref / p
        return d_q, d_o, d_s

    return weights, vjp


def _stable_softmax(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


def _softmax_vjp(y, dy):
    return y * (dy - float(np.sum(dy * y)))


def naive_attention_weights(pair: ModalityPair) -> ImportanceWeights:
    """Baseline weights: softmax over per-position cosine of the paired tokens
    (no learnable queries; both modalities share the same weight vector)."""
    weights, _ = _naive_attention_impl(pair, want_grad=False)
    return ImportanceWeights(w_s=weights.w_s.astype(f32), w_o=weights.w_o.astype(f32))


def naive_attention_weights_grad(pair: ModalityPair):
    return _naive_attention_impl(pair, want_grad=True)


def _naive_attention_impl(pair, want_grad):
    o = pair.optical.tokens.astype(f64)
    s = pair.sar.tokens.astype(f64)
    no = np.linalg.norm(o, axis=1)
    ns = np.linalg.norm(s, axis=1)
    if np.any(no == 0.0) or np.any(ns == 0.0):
        raise DomainError("zero token vector in naive attention")
    ohat = o / no[:, None]
    shat = s / ns[:, None]
    cos = np.clip(np.einsum("pd,pd->p", ohat, shat), -1.0, 1.0)
    w = _stable_softmax(cos)
    weights = ImportanceWeights(w_s=w, w_o=w.copy())
    if not want_grad:
        return weights, None

    def vjp(dw_s=None, dw_o=None):
        dw = np.zeros_like(w)
        if dw_s is not None:
            dw = dw + np.asarray(dw_s, dtype=f64)
        if dw_o is not None:
            dw = dw + np.asarray(dw_o, dtype=f64)
        dcos = _softmax_vjp(w, dw)
        d_o = dcos[:, None] * (shat - cos[:, None] * ohat) / no[:, None]
        d_s = dcos[:, None] * (ohat - cos[:, None] * shat) / ns[:, None]
        return d_o, d_s

    return weights, vjp


def uniform_weights(p: int) -> ImportanceWeights:
    w = np.full(p, 1.0 / p, dtype=f32)
    return ImportanceWeights(w_s=w, w_o=w.copy())


def fuse(pair: ModalityPair, weights: ImportanceWeights) -> TokenGrid:
    """Scale each token by P * weight and concatenate, optical block first.

    Uniform weights make this plain concatenation. The fused grid stacks the
    two modality blocks vertically: (2*Ht, Wt).
    """
    grid, _ = _fuse_impl(pair, weights, f32, want_grad=False)
    return grid


def fuse_grad(pair: ModalityPair, weights: ImportanceWeights):
    """(TokenGrid, vjp); vjp(d_out) -> (d_optical, d_sar, d_w_o, d_w_s)."""
    return _fuse_impl(pair, weights, f64, want_grad=True)


def _fuse_impl(pair, weights, dtype, want_grad):
    o = pair.optical.tokens.astype(f64)
    s = pair.sar.tokens.astype(f64)
    p = o.shape[0]
    w_o = np.asarray(weights.w_o, dtype=f64)
    w_s = np.asarray(weights.w_s, dtype=f64)
    if w_o.shape != (p,) or w_s.shape != (p,):
        raise DimensionError(f"weight length must be {p}")
    scaled_o = (p * w_o)[:, None] * o
    scaled_s = (p * w_s)[:, None] * s
    tokens = np.concatenate([scaled_o, scaled_s], axis=0).astype(dtype)
    ht, wt = pair.optical.grid
    grid = TokenGrid(tokens, (2 * ht, wt), "fused")
    if not want_grad:
        return grid, None

    def vjp(d_out):
        d_out = np.asarray(d_out, dtype=f64)
        d_top, d_bot = d_out[:p], d_out[p:]
        d_o = (p * w_o)[:, None] * d_top
        d_s = (p * w_s)[:, None] * d_bot
        d_w_o = p * np.einsum("pd,pd->p", d_top, o)
        d_w_s = p * np.einsum("pd,pd->p", d_bot, s)
        return d_o, d_s, d_w_o, d_w_s

    return grid, vjp


def token_drop(tokens: TokenGrid, w: np.ndarray, keep_ratio: float,
               strategy: str = "importance", seed: int = 0) -> TokenGrid:
    """Keep ceil(keep_ratio * P) tokens, preserving their relative order.

    ``importance`` keeps the largest-weight tokens (ties to the lower index);
    ``random`` keeps a seeded uniform sample. Retained tokens keep their
    original position slots.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise DomainError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    if strategy not in ("random", "importance"):
        raise DomainError(f"unknown drop strategy {strategy!r}")
    p = tokens.count
    w = np.asarray(w, dtype=f64)
    if w.shape != (p,):
        raise DimensionError(f"weight length {w.shape} must match token count {p}")
    n = math.ceil(keep_ratio * p)
    if n >= p:
        return TokenGrid(tokens.tokens, tokens.grid, tokens.modality, tokens.positions)
    if strategy == "importance":
        kept = np.sort(np.argsort(-w, kind="stable")[:n])
    else:
        rng = np.random.default_rng(seed)
        kept = np.sort(rng.choice(p, size=n, replace=False))
    base = tokens.positions if tokens.positions is not None else np.arange(p)
    return TokenGrid(tokens.tokens[kept], (n, 1), tokens.modality,
                     positions=np.asarray(base)[kept])
