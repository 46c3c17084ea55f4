"""Attention supervision for pixel grounding.

Ground-truth masks become token-level target distributions; the head-averaged
seg-to-image attention map is pushed toward them with a KL penalty, summed
over a configurable selection of layers.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .model import AttentionStack
from .tensor import KL_EPS, DimensionError, DomainError, _softmax64, f32, f64

LAYER_MODES = ("first", "middle", "last", "all")


@dataclasses.dataclass
class MaskTarget:
    """Per-seg-token distribution over image tokens; ``valid[q]`` is False when
    the source mask was empty (such rows carry a uniform placeholder and are
    skipped by the loss)."""

    g: np.ndarray        # (Q, P)
    valid: np.ndarray    # (Q,) bool

    def __post_init__(self):
        if self.g.ndim != 2 or self.valid.shape != (self.g.shape[0],):
            raise DimensionError(f"target shapes disagree: g {self.g.shape}, valid {self.valid.shape}")


def select_layers(mode: str, depth: int) -> list[int]:
    """Resolve a layer-selection mode to concrete layer indices."""
    if mode not in LAYER_MODES:
        raise DomainError(f"unknown layer mode {mode!r}; expected one of {LAYER_MODES}")
    if depth < 1:
        raise DimensionError("model depth must be >= 1")
    if mode == "all":
        return list(range(depth))
    index = {"first": 0, "middle": depth // 2, "last": depth - 1}[mode]
    return [index]


def seg_to_image_map(attn: AttentionStack) -> np.ndarray:
    """Head-averaged softmax over image tokens of the raw seg-to-image logits."""
    raw = np.asarray(attn.raw)
    if raw.ndim != 4:
        raise DimensionError(f"raw attention must be (L, H, Q, P), got {raw.shape}")
    return np.mean(_softmax64(raw, axis=-1), axis=1).astype(f32)


def seg_to_image_map_grad(raw: np.ndarray):
    """(map, vjp) in float64; vjp maps d_map (L,Q,P) to d_raw (L,H,Q,P)."""
    raw = np.asarray(raw, dtype=f64)
    heads = raw.shape[1]
    probs = _softmax64(raw, axis=-1)
    value = np.mean(probs, axis=1)

    def vjp(d_map):
        d_probs = np.asarray(d_map, dtype=f64)[:, None, :, :] / heads
        inner = np.sum(d_probs * probs, axis=-1, keepdims=True)
        return probs * (d_probs - inner)

    return value, vjp


def mask_to_target(mask: np.ndarray, grid: tuple[int, int]) -> tuple[np.ndarray, bool]:
    """Average-pool a binary mask onto the token grid and normalize it.

    Soft masks are rounded at 0.5. Returns ``(g, valid)`` where g sums to 1;
    an empty mask yields the uniform distribution with valid=False.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got {mask.shape}")
    h, w = mask.shape
    ht, wt = grid
    if h % ht != 0 or w % wt != 0:
        raise DimensionError(f"mask size {(h, w)} not divisible by grid {grid}")
    binary = (mask.astype(f64) >= 0.5).astype(np.int64)
    ph, pw = h // ht, w // wt
    counts = binary.reshape(ht, ph, wt, pw).sum(axis=(1, 3))   # integer pixel counts per cell
    assert int(counts.sum()) == int(binary.sum())
    total = int(counts.sum())
    p = ht * wt
    if total == 0:
        return np.full(p, 1.0 / p, dtype=f32), False
    pooled = counts.reshape(p).astype(f64) / (ph * pw) + KL_EPS
    return (pooled / pooled.sum()).astype(f32), True


def sap_loss(attention_map: np.ndarray, target: MaskTarget, mode: str = "all",
             reverse: bool = False) -> float:
    """Sum over selected layers and valid seg tokens of KL(map row || target).

    ``reverse`` swaps the KL arguments (harness-level switch); invalid seg
    tokens contribute zero.
    """
    value, _ = _sap_loss_impl(attention_map, target, mode, reverse, want_grad=False)
    return value


def sap_loss_grad(attention_map: np.ndarray, target: MaskTarget, mode: str = "all",
                  reverse: bool = False):
    """(value, d_map): gradient of the selected-layer KL sum w.r.t. the map."""
    return _sap_loss_impl(attention_map, target, mode, reverse, want_grad=True)


def _sap_loss_impl(attention_map, target, mode, reverse, want_grad):
    amap = np.asarray(attention_map, dtype=f64)
    if amap.ndim != 3:
        raise DimensionError(f"attention map must be (L, Q, P), got {amap.shape}")
    depth, q_count, p = amap.shape
    if target.g.shape != (q_count, p):
        raise DimensionError(f"target shape {target.g.shape} does not match map {(q_count, p)}")
    layers = select_layers(mode, depth)
    g = target.g.astype(f64)

    total = 0.0
    d_map = np.zeros_like(amap) if want_grad else None
    for li in layers:
        for qi in range(q_count):
            if not target.valid[qi]:
                continue
            row = amap[li, qi]
            tgt = g[qi]
            if reverse:
                total += float(np.sum(tgt * np.log((tgt + KL_EPS) / (row + KL_EPS))))
                if want_grad:
                    d_map[li, qi] = -tgt / (row + KL_EPS)
            else:
                total += float(np.sum(row * np.log((row + KL_EPS) / (tgt + KL_EPS))))
                if want_grad:
                    d_map[li, qi] = np.log((row + KL_EPS) / (tgt + KL_EPS)) + row / (row + KL_EPS)
    return total, d_map


def sap_normalizer(mode: str, depth: int, valid: np.ndarray) -> int:
    """|selected layers| * |valid seg tokens|, at least 1 (for loss scaling)."""
    return max(1, len(select_layers(mode, depth)) * int(np.sum(valid)))
