"""Toy multimodal transformer with hand-derived reverse-mode gradients.

The model runs full bidirectional self-attention over the sequence
[image tokens; segmentation tokens; text tokens], adds token-type embeddings
(and learned per-position embeddings for image tokens), and exposes, for
every layer and head, the pre-softmax attention logits from each segmentation
token to the image tokens. Final-layer segmentation-token states feed a
dot-product mask decoder; the final text position feeds a small answer head.

``forward`` returns the float32 contract. ``forward_grad`` runs the same
computation in float64 and returns a vjp closure so finite-difference checks
and training are not limited by float32 quantization.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .tensor import DimensionError, DomainError, _softmax64, f32, f64


@dataclasses.dataclass
class TokenGrid:
    """P image tokens of width D laid out on an Ht x Wt grid.

    ``positions`` carries each token's original slot for position-embedding
    lookup; None means the identity layout 0..P-1. Token subsets produced by
    dropping keep their original slots here.
    """

    tokens: np.ndarray
    grid: tuple[int, int]
    modality: str
    positions: np.ndarray | None = None

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise DimensionError(f"tokens must be (P, D), got {self.tokens.shape}")
        ht, wt = self.grid
        if ht * wt != self.tokens.shape[0]:
            raise DimensionError(f"grid {self.grid} does not cover {self.tokens.shape[0]} tokens")
        if self.positions is not None and len(self.positions) != self.tokens.shape[0]:
            raise DimensionError("positions length must equal token count")

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclasses.dataclass
class SegTokenSet:
    """Learnable segmentation query embeddings, one row per seg token."""

    embeddings: np.ndarray

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise DimensionError(f"embeddings must be (Q>=1, D), got {self.embeddings.shape}")


@dataclasses.dataclass
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclasses.dataclass
class ModelParams:
    """All trainable arrays of the toy transformer plus its static sizes."""

    layers: list[LayerParams]
    heads: int
    tok_type: np.ndarray     # (3, D): image / seg / text spans
    pos_img: np.ndarray      # (P_img, D) learned image-position embeddings
    text_emb: np.ndarray     # (V_text, D)
    answer_head: np.ndarray  # (D, V_ans)
    w_mask: np.ndarray       # (D, D) mask-decoder projection
    use_positions: bool = True

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return self.tok_type.shape[1]

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclasses.dataclass
class AttentionStack:
    """Seg-to-image attention: raw pre-softmax logits and the head-averaged,
    image-normalized map (rows sum to 1)."""

    raw: np.ndarray         # (L, H, Q, P)
    normalized: np.ndarray  # (L, Q, P)


@dataclasses.dataclass
class ForwardOutput:
    hidden: np.ndarray         # (T, D)
    attn: AttentionStack
    seg_hidden: np.ndarray     # (Q, D)
    answer_logits: np.ndarray  # (V_ans,)


@dataclasses.dataclass
class ForwardGrads:
    """Cotangents returned by the forward vjp."""

    params: dict[str, np.ndarray]
    seg_embeddings: np.ndarray
    image_tokens: np.ndarray


def init_model(
    seed: int,
    layers: int,
    heads: int,
    width: int,
    image_positions: int,
    text_vocab: int,
    answer_vocab: int,
    ffn_hidden: int | None = None,
    use_positions: bool = True,
) -> ModelParams:
    """Seeded uniform(-1/sqrt(D), 1/sqrt(D)) initialization of all arrays."""
    if width % heads != 0:
        raise DimensionError(f"width {width} not divisible by heads {heads}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(width)
    hidden = ffn_hidden if ffn_hidden is not None else 2 * width

    def u(*shape):
        return rng.uniform(-bound, bound, size=shape).astype(f32)

    layer_list = [
        LayerParams(wq=u(width, width), wk=u(width, width), wv=u(width, width),
                    wo=u(width, width), w1=u(width, hidden), w2=u(hidden, width))
        for _ in range(layers)
    ]
    return ModelParams(
        layers=layer_list,
        heads=heads,
        tok_type=u(3, width),
        pos_img=u(image_positions, width),
        text_emb=u(text_vocab, width),
        answer_head=u(width, answer_vocab),
        w_mask=u(width, width),
        use_positions=use_positions,
    )


def named_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    """Stable name -> array view of every trainable tensor."""
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(params.layers):
        for field in ("wq", "wk", "wv", "wo", "w1", "w2"):
            out[f"layers.{i}.{field}"] = getattr(layer, field)
    out["tok_type"] = params.tok_type
    out["pos_img"] = params.pos_img
    out["text_emb"] = params.text_emb
    out["answer_head"] = params.answer_head
    out["w_mask"] = params.w_mask
    return out


def model_meta(params: ModelParams) -> dict:
    return {
        "layers": params.depth,
        "heads": params.heads,
        "width": params.width,
        "ffn_hidden": params.layers[0].w1.shape[1],
        "image_positions": params.pos_img.shape[0],
        "text_vocab": params.text_emb.shape[0],
        "answer_vocab": params.answer_head.shape[1],
        "use_positions": params.use_positions,
    }


def params_from_arrays(meta: dict, arrays: dict[str, np.ndarray]) -> ModelParams:
    layer_list = [
        LayerParams(**{f: arrays[f"layers.{i}.{f}"] for f in ("wq", "wk", "wv", "wo", "w1", "w2")})
        for i in range(meta["layers"])
    ]
    return ModelParams(
        layers=layer_list,
        heads=meta["heads"],
        tok_type=arrays["tok_type"],
        pos_img=arrays["pos_img"],
        text_emb=arrays["text_emb"],
        answer_head=arrays["answer_head"],
        w_mask=arrays["w_mask"],
        use_positions=meta["use_positions"],
    )


def _validate_inputs(params: ModelParams, image: TokenGrid, segs: SegTokenSet, text: np.ndarray):
    d = params.width
    if image.width != d:
        raise DimensionError(f"image token width {image.width} != model width {d}")
    if segs.embeddings.shape[1] != d:
        raise DimensionError(f"seg token width {segs.embeddings.shape[1]} != model width {d}")
    text = np.asarray(text, dtype=np.int64)
    if text.ndim != 1 or text.size < 1:
        raise DimensionError("text must be a nonempty 1-D id sequence")
    if np.any(text < 0) or np.any(text >= params.text_emb.shape[0]):
        raise DomainError("text id outside vocabulary")
    pos = image.positions
    pos = np.arange(image.count) if pos is None else np.asarray(pos, dtype=np.int64)
    if params.use_positions and (np.any(pos < 0) or np.any(pos >= params.pos_img.shape[0])):
        raise DimensionError("image token position outside the embedding table")
    return text, pos


def _forward_impl(params, image, segs, text, dtype, want_grad):
    # all arithmetic in float64; `dtype` only selects the output storage
    text, pos = _validate_inputs(params, image, segs, text)
    p, q_count, m = image.count, segs.embeddings.shape[0], text.size
    t_len = p + q_count + m
    heads, dh = params.heads, params.head_dim
    scale = 1.0 / math.sqrt(dh)

    x = np.zeros((t_len, params.width), dtype=f64)
    x[:p] = image.tokens.astype(f64) + params.tok_type[0].astype(f64)
    if params.use_positions:
        x[:p] += params.pos_img[pos].astype(f64)
    x[p:p + q_count] = segs.embeddings.astype(f64) + params.tok_type[1].astype(f64)
    x[p + q_count:] = params.text_emb[text].astype(f64) + params.tok_type[2].astype(f64)

    caches = []
    raw_layers = []
    for layer in params.layers:
        wq, wk, wv, wo = (layer.wq.astype(f64), layer.wk.astype(f64),
                          layer.wv.astype(f64), layer.wo.astype(f64))
        w1, w2 = layer.w1.astype(f64), layer.w2.astype(f64)
        qh = (x @ wq).reshape(t_len, heads, dh)
        kh = (x @ wk).reshape(t_len, heads, dh)
        vh = (x @ wv).reshape(t_len, heads, dh)
        scores = np.einsum("qhd,khd->hqk", qh, kh) * scale
        raw_layers.append(scores[:, p:p + q_count, :p].copy())
        probs = _softmax64(scores, axis=-1)
        ctx = np.einsum("hqk,khd->qhd", probs, vh).reshape(t_len, params.width)
        x1 = x + ctx @ wo
        u = x1 @ w1
        th = np.tanh(u)
        x2 = x1 + th @ w2
        if want_grad:
            caches.append((x, qh, kh, vh, probs, ctx, x1, th))
        x = x2

    raw = np.stack(raw_layers)  # (L, H, Q, P)
    normalized = np.mean(_softmax64(raw, axis=-1), axis=1)
    answer_logits = x[-1] @ params.answer_head.astype(f64)
    out = ForwardOutput(
        hidden=x.astype(dtype),
        attn=AttentionStack(raw=raw.astype(dtype), normalized=normalized.astype(dtype)),
        seg_hidden=x[p:p + q_count].astype(dtype),
        answer_logits=answer_logits.astype(dtype),
    )
    if not want_grad:
        return out, None

    x_final = x

    def vjp(d_hidden=None, d_seg_hidden=None, d_answer_logits=None, d_raw=None) -> ForwardGrads:
        grads = {name: np.zeros(arr.shape, dtype=f64)
                 for name, arr in named_arrays(params).items() if name != "w_mask"}
        if not params.use_positions:
            del grads["pos_img"]
        g = np.zeros((t_len, params.width), dtype=f64)
        if d_hidden is not None:
            g += d_hidden
        if d_seg_hidden is not None:
            g[p:p + q_count] += d_seg_hidden
        if d_answer_logits is not None:
            da = np.asarray(d_answer_logits, dtype=f64)
            grads["answer_head"] += np.outer(x_final[-1], da)
            g[-1] += params.answer_head.astype(f64) @ da

        for li in range(params.depth - 1, -1, -1):
            layer = params.layers[li]
            x_in, qh, kh, vh, probs, ctx, x1, th = caches[li]
            dx2 = g
            dt = dx2 @ layer.w2.astype(f64).T
            grads[f"layers.{li}.w2"] += th.T @ dx2
            du = dt * (1.0 - th * th)
            grads[f"layers.{li}.w1"] += x1.T @ du
            dx1 = dx2 + du @ layer.w1.astype(f64).T

            dWo_in = dx1  # gradient arriving at the attention output
            grads[f"layers.{li}.wo"] += ctx.T @ dWo_in
            dctx = (dWo_in @ layer.wo.astype(f64).T).reshape(t_len, heads, dh)
            dprobs = np.einsum("qhd,khd->hqk", dctx, vh)
            dvh = np.einsum("hqk,qhd->khd", probs, dctx)
            dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
            if d_raw is not None:
                dscores[:, p:p + q_count, :p] += d_raw[li]
            dqh = np.einsum("hqk,khd->qhd", dscores, kh) * scale
            dkh = np.einsum("hqk,qhd->khd", dscores, qh) * scale
            dq = dqh.reshape(t_len, params.width)
            dk = dkh.reshape(t_len, params.width)
            dv = dvh.reshape(t_len, params.width)
            grads[f"layers.{li}.wq"] += x_in.T @ dq
            grads[f"layers.{li}.wk"] += x_in.T @ dk
            grads[f"layers.{li}.wv"] += x_in.T @ dv
            g = (dx1 + dq @ layer.wq.astype(f64).T
                 + dk @ layer.wk.astype(f64).T
                 + dv @ layer.wv.astype(f64).T)

        grads["tok_type"][0] += g[:p].sum(axis=0)
        grads["tok_type"][1] += g[p:p + q_count].sum(axis=0)
        grads["tok_type"][2] += g[p + q_count:].sum(axis=0)
        if params.use_positions:
            np.add.at(grads["pos_img"], pos, g[:p])
        np.add.at(grads["text_emb"], text, g[p + q_count:])
        return ForwardGrads(params=grads, seg_embeddings=g[p:p + q_count].copy(),
                            image_tokens=g[:p].copy())

    return out, vjp


def forward(params: ModelParams, image: TokenGrid, segs: SegTokenSet, text: np.ndarray) -> ForwardOutput:
    """Run the model; float32 outputs, no gradient bookkeeping."""
    out, _ = _forward_impl(params, image, segs, text, dtype=f32, want_grad=False)
    return out


def forward_grad(params: ModelParams, image: TokenGrid, segs: SegTokenSet, text: np.ndarray):
    """Run the model in float64 and return (output, vjp).

    The vjp accepts cotangents for hidden states, seg hidden states, answer
    logits, and the captured raw attention logits, and returns gradients for
    every touched parameter plus the seg embeddings and input image tokens.
    """
    return _forward_impl(params, image, segs, text, dtype=f64, want_grad=True)


def _upsample_factors(grid, out_size):
    ht, wt = grid
    h, w = out_size
    if h % ht != 0 or w % wt != 0:
        raise DimensionError(f"output size {out_size} is not an integer multiple of grid {grid}")
    return h // ht, w // wt


def decode_mask(seg_hidden: np.ndarray, grounding: np.ndarray, grid: tuple[int, int],
                out_size: tuple[int, int], w_mask: np.ndarray) -> np.ndarray:
    """Dot-product mask logits, nearest-neighbor upsampled to ``out_size``.

    logit[q, p] = <seg_hidden[q] . w_mask, grounding[p]> / sqrt(D), reshaped
    onto the token grid and replicated into (Q, H, W).
    """
    value, _ = _decode_mask_impl(seg_hidden, grounding, grid, out_size, w_mask, f32, False)
    return value


def decode_mask_grad(seg_hidden, grounding, grid, out_size, w_mask):
    return _decode_mask_impl(seg_hidden, grounding, grid, out_size, w_mask, f64, True)


def _decode_mask_impl(seg_hidden, grounding, grid, out_size, w_mask, dtype, want_grad):
    ht, wt = grid
    p, d = grounding.shape
    if ht * wt != p:
        raise DimensionError(f"grid {grid} does not cover {p} grounding tokens")
    if seg_hidden.ndim != 2 or seg_hidden.shape[1] != d or w_mask.shape != (d, d):
        raise DimensionError("seg_hidden / w_mask widths disagree with grounding")
    fh, fw = _upsample_factors(grid, out_size)
    q_count = seg_hidden.shape[0]
    scale = 1.0 / math.sqrt(d)

    sh = seg_hidden.astype(f64)
    gr = grounding.astype(f64)
    wm = w_mask.astype(f64)
    m = sh @ wm
    tok = (m @ gr.T) * scale                      # (Q, P)
    cells = tok.reshape(q_count, ht, wt)
    value = np.repeat(np.repeat(cells, fh, axis=1), fw, axis=2).astype(dtype)
    if not want_grad:
        return value, None

    def vjp(d_out):
        d_out = np.asarray(d_out, dtype=f64)
        d_cells = d_out.reshape(q_count, ht, fh, wt, fw).sum(axis=(2, 4))
        d_tok = d_cells.reshape(q_count, p) * scale
        d_m = d_tok @ gr
        d_grounding = d_tok.T @ m
        d_seg_hidden = d_m @ wm.T
        d_w_mask = sh.T @ d_m
        return d_seg_hidden, d_grounding, d_w_mask

    return value, vjp


def grounding_features(pixels: np.ndarray, grid: tuple[int, int], proj: np.ndarray) -> np.ndarray:
    """Flatten each grid cell's pixel patch and project it to model width."""
    value, _ = _grounding_impl(pixels, grid, proj, f32, False)
    return value


def grounding_features_grad(pixels, grid, proj):
    return _grounding_impl(pixels, grid, proj, f64, True)


def _patchify(pixels, grid):
    c, h, w = pixels.shape
    ht, wt = grid
    if h % ht != 0 or w % wt != 0:
        raise DimensionError(f"image size {(h, w)} not divisible by grid {grid}")
    ph, pw = h // ht, w // wt
    patches = pixels.reshape(c, ht, ph, wt, pw).transpose(1, 3, 0, 2, 4).reshape(ht * wt, c * ph * pw)
    return patches, (c, ht, ph, wt, pw)


def _grounding_impl(pixels, grid, proj, dtype, want_grad):
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise DimensionError(f"pixels must be (C, H, W), got {pixels.shape}")
    patches, dims = _patchify(pixels.astype(f64), grid)
    if proj.shape[0] != patches.shape[1]:
        raise DimensionError(f"projection rows {proj.shape[0]} != patch size {patches.shape[1]}")
    pr = proj.astype(f64)
    value = (patches @ pr).astype(dtype)
    if not want_grad:
        return value, None

    def vjp(d_feat):
        d_feat = np.asarray(d_feat, dtype=f64)
        d_proj = patches.T @ d_feat
        d_patches = d_feat @ pr.T
        c, ht, ph, wt, pw = dims
        d_pixels = d_patches.reshape(ht, wt, c, ph, pw).transpose(2, 0, 3, 1, 4).reshape(c, ht * ph, wt * pw)
        return d_pixels, d_proj

    return value, vjp
