"""Seeded generator of paired optical/SAR toy scenes, plus evaluation metrics.

Scenes place non-overlapping rectangles and discs of distinct classes. Each
object is visible in the optical render, the SAR render, or both, which makes
cross-modal complementarity a controllable, measurable dataset property.
Optical shows class colors with a per-class checkerboard texture and can be
occluded by cloud patches; SAR shows class intensities with edge highlights
under multiplicative speckle and ignores clouds. Queries use a fixed template
vocabulary (segment / exists / count) with integer answer labels.
"""

from __future__ import annotations

import colorsys
import dataclasses
import math

import numpy as np

from .tensor import DimensionError, DomainError, f32


class GenerationError(RuntimeError):
    """Object placement became infeasible after bounded retries."""


# query token vocabulary
TOK_PAD = 0
TOK_SEGMENT = 1
TOK_EXISTS = 2
TOK_COUNT = 3
TOK_ALL = 4
TOK_CLASS_BASE = 5

# answer vocabulary: no, yes, then counts 0..MAX_COUNT
ANS_NO = 0
ANS_YES = 1
ANS_COUNT_BASE = 2
MAX_COUNT = 6

VISIBILITY = ("optical_only", "sar_only", "both")
SHAPES = ("rect", "disc")

QUERY_KINDS = ("seg", "exists", "count")

BG_OPTICAL = np.array([0.20, 0.24, 0.20], dtype=f32)
BG_SAR = 0.15
EDGE_BOOST = 0.2
TEXTURE_DEPTH = 0.12
PLACEMENT_RETRIES = 200


def text_vocab_size(classes: int) -> int:
    return TOK_CLASS_BASE + classes


def answer_vocab_size() -> int:
    return ANS_COUNT_BASE + MAX_COUNT + 1


def class_token(class_id: int) -> int:
    return TOK_CLASS_BASE + class_id


def class_color(class_id: int, classes: int) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(class_id / max(1, classes), 0.75, 0.85)
    return np.array([r, g, b], dtype=f32)


def class_sar_intensity(class_id: int, classes: int) -> float:
    return 0.4 + 0.5 * (class_id + 1) / classes


@dataclasses.dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    min_objects: int = 1
    max_objects: int = 3
    classes: int = 4
    p_opt_only: float = 0.0
    p_sar_only: float = 0.0
    p_both: float = 1.0
    cloud_density: float = 0.0
    speckle: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fractions = (self.p_opt_only, self.p_sar_only, self.p_both)
        if any(f < 0 for f in fractions):
            raise DomainError("visibility fractions must be nonnegative")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise DomainError(f"visibility fractions must sum to 1, got {sum(fractions)}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise DomainError("need 0 <= min_objects <= max_objects")
        if self.max_objects > self.classes:
            raise DomainError("distinct classes per scene: max_objects cannot exceed classes")
        if not 0.0 <= self.speckle < 1.0:
            raise DomainError("speckle level must lie in [0, 1)")
        if not 0.0 <= self.cloud_density <= 1.0:
            raise DomainError("cloud density must lie in [0, 1]")


@dataclasses.dataclass
class SceneObject:
    class_id: int
    bbox: tuple[int, int, int, int]      # (y0, x0, y1, x1), end-exclusive
    mask: np.ndarray                     # (H, W) float32 in {0, 1}
    visibility: str
    shape_kind: str
    shape_params: tuple[float, ...]      # rect: bbox; disc: (cy, cx, r, 0)


@dataclasses.dataclass
class Query:
    tokens: np.ndarray                   # (2,) int32: verb, argument
    target: int                          # object index, -1 if none
    answer: int
    kind: str


@dataclasses.dataclass
class Scene:
    optical: np.ndarray                  # (3, H, W) float32
    sar: np.ndarray                      # (1, H, W) float32
    objects: list[SceneObject]
    queries: list[Query]


def _rasterize(kind: str, params, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    if kind == "rect":
        y0, x0, y1, x1 = (int(v) for v in params)
        mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
    else:
        cy, cx, r = params[0], params[1], params[2]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    return mask.astype(f32)


def _boundary(mask: np.ndarray) -> np.ndarray:
    m = mask > 0.5
    padded = np.pad(m, 1)
    inner = m & padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return (m & ~inner).astype(f32)


def _place_objects(rng, spec: SceneSpec):
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    class_ids = rng.choice(spec.classes, size=n, replace=False) if n else np.empty(0, dtype=int)
    h, w = spec.height, spec.width
    lo, hi = max(2, h // 10), max(3, h // 5)
    placed = []
    for class_id in class_ids:
        kind = SHAPES[int(rng.integers(0, 2))]
        for attempt in range(PLACEMENT_RETRIES):
            if kind == "rect":
                hy = int(rng.integers(lo, hi + 1))
                hx = int(rng.integers(lo, hi + 1))
                cy = int(rng.integers(hy + 1, h - hy - 1))
                cx = int(rng.integers(hx + 1, w - hx - 1))
                bbox = (cy - hy, cx - hx, cy + hy, cx + hx)
                params = tuple(float(v) for v in bbox)
            else:
                r = int(rng.integers(lo, hi + 1))
                cy = int(rng.integers(r + 1, h - r - 1))
                cx = int(rng.integers(r + 1, w - r - 1))
                bbox = (cy - r, cx - r, cy + r + 1, cx + r + 1)
                params = (float(cy), float(cx), float(r), 0.0)
            if all(not _boxes_touch(bbox, other[1]) for other in placed):
                placed.append((int(class_id), bbox, kind, params))
                break
        else:
            raise GenerationError(
                f"could not place object of class {class_id} after {PLACEMENT_RETRIES} retries")
    return placed


def _boxes_touch(a, b, margin: int = 1) -> bool:
    ay0, ax0, ay1, ax1 = a
    by0, bx0, by1, bx1 = b
    return not (ay1 + margin <= by0 or by1 + margin <= ay0
                or ax1 + margin <= bx0 or bx1 + margin <= ax0)


def _render_optical(spec: SceneSpec, objects, clouds) -> np.ndarray:
    h, w = spec.height, spec.width
    img = np.empty((3, h, w), dtype=f32)
    img[:] = BG_OPTICAL[:, None, None]
    yy, xx = np.mgrid[:h, :w]
    for obj in objects:
        if obj.visibility == "sar_only":
            continue
        period = 2 ** (obj.class_id % 3 + 1)
        tex = ((yy // period + xx // period) % 2).astype(f32)
        shade = 1.0 - TEXTURE_DEPTH * tex
        color = class_color(obj.class_id, spec.classes)
        region = obj.mask > 0.5
        for ch in range(3):
            img[ch][region] = color[ch] * shade[region]
    for y0, x0, y1, x1 in clouds:
        img[:, y0:y1, x0:x1] = BG_OPTICAL[:, None, None]
    return img


def _render_sar(spec: SceneSpec, objects, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    img = np.full((h, w), BG_SAR, dtype=f32)
    for obj in objects:
        if obj.visibility == "optical_only":
            continue
        region = obj.mask > 0.5
        img[region] = class_sar_intensity(obj.class_id, spec.classes)
        img[_boundary(obj.mask) > 0.5] += EDGE_BOOST
    noise = rng.uniform(1.0 - spec.speckle, 1.0 + spec.speckle, size=(h, w))
    return (img.astype(np.float64) * noise).astype(f32)[None]


def _make_queries(rng, spec: SceneSpec, objects) -> list[Query]:
    queries = []
    present = sorted({obj.class_id for obj in objects})
    absent = [c for c in range(spec.classes) if c not in present]
    for i, obj in enumerate(objects):
        queries.append(Query(
            tokens=np.array([TOK_SEGMENT, class_token(obj.class_id)], dtype=np.int32),
            target=i, answer=ANS_YES, kind="seg"))
    n_yes = min(2, len(present))
    n_no = min(n_yes if n_yes > 0 else 2, len(absent))
    for c in (rng.choice(present, size=n_yes, replace=False) if n_yes else []):
        queries.append(Query(
            tokens=np.array([TOK_EXISTS, class_token(int(c))], dtype=np.int32),
            target=next(i for i, o in enumerate(objects) if o.class_id == c),
            answer=ANS_YES, kind="exists"))
    for c in (rng.choice(absent, size=n_no, replace=False) if n_no else []):
        queries.append(Query(
            tokens=np.array([TOK_EXISTS, class_token(int(c))], dtype=np.int32),
            target=-1, answer=ANS_NO, kind="exists"))
    if objects:
        queries.append(Query(
            tokens=np.array([TOK_COUNT, TOK_ALL], dtype=np.int32),
            target=-1, answer=ANS_COUNT_BASE + min(len(objects), MAX_COUNT), kind="count"))
    return queries


def generate_scene(spec: SceneSpec, index: int) -> Scene:
    """Deterministically generate scene ``index`` of the stream seeded by spec."""
    rng = np.random.default_rng([spec.seed, index])
    placed = _place_objects(rng, spec)
    objects = []
    for class_id, bbox, kind, params in placed:
        visibility = VISIBILITY[int(rng.choice(3, p=[spec.p_opt_only, spec.p_sar_only, spec.p_both]))]
        mask = _rasterize(kind, params, spec.height, spec.width)
        objects.append(SceneObject(class_id=class_id, bbox=bbox, mask=mask,
                                   visibility=visibility, shape_kind=kind,
                                   shape_params=params))
    n_clouds = int(round(spec.cloud_density * 5))
    clouds = []
    for _ in range(n_clouds):
        ch = int(rng.integers(spec.height // 5, spec.height // 2 + 1))
        cw = int(rng.integers(spec.width // 5, spec.width // 2 + 1))
        y0 = int(rng.integers(0, spec.height - ch + 1))
        x0 = int(rng.integers(0, spec.width - cw + 1))
        clouds.append((y0, x0, y0 + ch, x0 + cw))
    optical = _render_optical(spec, objects, clouds)
    sar = _render_sar(spec, objects, rng)
    queries = _make_queries(rng, spec, objects)
    for q in queries:
        if q.target >= len(objects):
            raise GenerationError("query target out of range")
        if not 0 <= q.answer < answer_vocab_size():
            raise GenerationError("answer label outside vocabulary")
    return Scene(optical=optical, sar=sar, objects=objects, queries=queries)


def _as_binary(name: str, mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.all((arr == 0) | (arr == 1)):
        raise DomainError(f"{name} mask is not binary")
    return arr.astype(bool)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    a = _as_binary("first", a)
    b = _as_binary("second", b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes disagree: {a.shape} vs {b.shape}")
    union = int(np.sum(a | b))
    if union == 0:
        return 1.0
    return float(int(np.sum(a & b)) / union)


def aggregate_metrics(mask_pairs: list, label_pairs: list) -> dict:
    """mIoU (mean of per-sample IoU), oIoU (pooled intersections over pooled
    unions), and label accuracy over the given record lists."""
    if not mask_pairs or not label_pairs:
        raise DomainError("aggregate_metrics needs nonempty record lists")
    ious = []
    inter_total = 0
    union_total = 0
    for pred, gt in mask_pairs:
        ious.append(mask_iou(pred, gt))
        p = _as_binary("pred", pred)
        g = _as_binary("gt", gt)
        inter_total += int(np.sum(p & g))
        union_total += int(np.sum(p | g))
    oiou = 1.0 if union_total == 0 else inter_total / union_total
    correct = sum(1 for pred, gt in label_pairs if int(pred) == int(gt))
    return {
        "miou": float(np.mean(ious)),
        "oiou": float(oiou),
        "accuracy": correct / len(label_pairs),
    }
