"""Training loop, loss composition, and experiment runners.

One training example is a (scene, query) pair. Visual tokens for both
modalities come from a shared patch projection; the configured fusion variant
builds the model's image-token sequence; answer cross-entropy, mask losses,
attention-supervision KL, and the batch contrastive term compose the total
loss. Plain fixed-step gradient descent; everything is deterministic in the
run seed.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import fusion as fz
from . import model as md
from . import sap
from . import sensor_format as sf
from . import synth
from .config import RunConfig
from .tensor import DimensionError, DomainError, EvaluationError, _softmax64, f32, f64


@dataclasses.dataclass
class LossBundle:
    """Per-step loss components. ``ce`` bundles the answer cross-entropy with
    the pixel cross-entropy of segmentation queries (both carry the ce
    weight); ``total`` is the exact weighted composition."""

    ce: float
    dice: float
    kl: float
    cl: float
    total: float


def compose_total(weights, ce: float, dice: float, kl: float, cl: float) -> float:
    # fixed evaluation order; recomputation from components is 0-ulp identical
    return weights.ce * ce + weights.dice * dice + weights.kl * kl + weights.cl * cl


def answer_ce(logits: np.ndarray, label: int) -> float:
    """Negative log softmax probability of the answer label."""
    value, _ = _answer_ce_impl(logits, label, want_grad=False)
    return value


def answer_ce_grad(logits: np.ndarray, label: int):
    return _answer_ce_impl(logits, label, want_grad=True)


def _answer_ce_impl(logits, label, want_grad):
    logits = np.asarray(logits, dtype=f64)
    if logits.ndim != 1:
        raise DimensionError(f"answer logits must be 1-D, got {logits.shape}")
    if not 0 <= int(label) < logits.size:
        raise DomainError(f"label {label} outside answer vocabulary of size {logits.size}")
    label = int(label)
    shift = logits - logits.max()
    lse = float(np.log(np.sum(np.exp(shift))))
    value = -(float(shift[label]) - lse)
    if not want_grad:
        return value, None
    probs = _softmax64(logits)

    def vjp(dout: float):
        g = probs.copy()
        g[label] -= 1.0
        return dout * g

    return value, vjp


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mask_losses(logits: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Mean pixel binary cross-entropy and soft Dice loss (eps = 1)."""
    ce, dice, _ = _mask_losses_impl(logits, gt, want_grad=False)
    return ce, dice


def mask_losses_grad(logits: np.ndarray, gt: np.ndarray):
    """(ce, dice, vjp); vjp(w_ce, w_dice) returns the combined pixel cotangent."""
    return _mask_losses_impl(logits, gt, want_grad=True)


def _mask_losses_impl(logits, gt, want_grad):
    x = np.asarray(logits, dtype=f64)
    g = (np.asarray(gt, dtype=f64) >= 0.5).astype(f64)
    if x.shape != g.shape:
        raise DimensionError(f"mask shapes disagree: {x.shape} vs {g.shape}")
    n = x.size
    ce = float(np.sum(np.maximum(x, 0.0) - x * g + np.log1p(np.exp(-np.abs(x))))) / n
    p = _sigmoid(x)
    spg = float(np.sum(p * g))
    sp = float(np.sum(p))
    sg = float(np.sum(g))
    denom = sp + sg + 1.0
    dice = 1.0 - (2.0 * spg + 1.0) / denom
    if not want_grad:
        return ce, dice, None

    def vjp(w_ce: float, w_dice: float):
        d_ce = (p - g) / n
        d_dice_dp = -(2.0 * g * denom - (2.0 * spg + 1.0)) / (denom * denom)
        return w_ce * d_ce + w_dice * d_dice_dp * p * (1.0 - p)

    return ce, dice, vjp


@dataclasses.dataclass
class TrainState:
    model: md.ModelParams
    segs: md.SegTokenSet
    fusion: fz.FusionParams
    proj_vis: np.ndarray      # shared patch projection for both modalities
    proj_ground: np.ndarray   # patch projection feeding the mask decoder


@dataclasses.dataclass
class TrainResult:
    state: TrainState
    history: list[LossBundle]
    metrics: dict
    records: list[dict]


def scene_spec(cfg: RunConfig) -> synth.SceneSpec:
    d = cfg.data
    return synth.SceneSpec(height=d.height, width=d.width, min_objects=d.min_objects,
                           max_objects=d.max_objects, classes=d.classes,
                           p_opt_only=d.p_opt_only, p_sar_only=d.p_sar_only,
                           p_both=d.p_both, cloud_density=d.cloud_density,
                           speckle=d.speckle, seed=cfg.seed)


def make_scenes(cfg: RunConfig) -> tuple[list[synth.Scene], list[synth.Scene]]:
    spec = scene_spec(cfg)
    n, m = cfg.data.train_scenes, cfg.data.eval_scenes
    train = [synth.generate_scene(spec, i) for i in range(n)]
    evals = [synth.generate_scene(spec, n + i) for i in range(m)]
    return train, evals


def init_state(cfg: RunConfig) -> TrainState:
    ht, wt = cfg.model.grid
    p = ht * wt
    ph, pw = cfg.data.height // ht, cfg.data.width // wt
    patch = 3 * ph * pw
    width = cfg.model.width
    model = md.init_model(cfg.seed, cfg.model.layers, cfg.model.heads, width,
                          image_positions=2 * p,
                          text_vocab=synth.text_vocab_size(cfg.data.classes),
                          answer_vocab=synth.answer_vocab_size(),
                          ffn_hidden=cfg.model.ffn_hidden,
                          use_positions=cfg.model.use_positions)
    rng = np.random.default_rng([cfg.seed, 1])
    bound = 1.0 / np.sqrt(width)
    segs = md.SegTokenSet(rng.uniform(-bound, bound, (cfg.model.seg_tokens, width)).astype(f32))
    fusion = fz.FusionParams(
        queries=rng.uniform(-bound, bound, (cfg.fusion.queries, width)).astype(f32),
        tau_cl=cfg.fusion.temperature)
    proj_vis = rng.uniform(-bound, bound, (patch, width)).astype(f32)
    proj_ground = rng.uniform(-bound, bound, (patch, width)).astype(f32)
    return TrainState(model=model, segs=segs, fusion=fusion,
                      proj_vis=proj_vis, proj_ground=proj_ground)


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    out = {f"model.{name}": arr for name, arr in md.named_arrays(state.model).items()}
    out["segs"] = state.segs.embeddings
    out["fusion.queries"] = state.fusion.queries
    out["proj_vis"] = state.proj_vis
    out["proj_ground"] = state.proj_ground
    return out


def save_state(path, state: TrainState) -> None:
    meta = {"model": md.model_meta(state.model), "tau": state.fusion.tau_cl}
    ckpt.save_arrays(path, state_arrays(state), meta)


def load_state(path) -> TrainState:
    arrays, meta = ckpt.load_arrays(path)
    model_arrays = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    return TrainState(
        model=md.params_from_arrays(meta["model"], model_arrays),
        segs=md.SegTokenSet(arrays["segs"]),
        fusion=fz.FusionParams(queries=arrays["fusion.queries"], tau_cl=meta["tau"]),
        proj_vis=arrays["proj_vis"],
        proj_ground=arrays["proj_ground"],
    )


def _pad_sar(scene: synth.Scene) -> np.ndarray:
    return sf.pad_sar(sf.RawSensorImage(scene.sar, "sar"), "zero_pad")


def _ground_pixels(variant: str, optical: np.ndarray, sar3: np.ndarray) -> np.ndarray:
    if variant == "single_optical":
        return optical
    if variant == "single_sar":
        return sar3
    return ((optical + sar3) * 0.5).astype(f32)


def _fused_variant(variant: str) -> bool:
    return variant in ("ours", "naive_concat", "naive_attention")


def _training_queries(scene: synth.Scene, joint: bool):
    for qi, query in enumerate(scene.queries):
        if joint or query.kind == "seg":
            yield qi


def _drop_seed(cfg_seed: int, scene_index: int, ratio: float) -> int:
    ss = np.random.SeedSequence([cfg_seed, scene_index, int(round(ratio * 1000))])
    return int(ss.generate_state(1)[0])


def _eval_example(state, cfg, scene, query, drop=None, drop_seed=0):
    grid = cfg.model.grid
    variant = cfg.fusion.variant
    sar3 = _pad_sar(scene)
    opt_tok = md.grounding_features(scene.optical, grid, state.proj_vis)
    sar_tok = md.grounding_features(sar3, grid, state.proj_vis)
    if variant == "single_optical":
        img = md.TokenGrid(opt_tok, grid, "optical")
    elif variant == "single_sar":
        img = md.TokenGrid(sar_tok, grid, "sar")
    else:
        pair = fz.ModalityPair(md.TokenGrid(opt_tok, grid, "optical"),
                               md.TokenGrid(sar_tok, grid, "sar"))
        if variant == "naive_attention":
            weights = fz.naive_attention_weights(pair)
        elif variant == "ours" and cfg.fusion.mutual_attention:
            weights = fz.mutual_attention(pair, state.fusion)
        else:
            weights = fz.uniform_weights(opt_tok.shape[0])
        img = fz.fuse(pair, weights)
        if drop is not None:
            ratio, strategy = drop
            w_cat = np.concatenate([weights.w_o, weights.w_s]).astype(f64) / 2.0
            img = fz.token_drop(img, w_cat, ratio, strategy, seed=drop_seed)
    out = md.forward(state.model, img, state.segs, query.tokens)
    pred_label = int(np.argmax(out.answer_logits))
    pred_mask = None
    if query.kind == "seg":
        gp = _ground_pixels(variant, scene.optical, sar3)
        ground = md.grounding_features(gp, grid, state.proj_ground)
        logits = md.decode_mask(out.seg_hidden, ground, grid,
                                (cfg.data.height, cfg.data.width), state.model.w_mask)
        pred_mask = (logits[0] > 0.0).astype(f32)   # sigmoid > 0.5
    return pred_label, pred_mask


def evaluate(state: TrainState, cfg: RunConfig, scenes: list[synth.Scene],
             drop=None) -> tuple[dict, list[dict]]:
    """Run the model over every query of every scene; per-sample records plus
    aggregated metrics (reports are recomputable from the records)."""
    records = []
    mask_pairs = []
    label_pairs = []
    for si, scene in enumerate(scenes):
        seed = _drop_seed(cfg.seed, si, drop[0]) if drop is not None else 0
        for query in scene.queries:
            pred_label, pred_mask = _eval_example(state, cfg, scene, query,
                                                  drop=drop, drop_seed=seed)
            rec = {"scene": si, "kind": query.kind,
                   "pred_label": pred_label, "gt_label": int(query.answer),
                   "intersection": "", "union": "", "iou": ""}
            label_pairs.append((pred_label, query.answer))
            if pred_mask is not None:
                gt = scene.objects[query.target].mask
                mask_pairs.append((pred_mask, gt))
                p = pred_mask > 0.5
                g = gt > 0.5
                rec["intersection"] = int(np.sum(p & g))
                rec["union"] = int(np.sum(p | g))
                rec["iou"] = synth.mask_iou(pred_mask, gt)
            records.append(rec)
    metrics = synth.aggregate_metrics(mask_pairs, label_pairs)
    return metrics, records


def _train_step(state, cfg, scenes, batch):
    grid = cfg.model.grid
    ht, wt = grid
    p = ht * wt
    out_size = (cfg.data.height, cfg.data.width)
    variant = cfg.fusion.variant
    lw = cfg.loss
    b = len(batch)
    arrays = state_arrays(state)
    grads: dict[str, np.ndarray] = {}

    def acc(name, g):
        if name in grads:
            grads[name] += g
        else:
            grads[name] = np.asarray(g, dtype=f64).copy()

    unique = list(dict.fromkeys(si for si, _ in batch))
    feats = {}
    d_feat = {}
    for si in unique:
        scene = scenes[si]
        sar3 = _pad_sar(scene)
        opt, opt_vjp = md.grounding_features_grad(scene.optical, grid, state.proj_vis)
        sar, sar_vjp = md.grounding_features_grad(sar3, grid, state.proj_vis)
        feats[si] = (opt, opt_vjp, sar, sar_vjp, sar3)
        d_feat[si] = [np.zeros_like(opt), np.zeros_like(sar)]

    cl_value = 0.0
    use_cl = lw.cl > 0 and variant == "ours"
    if use_cl:
        cl_value, cl_vjp = fz.contrastive_loss_grad(
            [feats[si][0] for si in unique], [feats[si][2] for si in unique],
            tau=state.fusion.tau_cl)
        d_o_cl, d_s_cl = cl_vjp(lw.cl)
        for j, si in enumerate(unique):
            d_feat[si][0] += d_o_cl[j]
            d_feat[si][1] += d_s_cl[j]

    ce_sum = dice_sum = kl_sum = 0.0
    for si, qi in batch:
        scene = scenes[si]
        query = scene.queries[qi]
        opt, _, sar, _, sar3 = feats[si]
        fuse_vjp = weight_vjp = None
        if variant == "single_optical":
            img = md.TokenGrid(opt, grid, "optical")
        elif variant == "single_sar":
            img = md.TokenGrid(sar, grid, "sar")
        else:
            pair = fz.ModalityPair(md.TokenGrid(opt, grid, "optical"),
                                   md.TokenGrid(sar, grid, "sar"))
            if variant == "ours" and cfg.fusion.mutual_attention:
                weights, weight_vjp = fz.mutual_attention_grad(pair, state.fusion)
            elif variant == "naive_attention":
                weights, weight_vjp = fz.naive_attention_weights_grad(pair)
            else:
                weights = fz.uniform_weights(p)
            img, fuse_vjp = fz.fuse_grad(pair, weights)
        out, fwd_vjp = md.forward_grad(state.model, img, state.segs, query.tokens)

        ce_e, ce_vjp = answer_ce_grad(out.answer_logits, query.answer)
        d_answer = ce_vjp(lw.ce / b)
        d_seg_hidden = None
        d_raw = None
        dice_e = kl_e = 0.0
        if query.kind == "seg":
            gt = scene.objects[query.target].mask
            gp = _ground_pixels(variant, scene.optical, sar3)
            ground, ground_vjp = md.grounding_features_grad(gp, grid, state.proj_ground)
            mlogits, dm_vjp = md.decode_mask_grad(out.seg_hidden, ground, grid,
                                                  out_size, state.model.w_mask)
            mask_ce, dice_e, ml_vjp = mask_losses_grad(mlogits[0], gt)
            ce_e += mask_ce
            d_mlogits = np.zeros_like(mlogits)
            d_mlogits[0] = ml_vjp(lw.ce / b, lw.dice / b)
            d_seg_hidden, d_ground, d_wmask = dm_vjp(d_mlogits)
            acc("model.w_mask", d_wmask)
            _, d_pg = ground_vjp(d_ground)
            acc("proj_ground", d_pg)
            if lw.kl > 0:
                g_vec, valid = sap.mask_to_target(gt, grid)
                if _fused_variant(variant):
                    g_vec = np.concatenate([g_vec, g_vec]) / 2.0
                q_count = state.segs.embeddings.shape[0]
                target = sap.MaskTarget(g=np.tile(g_vec, (q_count, 1)),
                                        valid=np.full(q_count, valid))
                amap, map_vjp = sap.seg_to_image_map_grad(out.attn.raw)
                kl_raw, d_map = sap.sap_loss_grad(amap, target, cfg.sap.mode,
                                                  cfg.sap.reverse_kl)
                norm = sap.sap_normalizer(cfg.sap.mode, state.model.depth, target.valid)
                kl_e = kl_raw / norm
                d_raw = map_vjp(d_map * (lw.kl / (b * norm)))

        fg = fwd_vjp(d_seg_hidden=d_seg_hidden, d_answer_logits=d_answer, d_raw=d_raw)
        for name, g in fg.params.items():
            acc(f"model.{name}", g)
        acc("segs", fg.seg_embeddings)
        d_img = fg.image_tokens
        if variant == "single_optical":
            d_feat[si][0] += d_img
        elif variant == "single_sar":
            d_feat[si][1] += d_img
        else:
            d_o, d_s, d_wo, d_ws = fuse_vjp(d_img)
            d_feat[si][0] += d_o
            d_feat[si][1] += d_s
            if weight_vjp is not None and variant == "ours":
                d_q, d_o2, d_s2 = weight_vjp(dw_s=d_ws, dw_o=d_wo)
                acc("fusion.queries", d_q)
                d_feat[si][0] += d_o2
                d_feat[si][1] += d_s2
            elif weight_vjp is not None:
                d_o2, d_s2 = weight_vjp(dw_s=d_ws, dw_o=d_wo)
                d_feat[si][0] += d_o2
                d_feat[si][1] += d_s2
        ce_sum += ce_e
        dice_sum += dice_e
        kl_sum += kl_e

    for si in unique:
        _, opt_vjp, _, sar_vjp, _ = feats[si]
        _, dp = opt_vjp(d_feat[si][0])
        acc("proj_vis", dp)
        _, dp = sar_vjp(d_feat[si][1])
        acc("proj_vis", dp)

    ce = ce_sum / b
    dice = dice_sum / b
    kl = kl_sum / b
    cl = cl_value
    total = compose_total(lw, ce, dice, kl, cl)

    lr = cfg.optimizer.step_size
    for name, g in grads.items():
        arrays[name] -= (lr * g).astype(f32)
    return LossBundle(ce=ce, dice=dice, kl=kl, cl=cl, total=total)


def train(cfg: RunConfig, out_dir=None) -> TrainResult:
    """Fixed-step gradient descent on the composed loss over generated scenes."""
    state = init_state(cfg)
    train_scenes, eval_scenes = make_scenes(cfg)
    examples = [(si, qi) for si, scene in enumerate(train_scenes)
                for qi in _training_queries(scene, cfg.joint_training)]
    if not examples and cfg.optimizer.steps > 0:
        raise DomainError("no training examples match the configured query set")
    sampler = np.random.default_rng([cfg.seed, 7])
    history = []
    for step in range(cfg.optimizer.steps):
        size = min(cfg.optimizer.batch_size, len(examples))
        picks = sampler.choice(len(examples), size=size, replace=False)
        bundle = _train_step(state, cfg, train_scenes, [examples[i] for i in picks])
        if not np.isfinite(bundle.total):
            raise EvaluationError(
                f"training diverged at step {step}: ce={bundle.ce} dice={bundle.dice} "
                f"kl={bundle.kl} cl={bundle.cl}")
        history.append(bundle)
    metrics, records = evaluate(state, cfg, eval_scenes)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_state(out / "checkpoint.bin", state)
        write_csv(out / "history.csv", ["step", "ce", "dice", "kl", "cl", "total"],
                  [{"step": i, **dataclasses.asdict(b)} for i, b in enumerate(history)])
        write_records(out / "records.csv", records)
        write_csv(out / "metrics.csv", ["miou", "oiou", "accuracy"], [metrics])
        write_summary(out / "summary.json", [metrics])
    return TrainResult(state=state, history=history, metrics=metrics, records=records)


SAP_SETTINGS = ("none", "first", "middle", "last", "all")
FUSION_SETTINGS = ("ours", "ours_no_cl", "naive_concat", "naive_attention",
                   "single_optical", "single_sar")


def run_ablation_sap(cfg: RunConfig, out_dir=None) -> list[dict]:
    """Train the SAP layer-mode arms under identical seeds and data."""
    rows = []
    all_records = {}
    for setting in SAP_SETTINGS:
        if setting == "none":
            arm = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, kl=0.0))
        else:
            arm = dataclasses.replace(cfg, sap=dataclasses.replace(cfg.sap, mode=setting))
        result = train(arm)
        rows.append({"setting": setting, "miou": result.metrics["miou"],
                     "oiou": result.metrics["oiou"], "seed": cfg.seed})
        all_records[setting] = result.records
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "sap_ablation.csv", ["setting", "miou", "oiou", "seed"], rows)
        write_summary(out / "summary.json", rows)
        for setting, records in all_records.items():
            write_records(out / f"records_{setting}.csv", records)
    return rows


def run_ablation_fusion(cfg: RunConfig, out_dir=None) -> list[dict]:
    """Train the fusion-variant arms under identical seeds and data."""
    rows = []
    all_records = {}
    for setting in FUSION_SETTINGS:
        if setting == "ours_no_cl":
            arm = dataclasses.replace(
                cfg, fusion=dataclasses.replace(cfg.fusion, variant="ours"),
                loss=dataclasses.replace(cfg.loss, cl=0.0))
        else:
            arm = dataclasses.replace(
                cfg, fusion=dataclasses.replace(cfg.fusion, variant=setting))
        result = train(arm)
        rows.append({"setting": setting, "accuracy": result.metrics["accuracy"],
                     "miou": result.metrics["miou"], "seed": cfg.seed})
        all_records[setting] = result.records
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "fusion_ablation.csv", ["setting", "accuracy", "miou", "seed"], rows)
        write_summary(out / "summary.json", rows)
        for setting, records in all_records.items():
            write_records(out / f"records_{setting}.csv", records)
    return rows


def run_token_drop(cfg: RunConfig, ratios: list[float], out_dir=None) -> list[dict]:
    """Evaluate a trained fused model under both drop strategies per ratio."""
    for ratio in ratios:
        if not 0.0 < ratio <= 1.0:
            raise DomainError(f"keep ratio {ratio} outside (0, 1]")
    arm = dataclasses.replace(cfg, fusion=dataclasses.replace(cfg.fusion, variant="ours"))
    result = train(arm)
    _, eval_scenes = make_scenes(arm)
    rows = []
    for ratio in ratios:
        for strategy in ("random", "importance"):
            metrics, _ = evaluate(result.state, arm, eval_scenes, drop=(ratio, strategy))
            rows.append({"ratio": ratio, "strategy": strategy,
                         "accuracy": metrics["accuracy"], "seed": cfg.seed})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "token_drop.csv", ["ratio", "strategy", "accuracy", "seed"], rows)
        write_summary(out / "summary.json", rows)
    return rows


def format_value(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


def write_csv(path, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(format_value(row.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_records(path, records) -> None:
    write_csv(path, ["scene", "kind", "pred_label", "gt_label",
                     "intersection", "union", "iou"], records)


def write_summary(path, rows) -> None:
    rounded = [{k: (float(f"{v:.6g}") if isinstance(v, float) else v)
                for k, v in row.items()} for row in rows]
    Path(path).write_text(json.dumps({"rows": rounded}, indent=1), encoding="utf-8")
