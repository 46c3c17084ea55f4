import numpy as np
import pytest

from eofuse import dataset_io
from eofuse import synth
from eofuse import tensor as tz


def spec_with(**kwargs):
    base = dict(height=32, width=32, min_objects=1, max_objects=3, classes=4,
                p_opt_only=0.0, p_sar_only=0.0, p_both=1.0,
                cloud_density=0.0, speckle=0.2, seed=7)
    base.update(kwargs)
    return synth.SceneSpec(**base)


def scene_digest(scene):
    parts = [scene.optical.tobytes(), scene.sar.tobytes()]
    for obj in scene.objects:
        parts.append(repr((obj.class_id, obj.bbox, obj.visibility, obj.shape_kind,
                           obj.shape_params)).encode())
        parts.append(obj.mask.tobytes())
    for q in scene.queries:
        parts.append(q.tokens.tobytes())
        parts.append(repr((q.target, q.answer, q.kind)).encode())
    return b"".join(parts)


def test_zero_object_scene_has_only_no_existence_queries():
    spec = spec_with(min_objects=0, max_objects=0)
    scene = synth.generate_scene(spec, 0)
    assert scene.objects == []
    assert len(scene.queries) > 0
    for q in scene.queries:
        assert q.kind == "exists"
        assert q.answer == synth.ANS_NO


def test_determinism_byte_identical():
    spec = spec_with(p_opt_only=0.2, p_sar_only=0.3, p_both=0.5, cloud_density=0.4)
    a = synth.generate_scene(spec, 3)
    b = synth.generate_scene(spec, 3)
    assert scene_digest(a) == scene_digest(b)
    c = synth.generate_scene(spec, 4)
    assert scene_digest(a) != scene_digest(c)


def test_sar_only_objects_invisible_in_optical():
    spec = spec_with(p_sar_only=1.0, p_both=0.0)
    for index in range(5):
        scene = synth.generate_scene(spec, index)
        for obj in scene.objects:
            region = obj.mask > 0.5
            for ch in range(3):
                assert np.all(scene.optical[ch][region] == synth.BG_OPTICAL[ch])


def test_both_objects_visible_in_each_modality():
    spec = spec_with(p_both=1.0, speckle=0.0)
    scene = synth.generate_scene(spec, 1)
    for obj in scene.objects:
        region = obj.mask > 0.5
        assert not np.all(scene.optical[:, region] == synth.BG_OPTICAL[:, None])
        assert np.all(scene.sar[0][region] >= synth.class_sar_intensity(obj.class_id, 4) - 1e-6)


def test_masks_match_analytic_rasterization():
    spec = spec_with()
    for index in range(5):
        scene = synth.generate_scene(spec, index)
        for obj in scene.objects:
            yy, xx = np.mgrid[:spec.height, :spec.width]
            if obj.shape_kind == "rect":
                y0, x0, y1, x1 = obj.shape_params
                want = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
            else:
                cy, cx, r = obj.shape_params[:3]
                want = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
            assert synth.mask_iou(obj.mask, want.astype(np.float32)) == 1.0


def test_masks_disjoint_and_in_bounds():
    spec = spec_with(max_objects=4, min_objects=4, classes=6)
    scene = synth.generate_scene(spec, 2)
    total = np.zeros((spec.height, spec.width))
    for obj in scene.objects:
        total += obj.mask
        y0, x0, y1, x1 = obj.bbox
        assert 0 <= y0 < y1 <= spec.height
        assert 0 <= x0 < x1 <= spec.width
        assert obj.mask.sum() > 0
    assert total.max() <= 1.0


def test_speckle_multiplicative_mean_one():
    spec = spec_with(speckle=0.3, min_objects=2, max_objects=2)
    means = []
    for index in range(40):
        scene = synth.generate_scene(spec, index)
        for obj in scene.objects:
            if obj.visibility == "optical_only":
                continue
            interior = (obj.mask - synth._boundary(obj.mask)) > 0.5
            n = int(interior.sum())
            if n < 30:
                continue
            clean = synth.class_sar_intensity(obj.class_id, spec.classes)
            observed = float(scene.sar[0][interior].mean())
            sigma = clean * spec.speckle / np.sqrt(3.0)
            assert abs(observed - clean) < 3.0 * sigma / np.sqrt(n) + 1e-9
            means.append(observed / clean)
    assert means  # the bound was actually exercised


def test_clouds_hide_optical_objects():
    spec = spec_with(cloud_density=1.0, p_both=1.0, min_objects=2, max_objects=2)
    found_hidden = False
    for index in range(20):
        scene = synth.generate_scene(spec, index)
        for obj in scene.objects:
            region = obj.mask > 0.5
            bg = np.all(scene.optical[:, region] == synth.BG_OPTICAL[:, None], axis=0)
            if bg.any():
                found_hidden = True
        # SAR is unaffected by clouds: every non-optical-only object stays bright
        for obj in scene.objects:
            interior = (obj.mask - synth._boundary(obj.mask)) > 0.5
            if obj.visibility != "optical_only" and interior.sum() > 0:
                clean = synth.class_sar_intensity(obj.class_id, spec.classes)
                assert scene.sar[0][interior].mean() > clean * (1 - spec.speckle) - 1e-6
    assert found_hidden


def test_complementarity_oracle_property():
    # visibility-rule oracle on present-class existence queries: a single
    # modality answers exactly its own-visibility share; both answer all
    spec = spec_with(p_opt_only=0.5, p_sar_only=0.5, p_both=0.0, seed=123)
    opt_correct = sar_correct = union_correct = 0
    present_total = 0
    exists_total = 0
    exists_correct_union = 0
    for index in range(120):
        scene = synth.generate_scene(spec, index)
        visible_opt = {o.class_id for o in scene.objects if o.visibility in ("optical_only", "both")}
        visible_sar = {o.class_id for o in scene.objects if o.visibility in ("sar_only", "both")}
        present = {o.class_id for o in scene.objects}
        for q in scene.queries:
            if q.kind != "exists":
                continue
            exists_total += 1
            c = int(q.tokens[1]) - synth.TOK_CLASS_BASE
            truth = q.answer == synth.ANS_YES
            assert truth == (c in present)
            if ((c in visible_opt) or (c in visible_sar)) == truth:
                exists_correct_union += 1
            if truth:
                present_total += 1
                opt_correct += int(c in visible_opt)
                sar_correct += int(c in visible_sar)
    assert exists_correct_union == exists_total          # both modalities: 100%
    assert opt_correct + sar_correct == present_total    # single share splits the yes set
    assert 0.35 < opt_correct / present_total < 0.65     # ~50% each at p=0.5


def test_placement_failure_raises():
    spec = spec_with(height=12, width=12, min_objects=4, max_objects=4, classes=6)
    with pytest.raises(synth.GenerationError):
        for index in range(50):
            synth.generate_scene(spec, index)


def test_spec_validation():
    with pytest.raises(tz.DomainError):
        spec_with(p_both=0.5)  # fractions no longer sum to 1
    with pytest.raises(tz.DomainError):
        spec_with(max_objects=9, classes=4)


def test_mask_iou_cases():
    a = np.zeros((4, 4), dtype=np.float32)
    a[:2, :2] = 1
    assert synth.mask_iou(a, a) == 1.0
    b = np.zeros((4, 4), dtype=np.float32)
    b[2:, 2:] = 1
    assert synth.mask_iou(a, b) == 0.0
    c = np.zeros((4, 4), dtype=np.float32)
    c[:2, :4] = 1
    assert synth.mask_iou(a, c) == 0.5
    assert synth.mask_iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    with pytest.raises(tz.DomainError):
        synth.mask_iou(a * 2.0, a)


def test_aggregate_metrics():
    ones = np.ones((4, 4), dtype=np.float32)
    zeros = np.zeros((4, 4), dtype=np.float32)
    half = ones.copy()
    half[2:] = 0
    got = synth.aggregate_metrics(
        mask_pairs=[(ones, ones), (zeros_like_box(), ones)],
        label_pairs=[(1, 1), (0, 1)])
    assert got["miou"] == pytest.approx(0.5)
    assert got["accuracy"] == pytest.approx(0.5)

    single = synth.aggregate_metrics(mask_pairs=[(half, ones)], label_pairs=[(2, 2)])
    assert single["miou"] == pytest.approx(0.5)
    assert single["oiou"] == pytest.approx(0.5)

    masks = [(half, ones), (ones, ones), (zeros_like_box(), ones)]
    got3 = synth.aggregate_metrics(mask_pairs=masks, label_pairs=[(1, 1)])
    inter = 8 + 16 + 0
    union = 16 + 16 + 16
    assert got3["oiou"] == pytest.approx(inter / union, abs=1e-6)
    assert got3["miou"] == pytest.approx((0.5 + 1.0 + 0.0) / 3, abs=1e-6)

    with pytest.raises(tz.DomainError):
        synth.aggregate_metrics(mask_pairs=[], label_pairs=[(1, 1)])


def zeros_like_box():
    return np.zeros((4, 4), dtype=np.float32)


def test_dataset_round_trip_bit_exact(tmp_path):
    spec = spec_with(p_opt_only=0.25, p_sar_only=0.25, p_both=0.5, cloud_density=0.2)
    scenes = [synth.generate_scene(spec, i) for i in range(6)]
    d1 = tmp_path / "ds1"
    dataset_io.write_dataset(d1, spec, scenes)
    spec2, scenes2 = dataset_io.read_dataset(d1)
    assert spec2 == spec
    assert len(scenes2) == 6
    for a, b in zip(scenes, scenes2):
        assert scene_digest(a) == scene_digest(b)
    d2 = tmp_path / "ds2"
    dataset_io.write_dataset(d2, spec2, scenes2)
    assert (d1 / "data.bin").read_bytes() == (d2 / "data.bin").read_bytes()
    assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()
