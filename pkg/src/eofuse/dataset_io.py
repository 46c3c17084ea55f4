"""Dataset container: a directory with ``manifest.json`` and ``data.bin``.

The manifest lists the scene count, the generating spec, and per-scene array
entries (name, dtype, shape, byte offset into the blob). The blob concatenates
little-endian float32 and int32 arrays. Write -> read round-trips bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .synth import QUERY_KINDS, SHAPES, VISIBILITY, Query, Scene, SceneObject, SceneSpec
from .tensor import f32

_DTYPES = {"<f4", "<i4"}


def _scene_arrays(scene: Scene) -> dict[str, np.ndarray]:
    n = len(scene.objects)
    h, w = scene.optical.shape[1:]
    masks = (np.stack([o.mask for o in scene.objects]).astype("<i4")
             if n else np.zeros((0, h, w), dtype="<i4"))
    nq = len(scene.queries)
    return {
        "optical": scene.optical.astype("<f4"),
        "sar": scene.sar.astype("<f4"),
        "obj_class": np.array([o.class_id for o in scene.objects], dtype="<i4"),
        "obj_bbox": np.array([o.bbox for o in scene.objects], dtype="<i4").reshape(n, 4),
        "obj_visibility": np.array([VISIBILITY.index(o.visibility) for o in scene.objects], dtype="<i4"),
        "obj_shape_kind": np.array([SHAPES.index(o.shape_kind) for o in scene.objects], dtype="<i4"),
        "obj_shape_params": np.array([o.shape_params for o in scene.objects], dtype="<f4").reshape(n, 4),
        "obj_masks": masks,
        "q_tokens": np.stack([q.tokens for q in scene.queries]).astype("<i4") if nq
                    else np.zeros((0, 2), dtype="<i4"),
        "q_target": np.array([q.target for q in scene.queries], dtype="<i4"),
        "q_answer": np.array([q.answer for q in scene.queries], dtype="<i4"),
        "q_kind": np.array([QUERY_KINDS.index(q.kind) for q in scene.queries], dtype="<i4"),
    }


def _scene_from_arrays(arrays: dict[str, np.ndarray]) -> Scene:
    objects = []
    for i in range(arrays["obj_class"].shape[0]):
        objects.append(SceneObject(
            class_id=int(arrays["obj_class"][i]),
            bbox=tuple(int(v) for v in arrays["obj_bbox"][i]),
            mask=arrays["obj_masks"][i].astype(f32),
            visibility=VISIBILITY[int(arrays["obj_visibility"][i])],
            shape_kind=SHAPES[int(arrays["obj_shape_kind"][i])],
            shape_params=tuple(float(v) for v in arrays["obj_shape_params"][i]),
        ))
    queries = []
    for i in range(arrays["q_tokens"].shape[0]):
        queries.append(Query(
            tokens=arrays["q_tokens"][i].astype(np.int32),
            target=int(arrays["q_target"][i]),
            answer=int(arrays["q_answer"][i]),
            kind=QUERY_KINDS[int(arrays["q_kind"][i])],
        ))
    return Scene(optical=arrays["optical"].astype(f32), sar=arrays["sar"].astype(f32),
                 objects=objects, queries=queries)


def write_dataset(directory, spec: SceneSpec, scenes: list[Scene]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offset = 0
    scene_entries = []
    chunks = []
    for scene in scenes:
        entry = {}
        for name, arr in _scene_arrays(scene).items():
            raw = np.ascontiguousarray(arr).tobytes()
            entry[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
            chunks.append(raw)
            offset += len(raw)
        scene_entries.append(entry)
    manifest = {
        "version": 1,
        "count": len(scenes),
        "spec": dataclasses.asdict(spec),
        "scenes": scene_entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    with open(directory / "data.bin", "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)


def read_dataset(directory) -> tuple[SceneSpec, list[Scene]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    blob = (directory / "data.bin").read_bytes()
    spec = SceneSpec(**manifest["spec"])
    scenes = []
    for entry in manifest["scenes"]:
        arrays = {}
        for name, info in entry.items():
            if info["dtype"] not in _DTYPES:
                raise ValueError(f"unsupported dtype {info['dtype']} in manifest")
            shape = tuple(info["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype=info["dtype"], count=count, offset=info["offset"])
            arrays[name] = arr.reshape(shape)
        scenes.append(_scene_from_arrays(arrays))
    return spec, scenes
