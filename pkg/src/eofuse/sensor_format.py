"""Deterministic multi-sensor input formatting.

Sub-3-channel SAR images are padded to pseudo-RGB; multispectral band stacks
are grouped into 3-channel frame sequences. Defaults follow the better
ablation settings: zero padding for SAR, triplet grouping for multispectral.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .tensor import DimensionError, DomainError, f32

SENSORS = ("sar", "multispectral", "optical")
PAD_MODES = ("zero_pad", "replicate")
GROUP_MODES = ("triplet", "single")


@dataclasses.dataclass
class RawSensorImage:
    bands: np.ndarray   # (C, H, W)
    sensor: str

    def __post_init__(self):
        if self.bands.ndim != 3 or self.bands.shape[0] < 1:
            raise DimensionError(f"bands must be (C>=1, H, W), got {self.bands.shape}")
        if self.sensor not in SENSORS:
            raise DomainError(f"unknown sensor {self.sensor!r}")
        c = self.bands.shape[0]
        if self.sensor == "sar" and c > 3:
            raise DomainError(f"SAR images carry at most 3 channels, got {c}")
        if self.sensor == "optical" and c != 3:
            raise DomainError(f"optical images carry exactly 3 channels, got {c}")


@dataclasses.dataclass
class FrameSequence:
    frames: list[np.ndarray]            # each (3, H, W)
    ordering: list[tuple[int, ...]]     # source band indices per frame


def pad_sar(img: RawSensorImage, mode: str = "zero_pad") -> np.ndarray:
    """Pad a 1- or 2-channel SAR image to a 3-channel pseudo-RGB frame.

    ``zero_pad`` appends all-zero channels; ``replicate`` repeats the existing
    channels cyclically. 3-channel input passes through unchanged.
    """
    if mode not in PAD_MODES:
        raise DomainError(f"unknown pad mode {mode!r}")
    if img.sensor != "sar":
        raise DomainError(f"pad_sar expects a SAR image, got {img.sensor!r}")
    c, h, w = img.bands.shape
    if c == 3:
        return img.bands.astype(f32, copy=True)
    out = np.zeros((3, h, w), dtype=f32)
    out[:c] = img.bands
    if mode == "replicate":
        for i in range(c, 3):
            out[i] = img.bands[i % c]
    return out


def group_bands(img: RawSensorImage, mode: str = "triplet") -> FrameSequence:
    """Group multispectral bands into pseudo-RGB frames.

    ``triplet`` packs consecutive band triples (the final partial triple is
    zero-padded); ``single`` emits one zero-padded frame per band.
    """
    if mode not in GROUP_MODES:
        raise DomainError(f"unknown grouping mode {mode!r}")
    c, h, w = img.bands.shape
    frames = []
    ordering = []
    if mode == "single":
        groups = [(i,) for i in range(c)]
    else:
        groups = [tuple(range(i, min(i + 3, c))) for i in range(0, c, 3)]
    for group in groups:
        frame = np.zeros((3, h, w), dtype=f32)
        for slot, band in enumerate(group):
            frame[slot] = img.bands[band]
        frames.append(frame)
        ordering.append(group)
    return FrameSequence(frames=frames, ordering=ordering)
