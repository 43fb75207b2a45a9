"""Synthetic domain-shifted segmentation data with exact ground truth.

Images are single-channel squares containing discs and axis-aligned
rectangles on a zero background. Each foreground class has a fixed base
intensity; a sinusoidal texture is added on foreground pixels, Gaussian
noise and a global intensity offset over the whole image. Domain shift
is covariate only: the label process (shape placement) depends on the
seed and geometry fields alone, so shifted domains share the same label
distribution.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace, asdict
from pathlib import Path

import numpy as np

from .seeds import child_rng

_MAGIC = b"CMSK"
_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    size: int = 64  # square canvas, divisible by 16
    classes: int = 3  # background + one class per inventory entry
    shapes: tuple[str, ...] = ("disc", "rect")
    count_range: tuple[int, int] = (1, 3)
    # Nonzero base level keeps real background away from the zero fill that
    # masking writes into dropped patches, mirroring how zeroing a
    # mean-normalized photo fills with the average gray rather than an
    # extreme value.
    offset: float = 0.2
    noise: float = 0.0
    frequency: float = 2.0
    texture_amp: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.size % 16 != 0 or self.size <= 0:
            raise ValueError(f"size must be a positive multiple of 16, got {self.size}")
        if self.classes < 2:
            raise ValueError("need at least background + one class")
        for s in self.shapes:
            if s not in ("disc", "rect"):
                raise ValueError(f"unknown shape kind '{s}'")
        if self.shapes and len(self.shapes) != self.classes - 1:
            raise ValueError("need exactly one shape kind per foreground class")
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad count range {self.count_range}")
        if self.noise < 0 or self.frequency <= 0:
            raise ValueError("noise must be >= 0 and frequency positive")


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray  # (1, H, W) float64
    label: np.ndarray  # (H, W) int64


def class_intensity(cls: int, num_classes: int) -> float:
    """Base gray level of a foreground class; background is 0."""
    if num_classes == 2:
        return 0.85
    return 0.35 + 0.5 * (cls - 1) / (num_classes - 2)


def _texture(spec: DomainSpec) -> np.ndarray:
    g = np.arange(spec.size) / spec.size
    return spec.texture_amp * np.outer(np.sin(2 * np.pi * spec.frequency * g),
                                       np.cos(2 * np.pi * spec.frequency * g))


def _draw_shape(label: np.ndarray, kind: str, cls: int, rng: np.random.Generator):
    size = label.shape[0]
    r_lo, r_hi = max(3, size // 10), max(4, size // 5)
    if r_lo >= size // 2:
        raise ValueError(f"canvas of size {size} cannot fit shapes")
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "disc":
        r = int(rng.integers(r_lo, r_hi + 1))
        cy = int(rng.integers(r, size - r))
        cx = int(rng.integers(r, size - r))
        label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    else:
        hy = int(rng.integers(r_lo, r_hi + 1))
        hx = int(rng.integers(r_lo, r_hi + 1))
        cy = int(rng.integers(hy, size - hy))
        cx = int(rng.integers(hx, size - hx))
        label[(np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)] = cls


def _render(spec: DomainSpec, index: int) -> SegSample:
    geo = child_rng(spec.seed, index, 0)  # geometry: shared across shifted domains
    label = np.zeros((spec.size, spec.size), dtype=np.int64)
    lo, hi = spec.count_range
    if spec.shapes:
        for _ in range(int(geo.integers(lo, hi + 1))):
            kind_idx = int(geo.integers(0, len(spec.shapes)))
            _draw_shape(label, spec.shapes[kind_idx], kind_idx + 1, geo)
    img = np.zeros((spec.size, spec.size))
    for cls in range(1, spec.classes):
        img[label == cls] = class_intensity(cls, spec.classes)
    fg = label > 0
    img[fg] += _texture(spec)[fg]
    appearance = child_rng(spec.seed, index, 1)
    if spec.noise > 0:
        img += appearance.normal(0.0, spec.noise, size=img.shape)
    img += spec.offset
    return SegSample(img[None, :, :], label)


def gen_domain(spec: DomainSpec, count: int, start: int = 0) -> list[SegSample]:
    """Deterministic samples [start, start + count) of the domain."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [_render(spec, i) for i in range(start, start + count)]


# Calibrated so a source-only model loses well over 5 IoU points on the
# target while teacher pseudo-labels stay mostly usable. A larger offset
# (for example +0.3) pushes the target background onto the darkest
# foreground intensity and collapses self-training entirely.
DEFAULT_SHIFT = {"offset": 0.15, "noise": 0.05, "frequency_factor": 2.0}


def make_shift_pair(base: DomainSpec, shift: dict | None = None
                    ) -> tuple[DomainSpec, DomainSpec]:
    """Source spec plus a covariate-shifted target spec."""
    shift = DEFAULT_SHIFT if shift is None else shift
    target = replace(base,
                     offset=base.offset + shift.get("offset", 0.0),
                     noise=base.noise + shift.get("noise", 0.0),
                     frequency=base.frequency * shift.get("frequency_factor", 1.0))
    return base, target


# -- optional binary dump ---------------------------------------------

def save_dataset(path, samples: list[SegSample], spec: DomainSpec) -> None:
    """Fixed-layout binary: magic, version, H, W, classes, count, then
    row-major float64 image + int32 label per sample. A JSON manifest is
    written next to it."""
    path = Path(path)
    h, w = samples[0].label.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", _VERSION, h, w, spec.classes, len(samples)))
        for s in samples:
            fh.write(s.image.astype("<f8").tobytes())
            fh.write(s.label.astype("<i4").tobytes())
    manifest = {"spec": asdict(spec), "count": len(samples),
                "file": path.name, "version": _VERSION}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2))


def load_dataset(path) -> list[SegSample]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a dataset file (bad magic)")
        version, h, w, _classes, count = struct.unpack("<IIIII", fh.read(20))
        if version != _VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        samples = []
        for _ in range(count):
            img = np.frombuffer(fh.read(8 * h * w), dtype="<f8").reshape(1, h, w)
            lbl = np.frombuffer(fh.read(4 * h * w), dtype="<i4").reshape(h, w)
            samples.append(SegSample(img.copy(), lbl.astype(np.int64)))
    return samples
