"""Patch-structured binary masks: complementary pairs, independent random
pairs, and K-way partitions, over 1D, 2D or 3D grids.

A mask is constant on aligned b-sized blocks along every axis. Each
block is drawn visible (1) with probability 1 - r, matching the patch-wise
Bernoulli sampling rule. Complementary pairs are (D, 1 - D); K-way
partitions assign every block to exactly one of K masks.

All mask objects are immutable after construction and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MaskConfig:
    dims: tuple[int, ...]  # (d,), (H, W) or (H, W, Z)
    patch: int
    ratio: float

    def __post_init__(self):
        if len(self.dims) not in (1, 2, 3):
            raise ValueError(f"dims must be 1D, 2D or 3D, got {self.dims}")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"extents must be positive, got {self.dims}")
        if self.patch <= 0:
            raise ValueError(f"patch size must be positive, got {self.patch}")
        for d in self.dims:
            if d % self.patch != 0:
                raise ValueError(
                    f"extent {d} not divisible by patch size {self.patch}; "
                    "partial edge blocks are not supported")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1], got {self.ratio}")

    @property
    def blocks(self) -> tuple[int, ...]:
        return tuple(d // self.patch for d in self.dims)


@dataclass(frozen=True)
class PatchMask:
    dims: tuple[int, ...]
    patch: int
    bits: np.ndarray  # {0, 1} float64 over the full grid

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.float64)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        if bits.shape != tuple(self.dims):
            raise ValueError(f"bits shape {bits.shape} != dims {self.dims}")
        if not np.all((bits == 0.0) | (bits == 1.0)):
            raise ValueError("mask bits must be 0 or 1")

    @property
    def visible_fraction(self) -> float:
        return float(self.bits.mean())


@dataclass(frozen=True)
class MaskedPair:
    kind: str  # complementary | random | multiview
    masks: tuple[PatchMask, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in ("complementary", "random", "multiview"):
            raise ValueError(f"unknown pair kind '{self.kind}'")
        object.__setattr__(self, "masks", tuple(self.masks))
        total = sum(m.bits for m in self.masks)
        if self.kind == "complementary":
            if len(self.masks) != 2 or not np.all(total == 1.0):
                raise ValueError("complementary pair must sum to all-ones")
        elif self.kind == "multiview":
            if len(self.masks) < 2 or not np.all(total == 1.0):
                raise ValueError("multiview masks must form an exact partition")
        elif len(self.masks) != 2:
            raise ValueError("random pair must hold exactly two masks")


def _expand_blocks(block_bits: np.ndarray, patch: int) -> np.ndarray:
    out = block_bits
    for axis in range(out.ndim):
        out = np.repeat(out, patch, axis=axis)
    return out


def sample_patch_mask(config: MaskConfig, seed: int) -> PatchMask:
    """Draw each aligned block visible with probability 1 - ratio."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    block_bits = (rng.random(config.blocks) >= config.ratio).astype(np.float64)
    return PatchMask(config.dims, config.patch, _expand_blocks(block_bits, config.patch))


def complement(mask: PatchMask) -> PatchMask:
    return PatchMask(mask.dims, mask.patch, 1.0 - mask.bits)


def apply_mask(x: np.ndarray, mask: PatchMask) -> np.ndarray:
    """Zero out masked entries; mask broadcasts over leading batch/channel dims."""
    x = np.asarray(x, dtype=np.float64)
    nd = len(mask.dims)
    if x.ndim < nd or x.shape[x.ndim - nd:] != tuple(mask.dims):
        raise ValueError(f"trailing dims of {x.shape} do not match mask dims {mask.dims}")
    return x * mask.bits


def sample_pair(config: MaskConfig, kind: str, seed: int, k: int = 2) -> MaskedPair:
    """Sample a mask pair (or K-tuple for kind='multiview').

    complementary: one Bernoulli draw D plus its complement 1 - D.
    random: two masks from independent derived seeds, no joint constraint.
    multiview: every block assigned uniformly to one of k masks, so the
    masks partition the grid exactly; the config ratio is ignored.
    """
    if kind == "complementary":
        d = sample_patch_mask(config, seed)
        return MaskedPair(kind, (d, complement(d)))
    if kind == "random":
        s1, s2 = np.random.SeedSequence(seed).spawn(2)
        rng1 = np.random.default_rng(s1)
        rng2 = np.random.default_rng(s2)
        masks = tuple(
            PatchMask(config.dims, config.patch,
                      _expand_blocks((rng.random(config.blocks) >= config.ratio)
                                     .astype(np.float64), config.patch))
            for rng in (rng1, rng2))
        return MaskedPair(kind, masks)
    if kind == "multiview":
        if k < 2:
            raise ValueError(f"multiview needs K >= 2, got {k}")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        owner = rng.integers(0, k, size=config.blocks)
        masks = tuple(
            PatchMask(config.dims, config.patch,
                      _expand_blocks((owner == i).astype(np.float64), config.patch))
            for i in range(k))
        return MaskedPair(kind, masks)
    raise ValueError(f"unknown pair kind '{kind}'")


# -- debug serialization (run-length text; not a stability contract) ---

def mask_to_rle(mask: PatchMask) -> str:
    """Compact run-length text: 'HxW[xZ] b=PATCH first=BIT runs...'."""
    flat = mask.bits.ravel().astype(int)
    runs = []
    count = 1
    for prev, cur in zip(flat[:-1], flat[1:]):
        if cur == prev:
            count += 1
        else:
            runs.append(count)
            count = 1
    runs.append(count)
    dims = "x".join(str(d) for d in mask.dims)
    return f"{dims} b={mask.patch} first={flat[0]} " + " ".join(map(str, runs))


def mask_from_rle(text: str) -> PatchMask:
    head_dims, head_patch, head_first, *runs = text.split()
    dims = tuple(int(d) for d in head_dims.split("x"))
    patch = int(head_patch.removeprefix("b="))
    bit = int(head_first.removeprefix("first="))
    flat = []
    for run in runs:
        flat.extend([bit] * int(run))
        bit = 1 - bit
    return PatchMask(dims, patch, np.asarray(flat, dtype=np.float64).reshape(dims))
