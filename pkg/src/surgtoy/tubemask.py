"""Instrument-centric tube masking at multiple temporal scales.

A video of shape ``(N, H, W, C)`` is cut into ``k x h x w`` tubes. A tube is an
instrument tube when its spatial cell overlaps an instrument box on the tube's
first frame. Instrument tubes survive as visible hints with probability ``r``;
everything else is masked and becomes a reconstruction target.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import MissingAnnotationFrame, NonDivisible

log = logging.getLogger(__name__)

DEFAULT_SCALES = (2, 4, 8, 16)


@dataclass(frozen=True)
class TubeSpec:
    k: int
    h: int = 16
    w: int = 16


@dataclass(frozen=True)
class TubeGrid:
    spec: TubeSpec
    frames: int
    height: int
    width: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames // self.spec.k, self.height // self.spec.h, self.width // self.spec.w

    @property
    def count(self) -> int:
        nt, nr, nc = self.shape
        return nt * nr * nc

    def reference_frame(self, t: int) -> int:
        return t * self.spec.k

    def rect(self, row: int, col: int) -> tuple[int, int, int, int]:
        """Pixel rectangle ``(x0, y0, x1, y1)`` of a spatial cell, end-exclusive."""
        h, w = self.spec.h, self.spec.w
        return col * w, row * h, (col + 1) * w, (row + 1) * h


@dataclass(frozen=True)
class VolumeSpec:
    t: int = 2
    p: int = 8

    @property
    def size(self) -> tuple[int, int, int]:
        return self.t, self.p, self.p


@dataclass
class MaskPlan:
    spec: TubeSpec
    instrument: np.ndarray  # M, uint8 (nt, nr, nc)
    hint: np.ndarray        # H, uint8 (nt, nr, nc)
    r: float
    seed: int
    fallback: bool = False

    def to_arrays(self, prefix: str = "maskplan.") -> dict[str, np.ndarray]:
        return {
            prefix + "M": self.instrument.astype(np.uint8),
            prefix + "H": self.hint.astype(np.uint8),
            prefix + "meta": np.array([self.spec.k, self.spec.h, self.spec.w, self.seed, int(self.fallback)],
                                      dtype=np.int64),
            prefix + "r": np.array([self.r], dtype=np.float64),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "maskplan.") -> "MaskPlan":
        k, h, w, seed, fallback = (int(v) for v in arrays[prefix + "meta"])
        return cls(TubeSpec(k, h, w), arrays[prefix + "M"].astype(np.uint8),
                   arrays[prefix + "H"].astype(np.uint8), float(arrays[prefix + "r"][0]), seed, bool(fallback))


@dataclass
class VolumePartition:
    volume: VolumeSpec
    grid: tuple[int, int, int]  # volumes along (t, y, x)
    visible: np.ndarray  # int64 indices, ascending
    masked: np.ndarray

    @property
    def m(self) -> int:
        nt, ny, nx = self.grid
        return nt * ny * nx

    @property
    def degenerate_visible(self) -> bool:
        return self.visible.size == 0

    @property
    def no_target(self) -> bool:
        return self.masked.size == 0

    def coords(self, indices: np.ndarray) -> np.ndarray:
        """``(len(indices), 3)`` volume-grid coordinates ``(t, y, x)``."""
        _, ny, nx = self.grid
        idx = np.asarray(indices, dtype=np.int64)
        return np.stack([idx // (ny * nx), (idx // nx) % ny, idx % nx], axis=1)


def _check_div(axis: str, extent: int, divisor: int):
    if divisor <= 0 or extent % divisor:
        raise NonDivisible(axis, extent, divisor)


def partition_tubes(video_shape, spec: TubeSpec) -> TubeGrid:
    frames, height, width = video_shape[:3]
    _check_div("time", frames, spec.k)
    _check_div("height", height, spec.h)
    _check_div("width", width, spec.w)
    return TubeGrid(spec, frames, height, width)


def _overlap(a, b) -> int:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return max(0, min(ax1, bx1) - max(ax0, bx0)) * max(0, min(ay1, by1) - max(ay0, by0))


def compute_instrument_indicator(grid: TubeGrid, annotation, min_overlap: float = 0.0) -> np.ndarray:
    """M per tube, judged on the tube's first frame only.

    ``min_overlap`` is the fraction of the tube cell that must be covered; 0 means
    any single pixel counts.
    """
    nt, nr, nc = grid.shape
    area = grid.spec.h * grid.spec.w
    need = max(1, int(np.ceil(min_overlap * area)))
    m = np.zeros((nt, nr, nc), dtype=np.uint8)
    for t in range(nt):
        f = grid.reference_frame(t)
        if f >= len(annotation.boxes):
            raise MissingAnnotationFrame(f"no boxes recorded for frame {f}")
        boxes = [(b.x0, b.y0, b.x1, b.y1) for b in annotation.boxes[f]]
        for row in range(nr):
            for col in range(nc):
                cell = grid.rect(row, col)
                covered = sum(_overlap(cell, b) for b in boxes) if min_overlap > 0 else \
                    max((_overlap(cell, b) for b in boxes), default=0)
                m[t, row, col] = covered >= need
    return m


def sample_hints(m: np.ndarray, r: float, seed: int, background_keep_prob: float = 0.0) -> np.ndarray:
    """Keep each instrument tube as a hint with probability ``r``.

    One uniform draw is made per tube regardless of M, so plans are stable under
    changes to M elsewhere in the grid.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"hint probability r={r} outside [0, 1]")
    if not 0.0 <= background_keep_prob <= 1.0:
        raise ValueError(f"background_keep_prob={background_keep_prob} outside [0, 1]")
    rng = np.random.default_rng(seed)
    u = rng.random(m.shape)
    hint = (m.astype(bool) & (u < r))
    if background_keep_prob > 0:
        u_bg = rng.random(m.shape)
        hint |= ~m.astype(bool) & (u_bg < background_keep_prob)
    if not hint.any():
        log.warning("EmptyHint: no tube kept as a hint (%d instrument tubes, r=%g)", int(m.sum()), r)
    return hint.astype(np.uint8)


def make_mask_plan(video_shape, annotation, spec: TubeSpec, r: float, seed: int,
                   background_keep_prob: float = 0.0, min_overlap: float = 0.0) -> MaskPlan:
    grid = partition_tubes(video_shape, spec)
    m = compute_instrument_indicator(grid, annotation, min_overlap)
    if not m.any():
        # no instruments on any reference frame: uniform random hints over all tubes
        log.info("fallback: no instrument tubes in %s, uniform hints at r=%g", annotation.clip_id, r)
        hint = (np.random.default_rng(seed).random(m.shape) < r).astype(np.uint8)
        return MaskPlan(spec, m, hint, r, seed, fallback=True)
    return MaskPlan(spec, m, sample_hints(m, r, seed, background_keep_prob), r, seed)


def sample_scale(scales, rng: np.random.Generator) -> int:
    return int(scales[int(rng.integers(len(scales)))])


def partition_volumes(video_shape, hint: np.ndarray, spec: TubeSpec, volume: VolumeSpec) -> VolumePartition:
    frames, height, width = video_shape[:3]
    for axis, tube_ext, vol_ext in (("time", spec.k, volume.t), ("height", spec.h, volume.p),
                                    ("width", spec.w, volume.p)):
        if tube_ext % vol_ext:
            raise NonDivisible(axis, tube_ext, vol_ext)
    grid = partition_tubes(video_shape, spec)
    if hint.shape != grid.shape:
        raise ValueError(f"hint grid {hint.shape} does not match tube grid {grid.shape}")
    ft, fy, fx = spec.k // volume.t, spec.h // volume.p, spec.w // volume.p
    # upsample the tube hint grid to the volume grid
    vis = hint.astype(bool).repeat(ft, axis=0).repeat(fy, axis=1).repeat(fx, axis=2)
    flat = vis.reshape(-1)
    idx = np.arange(flat.size, dtype=np.int64)
    return VolumePartition(volume, vis.shape, idx[flat], idx[~flat])


def extract_volumes(video, volume: VolumeSpec):
    """Rearrange ``(N, H, W, C)`` into ``(m, t*p*p*C)`` rows in volume-index order.

    Works for numpy arrays and torch tensors.
    """
    n, h, w, c = video.shape
    t, p = volume.t, volume.p
    x = video.reshape(n // t, t, h // p, p, w // p, p, c)
    if hasattr(x, "permute"):
        x = x.permute(0, 2, 4, 1, 3, 5, 6)
    else:
        x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    return x.reshape((n // t) * (h // p) * (w // p), t * p * p * c)
