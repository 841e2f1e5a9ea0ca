"""Region prompts, per-token coverage fractions and soft-label targets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, ValidationError
from .numerics import adaptive_bins

BOX = "box"
MASK = "mask"


@dataclass(frozen=True)
class RegionPrompt:
    mask: np.ndarray  # (H0, W0) uint8 in {0, 1}
    frame_index: int = 0
    source_kind: str = MASK

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise DimensionError(f"region mask must be 2-D, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValidationError("region mask entries must be 0 or 1")
        if self.frame_index < 0:
            raise ValidationError("frame_index must be >= 0")
        if self.source_kind not in (BOX, MASK):
            raise ValidationError(f"unknown source kind {self.source_kind!r}")
        object.__setattr__(self, "mask", m.astype(np.uint8))

    @classmethod
    def from_mask(cls, mask, frame_index: int = 0) -> "RegionPrompt":
        return cls(np.asarray(mask).astype(np.uint8), frame_index, MASK)

    @property
    def grid(self) -> tuple[int, int]:
        return self.mask.shape


def rasterize_box(box: Sequence[int], grid: tuple[int, int], frame_index: int = 0) -> RegionPrompt:
    """Mask of pixels with ``x0 <= x < x1`` and ``y0 <= y < y1``."""
    x0, y0, x1, y1 = (int(v) for v in box)
    h0, w0 = grid
    if not (0 <= x0 < x1 <= w0 and 0 <= y0 < y1 <= h0):
        raise ValidationError(f"box {tuple(box)} is degenerate or outside the {h0}x{w0} grid")
    mask = np.zeros((h0, w0), dtype=np.uint8)
    mask[y0:y1, x0:x1] = 1
    return RegionPrompt(mask, frame_index, BOX)


@dataclass
class CoverageGrid:
    fractions: np.ndarray  # (H, W, N)


def coverage_fractions(prompts: Sequence[RegionPrompt], token_grid: tuple[int, int],
                       frame_grid: tuple[int, int] | None = None) -> CoverageGrid:
    """Fraction of each token cell covered by each mask, using the pooling bins.

    ``frame_grid`` is needed only when ``prompts`` is empty.
    """
    H, W = token_grid
    if prompts:
        frame_grid = prompts[0].grid
        for p in prompts:
            if p.grid != frame_grid:
                raise DimensionError(f"prompt grids differ: {p.grid} vs {frame_grid}")
    elif frame_grid is None:
        return CoverageGrid(np.zeros((H, W, 0)))
    h0, w0 = frame_grid
    if H > h0 or W > w0:
        raise DimensionError(f"token grid {token_grid} is finer than frame grid {frame_grid}")
    if not prompts:
        return CoverageGrid(np.zeros((H, W, 0)))
    masks = np.stack([p.mask for p in prompts]).astype(np.int64)  # (N, h0, w0)
    out = np.empty((H, W, len(prompts)))
    if h0 % H == 0 and w0 % W == 0:
        kh, kw = h0 // H, w0 // W
        counts = masks.reshape(len(prompts), H, kh, W, kw).sum(axis=(2, 4))
        out[:] = np.moveaxis(counts, 0, -1) / (kh * kw)
        return CoverageGrid(out)
    for i, (r0, r1) in enumerate(adaptive_bins(h0, H)):
        for j, (c0, c1) in enumerate(adaptive_bins(w0, W)):
            out[i, j] = masks[:, r0:r1, c0:c1].sum(axis=(1, 2)) / ((r1 - r0) * (c1 - c0))
    return CoverageGrid(out)


@dataclass
class SoftLabelTarget:
    dist: np.ndarray  # (T, H, W, n_marks + 1); class n_marks is background

    @property
    def background(self) -> int:
        return self.dist.shape[-1] - 1


def build_soft_labels(coverage: Sequence[CoverageGrid], assignment: Sequence[int] | Mapping[int, int],
                      n_marks: int) -> SoftLabelTarget:
    """Per-token distribution over the marks plus background.

    ``assignment`` maps region index -> mark index (a sequence is read as
    ``assignment[region]``). Background takes whatever mass the regions leave;
    if overlapping regions push the total above one the whole vector is
    renormalised.
    """
    if isinstance(assignment, Mapping):
        items = sorted(assignment.items())
    else:
        items = list(enumerate(assignment))
    marks = [int(m) for _, m in items]
    if len(set(marks)) != len(marks):
        raise ValidationError(f"assignment {marks} is not injective")
    if any(not 0 <= m < n_marks for m in marks):
        raise ValidationError(f"assignment {marks} falls outside [0, {n_marks})")
    if not coverage:
        raise ValidationError("coverage must be given for at least one frame")
    H, W, _ = coverage[0].fractions.shape
    dist = np.zeros((len(coverage), H, W, n_marks + 1))
    for t, cov in enumerate(coverage):
        frac = cov.fractions
        if frac.shape[:2] != (H, W):
            raise DimensionError("coverage grids differ between frames")
        for region, mark in items:
            if region >= frac.shape[2]:
                raise ValidationError(f"frame {t} has no coverage for region {region}")
            dist[t, :, :, mark] += frac[:, :, region]
    raw = dist[..., :n_marks].sum(axis=-1)
    dist[..., n_marks] = np.maximum(0.0, 1.0 - raw)
    over = raw > 1.0
    if over.any():
        dist[over] /= dist[over].sum(axis=-1, keepdims=True)
    return SoftLabelTarget(dist)
