"""Token marks: a learnable palette of region identifiers.

A region gets a randomly drawn row of the palette. The row is painted onto the
region's pixels, pooled down to the visual-token grid, projected into the
language model's embedding space and added to the visual tokens. The same
projection of the same row replaces the region's placeholder in the text.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import CapacityError, DimensionError, ValidationError
from .numerics import LinearLayer, Tensor
from .region import RegionPrompt

DEFAULT_EPS = 1e-6

TEXT = "text"
VISUAL = "visual"
MARK = "injected-mark"


class TokenMarkBank:
    """Palette ``marks`` (n_marks, mark_dim) and the bias-free projection to ``d_model``."""

    def __init__(self, n_marks: int, mark_dim: int, d_model: int, rng: np.random.Generator,
                 init_std: float = 0.02, trainable: bool = True):
        if n_marks < 1:
            raise ValidationError("a mark bank needs at least one mark")
        self.marks = Tensor(rng.normal(0.0, init_std, size=(n_marks, mark_dim)), requires_grad=trainable)
        self.projection = LinearLayer(mark_dim, d_model, rng, bias=False)

    @property
    def n_marks(self) -> int:
        return self.marks.shape[0]

    @property
    def mark_dim(self) -> int:
        return self.marks.shape[1]

    @property
    def d_model(self) -> int:
        return self.projection.out_dim

    def parameters(self) -> dict[str, Tensor]:
        return {"marks": self.marks, "projection.weight": self.projection.weight}

    def project(self, x: Tensor) -> Tensor:
        return self.projection(x)


@dataclass(frozen=True)
class MarkAssignment:
    indices: tuple[int, ...]
    rng_seed: int | None = None

    def __len__(self):
        return len(self.indices)


def sample_marks(n: int, bank: TokenMarkBank | int, seed=None) -> MarkAssignment:
    """Draw ``n`` distinct mark indices uniformly without replacement.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    n_marks = bank if isinstance(bank, int) else bank.n_marks
    if n <= 0:
        raise ValidationError(f"need at least one mark, asked for {n}")
    if n > n_marks:
        raise CapacityError(f"{n} regions exceed the {n_marks} available marks")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(n_marks, size=n, replace=False)
    return MarkAssignment(tuple(int(i) for i in idx), seed if isinstance(seed, int) else None)


def mark_weights(prompts: Sequence[RegionPrompt], eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-pixel weights ``m_i / (eps + sum_j m_j)``, shape (N, H0, W0)."""
    masks = np.stack([p.mask for p in prompts]).astype(np.float64)
    return masks / (eps + masks.sum(axis=0))


def spatial_mark(prompts: Sequence[RegionPrompt], assignment: MarkAssignment,
                 bank: TokenMarkBank, eps: float = DEFAULT_EPS) -> Tensor:
    """Dense mark field (C, H0, W0): each pixel gets the eps-regularised mean of its regions' marks."""
    if not prompts:
        raise ValidationError("spatial_mark needs at least one region prompt")
    if len(prompts) != len(assignment):
        raise ValidationError(f"{len(prompts)} prompts but {len(assignment)} assigned marks")
    grid = prompts[0].grid
    if any(p.grid != grid for p in prompts):
        raise DimensionError("region prompts are on different grids")
    weights = mark_weights(prompts, eps)
    n = len(prompts)
    chosen = nx.getitem(bank.marks, np.asarray(assignment.indices))  # (N, C)
    dense = nx.matmul(nx.transpose(chosen), Tensor(weights.reshape(n, -1)))
    return dense.reshape(bank.mark_dim, *grid)


def pool_and_project(dense: Tensor, bank: TokenMarkBank, token_grid: tuple[int, int]) -> Tensor:
    """Pool (C, H0, W0) to the token grid and project each cell: returns (D, H, W)."""
    pooled = nx.adaptive_avg_pool2d(dense, *token_grid)
    cells = nx.transpose(pooled, (1, 2, 0))  # (H, W, C)
    return nx.transpose(bank.project(cells), (2, 0, 1))


def region_embedding(prompts: Sequence[RegionPrompt], assignment: MarkAssignment, bank: TokenMarkBank,
                     token_grid: tuple[int, int], eps: float = DEFAULT_EPS) -> Tensor | None:
    """Projected spatial mark for a frame, or None when there are no prompts."""
    if not prompts:
        return None
    return pool_and_project(spatial_mark(prompts, assignment, bank, eps), bank, token_grid)


def inject_visual(v: Tensor, s_hat: Tensor | None) -> Tensor:
    """Residual injection; without a mark field the tokens are returned unchanged."""
    if s_hat is None:
        return v
    if v.shape != s_hat.shape:
        raise DimensionError(f"visual tokens {v.shape} and mark field {s_hat.shape} differ")
    return nx.add(v, s_hat)


@dataclass
class MultimodalSequence:
    embeddings: Tensor  # (L, D)
    tags: list[str]
    placeholders: dict[int, int] = field(default_factory=dict)  # region index -> position

    def __len__(self):
        return self.embeddings.shape[0]


def inject_text(token_embeddings: Tensor | MultimodalSequence, placeholders: Sequence[int],
                assignment: MarkAssignment, bank: TokenMarkBank) -> MultimodalSequence:
    """Replace the embedding at ``placeholders[i]`` with the projection of region i's mark."""
    if isinstance(token_embeddings, MultimodalSequence):
        emb, tags = token_embeddings.embeddings, list(token_embeddings.tags)
    else:
        emb, tags = token_embeddings, [TEXT] * token_embeddings.shape[0]
    positions = [int(p) for p in placeholders]
    if len(positions) != len(assignment):
        raise ValidationError(f"{len(positions)} placeholders but {len(assignment)} assigned marks")
    if len(set(positions)) != len(positions):
        raise ValidationError(f"duplicate placeholder positions {positions}")
    if any(not 0 <= p < emb.shape[0] for p in positions):
        raise ValidationError(f"placeholder positions {positions} outside sequence of length {emb.shape[0]}")
    if not positions:
        return MultimodalSequence(emb, tags, {})
    chosen = nx.getitem(bank.marks, np.asarray(assignment.indices))
    out = nx.replace_rows(emb, positions, bank.project(chosen))
    for p in positions:
        tags[p] = MARK
    return MultimodalSequence(out, tags, dict(enumerate(positions)))


def flatten_frames(frames: Sequence[Tensor]) -> Tensor:
    """(D, H, W) frames -> (T*H*W, D) tokens, frame-major then row-major."""
    flat = [nx.transpose(f, (1, 2, 0)).reshape(-1, f.shape[0]) for f in frames]
    return flat[0] if len(flat) == 1 else nx.concat(flat, axis=0)


def assemble_video_sequence(frames: Sequence[Tensor], prompts: Sequence[RegionPrompt],
                            assignment: MarkAssignment | None, bank: TokenMarkBank | None,
                            text: MultimodalSequence, token_grid: tuple[int, int] | None = None,
                            eps: float = DEFAULT_EPS) -> MultimodalSequence:
    """Visual tokens of all frames (marks added to frame 0 only) followed by the text.

    Placeholder positions in the result are offset by the number of visual tokens.
    """
    if not frames:
        raise ValidationError("a video needs at least one frame")
    if any(p.frame_index != 0 for p in prompts):
        raise ValidationError("region prompts are only accepted on the first frame")
    if prompts:
        if assignment is None or bank is None:
            raise ValidationError("prompts given without a mark assignment and bank")
        grid = token_grid or frames[0].shape[1:]
        first = inject_visual(frames[0], region_embedding(prompts, assignment, bank, grid, eps))
        frames = [first, *frames[1:]]
    visual = flatten_frames(frames)
    n_vis = visual.shape[0]
    emb = nx.concat([visual, text.embeddings], axis=0)
    tags = [VISUAL] * n_vis + list(text.tags)
    return MultimodalSequence(emb, tags, {r: p + n_vis for r, p in text.placeholders.items()})
