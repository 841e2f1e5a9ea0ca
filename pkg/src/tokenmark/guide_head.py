"""Training-only region guide head: per-visual-token mark classification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ValidationError
from .numerics import LinearLayer, Tensor
from .region import SoftLabelTarget

DEFAULT_ALPHA = 0.05


class GuideHead:
    """Linear classifier ``d_model -> n_marks + 1``; the last class is background."""

    def __init__(self, d_model: int, n_marks: int, rng: np.random.Generator):
        self.n_marks = n_marks
        self.classifier = LinearLayer(d_model, n_marks + 1, rng)

    @property
    def n_classes(self) -> int:
        return self.n_marks + 1

    def parameters(self) -> dict[str, Tensor]:
        return {f"classifier.{k}": v for k, v in self.classifier.parameters().items()}


def aux_forward(states: Tensor, head: GuideHead, grid: tuple[int, int, int] | None = None) -> Tensor:
    """Classify visual output states.

    ``states`` is either (..., T, H, W, D) or, with ``grid=(T, H, W)``, the
    flattened (..., T*H*W, D) frame-major block taken from the language model.
    """
    if grid is not None:
        T, H, W = grid
        if states.shape[-2] != T * H * W:
            raise DimensionError(f"expected {T * H * W} visual states, got {states.shape[-2]}")
        states = states.reshape(*states.shape[:-2], T, H, W, states.shape[-1])
    if states.ndim < 4:
        raise DimensionError(f"states must be (..., T, H, W, D), got {states.shape}")
    return head.classifier(states)


def aux_loss(logits: Tensor, target: SoftLabelTarget | np.ndarray) -> Tensor:
    """Mean soft cross-entropy over every (frame, row, column) position."""
    dist = target.dist if isinstance(target, SoftLabelTarget) else np.asarray(target)
    if dist.shape != logits.shape:
        raise DimensionError(f"target {dist.shape} does not match logits {logits.shape}")
    return nx.softmax_cross_entropy_soft(logits, dist)


@dataclass(frozen=True)
class LossReport:
    llm_loss: float
    aux_loss: float
    alpha: float
    total: float


def combine_loss(llm_loss, aux, alpha: float = DEFAULT_ALPHA):
    """``llm_loss + alpha * aux``.

    With floats returns a :class:`LossReport`. With tensors returns
    ``(total_tensor, report)``; when ``alpha == 0`` the auxiliary term is left
    out of the graph entirely so it contributes no gradient.
    """
    if alpha < 0:
        raise ValidationError(f"alpha must be non-negative, got {alpha}")
    if isinstance(llm_loss, Tensor):
        aux_value = float(aux.data) if isinstance(aux, Tensor) else float(aux)
        if alpha == 0 or not isinstance(aux, Tensor):
            total = llm_loss if alpha == 0 else nx.add(llm_loss, alpha * aux_value)
        else:
            total = nx.add(llm_loss, nx.mul(aux, alpha))
        report = LossReport(float(llm_loss.data), aux_value, alpha, float(llm_loss.data) + alpha * aux_value)
        return total, report
    llm_loss, aux = float(llm_loss), float(aux)
    return LossReport(llm_loss, aux, alpha, llm_loss + alpha * aux)


def class_probabilities(logits: Tensor | np.ndarray) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def heatmap(logits: Tensor | np.ndarray, mark_index: int) -> np.ndarray:
    """Softmax probability of class ``mark_index`` at every (frame, row, column)."""
    n_classes = logits.shape[-1]
    if not 0 <= mark_index < n_classes:
        raise ValidationError(f"class index {mark_index} outside [0, {n_classes - 1}]")
    return class_probabilities(logits)[..., mark_index]
