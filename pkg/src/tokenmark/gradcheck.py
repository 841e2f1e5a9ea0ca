"""Finite-difference verification of the full training loss."""
from __future__ import annotations

from .config import RunConfig
from .model import OmniModel, eval_assignment, make_batch
from .numerics import grad_check_groups
from .synth import generate_samples

GRAD_TOLERANCE = 1e-4


def model_grad_check(config: RunConfig, h: float = 1e-5) -> dict[str, float]:
    """Max relative error per parameter tensor of ``llm + alpha * aux`` on one batch.

    The batch covers pixels -> encoder -> marks -> projection -> injection -> LM
    -> both heads, so every parameter group sits on the checked path.
    """
    model = OmniModel(config)
    samples = generate_samples(config.batch_size, config.seed, config.synth_config())
    assignments = [eval_assignment(s, config.n_marks, config.seed, i) for i, s in enumerate(samples)]
    batch = make_batch(samples, assignments, config)
    return grad_check_groups(lambda: model.loss(batch)[0], model.trainable(), h)
