"""Training loop and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .errors import NumericError
from .guide_head import LossReport, class_probabilities
from .model import OmniModel, eval_assignment, make_batch
from .numerics import Adam
from .synth import TASK_KINDS, QASample
from .token_mark import sample_marks



class NonFiniteLoss(NumericError):
    def __init__(self, step: int, report: LossReport, indices: list[int], assignments):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.step = step
        self.report = report
        self.indices = indices
        self.assignments = assignments

    def dump(self) -> dict:
        return {
            "step": self.step,
            "llm_loss": repr(self.report.llm_loss),
            "aux_loss": repr(self.report.aux_loss),
            "total": repr(self.report.total),
            "sample_indices": self.indices,
            "mark_assignments": [list(a.indices) for a in self.assignments],
        }


@dataclass
class TrainState:
    model: OmniModel
    optimizer: Adam
    step: int = 0
    history: list[tuple[int, LossReport]] = field(default_factory=list)


def make_optimizer(model: OmniModel, config: RunConfig) -> Adam:
    return Adam(model.trainable().values(), lr=config.lr, betas=(config.beta1, config.beta2), eps=config.adam_eps)


def learning_rate(config: RunConfig, step: int) -> float:
    """Linear warmup to ``lr``, then optional cosine decay to zero at ``steps``."""
    if step <= config.warmup_steps:
        return config.lr * step / (config.warmup_steps + 1)
    if not config.cosine_decay:
        return config.lr
    span = max(1, config.steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _streams(config: RunConfig) -> tuple[np.random.Generator, np.random.Generator]:
    order_ss, mark_ss = np.random.SeedSequence([config.seed, 0x7472]).spawn(2)
    return np.random.default_rng(order_ss), np.random.default_rng(mark_ss)


def train(config: RunConfig, samples: Sequence[QASample], model: OmniModel | None = None,
          on_step: Callable[[int, LossReport], None] | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Minimise ``llm_loss + alpha * aux_loss`` with Adam on shuffled mini-batches.

    Marks are re-drawn for every sample on every visit. ``on_checkpoint`` is
    called before the first step and every ``checkpoint_every`` steps.
    """
    model = model or OmniModel(config)
    state = TrainState(model, make_optimizer(model, config))
    order_rng, mark_rng = _streams(config)
    n = len(samples)
    if on_checkpoint:
        on_checkpoint(state)
    if config.steps and n == 0:
        raise ValueError("cannot train on an empty dataset")
    queue: list[int] = []
    for step in range(1, config.steps + 1):
        if len(queue) < config.batch_size:
            queue.extend(order_rng.permutation(n).tolist() * max(1, -(-config.batch_size // n)))
        idx, queue = queue[: config.batch_size], queue[config.batch_size:]
        chosen = [samples[i] for i in idx]
        assignments = [sample_marks(len(s.regions), config.n_marks, mark_rng) for s in chosen]
        batch = make_batch(chosen, assignments, config)
        total, report, _ = model.loss(batch)
        if not (np.isfinite(report.llm_loss) and np.isfinite(report.total)
                and (model.head is None or np.isfinite(report.aux_loss))):
            raise NonFiniteLoss(step, report, idx, assignments)
        state.optimizer.zero_grad()
        total.backward()
        state.optimizer.lr = learning_rate(config, step)
        state.optimizer.step()
        state.step = step
        state.history.append((step, report))
        if on_step:
            on_step(step, report)
        if on_checkpoint and step % config.checkpoint_every == 0:
            on_checkpoint(state)
    return state


# ------------------------------------------------------------------ metrics

def _region_iou(pred: np.ndarray, target: np.ndarray, cls: int) -> float | None:
    p, t = pred == cls, target == cls
    union = np.logical_or(p, t).sum()
    if union == 0:
        return None
    return float(np.logical_and(p, t).sum() / union)


def evaluate(model: OmniModel, samples: Sequence[QASample], seed: int | None = None,
             batch_size: int | None = None) -> dict:
    """Answer accuracy per task kind and guide-head quality per frame.

    Answers are scored by exact match of the argmax at every answer position
    with the preceding answer tokens given, which equals exact match of greedy
    decoding. Guide-head metrics compare the argmax class of each visual token
    with the argmax of its soft label. Marks are fixed per sample index.
    """
    config = model.config
    seed = config.seed if seed is None else seed
    batch_size = batch_size or config.eval_batch_size
    T = config.n_frames
    bg = config.n_marks
    correct = {k: [] for k in TASK_KINDS}
    pix_hit = np.zeros(T)
    pix_tot = np.zeros(T)
    reg_hit = np.zeros(T)
    reg_tot = np.zeros(T)
    bg_tot = np.zeros(T)
    ious = [[] for _ in range(T)]
    in_gt_out = [[] for _ in range(T)]
    sample_pass = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        assignments = [eval_assignment(s, config.n_marks, seed, start + i) for i, s in enumerate(chunk)]
        batch = make_batch(chunk, assignments, config)
        out = model.forward(batch)
        pred_tokens = out.logits.data.argmax(-1)
        for b, sample in enumerate(chunk):
            sl = batch.answer_slices[b]
            ok = np.array_equal(pred_tokens[b, sl], batch.targets[b, sl])
            correct[sample.task_kind].append(bool(ok))
        if out.aux_logits is None:
            continue
        probs = class_probabilities(out.aux_logits)
        pred = probs.argmax(-1)
        target = batch.soft_labels.argmax(-1)
        for b in range(len(chunk)):
            marks = batch.assignments[b].indices
            for t in range(T):
                pix_hit[t] += (pred[b, t] == target[b, t]).sum()
                pix_tot[t] += target[b, t].size
                inside = target[b, t] != bg
                bg_tot[t] += (~inside).sum()
                reg_hit[t] += (pred[b, t][inside] == target[b, t][inside]).sum()
                reg_tot[t] += inside.sum()
                for r, mark in enumerate(marks):
                    iou = _region_iou(pred[b, t], target[b, t], mark)
                    if iou is not None:
                        ious[t].append(iou)
                    region = target[b, t] == mark
                    if region.any() and (~region).any():
                        p = probs[b, t, :, :, mark]
                        in_gt_out[t].append(bool(p[region].mean() > p[~region].mean()))
            verdicts = []
            for mark in marks:
                region = target[b] == mark
                if region.any() and (~region).any():
                    p = probs[b, ..., mark]
                    verdicts.append(bool(p[region].mean() > p[~region].mean()))
            if verdicts:
                sample_pass.append(all(verdicts))

    def ratio(hits, tots):
        return [float(h / n) if n else None for h, n in zip(hits, tots)]

    report = {
        "n_samples": len(samples),
        "answer_accuracy": {k: (float(np.mean(v)) if v else None) for k, v in correct.items()},
        "answer_accuracy_overall": float(np.mean(sum(correct.values(), []))) if len(samples) else None,
        "answer_count": {k: len(v) for k, v in correct.items()},
    }
    if model.head is not None:
        report.update({
            "aux_pixel_accuracy": ratio(pix_hit, pix_tot),
            "aux_region_accuracy": ratio(reg_hit, reg_tot),
            "aux_region_iou": [float(np.mean(v)) if v else None for v in ious],
            "heatmap_in_over_out": [float(np.mean(v)) if v else None for v in in_gt_out],
            "heatmap_sample_pass_rate": float(np.mean(sample_pass)) if sample_pass else None,
        })
        later = slice(1, T)
        # an all-background guess scores this pixel accuracy, so report it alongside
        report["aux_pixel_accuracy_later_frames"] = (
            float(pix_hit[later].sum() / pix_tot[later].sum()) if pix_tot[later].sum() else None)
        report["aux_background_rate_later_frames"] = (
            float(bg_tot[later].sum() / pix_tot[later].sum()) if pix_tot[later].sum() else None)
        report["aux_region_accuracy_later_frames"] = (
            float(reg_hit[later].sum() / reg_tot[later].sum()) if reg_tot[later].sum() else None)
        report["aux_region_iou_later_frames"] = (
            float(np.mean(sum(ious[1:], []))) if sum(ious[1:], []) else None)
    return report
