"""The assembled region-aware video language model and its batching."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import PromptTemplate, ToyLM, VisionEncoder, llm_loss
from .config import RunConfig
from .errors import ValidationError
from .guide_head import GuideHead, LossReport, aux_forward, aux_loss, combine_loss
from .numerics import Tensor
from .region import RegionPrompt, build_soft_labels, coverage_fractions
from .synth import QASample
from .token_mark import (MarkAssignment, MultimodalSequence, TokenMarkBank, assemble_video_sequence,
                         inject_text, sample_marks)


@dataclass
class Batch:
    videos: np.ndarray  # (B, T, 3, H0, W0) float in [0, 1]
    prompts: list[list[RegionPrompt]]
    assignments: list[MarkAssignment | None]
    text_ids: np.ndarray  # (B, text_len)
    targets: np.ndarray  # (B, text_len)
    loss_mask: np.ndarray  # (B, text_len)
    placeholders: list[list[int]]  # text positions, one per region
    soft_labels: np.ndarray  # (B, T, H, W, n_marks + 1)
    answer_slices: list[slice]  # logit positions that predict the answer tokens

    def __len__(self):
        return self.videos.shape[0]


def make_batch(samples: Sequence[QASample], assignments: Sequence[MarkAssignment],
               config: RunConfig) -> Batch:
    grid = config.token_grid
    videos, prompts, ids, tgts, masks, holders, labels, answers = [], [], [], [], [], [], [], []
    for sample, assignment in zip(samples, assignments):
        if len(assignment) != len(sample.regions):
            raise ValidationError("one mark per region is required")
        template = PromptTemplate(tuple(sample.instruction), tuple(sample.answer))
        i, t, m = template.build(config.text_len)
        videos.append(sample.scene.frames.astype(np.float64) / 255.0)
        prompts.append(sample.region_prompts)
        ids.append(i)
        tgts.append(t)
        masks.append(m)
        holders.append(template.placeholder_positions())
        start = len(sample.instruction)
        answers.append(slice(start, start + len(sample.answer)))
        frame_grid = sample.scene.frames.shape[-2:]
        coverage = [
            coverage_fractions([RegionPrompt.from_mask(sample.masklet(r)[f], f) for r in range(len(sample.regions))],
                               grid, frame_grid)
            for f in range(sample.scene.n_frames)
        ]
        labels.append(build_soft_labels(coverage, list(assignment.indices), config.n_marks).dist)
    return Batch(np.stack(videos), prompts, list(assignments), np.stack(ids), np.stack(tgts),
                 np.stack(masks), holders, np.stack(labels), answers)


def eval_assignment(sample: QASample, n_marks: int, seed: int, index: int) -> MarkAssignment:
    """Deterministic marks for evaluation sample ``index``."""
    ss = np.random.SeedSequence([seed, index, 0x6D61726B])
    return sample_marks(len(sample.regions), n_marks, np.random.default_rng(ss))


@dataclass
class ForwardOutput:
    hidden: Tensor  # (B, L, D)
    logits: Tensor  # (B, text_len, vocab)
    aux_logits: Tensor | None  # (B, T, H, W, n_marks + 1)


class OmniModel:
    """Encoder + token marks + causal LM + guide head.

    ``with_marks=False`` disconnects the token-mark path and ``with_head=False``
    drops the guide head; each component draws its initial weights from its
    own seed stream, so removing one leaves the others' weights unchanged.
    """

    def __init__(self, config: RunConfig, with_marks: bool = True, with_head: bool = True):
        self.config = config
        enc_ss, mark_ss, lm_ss, head_ss = np.random.SeedSequence(config.seed).spawn(4)
        self.encoder = VisionEncoder(config.patch_size, config.d_model, config.token_grid,
                                     np.random.default_rng(enc_ss))
        self.bank = (TokenMarkBank(config.n_marks, config.mark_dim, config.d_model, np.random.default_rng(mark_ss),
                                   init_std=config.mark_init_std, trainable=not config.fixed_marks)
                     if with_marks else None)
        self.lm = ToyLM(config.vocab_size, config.d_model, config.n_layers, config.n_heads, config.max_seq_len,
                        np.random.default_rng(lm_ss), mlp_ratio=config.mlp_ratio, init_std=config.init_std)
        self.head = GuideHead(config.d_model, config.n_marks, np.random.default_rng(head_ss)) if with_head else None

    def parameters(self) -> dict[str, Tensor]:
        """All tensors that make up the model, trainable or not, by checkpoint name."""
        params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        if self.bank is not None:
            params.update({f"bank.{k}": v for k, v in self.bank.parameters().items()})
        params.update({f"lm.{k}": v for k, v in self.lm.parameters().items()})
        if self.head is not None:
            params.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return params

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def sequence(self, frames: Tensor, prompts: list[RegionPrompt], assignment: MarkAssignment | None,
                 text_ids: np.ndarray, placeholders: list[int]) -> MultimodalSequence:
        """One sample's multimodal input. ``frames`` is (T, D, H, W)."""
        if prompts and self.bank is None:
            raise ValidationError("region prompts need the token-mark module")
        text = MultimodalSequence(self.lm.embed_tokens(text_ids), ["text"] * len(text_ids))
        if prompts:
            text = inject_text(text, placeholders, assignment, self.bank)
        elif placeholders:
            raise ValidationError("placeholders present but no region prompts")
        frame_list = [frames[t] for t in range(frames.shape[0])]
        return assemble_video_sequence(frame_list, prompts, assignment, self.bank, text,
                                       self.config.token_grid, self.config.mark_eps)

    def forward(self, batch: Batch) -> ForwardOutput:
        V = self.encoder.encode_frames(batch.videos)  # (B, T, D, H, W)
        seqs = [self.sequence(V[b], batch.prompts[b], batch.assignments[b], batch.text_ids[b],
                              batch.placeholders[b]).embeddings for b in range(len(batch))]
        x = nx.stack(seqs)
        n_vis = self.config.n_visual_tokens
        hidden, logits = self.lm.forward(x, logits_from=n_vis)
        aux = None
        if self.head is not None:
            H, W = self.config.token_grid
            visual = nx.getitem(hidden, (slice(None), slice(0, n_vis), slice(None)))
            aux = aux_forward(visual, self.head, (self.config.n_frames, H, W))
        return ForwardOutput(hidden, logits, aux)

    def loss(self, batch: Batch, alpha: float | None = None) -> tuple[Tensor, LossReport, ForwardOutput]:
        alpha = self.config.alpha if alpha is None else alpha
        out = self.forward(batch)
        lm = llm_loss(out.logits, batch.targets, batch.loss_mask)
        if out.aux_logits is None:
            total, report = combine_loss(lm, 0.0, 0.0)
            return total, LossReport(report.llm_loss, float("nan"), 0.0, report.total), out
        aux = aux_loss(out.aux_logits, batch.soft_labels)
        total, report = combine_loss(lm, aux, alpha)
        return total, report, out
