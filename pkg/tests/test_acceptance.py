"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary. The desk-scale
training run (criterion 7) and the ablation runs (criterion 8) take several
minutes each on one CPU core.
"""
import csv
import json
import time

import numpy as np
import pytest

from tokenmark.checkpoint import load_checkpoint, save_checkpoint
from tokenmark.cli import main
from tokenmark.config import RunConfig, paper_config, tiny_config
from tokenmark.gradcheck import GRAD_TOLERANCE, model_grad_check
from tokenmark.guide_head import DEFAULT_ALPHA, combine_loss
from tokenmark.model import OmniModel, eval_assignment, make_batch
from tokenmark.numerics import Tensor
from tokenmark.region import RegionPrompt, build_soft_labels, coverage_fractions
from tokenmark.synth import generate_samples
from tokenmark.token_mark import (TokenMarkBank, inject_text, MultimodalSequence, pool_and_project,
                                  sample_marks, spatial_mark)
from tokenmark.training import evaluate, train

HELD_OUT_SEED = 1000
HELD_OUT_COUNT = 300


# ------------------------------------------------------------------ oracles

def spatial_oracle(masks, marks, eps):
    n, h0, w0 = masks.shape
    out = np.zeros((marks.shape[1], h0, w0))
    for y in range(h0):
        for x in range(w0):
            num = np.zeros(marks.shape[1])
            den = eps
            for i in range(n):
                num += masks[i, y, x] * marks[i]
                den += masks[i, y, x]
            out[:, y, x] = num / den
    return out


def soft_label_oracle(masks, marks, n_marks, H, W):
    """Pixel counting per floor/ceil bin, then background and renormalisation by hand."""
    n, h0, w0 = masks.shape
    out = np.zeros((H, W, n_marks + 1))
    for i in range(H):
        r0, r1 = (i * h0) // H, -((-(i + 1) * h0) // H)
        for j in range(W):
            c0, c1 = (j * w0) // W, -((-(j + 1) * w0) // W)
            area = (r1 - r0) * (c1 - c0)
            raw = [masks[k, r0:r1, c0:c1].sum() / area for k in range(n)]
            total = sum(raw)
            if total > 1:
                for k in range(n):
                    out[i, j, marks[k]] = raw[k] / total
            else:
                for k in range(n):
                    out[i, j, marks[k]] = raw[k]
                out[i, j, n_marks] = 1 - total
    return out


# --------------------------------------------------------------- criteria

def test_criterion_1_spatial_mark_oracle(verdict):
    r = np.random.default_rng(1)
    worst, elapsed = 0.0, 0.0
    for _ in range(100):
        n = int(r.integers(1, 5))
        h0, w0 = (int(v) for v in r.integers(1, 17, size=2))
        c = int(r.integers(1, 9))
        bank = TokenMarkBank(int(r.integers(n, 12)), c, 4, r, init_std=1.0)
        masks = (r.random((n, h0, w0)) < r.random()).astype(np.uint8)
        prompts = [RegionPrompt(m) for m in masks]
        a = sample_marks(n, bank, r)
        start = time.perf_counter()
        dense = spatial_mark(prompts, a, bank, 1e-6).data
        elapsed += time.perf_counter() - start
        oracle = spatial_oracle(masks, bank.marks.data[list(a.indices)], 1e-6)
        worst = max(worst, float(np.abs(dense - oracle).max()))
    verdict("1 spatial mark oracle", worst < 1e-12 and elapsed < 1.0,
            f"max |diff| {worst:.2e} over 100 configs (< 1e-12), runtime {elapsed:.3f}s (< 1s)")


def test_criterion_2_soft_label_validity(verdict):
    r = np.random.default_rng(2)
    worst_sum, worst_oracle, disjoint_exact, n_disjoint = 0.0, 0.0, True, 0
    for trial in range(1000):
        n = int(r.integers(1, 5))
        h0, w0 = (int(v) for v in r.integers(2, 17, size=2))
        H, W = int(r.integers(1, min(h0, 4) + 1)), int(r.integers(1, min(w0, 4) + 1))
        n_marks = int(r.integers(n, 12))
        disjoint = trial % 2 == 0
        if disjoint:
            owner = r.integers(-1, n, size=(h0, w0))
            masks = np.stack([owner == k for k in range(n)]).astype(np.uint8)
        else:
            masks = (r.random((n, h0, w0)) < r.random()).astype(np.uint8)
        marks = r.choice(n_marks, size=n, replace=False).tolist()
        cov = coverage_fractions([RegionPrompt(m) for m in masks], (H, W))
        dist = build_soft_labels([cov], marks, n_marks).dist[0]
        worst_sum = max(worst_sum, float(np.abs(dist.sum(-1) - 1).max()))
        worst_oracle = max(worst_oracle, float(np.abs(dist - soft_label_oracle(masks, marks, n_marks, H, W)).max()))
        if disjoint:
            n_disjoint += 1
            for k, m in enumerate(marks):
                disjoint_exact &= bool(np.array_equal(dist[..., m], cov.fractions[..., k]))
    ok = worst_sum <= 1e-9 and worst_oracle <= 1e-12 and disjoint_exact
    verdict("2 soft-label validity", ok,
            f"max |sum-1| {worst_sum:.1e}, max |diff| vs pixel-count oracle {worst_oracle:.1e}, "
            f"{n_disjoint} disjoint sets reproduced exactly: {disjoint_exact}")


def test_criterion_3_zero_prompt_identity(verdict):
    mismatches = []
    for seed in range(20):
        cfg = RunConfig(seed=seed)
        samples = generate_samples(2, seed, cfg.synth_config())
        batch = make_batch(samples, [eval_assignment(s, cfg.n_marks, seed, i) for i, s in enumerate(samples)], cfg)
        batch.prompts = [[], []]
        batch.assignments = [None, None]
        batch.placeholders = [[], []]
        a = OmniModel(cfg).forward(batch)
        b = OmniModel(cfg, with_marks=False).forward(batch)
        same = (a.hidden.data.tobytes() == b.hidden.data.tobytes()
                and a.logits.data.tobytes() == b.logits.data.tobytes()
                and a.aux_logits.data.tobytes() == b.aux_logits.data.tobytes())
        if not same:
            mismatches.append(seed)
    verdict("3 zero-prompt identity", not mismatches,
            f"bitwise identical to the mark-free build on {20 - len(mismatches)}/20 seeds")


def test_criterion_4_full_path_grad_check(verdict):
    start = time.perf_counter()
    report = model_grad_check(tiny_config(), h=1e-5)
    elapsed = time.perf_counter() - start
    worst_name = max(report, key=report.get)
    groups = {name.split(".")[0] for name in report}
    ok = report[worst_name] < GRAD_TOLERANCE and elapsed < 120 and groups == {"encoder", "bank", "lm", "head"}
    verdict("4 full-path gradient check", ok,
            f"{len(report)} tensors, worst {worst_name} {report[worst_name]:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)")


def test_criterion_5_loss_arithmetic(verdict):
    r = np.random.default_rng(5)
    exact = all(combine_loss(float(l), float(a), 0.05).total == float(l) + 0.05 * float(a)
                for l, a in r.random((200, 2)) * 10)
    cfg = tiny_config()
    batch_samples = generate_samples(2, 0, cfg.synth_config())
    batch = make_batch(batch_samples, [eval_assignment(s, cfg.n_marks, 0, i) for i, s in enumerate(batch_samples)],
                       cfg)
    total, report, _ = OmniModel(cfg).loss(batch, alpha=DEFAULT_ALPHA)
    exact &= total.item() == report.llm_loss + 0.05 * report.aux_loss

    cfg0 = tiny_config(alpha=0.0, steps=20)
    samples = generate_samples(16, 3, cfg0.synth_config())
    a = train(cfg0, samples, model=OmniModel(cfg0))
    b = train(cfg0, samples, model=OmniModel(cfg0, with_head=False))
    same_log = [r.total for _, r in a.history] == [r.llm_loss for _, r in b.history]
    head_free = b.model.parameters()
    same_params = all(p.data.tobytes() == head_free[k].data.tobytes()
                      for k, p in a.model.parameters().items() if not k.startswith("head."))
    verdict("5 loss arithmetic", exact and same_log and same_params,
            f"total == llm + 0.05*aux exactly: {exact}; alpha=0 run bitwise equal to head-free build over "
            f"20 steps: losses {same_log}, weights {same_params}")


def test_criterion_6_paper_scale_shapes(verdict):
    start = time.perf_counter()
    cfg = paper_config()
    model = OmniModel(cfg)
    samples = generate_samples(1, 0, cfg.synth_config())
    a = eval_assignment(samples[0], cfg.n_marks, 0, 0)
    batch = make_batch(samples, [a], cfg)
    prompts = batch.prompts[0]
    V = model.encoder.encode_frames(batch.videos[0])
    dense = spatial_mark(prompts, a, model.bank, cfg.mark_eps)
    s_hat = pool_and_project(dense, model.bank, cfg.token_grid)
    text = MultimodalSequence(Tensor(np.zeros((cfg.text_len, cfg.d_model))), ["text"] * cfg.text_len)
    marked = inject_text(text, batch.placeholders[0], a, model.bank)
    out = model.forward(batch)
    elapsed = time.perf_counter() - start
    D = cfg.d_model
    shapes = {
        "bank F": (model.bank.marks.shape, (100, 256)),
        "projection": (model.bank.projection.weight.shape, (D, 256)),
        "visual tokens V": (V.shape, (4, D, 24, 24)),
        "spatial mark S": (dense.shape, (256, 336, 336)),
        "projected mark": (s_hat.shape, (D, 24, 24)),
        "text mark row": (marked.embeddings[batch.placeholders[0][0]].shape, (D,)),
        "aux logits": (out.aux_logits.shape[1:], (4, 24, 24, 101)),
    }
    bad = {k: v for k, v in shapes.items() if tuple(v[0]) != v[1]}
    verdict("6 paper-scale shapes", not bad and elapsed < 60,
            f"{len(shapes) - len(bad)}/{len(shapes)} shapes match (aux {tuple(out.aux_logits.shape[1:])}), "
            f"{elapsed:.1f}s (< 60s)")


# --------------------------------------------------------- training runs

@pytest.fixture(scope="module")
def desk_run():
    cfg = RunConfig()
    samples = generate_samples(cfg.n_samples, cfg.seed, cfg.synth_config())
    start = time.perf_counter()
    state = train(cfg, samples)
    elapsed = time.perf_counter() - start
    held_out = generate_samples(HELD_OUT_COUNT, HELD_OUT_SEED, cfg.synth_config())
    return state, elapsed, held_out, evaluate(state.model, held_out)


def test_criterion_7a_attribute_accuracy(desk_run, verdict):
    _, elapsed, _, report = desk_run
    acc = report["answer_accuracy"]["attribute"]
    verdict("7a held-out attribute accuracy", acc >= 0.90 and elapsed <= 900,
            f"{acc:.3f} on {report['answer_count']['attribute']} questions (>= 0.90); "
            f"training {elapsed:.0f}s (<= 900s); motion {report['answer_accuracy']['motion']:.3f}, "
            f"relation {report['answer_accuracy']['relation']:.3f}")


def test_criterion_7b_later_frame_argmax(desk_run, verdict):
    report = desk_run[3]
    acc = report["aux_pixel_accuracy_later_frames"]
    verdict("7b guide-head argmax on frames 2..4", acc >= 0.80,
            f"pixel argmax accuracy {acc:.3f} (>= 0.80); all-background guess "
            f"{report['aux_background_rate_later_frames']:.3f}; in-region only "
            f"{report['aux_region_accuracy_later_frames']:.3f}")


def test_criterion_7c_heatmap_concentration(desk_run, verdict):
    rate = desk_run[3]["heatmap_sample_pass_rate"]
    verdict("7c heatmap in-region > out-of-region", rate >= 0.95,
            f"{rate:.3f} of held-out samples (>= 0.95)")


ABLATION_STEPS = 1600
ABLATION_SAMPLES = 600


def test_criterion_8_ablation_direction(verdict):
    results = []
    for seed in (11, 12, 13):
        base = RunConfig(seed=seed, steps=ABLATION_STEPS, n_samples=ABLATION_SAMPLES)
        samples = generate_samples(base.n_samples, seed, base.synth_config())
        held_out = generate_samples(100, HELD_OUT_SEED + seed, base.synth_config())
        ious = []
        for alpha in (0.0, 0.05):
            cfg = base.with_overrides(alpha=alpha)
            state = train(cfg, samples)
            ious.append(evaluate(state.model, held_out)["aux_region_iou_later_frames"])
        results.append((seed, *ious))
    ok = all(off < on for _, off, on in results)
    verdict("8 ablation direction", ok,
            "; ".join(f"seed {s}: IoU alpha=0 {off:.3f} < alpha=0.05 {on:.3f}" for s, off, on in results))


def test_criterion_9_determinism_and_persistence(desk_run, tmp_path, verdict):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_config(n_samples=16, steps=12, checkpoint_every=5).to_dict()))
    data = tmp_path / "data.bin"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(data)]) == 0
    logs = []
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(tmp_path / name)]) == 0
        logs.append((tmp_path / name / "metrics.csv").read_bytes())
    rows = len(list(csv.reader(logs[0].decode().splitlines()))) - 1

    state, _, held_out, report = desk_run
    path = tmp_path / "desk.omtm"
    save_checkpoint(path, state.model, state.step)
    loaded, step = load_checkpoint(path)
    same_eval = evaluate(loaded, held_out) == report and step == state.step
    verdict("9 determinism and persistence", logs[0] == logs[1] and same_eval,
            f"metrics logs byte-identical over {rows} steps: {logs[0] == logs[1]}; "
            f"desk checkpoint save->load->eval identical: {same_eval}")
