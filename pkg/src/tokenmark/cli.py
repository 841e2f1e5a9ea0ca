"""Command-line entry point: ``tokenmark {gen-data,train,eval,heatmap,grad-check}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Set ``TOKENMARK_LOG`` (e.g. ``DEBUG``) to change log verbosity.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, tiny_config
from .errors import CapacityError, DimensionError, ParseError, ValidationError
from .guide_head import heatmap
from .model import OmniModel, eval_assignment, make_batch
from .synth import Dataset, generate_samples, read_dataset, write_dataset
from .gradcheck import GRAD_TOLERANCE, model_grad_check
from .training import NonFiniteLoss, evaluate, train

log = logging.getLogger("tokenmark")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

METRICS_HEADER = ("step", "llm_loss", "aux_loss", "total")
REPORT_KEYS = ("n_samples", "answer_accuracy", "answer_accuracy_overall", "answer_count",
               "aux_pixel_accuracy", "aux_region_accuracy", "aux_region_iou", "heatmap_in_over_out",
               "heatmap_sample_pass_rate", "aux_region_accuracy_later_frames", "aux_region_iou_later_frames",
               "aux_pixel_accuracy_later_frames", "aux_background_rate_later_frames")


def _write_config(directory: Path, config: RunConfig, name: str = "config.json") -> None:
    (directory / name).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def check_dataset(dataset: Dataset, config: RunConfig) -> None:
    S = config.frame_size
    for i, s in enumerate(dataset.samples):
        if s.scene.frames.shape != (config.n_frames, 3, S, S):
            raise ValidationError(f"sample {i} frames {s.scene.frames.shape} do not match the config")
        if len(s.regions) > config.n_marks:
            raise CapacityError(f"sample {i} has more regions than marks")
        if max(s.instruction + s.answer, default=0) >= config.vocab_size:
            raise ValidationError(f"sample {i} uses tokens outside the vocabulary")


# ---------------------------------------------------------------- commands

def cmd_gen_data(config: RunConfig, out_path) -> Path:
    out_path = Path(out_path)
    samples = generate_samples(config.n_samples, config.seed, config.synth_config())
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, out_path, config.synth_config())
    _write_config(out_path.parent, config, out_path.name + ".config.json")
    log.info("wrote %d samples to %s", len(samples), out_path)
    return out_path


def format_metrics_row(step: int, report) -> list[str]:
    return [str(step), repr(report.llm_loss), repr(report.aux_loss), repr(report.total)]


def cmd_train(config: RunConfig, dataset_path, out_dir) -> Path:
    dataset = read_dataset(dataset_path)
    check_dataset(dataset, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_config(out_dir, config)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)

        def on_step(step, report):
            writer.writerow(format_metrics_row(step, report))
            if step % 100 == 0:
                log.info("step %d llm %.4f aux %.4f", step, report.llm_loss, report.aux_loss)

        def on_checkpoint(state):
            save_checkpoint(out_dir / f"checkpoint_{state.step:06d}.omtm", state.model, state.step)

        try:
            state = train(config, dataset.samples, on_step=on_step, on_checkpoint=on_checkpoint)
        except NonFiniteLoss as exc:
            (out_dir / "nan_dump.json").write_text(json.dumps(exc.dump(), indent=2) + "\n")
            raise
    final = out_dir / f"checkpoint_{state.step:06d}.omtm"
    if state.step % config.checkpoint_every:  # otherwise already written by on_checkpoint
        save_checkpoint(final, state.model, state.step)
    return final


def cmd_eval(checkpoint, dataset_path, out_dir=None, seed: int | None = None) -> dict:
    model, step = load_checkpoint(checkpoint)
    dataset = read_dataset(dataset_path)
    check_dataset(dataset, model.config)
    report = evaluate(model, dataset.samples, seed=seed)
    report["checkpoint_step"] = step
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_config(out_dir, model.config)
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def heatmap_grids(model: OmniModel, sample, index: int, region: int, seed: int | None = None) -> np.ndarray:
    """Guide-head probability of the mark assigned to ``region``, shape (T, H, W)."""
    if model.head is None:
        raise ValidationError("model has no guide head")
    if not 0 <= region < len(sample.regions):
        raise ValidationError(f"sample {index} has no region {region}")
    seed = model.config.seed if seed is None else seed
    assignment = eval_assignment(sample, model.config.n_marks, seed, index)
    out = model.forward(make_batch([sample], [assignment], model.config))
    return heatmap(out.aux_logits.data[0], assignment.indices[region])


def write_pgm(path, grid: np.ndarray) -> None:
    pixels = np.clip(np.round(255.0 * grid), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ParseError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def cmd_heatmap(checkpoint, dataset_path, sample_index: int, region: int, out_dir, seed=None) -> list[Path]:
    model, _ = load_checkpoint(checkpoint)
    dataset = read_dataset(dataset_path)
    check_dataset(dataset, model.config)
    if not 0 <= sample_index < len(dataset):
        raise ValidationError(f"sample {sample_index} not in dataset of {len(dataset)}")
    grids = heatmap_grids(model, dataset[sample_index], sample_index, region, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_config(out_dir, model.config)
    written = []
    for t, grid in enumerate(grids):
        csv_path = out_dir / f"frame_{t}.csv"
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows([[repr(float(v)) for v in row] for row in grid])
        write_pgm(out_dir / f"frame_{t}.pgm", grid)
        written += [csv_path, out_dir / f"frame_{t}.pgm"]
    return written


def cmd_grad_check(config: RunConfig) -> dict[str, float]:
    report = model_grad_check(config)
    for name, err in report.items():
        print(f"{name:40s} {err:.3e} {'ok' if err < GRAD_TOLERANCE else 'FAIL'}")
    return report


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenmark", description="Region-prompted video QA with token marks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", type=Path, help="JSON config; missing keys take defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=True, help=out_help)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p, "dataset file to write")
    p.add_argument("--count", type=int, help="number of samples (overrides n_samples)")

    p = sub.add_parser("train", help="train a model")
    common(p, "run directory")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seed", type=int, help="seed for evaluation mark draws")
    p.add_argument("--out", type=Path, help="directory for report.json (printed if omitted)")

    p = sub.add_parser("heatmap", help="export guide-head heatmaps for one region")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--region", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter group")
    p.add_argument("--config", type=Path, help="JSON config (defaults to the tiny check config)")
    p.add_argument("--seed", type=int)
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == "gen-data":
        config = load_config(args.config, seed=args.seed, n_samples=args.count)
        cmd_gen_data(config, args.out)
    elif args.command == "train":
        config = load_config(args.config, seed=args.seed)
        cmd_train(config, args.data, args.out)
    elif args.command == "eval":
        report = cmd_eval(args.checkpoint, args.data, args.out, args.seed)
        if args.out is None:
            print(json.dumps(report, indent=2, sort_keys=True))
    elif args.command == "heatmap":
        cmd_heatmap(args.checkpoint, args.data, args.sample, args.region, args.out, args.seed)
    elif args.command == "grad-check":
        config = load_config(args.config, seed=args.seed) if args.config else tiny_config(
            **({"seed": args.seed} if args.seed is not None else {}))
        report = cmd_grad_check(config)
        return EXIT_OK if max(report.values()) < GRAD_TOLERANCE else EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TOKENMARK_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (ValidationError, ParseError, DimensionError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
