"""Command line entry point: ``densedino train|eval|attention|ablate|dump``.

Exit codes: 0 success, 2 bad config or arguments, 3 unsatisfiable view
geometry, 4 training divergence, 5 checkpoint load failure or version mismatch.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_trainer, save_trainer
from .config import ConfigError, RunConfig, load_config
from .distill import DivergenceError, SceneSource, StepReport, TrainConfig, Trainer
from .evaluate import (
    EvalConfig,
    attention_maps,
    evaluate_encoder,
    knn_accuracy,
    render_full,
    segmentation_miou,
)
from .geometry import GeometryError
from .scenes import (
    SHAPES,
    Scene,
    dump_split,
    generate_scene,
    load_split,
    scene_seed,
    split_scenes,
    write_pgm,
    write_ppm,
)

log = logging.getLogger("densedino")

EXIT_CONFIG = 2
EXIT_GEOMETRY = 3
EXIT_DIVERGENCE = 4
EXIT_CHECKPOINT = 5

METRICS_HEADER = [
    "step",
    "epoch",
    "loss_cls",
    "loss_ref",
    "loss_total",
    "teacher_entropy",
    "lr",
    "ema_momentum",
    "wallclock_s",
]
FINAL_CHECKPOINT = "checkpoint.ddino"
SEED_ENV = "DENSEDINO_SEED"


def _apply_seed_env(cfg: RunConfig) -> RunConfig:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))


def metrics_row(rep: StepReport, wallclock: float) -> list[str]:
    return [
        str(rep.step),
        str(rep.epoch),
        repr(rep.loss_cls),
        repr(rep.loss_ref),
        repr(rep.total),
        repr(rep.teacher_entropy),
        repr(rep.lr),
        repr(rep.ema_momentum),
        f"{wallclock:.3f}",
    ]


def run_training(trainer: Trainer, out_dir: Path, append: bool = False) -> Path:
    """Train to the end of the schedule, logging metrics.csv and checkpoints into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    every = trainer.config.checkpoint_every
    start = time.perf_counter()
    append = append and metrics_path.exists()
    with open(metrics_path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(METRICS_HEADER)

        def on_step(rep: StepReport) -> None:
            writer.writerow(metrics_row(rep, time.perf_counter() - start))
            if rep.step % 100 == 0:
                fh.flush()
                log.info(
                    "step %d loss %.4f (cls %.4f, ref %.4f) entropy %.3f",
                    rep.step, rep.total, rep.loss_cls, rep.loss_ref, rep.teacher_entropy,
                )
            if every and trainer.step_count % every == 0:
                save_trainer(trainer, out_dir / f"ckpt-{trainer.step_count:06d}.ddino")

        trainer.run(callback=on_step)
    final = out_dir / FINAL_CHECKPOINT
    save_trainer(trainer, final)
    return final


def eval_scenes(trainer: Trainer, ecfg: EvalConfig, data_dir: str | None) -> tuple[list[Scene], list[Scene]]:
    if data_dir:
        root = Path(data_dir)
        try:
            return load_split(root / "train"), load_split(root / "test")
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read dataset {data_dir}: {exc}") from None
    tc = trainer.config
    source = SceneSource(dataclasses.replace(tc, n_train_scenes=max(tc.n_train_scenes, ecfg.n_bank)))
    bank = [source[i] for i in range(ecfg.n_bank)]
    test = split_scenes(tc.data_seed, "test", ecfg.n_test, tc.scene_config())
    return bank, test


def _pick(trainer: Trainer, which: str):
    return trainer.teacher if which == "teacher" else trainer.student


def write_report(path: Path, rows: list[tuple[str, object]]) -> None:
    lines = ["key\tvalue"] + [f"{k}\t{v}" for k, v in rows]
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    cfg = _apply_seed_env(load_config(args.config))
    out = Path(args.out)
    if args.resume:
        trainer = load_trainer(args.resume)
    else:
        trainer = Trainer(cfg.encoder, cfg.train)
    final = run_training(trainer, out, append=bool(args.resume))
    print(final)
    return 0


def cmd_eval(args) -> int:
    trainer = load_trainer(args.checkpoint)
    ecfg = load_config(args.config).eval if args.config else EvalConfig()
    bank, test = eval_scenes(trainer, ecfg, args.data)
    model = _pick(trainer, args.which)
    rows: list[tuple[str, object]] = [("task", args.task), ("n_bank", len(bank)), ("n_test", len(test))]
    if args.task == "knn":
        rows.append(("knn_acc", repr(knn_accuracy(model, bank, test, ecfg))))
    else:
        rep = segmentation_miou(model, bank, test, len(SHAPES) + 1, ecfg)
        for c in range(len(SHAPES) + 1):
            if c in rep.iou:
                rows.append((f"iou_{c}", repr(rep.iou[c])))
        rows.append(("miou", repr(rep.miou)))
        rows.append(("pixel_acc", repr(rep.pixel_acc)))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.tsv", rows)
    print(out / "report.tsv")
    return 0


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes mid-gray 128."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 1e-12:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255).astype(np.uint8)


def cmd_attention(args) -> int:
    trainer = load_trainer(args.checkpoint)
    res, p = trainer.encoder_config.image_res, trainer.encoder_config.patch_size
    if args.data:
        try:
            scenes = load_split(Path(args.data) / "test")
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read dataset {args.data}: {exc}") from None
        if not 0 <= args.image_id < len(scenes):
            raise ConfigError(f"image id {args.image_id} out of range for {len(scenes)} scenes")
        scene = scenes[args.image_id]
    else:
        scene = held_out_scene(trainer.config, args.image_id)
    imgs, _ = render_full([scene], res)
    maps = attention_maps(_pick(trainer, args.which), imgs[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "image.ppm", imgs[0])
    for h, m in enumerate(maps):
        write_pgm(out / f"head{h}.pgm", np.repeat(np.repeat(normalize_map(m), p, 0), p, 1))
    print(out)
    return 0


def held_out_scene(config: TrainConfig, index: int) -> Scene:
    if index < 0:
        raise ConfigError(f"image id must be non-negative, got {index}")
    return generate_scene(np.random.default_rng(scene_seed(config.data_seed, "test", index)), config.scene_config())


AXIS_FIELDS = {"alpha": "alpha", "num_points": "num_points", "views": "views"}


def cmd_ablate(args) -> int:
    cfg = _apply_seed_env(load_config(args.config))
    values = getattr(cfg.ablate, args.axis)
    if not values:
        raise ConfigError(f"[ablate] {args.axis} lists no values")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["value\tknn_acc\tmiou"]
    for value in values:
        try:
            tcfg = dataclasses.replace(cfg.train, **{AXIS_FIELDS[args.axis]: value})
        except ValueError as exc:
            raise ConfigError(f"[ablate] {args.axis}={value}: {exc}") from None
        trainer = Trainer(cfg.encoder, tcfg)
        run_training(trainer, out / f"{args.axis}={value}")
        bank, test = eval_scenes(trainer, cfg.eval, None)
        rep = evaluate_encoder(trainer.teacher, bank, test, len(SHAPES) + 1, cfg.eval)
        rows.append(f"{value}\t{rep.knn_acc!r}\t{rep.miou!r}")
        (out / "summary.tsv").write_text("\n".join(rows) + "\n")
    (out / "summary.tsv").write_text("\n".join(rows) + "\n")
    print(out / "summary.tsv")
    return 0


def cmd_dump(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    tc = cfg.train
    for split, n in (("train", args.n_train), ("test", args.n_test)):
        seeds = [scene_seed(tc.data_seed, split, i) for i in range(n)]
        dump_split(args.out, split, seeds, tc.scene_config())
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="densedino", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run self-distillation training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="frozen-feature evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("knn", "seg"), required=True)
    p.add_argument("--config", help="config whose [eval] section sets the protocol")
    p.add_argument("--data", help="dataset dump with train/ and test/ splits")
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p.add_argument("--which", choices=("teacher", "student"), default="teacher")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention", help="export last-block class-token attention per head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset dump; the image comes from its test/ split")
    p.add_argument("--which", choices=("teacher", "student"), default="teacher")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("ablate", help="train and evaluate one run per value of an axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", choices=tuple(AXIS_FIELDS), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump", help="write synthetic train/test splits as PPM/PGM + index.tsv")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.set_defaults(func=cmd_dump)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GeometryError as exc:
        print(f"geometry error: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
