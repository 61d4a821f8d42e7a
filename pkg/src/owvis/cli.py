"""``owvis`` command line: split-build, synth-gen, train, eval, visualize, experiment."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as C
from . import evaluation as ev
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data_model import ClassRegistry, Dataset
from .experiment import evaluate_task, load_data, predict_for_task, run_experiment, task_registries
from .model import OWVISModel
from .protocol import (
    ExemplarStore,
    TrainLog,
    incremental_step,
    predict_dataset,
    select_exemplars,
    set_determinism,
    train_task,
)
from .splits import TaskSplit, build_split, reference_split_configs, split_stats, validate_split
from .synthdata import SynthConfig, generate

logger = logging.getLogger("owvis")

OUTPUT_ROOT_ENV = "OWVIS_OUTPUT_ROOT"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class Run:
    """Resolved config plus the run directory named by its fingerprint."""

    def __init__(self, args: argparse.Namespace):
        self.cfg = C.build_config(args.config, args.preset, args.set)
        self.fingerprint = C.fingerprint(self.cfg)
        root = args.output_root or self.cfg["output_dir"] or os.environ.get(OUTPUT_ROOT_ENV) or "runs"
        self.dir = Path(root) / self.fingerprint[:16]
        self.dir.mkdir(parents=True, exist_ok=True)
        manifest = {"fingerprint": self.fingerprint, "config": self.cfg}
        (self.dir / "config.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    def path(self, name: str) -> Path:
        return self.dir / name

    def data(self) -> tuple[Dataset, TaskSplit]:
        return load_data(self.cfg)

    def registries(self, split: TaskSplit) -> list[ClassRegistry]:
        return task_registries(split)

    def load_model(self, task: int, checkpoint: str | None = None) -> OWVISModel:
        path = Path(checkpoint) if checkpoint else self.path(f"task{task}.pt")
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run `owvis train --task {task}` first")
        model, _ = load_checkpoint(path, expected_fingerprint=self.fingerprint)
        return model


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_split_build(args, run: Run) -> None:
    if args.annotations:
        run.cfg["data"]["annotations"] = args.annotations
    out = Path(args.out) if args.out else run.dir
    out.mkdir(parents=True, exist_ok=True)
    ds, split = run.data()
    if args.reference:
        configs = [c for c in reference_split_configs(run.cfg["seed"]) if c.split_name.endswith(args.reference)]
        splits = [build_split(ds, c) for c in configs]
    else:
        splits = [split]
    for split in splits:
        report = validate_split(split, ds)
        if not report.ok:
            raise ValueError(f"split {split.split_name} is invalid: {report.violations}")
        split.save(out / f"{split.split_name}.json")
        stats = {"fingerprint": run.fingerprint, "rows": split_stats(split, ds), "suppressed": len(report.suppressed)}
        (out / f"{split.split_name}_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
        print(f"wrote {out / (split.split_name + '.json')}")


def cmd_synth_gen(args, run: Run) -> None:
    out = Path(args.out) if args.out else run.path("data")
    ds = generate(SynthConfig.from_dict(run.cfg["data"]["synth"]), out)
    print(f"wrote {len(ds.videos)} videos, {ds.num_instances()} instances to {out}")


def cmd_train(args, run: Run) -> None:
    cfg = run.cfg
    ds, split = run.data()
    reg1, reg2 = run.registries(split)
    schedule = C.schedule(cfg)
    loss_cfg = C.loss_config(cfg)
    log = TrainLog()
    if args.task == 1:
        set_determinism(cfg["seed"])
        model = OWVISModel(C.model_config(cfg), reg1)
        train_task(model, ds, split.task(1).train_videos, schedule, loss_cfg, log=log,
                   checkpoint_path=run.path("diverged_task1.pt"))
        store = select_exemplars(ds, split.task(1).train_videos, reg1, cfg["protocol"]["exemplars_per_class"],
                                 cfg["seed"], schedule.clip_length)
        doc = store.to_json() | {"fingerprint": run.fingerprint}
        run.path("exemplars.json").write_text(json.dumps(doc, sort_keys=True))
    else:
        model = run.load_model(1)
        set_determinism(cfg["seed"] + 1)
        replay = cfg["protocol"]["replay"]
        store = ExemplarStore.load(run.path("exemplars.json")) if replay else None
        incremental_step(model, reg2, ds, split.task(2).train_videos, store, schedule, loss_cfg,
                         finetune=replay, log=log, checkpoint_path=run.path("diverged_task2.pt"))
    for rec in log.records:
        rec["fingerprint"] = run.fingerprint
    log.write(run.path(f"metrics_task{args.task}.jsonl"))
    save_checkpoint(run.path(f"task{args.task}.pt"), model, run.fingerprint, {"task": args.task})
    print(f"task {args.task}: {len(log.records)} steps, final total {log.totals[-1]:.4f}")


def cmd_eval(args, run: Run) -> None:
    ds, split = run.data()
    regs = run.registries(split)
    if args.predictions:
        preds = ev.load_predictions(args.predictions, expected_fingerprint=run.fingerprint)
    else:
        model = run.load_model(args.task, args.checkpoint)
        if model.registry != regs[args.task - 1]:
            raise CheckpointError("checkpoint registry does not match the split for this task")
        preds = predict_for_task(run.cfg, model, ds, split, args.task)
        ev.save_predictions(preds, run.path(f"predictions_task{args.task}.json"), run.fingerprint)
    report = evaluate_task(run.cfg, args.task, preds, ds, split, run.fingerprint)
    report.save(run.path(f"report_task{args.task}.json"))
    run.path(f"report_task{args.task}.txt").write_text(report.table() + "\n")
    print(report.table())


def _heat(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to a black-red-yellow ramp, uint8 RGB."""
    v = np.clip(values, 0, 1)
    rgb = np.stack([np.clip(2 * v, 0, 1), np.clip(2 * v - 1, 0, 1), np.zeros_like(v)], axis=-1)
    return (rgb * 255).astype(np.uint8)


PALETTE = np.array([[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]])


@torch.no_grad()
def cmd_visualize(args, run: Run) -> None:
    from PIL import Image

    ds, split = run.data()
    model = run.load_model(args.task, args.checkpoint)
    vid = args.video_id if args.video_id is not None else split.task(args.task).known_test_videos[0]
    vid = type(next(iter(ds.videos)))(vid)
    out_dir = run.path(f"visualize_task{args.task}")
    out_dir.mkdir(exist_ok=True)
    model.eval()
    clip = ds.clip(vid, multiple=32)
    out = model(torch.as_tensor(clip.frames).to(next(model.parameters()).dtype))
    p = run.cfg["protocol"]
    preds = predict_dataset(model, ds, [vid], p["k"], p["tau"], p["activation"])
    frames = ds.frames(vid)
    top, left = clip.pad
    h, w = clip.orig_size
    for m in range(frames.shape[0]):
        rgb = (frames[m].transpose(1, 2, 0) * 255).astype(np.uint8)
        if out["o_map"] is not None:
            o = out["o_map"][m].float().numpy()
            heat = Image.fromarray(_heat(o)).resize(clip.size[::-1], Image.NEAREST)
            heat = np.asarray(heat)[top : top + h, left : left + w]
            Image.fromarray(np.concatenate([rgb, heat], axis=1)).save(out_dir / f"objectness_{vid}_{m:03d}.png")
        overlay = rgb.astype(np.float64)
        for i, pred in enumerate(preds):
            color = np.array([255, 255, 255]) if pred.category_id == 0 else PALETTE[pred.category_id % len(PALETTE)]
            mask = pred.masks[m]
            overlay[mask] = 0.5 * overlay[mask] + 0.5 * color
        Image.fromarray(overlay.astype(np.uint8)).save(out_dir / f"masks_{vid}_{m:03d}.png")
    print(f"wrote images for video {vid} to {out_dir}")


def cmd_experiment(args, run: Run) -> None:
    result = run_experiment(run.cfg, run.fingerprint, progress=print)
    result.save(run.path("experiment.json"))
    for name, ok in result.checks().items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"wrote {run.path('experiment.json')}")


# --------------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="owvis", description="Open-world video instance segmentation runs")
    parser.add_argument("--output-root", default=None, help=f"run root (default ${OUTPUT_ROOT_ENV} or ./runs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--preset", default="full", choices=sorted(C.PRESETS))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override")
        return p

    p = common(sub.add_parser("split-build", help="build task splits"))
    p.add_argument("--annotations", default=None, help="YouTube-VIS annotation file (default: synthetic data)")
    p.add_argument("--out", default=None, help="output directory (default: the run directory)")
    p.add_argument("--reference", choices=list("ABCDE"), default=None, help="build a reference split")
    p.set_defaults(func=cmd_split_build)

    p = common(sub.add_parser("synth-gen", help="write the synthetic dataset"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth_gen)

    p = common(sub.add_parser("train", help="train task 1 or the incremental task 2"))
    p.add_argument("--task", type=int, choices=(1, 2), default=1)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint or a prediction file"))
    p.add_argument("--task", type=int, choices=(1, 2), default=1)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--predictions", default=None, help="evaluate this prediction file instead")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("visualize", help="objectness heatmaps and mask overlays"))
    p.add_argument("--task", type=int, choices=(1, 2), default=1)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--video-id", default=None)
    p.set_defaults(func=cmd_visualize)

    p = common(sub.add_parser("experiment", help="Task 1, then Task 2 with and without replay, in one process"))
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        args.func(args, run)
    except (ValueError, KeyError, FileNotFoundError) as err:
        print(f"owvis {args.command}: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as err:  # noqa: BLE001 - surface any module failure as a runtime error
        print(f"owvis {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
