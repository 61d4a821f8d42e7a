"""Two-task open-world experiment: train Task 1, evaluate Known and Unknown,
then run the incremental step with and without exemplar replay from the same
Task-1 weights."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import config as C
from . import evaluation as ev
from .data_model import ClassRegistry, Dataset
from .model import OWVISModel
from .protocol import TrainLog, incremental_step, predict_dataset, select_exemplars, set_determinism, train_task
from .splits import SplitConfig, TaskSplit, build_split
from .synthdata import SynthConfig, generate

logger = logging.getLogger(__name__)


def task_registries(split: TaskSplit) -> list[ClassRegistry]:
    """Registry after Task 1 and after Task 2 of a two-task split."""
    r1 = ClassRegistry(tuple(split.task(1).known_category_ids))
    return [r1, r1.extend(split.new_category_ids(2))]


def evaluation_videos(split: TaskSplit, task: int) -> tuple[list, list]:
    """(known test videos of tasks 1..task, unknown test videos of ``task``)."""
    known = list(dict.fromkeys(v for t in range(1, task + 1) for v in split.task(t).known_test_videos))
    unknown = list(split.task(task).unknown_test_videos) if task < len(split.tasks) else []
    return known, unknown


def evaluate_task(
    cfg: dict, task: int, preds: Sequence, dataset: Dataset, split: TaskSplit, fingerprint: str = ""
) -> ev.EvalReport:
    """Report for ``task``; on non-final tasks the random-proposal baseline on
    the same unknown videos goes to ``extras``."""
    regs = task_registries(split)
    reg = regs[task - 1]
    econf = ev.EvalConfig(max_dets_ap=cfg["eval"]["max_dets_ap"])
    known_videos, unknown_videos = evaluation_videos(split, task)
    known = ev.evaluate_known(preds, ev.known_ground_truth(dataset, known_videos, reg), reg, econf)
    unknown, extras = None, {}
    if unknown_videos:
        u_gt = ev.unknown_ground_truth(dataset, unknown_videos, reg)
        vids = set(unknown_videos)
        unknown = ev.evaluate_unknown([p for p in preds if p.video_id in vids], u_gt, econf)
        rand = ev.random_proposals(dataset, unknown_videos, cfg["eval"]["random_baseline_per_video"], cfg["seed"])
        extras["random_proposals_unknown"] = ev.evaluate_unknown(rand, u_gt, econf).summary()
    report = ev.build_report(task, known, unknown, regs, fingerprint)
    report.extras.update(extras)
    return report


def predict_for_task(cfg: dict, model: OWVISModel, dataset: Dataset, split: TaskSplit, task: int) -> list:
    known, unknown = evaluation_videos(split, task)
    p = cfg["protocol"]
    return predict_dataset(model, dataset, list(dict.fromkeys(known + unknown)), p["k"], p["tau"], p["activation"])


def load_data(cfg: dict) -> tuple[Dataset, TaskSplit]:
    data = cfg["data"]
    if data["annotations"]:
        from .data_model import load_annotations

        dataset = load_annotations(data["annotations"], data["frames_root"])
    else:
        dataset = generate(SynthConfig.from_dict(data["synth"]))
    if cfg["split_file"]:
        return dataset, TaskSplit.load(cfg["split_file"])
    return dataset, build_split(dataset, SplitConfig.from_dict({**cfg["split"], "seed": cfg["seed"]}))


@dataclass
class ExperimentResult:
    known_ap50: float
    unknown_ar1: float
    random_unknown_ar1: float
    prev_known_ap50_replay: float
    prev_known_ap50_no_replay: float
    seconds: dict[str, float] = field(default_factory=dict)
    reports: dict[str, dict] = field(default_factory=dict)
    fingerprint: str = ""

    @property
    def retention_replay(self) -> float:
        return self.prev_known_ap50_replay / self.known_ap50 if self.known_ap50 > 0 else 0.0

    @property
    def retention_no_replay(self) -> float:
        return self.prev_known_ap50_no_replay / self.known_ap50 if self.known_ap50 > 0 else 0.0

    def checks(self) -> dict[str, bool]:
        return {
            "known_ap50>=0.5": self.known_ap50 >= 0.5,
            "unknown_ar1>random": self.unknown_ar1 > self.random_unknown_ar1,
            "replay_retention>=0.5": self.retention_replay >= 0.5,
            "no_replay<replay": self.retention_no_replay < self.retention_replay,
        }

    def to_json(self) -> dict:
        return asdict(self) | {
            "retention_replay": self.retention_replay,
            "retention_no_replay": self.retention_no_replay,
            "checks": self.checks(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def run_experiment(cfg: dict, fingerprint: str = "", progress: Callable[[str], None] | None = None) -> ExperimentResult:
    """Task 1, then Task 2 with replay and without, both from the same
    Task-1 weights. Retention compares Previously-Known AP50 after Task 2
    with the Task-1 Known AP50."""
    say = progress or logger.info
    timings = {}
    dataset, split = load_data(cfg)
    reg1, reg2 = task_registries(split)
    schedule = C.schedule(cfg)
    loss_cfg = C.loss_config(cfg)

    t0 = time.perf_counter()
    set_determinism(cfg["seed"])
    model = OWVISModel(C.model_config(cfg), reg1)
    train_task(model, dataset, split.task(1).train_videos, schedule, loss_cfg, log=TrainLog())
    timings["task1_train"] = time.perf_counter() - t0
    r1 = evaluate_task(cfg, 1, predict_for_task(cfg, model, dataset, split, 1), dataset, split, fingerprint)
    say(r1.table())
    store = select_exemplars(dataset, split.task(1).train_videos, reg1, cfg["protocol"]["exemplars_per_class"],
                             cfg["seed"], schedule.clip_length)

    reports = {"task1": r1.to_json()}
    prev = {}
    for arm, replay in (("replay", True), ("no_replay", False)):
        t0 = time.perf_counter()
        arm_model = copy.deepcopy(model)
        set_determinism(cfg["seed"] + 1)
        incremental_step(arm_model, reg2, dataset, split.task(2).train_videos, store if replay else None,
                         schedule, loss_cfg, finetune=replay, log=TrainLog())
        timings[f"task2_{arm}_train"] = time.perf_counter() - t0
        r2 = evaluate_task(cfg, 2, predict_for_task(cfg, arm_model, dataset, split, 2), dataset, split, fingerprint)
        say(f"[{arm}]\n" + r2.table())
        reports[f"task2_{arm}"] = r2.to_json()
        prev[arm] = r2.section("Previously Known").ap50

    return ExperimentResult(
        known_ap50=r1.section("Known").ap50,
        unknown_ar1=r1.section("Unknown").ar1,
        random_unknown_ar1=r1.extras["random_proposals_unknown"]["AR1"],
        prev_known_ap50_replay=prev["replay"],
        prev_known_ap50_no_replay=prev["no_replay"],
        seconds=timings,
        reports=reports,
        fingerprint=fingerprint,
    )
