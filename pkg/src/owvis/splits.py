"""Two-task open-world splits built from super-category groups."""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data_model import Dataset


class SplitConfigError(ValueError):
    pass


class SplitConstructionError(RuntimeError):
    pass


@dataclass
class SplitConfig:
    """Which super-category groups form each task.

    A group name matches categories whose ``super_category`` equals it, unless
    ``groups`` maps the name to an explicit list of category names (used for
    sub-groups such as "Animals (domestic)").
    """

    split_name: str
    task1_supercats: list[str]
    task2_supercats: list[str]
    test_fraction: float = 0.2
    seed: int = 0
    groups: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise SplitConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SplitConfig":
        return cls(
            split_name=d["split_name"],
            task1_supercats=list(d["task1_supercats"]),
            task2_supercats=list(d["task2_supercats"]),
            test_fraction=float(d.get("test_fraction", 0.2)),
            seed=int(d.get("seed", 0)),
            groups={k: list(v) for k, v in d.get("groups", {}).items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "SplitConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TaskPartition:
    known_category_ids: tuple[int, ...]
    train_videos: tuple
    known_test_videos: tuple
    unknown_test_videos: tuple


@dataclass(frozen=True)
class TaskSplit:
    split_name: str
    seed: int
    tasks: tuple[TaskPartition, ...]

    def task(self, t: int) -> TaskPartition:
        """1-based task accessor."""
        return self.tasks[t - 1]

    def new_category_ids(self, t: int) -> tuple[int, ...]:
        prev = set(self.task(t - 1).known_category_ids) if t > 1 else set()
        return tuple(c for c in self.task(t).known_category_ids if c not in prev)

    def to_json(self) -> str:
        return json.dumps(
            {
                "split_name": self.split_name,
                "seed": self.seed,
                "tasks": [
                    {
                        "known_category_ids": list(p.known_category_ids),
                        "train_videos": list(p.train_videos),
                        "known_test_videos": list(p.known_test_videos),
                        "unknown_test_videos": list(p.unknown_test_videos),
                    }
                    for p in self.tasks
                ],
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TaskSplit":
        d = json.loads(text)
        tasks = tuple(
            TaskPartition(
                tuple(t["known_category_ids"]),
                tuple(t["train_videos"]),
                tuple(t["known_test_videos"]),
                tuple(t["unknown_test_videos"]),
            )
            for t in d["tasks"]
        )
        return cls(d["split_name"], int(d["seed"]), tasks)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "TaskSplit":
        return cls.from_json(Path(path).read_text())


def category_tasks(dataset: Dataset, config: SplitConfig) -> dict[int, int]:
    """Map every category id to its task (1 or 2); configuration errors raise."""
    by_name = {c.name: c.id for c in dataset.categories.values()}
    claims: dict[int, list[str]] = {cid: [] for cid in dataset.categories}
    owner: dict[int, int] = {}
    for task, names in ((1, config.task1_supercats), (2, config.task2_supercats)):
        for group in names:
            if group in config.groups:
                members = []
                for n in config.groups[group]:
                    if n not in by_name:
                        raise SplitConfigError(f"group {group!r} names unknown category {n!r}")
                    members.append(by_name[n])
            else:
                members = [c.id for c in dataset.categories.values() if c.super_category == group]
            for cid in members:
                claims[cid].append(group)
                if cid in owner and owner[cid] != task:
                    raise SplitConfigError(
                        f"category {dataset.categories[cid].name!r} assigned to both tasks "
                        f"(groups {claims[cid]})"
                    )
                owner[cid] = task
    unassigned = [dataset.categories[c].name for c in dataset.categories if c not in owner]
    if unassigned:
        raise SplitConfigError(f"categories not covered by any task group: {unassigned}")
    return owner


def video_task(dataset: Dataset, video_id, cat_task: dict[int, int]) -> int | None:
    """Majority-instance task of a video; ties go to the lower task."""
    counts = Counter(cat_task[t.category_id] for t in dataset.tracks(video_id))
    if not counts:
        return None
    best = max(counts.values())
    return min(t for t, n in counts.items() if n == best)


def build_split(dataset: Dataset, config: SplitConfig) -> TaskSplit:
    cat_task = category_tasks(dataset, config)
    task_videos: dict[int, list] = {1: [], 2: []}
    for vid in sorted(dataset.videos, key=_sort_key):
        t = video_task(dataset, vid, cat_task)
        if t is not None:
            task_videos[t].append(vid)

    rng = random.Random(config.seed)
    train: dict[int, list] = {}
    test: dict[int, list] = {}
    for t in (1, 2):
        vids = task_videos[t]
        if not vids:
            raise SplitConstructionError(f"split {config.split_name!r}: task {t} has zero videos")
        order = list(vids)
        rng.shuffle(order)
        n_test = max(1, math.floor(config.test_fraction * len(vids)))
        test[t] = sorted(order[:n_test], key=_sort_key)
        train[t] = sorted(order[n_test:], key=_sort_key)

    tasks = []
    for t in (1, 2):
        known = sorted(c for c, ct in cat_task.items() if ct <= t)
        tasks.append(
            TaskPartition(
                known_category_ids=tuple(known),
                train_videos=tuple(train[t]),
                known_test_videos=tuple(v for a in (1, 2) if a <= t for v in test[a]),
                unknown_test_videos=tuple(v for a in (1, 2) if a > t for v in test[a]),
            )
        )
    return TaskSplit(config.split_name, config.seed, tuple(tasks))


def _sort_key(v):
    return (0, v) if isinstance(v, (int, float)) else (1, str(v))


@dataclass
class SplitReport:
    violations: list[str] = field(default_factory=list)
    suppressed: list[dict[str, Any]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_split(split: TaskSplit, dataset: Dataset) -> SplitReport:
    """Check class disjointness, train/test disjointness and list future-class
    instances in train videos, which are suppressed from supervision."""
    report = SplitReport()
    prev_known: set[int] = set()
    for i, part in enumerate(split.tasks, start=1):
        known = set(part.known_category_ids)
        if not prev_known <= known:
            report.violations.append(f"task {i}: known set shrinks ({sorted(prev_known - known)} dropped)")
        prev_known = known

        train = list(part.train_videos)
        dup_train = [v for v, n in Counter(train).items() if n > 1]
        for v in dup_train:
            report.violations.append(f"task {i}: video {v!r} listed twice in train")
        for v in sorted(set(train) & set(part.known_test_videos), key=_sort_key):
            report.violations.append(f"task {i}: video {v!r} in both train and known test")
        for v in sorted(set(train) & set(part.unknown_test_videos), key=_sort_key):
            report.violations.append(f"task {i}: video {v!r} in both train and unknown test")

        for v in train:
            for tr in dataset.tracks(v):
                if tr.category_id not in known:
                    report.suppressed.append(
                        {
                            "kind": "suppressed-future-class instance",
                            "task": i,
                            "video_id": v,
                            "track_id": tr.track_id,
                            "category_id": tr.category_id,
                        }
                    )

    for i, part in enumerate(split.tasks, start=1):
        both = set(part.known_test_videos) & set(part.unknown_test_videos)
        for v in sorted(both, key=_sort_key):
            report.violations.append(f"task {i}: video {v!r} in both known and unknown test")
    return report


def split_stats(split: TaskSplit, dataset: Dataset) -> list[dict[str, Any]]:
    """Per task and partition: number of videos and instance tracks."""
    rows = []
    for i, part in enumerate(split.tasks, start=1):
        for name in ("train_videos", "known_test_videos", "unknown_test_videos"):
            vids = getattr(part, name)
            rows.append(
                {
                    "task": i,
                    "partition": name,
                    "videos": len(vids),
                    "instances": sum(len(dataset.tracks(v)) for v in vids),
                }
            )
    return rows


# Groupings of the five reference splits. D and E use sub-groups, which need a
# ``groups`` mapping from group name to category names for a given dataset.
REFERENCE_SPLITS: dict[str, tuple[list[str], list[str]]] = {
    "A": (["Human", "Animals", "Aquatic Animals"], ["Vehicle", "Others"]),
    "B": (["Human", "Vehicle", "Others"], ["Animals", "Aquatic Animals"]),
    "C": (["Human", "Animals"], ["Aquatic Animals", "Vehicle", "Others"]),
    "D": (
        ["Human", "Animals (domestic)", "Aquatic Animals (amphibious)", "Vehicle (road)", "Others (board)"],
        ["Animals (wild)", "Aquatic Animals (underwater)", "Vehicle (non-road)", "Others (non-board)"],
    ),
    "E": (
        ["Human", "Animals (wild)", "Aquatic Animals (underwater)", "Vehicle (non-road)", "Others (non-board)"],
        ["Animals (domestic)", "Aquatic Animals (amphibious)", "Vehicle (road)", "Others (board)"],
    ),
}

# Sub-group membership for the nine-class synthetic preset.
SYNTH_SUBGROUPS = {
    "Animals (domestic)": ["dog"],
    "Animals (wild)": ["tiger"],
    "Aquatic Animals (amphibious)": ["frog"],
    "Aquatic Animals (underwater)": ["shark"],
    "Vehicle (road)": ["car"],
    "Vehicle (non-road)": ["airplane"],
    "Others (board)": ["skateboard"],
    "Others (non-board)": ["flying_disc"],
}


def reference_split_configs(seed: int = 0, groups: dict[str, list[str]] | None = None) -> list[SplitConfig]:
    groups = SYNTH_SUBGROUPS if groups is None else groups
    return [
        SplitConfig(f"split_{name}", list(t1), list(t2), 0.2, seed, dict(groups))
        for name, (t1, t2) in REFERENCE_SPLITS.items()
    ]
