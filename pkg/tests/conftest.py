import json

import numpy as np
import pytest
import torch

from owvis.data_model import rle_encode
from owvis.synthdata import SynthConfig, generate


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def vis_json(masks_per_ann, categories=((1, "person", "Human"),), height=8, width=8, video_len=None):
    """Tiny YouTube-VIS document with one video; ``masks_per_ann`` is a list of
    (category_id, list of masks or None)."""
    length = video_len or len(masks_per_ann[0][1])
    anns = []
    for i, (cid, masks) in enumerate(masks_per_ann, start=1):
        segs = [None if m is None else rle_encode(np.asarray(m)) for m in masks]
        anns.append({"id": i, "video_id": 1, "category_id": cid, "segmentations": segs})
    return {
        "videos": [{"id": 1, "height": height, "width": width, "file_names": [f"v/{t}.png" for t in range(length)]}],
        "annotations": anns,
        "categories": [{"id": c, "name": n, "supercategory": s} for c, n, s in categories],
    }


@pytest.fixture
def write_json(tmp_path):
    def _write(doc, name="ann.json"):
        p = tmp_path / name
        p.write_text(json.dumps(doc))
        return p

    return _write


@pytest.fixture(scope="session")
def desk_dataset():
    return generate(SynthConfig())


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        status = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
