"""Acceptance criteria, each checked at its stated tolerance and time budget.

Every test records one PASS/FAIL line; the lines are printed in the terminal
summary under "acceptance criteria".
"""

import copy
import math
import time

import numpy as np
import torch

from oracles import assignment_brute_force, class_metrics_reference, objectness_score_loops
from owvis import config as C
from owvis.cli import main as cli_main
from owvis.data_model import ClassRegistry, InstanceTrack
from owvis.evaluation import Detection, EvalConfig, evaluate_known, evaluate_unknown
from owvis.feature_net import FeatureEnricher, ScratchNet
from owvis.experiment import load_data, run_experiment, task_registries
from owvis.matching_losses import solve_assignment
from owvis.model import ModelConfig, OWVISModel
from owvis.protocol import objectness_separation, set_determinism, train_task
from owvis.splits import build_split, reference_split_configs, validate_split
from owvis.sto import QueryPartition, contrastive_loss, objectness_score, select_pseudo_unknowns
from owvis.synthdata import SynthConfig, generate

from test_evaluation import random_case
from test_sto import random_boxes


def test_c1_objectness_score_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        m, h, w, q = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 10)
        o = rng.uniform(0, 1, (m, h, w))
        boxes = random_boxes(rng, q, m)
        got = objectness_score(torch.tensor(o), torch.tensor(boxes)).numpy()
        want = np.array(objectness_score_loops(o.tolist(), boxes.tolist()))
        worst = max(worst, float(np.abs(got - want).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 10
    acceptance(1, "objectness score vs pixel-loop oracle", ok, f"max abs err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_c2_contrastive_value_and_gradient(acceptance):
    t0 = time.perf_counter()
    value = float(contrastive_loss(torch.tensor([2.5, 0.5], dtype=torch.float64), QueryPartition((0,), (), (1,))))
    value_err = abs(value - 0.135335)
    rng = np.random.default_rng(5)
    worst = 0.0
    for case in range(3):
        o = torch.tensor(rng.uniform(0, 1, (2, 4, 4)), requires_grad=True)
        boxes = torch.tensor(random_boxes(rng, 8, 2))
        part = select_pseudo_unknowns(rng.uniform(size=8).tolist(), [0, 1], 2)
        (g,) = torch.autograd.grad(contrastive_loss(objectness_score(o, boxes), part), o)
        eps = 1e-6
        for idx in np.ndindex(*o.shape):
            x = o.detach().clone()
            x[idx] += eps
            up = float(contrastive_loss(objectness_score(x, boxes), part))
            x[idx] -= 2 * eps
            down = float(contrastive_loss(objectness_score(x, boxes), part))
            fd, an = (up - down) / (2 * eps), float(g[idx])
            # cells shared by foreground and background boxes cancel to
            # rounding noise; there the check is absolute
            if abs(an) > 1e-12 * float(g.abs().max()):
                worst = max(worst, abs(fd - an) / abs(an))
            elif abs(fd) > 1e-8:
                worst = math.inf
    elapsed = time.perf_counter() - t0
    ok = value_err <= 1e-6 and worst < 1e-4 and elapsed < 30
    acceptance(2, "contrastive loss value and gradient", ok, f"value err {value_err:.1e}, max rel grad err {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_c3_pseudo_label_partition(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    failures = 0
    for _ in range(100):
        q = int(rng.integers(1, 60))
        k = int(rng.integers(0, q + 1))
        p_u = int(rng.integers(0, q - k + 1))
        scores = rng.choice([0.0, 0.5, 1.0], size=q) if rng.random() < 0.5 else rng.uniform(size=q)
        matched = rng.permutation(q)[:k].tolist()
        part = select_pseudo_unknowns(scores.tolist(), matched, p_u)
        sets = [set(part.matched_known), set(part.pseudo_unknown), set(part.background)]
        good = (
            [len(s) for s in sets] == [k, p_u, q - k - p_u]
            and set.union(*sets) == set(range(q))
            and sum(map(len, sets)) == q
            and select_pseudo_unknowns(scores.tolist(), matched, p_u) == part
        )
        failures += not good
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 5
    acceptance(3, "pseudo-label partition", ok, f"{failures} bad of 100, {elapsed:.2f}s")
    assert ok


def test_c4_hungarian_optimality(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        n = 8 if i < 10 else int(rng.integers(1, 9))
        k = n if i < 10 else int(rng.integers(1, n + 1))
        cost = rng.uniform(0, 10, (n, k))
        worst = max(worst, abs(solve_assignment(cost).cost - assignment_brute_force(cost.tolist())))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 10
    acceptance(4, "Hungarian matching vs brute force", ok, f"max cost gap {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_c5_shape_suite(acceptance):
    t0 = time.perf_counter()
    checks = []
    for m, h, w, d in [(3, 64, 64, 64), (2, 96, 64, 32), (1, 32, 32, 256)]:
        checks.append(ScratchNet(d)(torch.rand(m, 3, h, w)).shape == (m, d, h // 16, w // 16))
    reg = ClassRegistry((1, 2, 3))
    for m, h, w in [(3, 64, 64), (2, 64, 96)]:
        model = OWVISModel(ModelConfig.desk(), reg).eval()
        out = model(torch.rand(m, 3, h, w))
        checks.append(out["o_map"].shape == (m, h // 16, w // 16))
        net = model.features
        frames = torch.rand(m, 3, h, w)
        base, _ = net.backbone_forward(frames)
        ext = net.assemble_extended(base, net.scratchnet_forward(frames))
        pos = net.positional_encodings(ext)
        checks.append(net.encoder_forward(ext, pos).shapes == ext.shapes)
    net = FeatureEnricher(d=64, n_heads=4, ffn_dim=128, enc_layers=2).eval()
    for conv in net.fusion:
        torch.nn.init.zeros_(conv.weight)
        torch.nn.init.zeros_(conv.bias)
    frames = torch.rand(3, 3, 64, 64)
    base, _ = net.backbone_forward(frames)
    ext = net.assemble_extended(base, net.scratchnet_forward(frames))
    pos = net.positional_encodings(ext)
    final = net.encoder_layers_forward(ext, pos)[-1]
    enriched = net.encoder_forward(ext, pos)
    checks.append(all(torch.equal(a.features, b) for a, b in zip(enriched.levels, final)))
    elapsed = time.perf_counter() - t0
    ok = all(checks) and elapsed < 60
    acceptance(5, "shape suite", ok, f"{sum(checks)}/{len(checks)} checks, {elapsed:.1f}s")
    assert ok


def test_c6_metric_oracle(acceptance):
    t0 = time.perf_counter()
    gt = np.ones((1, 10, 10), bool)
    pred = gt.copy()
    pred[0, 0] = False
    reg = ClassRegistry((1,))
    hand = evaluate_known([Detection("v", 1, 0.7, pred)], [InstanceTrack.from_masks(1, gt, video_id="v")], reg)
    hand_ok = abs(hand.per_class[1].ap - 0.9) < 1e-12
    rng = np.random.default_rng(6)
    reg = ClassRegistry((1, 2))
    mismatches = 0
    for case in range(50):
        dets, gts = random_case(rng)
        cfg = EvalConfig(max_dets_ap=100 if case % 3 else 2)
        km = evaluate_known(dets, [g for g in gts if g.category_id in (1, 2)], reg, cfg)
        um = evaluate_unknown(dets, [g for g in gts if g.category_id == 0], cfg)
        for cat, got in ((1, km.per_class[1]), (2, km.per_class[2]), (0, um)):
            d = [(x.video_id, x.score, x.masks.tolist()) for x in dets if x.category_id == cat]
            g = [(x.video_id, x.masks.tolist()) for x in gts if x.category_id == cat]
            aps, ars = class_metrics_reference(d, g, cfg.iou_thresholds, cfg.max_dets_ap, cfg.max_dets_ar)
            mismatches += got.ap_per_threshold != aps or got.ar1_per_threshold != ars
    elapsed = time.perf_counter() - t0
    ok = hand_ok and mismatches == 0 and elapsed < 60
    acceptance(6, "evaluator vs brute-force reference", ok, f"hand AP {hand.per_class[1].ap:.4f}, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


def test_c7_split_properties(acceptance):
    t0 = time.perf_counter()
    cfg = SynthConfig.from_dict({"preset": "fivesplit", "num_videos": 36, "instances_per_video": [1, 3]})
    ds = generate(cfg)
    problems = []
    for sc in reference_split_configs(seed=0):
        split = build_split(ds, sc)
        t1, t2 = split.tasks
        if not validate_split(split, ds).ok:
            problems.append(f"{sc.split_name}: validation")
        if not set(t1.known_category_ids) < set(t2.known_category_ids):
            problems.append(f"{sc.split_name}: knowns not monotone")
        new = set(t2.known_category_ids) - set(t1.known_category_ids)
        if not new or new & set(t1.known_category_ids):
            problems.append(f"{sc.split_name}: task classes overlap")
        for t, part in enumerate(split.tasks, start=1):
            own_test = [v for v in part.known_test_videos if v not in (t1.known_test_videos if t == 2 else ())]
            n = len(part.train_videos) + len(own_test)
            if len(own_test) != max(1, math.floor(0.2 * n)):
                problems.append(f"{sc.split_name} task {t}: test carve-out {len(own_test)} of {n}")
            if set(part.train_videos) & (set(part.known_test_videos) | set(part.unknown_test_videos)):
                problems.append(f"{sc.split_name} task {t}: train/test overlap")
        if build_split(generate(cfg), sc).to_json() != split.to_json():
            problems.append(f"{sc.split_name}: not deterministic")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 10
    acceptance(7, "split properties on five splits", ok, f"{problems or 'all hold'}, {elapsed:.1f}s")
    assert ok


def desk_config(*overrides):
    return C.build_config(preset="desk", overrides=list(overrides))


def test_c8_sto_separation(acceptance):
    t0 = time.perf_counter()
    cfg = desk_config("schedule.max_steps=200")
    ds, split = load_data(cfg)
    reg = task_registries(split)[0]
    margins = {}
    for arm, ablate in (("sto", False), ("baseline", True)):
        arm_cfg = copy.deepcopy(cfg)
        if ablate:
            C.apply_overrides(arm_cfg, {"model.use_fusion": False, "model.use_sto": False})
        set_determinism(cfg["seed"])
        model = OWVISModel(C.model_config(arm_cfg), reg)
        log = train_task(model, ds, split.task(1).train_videos, C.schedule(arm_cfg), C.loss_config(arm_cfg))
        assert len(log.records) == 200
        if not ablate:
            assert all(r["L_contr"] > 0 for r in log.records)
        margins[arm] = objectness_separation(model, ds, list(ds.videos), seed=cfg["seed"], scorer=arm)
    elapsed = time.perf_counter() - t0
    sto, base = margins["sto"], margins["baseline"]
    ok = sto.margin > 0 and elapsed < 15 * 60
    detail = (
        f"STO fg {sto.foreground:.4f} bg {sto.background:.4f} margin {sto.margin:+.4f}; "
        f"baseline arm margin {base.margin:+.4f}; {elapsed:.0f}s"
    )
    acceptance(8, "objectness separates foreground from background", ok, detail)
    assert ok


def test_c9_desk_end_to_end(acceptance, tmp_path):
    t0 = time.perf_counter()
    cfg = desk_config()
    result = run_experiment(cfg, C.fingerprint(cfg))
    result.save(tmp_path / "experiment.json")
    elapsed = time.perf_counter() - t0
    checks = result.checks() | {"runtime<=45min": elapsed <= 45 * 60}
    ok = all(checks.values())
    detail = (
        f"known AP50 {result.known_ap50:.3f}; unknown AR1 {result.unknown_ar1:.3f} vs random {result.random_unknown_ar1:.3f}; "
        f"retention replay {result.retention_replay:.2f} no-replay {result.retention_no_replay:.2f}; "
        f"failed {[k for k, v in checks.items() if not v]}; {elapsed / 60:.1f} min"
    )
    acceptance(9, "desk-scale two-task experiment", ok, detail)
    assert ok


def test_c10_reproducible_metrics(acceptance, tmp_path):
    t0 = time.perf_counter()
    overrides = ["--set", "schedule.max_steps=40"]
    files = []
    for rerun in ("a", "b"):
        root = str(tmp_path / rerun)
        assert cli_main(["--output-root", root, "train", "--preset", "desk", *overrides]) == 0
        assert cli_main(["--output-root", root, "eval", "--preset", "desk", *overrides]) == 0
        (run_dir,) = (tmp_path / rerun).iterdir()
        files.append([(run_dir / n).read_bytes() for n in ("metrics_task1.jsonl", "report_task1.json", "predictions_task1.json")])
    elapsed = time.perf_counter() - t0
    same = [x == y for x, y in zip(*files)]
    ok = all(same)
    acceptance(10, "bit-exact metrics on rerun", ok, f"metrics/report/predictions equal: {same}, {elapsed:.0f}s")
    assert ok
