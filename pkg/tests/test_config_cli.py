import json

import pytest

from owvis import config as C
from owvis.cli import Run, build_parser, main
from owvis.data_model import load_annotations
from owvis.evaluation import ground_truth_predictions, load_predictions, save_predictions
from owvis.splits import TaskSplit

FAST = [
    "schedule.task1_epochs=1",
    "schedule.task2_epochs=1",
    "schedule.finetune_epochs=1",
    "schedule.max_steps=2",
    "model.d=32",
    "model.ffn_dim=64",
    "model.enc_layers=1",
    "model.dec_layers=1",
]


def owvis(root, *args, fast=True):
    argv = ["--output-root", str(root), *args, "--preset", "desk"]
    for s in FAST if fast else []:
        argv += ["--set", s]
    return main(argv)


def run_dir(root):
    (d,) = [p for p in root.iterdir() if p.is_dir()]
    return d


def test_defaults_and_presets():
    cfg = C.build_config()
    assert cfg["model"]["num_queries"] == 300 and cfg["model"]["d"] == 256
    assert cfg["schedule"]["learning_rate"] == 1e-4
    assert (cfg["schedule"]["task1_epochs"], cfg["schedule"]["task2_epochs"], cfg["schedule"]["finetune_epochs"]) == (18, 12, 2)
    assert cfg["model"]["enc_layers"] == cfg["model"]["dec_layers"] == 6
    desk = C.build_config(preset="desk")
    assert desk["model"]["d"] == 64 and desk["model"]["num_queries"] == 20
    assert C.fingerprint(cfg) != C.fingerprint(desk)


def test_overrides_file_and_errors(tmp_path):
    cfg = C.build_config(overrides=["sto.p_u=3", "protocol.activation=softmax"])
    assert cfg["sto"]["p_u"] == 3 and cfg["protocol"]["activation"] == "softmax"
    (tmp_path / "c.json").write_text(json.dumps({"seed": 7, "loss": {"alpha": 2.0}}))
    cfg = C.build_config(tmp_path / "c.json")
    assert cfg["seed"] == 7 and cfg["loss"]["alpha"] == 2.0 and cfg["loss"]["focal_gamma"] == 2.0
    for bad in (["nokey=1"], ["model.nokey=1"], ["sto.p_u"], ["model.d=30"], ["sto.p_u=-1"], ["schedule.task1_epochs=0"]):
        with pytest.raises(C.ConfigError):
            C.build_config(overrides=bad)
    with pytest.raises(C.ConfigError):
        C.build_config(preset="huge")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(C.ConfigError):
        C.build_config(tmp_path / "bad.json")


def test_fingerprint_ignores_output_dir():
    a = C.build_config()
    b = C.build_config(overrides=["output_dir=elsewhere"])
    assert C.fingerprint(a) == C.fingerprint(b)
    assert C.fingerprint(a) != C.fingerprint(C.build_config(overrides=["seed=1"]))


def test_loss_config_ablation():
    lc = C.loss_config(C.build_config(overrides=["model.use_sto=false", "loss.literal_l1_mask=true"]))
    assert lc.pseudo_scorer == "baseline" and not lc.use_contrastive and lc.mask_mode == "l1"


def test_synth_gen_and_split_build(tmp_path):
    data = tmp_path / "data"
    assert owvis(tmp_path / "runs", "synth-gen", "--out", str(data)) == 0
    ds = load_annotations(data / "annotations.json", data)
    assert len(ds.videos) == 24
    out = tmp_path / "splits"
    assert owvis(tmp_path / "runs", "split-build", "--annotations", str(data / "annotations.json"), "--out", str(out)) == 0
    split = TaskSplit.load(out / "desk.json")
    assert split.task(1).known_category_ids == (1, 2, 3)
    stats = json.loads((out / "desk_stats.json").read_text())
    assert len(stats["fingerprint"]) == 64


def test_train_eval_pipeline(tmp_path):
    root = tmp_path / "runs"
    assert owvis(root, "train", "--task", "1") == 0
    d = run_dir(root)
    first = (d / "metrics_task1.jsonl").read_bytes()
    assert owvis(root, "eval", "--task", "1") == 0
    rep1 = json.loads((d / "report_task1.json").read_text())
    assert [s["name"] for s in rep1["sections"]] == ["Known", "Unknown"]
    assert "random_proposals_unknown" in rep1["extras"]
    assert owvis(root, "train", "--task", "2") == 0
    assert owvis(root, "eval", "--task", "2") == 0
    rep2 = json.loads((d / "report_task2.json").read_text())
    assert [s["name"] for s in rep2["sections"]] == ["Previously Known", "Current Known", "Both"]
    fp = json.loads((d / "config.json").read_text())["fingerprint"]
    assert rep2["fingerprint"] == fp
    assert json.loads(first.splitlines()[0])["fingerprint"] == fp
    assert json.loads((d / "predictions_task1.json").read_text())["fingerprint"] == fp
    # identical config and seed reproduce the metrics file
    assert owvis(root, "train", "--task", "1") == 0
    assert (d / "metrics_task1.jsonl").read_bytes() == first
    assert owvis(root, "visualize", "--task", "1") == 0
    assert any((d / "visualize_task1").glob("objectness_*.png"))


def test_eval_ground_truth_predictions(tmp_path):
    root = tmp_path / "runs"
    args = build_parser().parse_args(["--output-root", str(root), "eval", "--preset", "desk"])
    r = Run(args)
    ds, split = r.data()
    reg = r.registries(split)[0]
    t1 = split.task(1)
    vids = list(t1.known_test_videos) + list(t1.unknown_test_videos)
    path = tmp_path / "gt.json"
    save_predictions(ground_truth_predictions(ds, vids, reg), path, r.fingerprint)
    assert owvis(root, "eval", "--task", "1", "--predictions", str(path), fast=False) == 0
    rep = json.loads((run_dir(root) / "report_task1.json").read_text())
    for s in rep["sections"]:
        assert s["ap"] == 1.0 and s["ap50"] == 1.0
    # AR-1 keeps one detection per video: its ceiling is the number of
    # (video, class) pairs over the number of tracks
    for cid, m in rep["per_class"].items():
        tracks = [t for v in t1.known_test_videos for t in ds.tracks(v) if t.category_id == int(cid)]
        if tracks:
            assert m["AR1"] == len({t.video_id for t in tracks}) / len(tracks)
    assert len(load_predictions(path)) > 0


def test_mixed_fingerprint_refused(tmp_path):
    root = tmp_path / "runs"
    assert owvis(root, "train", "--task", "1") == 0
    ckpt = run_dir(root) / "task1.pt"
    assert owvis(root, "eval", "--task", "1", "--checkpoint", str(ckpt), "--set", "seed=5") == 1
    save_predictions([], tmp_path / "p.json", "0" * 64)
    assert owvis(root, "eval", "--task", "1", "--predictions", str(tmp_path / "p.json")) == 1


def test_exit_codes(tmp_path, capsys):
    assert owvis(tmp_path, "eval", "--task", "2") == 1
    assert "not found" in capsys.readouterr().err
    assert main(["--output-root", str(tmp_path), "train", "--set", "bogus=1"]) == 1
    with pytest.raises(SystemExit):
        main(["nonsense"])


def test_experiment_command(tmp_path, capsys):
    root = tmp_path / "runs"
    assert owvis(root, "experiment") == 0
    doc = json.loads((run_dir(root) / "experiment.json").read_text())
    assert set(doc["reports"]) == {"task1", "task2_replay", "task2_no_replay"}
    assert set(doc["checks"]) == {"known_ap50>=0.5", "unknown_ar1>random", "replay_retention>=0.5", "no_replay<replay"}
    names = [s["name"] for s in doc["reports"]["task2_replay"]["sections"]]
    assert names[:3] == ["Previously Known", "Current Known", "Both"]
    assert doc["fingerprint"] == json.loads((run_dir(root) / "config.json").read_text())["fingerprint"]
    out = capsys.readouterr().out
    assert out.count("PASS") + out.count("FAIL") == 4
