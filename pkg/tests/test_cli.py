import json
import math
import re

import numpy as np
import pytest

from rapt.cli import main
from rapt.config import ConfigError, load_config, parse_config
from rapt.metrics import load_annotations

from oracles import brute_force_ap, brute_force_mr, brute_force_overlaps

TINY = {
    "seed": 3,
    "domains": {
        "train": [{"rho": 0.9, "n_images": 12}, {"rho": 0.8, "n_images": 12}],
        "test": {"rho": -0.9, "n_images": 8},
    },
    "train": {"epochs": 1, "batch_size": 8},
    "decorr": {"steps": 3},
}


def write_config(tmp_path, data=None, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(TINY if data is None else data, indent=2))
    return p


def run(*argv):
    return main([str(a) for a in argv])


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    cfg = write_config(root)
    out = root / "out"
    assert run("synth-gen", "--config", cfg, "--out", out) == 0
    assert run("train", "--config", cfg, "--out", out, "--arm", "both") == 0
    return cfg, out


class TestConfig:
    def test_rho_out_of_range(self, tmp_path, capsys):
        bad = json.loads(json.dumps(TINY))
        bad["domains"]["train"][1]["rho"] = 1.5
        assert run("synth-gen", "--config", write_config(tmp_path, bad), "--out", tmp_path / "o") == 2
        assert "domains.train.1.rho" in capsys.readouterr().err

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="train.momentum"):
            parse_config({**TINY, "train": {"momentum": 0.9}})

    def test_json_syntax_error_location(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{\n  "seed": 1,\n  oops\n}')
        with pytest.raises(ConfigError, match=r"c.json:3:3"):
            load_config(p)

    def test_missing_file_is_config_error(self, tmp_path):
        assert run("synth-gen", "--config", tmp_path / "nope.json") == 2

    def test_overlapping_channels(self):
        with pytest.raises(ConfigError, match="domains.test"):
            parse_config({**TINY, "domains": {**TINY["domains"], "test": {
                "rho": 0.0, "n_images": 2, "relevant_channels": [0, 1], "irrelevant_channels": [1]}}})

    def test_seeds_resolved(self):
        cfg = parse_config(TINY)
        assert [d.seed for d in cfg.domains.train] == [3001, 3002]
        assert cfg.domains.test.seed == 3999
        assert cfg.decorr.seed == 3

    def test_output_dir_from_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv("RAPT_OUTPUT_DIR", str(tmp_path / "env_out"))
        assert parse_config(TINY).output_dir == str(tmp_path / "env_out")
        assert parse_config({**TINY, "output_dir": "explicit"}).output_dir == "explicit"

    def test_env_directory_used_by_commands(self, monkeypatch, tmp_path):
        monkeypatch.setenv("RAPT_OUTPUT_DIR", str(tmp_path / "env_out"))
        small = {**TINY, "domains": {"train": [{"rho": 0.5, "n_images": 2}], "test": {"rho": 0.0, "n_images": 1}}}
        assert run("synth-gen", "--config", write_config(tmp_path, small)) == 0
        assert (tmp_path / "env_out" / "data" / "train_annotations.json").exists()


class TestSynthGen:
    def test_outputs_and_regeneration(self, generated, tmp_path):
        cfg, out = generated
        again = tmp_path / "again"
        assert run("synth-gen", "--config", cfg, "--out", again) == 0
        first = snapshot(out / "data")
        assert set(first) == {f"{p}_{k}" for p in ("train", "test")
                              for k in ("annotations.json", "proposals.json", "features.bin")}
        assert first == snapshot(again / "data")

    def test_annotations_round_trip(self, generated):
        _, out = generated
        raw = json.loads((out / "data" / "train_annotations.json").read_text())
        ann = load_annotations(raw)
        assert ann.n_images == 24
        # every stored field survives parsing
        for entry, g in zip(raw["annotations"], ann.gts):
            assert g.box.to_xywh() == entry["bbox"]
            assert (g.height, g.visibility, int(g.ignore)) == (entry["height"], entry["vis_ratio"], entry["ignore"])
            assert g.image_id == entry["image_id"]


class TestTrain:
    def test_both_arms(self, generated):
        _, out = generated
        logs = {arm: [json.loads(line) for line in (out / arm / "train_log.jsonl").read_text().splitlines()]
                for arm in ("rapt", "baseline")}
        assert len(logs["rapt"]) == len(logs["baseline"]) == 3
        assert not any(k.startswith("decorr") for rec in logs["baseline"] for k in rec)
        for rec in logs["rapt"]:
            assert rec["decorr_loss_after"] <= rec["decorr_loss_before"]
        for arm in logs:
            assert (out / arm / "head.json").exists()
            assert isinstance(json.loads((out / arm / "test_detections.json").read_text()), list)

    def test_rerun_identical(self, generated, tmp_path):
        cfg, out = generated
        again = tmp_path / "again"
        run("synth-gen", "--config", cfg, "--out", again)
        assert run("train", "--config", cfg, "--out", again, "--arm", "both") == 0
        assert snapshot(out) == snapshot(again)

    def test_single_arm(self, generated, tmp_path):
        cfg, out = generated
        again = tmp_path / "single"
        run("synth-gen", "--config", cfg, "--out", again)
        assert run("train", "--config", cfg, "--out", again, "--arm", "baseline") == 0
        assert not (again / "rapt").exists()
        assert (again / "baseline" / "train_log.jsonl").read_bytes() == (out / "baseline" / "train_log.jsonl").read_bytes()

    def test_missing_data(self, tmp_path):
        assert run("train", "--config", write_config(tmp_path), "--out", tmp_path / "empty") == 2

    def test_divergence_exit_code(self, tmp_path, capsys):
        data = json.loads(json.dumps(TINY))
        data["train"]["head_lr"] = 1e308
        cfg = write_config(tmp_path, data)
        run("synth-gen", "--config", cfg, "--out", tmp_path / "o")
        capsys.readouterr()
        assert run("train", "--config", cfg, "--out", tmp_path / "o", "--arm", "baseline") == 3
        assert re.search(r"batch \d+", capsys.readouterr().err)

    def test_weight_overflow_exit_code(self, tmp_path, capsys):
        data = json.loads(json.dumps(TINY))
        data["decorr"].update(line_search=False, learning_rate=1e6)
        cfg = write_config(tmp_path, data)
        run("synth-gen", "--config", cfg, "--out", tmp_path / "o")
        capsys.readouterr()
        assert run("train", "--config", cfg, "--out", tmp_path / "o", "--arm", "rapt") == 3
        assert "batch 0" in capsys.readouterr().err


def eval_fixture(tmp_path):
    """Four images, five people, detections covering hits, misses and one ignore region."""
    boxes = {0: [[10, 10, 30, 80]], 1: [[10, 10, 30, 80], [200, 10, 30, 60]], 2: [[10, 10, 30, 80]],
             3: [[10, 10, 30, 80], [300, 10, 20, 30]]}
    anns = []
    for img, bs in boxes.items():
        for b in bs:
            anns.append({"image_id": img, "bbox": b, "vis_ratio": 1.0 if b[3] != 60 else 0.5})
    ann = {"images": [{"id": i} for i in boxes], "annotations": anns}
    dets = [
        {"image_id": 0, "bbox": [10, 10, 30, 80], "score": 0.95},
        {"image_id": 1, "bbox": [400, 0, 30, 80], "score": 0.9},
        {"image_id": 2, "bbox": [12, 10, 30, 80], "score": 0.85},
        {"image_id": 3, "bbox": [300, 10, 20, 30], "score": 0.7},
        {"image_id": 3, "bbox": [150, 0, 30, 80], "score": 0.6},
        {"image_id": 1, "bbox": [200, 10, 30, 60], "score": 0.5},
        {"image_id": 3, "bbox": [10, 10, 30, 80], "score": 0.3},
    ]
    a, d = tmp_path / "ann.json", tmp_path / "dets.json"
    a.write_text(json.dumps(ann))
    d.write_text(json.dumps(dets))
    return ann, dets, a, d


def fixture_oracle_images(ann, dets, split_bounds):
    h_lo, h_hi, v_lo, v_hi = split_bounds
    images = []
    for img in [im["id"] for im in ann["images"]]:
        d = [(np.array([x, y, x + w, y + h], float), s["score"])
             for s in dets if s["image_id"] == img for x, y, w, h in [s["bbox"]]]
        g = []
        for a in ann["annotations"]:
            if a["image_id"] != img:
                continue
            x, y, w, h = a["bbox"]
            g.append((np.array([x, y, x + w, y + h], float), not (h_lo <= h <= h_hi and v_lo <= a["vis_ratio"] <= v_hi)))
        images.append((d, g))
    return images


class TestEval:
    def test_fixture_matches_oracles(self, tmp_path):
        ann, dets, a, d = eval_fixture(tmp_path)
        cfg = write_config(tmp_path)
        assert run("eval", "--config", cfg, "--out", tmp_path / "r", "--detections", d, "--annotations", a) == 0
        report = json.loads((tmp_path / "r" / "eval_report.json").read_text())
        assert report["format_version"] == 1
        assert report["config"]["seed"] == 3
        bounds = {"Reasonable": (50, math.inf, 0.65, 1.0), "Small": (50, 75, 0.65, 1.0),
                  "Heavy": (50, math.inf, 0.2, 0.65), "All": (20, math.inf, 0.2, 1.0)}
        for name, b in bounds.items():
            images = fixture_oracle_images(ann, dets, b)
            got = report["metrics"][name]
            assert got["mAP"] == brute_force_ap(images)
            assert got["MR-2"] == brute_force_mr(images)
        assert report["metrics"]["Small"]["mAP"] is None
        assert (tmp_path / "r" / "eval_report.csv").read_text().startswith("arm,split,n_gt,mAP,MR-2\n")

    def test_perfect_and_empty(self, tmp_path):
        ann, _, a, _ = eval_fixture(tmp_path)
        perfect = tmp_path / "perfect.json"
        perfect.write_text(json.dumps([{"image_id": x["image_id"], "bbox": x["bbox"], "score": 1.0}
                                       for x in ann["annotations"]]))
        empty = tmp_path / "empty.json"
        empty.write_text("[]")
        cfg = write_config(tmp_path)
        run("eval", "--config", cfg, "--out", tmp_path / "p", "--detections", perfect, "--annotations", a)
        run("eval", "--config", cfg, "--out", tmp_path / "e", "--detections", empty, "--annotations", a)
        good = json.loads((tmp_path / "p" / "eval_report.json").read_text())["metrics"]
        bad = json.loads((tmp_path / "e" / "eval_report.json").read_text())["metrics"]
        for name in ("Reasonable", "Heavy", "All"):
            assert good[name]["mAP"] == 1.0
            assert good[name]["MR-2"] == pytest.approx(1e-10)
            assert bad[name] == {"n_gt": good[name]["n_gt"], "mAP": 0.0, "MR-2": 1.0}

    def test_schema_error(self, tmp_path, capsys):
        _, _, a, _ = eval_fixture(tmp_path)
        d = tmp_path / "bad.json"
        d.write_text(json.dumps([{"image_id": 0, "bbox": [0, 0, 1], "score": 0.3}]))
        assert run("eval", "--config", write_config(tmp_path), "--detections", d, "--annotations", a,
                   "--out", tmp_path / "r") == 4
        assert "$[0].bbox" in capsys.readouterr().err

    def test_unknown_image(self, tmp_path):
        _, _, a, _ = eval_fixture(tmp_path)
        d = tmp_path / "bad.json"
        d.write_text(json.dumps([{"image_id": 42, "bbox": [0, 0, 1, 1], "score": 0.3}]))
        assert run("eval", "--config", write_config(tmp_path), "--detections", d, "--annotations", a,
                   "--out", tmp_path / "r") == 4

    def test_missing_file(self, tmp_path):
        _, _, a, _ = eval_fixture(tmp_path)
        assert run("eval", "--config", write_config(tmp_path), "--detections", tmp_path / "none.json",
                   "--annotations", a, "--out", tmp_path / "r") == 4


class TestDatasetStats:
    def _ann(self, tmp_path, per_image):
        p = tmp_path / "a.json"
        p.write_text(json.dumps({
            "images": [{"id": i} for i in range(len(per_image))],
            "annotations": [{"image_id": i, "bbox": b} for i, bs in enumerate(per_image) for b in bs],
        }))
        return p

    def test_no_overlaps(self, tmp_path, capsys):
        p = self._ann(tmp_path, [[[0, 0, 10, 30], [50, 0, 10, 30], [100, 0, 10, 30]]] * 2)
        assert run("dataset-stats", "--annotations", p, "--out", tmp_path / "s.json") == 0
        assert json.loads((tmp_path / "s.json").read_text()) == {"objects_per_image": 3.0, "overlaps_per_image": 0.0}

    def test_one_pair_per_image(self, tmp_path, capsys):
        p = self._ann(tmp_path, [[[0, 0, 10, 30], [1, 0, 10, 30], [100, 0, 10, 30]]] * 3)
        assert run("dataset-stats", "--annotations", p) == 0
        assert json.loads(capsys.readouterr().out)["overlaps_per_image"] == 1.0

    def test_random_matches_brute_force(self, tmp_path, capsys):
        rng = np.random.default_rng(21)
        per_image = [[[float(v) for v in (*rng.uniform(0, 80, 2), *rng.uniform(10, 60, 2))]
                      for _ in range(int(rng.integers(0, 15)))] for _ in range(40)]
        p = self._ann(tmp_path, per_image)
        assert run("dataset-stats", "--annotations", p) == 0
        stats = json.loads(capsys.readouterr().out)
        xyxy = [[np.array([x, y, x + w, y + h]) for x, y, w, h in bs] for bs in per_image]
        assert stats["overlaps_per_image"] == brute_force_overlaps(xyxy) / 40
        assert stats["objects_per_image"] == sum(map(len, per_image)) / 40

    def test_schema_error(self, tmp_path):
        p = tmp_path / "a.json"
        p.write_text(json.dumps({"images": [{"id": 0}], "annotations": [{"image_id": 0}]}))
        assert run("dataset-stats", "--annotations", p) == 4


class TestRun:
    def test_report_and_determinism(self, tmp_path):
        cfg = write_config(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("run", "--config", cfg, "--out", a) == 0
        assert run("run", "--config", cfg, "--out", b) == 0
        snap_a, snap_b = snapshot(a), snapshot(b)
        assert set(snap_a) == set(snap_b)
        for name in snap_a:
            if name != "timings.json":
                assert snap_a[name] == snap_b[name], name
        report = json.loads((a / "report.json").read_text())
        assert report["format_version"] == 1
        assert report["config"]["domains"]["test"]["rho"] == -0.9
        assert set(report["metrics"]) == {"baseline", "rapt"}
        for arm in report["metrics"].values():
            assert set(arm) == {"Reasonable", "Small", "Heavy", "All"}
        assert set(json.loads((a / "timings.json").read_text())) >= {"synth_gen", "train_rapt", "eval_rapt"}
