"""Command-line entry point: synth-gen, train, eval, dataset-stats and run."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .config import FORMAT_VERSION, ConfigError, ExperimentConfig, load_config
from .decorrelation import NonFiniteError
from .detector import DetectionHead, detect, train
from .metrics import (
    SchemaError,
    annotations_to_json,
    dataset_stats,
    detections_to_json,
    evaluate,
    load_annotations,
    load_detections,
    report_to_csv,
)
from .synthetic import (
    dataset_from_files,
    dump_json,
    generate_dgod_split,
    proposals_to_json,
    read_feature_dump,
    write_feature_dump,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_SCHEMA = 0, 2, 3, 4
ARMS = {"rapt": True, "baseline": False}

log = logging.getLogger("rapt")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _out_dir(cfg: ExperimentConfig, override: Optional[str]) -> Path:
    return Path(override or cfg.output_dir)


def _data_paths(out: Path, part: str) -> dict:
    base = out / "data"
    return {
        "annotations": base / f"{part}_annotations.json",
        "proposals": base / f"{part}_proposals.json",
        "features": base / f"{part}_features.bin",
    }


def synth_gen(cfg: ExperimentConfig, out: Path) -> dict:
    train_ds, test_ds = generate_dgod_split(cfg.train_specs(), cfg.test_spec())
    summary = {}
    for part, ds in (("train", train_ds), ("test", test_ds)):
        paths = _data_paths(out, part)
        paths["annotations"].parent.mkdir(parents=True, exist_ok=True)
        ann = ds.annotations()
        dump_json(annotations_to_json(ann), paths["annotations"])
        dump_json(proposals_to_json(ds), paths["proposals"])
        write_feature_dump(ds, paths["features"])
        summary[part] = {"images": len(ds), "proposals": int(len(ds.boxes)),
                         **dataset_stats(ann, cfg.metrics.overlap_iou)}
    return summary


def load_split(out: Path, part: str):
    paths = _data_paths(out, part)
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"dataset files missing (run synth-gen first): {', '.join(missing)}")
    ann = load_annotations(paths["annotations"])
    props = json.loads(paths["proposals"].read_text())
    return dataset_from_files(ann, props, read_feature_dump(paths["features"]))


def head_to_json(head: DetectionHead) -> dict:
    return {"cls_weights": head.cls_weights.tolist(), "reg_weights": head.reg_weights.tolist()}


def head_from_json(data: dict) -> DetectionHead:
    return DetectionHead(np.array(data["cls_weights"], dtype=np.float64),
                         np.array(data["reg_weights"], dtype=np.float64))


def train_arms(cfg: ExperimentConfig, out: Path, arms: list[str], timings: dict) -> dict:
    train_ds = load_split(out, "train")
    test_ds = load_split(out, "test")
    results = {}
    for arm in arms:
        start = time.perf_counter()
        res = train(train_ds, cfg.train_config(ARMS[arm]))
        timings[f"train_{arm}"] = time.perf_counter() - start
        arm_dir = out / arm
        arm_dir.mkdir(parents=True, exist_ok=True)
        with open(arm_dir / "train_log.jsonl", "w") as fh:
            for rec in res.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        _write_json(arm_dir / "head.json", head_to_json(res.head))
        dets = detect(res.head, test_ds, cfg.metrics.nms_iou, cfg.metrics.max_detections)
        _write_json(arm_dir / "test_detections.json", detections_to_json(dets))
        results[arm] = {"head": res.head, "log": res.log, "detections": dets}
    return results


def _eval_files(cfg: ExperimentConfig, det_path, ann_path) -> dict:
    ann = load_annotations(ann_path)
    dets = load_detections(det_path, known_images=ann.image_ids)
    return evaluate(dets, ann, cfg.metrics.splits, cfg.metrics.iou_regime)


# ---------- commands ----------

def cmd_synth_gen(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.out)
    summary = synth_gen(cfg, out)
    print(json.dumps(summary, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.out)
    arms = ["rapt", "baseline"] if args.arm == "both" else [args.arm]
    try:
        train_arms(cfg, out, arms, {})
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for arm in arms:
        print(f"{arm}: wrote {out / arm}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.out)
    metrics = _eval_files(cfg, args.detections, args.annotations)
    report = {"format_version": FORMAT_VERSION, "config": cfg.model_dump(mode="json"),
              "detections": str(args.detections), "annotations": str(args.annotations), "metrics": metrics}
    _write_json(out / "eval_report.json", report)
    (out / "eval_report.csv").write_text(report_to_csv({"eval": metrics}))
    print(json.dumps(metrics, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_dataset_stats(args) -> int:
    ann = load_annotations(args.annotations)
    stats = dataset_stats(ann, args.overlap_iou)
    text = json.dumps(stats, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.out)
    timings = {}
    start = time.perf_counter()
    data_summary = synth_gen(cfg, out)
    timings["synth_gen"] = time.perf_counter() - start
    arms = ["baseline", "rapt"]
    train_arms(cfg, out, arms, timings)
    test_ann = _data_paths(out, "test")["annotations"]
    metrics = {}
    for arm in arms:
        start = time.perf_counter()
        metrics[arm] = _eval_files(cfg, out / arm / "test_detections.json", test_ann)
        timings[f"eval_{arm}"] = time.perf_counter() - start
    report = {
        "format_version": FORMAT_VERSION,
        "config": cfg.model_dump(mode="json"),
        "data": data_summary,
        "train_logs": {arm: f"{arm}/train_log.jsonl" for arm in arms},
        "metrics": metrics,
        "timings": "timings.json",
    }
    _write_json(out / "report.json", report)
    (out / "report.csv").write_text(report_to_csv(metrics))
    # wall-clock numbers live in a sidecar so the report itself is reproducible byte for byte
    _write_json(out / "timings.json", {k: round(v, 3) for k, v in timings.items()})
    print(report_to_csv(metrics), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rapt", description="Proposal reweighting experiments on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", default=None, help="output directory (overrides config and $RAPT_OUTPUT_DIR)")
        return p

    with_config(sub.add_parser("synth-gen", help="generate train/test datasets")).set_defaults(func=cmd_synth_gen)
    p = with_config(sub.add_parser("train", help="train one or both arms on generated data"))
    p.add_argument("--arm", choices=["rapt", "baseline", "both"], default="both")
    p.set_defaults(func=cmd_train)
    p = with_config(sub.add_parser("eval", help="score a detection file against annotations"))
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("dataset-stats", help="objects and overlapping pairs per image")
    p.add_argument("--annotations", required=True)
    p.add_argument("--overlap-iou", type=float, default=0.5)
    p.add_argument("--out", default=None, help="also write the stats JSON here")
    p.set_defaults(func=cmd_dataset_stats)
    with_config(sub.add_parser("run", help="generate, train both arms, evaluate")).set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except SchemaError as e:
        print(f"schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA if args.command in ("eval", "dataset-stats") else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
