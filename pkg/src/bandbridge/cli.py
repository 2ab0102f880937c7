"""Command-line entry point: ``bandbridge <subcommand> ...``.

Exit status is 0 on success, 1 on runtime failure and 2 on usage errors.

``--config`` takes a JSON object with two optional sections::

    {"data": {"root": ..., "scenes": 40, "seed": 7, "ratios": [0.6, 0.2, 0.2],
              "scene": {<SceneSpec fields>}},
     "train": {<TrainSpec fields>, "model": {<ModelSpec fields>}}}

Command-line flags override values from the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import harness as H
from . import metrics as mt
from .models import ModelSpec, ModelSpecError
from .raster import export_rgb, read_patches
from .synthpipe import SceneSpec, SceneSpecError, build_dataset

log = logging.getLogger("bandbridge")


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


_SCENE_FIELDS = [f.name for f in fields(SceneSpec) if f.name not in ("seed", "shift")]
_MODEL_FIELDS = [f.name for f in fields(ModelSpec) if f.name not in ("in_channels", "out_channels", "seed")]
_TRAIN_FIELDS = [f.name for f in fields(H.TrainSpec) if f.name != "model"]


def _add_fields(p: argparse.ArgumentParser, names, types) -> None:
    for n in names:
        t = types.get(n)
        if t is None:
            continue
        p.add_argument("--" + n.replace("_", "-"), dest=n, type=t, default=None)


def cmd_synth_data(args) -> int:
    cfg = _load_config(args.config).get("data", {})
    scene_cfg = dict(cfg.get("scene", {}))
    scene_cfg.update(_overrides(args, _SCENE_FIELDS))
    base = SceneSpec.from_dict(scene_cfg)
    n = args.scenes if args.scenes is not None else cfg.get("scenes", 40)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    ratios = args.ratios if args.ratios is not None else cfg.get("ratios", [0.6, 0.2, 0.2])
    root = args.root or cfg.get("root", "data")
    manifest = build_dataset(root, n, tuple(ratios), seed, base)
    print(json.dumps(manifest.counts))
    return 0


def _train_spec(args) -> H.TrainSpec:
    full = _load_config(args.config)
    cfg = dict(full.get("train", {}))
    if "dataset_root" not in cfg and "root" in full.get("data", {}):
        cfg["dataset_root"] = full["data"]["root"]
    model_cfg = dict(cfg.pop("model", {}))
    model_cfg.update(_overrides(args, _MODEL_FIELDS))
    if args.model_seed is not None:
        model_cfg["seed"] = args.model_seed
    if args.model is not None:
        model_cfg["kind"] = args.model
    cfg.update(_overrides(args, _TRAIN_FIELDS))
    if args.root is not None:
        cfg["dataset_root"] = args.root
    cfg["model"] = ModelSpec.from_dict(model_cfg)
    return H.TrainSpec.from_dict(cfg).validate()


def cmd_train(args) -> int:
    spec = _train_spec(args)
    _, runlog = H.train(spec, progress=args.progress)
    print(json.dumps({"checkpoint": runlog.checkpoint, "best": runlog.best_checkpoint, "initial_loss": runlog.initial_loss,
                      "epochs": [asdict(r) for r in runlog.records]}, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    method = "bicubic" if args.method == "bicubic" else "checkpoint"
    ckpt = args.checkpoint
    if args.method not in ("bicubic", "checkpoint"):
        ckpt = args.method
    rep = H.evaluate(method, args.split, args.root, ckpt, name=args.name)
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    return 0


def cmd_report(args) -> int:
    reports = [mt.MetricReport.from_json(Path(p).read_text()) for p in args.reports]
    files = H.report(reports, args.out, dataset_root=args.root, primary=args.primary)
    sys.stdout.write(files["table_txt"].read_text())
    return 0


def cmd_export_rgb(args) -> int:
    patches = read_patches(args.patch)
    if not 0 <= args.record < len(patches):
        raise UsageError(f"{args.patch} holds {len(patches)} records")
    export_rgb(patches[args.record], args.out)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all(verbose=True) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bandbridge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate the synthetic paired dataset")
    s.add_argument("--config")
    s.add_argument("--root")
    s.add_argument("--scenes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--ratios", type=float, nargs=3)
    _add_fields(s, _SCENE_FIELDS, {"size": int, "blur_sigma": float, "lr_factor": int, "pan_factor": int, "noise_sigma": float, "hr_gsd": float})
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--root", help="dataset root")
    t.add_argument("--model", choices=["unet", "esrt_lite"])
    t.add_argument("--progress", action="store_true")
    _add_fields(t, _TRAIN_FIELDS, {"out_dir": str, "epochs": int, "batch_size": int, "micro_batch": int,
                                   "accumulation": int, "lr": float, "seed": int, "checkpoint_every": int})
    _add_fields(t, _MODEL_FIELDS, {n: int for n in _MODEL_FIELDS if n != "kind"})
    t.add_argument("--model-seed", type=int, help="weight-initialization seed (--seed drives shuffling)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a method on a dataset split")
    e.add_argument("--root", default="data")
    e.add_argument("--method", default="bicubic", help="'bicubic', 'checkpoint' or a checkpoint path")
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--name")
    e.add_argument("--out")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="tables, box-plot data and RGB gallery")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--root", help="dataset root (enables the RGB gallery)")
    r.add_argument("--primary")
    r.set_defaults(func=cmd_report)

    x = sub.add_parser("export-rgb", help="write an RGB composite PNG of a BBP1 record")
    x.add_argument("patch")
    x.add_argument("--out", required=True)
    x.add_argument("--record", type=int, default=0)
    x.set_defaults(func=cmd_export_rgb)

    st = sub.add_parser("selftest", help="run the built-in oracle checks")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, H.TrainSpecError, ModelSpecError, SceneSpecError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
