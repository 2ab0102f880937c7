"""Training loop, evaluation runner and report generation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import metrics as mt
from . import rng
from .models import ModelSpec, ParameterSet, build, forward, load_checkpoint, save_checkpoint
from .raster import REFLECTANCE_MAX, TARGET_BANDS, RasterPatch, export_rgb
from .synthpipe import load_manifest, load_pair, load_split

log = logging.getLogger(__name__)


class TrainSpecError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def worker_threads() -> int:
    """Worker cap from BANDBRIDGE_THREADS; 0 (the default) means sequential."""
    try:
        return max(0, int(os.environ.get("BANDBRIDGE_THREADS", "0")))
    except ValueError:
        return 0


@dataclass
class TrainSpec:
    model: ModelSpec = field(default_factory=ModelSpec)
    dataset_root: str = "data"
    out_dir: str = "runs/default"
    epochs: int = 50
    batch_size: int = 20
    micro_batch: int = 5
    accumulation: int = 4
    lr: float = 1e-5
    seed: int = 0
    checkpoint_every: int = 1

    def validate(self) -> "TrainSpec":
        if self.epochs < 1:
            raise TrainSpecError(f"epochs must be >= 1, got {self.epochs}")
        if self.micro_batch < 1 or self.accumulation < 1:
            raise TrainSpecError("micro_batch and accumulation must be >= 1")
        if self.micro_batch * self.accumulation != self.batch_size:
            raise TrainSpecError(
                f"micro_batch ({self.micro_batch}) x accumulation ({self.accumulation}) != batch_size ({self.batch_size})"
            )
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise TrainSpecError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.checkpoint_every < 1:
            raise TrainSpecError("checkpoint_every must be >= 1")
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise TrainSpecError(f"unknown TrainSpec fields {sorted(extra)}")
        if isinstance(d.get("model"), dict):
            d["model"] = ModelSpec.from_dict(d["model"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ssim: float
    val_nrmse: float
    wall_time: float


@dataclass
class RunLog:
    initial_loss: float = math.nan
    records: list[EpochRecord] = field(default_factory=list)
    checkpoint: str | None = None
    best_checkpoint: str | None = None

    def metrics_jsonl(self) -> str:
        """Per-epoch metrics without wall time (deterministic across runs)."""
        lines = [
            json.dumps({"epoch": r.epoch, "train_loss": r.train_loss, "val_ssim": r.val_ssim, "val_nrmse": r.val_nrmse}, sort_keys=True)
            for r in self.records
        ]
        return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# batching helpers


def stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.input.pixels for p in pairs]).astype(np.float32)
    y = np.stack([p.target.pixels for p in pairs]).astype(np.float32)
    return x, y


def predict(ps: ParameterSet | None, x: np.ndarray, batch: int = 5) -> np.ndarray:
    """Model output for an N x 7 x H x W array; ``ps=None`` is the bicubic passthrough."""
    if ps is None:
        return np.array(x[:, :6], copy=True)
    out = []
    for i in range(0, len(x), batch):
        xb = ag.Tensor(x[i : i + batch].astype(ps.dtype, copy=False))
        out.append(forward(ps, xb).data)
    return np.concatenate(out)


def accumulated_step(
    ps: ParameterSet,
    opt: ag.Adam,
    x: np.ndarray,
    y: np.ndarray,
    micro_batch: int,
) -> float:
    """One optimizer step over ``x`` split into equal micro-batches.

    Each micro-batch loss (a mean) is scaled by 1/accumulation, so the summed
    gradient equals the gradient of the full-batch mean loss. Returns the
    unscaled mean loss.
    """
    n = len(x)
    if n % micro_batch:
        raise TrainSpecError(f"batch of {n} does not split into micro-batches of {micro_batch}")
    steps = n // micro_batch
    opt.zero_grad()
    total = 0.0
    for i in range(steps):
        sl = slice(i * micro_batch, (i + 1) * micro_batch)
        pred = forward(ps, ag.Tensor(x[sl]))
        loss = ag.l1_loss(pred, ag.Tensor(y[sl]))
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError("non-finite loss")
        (loss * (1.0 / steps)).backward()
        total += value
    opt.step()
    return total / steps


def score_patches(ids: Sequence[str], pred: np.ndarray, truth: np.ndarray) -> list[mt.PatchRecord]:
    pred = np.clip(pred, 0.0, REFLECTANCE_MAX)

    def one(i: int) -> mt.PatchRecord:
        return mt.PatchRecord(ids[i], mt.ssim(pred[i], truth[i]), mt.nrmse(pred[i], truth[i]))

    threads = worker_threads()
    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(len(ids))))
    return [one(i) for i in range(len(ids))]


# ---------------------------------------------------------------------------
# training


def train(spec: TrainSpec, progress: bool = False) -> tuple[ParameterSet, RunLog]:
    spec.validate()
    root = Path(spec.dataset_root)
    try:
        manifest = load_manifest(root)
    except FileNotFoundError as exc:
        raise TrainingError(f"dataset missing: {exc}") from exc
    train_pairs = load_split(root, "train")
    val_pairs = load_split(root, "val")
    xt, yt = stack_pairs(train_pairs)
    xv, yv = stack_pairs(val_pairs)
    val_ids = [p.id for p in val_pairs]
    del train_pairs, val_pairs
    if len(xt) < spec.batch_size:
        raise TrainingError(f"train split has {len(xt)} patches, fewer than one batch of {spec.batch_size}")

    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")

    ps = build(spec.model, np.float32)
    opt = ag.Adam(ps.params(), lr=spec.lr)
    runlog = RunLog(initial_loss=float(np.abs(xt[:, :6] - yt).mean()))
    best = -math.inf
    steps = len(xt) // spec.batch_size
    metrics_path = out / "runlog.jsonl"
    metrics_path.write_text("")
    log.info("training %s: %d patches, %d steps/epoch, manifest seed %d", spec.model.kind, len(xt), steps, manifest.seed)

    for epoch in range(1, spec.epochs + 1):
        t0 = time.perf_counter()
        order = rng.generator(spec.seed, rng.SHUFFLE, epoch).permutation(len(xt))
        losses = []
        for step in range(steps):
            idx = np.sort(order[step * spec.batch_size : (step + 1) * spec.batch_size])
            try:
                losses.append(accumulated_step(ps, opt, xt[idx], yt[idx], spec.micro_batch))
            except FloatingPointError as exc:
                raise TrainingError(f"NaN loss at epoch {epoch}, batch {step}") from exc
            if progress:
                print(f"\repoch {epoch} step {step + 1}/{steps} loss {losses[-1]:.5f}", end="", flush=True)
        if progress:
            print()
        recs = score_patches(val_ids, predict(ps, xv), yv)
        rec = EpochRecord(
            epoch,
            float(np.mean(losses)),
            float(np.mean([r.ssim for r in recs])),
            float(np.mean([r.nrmse for r in recs])),
            time.perf_counter() - t0,
        )
        runlog.records.append(rec)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps({k: v for k, v in asdict(rec).items() if k != "wall_time"}, sort_keys=True) + "\n")
        with (out / "timing.jsonl").open("a") as fh:
            fh.write(json.dumps({"epoch": epoch, "wall_time": rec.wall_time}) + "\n")
        log.info("epoch %d loss %.5f val ssim %.4f nrmse %.4f (%.0fs)", epoch, rec.train_loss, rec.val_ssim, rec.val_nrmse, rec.wall_time)
        if epoch % spec.checkpoint_every == 0:
            save_checkpoint(ps, out / f"epoch_{epoch:03d}.bbc", epoch)
        if rec.val_ssim > best:
            best = rec.val_ssim
            save_checkpoint(ps, out / "best.bbc", epoch)
            runlog.best_checkpoint = str(out / "best.bbc")
    save_checkpoint(ps, out / "last.bbc", spec.epochs)
    runlog.checkpoint = str(out / "last.bbc")
    return ps, runlog


# ---------------------------------------------------------------------------
# evaluation


def evaluate(method: str, split: str, dataset_root, checkpoint=None, name: str | None = None) -> mt.MetricReport:
    """Score ``method`` ('bicubic' or 'checkpoint') on every patch of ``split``."""
    if method not in ("bicubic", "checkpoint"):
        raise ValueError(f"unknown method {method!r}")
    manifest = load_manifest(dataset_root)
    if split not in manifest.patch_ids:
        raise FileNotFoundError(f"split {split!r} not in dataset {dataset_root}")
    ps = None
    source = "bicubic"
    if method == "checkpoint":
        if checkpoint is None or not Path(checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        ps, _ = load_checkpoint(checkpoint)
        source = str(checkpoint)
    label = name or ("bicubic" if ps is None else ps.spec.kind)
    records = []
    ids = manifest.patch_ids[split]
    chunk = 20
    for i in range(0, len(ids), chunk):
        pairs = [load_pair(dataset_root, split, pid) for pid in ids[i : i + chunk]]
        x, y = stack_pairs(pairs)
        records.extend(score_patches([p.id for p in pairs], predict(ps, x), y))
    return mt.aggregate(records, method=label, source=source, split=split)


# ---------------------------------------------------------------------------
# reporting

GALLERY_QUANTILES = (5, 25, 50, 75, 95)


def gallery_picks(report: mt.MetricReport, quantiles: Sequence[float] = GALLERY_QUANTILES) -> dict[float, str]:
    """Patch whose NRMSE is nearest each quantile of the report's NRMSE (ties -> lowest id)."""
    recs = sorted(report.records, key=lambda r: r.patch_id)
    vals = np.array([r.nrmse for r in recs])
    picks = {}
    for q in quantiles:
        target = float(np.percentile(vals, q))
        dist = np.abs(vals - target)
        picks[q] = recs[int(np.argmin(dist))].patch_id
    return picks


def whiskers(values: Sequence[float]) -> tuple[float, float, int]:
    """Tukey whiskers (1.5 IQR, clipped to data) and the outlier count."""
    v = np.asarray(values, dtype=np.float64)
    q1, q3 = np.percentile(v, [25, 75])
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    return float(inside.min()), float(inside.max()), int(v.size - inside.size)


def table_text(reports: Sequence[mt.MetricReport]) -> str:
    rows = sorted(reports, key=lambda r: -r.aggregates["ssim"]["mean"])
    lines = [f"{'Method':<12}| {'SSIM':^19} | {'NRMSE':^19}", "-" * 56]
    for r in rows:
        s, n = r.aggregates["ssim"], r.aggregates["nrmse"]
        lines.append(f"{r.method:<12}| {s['mean']:.4f} +- {s['std']:.4f} | {n['mean']:.4f} +- {n['std']:.4f}")
    return "\n".join(lines) + "\n"


def _load_gallery_model(source: str | None):
    if source in (None, "bicubic"):
        return None
    ps, _ = load_checkpoint(source)
    return ps


def report(
    reports: Sequence[mt.MetricReport],
    out_dir,
    dataset_root=None,
    primary: str | None = None,
) -> dict[str, Path]:
    """Write the summary table, box-plot data, per-patch CSV and (given a dataset) an RGB gallery."""
    if not reports:
        raise ValueError("report needs at least one MetricReport")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, Path] = {}
    ordered = sorted(reports, key=lambda r: -r.aggregates["ssim"]["mean"])

    files["table_txt"] = out / "table.txt"
    files["table_txt"].write_text(table_text(reports))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "ssim_mean", "ssim_std", "nrmse_mean", "nrmse_std", "n"])
    for r in ordered:
        s, n = r.aggregates["ssim"], r.aggregates["nrmse"]
        w.writerow([r.method, repr(s["mean"]), repr(s["std"]), repr(n["mean"]), repr(n["std"]), len(r.records)])
    files["table_csv"] = out / "table.csv"
    files["table_csv"].write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "metric", "min", "q1", "median", "q3", "max", "whisker_low", "whisker_high", "outliers"])
    for r in ordered:
        for metric in ("ssim", "nrmse"):
            a = r.aggregates[metric]
            lo, hi, n_out = whiskers(r.metric_values(metric))
            w.writerow([r.method, metric] + [repr(a[k]) for k in ("min", "q1", "median", "q3", "max")] + [repr(lo), repr(hi), n_out])
    files["boxplot_csv"] = out / "boxplot.csv"
    files["boxplot_csv"].write_text(buf.getvalue())

    files["records_csv"] = out / "records.csv"
    files["records_csv"].write_text("".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(ordered)))

    main = next((r for r in reports if r.method == primary), None) if primary else None
    if main is None:
        main = ordered[0]
    picks = gallery_picks(main)
    gallery = {"method": main.method, "picks": {str(q): pid for q, pid in picks.items()}}
    if dataset_root is not None and main.split is not None:
        gdir = out / "gallery"
        gdir.mkdir(exist_ok=True)
        ps = _load_gallery_model(main.source)
        for q, pid in picks.items():
            pair = load_pair(dataset_root, main.split, pid)
            pred = np.clip(predict(ps, pair.input.pixels[None].astype(np.float32))[0], 0.0, REFLECTANCE_MAX)
            stem = f"q{int(q):02d}_{pid}"
            export_rgb(pair.input.select(TARGET_BANDS), gdir / f"{stem}_input.png")
            export_rgb(RasterPatch(TARGET_BANDS, pred, pair.target.gsd_m, pair.target.origin), gdir / f"{stem}_prediction.png")
            export_rgb(pair.target, gdir / f"{stem}_target.png")
    files["gallery_json"] = out / "gallery.json"
    files["gallery_json"].write_text(json.dumps(gallery, indent=2, sort_keys=True) + "\n")
    return files


def read_records_csv(path) -> dict[str, list[mt.PatchRecord]]:
    by_method: dict[str, list[mt.PatchRecord]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            by_method.setdefault(row["method"], []).append(mt.PatchRecord(row["patch_id"], float(row["ssim"]), float(row["nrmse"])))
    return by_method
