"""Per-patch NRMSE / SSIM and distribution summaries of them."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .raster import RasterPatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0

STATS = ("mean", "std", "min", "q1", "median", "q3", "max")


class MetricError(ValueError):
    pass


def _pixels(x) -> np.ndarray:
    arr = x.pixels if isinstance(x, RasterPatch) else x
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, RasterPatch) and isinstance(truth, RasterPatch) and pred.bands != truth.bands:
        raise MetricError(f"band mismatch: {pred.bands} vs {truth.bands}")
    p, t = _pixels(pred), _pixels(truth)
    if p.shape != t.shape:
        raise MetricError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def nrmse(pred, truth) -> float:
    """Root mean squared error over all bands and pixels, divided by the truth's value range."""
    p, t = _pair(pred, truth)
    span = float(t.max() - t.min())
    if span == 0.0:
        raise MetricError("truth is constant; NRMSE range normalizer is zero")
    return math.sqrt(float(np.mean((p - t) ** 2))) / span


def gaussian_kernel1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of the last two axes with kernel g."""
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim_map(pred, truth, data_range: float = DATA_RANGE) -> np.ndarray:
    """Per-band SSIM over every valid window position: C x (H-10) x (W-10)."""
    p, t = _pair(pred, truth)
    if p.shape[-1] < SSIM_WINDOW or p.shape[-2] < SSIM_WINDOW:
        raise MetricError(f"image {p.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_kernel1d()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx = _filter_valid(p, g)
    my = _filter_valid(t, g)
    vx = _filter_valid(p * p, g) - mx * mx
    vy = _filter_valid(t * t, g) - my * my
    cxy = _filter_valid(p * t, g) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(pred, truth, data_range: float = DATA_RANGE) -> float:
    """Mean over bands of each band's mean SSIM over valid window positions."""
    return float(ssim_map(pred, truth, data_range).mean(axis=(-2, -1)).mean())


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    ssim: float
    nrmse: float


def summarize(values: Sequence[float]) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise MetricError("cannot summarize zero values")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {
        "mean": float(v.mean()),
        "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "min": float(v.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v.max()),
    }


@dataclass
class MetricReport:
    method: str
    records: list[PatchRecord]
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)
    source: str | None = None
    split: str | None = None

    def to_json(self) -> str:
        doc = {
            "method": self.method,
            "source": self.source,
            "split": self.split,
            "count": len(self.records),
            "aggregates": self.aggregates,
            "records": [{"id": r.patch_id, "ssim": r.ssim, "nrmse": r.nrmse} for r in self.records],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        recs = [PatchRecord(r["id"], float(r["ssim"]), float(r["nrmse"])) for r in doc["records"]]
        return cls(doc["method"], recs, doc["aggregates"], doc.get("source"), doc.get("split"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "patch_id", "ssim", "nrmse"])
        for r in self.records:
            w.writerow([self.method, r.patch_id, repr(r.ssim), repr(r.nrmse)])
        return buf.getvalue()

    def metric_values(self, metric: str) -> list[float]:
        return [getattr(r, metric) for r in self.records]


def aggregate(records: Iterable[PatchRecord], method: str = "", **kw) -> MetricReport:
    """Bundle records (sorted by patch id) with per-metric summary statistics."""
    recs = sorted(records, key=lambda r: r.patch_id)
    if not recs:
        raise MetricError("aggregate needs at least one record")
    for r in recs:
        if not (-1.0 <= r.ssim <= 1.0) or r.nrmse < 0 or not math.isfinite(r.nrmse):
            raise MetricError(f"record {r.patch_id} out of range: ssim={r.ssim}, nrmse={r.nrmse}")
    aggs = {m: summarize([getattr(r, m) for r in recs]) for m in ("ssim", "nrmse")}
    return MetricReport(method, recs, aggs, **kw)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["method", "count", "aggregates", "records"],
    "properties": {
        "method": {"type": "string"},
        "source": {"type": ["string", "null"]},
        "split": {"type": ["string", "null"]},
        "count": {"type": "integer", "minimum": 1},
        "aggregates": {
            "type": "object",
            "required": ["ssim", "nrmse"],
            "additionalProperties": {
                "type": "object",
                "required": list(STATS),
                "properties": {k: {"type": "number"} for k in STATS},
            },
        },
        "records": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "ssim", "nrmse"],
                "properties": {
                    "id": {"type": "string"},
                    "ssim": {"type": "number", "minimum": -1, "maximum": 1},
                    "nrmse": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}
