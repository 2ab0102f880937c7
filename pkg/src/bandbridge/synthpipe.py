"""Synthetic paired scenes, misregistration correction, tiling and splits.

A scene is a procedural 6-band high-resolution field. The low-resolution
"other sensor" view mixes the bands linearly, blurs, block-averages,
adds noise and is offset by an integer number of LR pixels; a
panchromatic band is derived from the visible/NIR bands at an
intermediate resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng
from .raster import (
    INPUT_BANDS,
    REFLECTANCE_MAX,
    TARGET_BANDS,
    Band,
    RasterPatch,
    area_mean,
    bicubic_upsample,
    read_patches,
    write_patches,
)

PATCH = 128
HR_GSD = 10.0
SPLITS = ("train", "val", "test")
MAX_SHIFT = 3

# Row-stochastic band mixing between the two sensors (B, G, R, NIR, SWIR1, SWIR2).
DEFAULT_MIXING = (
    (0.82, 0.14, 0.04, 0.00, 0.00, 0.00),
    (0.08, 0.80, 0.12, 0.00, 0.00, 0.00),
    (0.00, 0.10, 0.84, 0.06, 0.00, 0.00),
    (0.00, 0.00, 0.12, 0.78, 0.10, 0.00),
    (0.00, 0.00, 0.00, 0.12, 0.80, 0.08),
    (0.00, 0.00, 0.00, 0.02, 0.16, 0.82),
)
DEFAULT_PAN_WEIGHTS = (0.2, 0.3, 0.3, 0.2)

# Land-cover reflectance signatures over the six bands.
SIGNATURES = np.array(
    [
        [0.05, 0.06, 0.04, 0.02, 0.01, 0.01],  # water
        [0.03, 0.07, 0.04, 0.45, 0.22, 0.10],  # forest
        [0.10, 0.14, 0.18, 0.26, 0.32, 0.26],  # bare soil
        [0.14, 0.15, 0.16, 0.22, 0.24, 0.21],  # built-up
        [0.25, 0.30, 0.35, 0.40, 0.45, 0.38],  # sand
        [0.04, 0.09, 0.06, 0.35, 0.20, 0.09],  # cropland
    ]
)


class SceneSpecError(ValueError):
    pass


class RegistrationError(RuntimeError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: int = 512
    mixing: tuple = DEFAULT_MIXING
    blur_sigma: float = 1.0
    lr_factor: int = 4
    pan_factor: int = 2
    pan_weights: tuple = DEFAULT_PAN_WEIGHTS
    noise_sigma: float = 0.005
    shift: tuple = (0, 0)
    hr_gsd: float = HR_GSD

    def validate(self) -> "SceneSpec":
        problems = []
        if self.size <= 0 or self.size % PATCH:
            problems.append(f"size {self.size} not a positive multiple of {PATCH}")
        for name in ("lr_factor", "pan_factor"):
            f = getattr(self, name)
            if f < 1 or self.size % f:
                problems.append(f"{name}={f} does not divide size {self.size}")
        m = np.asarray(self.mixing, dtype=np.float64)
        if m.shape != (6, 6):
            problems.append(f"mixing must be 6x6, got {m.shape}")
        elif m.min() < -0.2 or m.max() > 1.2:
            problems.append("mixing entries must lie in [-0.2, 1.2]")
        w = np.asarray(self.pan_weights, dtype=np.float64)
        if w.shape != (4,) or w.min() < 0 or abs(w.sum() - 1.0) > 1e-9:
            problems.append("pan_weights must be 4 nonnegative values summing to 1")
        if not 0.0 <= self.noise_sigma <= 0.05:
            problems.append(f"noise_sigma {self.noise_sigma} outside [0, 0.05]")
        if self.blur_sigma < 0:
            problems.append("blur_sigma must be >= 0")
        if len(self.shift) != 2 or any(abs(int(s)) > MAX_SHIFT or int(s) != s for s in self.shift):
            problems.append(f"shift {self.shift} must be integers within +-{MAX_SHIFT}")
        if problems:
            raise SceneSpecError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixing"] = [list(r) for r in self.mixing]
        d["pan_weights"] = list(self.pan_weights)
        d["shift"] = list(self.shift)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "mixing" in d:
            d["mixing"] = tuple(tuple(float(v) for v in r) for r in d["mixing"])
        for k in ("pan_weights", "shift"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# image helpers


def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of the last two axes with clamped edges."""
    if sigma <= 0:
        return np.asarray(arr, dtype=np.float64).copy()
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-(x**2) / (2 * sigma**2))
    k /= k.sum()
    pad = [(0, 0)] * (arr.ndim - 2) + [(radius, radius), (radius, radius)]
    a = np.pad(np.asarray(arr, dtype=np.float64), pad, mode="edge")
    a = np.lib.stride_tricks.sliding_window_view(a, k.size, axis=-2) @ k
    return np.lib.stride_tricks.sliding_window_view(a, k.size, axis=-1) @ k


def shift_image(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Move content by (dx, dy) pixels (right, down); vacated edges replicate the border."""
    h, w = arr.shape[-2:]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return arr[..., rows[:, None], cols[None, :]]


def _smooth_field(gen: np.random.Generator, size: int, scale: float) -> np.ndarray:
    """Unit-variance Gaussian random field with correlation length ~scale pixels."""
    noise = gen.standard_normal((size, size))
    f = np.fft.fftfreq(size)
    fy, fx = np.meshgrid(f, f, indexing="ij")
    filt = np.exp(-0.5 * (fx**2 + fy**2) * (2 * np.pi * scale) ** 2)
    field_ = np.real(np.fft.ifft2(np.fft.fft2(noise) * filt))
    return (field_ - field_.mean()) / (field_.std() + 1e-12)


def hr_field(seed: int, size: int) -> np.ndarray:
    """Procedural 6 x size x size reflectance field in [0, 1.2]."""
    gen = rng.generator(seed, rng.SCENE)
    n_sites = int(gen.integers(24, 48))
    sites = gen.uniform(0, size, size=(n_sites, 2))
    classes = gen.integers(0, len(SIGNATURES), size=n_sites)
    gains = gen.uniform(0.75, 1.25, size=n_sites)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # warp coordinates so cell boundaries are irregular polygons-ish curves
    warp = 6.0 * _smooth_field(gen, size, 24.0)
    d2 = (yy[None] + warp - sites[:, 0, None, None]) ** 2 + (xx[None] - warp - sites[:, 1, None, None]) ** 2
    cell = np.argmin(d2, axis=0)
    hr = SIGNATURES[classes[cell]].transpose(2, 0, 1) * gains[cell][None]
    shared = _smooth_field(gen, size, 16.0)
    texture = _smooth_field(gen, size, 2.0)
    for b in range(6):
        own = _smooth_field(gen, size, 8.0)
        hr[b] *= 1.0 + 0.15 * shared + 0.05 * own
        hr[b] += 0.02 * texture
    speckle = gen.random((size, size)) < 0.002
    hr[:, speckle] += gen.uniform(0.1, 0.3, size=(6, int(speckle.sum())))
    return np.clip(hr, 0.0, 1.2)


# ---------------------------------------------------------------------------
# scene synthesis and co-registration


def synth_scene(spec: SceneSpec, hr: np.ndarray | None = None) -> tuple[RasterPatch, RasterPatch, RasterPatch]:
    """(HR 6-band, LR 6-band, pan) rasters for one scene.

    ``hr`` overrides the procedural field, mainly for tests.
    """
    spec.validate()
    s = spec.size
    if hr is None:
        hr = hr_field(spec.seed, s)
    hr = np.asarray(hr, dtype=np.float64)
    if hr.shape != (6, s, s):
        raise SceneSpecError(f"hr field must be 6 x {s} x {s}")
    m = np.asarray(spec.mixing, dtype=np.float64)
    mixed = np.tensordot(m, hr, axes=(1, 0))
    lr = area_mean(gaussian_blur(mixed, spec.blur_sigma), spec.lr_factor)
    if spec.noise_sigma > 0:
        lr = lr + rng.generator(spec.seed, rng.SCENE, 1).normal(0.0, spec.noise_sigma, size=lr.shape)
    lr = shift_image(np.clip(lr, 0.0, REFLECTANCE_MAX), int(spec.shift[0]), int(spec.shift[1]))
    w = np.asarray(spec.pan_weights, dtype=np.float64)
    pan = area_mean(np.tensordot(w, hr[:4], axes=(0, 0)), spec.pan_factor)[None]
    g = spec.hr_gsd
    return (
        RasterPatch(TARGET_BANDS, hr.astype(np.float32), g),
        RasterPatch(TARGET_BANDS, lr.astype(np.float32), g * spec.lr_factor),
        RasterPatch((Band.PAN,), np.clip(pan, 0.0, REFLECTANCE_MAX).astype(np.float32), g * spec.pan_factor),
    )


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0.0:
        return math.nan
    return float((a * b).sum()) / den


def coregister(lr: RasterPatch, reference: RasterPatch, search: int = MAX_SHIFT) -> tuple[RasterPatch, tuple[int, int]]:
    """Find the integer LR-pixel offset of ``lr`` relative to ``reference``.

    The green band of ``lr`` is compared with the block-averaged green band
    of ``reference`` over the interior (``search`` pixels in from every edge)
    for each candidate offset; the offset with the highest normalized
    cross-correlation wins. Returns the offset-compensated raster and
    (dx, dy) such that ``lr`` ~ reference moved by (dx, dy).
    """
    ratio = lr.gsd_m / reference.gsd_m
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-6:
        raise RegistrationError(f"reference GSD {reference.gsd_m} is not an integer fraction of {lr.gsd_m}")
    ref = area_mean(reference.band(Band.GREEN), factor)
    moving = np.asarray(lr.band(Band.GREEN), dtype=np.float64)
    if ref.shape != moving.shape:
        raise RegistrationError(f"extents differ: {moving.shape} vs {ref.shape}")
    h, w = moving.shape
    m = search
    if h <= 2 * m + 1 or w <= 2 * m + 1:
        raise RegistrationError("raster too small for the search window")
    inner = moving[m : h - m, m : w - m]
    scored = []
    for dy in range(-search, search + 1):
        for dx in range(-search, search + 1):
            cand = ref[m - dy : h - m - dy, m - dx : w - m - dx]
            score = _ncc(inner, cand)
            if not math.isnan(score):
                scored.append((-score, abs(dx) + abs(dy), dx, dy))
    if not scored:
        raise RegistrationError("correlation surface is degenerate (constant input)")
    scored.sort()
    _, _, dx, dy = scored[0]
    corrected = shift_image(lr.pixels, -dx, -dy)
    return RasterPatch(lr.bands, corrected, lr.gsd_m, lr.origin), (dx, dy)


# ---------------------------------------------------------------------------
# tiling and splits


@dataclass
class PatchPair:
    id: str
    input: RasterPatch
    target: RasterPatch
    scene: int
    origin: tuple[float, float]
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise SplitError(f"unknown split {self.split!r}")
        if self.input.bands != INPUT_BANDS or self.target.bands != TARGET_BANDS:
            raise SplitError(f"{self.id}: unexpected band layout")
        if self.input.hw != (PATCH, PATCH) or self.target.hw != (PATCH, PATCH):
            raise SplitError(f"{self.id}: patches must be {PATCH}x{PATCH}")


@dataclass
class SplitManifest:
    seed: int
    scene_size: int
    scenes: dict[str, list[int]]
    hr_gsd: float = HR_GSD
    patch_ids: dict[str, list[str]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def split_of(self, scene: int) -> str:
        for name, ids in self.scenes.items():
            if scene in ids:
                return name
        raise SplitError(f"scene {scene} is not assigned to any split")

    def scene_region(self, scene: int) -> tuple[float, float, float, float]:
        """Scene footprint (x0, y0, x1, y1) in meters; scenes sit side by side along x."""
        extent = self.scene_size * self.hr_gsd
        return (scene * extent, 0.0, (scene + 1) * extent, extent)

    def regions(self) -> dict[str, list[tuple[float, float, float, float]]]:
        return {name: [self.scene_region(s) for s in ids] for name, ids in self.scenes.items()}

    @property
    def counts(self) -> dict[str, int]:
        return {name: len(self.patch_ids.get(name, [])) for name in SPLITS}

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "scene_size": self.scene_size,
            "hr_gsd": self.hr_gsd,
            "scenes": self.scenes,
            "regions": {k: [list(r) for r in v] for k, v in self.regions().items()},
            "patch_ids": self.patch_ids,
            "counts": self.counts,
            "config": self.config,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(d["seed"], d["scene_size"], {k: list(v) for k, v in d["scenes"].items()}, d["hr_gsd"], d["patch_ids"], d.get("config", {}))


def assign_splits(n_scenes: int, ratios: Sequence[float], seed: int) -> dict[str, list[int]]:
    """Scene-level split assignment; whole scenes go to exactly one split."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios {ratios} must be three nonnegative values summing to 1")
    n_train = int(round(ratios[0] * n_scenes))
    n_val = int(round(ratios[1] * n_scenes))
    n_test = n_scenes - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise SplitError(f"{n_scenes} scenes cannot populate all splits at ratios {tuple(ratios)}")
    order = rng.generator(seed, rng.SPLIT).permutation(n_scenes)
    cuts = {"train": order[:n_train], "val": order[n_train : n_train + n_val], "test": order[n_train + n_val :]}
    return {k: sorted(int(s) for s in v) for k, v in cuts.items()}


def check_disjoint(manifest: SplitManifest) -> None:
    """Raise SplitError if any two splits share a scene, a patch id, or overlapping ground area."""
    names = list(manifest.scenes)
    regions = manifest.regions()
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            if set(manifest.scenes[a]) & set(manifest.scenes[b]):
                raise SplitError(f"splits {a} and {b} share scenes")
            if set(manifest.patch_ids.get(a, [])) & set(manifest.patch_ids.get(b, [])):
                raise SplitError(f"splits {a} and {b} share patch ids")
            for ra in regions[a]:
                for rb in regions[b]:
                    if ra[0] < rb[2] and rb[0] < ra[2] and ra[1] < rb[3] and rb[1] < ra[3]:
                        raise SplitError(f"regions {ra} ({a}) and {rb} ({b}) overlap")


def patch_id(scene: int, tile: int) -> str:
    return f"s{scene:04d}_t{tile:03d}"


def make_patch_pairs(
    scene: int,
    hr: RasterPatch,
    lr: RasterPatch,
    pan: RasterPatch,
    manifest: SplitManifest,
) -> list[PatchPair]:
    """Cut co-registered scene rasters into aligned 128 x 128 input/target pairs."""
    size = hr.hw[0]
    if hr.hw != (size, size) or size % PATCH:
        raise SplitError(f"scene {hr.hw} does not tile into {PATCH}x{PATCH} patches")
    lr_f = int(round(lr.gsd_m / hr.gsd_m))
    pan_f = int(round(pan.gsd_m / hr.gsd_m))
    if lr.hw != (size // lr_f, size // lr_f) or pan.hw != (size // pan_f, size // pan_f):
        raise SplitError("LR/pan extents are not aligned with the HR scene")
    if PATCH % lr_f or PATCH % pan_f:
        raise SplitError("patch size must be divisible by the resolution factors")
    split = manifest.split_of(scene)
    n = size // PATCH
    pairs = []
    for r in range(n):
        for c in range(n):
            tile = r * n + c
            origin = (c * PATCH * hr.gsd_m, r * PATCH * hr.gsd_m)
            ls, ps_ = PATCH // lr_f, PATCH // pan_f
            lr_tile = RasterPatch(lr.bands, lr.pixels[:, r * ls : (r + 1) * ls, c * ls : (c + 1) * ls], lr.gsd_m, origin)
            pan_tile = RasterPatch(pan.bands, pan.pixels[:, r * ps_ : (r + 1) * ps_, c * ps_ : (c + 1) * ps_], pan.gsd_m, origin)
            up = bicubic_upsample(lr_tile, (PATCH, PATCH))
            pan_up = bicubic_upsample(pan_tile, (PATCH, PATCH))
            stack = np.concatenate([up.pixels, pan_up.pixels]).astype(np.float32)
            target = hr.pixels[:, r * PATCH : (r + 1) * PATCH, c * PATCH : (c + 1) * PATCH].astype(np.float32)
            pairs.append(
                PatchPair(
                    patch_id(scene, tile),
                    RasterPatch(INPUT_BANDS, stack, hr.gsd_m, origin),
                    RasterPatch(TARGET_BANDS, target, hr.gsd_m, origin),
                    scene,
                    origin,
                    split,
                )
            )
    return pairs


def scene_spec_for(seed: int, scene: int, base: SceneSpec) -> SceneSpec:
    """Per-scene spec: sensor settings from ``base``, content seed and offset from the root seed."""
    content_seed = int(rng.generator(seed, rng.SCENE, scene).integers(0, 2**63 - 1))
    dx, dy = (int(v) for v in rng.generator(seed, rng.SHIFT, scene).integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2))
    return SceneSpec(**{**asdict(base), "seed": content_seed, "shift": (dx, dy)})


def scene_pairs(seed: int, scene: int, base: SceneSpec, manifest: SplitManifest) -> tuple[list[PatchPair], tuple[int, int], tuple[int, int]]:
    """Synthesize, co-register and tile one scene; returns (pairs, true shift, recovered shift)."""
    spec = scene_spec_for(seed, scene, base)
    hr, lr, pan = synth_scene(spec)
    corrected, found = coregister(lr, hr)
    return make_patch_pairs(scene, hr, corrected, pan, manifest), tuple(spec.shift), found


def build_dataset(
    root,
    n_scenes: int = 40,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    base: SceneSpec | None = None,
) -> SplitManifest:
    """Write ``<root>/<split>/<scene>_<tile>.bbp`` pair files and ``manifest.json``.

    Each .bbp file holds two BBP1 records: the 7-band input then the 6-band target.
    """
    base = (base or SceneSpec()).validate()
    root = Path(root)
    manifest = SplitManifest(
        seed=int(seed),
        scene_size=base.size,
        scenes=assign_splits(n_scenes, ratios, seed),
        hr_gsd=base.hr_gsd,
        config={"n_scenes": n_scenes, "ratios": list(ratios), "scene": base.to_dict()},
    )
    ids: dict[str, list[str]] = {s: [] for s in SPLITS}
    registration = []
    for s in SPLITS:
        (root / s).mkdir(parents=True, exist_ok=True)
    for scene in range(n_scenes):
        pairs, true_shift, found = scene_pairs(seed, scene, base, manifest)
        registration.append({"scene": scene, "true": list(true_shift), "found": list(found)})
        for p in pairs:
            write_patches([p.input, p.target], root / p.split / f"{p.id}.bbp")
            ids[p.split].append(p.id)
    manifest.patch_ids = {k: sorted(v) for k, v in ids.items()}
    manifest.config["registration"] = registration
    check_disjoint(manifest)
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_manifest(root) -> SplitManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return SplitManifest.from_json(path.read_text())


def load_pair(root, split: str, pid: str) -> PatchPair:
    inp, tgt = read_patches(Path(root) / split / f"{pid}.bbp")
    scene = int(pid[1:5])
    return PatchPair(pid, inp, tgt, scene, inp.origin, split)


def load_split(root, split: str) -> list[PatchPair]:
    manifest = load_manifest(root)
    if split not in manifest.patch_ids:
        raise SplitError(f"dataset has no split {split!r}")
    return [load_pair(root, split, pid) for pid in manifest.patch_ids[split]]
