"""Synthetic registration pairs for the clean, unseen-category, noisy and partial regimes."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import BadCount, BadFraction, BadRange, EmptyCloud, IoFailure, ParseError
from .geom3d import (
    Cloud,
    RigidTransform,
    apply,
    as_cloud,
    load_transforms,
    random_transform,
    save_transforms,
    transform_to_vec7,
    vec7_to_transform,
)

logger = logging.getLogger(__name__)

SHAPE_KINDS: tuple[str, ...] = ("sphere", "cube_surface", "torus", "gaussian_blob", "composite")
DEFAULT_KINDS: tuple[str, ...] = ("cube_surface", "gaussian_blob", "composite")
UNSEEN_SPLITS: dict[str, tuple[str, ...]] = {
    "train": ("composite", "torus"),
    "test": ("gaussian_blob", "cube_surface"),
}
REGIMES: tuple[str, ...] = ("clean", "unseen-cat", "noise", "partial")
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
MANIFEST_ENTRY_KEYS = ("id", "kind", "index", "source", "template", "transform")
MIN_POINTS = 8


# ----------------------------------------------------------------------
# Shapes
# ----------------------------------------------------------------------
def _random_rotation(rng: np.random.Generator) -> NDArray[np.float64]:
    return vec7_to_transform(np.concatenate([rng.standard_normal(4), np.zeros(3)])).rotation_matrix


def _sphere(n: int, rng: np.random.Generator) -> Cloud:
    directions = rng.standard_normal((n, 3))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def _cube_surface(n: int, rng: np.random.Generator) -> Cloud:
    points = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = rng.integers(0, 3, size=n)
    side = rng.choice([-1.0, 1.0], size=n)
    points[np.arange(n), axis] = side
    return points * np.array([1.0, 0.8, 0.6])


def _torus(n: int, rng: np.random.Generator) -> Cloud:
    u = rng.uniform(0.0, 2.0 * math.pi, n)
    v = rng.uniform(0.0, 2.0 * math.pi, n)
    ring_y = rng.uniform(0.5, 0.8)
    tube_a, tube_b = rng.uniform(0.15, 0.35, size=2)
    ring = 1.0 + tube_a * np.cos(v)
    return np.stack([ring * np.cos(u), ring_y * ring * np.sin(u), tube_b * np.sin(v)], axis=1)


def _gaussian_blob(n: int, rng: np.random.Generator) -> Cloud:
    scales = np.sort(rng.uniform(0.2, 1.0, size=3))[::-1]
    return (rng.standard_normal((n, 3)) * scales) @ _random_rotation(rng).T


def _composite(n: int, rng: np.random.Generator) -> Cloud:
    sizes = [n // 3, n // 3, n - 2 * (n // 3)]
    parts = [
        0.5 * _sphere(sizes[0], rng) + np.array([-0.8, 0.0, 0.0]),
        0.4 * _cube_surface(sizes[1], rng) + np.array([0.6, 0.3, 0.0]),
        0.3 * _gaussian_blob(sizes[2], rng) + np.array([0.2, -0.6, 0.4]),
    ]
    return np.concatenate(parts, axis=0)


_GENERATORS = {
    "sphere": _sphere,
    "cube_surface": _cube_surface,
    "torus": _torus,
    "gaussian_blob": _gaussian_blob,
    "composite": _composite,
}


def raw_shape(kind: str, n: int, rng: np.random.Generator) -> Cloud:
    """Shape samples before centring and scaling."""
    if kind not in _GENERATORS:
        raise BadRange(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n < MIN_POINTS:
        raise BadCount(f"need at least {MIN_POINTS} points, got {n}")
    return _GENERATORS[kind](n, rng)


def normalize_unit_sphere(points: ArrayLike) -> Cloud:
    cloud = as_cloud(points)
    centred = cloud - cloud.mean(axis=0)
    radius = float(np.linalg.norm(centred, axis=1).max())
    if radius == 0.0:
        return centred
    return centred / radius


def sample_shape(kind: str, n: int, rng: np.random.Generator) -> Cloud:
    """``n`` points of a parametric shape, centred and scaled to max radius 1."""
    return normalize_unit_sphere(raw_shape(kind, n, rng))


# ----------------------------------------------------------------------
# Pairs
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class PairMeta:
    pair_id: str = "pair"
    kind: str = ""
    regime: str = "clean"
    seed: int = 0
    index: int = 0
    rot_max_deg: float = 45.0
    trans_max: float = 1.0
    sigma: float | None = None
    clip: float | None = None
    keep: float | None = None


@dataclass(frozen=True)
class RegPair:
    """Source P, template Q and the ground truth with Q = g_gt(P) before noise/cropping."""

    source: Cloud
    template: Cloud
    g_gt: RigidTransform
    meta: PairMeta = PairMeta()

    @property
    def target(self) -> NDArray[np.float64]:
        return transform_to_vec7(self.g_gt)


def make_pair(
    base: ArrayLike,
    rot_max_deg: float,
    trans_max: float,
    rng: np.random.Generator,
    *,
    meta: PairMeta | None = None,
) -> RegPair:
    source = as_cloud(base)
    g_gt = random_transform(rng, rot_max_deg, trans_max)
    pair_meta = meta or PairMeta(rot_max_deg=rot_max_deg, trans_max=trans_max)
    return RegPair(source=source, template=apply(g_gt, source), g_gt=g_gt, meta=pair_meta)


def add_gaussian_noise(
    cloud: ArrayLike, sigma: float = 0.01, clip: float = 0.05, *, rng: np.random.Generator
) -> Cloud:
    """Per-axis N(0, sigma^2) jitter clipped to [-clip, clip]."""
    if sigma <= 0.0 or clip <= 0.0:
        raise BadRange(f"sigma and clip must be positive, got {sigma}, {clip}")
    points = as_cloud(cloud)
    return points + np.clip(rng.normal(0.0, sigma, size=points.shape), -clip, clip)


def crop_count(n: int, keep: float) -> int:
    return math.ceil(round(keep * n, 9))


def partial_crop(cloud: ArrayLike, keep: float = 0.7, *, rng: np.random.Generator) -> Cloud:
    """Keep the ceil(keep * n) points furthest along a random direction, in original order."""
    if not 0.0 < keep <= 1.0:
        raise BadFraction(f"keep must lie in (0, 1], got {keep}")
    points = as_cloud(cloud)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    order = np.argsort(-(points @ direction), kind="stable")
    kept = np.sort(order[: crop_count(points.shape[0], keep)])
    return points[kept]


def kinds_for(regime: str, split: str = "train") -> tuple[str, ...]:
    if regime not in REGIMES:
        raise BadRange(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if regime == "unseen-cat":
        if split not in UNSEEN_SPLITS:
            raise BadRange(f"unknown split {split!r}; expected one of {sorted(UNSEEN_SPLITS)}")
        return UNSEEN_SPLITS[split]
    return DEFAULT_KINDS


@dataclass(frozen=True)
class DatasetSpec:
    regime: str = "clean"
    pairs: int = 100
    points: int = 128
    rot_max_deg: float = 45.0
    trans_max: float = 1.0
    seed: int = 0
    split: str = "train"
    sigma: float = 0.01
    clip: float = 0.05
    keep: float = 0.7

    def __post_init__(self) -> None:
        if self.pairs < 0:
            raise BadCount(f"pairs must be >= 0, got {self.pairs}")
        if not 0.0 < self.keep <= 1.0:
            raise BadFraction(f"keep must lie in (0, 1], got {self.keep}")
        kinds_for(self.regime, self.split)


def make_regime_pair(spec: DatasetSpec, index: int) -> RegPair:
    """Pair ``index`` of a dataset; depends only on (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    kinds = kinds_for(spec.regime, spec.split)
    kind = kinds[int(rng.integers(len(kinds)))]
    base = sample_shape(kind, spec.points, rng)
    meta = PairMeta(
        pair_id=f"pair_{index:05d}",
        kind=kind,
        regime=spec.regime,
        seed=spec.seed,
        index=index,
        rot_max_deg=spec.rot_max_deg,
        trans_max=spec.trans_max,
        sigma=spec.sigma if spec.regime == "noise" else None,
        clip=spec.clip if spec.regime == "noise" else None,
        keep=spec.keep if spec.regime == "partial" else None,
    )
    pair = make_pair(base, spec.rot_max_deg, spec.trans_max, rng, meta=meta)
    source, template = pair.source, pair.template
    if spec.regime == "noise":
        source = add_gaussian_noise(source, spec.sigma, spec.clip, rng=rng)
        template = add_gaussian_noise(template, spec.sigma, spec.clip, rng=rng)
    elif spec.regime == "partial":
        source = partial_crop(source, spec.keep, rng=rng)
        template = partial_crop(template, spec.keep, rng=rng)
    return RegPair(source=source, template=template, g_gt=pair.g_gt, meta=meta)


def generate_pairs(spec: DatasetSpec, *, jobs: int = 1) -> list[RegPair]:
    if jobs <= 1:
        return [make_regime_pair(spec, i) for i in range(spec.pairs)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda i: make_regime_pair(spec, i), range(spec.pairs)))


# ----------------------------------------------------------------------
# Files
# ----------------------------------------------------------------------
def save_xyz(cloud: ArrayLike, path: str | Path) -> None:
    points = np.asarray(cloud, dtype=np.float64)
    lines = "".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in points)
    try:
        Path(path).write_text(lines, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_xyz(path: str | Path) -> Cloud:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    rows: list[list[float]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 3:
            raise ParseError(str(path), line_no, f"expected 3 values, got {len(fields)}")
        try:
            rows.append([float(value) for value in fields])
        except ValueError as exc:
            raise ParseError(str(path), line_no, str(exc)) from exc
    if not rows:
        raise EmptyCloud(f"{path} contains no points")
    return np.array(rows, dtype=np.float64)


def write_dataset(
    out_dir: str | Path, spec: DatasetSpec, *, jobs: int = 1
) -> list[RegPair]:
    """Generate a dataset and write manifest.json plus per-pair cloud and transform files."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    pairs = generate_pairs(spec, jobs=jobs)
    entries = []
    for pair in pairs:
        pair_id = pair.meta.pair_id
        entry = {
            "id": pair_id,
            "kind": pair.meta.kind,
            "index": pair.meta.index,
            "source": f"{pair_id}_src.xyz",
            "template": f"{pair_id}_tpl.xyz",
            "transform": f"{pair_id}_gt.txt",
            "source_points": int(pair.source.shape[0]),
            "template_points": int(pair.template.shape[0]),
        }
        save_xyz(pair.source, out / entry["source"])
        save_xyz(pair.template, out / entry["template"])
        save_transforms(out / entry["transform"], [pair.g_gt])
        entries.append(entry)
    manifest = {"format_version": MANIFEST_VERSION, "spec": asdict(spec), "pairs": entries}
    try:
        (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest in {out}: {exc}") from exc
    logger.info("wrote %d %s pairs to %s", len(pairs), spec.regime, out)
    return pairs


def read_manifest(data_dir: str | Path) -> dict[str, object]:
    path = Path(data_dir) / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(str(path), exc.lineno, exc.msg) from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise IoFailure(f"{path}: unsupported manifest version {manifest.get('format_version')}")
    return dict(manifest)


def _parse_manifest(
    root: Path, manifest: dict[str, object]
) -> tuple[DatasetSpec, list[dict[str, Any]]]:
    path = str(root / MANIFEST_NAME)
    try:
        spec = DatasetSpec(**manifest["spec"])  # type: ignore[arg-type]
        entries = [dict(entry) for entry in manifest["pairs"]]  # type: ignore[attr-defined]
    except KeyError as exc:
        raise ParseError(path, 1, f"manifest is missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ParseError(path, 1, f"malformed manifest: {exc}") from exc
    for number, entry in enumerate(entries):
        missing = [key for key in MANIFEST_ENTRY_KEYS if key not in entry]
        if missing:
            raise ParseError(path, 1, f"pair entry {number} is missing {', '.join(missing)}")
    return spec, entries


def load_dataset(data_dir: str | Path) -> list[RegPair]:
    root = Path(data_dir)
    spec, entries = _parse_manifest(root, read_manifest(root))
    pairs: list[RegPair] = []
    for entry in entries:
        transforms = load_transforms(root / entry["transform"])
        if len(transforms) != 1:
            raise ParseError(str(root / entry["transform"]), 1, "expected exactly one transform")
        meta = PairMeta(
            pair_id=entry["id"],
            kind=entry["kind"],
            regime=spec.regime,
            seed=spec.seed,
            index=entry["index"],
            rot_max_deg=spec.rot_max_deg,
            trans_max=spec.trans_max,
            sigma=spec.sigma if spec.regime == "noise" else None,
            clip=spec.clip if spec.regime == "noise" else None,
            keep=spec.keep if spec.regime == "partial" else None,
        )
        pairs.append(
            RegPair(
                source=load_xyz(root / entry["source"]),
                template=load_xyz(root / entry["template"]),
                g_gt=transforms[0],
                meta=meta,
            )
        )
    return pairs


def split_pairs(pairs: Sequence[RegPair], fraction: float) -> tuple[list[RegPair], list[RegPair]]:
    """Deterministic tail split: the last ``fraction`` of pairs become the held-out part."""
    if not 0.0 <= fraction < 1.0:
        raise BadFraction(f"validation fraction must lie in [0, 1), got {fraction}")
    held = int(round(len(pairs) * fraction))
    cut = len(pairs) - held
    return list(pairs[:cut]), list(pairs[cut:])


__all__ = [
    "SHAPE_KINDS",
    "DEFAULT_KINDS",
    "UNSEEN_SPLITS",
    "REGIMES",
    "raw_shape",
    "normalize_unit_sphere",
    "sample_shape",
    "PairMeta",
    "RegPair",
    "make_pair",
    "add_gaussian_noise",
    "crop_count",
    "partial_crop",
    "kinds_for",
    "DatasetSpec",
    "make_regime_pair",
    "generate_pairs",
    "save_xyz",
    "load_xyz",
    "write_dataset",
    "read_manifest",
    "load_dataset",
    "split_pairs",
]
