"""Multi-view region datasets: validation, on-disk format, synthesis, fold splits.

A dataset directory holds ``manifest.json`` plus one headerless CSV per
view and per downstream target::

    {"n": 5, "region_ids": [...],
     "views": [{"name": "mobility", "kind": "mobility", "file": "mobility.csv",
                "categories": [...]}, ...],
     "targets": {"crime": "crime.csv"}}
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

VIEW_NAMES = ("mobility", "poi", "landuse", "custom")
VIEW_KINDS = ("mobility", "count")

POI_CATEGORIES = 26
LANDUSE_CATEGORIES = 12


class DataValidationError(ValueError):
    """Raised for malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class ViewMatrix:
    name: str
    kind: str
    matrix: np.ndarray
    category_labels: Tuple[str, ...] = ()

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DataValidationError(f"view {self.name!r}: matrix must be 2-D")
        if self.kind not in VIEW_KINDS:
            raise DataValidationError(f"view {self.name!r}: unknown kind {self.kind!r}")
        if self.name not in VIEW_NAMES:
            raise DataValidationError(f"view {self.name!r}: name must be one of {VIEW_NAMES}")
        if self.kind == "mobility" and m.shape[0] != m.shape[1]:
            raise DataValidationError(f"view {self.name!r}: mobility matrix must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DataValidationError(f"view {self.name!r}: non-finite value")
        if np.any(m < 0):
            r, c = np.argwhere(m < 0)[0]
            raise DataValidationError(f"view {self.name!r}: negative count at row {r}, column {c}")
        labels = tuple(self.category_labels) or tuple(f"c{i}" for i in range(m.shape[1]))
        if len(labels) != m.shape[1]:
            raise DataValidationError(
                f"view {self.name!r}: {len(labels)} category labels for {m.shape[1]} columns"
            )
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "category_labels", labels)

    @property
    def is_mobility(self) -> bool:
        return self.kind == "mobility"


@dataclass(frozen=True)
class RegionDataset:
    region_ids: Tuple[str, ...]
    views: Tuple[ViewMatrix, ...]
    targets: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.region_ids)
        object.__setattr__(self, "region_ids", tuple(str(r) for r in self.region_ids))
        object.__setattr__(self, "views", tuple(self.views))
        if not self.views:
            raise DataValidationError("dataset needs at least one view")
        if len(set(self.region_ids)) != n:
            raise DataValidationError("region ids are not unique")
        for view in self.views:
            if view.matrix.shape[0] != n:
                raise DataValidationError(
                    f"view {view.name!r}: {view.matrix.shape[0]} rows for {n} regions"
                )
        targets = {}
        for task, values in self.targets.items():
            y = np.asarray(values, dtype=np.float64).reshape(-1)
            if y.shape[0] != n:
                raise DataValidationError(f"target {task!r}: {y.shape[0]} values for {n} regions")
            y.setflags(write=False)
            targets[task] = y
        object.__setattr__(self, "targets", targets)

    @property
    def n(self) -> int:
        return len(self.region_ids)

    @property
    def v(self) -> int:
        return len(self.views)

    def view(self, name: str) -> ViewMatrix:
        for view in self.views:
            if view.name == name:
                return view
        raise KeyError(name)

    def fingerprint(self) -> str:
        """SHA-256 over region ids, view metadata and float64 little-endian matrices."""
        h = hashlib.sha256()
        h.update(json.dumps(list(self.region_ids)).encode())
        for view in self.views:
            h.update(json.dumps([view.name, view.kind, list(view.matrix.shape)]).encode())
            h.update(np.ascontiguousarray(view.matrix, dtype="<f8").tobytes())
        return h.hexdigest()


def _read_csv_matrix(path: Path, rows: int, cols: Optional[int] = None) -> np.ndarray:
    if not path.is_file():
        raise DataValidationError(f"{path.name}: file not found")
    data: List[List[float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        for r, line in enumerate(csv.reader(fh)):
            if not line:
                continue
            values = []
            for c, cell in enumerate(line):
                try:
                    x = float(cell)
                except ValueError:
                    raise DataValidationError(
                        f"{path.name}: non-numeric cell {cell!r} at row {r}, column {c}"
                    ) from None
                if not math.isfinite(x):
                    raise DataValidationError(f"{path.name}: non-finite cell at row {r}, column {c}")
                if x < 0:
                    raise DataValidationError(f"{path.name}: negative count {x} at row {r}, column {c}")
                values.append(x)
            if cols is not None and len(values) != cols:
                raise DataValidationError(
                    f"{path.name}: row {r} has {len(values)} columns, expected {cols}"
                )
            if data and len(values) != len(data[0]):
                raise DataValidationError(f"{path.name}: ragged row {r}")
            data.append(values)
    if len(data) != rows:
        raise DataValidationError(f"{path.name}: {len(data)} rows, expected {rows}")
    return np.array(data, dtype=np.float64).reshape(rows, -1)


def load_dataset(directory) -> RegionDataset:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataValidationError(f"manifest.json: file not found in {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"manifest.json: invalid JSON ({exc})") from None
    n = int(manifest["n"])
    region_ids = manifest.get("region_ids") or [str(i) for i in range(n)]
    if len(region_ids) != n:
        raise DataValidationError(f"manifest.json: {len(region_ids)} region ids for n={n}")
    views = []
    for spec in manifest["views"]:
        kind = spec.get("kind", "count")
        categories = spec.get("categories") or []
        cols = n if kind == "mobility" else (len(categories) or None)
        matrix = _read_csv_matrix(root / spec["file"], n, cols)
        views.append(ViewMatrix(spec["name"], kind, matrix, tuple(categories)))
    targets = {}
    for task, fname in (manifest.get("targets") or {}).items():
        targets[task] = _read_csv_matrix(root / fname, n, 1)[:, 0]
    return RegionDataset(tuple(region_ids), tuple(views), targets)


def _write_csv(path: Path, matrix: np.ndarray) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(matrix):
            writer.writerow([repr(float(x)) for x in row])


def save_dataset(dataset: RegionDataset, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    views = []
    for view in dataset.views:
        fname = f"{view.name}.csv"
        _write_csv(root / fname, view.matrix)
        views.append(
            {"name": view.name, "kind": view.kind, "file": fname, "categories": list(view.category_labels)}
        )
    targets = {}
    for task, y in dataset.targets.items():
        fname = f"target_{task}.csv"
        _write_csv(root / fname, y.reshape(-1, 1))
        targets[task] = fname
    manifest = {"n": dataset.n, "region_ids": list(dataset.region_ids), "views": views, "targets": targets}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return root


@dataclass(frozen=True)
class SynthConfig:
    n: int = 50
    latent_dim: int = 4
    noise: float = 0.1
    seed: int = 0
    poi_categories: int = POI_CATEGORIES
    landuse_categories: int = LANDUSE_CATEGORIES
    trips_per_pair: float = 20.0
    mobility_sharpness: float = 4.0
    count_scale: float = 10.0
    target_offset: float = 100.0
    target_scale: float = 20.0
    tasks: Tuple[str, ...] = ("crime", "checkin", "service_call")

    def __post_init__(self):
        if self.n < 10:
            raise ValueError(f"synthetic datasets need n >= 10, got {self.n}")
        if self.latent_dim < 2:
            raise ValueError(f"latent_dim must be >= 2, got {self.latent_dim}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def latent_factors(cfg: SynthConfig) -> np.ndarray:
    """The planted per-region factors behind :func:`generate_synthetic`."""
    rng = np.random.default_rng(cfg.seed)
    return rng.standard_normal((cfg.n, cfg.latent_dim)) / cfg.latent_dim ** 0.25


def generate_synthetic(cfg: SynthConfig) -> RegionDataset:
    """Planted-factor dataset.

    Latent factors ``u_i`` have per-coordinate variance ``1/sqrt(q)`` so that
    ``u_i . u_j`` has unit variance.  Trips are Poisson with gravity-style
    rate ``trips_per_pair * exp(sharpness * u_i . u_j)``; POI and land-use counts are
    Poisson with rates ``count_scale * softplus(A u_i)``.  Each target is
    ``offset + scale * (w . u_i + noise * eps)`` with ``var(w . u) = 1``,
    clipped at zero.
    """
    u = latent_factors(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    q = cfg.latent_dim

    mobility = rng.poisson(cfg.trips_per_pair * np.exp(cfg.mobility_sharpness * (u @ u.T))).astype(np.float64)
    a_poi = rng.standard_normal((cfg.poi_categories, q))
    a_land = rng.standard_normal((cfg.landuse_categories, q))
    poi = rng.poisson(cfg.count_scale * _softplus(u @ a_poi.T)).astype(np.float64)
    land = rng.poisson(cfg.count_scale * _softplus(u @ a_land.T)).astype(np.float64)

    targets = {}
    for task in cfg.tasks:
        w = rng.standard_normal(q)
        w *= q ** 0.25 / np.linalg.norm(w)
        eps = rng.standard_normal(cfg.n)
        y = cfg.target_offset + cfg.target_scale * (u @ w + cfg.noise * eps)
        targets[task] = np.maximum(y, 0.0)

    views = (
        ViewMatrix("mobility", "mobility", mobility, tuple(f"r{i}" for i in range(cfg.n))),
        ViewMatrix("poi", "count", poi, tuple(f"poi{i}" for i in range(cfg.poi_categories))),
        ViewMatrix("landuse", "count", land, tuple(f"land{i}" for i in range(cfg.landuse_categories))),
    )
    return RegionDataset(tuple(f"r{i}" for i in range(cfg.n)), views, targets)


def split_kfold(n: int, k: int, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition; fold sizes differ by at most one."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(test)))
    return out
