"""Synthetic source/target pairs with covariate shift, and their CSV format.

CSV layout: header ``f0,...,f{d-1},label``, one sample per row, floats
written with 17 significant digits, LF line endings. The generator record
goes to a ``<name>.meta.json`` sidecar next to the CSV.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import child_seed, make_rng


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X {self.X.shape} and y {self.y.shape} disagree")
        k = self.k
        if self.y.size and (self.y.min() < 0 or self.y.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def k(self) -> int:
        return int(self.meta.get("k", int(self.y.max()) + 1 if self.y.size else 2))


@dataclass
class UnlabeledDataset:
    """Target inputs as seen by training: no label field exists."""

    X: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass
class DomainPair:
    source: LabeledDataset
    target: LabeledDataset
    shift: str = ""

    def __post_init__(self):
        if self.source.d != self.target.d:
            raise ValueError("source and target feature dimensions differ")
        if self.source.k != self.target.k:
            raise ValueError("source and target class counts differ")

    def unlabeled_target(self) -> UnlabeledDataset:
        return UnlabeledDataset(self.target.X)


def make_two_moons(n: int, noise_std: float, seed: int) -> LabeledDataset:
    """Two interleaved unit half-circles; class 0 gets ceil(n/2) points."""
    if n < 2:
        raise ValueError("need at least two points")
    rng = make_rng(seed)
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, math.pi, n0)
    t1 = rng.uniform(0.0, math.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([upper, lower])
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    if noise_std > 0:
        X = X + rng.normal(0.0, noise_std, X.shape)
    meta = {
        "generator": "two_moons",
        "seed": int(seed),
        "n": n,
        "d": 2,
        "k": 2,
        "params": {"noise_std": noise_std},
    }
    return LabeledDataset(X, y, meta)


def rotate(ds: LabeledDataset, angle_deg: float) -> LabeledDataset:
    """Rotate 2-D inputs about their mean; labels untouched."""
    if ds.d != 2:
        raise ValueError("rotate needs 2-D inputs")
    if angle_deg % 360.0 == 0.0:
        X = ds.X.copy()
    else:
        a = math.radians(angle_deg)
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        c = ds.X.mean(axis=0)
        X = (ds.X - c) @ R.T + c
    meta = dict(ds.meta)
    meta["params"] = {**ds.meta.get("params", {}), "angle": angle_deg}
    return LabeledDataset(X, ds.y.copy(), meta)


def blob_centers(k: int, d: int, spread: float = 4.0, center_seed: int = 0) -> np.ndarray:
    return make_rng(center_seed).uniform(-spread, spread, (k, d))


def make_blobs(
    n: int,
    k: int,
    d: int,
    centers_shift: float,
    seed: int,
    std: float = 1.0,
    center_seed: int = 0,
) -> LabeledDataset:
    """Isotropic Gaussian clusters, balanced classes.

    Centers depend only on ``center_seed``; ``centers_shift`` translates all of
    them along the diagonal (1, ..., 1)/sqrt(d), which is how targets are built.
    """
    if k < 2:
        raise ValueError("make_blobs needs k >= 2")
    rng = make_rng(seed)
    centers = blob_centers(k, d, center_seed=center_seed)
    centers = centers + centers_shift * np.ones(d) / math.sqrt(d)
    y = np.arange(n, dtype=np.int64) % k
    X = centers[y] + rng.normal(0.0, std, (n, d))
    meta = {
        "generator": "blobs",
        "seed": int(seed),
        "n": n,
        "d": d,
        "k": k,
        "params": {"shift": centers_shift, "noise_std": std, "center_seed": center_seed},
    }
    return LabeledDataset(X, y, meta)


def inject_label_noise(ds: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Relabel exactly round(fraction * n) rows, each to a uniformly chosen wrong class."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    m = int(round(fraction * ds.n))
    y = ds.y.copy()
    if m:
        rng = make_rng(seed)
        rows = rng.choice(ds.n, size=m, replace=False)
        offset = rng.integers(1, ds.k, size=m)
        y[rows] = (y[rows] + offset) % ds.k
    meta = dict(ds.meta)
    meta["label_noise"] = {"fraction": fraction, "seed": int(seed)}
    return LabeledDataset(ds.X.copy(), y, meta)


def toy_pair(
    n: int = 600, noise_std: float = 0.1, angle: float = 45.0, seed: int = 0
) -> DomainPair:
    """Default task: two-moons source, the same generator rotated for the target."""
    src = make_two_moons(n, noise_std, child_seed(seed, 0))
    tgt = rotate(make_two_moons(n, noise_std, child_seed(seed, 1)), angle)
    return DomainPair(src, tgt, shift=f"rotation {angle} deg")


def blobs_pair(n: int, k: int, d: int, shift: float, seed: int = 0, std: float = 1.0):
    src = make_blobs(n, k, d, 0.0, child_seed(seed, 0), std=std)
    tgt = make_blobs(n, k, d, shift, child_seed(seed, 1), std=std)
    return DomainPair(src, tgt, shift=f"center shift {shift}")


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def save_csv(ds: LabeledDataset, path) -> None:
    path = Path(path)
    meta = {**ds.meta, "n": ds.n, "d": ds.d, "k": ds.k}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(ds.d)] + ["label"])
        for row, label in zip(ds.X, ds.y):
            w.writerow([format(v, ".17g") for v in row] + [int(label)])
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_csv(path) -> LabeledDataset:
    path = Path(path)
    mp = _meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 1
    if header != [f"f{j}" for j in range(d)] + ["label"]:
        raise ValueError(f"{path}: unexpected header {header}")
    X = np.array([[float(v) for v in r[:d]] for r in body], dtype=np.float64).reshape(-1, d)
    y = np.array([int(r[d]) for r in body], dtype=np.int64)
    k = meta.get("k")
    if k is not None and y.size and (y.max() >= k or y.min() < 0):
        raise ValueError(f"{path}: label outside [0, {k}) declared in sidecar meta")
    if meta and meta.get("d", d) != d:
        raise ValueError(f"{path}: sidecar says d={meta['d']}, file has {d} columns")
    return LabeledDataset(X, y, meta)


def save_pair(pair: DomainPair, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(pair.source, out / "source.csv")
    save_csv(pair.target, out / "target.csv")


def load_pair(src_path, tgt_path) -> DomainPair:
    return DomainPair(load_csv(src_path), load_csv(tgt_path))


def with_meta(ds: LabeledDataset, **extra) -> LabeledDataset:
    return replace(ds, meta={**ds.meta, **extra})
