"""Synthetic in-distribution / held-out-class datasets and embedding-file loading."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

GENERATORS = ("gaussian-mixture", "two-moons-multiclass")
SPLIT_FRACTIONS = (0.60, 0.15)  # train, dev; test takes the rest


class DataFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass
class DatasetBundle:
    train_x: np.ndarray
    train_y: np.ndarray
    dev_x: np.ndarray
    dev_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    ood_x: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]

    def standardized(self) -> "DatasetBundle":
        """Per-dimension z-score fit on train, applied to every split."""
        mu = self.train_x.mean(axis=0)
        sd = self.train_x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        z = lambda a: (a - mu) / sd if len(a) else a
        prov = dict(self.provenance, standardized=True)
        return replace(
            self, train_x=z(self.train_x), dev_x=z(self.dev_x), test_x=z(self.test_x), ood_x=z(self.ood_x), provenance=prov
        )


@dataclass
class GeneratorSpec:
    kind: str = "gaussian-mixture"
    num_classes: int = 6
    held_out: int = 2
    per_class: int = 100
    dim: int = 10
    spread: float = 3.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ValueError(f"unknown generator {self.kind!r}; choose from {GENERATORS}")
        if not 0 < self.held_out < self.num_classes:
            raise ValueError("held_out must satisfy 0 < held_out < num_classes")
        if self.num_classes - self.held_out < 2:
            raise ValueError("need at least two in-distribution classes")
        if self.per_class < 4:
            raise ValueError("per_class must be >= 4 so every split is populated")
        if self.dim < 1 or (self.kind == "two-moons-multiclass" and self.dim < 2):
            raise ValueError("dimension too small for this generator")
        if self.spread <= 0 or self.noise < 0:
            raise ValueError("spread must be > 0 and noise >= 0")


def _class_points(spec: GeneratorSpec, rng: np.random.Generator) -> list[np.ndarray]:
    c, d, n = spec.num_classes, spec.dim, spec.per_class
    if spec.kind == "gaussian-mixture":
        centers = rng.normal(0.0, spec.spread, size=(c, d))
        return [centers[k] + spec.noise * rng.normal(size=(n, d)) for k in range(c)]
    out = []
    for k in range(c):
        phi = 2 * np.pi * k / c
        rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
        theta = rng.uniform(0.0, np.pi, n)
        arc = np.stack([np.cos(theta), np.sin(theta)], axis=1) @ rot.T
        pts = np.zeros((n, d))
        pts[:, :2] = arc + spec.spread * np.array([np.cos(phi), np.sin(phi)])
        pts += spec.noise * rng.normal(size=(n, d))
        out.append(pts)
    return out


def generate(spec: GeneratorSpec) -> DatasetBundle:
    """Classes ``0..C-held_out-1`` are split 60/15/25 per class; the rest are OOD."""
    rng = np.random.default_rng(spec.seed)
    per_class = _class_points(spec, rng)
    k_in = spec.num_classes - spec.held_out
    n_train = int(spec.per_class * SPLIT_FRACTIONS[0])
    n_dev = int(spec.per_class * SPLIT_FRACTIONS[1])
    parts = {"train": ([], []), "dev": ([], []), "test": ([], [])}
    for label in range(k_in):
        pts = per_class[label][rng.permutation(spec.per_class)]
        for name, chunk in (
            ("train", pts[:n_train]),
            ("dev", pts[n_train : n_train + n_dev]),
            ("test", pts[n_train + n_dev :]),
        ):
            parts[name][0].append(chunk)
            parts[name][1].append(np.full(len(chunk), label))
    arrays = {}
    for name, (xs, ys) in parts.items():
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(y))
        arrays[name] = (x[order], y[order])
    ood = np.concatenate(per_class[k_in:])
    ood = ood[rng.permutation(len(ood))]
    return DatasetBundle(
        *arrays["train"],
        *arrays["dev"],
        *arrays["test"],
        ood_x=ood,
        num_classes=k_in,
        provenance={"generator": vars(spec).copy()},
    )


def _read_rows(path: Path, labeled: bool, dim: int | None):
    xs, ys = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if labeled:
                    label = int(row[0])
                    values = [float(c) for c in row[1:]]
                else:
                    values = [float(c) for c in row]
            except ValueError as exc:
                raise DataFormatError(path, lineno, f"malformed row: {exc}") from None
            if labeled and label < 0:
                raise DataFormatError(path, lineno, f"negative label {label}")
            if not values:
                raise DataFormatError(path, lineno, "row has no feature values")
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise DataFormatError(path, lineno, f"expected {dim} feature values, got {len(values)}")
            if not all(np.isfinite(values)):
                raise DataFormatError(path, lineno, "non-finite feature value")
            xs.append(values)
            if labeled:
                ys.append((label, lineno))
    if not xs:
        raise DataFormatError(path, 0, "file has no rows")
    return np.array(xs, dtype=np.float64), ys, dim


def load_embeddings(train_path, dev_path, test_in_path, test_ood_path=None) -> DatasetBundle:
    """Read comma-separated embedding files: ``label,v1,...,vd`` per labeled row,
    ``v1,...,vd`` per OOD row, no header."""
    dim = None
    loaded = {}
    for name, path in (("train", train_path), ("dev", dev_path), ("test", test_in_path)):
        path = Path(path)
        x, ys, dim = _read_rows(path, True, dim)
        loaded[name] = (path, x, ys)
    train_labels = {lab for lab, _ in loaded["train"][2]}
    k = max(train_labels) + 1
    if train_labels != set(range(k)):
        missing = sorted(set(range(k)) - train_labels)
        raise DataFormatError(loaded["train"][0], 0, f"labels must cover 0..{k - 1}; missing {missing}")
    arrays = {}
    for name, (path, x, ys) in loaded.items():
        for lab, lineno in ys:
            if lab >= k:
                raise DataFormatError(path, lineno, f"unknown label {lab}; training labels are 0..{k - 1}")
        arrays[name] = (x, np.array([lab for lab, _ in ys], dtype=np.int64))
    if test_ood_path is not None:
        ood, _, dim = _read_rows(Path(test_ood_path), False, dim)
    else:
        ood = np.zeros((0, dim))
    provenance = {
        "files": {
            "train": str(train_path),
            "dev": str(dev_path),
            "test_in": str(test_in_path),
            "test_ood": None if test_ood_path is None else str(test_ood_path),
        },
        "rows": {"train": len(arrays["train"][1]), "dev": len(arrays["dev"][1]), "test_in": len(arrays["test"][1]), "test_ood": len(ood)},
    }
    return DatasetBundle(*arrays["train"], *arrays["dev"], *arrays["test"], ood_x=ood, num_classes=k, provenance=provenance)


def write_embeddings(path, x: np.ndarray, y: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for i, row in enumerate(x):
            vals = [repr(float(v)) for v in row]
            writer.writerow(([str(int(y[i]))] if y is not None else []) + vals)
