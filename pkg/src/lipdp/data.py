"""Dataset ingestion (CSV, IDX) and preprocessing to a bounded input norm."""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    def __init__(self, path, offset: int, message: str):
        self.offset = offset
        super().__init__(f"{path}: byte offset {offset}: {message}")


def digest_arrays(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class Preprocessor:
    """Fitted CSV transform: standardize numerics, one-hot categoricals, scale."""

    numeric: list[str]
    categorical: list[str]
    means: dict[str, float]
    stds: dict[str, float]
    categories: dict[str, list[str]]
    scale: float
    X1: float

    @property
    def columns(self) -> list[str]:
        cols = list(self.numeric)
        for c in self.categorical:
            cols.extend(f"{c}={v}" for v in self.categories[c])
        return cols

    def transform(self, records: list[Mapping[str, str]]) -> np.ndarray:
        """Features for raw records; rows above the norm bound are capped to it.

        Categories not seen at fit time encode as all zeros.
        """
        out = np.zeros((len(records), len(self.columns)))
        for i, rec in enumerate(records):
            j = 0
            for c in self.numeric:
                out[i, j] = (_parse_float(rec[c], i, c) - self.means[c]) / self.stds[c]
                j += 1
            for c in self.categorical:
                cats = self.categories[c]
                v = rec[c].strip()
                if v in cats:
                    out[i, j + cats.index(v)] = 1.0
                j += len(cats)
        out *= self.scale
        return cap_row_norms(out, self.X1)


@dataclass
class DatasetHandle:
    features: np.ndarray
    labels: np.ndarray
    X1: float
    provenance: str = ""
    digest: str = ""
    classes: int | None = None
    columns: list[str] = field(default_factory=list)
    preprocessor: Preprocessor | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        n = self.features.shape[0]
        if n < 2:
            raise DataError("a dataset needs at least two rows")
        if self.labels.shape[0] != n:
            raise DataError(f"{n} feature rows but {self.labels.shape[0]} labels")
        if not np.isfinite(self.features).all():
            raise DataError("features contain non-finite values")
        norms = np.linalg.norm(self.features, axis=1)
        if norms.max() > self.X1 + 1e-9:
            raise DataError(f"row norm {norms.max():.6g} exceeds X1={self.X1}")
        if self.classes is None and np.issubdtype(self.labels.dtype, np.integer):
            self.classes = int(self.labels.max()) + 1
        if not self.digest:
            self.digest = digest_arrays(self.features, self.labels)

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx) -> "DatasetHandle":
        return DatasetHandle(self.features[idx], self.labels[idx], self.X1,
                             self.provenance, "", self.classes, self.columns, self.preprocessor)

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features, self.labels


def cap_row_norms(x: np.ndarray, X1: float) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    factor = np.where(norms > X1, X1 / np.where(norms > 0, norms, 1.0), 1.0)
    return x * factor


def _parse_float(value: str, row: int, column: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise DataError(f"row {row}: column {column!r} value {value!r} is not numeric") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}: column {column!r} is not finite")
    return v


def load_csv(
    path,
    label_column: str,
    schema: Mapping[str, str],
    X1: float = 1.0,
) -> DatasetHandle:
    """Load a CSV with header row.

    ``schema`` maps each feature column to ``"numeric"`` or ``"categorical"``;
    columns not in the schema (other than the label) are ignored. Numerics are
    standardized (population std), categoricals one-hot encoded in sorted
    category order, then all rows scaled by one factor so the largest row norm
    equals ``X1``. Labels are mapped to integers in sorted order.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        records = list(reader)
        header = reader.fieldnames or []
    for col in [label_column, *schema]:
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    for kind in schema.values():
        if kind not in ("numeric", "categorical"):
            raise DataError(f"unknown column kind {kind!r}")
    for i, rec in enumerate(records):
        for col in [label_column, *schema]:
            v = rec.get(col)
            if v is None or v.strip() in ("", "?", "NA", "nan", "NaN"):
                raise DataError(f"{path}: row {i}: missing value in column {col!r}")

    numeric = [c for c, k in schema.items() if k == "numeric"]
    categorical = [c for c, k in schema.items() if k == "categorical"]
    means, stds, categories = {}, {}, {}
    for c in numeric:
        col = np.array([_parse_float(r[c], i, c) for i, r in enumerate(records)])
        means[c] = float(col.mean())
        sd = float(col.std())
        stds[c] = sd if sd > 0 else 1.0
    for c in categorical:
        categories[c] = sorted({r[c].strip() for r in records})

    pre = Preprocessor(numeric, categorical, means, stds, categories, 1.0, math.inf)
    x = pre.transform(records)
    max_norm = float(np.linalg.norm(x, axis=1).max(initial=0.0))
    pre.scale = X1 / max_norm if max_norm > 0 else 1.0
    pre.X1 = X1
    x = x * pre.scale

    raw_labels = [r[label_column].strip() for r in records]
    label_values = sorted(set(raw_labels), key=_label_sort_key)
    lookup = {v: i for i, v in enumerate(label_values)}
    y = np.array([lookup[v] for v in raw_labels], dtype=np.int64)
    return DatasetHandle(x, y, X1, provenance=str(path), classes=len(label_values),
                         columns=pre.columns, preprocessor=pre)


def _label_sort_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def save_dataset(ds: DatasetHandle, path) -> None:
    """Write preprocessed data as CSV: ``label`` then features, exact float repr."""
    path = Path(path)
    cols = ds.columns or [f"f{j}" for j in range(ds.features.shape[1])]
    with path.open("w", newline="") as fh:
        fh.write(f"# X1={ds.X1!r} classes={ds.classes} provenance={ds.provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", *cols])
        for label, row in zip(ds.labels.tolist(), ds.features.tolist()):
            w.writerow([repr(label), *(repr(v) for v in row)])


def load_saved_dataset(path) -> DatasetHandle:
    path = Path(path)
    with path.open(newline="") as fh:
        meta = fh.readline()
        if not meta.startswith("# "):
            raise DataError(f"{path}: missing metadata line")
        fields = dict(part.split("=", 1) for part in meta[2:].rstrip("\n").split(" ", 2))
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    labels = np.array([int(r[0]) if "." not in r[0] else float(r[0]) for r in rows])
    x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    classes = None if fields["classes"] == "None" else int(fields["classes"])
    return DatasetHandle(x, labels, float(fields["X1"]), fields["provenance"],
                         classes=classes, columns=header[1:])


def _read_idx(path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(path, 0, "file shorter than the magic number")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise IdxFormatError(path, 0, f"magic number 0x{got:08x}, expected 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxFormatError(path, len(data), "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    expected = math.prod(dims)
    payload = data[header_len:]
    if len(payload) != expected:
        raise IdxFormatError(
            path,
            header_len + min(len(payload), expected),
            f"header declares {expected} payload bytes but file holds {len(payload)}",
        )
    return dims, payload


def load_idx(images_path, labels_path, X1: float = 1.0, flatten: bool = True) -> DatasetHandle:
    """Read an IDX image/label pair; pixels scale to [0, 1], rows capped to norm ``X1``."""
    (n, h, w), pix = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (m,), lab = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n != m:
        raise DataError(f"{images_path} holds {n} images but {labels_path} holds {m} labels")
    x = np.frombuffer(pix, dtype=np.uint8).astype(np.float64).reshape(n, h * w) / 255.0
    x = cap_row_norms(x, X1)
    y = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    ds = DatasetHandle(x, y, X1, provenance=f"{images_path}|{labels_path}",
                       classes=int(y.max()) + 1 if n else 0)
    if not flatten:
        ds.features = ds.features.reshape(n, 1, h, w)
    return ds


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


def stratified_split(labels: np.ndarray, rng: np.random.Generator, test_fraction: float = 0.2):
    """Seeded stratified split; returns ``(train_idx, test_idx)`` sorted."""
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(test_fraction * idx.size))
        test.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def synthetic_tabular(n: int, p: int, rng: np.random.Generator, X1: float = 1.0,
                      noise: float = 1.0) -> DatasetHandle:
    """Two-class task from a random linear rule plus a nonlinear term and label noise."""
    z = rng.standard_normal((n, p))
    w = rng.standard_normal(p)
    score = z @ w / math.sqrt(p) + 0.5 * np.sin(2.0 * z[:, 0]) + noise * 0.3 * rng.standard_normal(n)
    y = (score > 0).astype(np.int64)
    z = (z - z.mean(axis=0)) / z.std(axis=0)
    x = z * (X1 / np.linalg.norm(z, axis=1).max())
    return DatasetHandle(x, y, X1, provenance=f"synthetic_tabular(n={n}, p={p})", classes=2)
