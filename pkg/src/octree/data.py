"""Tabular datasets: schema inference, CSV loading, splitting, encoding and scaling.

Datasets are immutable values. Every transformation returns a new
:class:`Dataset`; feature arrays are never written to after construction.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

ColumnKind = Literal["numeric", "boolean", "categorical"]
TaskKind = Literal["classification", "regression"]

BOOLEAN_VALUES = frozenset({"yes", "no", "true", "false"})
TRUE_VALUES = frozenset({"yes", "true"})


class DataError(ValueError):
    """Raised for malformed input tables or invalid dataset operations."""


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    kind: ColumnKind
    description: str | None = None
    # (min, max) for numeric columns, sorted category tuple otherwise
    domain: tuple = ()

    def __post_init__(self):
        if not self.name:
            raise DataError("column name must be non-empty")
        if self.kind == "numeric" and self.domain:
            lo, hi = self.domain
            if lo > hi:
                raise DataError(f"column {self.name!r}: min {lo} > max {hi}")


@dataclass(frozen=True)
class Task:
    kind: TaskKind
    classes: tuple = ()

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if len(self.fractions) != 3:
            raise DataError("fractions must be (train, val, test)")
        if any(f <= 0 for f in self.fractions):
            raise DataError("every split fraction must be positive")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DataError(f"fractions must sum to 1, got {sum(self.fractions)}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Columnar table with a typed schema and a separate target column.

    Numeric feature columns are float64 arrays; boolean and categorical
    columns are object arrays of strings.
    """

    schema: tuple[ColumnMeta, ...]
    columns: Mapping[str, np.ndarray]
    target: str
    y: np.ndarray
    task: Task
    # original name -> current name, filled by anonymize()
    name_map: tuple[tuple[str, str], ...] = field(default=())

    def __post_init__(self):
        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            raise DataError("column names must be unique")
        if self.target in names:
            raise DataError(f"feature column named like the target {self.target!r}")
        if set(names) != set(self.columns):
            raise DataError("schema and column data disagree")
        n = len(self.y)
        for name in names:
            if len(self.columns[name]) != n:
                raise DataError(f"column {name!r} has {len(self.columns[name])} rows, expected {n}")
        if self.task.is_classification and n and self.task.n_classes < 2:
            raise DataError("classification target needs at least 2 classes")
        for arr in self.columns.values():
            arr.setflags(write=False)
        self.y.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.schema]

    def meta(self, name: str) -> ColumnMeta:
        for c in self.schema:
            if c.name == name:
                return c
        raise KeyError(name)

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]

    def is_numeric(self) -> bool:
        return all(c.kind == "numeric" for c in self.schema)

    def matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Feature matrix (rows x features) for numeric columns, in schema order."""
        names = self.feature_names if names is None else list(names)
        for name in names:
            if name not in self.columns:
                raise KeyError(f"missing feature {name!r}")
            if self.columns[name].dtype == object:
                raise DataError(f"feature {name!r} is not numeric; encode it first")
        if not names:
            return np.empty((self.n_rows, 0))
        return np.column_stack([self.columns[n] for n in names]).astype(float)

    def take(self, idx: np.ndarray) -> Dataset:
        return replace(
            self,
            columns={k: v[idx] for k, v in self.columns.items()},
            y=self.y[idx],
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.n_rows}x{len(self.schema)}|{self.target}|".encode())
        for meta in self.schema:
            h.update(f"{meta.name}:{meta.kind}|".encode())
            h.update("\x1f".join(_cell(v) for v in self.columns[meta.name]).encode())
        h.update("\x1f".join(_cell(v) for v in self.y).encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.target == other.target
            and self.task == other.task
            and all(np.array_equal(self.columns[k], other.columns[k]) for k in self.columns)
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse_float(text: str) -> float | None:
    try:
        return float(text)
    except ValueError:
        return None


def infer_meta(name: str, values: np.ndarray, description: str | None = None) -> ColumnMeta:
    """Build column metadata from an already-typed array."""
    if values.dtype != object:
        if len(values):
            domain = (float(np.min(values)), float(np.max(values)))
        else:
            domain = (0.0, 0.0)
        return ColumnMeta(name, "numeric", description, domain)
    cats = tuple(sorted({str(v) for v in values}))
    kind = "boolean" if cats and {c.lower() for c in cats} <= BOOLEAN_VALUES else "categorical"
    return ColumnMeta(name, kind, description, cats)


def _type_column(name: str, cells: list[str]) -> np.ndarray:
    non_empty = [c for c in cells if c.strip() != ""]
    parsed = [_parse_float(c) for c in non_empty]
    if non_empty and all(p is not None for p in parsed):
        if len(non_empty) != len(cells):
            raise DataError(f"column {name!r}: empty cells in numeric column")
        return np.asarray([float(c) for c in cells], dtype=float)
    return np.asarray([c.strip() for c in cells], dtype=object)


def from_records(
    header: Sequence[str],
    rows: Sequence[Sequence[str]],
    target: str,
    task: TaskKind,
    descriptions: Mapping[str, str] | None = None,
) -> Dataset:
    """Type raw string cells and build a Dataset."""
    if target not in header:
        raise DataError(f"missing target column {target!r}")
    if len(set(header)) != len(header):
        raise DataError("duplicate column names in header")
    width = len(header)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"ragged row {i + 1}: {len(row)} fields, expected {width}")
    descriptions = descriptions or {}
    cols = {h: [r[j] for r in rows] for j, h in enumerate(header)}
    y_cells = cols.pop(target)
    if task == "classification":
        y = np.asarray([c.strip() for c in y_cells], dtype=object)
        classes = tuple(sorted(set(y.tolist())))
        if len(classes) < 2:
            raise DataError(f"classification target {target!r} has {len(classes)} distinct value(s)")
        task_obj = Task("classification", classes)
    elif task == "regression":
        vals = [_parse_float(c) for c in y_cells]
        if any(v is None for v in vals):
            raise DataError(f"regression target {target!r} has non-numeric cells")
        y = np.asarray(vals, dtype=float)
        task_obj = Task("regression")
    else:
        raise DataError(f"unknown task {task!r}")
    schema = []
    columns = {}
    for name, cells in cols.items():
        arr = _type_column(name, cells)
        columns[name] = arr
        schema.append(infer_meta(name, arr, descriptions.get(name)))
    return Dataset(tuple(schema), columns, target, y, task_obj)


def load_csv(
    path: str | Path,
    target: str,
    task: TaskKind,
    descriptions: Mapping[str, str] | None = None,
) -> Dataset:
    """Load a comma-separated file with a header row.

    A column is numeric when every cell parses as a number, boolean when
    its values are a subset of yes/no/true/false, and categorical otherwise.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    return from_records(header, body, target, task, descriptions)


def to_csv(d: Dataset, path: str | Path | None = None) -> str:
    """Write features in schema order followed by the target. Returns the text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*d.feature_names, d.target])
    cols = [d.columns[n] for n in d.feature_names]
    for i in range(d.n_rows):
        writer.writerow([_cell(c[i]) for c in cols] + [_cell(d.y[i])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def split(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle of row indices, then contiguous slices at floor boundaries."""
    n = d.n_rows
    n_train = math.floor(n * spec.fractions[0])
    n_val = math.floor(n * spec.fractions[1])
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise DataError(f"split of {n} rows with {spec.fractions} leaves an empty partition")
    order = np.random.default_rng(spec.seed).permutation(n)
    return (
        d.take(order[:n_train]),
        d.take(order[n_train : n_train + n_val]),
        d.take(order[n_train + n_val :]),
    )


@dataclass(frozen=True)
class OrdinalEncoding:
    """Per-column value -> code maps, fitted on a training partition."""

    codes: Mapping[str, Mapping[str, int]]

    def apply(self, d: Dataset) -> Dataset:
        columns = dict(d.columns)
        schema = []
        for meta in d.schema:
            mapping = self.codes.get(meta.name)
            if mapping is None or d.columns[meta.name].dtype != object:
                schema.append(meta)
                continue
            arr = np.asarray([mapping.get(str(v), -1) for v in d.columns[meta.name]], dtype=float)
            columns[meta.name] = arr
            schema.append(replace(meta, kind="numeric", domain=_minmax(arr)))
        return replace(d, schema=tuple(schema), columns=columns)

    def decode(self, name: str, codes: Iterable[float]) -> list[str | None]:
        inverse = {v: k for k, v in self.codes[name].items()}
        return [inverse.get(int(c)) for c in codes]


def _minmax(arr: np.ndarray) -> tuple[float, float]:
    if not len(arr):
        return (0.0, 0.0)
    return (float(arr.min()), float(arr.max()))


def fit_ordinal(train: Dataset) -> OrdinalEncoding:
    codes = {}
    for meta in train.schema:
        if meta.kind == "numeric":
            continue
        mapping: dict[str, int] = {}
        for v in train.columns[meta.name]:
            mapping.setdefault(str(v), len(mapping))
        codes[meta.name] = mapping
    return OrdinalEncoding(codes)


def ordinal_encode(d: Dataset) -> tuple[Dataset, OrdinalEncoding]:
    """Encode categorical and boolean columns by first-appearance order.

    Returns the encoded dataset together with the mapping so it can be
    replayed onto other partitions; unseen values replay to -1.
    """
    enc = fit_ordinal(d)
    return enc.apply(d), enc


@dataclass(frozen=True)
class MinMaxScaling:
    stats: Mapping[str, tuple[float, float]]

    def apply(self, d: Dataset) -> Dataset:
        columns = dict(d.columns)
        schema = []
        for meta in d.schema:
            if meta.name not in self.stats:
                schema.append(meta)
                continue
            lo, hi = self.stats[meta.name]
            x = d.columns[meta.name]
            if x.dtype == object:
                raise DataError(f"cannot scale non-numeric column {meta.name!r}")
            scaled = np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)
            columns[meta.name] = scaled
            schema.append(replace(meta, domain=_minmax(scaled)))
        return replace(d, schema=tuple(schema), columns=columns)


def fit_minmax(train: Dataset) -> MinMaxScaling:
    if not train.is_numeric():
        raise DataError("min-max scaling needs all features numeric; encode first")
    return MinMaxScaling({m.name: _minmax(train.columns[m.name]) for m in train.schema})


def minmax_scale(d: Dataset) -> tuple[Dataset, MinMaxScaling]:
    scaling = fit_minmax(d)
    return scaling.apply(d), scaling


def append_column(d: Dataset, name: str, values, description: str | None = None) -> Dataset:
    if any(c.name == name for c in d.schema) or name == d.target:
        raise DataError(f"column {name!r} already exists")
    arr = np.asarray(values, dtype=float)
    if arr.shape != (d.n_rows,):
        raise DataError(f"expected {d.n_rows} values for {name!r}, got {arr.shape}")
    arr = arr.copy()
    return replace(
        d,
        schema=d.schema + (infer_meta(name, arr, description),),
        columns={**d.columns, name: arr},
    )


def anonymize(d: Dataset) -> Dataset:
    """Rename features to x1..xM in schema order and drop descriptions."""
    new_names = [f"x{i + 1}" for i in range(len(d.schema))]
    if [c.name for c in d.schema] == new_names and all(c.description is None for c in d.schema):
        return d
    schema = tuple(replace(c, name=n, description=None) for c, n in zip(d.schema, new_names))
    columns = {n: d.columns[c.name] for c, n in zip(d.schema, new_names)}
    previous = dict((cur, orig) for orig, cur in d.name_map)
    name_map = tuple((previous.get(c.name, c.name), n) for c, n in zip(d.schema, new_names))
    return replace(d, schema=schema, columns=columns, name_map=name_map)


def write_name_map(d: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["original", "anonymized"])
        writer.writerows(d.name_map)
