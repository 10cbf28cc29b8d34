"""Tabular data with missing cells: loading, normalization, one-hot encoding and MCAR corruption.

Cells are stored as a float grid with NaN marking a missing value. Nominal
cells hold the category index as a float.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MISSING = "?"


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    kind: str  # "continuous" or "nominal"
    observed_min: float = 0.0
    observed_max: float = 1.0
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind == "continuous":
            if not self.observed_min <= self.observed_max:
                raise SchemaError(f"{self.name}: observed_min > observed_max")
        elif self.kind == "nominal":
            if not self.categories:
                raise SchemaError(f"{self.name}: nominal attribute needs categories")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"{self.name}: duplicate category labels")
        else:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")

    @property
    def is_nominal(self) -> bool:
        return self.kind == "nominal"

    @property
    def width(self) -> int:
        """Number of encoded columns."""
        return len(self.categories) if self.is_nominal else 1


@dataclass(frozen=True, eq=False)
class Dataset:
    attrs: tuple[AttributeSpec, ...]
    cells: np.ndarray

    def __post_init__(self):
        cells = np.array(self.cells, dtype=float)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ValueError("dataset needs at least one row and one column")
        if cells.shape[1] != len(self.attrs):
            raise ValueError("cell grid width does not match attribute count")
        for j, a in enumerate(self.attrs):
            if a.is_nominal:
                col = cells[:, j]
                col = col[~np.isnan(col)]
                if np.any((col < 0) | (col >= len(a.categories)) | (col != np.floor(col))):
                    raise SchemaError(f"{a.name}: category index out of range")
        cells.flags.writeable = False
        object.__setattr__(self, "attrs", tuple(self.attrs))
        object.__setattr__(self, "cells", cells)

    @property
    def n(self) -> int:
        return self.cells.shape[0]

    @property
    def d(self) -> int:
        return self.cells.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.cells)

    def with_cells(self, cells) -> "Dataset":
        return Dataset(self.attrs, cells)

    def equals(self, other: "Dataset") -> bool:
        return self.attrs == other.attrs and np.array_equal(self.cells, other.cells, equal_nan=True)

    def label(self, r: int, j: int) -> str:
        """Cell rendered as text, the missing token for missing cells."""
        x = self.cells[r, j]
        if np.isnan(x):
            return MISSING
        a = self.attrs[j]
        if a.is_nominal:
            return a.categories[int(x)]
        return repr(float(x))


@dataclass(frozen=True, eq=False)
class EncodedMatrix:
    values: np.ndarray
    known: np.ndarray
    col_attr: np.ndarray
    col_cat: np.ndarray  # -1 for continuous columns
    norm_params: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape

    def attr_columns(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.col_attr == j)


@dataclass(frozen=True, eq=False)
class CorruptionPlan:
    u: float
    seed: int
    removed: np.ndarray  # k x 2 (row, attribute), row-major order

    def to_json(self) -> str:
        return json.dumps({"u": self.u, "seed": self.seed,
                           "removed": [[int(r), int(c)] for r, c in self.removed]})

    @classmethod
    def from_json(cls, text: str) -> "CorruptionPlan":
        obj = json.loads(text)
        removed = np.array(obj["removed"], dtype=np.int64).reshape(-1, 2)
        return cls(u=obj["u"], seed=obj["seed"], removed=removed)


# --------------------------------------------------------------------------
# Loading and writing
# --------------------------------------------------------------------------

def _is_number(tok: str) -> bool:
    try:
        return math.isfinite(float(tok))
    except ValueError:
        return False


def load_schema(path) -> list[dict]:
    with open(path) as fh:
        schema = json.load(fh)
    if not isinstance(schema, list):
        raise SchemaError("schema must be a list of attribute descriptors")
    return schema


def loads(text: str, schema: list[dict] | None = None, header: bool | None = None,
          missing: str = MISSING) -> Dataset:
    """Parse CSV text into a Dataset.

    Without a schema, an all-numeric column becomes continuous and anything
    else nominal, with categories in first-seen order. ``header=None``
    detects a header row: one whose tokens match the schema names, or that
    puts a non-numeric token on top of an otherwise numeric column.
    """
    rows = [[tok.strip() for tok in row] for row in csv.reader(io.StringIO(text))]
    rows = [row for row in rows if any(tok for tok in row)]
    if not rows:
        raise ParseError("empty input")
    width = len(schema) if schema is not None else len(rows[0])
    for i, row in enumerate(rows, start=1):
        if len(row) != width:
            raise ParseError(f"row {i}: expected {width} fields, got {len(row)}")

    if header is None:
        header = _looks_like_header(rows, schema, missing)
    names = rows[0] if header else [f"a{j}" for j in range(width)]
    body = rows[1:] if header else rows
    if not body:
        raise ParseError("no data rows")
    if schema is not None:
        names = [s.get("name", names[j]) for j, s in enumerate(schema)]

    n = len(body)
    cells = np.full((n, width), np.nan)
    attrs = []
    for j in range(width):
        col = [row[j] for row in body]
        kind = schema[j]["kind"] if schema is not None else None
        if kind is None:
            kind = "continuous" if all(_is_number(t) for t in col if t != missing) else "nominal"
        if kind == "continuous":
            for i, tok in enumerate(col):
                if tok == missing:
                    continue
                if not _is_number(tok):
                    raise SchemaError(f"row {i + 1 + header}, column {names[j]}: {tok!r} is not numeric")
                cells[i, j] = float(tok)
            known = cells[:, j][~np.isnan(cells[:, j])]
            lo, hi = (float(known.min()), float(known.max())) if known.size else (0.0, 1.0)
            attrs.append(AttributeSpec(names[j], "continuous", lo, hi))
        elif kind == "nominal":
            declared = schema[j].get("categories") if schema is not None else None
            cats = list(declared) if declared else []
            index = {c: k for k, c in enumerate(cats)}
            for i, tok in enumerate(col):
                if tok == missing:
                    continue
                if tok not in index:
                    if declared:
                        raise SchemaError(f"row {i + 1 + header}, column {names[j]}: "
                                          f"{tok!r} not among declared categories")
                    index[tok] = len(cats)
                    cats.append(tok)
                cells[i, j] = index[tok]
            if not cats:
                raise SchemaError(f"column {names[j]}: nominal attribute with no categories")
            attrs.append(AttributeSpec(names[j], "nominal", categories=tuple(cats)))
        else:
            raise SchemaError(f"column {names[j]}: unknown kind {kind!r}")
    return Dataset(tuple(attrs), cells)


def _looks_like_header(rows, schema, missing) -> bool:
    first = rows[0]
    if schema is not None and all("name" in s for s in schema):
        return first == [s["name"] for s in schema]
    if len(rows) < 2:
        return False
    for j, tok in enumerate(first):
        if tok == missing or _is_number(tok):
            continue
        rest = [row[j] for row in rows[1:] if row[j] != missing]
        if rest and all(_is_number(t) for t in rest):
            return True
    return False


def load(path, schema=None, header: bool | None = None, missing: str = MISSING) -> Dataset:
    if isinstance(schema, (str, Path)):
        schema = load_schema(schema)
    return loads(Path(path).read_text(), schema=schema, header=header, missing=missing)


def dumps(ds: Dataset, header: bool = True) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    if header:
        w.writerow([a.name for a in ds.attrs])
    for r in range(ds.n):
        w.writerow([ds.label(r, j) for j in range(ds.d)])
    return out.getvalue()


def save(ds: Dataset, path, header: bool = True) -> None:
    Path(path).write_text(dumps(ds, header=header))


def schema_of(ds: Dataset) -> list[dict]:
    return [{"name": a.name, "kind": a.kind, **({"categories": list(a.categories)} if a.is_nominal else {})}
            for a in ds.attrs]


# --------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------

def column_map(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    col_attr, col_cat = [], []
    for j, a in enumerate(ds.attrs):
        if a.is_nominal:
            col_attr.extend([j] * len(a.categories))
            col_cat.extend(range(len(a.categories)))
        else:
            col_attr.append(j)
            col_cat.append(-1)
    return np.array(col_attr, dtype=np.int64), np.array(col_cat, dtype=np.int64)


def normalize_continuous(x, lo: float, hi: float):
    """Min-max scale to [0, 1]; a constant attribute maps to 0.5."""
    if hi == lo:
        return np.where(np.isnan(x), np.nan, 0.5)
    return (np.asarray(x, dtype=float) - lo) / (hi - lo)


def denormalize_continuous(z, lo: float, hi: float):
    z = np.clip(np.asarray(z, dtype=float), 0.0, 1.0)
    if hi == lo:
        return np.full_like(z, lo)
    return lo + z * (hi - lo)


def normalize_encode(ds: Dataset) -> EncodedMatrix:
    """Scale continuous attributes into [0, 1] and expand nominal ones one-hot.

    Unknown encoded entries hold 0.0 and are flagged in ``known``; nothing
    downstream may read them.
    """
    col_attr, col_cat = column_map(ds)
    values = np.zeros((ds.n, len(col_attr)))
    known = np.zeros((ds.n, len(col_attr)), dtype=bool)
    norm = {}
    c = 0
    for j, a in enumerate(ds.attrs):
        x = ds.cells[:, j]
        present = ~np.isnan(x)
        if a.is_nominal:
            m = len(a.categories)
            idx = np.flatnonzero(present)
            values[idx, c + x[idx].astype(np.int64)] = 1.0
            known[:, c:c + m] = present[:, None]
            c += m
        else:
            norm[j] = (a.observed_min, a.observed_max)
            values[present, c] = normalize_continuous(x[present], a.observed_min, a.observed_max)
            known[:, c] = present
            c += 1
    values.flags.writeable = False
    known.flags.writeable = False
    return EncodedMatrix(values, known, col_attr, col_cat, norm)


def decode(pred: np.ndarray, ds: Dataset) -> Dataset:
    """Map an encoded prediction grid back to ``ds``'s schema.

    Continuous columns are clamped to [0, 1] and un-scaled; each nominal
    block decodes to its argmax category (lowest index on ties). Cells known
    in ``ds`` are kept verbatim.
    """
    col_attr, _ = column_map(ds)
    pred = np.asarray(pred, dtype=float)
    if pred.shape != (ds.n, len(col_attr)):
        raise ValueError(f"prediction grid shape {pred.shape} does not match {(ds.n, len(col_attr))}")
    out = np.array(ds.cells)
    c = 0
    for j, a in enumerate(ds.attrs):
        if a.is_nominal:
            m = len(a.categories)
            guess = np.argmax(pred[:, c:c + m], axis=1).astype(float)
            c += m
        else:
            guess = denormalize_continuous(pred[:, c], a.observed_min, a.observed_max)
            c += 1
        miss = np.isnan(out[:, j])
        out[miss, j] = guess[miss]
    return ds.with_cells(out)


# --------------------------------------------------------------------------
# Corruption
# --------------------------------------------------------------------------

def removal_count(u: float, n: int, d: int) -> int:
    return int(math.floor(u / 100.0 * n * d + 0.5))


def corrupt_mcar(ds: Dataset, u: float, seed: int) -> tuple[Dataset, CorruptionPlan]:
    """Remove u% of all cells uniformly at random from the known ones."""
    if not 0 < u < 100:
        raise ValueError(f"sparsity u must lie in (0, 100), got {u}")
    count = removal_count(u, ds.n, ds.d)
    known_flat = np.flatnonzero(~ds.missing.ravel())
    if count > known_flat.size:
        raise ValueError(f"cannot remove {count} cells, only {known_flat.size} are known")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(known_flat, size=count, replace=False))
    removed = np.column_stack(np.unravel_index(chosen, (ds.n, ds.d))).astype(np.int64)
    cells = np.array(ds.cells)
    cells[removed[:, 0], removed[:, 1]] = np.nan
    return ds.with_cells(cells), CorruptionPlan(u=u, seed=seed, removed=removed.reshape(-1, 2))


def conform(ds: Dataset, reference: Dataset) -> Dataset:
    """Re-express ``ds`` under ``reference``'s attributes, matching nominal cells by label.

    Files re-read from disk recompute observed ranges and category order;
    scoring needs the reference normalization.
    """
    if ds.d != reference.d:
        raise SchemaError(f"column count {ds.d} does not match reference {reference.d}")
    cells = np.array(ds.cells)
    for j, (a, ref) in enumerate(zip(ds.attrs, reference.attrs)):
        if a.kind != ref.kind:
            raise SchemaError(f"column {j}: kind {a.kind} does not match reference {ref.kind}")
        if a.is_nominal:
            index = {c: k for k, c in enumerate(ref.categories)}
            col = cells[:, j]
            for r in np.flatnonzero(~np.isnan(col)):
                label = a.categories[int(col[r])]
                if label not in index:
                    raise SchemaError(f"column {ref.name}: unknown category {label!r}")
                cells[r, j] = index[label]
    return Dataset(reference.attrs, cells)
