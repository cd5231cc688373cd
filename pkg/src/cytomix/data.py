"""Tabular single-cell count data: ingestion, validation, subsampling,
and the variance-stabilizing transform.

A cell table is an N x J matrix of nonnegative integer ion counts plus
per-cell donor, condition, and cell-type annotations. The condition is a
two-level factor with a declared reference level. Tables are immutable
after construction and safe to share across parallel samplers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import FactorError, NotFoundError, ParameterError, SchemaError, ValidationError

RESERVED_COLUMNS = ("donor", "condition", "celltype")


@dataclass(frozen=True)
class Marker:
    """A panel entry: protein name plus its role in the analysis."""

    name: str
    role: str = "functional"  # or "gating"

    def __post_init__(self):
        if self.role not in ("gating", "functional"):
            raise ValidationError(f"marker {self.name}: role must be gating or functional")


@dataclass(frozen=True)
class ColumnSchema:
    """Column-name mapping for CSV ingestion."""

    donor: str = "donor"
    condition: str = "condition"
    celltype: str = "celltype"
    marker_roles: dict = field(default_factory=dict)
    reference_level: str | None = None


@dataclass(frozen=True)
class CellTable:
    """Cells x markers count matrix with donor/condition/celltype labels."""

    counts: np.ndarray
    donor: np.ndarray
    condition: np.ndarray
    celltype: np.ndarray
    markers: tuple[Marker, ...]
    reference_level: str

    def __post_init__(self):
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        for name in ("donor", "condition", "celltype"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=object))
        object.__setattr__(self, "markers", tuple(self.markers))
        self.counts.setflags(write=False)
        self._validate()

    def _validate(self):
        n, j = self.counts.shape
        if len(self.donor) != n or len(self.condition) != n or len(self.celltype) != n:
            raise ValidationError("annotation lengths do not match the count matrix")
        if j != len(self.markers):
            raise ValidationError("marker list does not match count matrix width")
        names = [m.name for m in self.markers]
        if len(set(names)) != len(names):
            raise ValidationError("marker names must be unique within a panel")
        if not any(m.role == "functional" for m in self.markers):
            raise ValidationError("panel needs at least one functional marker")
        if np.any(self.counts < 0):
            row = int(np.where((self.counts < 0).any(axis=1))[0][0])
            raise ValidationError(f"negative count at row {row}")
        levels = sorted(set(self.condition))
        if len(levels) != 2:
            raise FactorError(f"condition must have exactly two observed levels, got {levels}")
        if self.reference_level not in levels:
            raise FactorError(
                f"reference level {self.reference_level!r} not among observed levels {levels}"
            )

    # -- derived views -----------------------------------------------------

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_markers(self) -> int:
        return self.counts.shape[1]

    @property
    def marker_names(self) -> list[str]:
        return [m.name for m in self.markers]

    @property
    def condition_levels(self) -> tuple[str, str]:
        """(reference level, other level)."""
        other = sorted(set(self.condition) - {self.reference_level})[0]
        return (self.reference_level, other)

    @property
    def condition_index(self) -> np.ndarray:
        """0 for the reference level, 1 for the other."""
        return (self.condition != self.reference_level).astype(np.int64)

    @property
    def donor_names(self) -> list[str]:
        return sorted(set(self.donor))

    @property
    def donor_index(self) -> np.ndarray:
        lookup = {d: i for i, d in enumerate(self.donor_names)}
        return np.array([lookup[d] for d in self.donor], dtype=np.int64)

    @property
    def paired(self) -> bool:
        """True iff every donor appears in both conditions."""
        ref, other = self.condition_levels
        by_donor = {}
        for d, c in zip(self.donor, self.condition):
            by_donor.setdefault(d, set()).add(c)
        return all(levels == {ref, other} for levels in by_donor.values())

    def functional_view(self) -> "CellTable":
        """Restrict the panel to functional markers."""
        keep = [i for i, m in enumerate(self.markers) if m.role == "functional"]
        return replace(
            self,
            counts=self.counts[:, keep],
            markers=tuple(self.markers[i] for i in keep),
        )

    def drop_markers(self, names) -> "CellTable":
        missing = [n for n in names if n not in self.marker_names]
        if missing:
            raise NotFoundError(f"markers not in panel: {missing}")
        keep = [i for i, m in enumerate(self.markers) if m.name not in set(names)]
        if not keep:
            raise ValidationError("cannot drop every marker")
        return replace(
            self,
            counts=self.counts[:, keep],
            markers=tuple(self.markers[i] for i in keep),
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {"donor": self.donor, "condition": self.condition, "celltype": self.celltype}
        )
        for i, m in enumerate(self.markers):
            df[m.name] = self.counts[:, i]
        return df

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


@dataclass(frozen=True)
class TransformedTable:
    """Variance-stabilized expression values with provenance."""

    values: np.ndarray
    cofactor: float
    source: CellTable

    @property
    def marker_names(self) -> list[str]:
        return self.source.marker_names


def load_csv(path, schema: ColumnSchema | None = None) -> CellTable:
    """Read a cell table from CSV.

    The header must name the donor, condition, and celltype columns; every
    other column is a marker column of integer counts. Row order is
    preserved. Marker roles default to functional unless the schema says
    otherwise.
    """
    schema = schema or ColumnSchema()
    df = pd.read_csv(path)
    for col in (schema.donor, schema.condition, schema.celltype):
        if col not in df.columns:
            raise SchemaError(f"missing required column {col!r} in {path}")
    marker_cols = [c for c in df.columns if c not in (schema.donor, schema.condition, schema.celltype)]
    if not marker_cols:
        raise SchemaError(f"no marker columns found in {path}")

    counts = np.empty((len(df), len(marker_cols)), dtype=np.int64)
    for i, col in enumerate(marker_cols):
        values = pd.to_numeric(df[col], errors="coerce")
        bad = values.isna() | (values != np.floor(values))
        if bad.any():
            row = int(np.where(bad)[0][0])
            raise ValidationError(f"non-integer count in column {col!r} at row {row}")
        if (values < 0).any():
            row = int(np.where(values < 0)[0][0])
            raise ValidationError(f"negative count in column {col!r} at row {row}")
        counts[:, i] = values.astype(np.int64)

    condition = df[schema.condition].astype(str).to_numpy(dtype=object)
    levels = sorted(set(condition))
    if len(levels) != 2:
        raise FactorError(f"condition must have exactly two observed levels, got {levels}")
    reference = schema.reference_level if schema.reference_level is not None else levels[0]

    markers = tuple(
        Marker(name=c, role=schema.marker_roles.get(c, "functional")) for c in marker_cols
    )
    return CellTable(
        counts=counts,
        donor=df[schema.donor].astype(str).to_numpy(dtype=object),
        condition=condition,
        celltype=df[schema.celltype].astype(str).to_numpy(dtype=object),
        markers=markers,
        reference_level=reference,
    )


def filter_celltype(table: CellTable, keep: str) -> CellTable:
    """Keep exactly the rows with the given cell-type label, revalidating."""
    mask = table.celltype == keep
    if not mask.any():
        raise NotFoundError(f"cell type {keep!r} not present in table")
    surviving = set(table.condition[mask])
    if len(surviving) != 2:
        raise FactorError(
            f"filtering to {keep!r} leaves a single condition level {sorted(surviving)}"
        )
    return replace(
        table,
        counts=table.counts[mask],
        donor=table.donor[mask],
        condition=table.condition[mask],
        celltype=table.celltype[mask],
    )


def subsample_per_donor(table: CellTable, k: int, seed: int) -> CellTable:
    """Retain at most k uniformly chosen cells per (donor, condition) pair.

    Groups are visited in sorted order and indices re-sorted afterwards, so
    the result is deterministic in the seed and preserves row order.
    """
    if k < 1:
        raise ParameterError("subsample size must be >= 1")
    rng = np.random.default_rng(seed)
    keep_rows = []
    pairs = sorted(set(zip(table.donor, table.condition)))
    for donor, cond in pairs:
        rows = np.where((table.donor == donor) & (table.condition == cond))[0]
        if len(rows) > k:
            rows = rng.choice(rows, size=k, replace=False)
        keep_rows.append(rows)
    keep = np.sort(np.concatenate(keep_rows))
    return replace(
        table,
        counts=table.counts[keep],
        donor=table.donor[keep],
        condition=table.condition[keep],
        celltype=table.celltype[keep],
    )


def arcsinh_transform(table: CellTable, cofactor: float = 5.0) -> TransformedTable:
    """Elementwise asinh(count / cofactor); the mass-cytometry default is 5."""
    if cofactor <= 0:
        raise ParameterError("cofactor must be positive")
    values = np.arcsinh(table.counts / float(cofactor))
    values.setflags(write=False)
    return TransformedTable(values=values, cofactor=float(cofactor), source=table)
