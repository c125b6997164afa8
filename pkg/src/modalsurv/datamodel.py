"""Core domain types, cohort assembly and the plain-text file formats.

Every module passes data around as a :class:`Cohort`: a tuple of
:class:`SurvivalRecord` labels plus one :class:`ModalityTable` per feature
source, inner-joined on patient id and sorted by id.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PMF_ATOL = 1e-6


class ModalSurvError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(ModalSurvError, ValueError):
    """Bad input: malformed file, inconsistent shapes, unmet precondition."""


class NumericalError(ModalSurvError, ArithmeticError):
    """A numeric procedure failed (singular system, undefined metric)."""


class ConvergenceError(NumericalError):
    """An iterative fit did not converge."""


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    time: float
    event: bool

    def __post_init__(self):
        if not self.patient_id:
            raise ValidationError("empty patient_id")
        t = float(self.time)
        if not math.isfinite(t) or t <= 0:
            raise ValidationError(f"patient {self.patient_id}: time must be positive, got {self.time}")
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", bool(self.event))


@dataclass(frozen=True)
class ModalityTable:
    """Per-patient feature vectors of one modality.

    ``excluded`` lists ``(patient_id, reason)`` pairs dropped while the table
    was built (for example unparsable clinical values).
    """

    name: str
    dim: int
    rows: Mapping[str, np.ndarray]
    excluded: tuple[tuple[str, str], ...] = ()
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"modality {self.name!r}: dim must be >= 1")
        frozen = {}
        for pid, vec in self.rows.items():
            arr = np.array(vec, dtype=float).reshape(-1)
            if arr.shape[0] != self.dim:
                raise ValidationError(
                    f"modality {self.name!r}: patient {pid} has {arr.shape[0]} values, expected {self.dim}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"modality {self.name!r}: patient {pid} has non-finite values")
            arr.flags.writeable = False
            frozen[str(pid)] = arr
        object.__setattr__(self, "rows", frozen)
        if self.feature_names and len(self.feature_names) != self.dim:
            raise ValidationError(f"modality {self.name!r}: {len(self.feature_names)} names for dim {self.dim}")

    @property
    def ids(self) -> list[str]:
        return sorted(self.rows)

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        if len(ids) == 0:
            return np.zeros((0, self.dim))
        return np.stack([self.rows[pid] for pid in ids])


@dataclass(frozen=True)
class PmfPrediction:
    probs: np.ndarray

    def __post_init__(self):
        p = check_pmf(self.probs)
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def K(self) -> int:
        return self.probs.shape[0]


def check_pmf(pmf, atol: float = PMF_ATOL) -> np.ndarray:
    """Return ``pmf`` as a float array, raising if any row is not a distribution."""
    p = np.asarray(pmf, dtype=float)
    if p.ndim not in (1, 2) or p.shape[-1] < 1:
        raise ValidationError(f"pmf must be a vector or matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValidationError("pmf has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValidationError("pmf does not sum to 1")
    return p


@dataclass(frozen=True)
class Cohort:
    records: tuple[SurvivalRecord, ...]
    modalities: tuple[ModalityTable, ...] = ()
    dropped_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate patient_id in cohort")
        idset = set(ids)
        for table in self.modalities:
            stray = set(table.rows) - idset
            if stray:
                raise ValidationError(f"modality {table.name!r} has rows for unknown patients: {sorted(stray)[:5]}")

    @property
    def ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records], dtype=float)

    @property
    def events(self) -> np.ndarray:
        return np.array([r.event for r in self.records], dtype=bool)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def n_events(self) -> int:
        return int(sum(r.event for r in self.records))

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def modality(self, name: str) -> ModalityTable:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ValidationError(f"cohort has no modality {name!r}")

    def features(self, name: str) -> np.ndarray:
        """Feature matrix of modality ``name`` in cohort record order."""
        return self.modality(name).matrix(self.ids)

    def subset(self, indices: Iterable[int]) -> "Cohort":
        idx = list(indices)
        records = tuple(self.records[i] for i in idx)
        keep = {r.patient_id for r in records}
        tables = tuple(
            ModalityTable(
                m.name, m.dim, {p: v for p, v in m.rows.items() if p in keep}, feature_names=m.feature_names
            )
            for m in self.modalities
        )
        return Cohort(records, tables)


def assemble_cohort(
    records: Iterable[SurvivalRecord],
    modality_tables: Mapping[str, ModalityTable] | Iterable[ModalityTable],
    selected_modalities: Sequence[str],
) -> Cohort:
    """Inner-join labels with the selected modality tables.

    The returned cohort holds only patients present in ``records`` and in
    every selected table, ordered by patient id.
    """
    records = list(records)
    if not selected_modalities:
        raise ValidationError("selected_modalities is empty")
    if isinstance(modality_tables, Mapping):
        tables = dict(modality_tables)
    else:
        tables = {}
        for t in modality_tables:
            if t.name in tables:
                raise ValidationError(f"duplicate modality table {t.name!r}")
            tables[t.name] = t
    if len(set(selected_modalities)) != len(selected_modalities):
        raise ValidationError("duplicate entries in selected_modalities")
    missing = [m for m in selected_modalities if m not in tables]
    if missing:
        raise ValidationError(f"no table for modalities {missing}")

    by_id: dict[str, SurvivalRecord] = {}
    for r in records:
        if r.patient_id in by_id:
            raise ValidationError(f"duplicate patient_id {r.patient_id!r}")
        by_id[r.patient_id] = r

    keep = set(by_id)
    for name in selected_modalities:
        keep &= set(tables[name].rows)
    if not keep:
        raise ValidationError("no complete cases")
    dropped = tuple(sorted(set(by_id) - keep))
    if dropped:
        logger.warning("inner join dropped %d of %d labelled patients", len(dropped), len(by_id))

    ids = sorted(keep)
    out_tables = tuple(
        ModalityTable(
            name,
            tables[name].dim,
            {pid: tables[name].rows[pid] for pid in ids},
            feature_names=tables[name].feature_names,
        )
        for name in selected_modalities
    )
    return Cohort(tuple(by_id[pid] for pid in ids), out_tables, dropped_ids=dropped)


# --------------------------------------------------------------------------
# file formats

def fmt_float(x: float) -> str:
    """Shortest round-trip text form of a float."""
    return repr(float(x))


def _open_rows(path: Path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return csv.reader(lines)


def read_labels(path) -> list[SurvivalRecord]:
    """Read a ``patient_id,time_months,event`` file."""
    path = Path(path)
    reader = _open_rows(path)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["patient_id", "time_months", "event"]:
        raise ValidationError(f"{path}: header must be patient_id,time_months,event, got {header}")
    out = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ValidationError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        pid, t, e = (c.strip() for c in row)
        if e not in ("0", "1"):
            raise ValidationError(f"{path}:{lineno}: event must be 0 or 1, got {e!r}")
        if pid in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate patient_id {pid!r}")
        seen.add(pid)
        try:
            out.append(SurvivalRecord(pid, float(t), e == "1"))
        except (ValueError, ValidationError) as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out


def write_labels(records: Iterable[SurvivalRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("patient_id,time_months,event\n")
        for r in records:
            fh.write(f"{r.patient_id},{fmt_float(r.time)},{int(r.event)}\n")


def read_modality_table(path, name: str | None = None) -> ModalityTable:
    """Read a feature file whose first column is ``patient_id``."""
    path = Path(path)
    name = name or path.stem
    reader = _open_rows(path)
    header = next(reader, None)
    if not header or header[0].strip() != "patient_id" or len(header) < 2:
        raise ValidationError(f"{path}: first header column must be patient_id followed by features")
    dim = len(header) - 1
    rows = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise ValidationError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(row)}")
        pid = row[0].strip()
        if pid in rows:
            raise ValidationError(f"{path}:{lineno}: duplicate patient_id {pid!r}")
        try:
            vec = np.array([float(c) for c in row[1:]])
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-numeric feature value") from None
        if not np.all(np.isfinite(vec)):
            raise ValidationError(f"{path}:{lineno}: non-finite feature value")
        rows[pid] = vec
    return ModalityTable(name, dim, rows, feature_names=tuple(h.strip() for h in header[1:]))


def write_modality_table(table: ModalityTable, path) -> None:
    names = table.feature_names or tuple(f"f{j}" for j in range(table.dim))
    with open(path, "w", newline="") as fh:
        fh.write("patient_id," + ",".join(names) + "\n")
        for pid in table.ids:
            fh.write(pid + "," + ",".join(fmt_float(v) for v in table.rows[pid]) + "\n")


def read_clinical_dir(path) -> dict[str, dict]:
    """Load one JSON object per patient from ``path``; the file stem is the patient id."""
    path = Path(path)
    if not path.is_dir():
        raise ValidationError(f"{path}: clinical input must be a directory of .json files")
    out = {}
    for f in sorted(path.glob("*.json")):
        try:
            obj = json.loads(f.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{f}:{exc.lineno}: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise ValidationError(f"{f}: expected a JSON object")
        out[f.stem] = obj
    if not out:
        raise ValidationError(f"{path}: no .json files found")
    return out
