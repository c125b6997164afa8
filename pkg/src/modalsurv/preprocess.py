"""Clinical encoding, z-score standardization and PCA."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .datamodel import ModalityTable, ValidationError

logger = logging.getLogger(__name__)

CONSTANT_STD = 1e-12

_MIXED = re.compile(r"^\s*([+-]?\d+(?:\.\d+)?)\s*([A-Za-z])\s*$")


def parse_clinical_value(value) -> float | None:
    """Cast one raw clinical value to float, or ``None`` if it is missing.

    Numbers pass through, booleans become 0/1, numeric strings are parsed,
    and mixed strings such as ``"12a"`` become ``12 + 0.1 * 1``.
    """
    if value is None:
        return None
    if isinstance(value, bool):
        return float(value)
    if isinstance(value, (int, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    if not isinstance(value, str):
        return None
    s = value.strip()
    if not s:
        return None
    try:
        v = float(s)
    except ValueError:
        m = _MIXED.match(s)
        if m is None:
            return None
        return float(m.group(1)) + 0.1 * (ord(m.group(2).lower()) - ord("a") + 1)
    return v if math.isfinite(v) else None


def encode_clinical(raw_records: Mapping[str, Mapping], name: str = "clinical") -> ModalityTable:
    """Encode per-patient key/value records into a numeric table.

    Features are the union of keys over all patients, in sorted order. A
    patient with any missing or unparsable value is dropped and reported in
    ``table.excluded`` together with the first offending key.
    """
    keys = sorted({k for rec in raw_records.values() for k in rec})
    if not keys:
        raise ValidationError("clinical records contain no features")
    rows = {}
    excluded = []
    for pid in sorted(raw_records):
        rec = raw_records[pid]
        vec = []
        for k in keys:
            v = parse_clinical_value(rec.get(k))
            if v is None:
                excluded.append((pid, k))
                break
            vec.append(v)
        else:
            rows[pid] = vec
    if not rows:
        raise ValidationError("every clinical record has a missing or unparsable value")
    if excluded:
        logger.info("dropped %d clinical records with missing values", len(excluded))
    return ModalityTable(name, len(keys), rows, excluded=tuple(excluded), feature_names=tuple(keys))


def write_exclusion_report(table: ModalityTable, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {table.name}: {len(table.excluded)} patients excluded\n")
        for pid, key in table.excluded:
            fh.write(f"{pid}\t{key}\n")


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return self.stds < CONSTANT_STD

    @property
    def dim(self) -> int:
        return self.means.shape[0]

    def transform(self, matrix) -> np.ndarray:
        return apply_standardizer(self, matrix)

    def inverse(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z * np.where(self.constant, 0.0, self.stds) + self.means


def fit_standardizer(matrix) -> Standardizer:
    """Per-column mean and population standard deviation."""
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("fit_standardizer needs a 2-D matrix with at least 2 rows")
    return Standardizer(x.mean(axis=0), x.std(axis=0))


def apply_standardizer(std: Standardizer, matrix) -> np.ndarray:
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2 or x.shape[1] != std.dim:
        raise ValidationError(f"expected {std.dim} columns, got shape {x.shape}")
    const = std.constant
    scale = np.where(const, 1.0, std.stds)
    z = (x - std.means) / scale
    z[:, const] = 0.0
    return z


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # k x d, orthonormal rows
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def transform(self, matrix) -> np.ndarray:
        return apply_pca(self, matrix)


def fit_pca(matrix, k: int, rtol: float = 1e-10) -> PcaModel:
    """Top-``k`` principal directions of the column-centred matrix.

    Explained variance uses the ``n - 1`` denominator. Each component is
    signed so that its largest-magnitude loading is positive. Components
    whose singular value is below ``rtol`` times the largest are dropped
    with a warning.
    """
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2:
        raise ValidationError("fit_pca needs a 2-D matrix")
    n, d = x.shape
    if k < 1 or k > min(n - 1, d):
        raise ValidationError(f"k={k} must be in [1, min(rows-1, cols)] = [1, {min(n - 1, d)}]")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    keep = int(np.sum(s[:k] > rtol * max(s[0], 1e-300)))
    if keep < k:
        logger.warning("matrix rank %d is below requested k=%d; keeping %d components", keep, k, keep)
    if keep == 0:
        raise ValidationError("matrix has zero variance")
    comps = vt[:keep].copy()
    lead = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(keep), lead])
    comps *= signs[:, None]
    return PcaModel(mean, comps, s[:keep] ** 2 / (n - 1))


def apply_pca(pca: PcaModel, matrix) -> np.ndarray:
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2 or x.shape[1] != pca.mean.shape[0]:
        raise ValidationError(f"expected {pca.mean.shape[0]} columns, got shape {x.shape}")
    return (x - pca.mean) @ pca.components.T


def save_pca(pca: PcaModel, path) -> None:
    """Flat float64 ``.npy``: ``[k, d, mean..., components row-major..., explained_variance...]``."""
    k, d = pca.components.shape
    flat = np.concatenate([[k, d], pca.mean, pca.components.ravel(), pca.explained_variance])
    np.save(Path(path), flat.astype(np.float64))


def load_pca(path) -> PcaModel:
    flat = np.load(Path(path))
    k, d = int(flat[0]), int(flat[1])
    if flat.shape[0] != 2 + d + k * d + k:
        raise ValidationError(f"{path}: corrupt PCA file")
    mean = flat[2 : 2 + d]
    comps = flat[2 + d : 2 + d + k * d].reshape(k, d)
    return PcaModel(mean.copy(), comps.copy(), flat[2 + d + k * d :].copy())
