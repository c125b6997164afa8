"""Time discretization, PMF-derived quantities and Harrell's C-index."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import NumericalError, ValidationError, check_pmf

DEFAULT_K = 30


@dataclass(frozen=True)
class TimeGrid:
    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.ndim != 1 or e.shape[0] < 3:
            raise ValidationError("a time grid needs at least 2 bins")
        if e[0] != 0.0 or np.any(np.diff(e) <= 0):
            raise ValidationError("grid edges must start at 0 and strictly increase")
        e = e.copy()
        e.flags.writeable = False
        object.__setattr__(self, "edges", e)

    @property
    def K(self) -> int:
        return self.edges.shape[0] - 1

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.edges, other.edges)

    def __hash__(self):
        return hash(self.edges.tobytes())


def build_time_grid(times, K: int = DEFAULT_K) -> TimeGrid:
    """Quantile bin edges over the pooled observed times.

    Interior edges sit at the ``j/K`` empirical quantiles. Repeated quantiles
    are collapsed and the widest bin is halved until there are ``K`` bins
    again. The last edge is ``max(times) * (1 + 1e-6)``.
    """
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0 or np.any(~np.isfinite(t)) or np.any(t <= 0):
        raise ValidationError("times must be nonempty, finite and positive")
    if K < 2:
        raise ValidationError("K must be >= 2")
    if np.unique(t).size < 2:
        raise ValidationError("need at least 2 distinct times to build a grid")
    last = t.max() * (1 + 1e-6)
    interior = np.quantile(t, np.arange(1, K) / K)
    edges = np.unique(np.concatenate([[0.0], interior, [last]]))
    edges = edges[(edges >= 0) & (edges <= last)]
    edges = list(edges)
    while len(edges) < K + 1:
        widths = np.diff(edges)
        i = int(np.argmax(widths))
        edges.insert(i + 1, 0.5 * (edges[i] + edges[i + 1]))
    return TimeGrid(np.array(edges))


def bin_index(time, grid: TimeGrid):
    """Left-closed bin of ``time``; times past the last edge clamp to ``K - 1``.

    Accepts a scalar or an array and returns the same shape.
    """
    t = np.asarray(time, dtype=float)
    idx = np.searchsorted(grid.edges, t, side="right") - 1
    idx = np.clip(idx, 0, grid.K - 1)
    if idx.ndim == 0:
        return int(idx)
    return idx.astype(int)


def expected_time(pmf, grid: TimeGrid):
    """Probability-weighted sum of bin midpoints (rowwise for a matrix)."""
    p = check_pmf(pmf)
    if p.shape[-1] != grid.K:
        raise ValidationError(f"pmf has {p.shape[-1]} bins, grid has {grid.K}")
    return p @ grid.midpoints


def survival_curve(pmf) -> np.ndarray:
    """``S[k] = 1 - sum_{j<=k} pmf[j]``, forced non-increasing and >= 0."""
    p = check_pmf(pmf)
    s = 1.0 - np.cumsum(p, axis=-1)
    s = np.minimum.accumulate(s, axis=-1)
    s[..., -1] = 0.0
    return np.clip(s, 0.0, 1.0)


def concordance(risks, times, events) -> tuple[float, int]:
    """Harrell's C and the number of comparable pairs.

    A pair ``(i, j)`` is comparable when ``i`` had an event and
    ``times[i] < times[j]``. Concordant pairs (``risks[i] > risks[j]``) count
    1 and tied risks count 0.5.
    """
    r = np.asarray(risks, dtype=float).ravel()
    t = np.asarray(times, dtype=float).ravel()
    e = np.asarray(events).astype(bool).ravel()
    if not (r.shape == t.shape == e.shape):
        raise ValidationError("risks, times and events must have equal length")
    order = np.argsort(t, kind="stable")
    r, t, e = r[order], t[order], e[order]
    # rank of each time among sorted times, so later[i] = #{j: t_j > t_i}
    n_later = t.size - np.searchsorted(t, t, side="right")
    num = 0.0
    pairs = 0
    for i in np.flatnonzero(e & (n_later > 0)):
        start = t.size - n_later[i]
        rj = r[start:]
        num += np.count_nonzero(r[i] > rj) + 0.5 * np.count_nonzero(r[i] == rj)
        pairs += rj.size
    if pairs == 0:
        raise NumericalError("C-index undefined: no comparable pairs")
    return num / pairs, pairs


def c_index(risks, times, events) -> float:
    return concordance(risks, times, events)[0]


def save_grid(grid: TimeGrid, path) -> None:
    with open(Path(path), "w") as fh:
        fh.write(f"# time grid edges, K={grid.K}\n")
        for e in grid.edges:
            fh.write(repr(float(e)) + "\n")


def load_grid(path) -> TimeGrid:
    return TimeGrid(np.loadtxt(Path(path), comments="#", ndmin=1))
