"""Cross-validation, seed repeats, ensembling and the modality-subset grid.

Also holds the synthetic cohort generator used to check the whole stack at
desk scale.
"""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import coxph
from .datamodel import Cohort, ModalityTable, NumericalError, SurvivalRecord, ValidationError, fmt_float
from .deephit import Batch, ModelParams, TrainConfig, forward, train_fold
from .preprocess import PcaModel, Standardizer, apply_pca, apply_standardizer, fit_pca, fit_standardizer
from .survcore import TimeGrid, build_time_grid, c_index, expected_time, survival_curve

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# folds

@dataclass(frozen=True)
class FoldAssignment:
    folds: Mapping[str, int]
    k: int
    seed: int

    def indices(self, ids: Sequence[str]) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(train, held_out)`` index arrays into ``ids`` for each fold."""
        missing = [p for p in ids if p not in self.folds]
        if missing:
            raise ValidationError(f"fold assignment lacks patients {missing[:5]}")
        f = np.array([self.folds[p] for p in ids])
        return [(np.flatnonzero(f != j), np.flatnonzero(f == j)) for j in range(self.k)]

    def to_text(self) -> str:
        lines = [f"# k={self.k} seed={self.seed}", "patient_id,fold"]
        lines += [f"{p},{self.folds[p]}" for p in sorted(self.folds)]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "FoldAssignment":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValidationError(f"{path}: missing '# k=.. seed=..' comment line")
        meta = dict(tok.split("=") for tok in lines[0][1:].split())
        if lines[1].strip() != "patient_id,fold":
            raise ValidationError(f"{path}:2: header must be patient_id,fold")
        k, seed = int(meta["k"]), int(meta["seed"])
        folds = {}
        for lineno, ln in enumerate(lines[2:], start=3):
            if not ln.strip():
                continue
            pid, f = ln.split(",")
            if not 0 <= int(f) < k:
                raise ValidationError(f"{path}:{lineno}: fold {f} out of range")
            folds[pid] = int(f)
        return cls(folds, k, seed)


def stratified_kfold(records: Sequence[SurvivalRecord], k: int, seed: int) -> FoldAssignment:
    """Event-stratified k-fold assignment.

    Each stratum is sorted by id, shuffled with ``seed`` and dealt
    round-robin; the censored stratum continues the deal where the event
    stratum stopped so fold sizes differ by at most one.
    """
    if k < 2:
        raise ValidationError("k must be >= 2")
    events = sorted(r.patient_id for r in records if r.event)
    censored = sorted(r.patient_id for r in records if not r.event)
    if len(events) < k or len(censored) < k:
        raise ValidationError(
            f"each stratum needs >= k={k} patients (events={len(events)}, censored={len(censored)})"
        )
    rng = np.random.default_rng(seed)
    folds = {}
    offset = 0
    for stratum in (events, censored):
        perm = rng.permutation(len(stratum))
        for pos, i in enumerate(perm):
            folds[stratum[i]] = (offset + pos) % k
        offset = (offset + len(stratum)) % k
    return FoldAssignment(folds, k, seed)


def check_stratification(fa: FoldAssignment, records: Sequence[SurvivalRecord]) -> bool:
    """Every fold's event count is within one patient of its proportional share."""
    n = len(records)
    rate = sum(r.event for r in records) / n
    for j in range(fa.k):
        members = [r for r in records if fa.folds[r.patient_id] == j]
        n_ev = sum(r.event for r in members)
        if abs(n_ev - rate * len(members)) > 1.0:
            return False
    return True


# --------------------------------------------------------------------------
# fold-scoped feature transforms

@dataclass(frozen=True)
class FeatureTransform:
    """Optional PCA followed by z-scoring, both fitted on training rows."""

    standardizer: Standardizer
    pca: PcaModel | None = None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.pca is not None:
            x = apply_pca(self.pca, x)
        return apply_standardizer(self.standardizer, x)


def fit_transform(x, pca_k: int | None = None) -> FeatureTransform:
    pca = fit_pca(x, pca_k) if pca_k else None
    z = apply_pca(pca, x) if pca is not None else x
    return FeatureTransform(fit_standardizer(z), pca)


def fit_transforms(cohort: Cohort, modalities: Sequence[str], pca_k: Mapping[str, int] | None = None):
    pca_k = pca_k or {}
    return {m: fit_transform(cohort.features(m), pca_k.get(m)) for m in modalities}


# --------------------------------------------------------------------------
# cross-validation

@dataclass(frozen=True)
class CVConfig:
    k: int = 5
    seeds: tuple[int, ...] = tuple(range(10))
    fold_seed: int = 0
    pca_k: Mapping[str, int] = field(default_factory=dict)
    ensemble: str = "all"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValidationError("need at least one seed")
        if self.ensemble not in ("all", "fold"):
            raise ValidationError("ensemble must be 'all' or 'fold'")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")


@dataclass
class Member:
    """One trained (fold, seed) model with its fold-fitted transforms."""

    fold: int
    seed: int
    params: ModelParams
    transforms: dict[str, FeatureTransform]
    grid: TimeGrid
    val_c: float = float("nan")
    best_epoch: int = 0
    history: list = field(default_factory=list)

    def predict_pmf(self, features: Mapping[str, np.ndarray]) -> np.ndarray:
        xs = {m: self.transforms[m](features[m]) for m in self.params.modalities}
        return forward(xs, self.params)


@dataclass
class CVResult:
    members: list[Member]
    fold_c: np.ndarray  # (k,), seed-averaged
    seed_c: np.ndarray  # (k, n_seeds)
    folds: FoldAssignment
    grid: TimeGrid
    modalities: tuple[str, ...]

    @property
    def mean_c(self) -> float:
        return float(np.mean(self.fold_c))

    @property
    def std_c(self) -> float:
        return fold_std(self.fold_c)

    def summary(self) -> str:
        return format_mean_std(self.fold_c)


def fold_std(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(np.std(v, ddof=1)) if v.size > 1 else 0.0


def format_mean_std(values, digits: int = 3) -> str:
    """``"0.843±0.08"``-style summary of fold-level values."""
    return f"{np.mean(values):.{digits}f}±{fold_std(values):.2f}"


def _train_job(args):
    fold, seed, train, held, modalities, grid, config, pca_k = args
    transforms = fit_transforms(train, modalities, pca_k)
    feats = [transforms[m](train.features(m)) for m in modalities]
    batch = Batch.from_arrays(feats, train.times, train.events, grid)
    val_feats = {m: transforms[m](held.features(m)) for m in modalities}
    res = train_fold(batch, val_feats, held.times, held.events, grid, replace(config, seed=seed), modalities)
    return Member(fold, seed, res.params, transforms, grid, res.best_val_c, res.best_epoch, res.history)


def run_cv(cohort: Cohort, config: TrainConfig, cv: CVConfig = CVConfig(), folds: FoldAssignment | None = None,
           modalities: Sequence[str] | None = None, grid: TimeGrid | None = None) -> CVResult:
    """Train one model per (fold, seed) and score each on its held-out fold.

    Seed C-indices are averaged within a fold; the reported spread is over
    the fold means. The time grid is shared by all members so their PMFs
    can be averaged.
    """
    modalities = tuple(modalities or cohort.modality_names)
    if folds is None:
        folds = stratified_kfold(cohort.records, cv.k, cv.fold_seed)
    if grid is None:
        grid = build_time_grid(cohort.times, config.K)
    splits = folds.indices(cohort.ids)
    for j, (_, held) in enumerate(splits):
        try:
            c_index(np.zeros(held.size), cohort.times[held], cohort.events[held])
        except NumericalError:
            raise NumericalError(f"fold {j}: validation C-index undefined (no comparable pairs)") from None

    jobs = []
    for j, (tr, held) in enumerate(splits):
        train, held_c = cohort.subset(tr), cohort.subset(held)
        for s in cv.seeds:
            jobs.append((j, s, train, held_c, modalities, grid, config, dict(cv.pca_k)))
    if cv.workers > 1:
        with ProcessPoolExecutor(max_workers=cv.workers) as pool:
            members = list(pool.map(_train_job, jobs))
    else:
        members = [_train_job(a) for a in jobs]

    seed_c = np.array([m.val_c for m in members]).reshape(len(splits), len(cv.seeds))
    for j in range(len(splits)):
        logger.info("fold %d: C=%.4f over %d seeds", j, seed_c[j].mean(), len(cv.seeds))
    return CVResult(members, seed_c.mean(axis=1), seed_c, folds, grid, modalities)


def run_cox_cv(cohort: Cohort, folds: FoldAssignment, modalities: Sequence[str] = ("clinical",),
               ridge: float = 0.0, pca_k: Mapping[str, int] | None = None) -> np.ndarray:
    """Held-out C-index of the Cox baseline on each fold."""
    out = []
    for j, (tr, held) in enumerate(folds.indices(cohort.ids)):
        train, test = cohort.subset(tr), cohort.subset(held)
        transforms = fit_transforms(train, modalities, pca_k)
        Xtr = np.hstack([transforms[m](train.features(m)) for m in modalities])
        Xte = np.hstack([transforms[m](test.features(m)) for m in modalities])
        keep = Xtr.std(axis=0) > 1e-12
        model = coxph.fit_coxph(Xtr[:, keep], train.times, train.events, ridge=ridge)
        out.append(c_index(coxph.cox_risk(model, Xte[:, keep]), test.times, test.events))
    return np.array(out)


# --------------------------------------------------------------------------
# ensembling

@dataclass(frozen=True)
class EnsembleResult:
    pmf: np.ndarray  # (n, K)
    expected_time: np.ndarray
    risk: np.ndarray
    survival: np.ndarray


def select_members(members: Sequence[Member], mode: str = "all") -> list[Member]:
    """All members, or (``mode="fold"``) the first seed of each fold."""
    if mode == "all":
        return list(members)
    if mode == "fold":
        first = {}
        for m in members:
            first.setdefault(m.fold, m)
        return [first[f] for f in sorted(first)]
    raise ValidationError(f"unknown ensemble mode {mode!r}")


def ensemble_pmfs(pmfs: Sequence[np.ndarray], grid: TimeGrid) -> EnsembleResult:
    P = np.mean(np.stack([np.atleast_2d(p) for p in pmfs]), axis=0)
    P = P / P.sum(axis=1, keepdims=True)
    et = expected_time(P, grid)
    return EnsembleResult(P, et, -et, survival_curve(P))


def ensemble_predict(members: Sequence[Member], features: Mapping[str, np.ndarray]) -> EnsembleResult:
    """Unweighted mean of member PMFs on raw (untransformed) features.

    Each member applies its own fold-fitted transforms first.
    """
    if not members:
        raise ValidationError("no members to ensemble")
    grid = members[0].grid
    for m in members[1:]:
        if m.grid != grid:
            raise ValidationError("ensemble members use different time grids")
    return ensemble_pmfs([m.predict_pmf(features) for m in members], grid)


# --------------------------------------------------------------------------
# modality grid

@dataclass(frozen=True)
class GridRow:
    model: str
    subset: tuple[str, ...]
    fold_c: np.ndarray
    n_models: int
    folds_digest: str

    @property
    def mean_c(self) -> float:
        return float(np.mean(self.fold_c))

    @property
    def std_c(self) -> float:
        return fold_std(self.fold_c)

    @property
    def label(self) -> str:
        return "+".join(self.subset)


def modality_grid_eval(cohort: Cohort, subsets: Sequence[Sequence[str]], config: TrainConfig,
                       cv: CVConfig = CVConfig(), folds: FoldAssignment | None = None,
                       cox_modalities: Sequence[str] | None = ("clinical",), cox_ridge: float = 0.0) -> list[GridRow]:
    """Cross-validate each modality subset on one shared fold assignment.

    The first row is the Cox baseline on ``cox_modalities`` (skipped when
    ``None``).
    """
    if folds is None:
        folds = stratified_kfold(cohort.records, cv.k, cv.fold_seed)
    grid = build_time_grid(cohort.times, config.K)
    rows = []
    if cox_modalities:
        fc = run_cox_cv(cohort, folds, cox_modalities, cox_ridge, cv.pca_k)
        rows.append(GridRow("coxph", tuple(cox_modalities), fc, folds.k, folds.digest()))
    for subset in subsets:
        subset = tuple(subset)
        if not subset:
            raise ValidationError("empty modality subset")
        res = run_cv(cohort, config, cv, folds=folds, modalities=subset, grid=grid)
        rows.append(GridRow("modalsurv", subset, res.fold_c, len(res.members), res.folds.digest()))
    return rows


def write_results_table(rows: Sequence[GridRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("model,subset,mean_c,std_c,n_models\n")
        for r in rows:
            fh.write(f"{r.model},{r.label},{r.mean_c:.6f},{r.std_c:.6f},{r.n_models}\n")


# --------------------------------------------------------------------------
# synthetic cohorts

@dataclass(frozen=True)
class ModalitySpec:
    """A synthetic modality: ``dim`` columns carrying latent ``factors``.

    The first ``2 * len(factors)`` columns mix the factors with noise; the
    rest are pure-noise distractors. ``factors=()`` gives a noise modality.
    """

    name: str
    dim: int
    factors: tuple[int, ...] = ()


DEFAULT_MODALITIES = (
    ModalitySpec("clinical", 8, (0, 1)),
    ModalitySpec("wsi", 16, (2, 3)),
    ModalitySpec("mri", 12, ()),
)


@dataclass(frozen=True)
class SyntheticCohort:
    cohort: Cohort
    oracle_risk: np.ndarray
    latent: np.ndarray
    event_times: np.ndarray


def generate_synthetic_cohort(
    n: int = 500,
    modality_spec: Sequence[ModalitySpec] = DEFAULT_MODALITIES,
    censor_rate: float = 0.35,
    seed: int = 0,
    linear: Sequence[float] | None = (1.0, 0.8, 1.0, 0.8),
    interactions: Sequence[tuple[int, int, float]] = ((0, 2, 0.6),),
    signal: float = 1.5,
    feature_noise: float = 0.3,
    base_hazard: float = 1 / 24,
) -> SyntheticCohort:
    """Exponential-hazard cohort whose log-hazard depends on latent factors.

    ``risk = signal * (linear . z + sum coef * z_a * z_b)``; event times are
    exponential with rate ``base_hazard * exp(risk)`` (months). Censoring
    times are uniform on ``[0, c]`` with ``c`` found by bisection so the
    censored fraction matches ``censor_rate``.
    """
    if n < 20:
        raise ValidationError("n must be >= 20")
    if not 0.0 <= censor_rate < 1.0:
        raise ValidationError("censor_rate must be in [0, 1)")
    used = [f for s in modality_spec for f in s.factors] + [f for a, b, _ in interactions for f in (a, b)]
    n_factors = max([len(linear or ())] + [f + 1 for f in used])
    lin = np.zeros(n_factors)
    if linear is not None:
        lin[: len(linear)] = linear

    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, n_factors))
    risk = z @ lin
    for a, b, coef in interactions:
        risk = risk + coef * z[:, a] * z[:, b]
    risk = signal * risk

    tables = []
    ids = [f"P{i:04d}" for i in range(n)]
    for spec in modality_spec:
        x = feature_noise * rng.normal(size=(n, spec.dim))
        if spec.factors:
            n_sig = min(spec.dim, 2 * len(spec.factors))
            load = rng.normal(size=(len(spec.factors), n_sig))
            x[:, :n_sig] += z[:, list(spec.factors)] @ load
        names = tuple(f"{spec.name}_{j}" for j in range(spec.dim))
        tables.append(ModalityTable(spec.name, spec.dim, dict(zip(ids, x)), feature_names=names))

    T = rng.exponential(size=n) / (base_hazard * np.exp(risk))
    T = np.maximum(T, 1e-6)
    u = rng.random(n)
    if censor_rate == 0:
        obs, ev = T, np.ones(n, dtype=bool)
    else:
        lo, hi = 0.0, T.max() / max(u.min(), 1e-12) * 2
        for _ in range(200):
            c = 0.5 * (lo + hi)
            if np.mean(u * c < T) > censor_rate:
                lo = c
            else:
                hi = c
        C = np.maximum(u * hi, 1e-6)
        ev = T <= C
        obs = np.where(ev, T, C)
    records = tuple(SurvivalRecord(p, float(t), bool(e)) for p, t, e in zip(ids, obs, ev))
    return SyntheticCohort(Cohort(records, tuple(tables)), risk, z, T)


def write_predictions(path, ids: Sequence[str], result: EnsembleResult) -> None:
    """``patient_id,expected_time_months,risk,S_0..S_{K-1}``."""
    K = result.pmf.shape[1]
    with open(path, "w") as fh:
        fh.write("patient_id,expected_time_months,risk," + ",".join(f"S_{k}" for k in range(K)) + "\n")
        for i, pid in enumerate(ids):
            vals = [result.expected_time[i], result.risk[i], *result.survival[i]]
            fh.write(pid + "," + ",".join(fmt_float(v) for v in vals) + "\n")


def read_predictions(path):
    """Return ``(ids, expected_time, risk, survival)`` from a predictions file."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("patient_id,expected_time_months,risk"):
        raise ValidationError(f"{path}: not a predictions file")
    ids, et, risk, surv = [], [], [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-numeric value") from None
        ids.append(parts[0])
        et.append(vals[0])
        risk.append(vals[1])
        surv.append(vals[2:])
    return ids, np.array(et), np.array(risk), np.array(surv)
