"""Command-line entry point: ``modalsurv {prep,train,predict,eval,synth} CONFIG``.

Everything except the command and the config path comes from the config
file, an INI document with the sections below. Relative paths resolve
against the config file's directory.

.. code-block:: ini

    [paths]
    labels = labels.csv            ; patient_id,time_months,event
    clinical_raw = clinical/       ; one JSON object per patient
    output = out/

    [features]                     ; precomputed modality tables
    wsi = wsi.csv
    mri = mri.csv

    [run]
    profile = task1                ; task1 | task3 | custom
    k = 5
    seeds = 10

    [train]
    learning_rate = 0.001

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bundle as bundle_io
from .datamodel import (
    ModalityTable,
    ModalSurvError,
    NumericalError,
    ValidationError,
    assemble_cohort,
    read_clinical_dir,
    read_labels,
    read_modality_table,
    write_labels,
    write_modality_table,
)
from .deephit import TrainConfig
from .pipeline import (
    CVConfig,
    FoldAssignment,
    GridRow,
    ModalitySpec,
    ensemble_predict,
    generate_synthetic_cohort,
    modality_grid_eval,
    read_predictions,
    run_cox_cv,
    run_cv,
    select_members,
    stratified_kfold,
    write_predictions,
    write_results_table,
)
from .preprocess import apply_pca, encode_clinical, fit_pca, save_pca, write_exclusion_report
from .survcore import concordance

logger = logging.getLogger("modalsurv")

PROFILES = {
    "task1": ("clinical", "mri", "wsi"),
    "task3": ("clinical", "rna", "wsi"),
}

_RUN_KEYS = {
    "profile": str, "modalities": str, "k": int, "seeds": int, "fold_seed": int, "pca_k": int,
    "pca_modalities": str, "pca_scope": str, "ensemble": str, "workers": int, "cox_ridge": float,
    "subsets": str,
}
_SYNTH_KEYS = {"n": int, "censor_rate": float, "seed": int, "signal": float, "output": str, "modalities": str}
_PATH_KEYS = {"labels", "clinical_raw", "output"}
_PREDICT_KEYS = {"bundle", "features_dir", "output"}
_EVAL_KEYS = {"predictions", "labels"}


class ConfigError(ValidationError):
    pass


@dataclass
class RunConfig:
    base_dir: Path
    labels: Path | None = None
    clinical_raw: Path | None = None
    output: Path = Path("out")
    features: dict[str, Path] = field(default_factory=dict)
    profile: str = "custom"
    modalities: tuple[str, ...] = ()
    k: int = 5
    seeds: int = 10
    fold_seed: int = 0
    pca_k: int = 0
    pca_modalities: tuple[str, ...] = ("rna",)
    pca_scope: str = "fold"
    ensemble: str = "all"
    workers: int = 1
    cox_ridge: float = 0.0
    subsets: tuple[tuple[str, ...], ...] = ()
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: dict = field(default_factory=dict)
    predict: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @property
    def prep_dir(self) -> Path:
        return self.output / "prep"

    @property
    def bundle_dir(self) -> Path:
        return self.output / "bundle"

    def cv_config(self) -> CVConfig:
        pca = {m: self.pca_k for m in self.pca_modalities} if (self.pca_k and self.pca_scope == "fold") else {}
        return CVConfig(self.k, tuple(range(self.seeds)), self.fold_seed, pca, self.ensemble, self.workers)


def _split_list(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def load_config(path) -> RunConfig:
    """Parse and validate a config file, reporting every problem at once."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = path.resolve().parent
    rc = RunConfig(base_dir=base)
    errors = []

    def resolve(v):
        p = Path(v)
        return p if p.is_absolute() else base / p

    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    train_over = {}
    known = {"paths", "features", "run", "train", "synth", "predict", "eval"}
    for sec in cp.sections():
        if sec not in known:
            errors.append(f"unknown section [{sec}]")
            continue
        for key, raw in cp.items(sec):
            try:
                if sec == "paths":
                    if key not in _PATH_KEYS:
                        errors.append(f"[paths] unknown key {key!r}")
                    else:
                        setattr(rc, key, resolve(raw))
                elif sec == "features":
                    rc.features[key] = resolve(raw)
                elif sec == "run":
                    if key not in _RUN_KEYS:
                        errors.append(f"[run] unknown key {key!r}")
                        continue
                    val = _RUN_KEYS[key](raw)
                    if key == "modalities":
                        val = _split_list(val)
                    elif key == "pca_modalities":
                        val = _split_list(val)
                    elif key == "subsets":
                        val = tuple(tuple(x.strip() for x in s.split("+")) for s in val.split(";") if s.strip())
                    setattr(rc, key, val)
                elif sec == "train":
                    if key not in train_fields:
                        errors.append(f"[train] unknown key {key!r}")
                    elif key == "hidden_widths":
                        train_over[key] = tuple(int(x) for x in _split_list(raw))
                    else:
                        ftype = type(getattr(TrainConfig(), key))
                        train_over[key] = ftype(raw)
                elif sec == "synth":
                    if key not in _SYNTH_KEYS:
                        errors.append(f"[synth] unknown key {key!r}")
                    else:
                        rc.synth[key] = _SYNTH_KEYS[key](raw)
                elif sec == "predict":
                    if key not in _PREDICT_KEYS:
                        errors.append(f"[predict] unknown key {key!r}")
                    else:
                        rc.predict[key] = resolve(raw)
                elif sec == "eval":
                    if key not in _EVAL_KEYS:
                        errors.append(f"[eval] unknown key {key!r}")
                    else:
                        rc.eval[key] = resolve(raw)
            except ValueError as exc:
                errors.append(f"[{sec}] {key}: {exc}")

    if rc.profile not in PROFILES and rc.profile != "custom":
        errors.append(f"[run] profile must be one of task1, task3, custom (got {rc.profile!r})")
    if not rc.modalities:
        rc.modalities = PROFILES.get(rc.profile, ())
    if rc.pca_scope not in ("fold", "full"):
        errors.append("[run] pca_scope must be 'fold' or 'full'")
    if rc.ensemble not in ("all", "fold"):
        errors.append("[run] ensemble must be 'all' or 'fold'")
    if rc.k < 2 or rc.seeds < 1 or rc.workers < 1:
        errors.append("[run] need k >= 2, seeds >= 1, workers >= 1")
    if not cp.has_option("paths", "output"):
        rc.output = base / "out"
    try:
        rc.train = dataclasses.replace(TrainConfig(), **train_over)
    except (ValidationError, TypeError) as exc:
        errors.append(f"[train] {exc}")
    if errors:
        raise ConfigError("invalid config " + str(path) + ":\n  " + "\n  ".join(errors))
    return rc


def _require(rc: RunConfig, *what: str):
    errors = []
    for w in what:
        if w == "labels":
            if rc.labels is None or not rc.labels.exists():
                errors.append(f"labels file {rc.labels} not found")
        elif w == "modalities":
            if not rc.modalities:
                errors.append("no modalities selected ([run] profile or modalities)")
            for m in rc.modalities:
                if m == "clinical" and "clinical" not in rc.features:
                    if rc.clinical_raw is None or not rc.clinical_raw.is_dir():
                        errors.append(f"clinical raw directory {rc.clinical_raw} not found")
                elif m not in rc.features:
                    errors.append(f"[features] has no path for modality {m!r}")
                elif not rc.features[m].exists():
                    errors.append(f"feature file {rc.features[m]} not found")
    if errors:
        raise ConfigError("\n  ".join(["config validation failed:"] + errors))


# --------------------------------------------------------------------------
# commands

def cmd_prep(rc: RunConfig) -> dict:
    """Encode clinical data, reduce PCA modalities, align, write ``<output>/prep``."""
    _require(rc, "labels", "modalities")
    records = read_labels(rc.labels)
    out = rc.prep_dir
    out.mkdir(parents=True, exist_ok=True)
    tables = {}
    for m in rc.modalities:
        if m == "clinical" and "clinical" not in rc.features:
            table = encode_clinical(read_clinical_dir(rc.clinical_raw))
            write_exclusion_report(table, out / "exclusions.txt")
        else:
            table = read_modality_table(rc.features[m], m)
        tables[m] = table
    cohort = assemble_cohort(records, tables, rc.modalities)
    ids = cohort.ids
    report = {"labelled": len(records), "cohort": cohort.n, "events": cohort.n_events,
              "per_modality": {m: len(t.rows) for m, t in tables.items()},
              "dropped": list(cohort.dropped_ids)}
    for m in rc.modalities:
        table = cohort.modality(m)
        if rc.pca_k and m in rc.pca_modalities:
            write_modality_table(table, out / f"{m}_raw.csv")
            pca = fit_pca(table.matrix(ids), rc.pca_k)
            save_pca(pca, out / f"{m}_pca.npy")
            z = apply_pca(pca, table.matrix(ids))
            names = tuple(f"pc{j}" for j in range(pca.k))
            write_modality_table(ModalityTable(m, pca.k, dict(zip(ids, z)), feature_names=names), out / f"{m}.csv")
            report.setdefault("pca", {})[m] = {"k": pca.k, "input_dim": table.dim}
        else:
            write_modality_table(table, out / f"{m}.csv")
    write_labels(cohort.records, out / "labels.csv")
    (out / "alignment.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"prep: {cohort.n} patients ({cohort.n_events} events) in {len(rc.modalities)} modalities; "
          f"{len(cohort.dropped_ids)} labelled patients dropped by the join")
    return report


def _table_path(prep: Path, m: str, rc: RunConfig) -> Path:
    raw = prep / f"{m}_raw.csv"
    if rc.pca_k and m in rc.pca_modalities and rc.pca_scope == "fold" and raw.exists():
        return raw
    return prep / f"{m}.csv"


def _load_prepped(rc: RunConfig, modalities, prep: Path | None = None):
    prep = prep or rc.prep_dir
    if not (prep / "labels.csv").exists():
        raise ValidationError(f"{prep}: run 'prep' first (labels.csv missing)")
    records = read_labels(prep / "labels.csv")
    tables = {}
    for m in modalities:
        p = _table_path(prep, m, rc)
        if not p.exists():
            raise ValidationError(f"{p} not found; run 'prep' first")
        tables[m] = read_modality_table(p, m)
    return assemble_cohort(records, tables, modalities)


def cmd_train(rc: RunConfig) -> dict:
    """Cross-validate, persist every (fold, seed) model and the results table."""
    cohort = _load_prepped(rc, rc.modalities)
    out = rc.bundle_dir
    out.mkdir(parents=True, exist_ok=True)
    fold_file = out / "folds.csv"
    if fold_file.exists():
        folds = FoldAssignment.load(fold_file)
        if folds.k != rc.k or set(folds.folds) != set(cohort.ids):
            raise ValidationError(f"{fold_file} does not match the cohort or k; delete it to regenerate")
    else:
        folds = stratified_kfold(cohort.records, rc.k, rc.fold_seed)
    cv = rc.cv_config()
    res = run_cv(cohort, rc.train, cv, folds=folds)
    for j, c in enumerate(res.fold_c):
        print(f"fold {j}: C={c:.4f}")
    print(f"{'+'.join(res.modalities)}: C={res.summary()} ({len(res.members)} models)")

    rows = []
    if "clinical" in cohort.modality_names:
        fc = run_cox_cv(cohort, folds, ("clinical",), rc.cox_ridge, cv.pca_k)
        rows.append(GridRow("coxph", ("clinical",), fc, folds.k, folds.digest()))
    rows.append(GridRow("modalsurv", res.modalities, res.fold_c, len(res.members), folds.digest()))
    extra = [s for s in rc.subsets if tuple(s) != res.modalities]
    if extra:
        needed = tuple(dict.fromkeys([m for s in extra for m in s]))
        sub_cohort = _load_prepped(rc, needed)
        rows += modality_grid_eval(sub_cohort, extra, rc.train, cv, folds=folds, cox_modalities=None)
    write_results_table(rows, out / "results.csv")

    summary = {"fold_c": [float(c) for c in res.fold_c], "mean_c": res.mean_c, "std_c": res.std_c,
               "pca_scope": rc.pca_scope, "ensemble": rc.ensemble}
    manifest = bundle_io.save_bundle(out, res.members, folds, rc.train, summary)
    return manifest


def cmd_predict(rc: RunConfig) -> Path:
    """Ensemble the bundle's members over new patients' features."""
    bdir = rc.predict.get("bundle", rc.bundle_dir)
    members, manifest = bundle_io.load_bundle(bdir)
    members = select_members(members, rc.ensemble)
    fdir = rc.predict.get("features_dir", rc.prep_dir)
    modalities = manifest["modalities"]
    tables = {}
    for m in modalities:
        p = _table_path(Path(fdir), m, rc)
        if not p.exists():
            raise ValidationError(f"feature file {p} not found")
        tables[m] = read_modality_table(p, m)
    all_ids = sorted(set().union(*(t.rows for t in tables.values())))
    missing = {pid: [m for m in modalities if pid not in tables[m].rows] for pid in all_ids}
    missing = {p: ms for p, ms in missing.items() if ms}
    if missing:
        listing = ", ".join(f"{p} ({'/'.join(ms)})" for p, ms in sorted(missing.items()))
        raise ValidationError(f"patients missing modalities: {listing}")
    feats = {m: tables[m].matrix(all_ids) for m in modalities}
    result = ensemble_predict(members, feats)
    out = rc.predict.get("output", rc.output / "predictions.csv")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, all_ids, result)
    print(f"predict: {len(all_ids)} patients, {len(members)} ensemble members -> {out}")
    return Path(out)


def cmd_eval(rc: RunConfig) -> tuple[float, int]:
    """Harrell's C of a predictions file against labels."""
    pred = rc.eval.get("predictions", rc.output / "predictions.csv")
    labels = rc.eval.get("labels", rc.labels)
    if labels is None:
        raise ConfigError("no labels file ([eval] labels or [paths] labels)")
    ids, _, risk, _ = read_predictions(pred)
    records = read_labels(labels)
    by_id = dict(zip(ids, risk))
    missing = [r.patient_id for r in records if r.patient_id not in by_id]
    if missing:
        raise ValidationError(f"{len(missing)} labelled patients have no prediction: {missing[:10]}")
    r = np.array([by_id[rec.patient_id] for rec in records])
    c, pairs = concordance(r, [rec.time for rec in records], [rec.event for rec in records])
    print(f"C-index: {c:.6f} (comparable pairs: {pairs})")
    return c, pairs


def cmd_synth(rc: RunConfig) -> Path:
    """Write a synthetic cohort in the raw input formats ``prep`` expects."""
    s = rc.synth
    out = Path(s["output"]) if "output" in s else rc.output / "synth"
    if not out.is_absolute():
        out = rc.base_dir / out
    names = _split_list(s["modalities"]) if "modalities" in s else None
    spec = None
    if names:
        presets = {"clinical": ModalitySpec("clinical", 8, (0, 1)), "wsi": ModalitySpec("wsi", 16, (2, 3))}
        spec = tuple(presets.get(m, ModalitySpec(m, 12, ())) for m in names)
    kwargs = {k: s[k] for k in ("n", "censor_rate", "seed", "signal") if k in s}
    if spec:
        kwargs["modality_spec"] = spec
    syn = generate_synthetic_cohort(**kwargs)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(syn.cohort.records, out / "labels.csv")
    for table in syn.cohort.modalities:
        if table.name == "clinical":
            cdir = out / "clinical"
            cdir.mkdir(exist_ok=True)
            for pid in table.ids:
                obj = dict(zip(table.feature_names, (float(v) for v in table.rows[pid])))
                (cdir / f"{pid}.json").write_text(json.dumps(obj, sort_keys=True) + "\n")
        else:
            write_modality_table(table, out / f"{table.name}.csv")
    with open(out / "oracle_risk.csv", "w") as fh:
        fh.write("patient_id,risk\n")
        for pid, r in zip(syn.cohort.ids, syn.oracle_risk):
            fh.write(f"{pid},{float(r)!r}\n")
    print(f"synth: {syn.cohort.n} patients ({syn.cohort.n_events} events) -> {out}")
    return out


COMMANDS = {"prep": cmd_prep, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="modalsurv", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", help="path to the INI config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config)
        COMMANDS[args.command](rc)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, ModalSurvError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
