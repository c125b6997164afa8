"""On-disk model bundle: fold file, grid, transforms, member weights, manifest.

Every numeric file is a flat float64 ``.npy`` so that reruns produce
byte-identical files; the manifest records a SHA-256 per file. Wall-clock
timestamps live only under the manifest's ``metadata`` key.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import ValidationError
from .deephit import TrainConfig, load_params, save_params
from .pipeline import FeatureTransform, FoldAssignment, Member
from .preprocess import PcaModel, Standardizer
from .survcore import load_grid, save_grid

BUNDLE_VERSION = 1


def transform_to_flat(tr: FeatureTransform) -> np.ndarray:
    """``[d, means, stds, has_pca, (k, d_in, mean, components, variance)]``."""
    s = tr.standardizer
    parts = [[s.dim], s.means, s.stds]
    if tr.pca is None:
        parts.append([0])
    else:
        p = tr.pca
        k, d = p.components.shape
        parts += [[1, k, d], p.mean, p.components.ravel(), p.explained_variance]
    return np.concatenate([np.asarray(x, dtype=float) for x in parts])


def transform_from_flat(flat) -> FeatureTransform:
    d = int(flat[0])
    means, stds = flat[1 : 1 + d], flat[1 + d : 1 + 2 * d]
    pos = 1 + 2 * d
    pca = None
    if int(flat[pos]) == 1:
        k, din = int(flat[pos + 1]), int(flat[pos + 2])
        pos += 3
        mean = flat[pos : pos + din]
        comps = flat[pos + din : pos + din + k * din].reshape(k, din)
        var = flat[pos + din + k * din : pos + din + k * din + k]
        pca = PcaModel(mean.copy(), comps.copy(), var.copy())
    return FeatureTransform(Standardizer(means.copy(), stds.copy()), pca)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_bundle(out_dir, members: Sequence[Member], folds: FoldAssignment, config: TrainConfig,
                summary: dict | None = None) -> dict:
    """Write a complete bundle to ``out_dir`` and return its manifest."""
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "transforms").mkdir(exist_ok=True)
    folds.save(out / "folds.csv")
    grid = members[0].grid
    save_grid(grid, out / "grid.txt")

    written_tr = set()
    entries = []
    for m in members:
        stem = f"fold{m.fold}_seed{m.seed}"
        save_params(m.params, out / "models" / stem, config, extra={"fold": m.fold, "seed": m.seed})
        for name, tr in m.transforms.items():
            key = (m.fold, name)
            if key not in written_tr:
                np.save(out / "transforms" / f"fold{m.fold}_{name}.npy", transform_to_flat(tr))
                written_tr.add(key)
        entries.append({"fold": m.fold, "seed": m.seed, "model": f"models/{stem}",
                        "val_c": m.val_c, "best_epoch": m.best_epoch})

    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "bundle_version": BUNDLE_VERSION,
        "modalities": list(members[0].params.modalities),
        "K": grid.K,
        "k": folds.k,
        "seeds": sorted({m.seed for m in members}),
        "config": asdict(config),
        "members": entries,
        "hashes": {str(p.relative_to(out)): _sha(p) for p in files},
        "summary": summary or {},
        "metadata": {"created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_bundle(bundle_dir) -> tuple[list[Member], dict]:
    """Load members (with transforms and grid) from a bundle directory."""
    root = Path(bundle_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ValidationError(f"{root}: no manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("bundle_version") != BUNDLE_VERSION:
        raise ValidationError(f"{root}: unsupported bundle version {manifest.get('bundle_version')}")
    for rel, digest in manifest["hashes"].items():
        p = root / rel
        if not p.exists() or _sha(p) != digest:
            raise ValidationError(f"{root}: file {rel} is missing or does not match the manifest")
    grid = load_grid(root / "grid.txt")
    members = []
    cache = {}
    for e in manifest["members"]:
        params, _ = load_params(root / e["model"])
        transforms = {}
        for name in params.modalities:
            key = (e["fold"], name)
            if key not in cache:
                cache[key] = transform_from_flat(np.load(root / "transforms" / f"fold{e['fold']}_{name}.npy"))
            transforms[name] = cache[key]
        members.append(Member(e["fold"], e["seed"], params, transforms, grid, e["val_c"], e["best_epoch"]))
    return members, manifest
