"""The multimodal discrete-time survival network.

Architecture, per patient::

    x_m --(linear + ReLU)--> e_m (embed_dim)          one per modality
    E = [e_1..e_M] --(single-head self-attention over modalities)--> O
    concat(O) --(FC + ReLU + dropout)*--> logits (K) --softmax--> pmf

Loss is the mean discrete-time negative log-likelihood plus a weighted
pairwise ranking term plus an L2 penalty on the projection weights. All
derivatives are computed by hand in :func:`gradient`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import ValidationError
from .survcore import TimeGrid, bin_index, c_index, expected_time

PROB_FLOOR = 1e-7
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    K: int = 30
    dropout: float = 0.25
    l2_projection: float = 1e-4
    alpha_rank: float = 0.5
    sigma_rank: float = 0.1
    max_epochs: int = 200
    patience: int = 10
    hidden_widths: tuple[int, ...] = (128, 64)
    embed_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.K < 2:
            raise ValidationError("K must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        if self.l2_projection < 0 or self.alpha_rank < 0:
            raise ValidationError("l2_projection and alpha_rank must be >= 0")
        if self.sigma_rank <= 0:
            raise ValidationError("sigma_rank must be > 0")
        if self.max_epochs < 1 or self.patience < 0:
            raise ValidationError("max_epochs must be >= 1 and patience >= 0")
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden_widths):
            raise ValidationError("layer widths must be >= 1")


@dataclass
class ModelParams:
    """Named parameter tensors plus the modality order they were built for."""

    modalities: tuple[str, ...]
    tensors: dict[str, np.ndarray]

    def __getitem__(self, key):
        return self.tensors[key]

    def keys(self):
        return self.tensors.keys()

    def copy(self) -> "ModelParams":
        return ModelParams(self.modalities, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.modalities, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    @property
    def n_hidden(self) -> int:
        return sum(1 for k in self.tensors if k.startswith("fc_W"))

    @property
    def embed_dim(self) -> int:
        return self.tensors["attn_Q"].shape[0]

    @property
    def K(self) -> int:
        return self.tensors["out_b"].shape[0]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self.tensors.items()]

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    @classmethod
    def unflatten(cls, modalities, layout, flat) -> "ModelParams":
        tensors = {}
        pos = 0
        for name, shape in layout:
            size = int(np.prod(shape))
            tensors[name] = np.array(flat[pos : pos + size], dtype=float).reshape(shape)
            pos += size
        if pos != len(flat):
            raise ValidationError("flat parameter vector does not match layout")
        return cls(tuple(modalities), tensors)


def proj_W(m):
    return f"proj_W:{m}"


def proj_b(m):
    return f"proj_b:{m}"


def init_params(modality_dims: Mapping[str, int], config: TrainConfig, seed: int | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, fully determined by ``seed``."""
    if not modality_dims or any(d < 1 for d in modality_dims.values()):
        raise ValidationError("modality_dims must be nonempty with positive dims")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    D = config.embed_dim

    def glorot(fan_out, fan_in):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_out, fan_in))

    t = {}
    for m, d in modality_dims.items():
        t[proj_W(m)] = glorot(D, d)
        t[proj_b(m)] = np.zeros(D)
    for name in ("attn_Q", "attn_K", "attn_V"):
        t[name] = glorot(D, D)
    width = len(modality_dims) * D
    for l, h in enumerate(config.hidden_widths):
        t[f"fc_W{l}"] = glorot(h, width)
        t[f"fc_b{l}"] = np.zeros(h)
        width = h
    t["out_W"] = glorot(config.K, width)
    t["out_b"] = np.zeros(config.K)
    return ModelParams(tuple(modality_dims), t)


# --------------------------------------------------------------------------
# building blocks

def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def project_modality(x, W, b) -> np.ndarray:
    """``max(0, W x + b)`` for a vector ``x`` or each row of a matrix."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != W.shape[1]:
        raise ValidationError(f"feature length {x.shape[-1]} does not match projection input {W.shape[1]}")
    return np.maximum(x @ W.T + b, 0.0)


def _attention(E, WQ, WK, WV):
    D = WQ.shape[0]
    Q, Km, V = E @ WQ, E @ WK, E @ WV
    A = _softmax(Q @ np.swapaxes(Km, -1, -2) / np.sqrt(D))
    return A @ V, (Q, Km, V, A)


def cross_attention_fuse(embeddings, params: ModelParams, return_weights: bool = False):
    """Scaled dot-product attention across modality embeddings.

    ``embeddings`` is ``(M, D)`` for one patient or ``(n, M, D)`` for a
    batch; the attended rows are concatenated into a length ``M * D``
    vector per patient.
    """
    E = np.asarray(embeddings, dtype=float)
    O, (_, _, _, A) = _attention(E, params["attn_Q"], params["attn_K"], params["attn_V"])
    out = O.reshape(*O.shape[:-2], -1)
    return (out, A) if return_weights else out


def _as_inputs(features, params: ModelParams):
    if isinstance(features, Mapping):
        try:
            xs = [np.asarray(features[m], dtype=float) for m in params.modalities]
        except KeyError as exc:
            raise ValidationError(f"missing features for modality {exc.args[0]!r}") from None
    else:
        xs = [np.asarray(x, dtype=float) for x in features]
        if len(xs) != len(params.modalities):
            raise ValidationError(f"expected {len(params.modalities)} modality inputs, got {len(xs)}")
    single = xs[0].ndim == 1
    xs = [np.atleast_2d(x) for x in xs]
    n = xs[0].shape[0]
    for m, x in zip(params.modalities, xs):
        W = params[proj_W(m)]
        if x.ndim != 2 or x.shape[1] != W.shape[1]:
            raise ValidationError(f"modality {m!r}: expected {W.shape[1]} features, got shape {x.shape}")
        if x.shape[0] != n:
            raise ValidationError("all modalities must have the same number of rows")
    return xs, single


def dropout_masks(params: ModelParams, n: int, rate: float, rng) -> list[np.ndarray | None]:
    """Inverted-dropout masks for each hidden FC layer."""
    if rate <= 0:
        return [None] * params.n_hidden
    masks = []
    for l in range(params.n_hidden):
        h = params[f"fc_b{l}"].shape[0]
        masks.append((rng.random((n, h)) >= rate) / (1.0 - rate))
    return masks


def _forward(xs, params: ModelParams, masks):
    cache = {"xs": xs, "pre_proj": [], "masks": masks}
    embs = []
    for m, x in zip(params.modalities, xs):
        pre = x @ params[proj_W(m)].T + params[proj_b(m)]
        cache["pre_proj"].append(pre)
        embs.append(np.maximum(pre, 0.0))
    E = np.stack(embs, axis=1)
    O, att = _attention(E, params["attn_Q"], params["attn_K"], params["attn_V"])
    cache["E"], cache["att"] = E, att
    a = O.reshape(O.shape[0], -1)
    cache["acts"] = [a]
    cache["pre_fc"] = []
    for l in range(params.n_hidden):
        pre = a @ params[f"fc_W{l}"].T + params[f"fc_b{l}"]
        a = np.maximum(pre, 0.0)
        if masks[l] is not None:
            a = a * masks[l]
        cache["pre_fc"].append(pre)
        cache["acts"].append(a)
    logits = a @ params["out_W"].T + params["out_b"]
    return _softmax(logits), cache


def forward(features, params: ModelParams, config: TrainConfig | None = None, training_mode: bool = False, rng=None):
    """PMF over time bins for each patient.

    ``features`` maps modality name to an ``(n, d_m)`` matrix (or a length
    ``d_m`` vector for one patient). Dropout is applied only when
    ``training_mode`` is set, drawing masks from ``rng``.
    """
    xs, single = _as_inputs(features, params)
    rate = config.dropout if (training_mode and config is not None) else 0.0
    if rate > 0 and rng is None:
        rng = np.random.default_rng(config.seed)
    masks = dropout_masks(params, xs[0].shape[0], rate, rng)
    pmf, _ = _forward(xs, params, masks)
    return pmf[0] if single else pmf


# --------------------------------------------------------------------------
# losses

def nll_loss(pmf, bin: int, event: bool) -> float:
    """Negative log-likelihood of one observation under a PMF.

    An event in bin ``b`` scores ``pmf[b]``; a censoring in bin ``b`` scores
    the strict tail ``sum(pmf[b+1:])``. Probabilities are floored at 1e-7.
    """
    p = np.asarray(pmf, dtype=float)
    prob = p[bin] if event else p[bin + 1 :].sum()
    return float(-np.log(max(prob, PROB_FLOOR)))


def _nll_terms(P, bins, events):
    """Per-patient NLL and its derivative with respect to ``P``."""
    n, K = P.shape
    rows = np.arange(n)
    tail = np.concatenate([np.cumsum(P[:, ::-1], axis=1)[:, ::-1], np.zeros((n, 1))], axis=1)
    prob = np.where(events, P[rows, bins], tail[rows, bins + 1])
    loss = -np.log(np.maximum(prob, PROB_FLOOR))
    live = prob > PROB_FLOOR
    dP = np.zeros_like(P)
    ev = events & live
    dP[rows[ev], bins[ev]] = -1.0 / prob[ev]
    cen = ~events & live
    above = np.arange(K)[None, :] > bins[:, None]
    dP += np.where(cen[:, None] & above, -1.0 / np.where(live, prob, 1.0)[:, None], 0.0)
    return loss, dP


def _ranking_terms(P, bins, events, sigma):
    n, _ = P.shape
    F = np.cumsum(P, axis=1)
    own = F[np.arange(n), bins]
    G = F[:, bins].T  # G[i, j] = F_j(bins[i])
    mask = events[:, None] & (bins[:, None] < bins[None, :])
    n_pairs = int(mask.sum())
    if n_pairs == 0:
        return 0.0, np.zeros_like(P)
    term = np.where(mask, np.exp(-(own[:, None] - G) / sigma), 0.0)
    loss = term.sum() / n_pairs
    W = term / (sigma * n_pairs)
    dF = np.zeros_like(P)
    dF[np.arange(n), bins] -= W.sum(axis=1)
    onehot = np.zeros_like(P)
    onehot[np.arange(n), bins] = 1.0
    dF += W.T @ onehot
    dP = np.cumsum(dF[:, ::-1], axis=1)[:, ::-1]
    return float(loss), dP


def ranking_loss(pmfs, bins, events, sigma: float) -> float:
    """Mean of ``exp(-(F_i(b_i) - F_j(b_i)) / sigma)`` over comparable pairs.

    A pair is comparable when ``i`` had an event and ``bins[i] < bins[j]``;
    ``F`` is the cumulative PMF. Zero when no pair qualifies.
    """
    P = np.atleast_2d(np.asarray(pmfs, dtype=float))
    loss, _ = _ranking_terms(P, np.asarray(bins, dtype=int), np.asarray(events, dtype=bool), sigma)
    return loss


@dataclass(frozen=True)
class Batch:
    """Model inputs with discretized targets."""

    features: tuple[np.ndarray, ...]
    bins: np.ndarray
    events: np.ndarray

    @classmethod
    def from_arrays(cls, features, times, events, grid: TimeGrid):
        feats = tuple(np.atleast_2d(np.asarray(f, dtype=float)) for f in features)
        return cls(feats, bin_index(np.asarray(times, dtype=float), grid), np.asarray(events, dtype=bool))

    @property
    def n(self) -> int:
        return self.bins.shape[0]


def _check_batch(batch: Batch, params: ModelParams):
    if batch.n == 0:
        raise ValidationError("empty batch")
    if np.any(batch.bins < 0) or np.any(batch.bins >= params.K):
        raise ValidationError("bin index out of range")


def _l2(params: ModelParams) -> float:
    return float(sum(np.sum(params[proj_W(m)] ** 2) for m in params.modalities))


def loss_terms(batch: Batch, params: ModelParams, config: TrainConfig, masks=None) -> dict:
    _check_batch(batch, params)
    xs, _ = _as_inputs(batch.features, params)
    if masks is None:
        masks = [None] * params.n_hidden
    P, _ = _forward(xs, params, masks)
    nll, _ = _nll_terms(P, batch.bins, batch.events)
    rank, _ = _ranking_terms(P, batch.bins, batch.events, config.sigma_rank)
    return {"nll": float(nll.mean()), "rank": rank, "l2": _l2(params)}


def total_loss(batch: Batch, params: ModelParams, config: TrainConfig, masks=None) -> float:
    """``mean NLL + alpha_rank * ranking + l2_projection * sum |W_m|^2``."""
    t = loss_terms(batch, params, config, masks)
    return t["nll"] + config.alpha_rank * t["rank"] + config.l2_projection * t["l2"]


def gradient(batch: Batch, params: ModelParams, config: TrainConfig, masks=None, return_loss: bool = False):
    """Analytic gradient of :func:`total_loss` with respect to every tensor.

    ``masks`` fixes the dropout masks (see :func:`dropout_masks`); ``None``
    means no dropout.
    """
    _check_batch(batch, params)
    xs, _ = _as_inputs(batch.features, params)
    n = xs[0].shape[0]
    if masks is None:
        masks = [None] * params.n_hidden
    P, cache = _forward(xs, params, masks)
    nll, dP_nll = _nll_terms(P, batch.bins, batch.events)
    rank, dP_rank = _ranking_terms(P, batch.bins, batch.events, config.sigma_rank)
    dP = dP_nll / n + config.alpha_rank * dP_rank

    g = {}
    dlogits = P * (dP - np.sum(dP * P, axis=1, keepdims=True))
    a = cache["acts"][-1]
    g["out_W"] = dlogits.T @ a
    g["out_b"] = dlogits.sum(axis=0)
    da = dlogits @ params["out_W"]
    for l in reversed(range(params.n_hidden)):
        if masks[l] is not None:
            da = da * masks[l]
        dpre = da * (cache["pre_fc"][l] > 0)
        g[f"fc_W{l}"] = dpre.T @ cache["acts"][l]
        g[f"fc_b{l}"] = dpre.sum(axis=0)
        da = dpre @ params[f"fc_W{l}"]

    E = cache["E"]
    M, D = E.shape[1], E.shape[2]
    Q, Km, V, A = cache["att"]
    dO = da.reshape(n, M, D)
    dA = dO @ np.swapaxes(V, 1, 2)
    dV = np.swapaxes(A, 1, 2) @ dO
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) / np.sqrt(D)
    dQ = dS @ Km
    dK = np.swapaxes(dS, 1, 2) @ Q
    Ef = E.reshape(-1, D)
    g["attn_Q"] = Ef.T @ dQ.reshape(-1, D)
    g["attn_K"] = Ef.T @ dK.reshape(-1, D)
    g["attn_V"] = Ef.T @ dV.reshape(-1, D)
    dE = dQ @ params["attn_Q"].T + dK @ params["attn_K"].T + dV @ params["attn_V"].T

    for i, m in enumerate(params.modalities):
        dpre = dE[:, i, :] * (cache["pre_proj"][i] > 0)
        g[proj_W(m)] = dpre.T @ xs[i] + 2.0 * config.l2_projection * params[proj_W(m)]
        g[proj_b(m)] = dpre.sum(axis=0)

    grads = ModelParams(params.modalities, {k: g[k] for k in params.keys()})
    if return_loss:
        loss = float(nll.mean()) + config.alpha_rank * rank + config.l2_projection * _l2(params)
        return grads, loss
    return grads


# --------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(x) for k, x in params.tensors.items()},
                   {k: np.zeros_like(x) for k, x in params.tensors.items()})


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new ``(params, state)``."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.tensors.items():
        g = grads.tensors[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return ModelParams(params.modalities, new_p), AdamState(new_m, new_v, t)


def predict_risk(features, params: ModelParams, grid: TimeGrid) -> np.ndarray:
    """Negative expected survival time under the inference-mode PMF."""
    return -expected_time(forward(features, params), grid)


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_val_c: float
    history: list[tuple[float, float]] = field(default_factory=list)


def train_fold(train: Batch, val_features, val_times, val_events, grid: TimeGrid, config: TrainConfig,
               modalities: Sequence[str] | None = None) -> TrainResult:
    """Full-batch Adam training with early stopping on validation C-index.

    Keeps the parameters of the epoch with the highest validation C and
    stops after ``patience`` consecutive epochs without strict improvement,
    or at ``max_epochs``.
    """
    val_times = np.asarray(val_times, dtype=float)
    val_events = np.asarray(val_events, dtype=bool)
    # raises before any training if the validation C-index is undefined
    c_index(np.zeros(val_times.shape[0]), val_times, val_events)
    if train.n == 0:
        raise ValidationError("empty training set")
    if grid.K != config.K:
        raise ValidationError(f"grid has {grid.K} bins but config.K={config.K}")
    names = tuple(modalities) if modalities is not None else tuple(f"m{i}" for i in range(len(train.features)))
    dims = {m: x.shape[1] for m, x in zip(names, train.features)}
    init_rng, drop_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    params = init_params(dims, config, seed=int(init_rng.integers(2**63 - 1)))
    state = AdamState.zeros(params)

    best, best_c, best_epoch, stale = params, -np.inf, 0, 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        masks = dropout_masks(params, train.n, config.dropout, drop_rng)
        grads, loss = gradient(train, params, config, masks=masks, return_loss=True)
        params, state = adam_step(params, grads, state, config.learning_rate)
        val_c = c_index(predict_risk(val_features, params, grid), val_times, val_events)
        history.append((loss, val_c))
        if val_c > best_c:
            best, best_c, best_epoch, stale = params, val_c, epoch, 0
        else:
            stale += 1
            if stale > config.patience:
                break
    return TrainResult(best.copy(), best_epoch, float(best_c), history)


# --------------------------------------------------------------------------
# persistence

def save_params(params: ModelParams, path, config: TrainConfig, extra: Mapping | None = None) -> None:
    """Write ``<path>.npy`` (flat float64 vector) and ``<path>.json`` (manifest)."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), params.flatten().astype(np.float64))
    manifest = {
        "format_version": FORMAT_VERSION,
        "modalities": list(params.modalities),
        "modality_dims": {m: params[proj_W(m)].shape[1] for m in params.modalities},
        "K": params.K,
        "embed_dim": params.embed_dim,
        "hidden_widths": list(config.hidden_widths),
        "config": asdict(config),
        "layout": [[k, list(s)] for k, s in params.layout()],
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_params(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported model format {manifest.get('format_version')}")
    flat = np.load(path.with_suffix(".npy"))
    layout = [(k, tuple(s)) for k, s in manifest["layout"]]
    return ModelParams.unflatten(manifest["modalities"], layout, flat), manifest


def config_from_dict(d: Mapping) -> TrainConfig:
    return replace(TrainConfig(), **{k: (tuple(v) if k == "hidden_widths" else v) for k, v in d.items()})
