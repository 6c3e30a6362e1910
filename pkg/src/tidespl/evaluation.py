"""Evaluation protocols: linear-regression R² against ground-truth latents,
KNN decoding of trial classes and movie frames, and latent export."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import datafile
from .model import TiDeSPLVAE
from .synthdata import DatasetBundle, Partition

log = logging.getLogger(__name__)

K_CANDIDATES = tuple(range(1, 20, 2))
LATENT_BLOCKS = ("content", "style", "both")


# -------------------------------------------------------------- regression


@dataclass
class ReconstructionScore:
    r_squared: float
    per_dim: list[float]
    n_points: int
    ridge_fallback: bool = False
    fit_on: str = "test"


def _design(latents):
    latents = np.asarray(latents, dtype=float)
    if latents.ndim == 1:
        latents = latents[:, None]
    return np.hstack([latents, np.ones((latents.shape[0], 1))])


def fit_affine(latents, truth) -> tuple[np.ndarray, bool]:
    """Least-squares affine map (last row is the intercept).  A rank-deficient
    design switches to ridge with penalty 1e-8 on the slopes."""
    A = _design(latents)
    truth = np.asarray(truth, dtype=float)
    if np.linalg.matrix_rank(A) < A.shape[1]:
        log.warning("rank-deficient regression design (%d columns); using ridge 1e-8", A.shape[1])
        reg = 1e-8 * np.eye(A.shape[1])
        reg[-1, -1] = 0.0
        return np.linalg.solve(A.T @ A + reg, A.T @ truth), True
    coef, *_ = np.linalg.lstsq(A, truth, rcond=None)
    return coef, False


def reconstruction_score(latents, truth, fit_latents=None, fit_truth=None) -> ReconstructionScore:
    """R² of an OLS-with-intercept map from latents to truth, averaged over
    truth dimensions.  By default the map is fit on the scored points; pass
    ``fit_latents``/``fit_truth`` to fit elsewhere (e.g. the train split)."""
    latents = np.asarray(latents, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if truth.ndim == 1:
        truth = truth[:, None]
    if latents.ndim == 1:
        latents = latents[:, None]
    if latents.shape[0] != truth.shape[0]:
        raise ValueError(f"latents have {latents.shape[0]} points, truth {truth.shape[0]}")
    held_out = fit_latents is not None
    if held_out:
        fit_latents = np.asarray(fit_latents, dtype=float)
        fit_truth = np.asarray(fit_truth, dtype=float).reshape(fit_latents.shape[0], -1)
    else:
        fit_latents, fit_truth = latents, truth
    if fit_latents.shape[0] <= fit_latents.shape[1]:
        raise ValueError(f"need more points ({fit_latents.shape[0]}) than latent dims ({fit_latents.shape[1]})")
    coef, ridge = fit_affine(fit_latents, fit_truth)
    pred = _design(latents) @ coef
    ss_res = ((truth - pred) ** 2).sum(axis=0)
    ss_tot = ((truth - truth.mean(axis=0)) ** 2).sum(axis=0)
    safe = np.where(ss_tot > 0, ss_tot, 1.0)
    per = np.where(ss_tot > 0, 1.0 - ss_res / safe, np.where(ss_res > 0, 0.0, 1.0))
    return ReconstructionScore(float(per.mean()), [float(v) for v in per], int(truth.shape[0]),
                               ridge, "train" if held_out else "test")


# --------------------------------------------------------------------- KNN


@dataclass
class DecodingResult:
    accuracy: float
    chosen_k: int
    val_accuracy: dict[int, float] = field(default_factory=dict)
    per_class: dict[int, float] = field(default_factory=dict)
    predictions: list[int] = field(default_factory=list)
    window_frames: int | None = None


def neighbor_order(train, query, k_max: int) -> np.ndarray:
    """Indices of the ``k_max`` nearest train points per query by Euclidean
    distance; equal distances keep the lower train index first."""
    d = cdist(np.asarray(query, dtype=float), np.asarray(train, dtype=float), "sqeuclidean")
    return np.argsort(d, axis=1, kind="stable")[:, :k_max]


def vote(neighbor_labels: np.ndarray) -> int:
    """Majority label among neighbors ordered nearest first.  Among tied
    labels the one owning the nearest neighbor wins."""
    labels, first, counts = np.unique(neighbor_labels, return_index=True, return_counts=True)
    best = counts == counts.max()
    return int(labels[best][np.argmin(first[best])])


def knn_predict(order: np.ndarray, train_labels: np.ndarray, k: int) -> np.ndarray:
    lab = np.asarray(train_labels)[order[:, :k]]
    return np.array([vote(row) for row in lab], dtype=np.int64)


def knn_decode(train_x, train_y, val_x, val_y, test_x, test_y, ks=K_CANDIDATES) -> DecodingResult:
    """Pick k on validation accuracy (ties to the smaller k), report test
    accuracy at that k.  Candidates larger than the train set are skipped."""
    train_x, val_x, test_x = (np.asarray(a, dtype=float) for a in (train_x, val_x, test_x))
    train_y, val_y, test_y = (np.asarray(a, dtype=np.int64) for a in (train_y, val_y, test_y))
    if not (len(train_y) and len(val_y) and len(test_y)):
        raise ValueError("knn_decode needs non-empty train, validation and test sets")
    if not (train_x.ndim == val_x.ndim == test_x.ndim == 2) or len({train_x.shape[1], val_x.shape[1], test_x.shape[1]}) != 1:
        raise ValueError("all representations must be 2-d with equal dimensionality")
    usable = sorted(k for k in ks if k <= len(train_y))
    if not usable:
        raise ValueError(f"no candidate k fits {len(train_y)} training points")
    k_max = usable[-1]
    val_order = neighbor_order(train_x, val_x, k_max)
    val_acc = {k: float(np.mean(knn_predict(val_order, train_y, k) == val_y)) for k in usable}
    best = max(val_acc.values())
    k = min(k for k, a in val_acc.items() if a == best)
    pred = knn_predict(neighbor_order(train_x, test_x, k), train_y, k)
    per_class = {int(c): float(np.mean(pred[test_y == c] == c)) for c in np.unique(test_y)}
    return DecodingResult(float(np.mean(pred == test_y)), k, val_acc, per_class, pred.tolist())


# ----------------------------------------------------------- representations


def build_scene_representation(latents, window) -> np.ndarray:
    """Concatenate the per-step latents of each trial over ``window`` (time
    indices, in the given order).  ``latents`` is (T, M) or a list/array of
    trials; returns a vector or an (n_trials, len(window) * M) array."""
    window = np.asarray(window, dtype=np.int64)
    if window.ndim != 1 or window.size == 0:
        raise ValueError("window must be a non-empty list of time indices")

    def one(lat):
        lat = np.asarray(lat, dtype=float)
        T = lat.shape[0]
        if window.min() < 0 or window.max() >= T:
            raise IndexError(f"window {window.min()}..{window.max()} outside a trial of {T} steps")
        return lat[window].reshape(-1)

    if isinstance(latents, np.ndarray) and latents.ndim == 2:
        return one(latents)
    return np.stack([one(l) for l in latents])


def frame_bounds(T: int, frame_len: int) -> list[tuple[int, int]]:
    """Consecutive frames of ``frame_len`` steps; a trailing partial frame is dropped."""
    return [(s, s + frame_len) for s in range(0, T - frame_len + 1, frame_len)]


def build_frame_representation(latents, bounds) -> np.ndarray:
    """Mean latent of each [start, stop) frame: (n_frames, M)."""
    latents = np.asarray(latents, dtype=float)
    out = []
    for start, stop in bounds:
        if stop <= start or start < 0 or stop > latents.shape[0]:
            raise ValueError(f"empty or out-of-range frame [{start}, {stop})")
        out.append(latents[start:stop].mean(axis=0))
    return np.stack(out)


def windowed_frame_accuracy(pred, true, window_frames: int) -> float:
    """Fraction of predictions within ``window_frames`` of the true frame (inclusive)."""
    if window_frames < 0:
        raise ValueError("window_frames must be >= 0")
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError("pred and true differ in shape")
    if pred.size == 0:
        return 0.0
    return float(np.mean(np.abs(pred - true) <= window_frames))


# ----------------------------------------------------------------- latents


def select_block(latents: np.ndarray, which: str, content_dim: int) -> np.ndarray:
    """Content occupies dims [0, M_c), style [M_c, M)."""
    if which == "content":
        return latents[..., :content_dim]
    if which == "style":
        return latents[..., content_dim:]
    if which == "both":
        return latents
    raise ValueError(f"latent block must be one of {LATENT_BLOCKS}, got {which!r}")


def infer_latents(model: TiDeSPLVAE, part: Partition, markov_order: int | None = None,
                  which: str = "both") -> list[np.ndarray]:
    """Windowed latents per trial, each (T_i, dim)."""
    out = []
    for counts in part.counts:
        if counts.shape[1] != model.config.n_neurons:
            raise ValueError(f"model expects {model.config.n_neurons} neurons, data has {counts.shape[1]}")
        lat = model.infer_windowed_latents(counts, markov_order).latents
        out.append(select_block(lat, which, model.config.content_dim))
    return out


def infer_points(model: TiDeSPLVAE, part: Partition, which: str = "both", batch_size: int = 4096) -> np.ndarray:
    """Latents of single-step trials, unrolled together in eval mode: (n, dim)."""
    from . import numerics as nx
    if any(c.shape[0] != 1 for c in part.counts):
        raise ValueError("infer_points expects single-step trials")
    x = np.stack([c[0] for c in part.counts]).astype(float)
    parts = []
    with nx.no_grad():
        for lo in range(0, len(x), batch_size):
            traj = model.unroll(x[None, lo:lo + batch_size], training=False)
            parts.append(traj.latents[0])
    lat = np.concatenate(parts) if parts else np.zeros((0, model.config.latent_dim))
    return select_block(lat, which, model.config.content_dim)


def evaluate_reconstruction(model: TiDeSPLVAE, bundle: DatasetBundle, which: str = "both",
                            markov_order: int | None = None, fit_on_train: bool = False) -> ReconstructionScore:
    test = bundle["test"]
    if test.latents is None:
        raise ValueError("reconstruction protocol needs ground-truth latents")
    lat = np.concatenate(infer_latents(model, test, markov_order, which))
    truth = test.stacked_latents()
    if not fit_on_train:
        return reconstruction_score(lat, truth)
    train = bundle["train"]
    fit = np.concatenate(infer_latents(model, train, markov_order, which))
    return reconstruction_score(lat, truth, fit, train.stacked_latents())


def carve_validation(part: Partition, fraction: float = 0.1, seed: int = 0) -> tuple[Partition, Partition]:
    """Split a stratified validation set off ``part`` (by label or condition)."""
    keys = part.labels if part.labels is not None else part.conditions
    if keys is None:
        keys = np.zeros(len(part), dtype=np.int64)
    rng = np.random.default_rng(seed)
    val = np.zeros(len(part), dtype=bool)
    for k in np.unique(keys):
        idx = np.flatnonzero(keys == k)
        n_val = max(1, int(round(fraction * len(idx)))) if len(idx) > 1 else 0
        val[rng.permutation(idx)[:n_val]] = True

    def sub(mask):
        idx = np.flatnonzero(mask)
        return Partition([part.counts[i] for i in idx],
                         None if part.latents is None else [part.latents[i] for i in idx],
                         None if part.labels is None else part.labels[idx],
                         None if part.conditions is None else part.conditions[idx])

    return sub(~val), sub(val)


def _splits(bundle: DatasetBundle) -> tuple[Partition, Partition, Partition]:
    train = bundle["train"]
    if "validation" in bundle.partitions and len(bundle["validation"]):
        return train, bundle["validation"], bundle["test"]
    train, val = carve_validation(train)
    return train, val, bundle["test"]


def evaluate_points(model: TiDeSPLVAE, bundle: DatasetBundle, which: str = "content") -> DecodingResult:
    """KNN on single-step samples (e.g. the cluster dataset)."""
    train, val, test = _splits(bundle)
    reps = [infer_points(model, p, which) for p in (train, val, test)]
    return knn_decode(reps[0], train.labels, reps[1], val.labels, reps[2], test.labels)


def evaluate_scene(model: TiDeSPLVAE, bundle: DatasetBundle, which: str = "both",
                   markov_order: int | None = None, window=None) -> DecodingResult:
    """Trial-class decoding from latents concatenated over ``window``
    (default: the last 20 steps, or the whole trial if shorter)."""
    splits = _splits(bundle)
    reps = []
    for part in splits:
        if part.labels is None:
            raise ValueError("scene protocol needs class labels")
        lats = infer_latents(model, part, markov_order, which)
        w = window
        if w is None:
            T = min(l.shape[0] for l in lats)
            w = np.arange(max(0, T - 20), T)
        reps.append(build_scene_representation(lats, w))
    return knn_decode(reps[0], splits[0].labels, reps[1], splits[1].labels, reps[2], splits[2].labels)


def evaluate_movie(model: TiDeSPLVAE, bundle: DatasetBundle, window_frames: int = 0, which: str = "both",
                   markov_order: int | None = None, frame_len: int = 4) -> DecodingResult:
    """Frame-identity decoding: each trial is a viewing of its condition's
    "movie", cut into ``frame_len``-step frames.  A KNN per condition is fit
    on train viewings, k chosen on a held-out viewing, and test predictions
    within ``window_frames`` of the true frame count as correct."""
    train, val, test = _splits(bundle)
    conds = np.unique(test.conditions)
    preds, trues = [], []
    val_acc: dict[int, list[float]] = {}
    ks = []
    for c in conds:
        reps, labels = [], []
        for part in (train, val, test):
            sel = Partition([part.counts[i] for i in np.flatnonzero(part.conditions == c)])
            if not len(sel):
                raise ValueError(f"condition {c} lacks trials in some split")
            frames_x, frames_y = [], []
            for lat in infer_latents(model, sel, markov_order, which):
                b = frame_bounds(lat.shape[0], frame_len)
                frames_x.append(build_frame_representation(lat, b))
                frames_y.append(np.arange(len(b)))
            reps.append(np.concatenate(frames_x))
            labels.append(np.concatenate(frames_y))
        res = knn_decode(reps[0], labels[0], reps[1], labels[1], reps[2], labels[2])
        preds.append(np.asarray(res.predictions))
        trues.append(labels[2])
        ks.append(res.chosen_k)
        for k, a in res.val_accuracy.items():
            val_acc.setdefault(k, []).append(a)
    pred, true = np.concatenate(preds), np.concatenate(trues)
    per_cond = {int(c): windowed_frame_accuracy(p, t, window_frames) for c, p, t in zip(conds, preds, trues)}
    return DecodingResult(windowed_frame_accuracy(pred, true, window_frames), int(np.median(ks)),
                          {k: float(np.mean(v)) for k, v in val_acc.items()}, per_cond, pred.tolist(),
                          window_frames)


def evaluate_content_style_split(model: TiDeSPLVAE, bundle: DatasetBundle, which: str,
                                 protocol: str = "reconstruction", **kw):
    """Run ``protocol`` on the content, style or concatenated latent block."""
    if which not in LATENT_BLOCKS:
        raise ValueError(f"latent block must be one of {LATENT_BLOCKS}, got {which!r}")
    if bundle.n_neurons != model.config.n_neurons:
        raise ValueError(f"model expects {model.config.n_neurons} neurons, data has {bundle.n_neurons}")
    if protocol == "reconstruction":
        return evaluate_reconstruction(model, bundle, which, **kw)
    if protocol == "scene":
        return evaluate_scene(model, bundle, which, **kw)
    if protocol == "movie":
        return evaluate_movie(model, bundle, which=which, **kw)
    if protocol == "points":
        return evaluate_points(model, bundle, which)
    raise ValueError(f"unknown protocol {protocol!r}")


# ------------------------------------------------------------------ export


def dump_latents(model: TiDeSPLVAE, part: Partition, path, markov_order: int | None = None,
                 meta: dict | None = None, overwrite: bool = False) -> bytes:
    """Write per-step latents alongside the partition's counts, labels and
    ground truth as a spike data file."""
    lats = infer_latents(model, part, markov_order)
    meta = {"latent_layout": {"content": [0, model.config.content_dim],
                              "style": [model.config.content_dim, model.config.latent_dim]},
            **(meta or {})}
    return datafile.write(path, part, meta, inferred=lats, overwrite=overwrite)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def result_dict(res) -> dict:
    d = asdict(res)
    for key in ("val_accuracy", "per_class"):
        if key in d:
            d[key] = {str(k): v for k, v in d[key].items()}
    return d


def metrics_report(results: dict, dataset_hash: str, checkpoint_hash: str, config: dict | None = None) -> str:
    """Deterministic JSON report text."""
    body = {
        "dataset_sha256": dataset_hash,
        "checkpoint_sha256": checkpoint_hash,
        "results": {k: result_dict(v) if not isinstance(v, dict) else v for k, v in results.items()},
        "config": config or {},
    }
    return json.dumps(body, indent=2, sort_keys=True) + "\n"
