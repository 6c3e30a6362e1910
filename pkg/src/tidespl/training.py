"""Mini-batch contrastive training: window sampling, Adam, logging and
checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import ConfigError, ModelConfig, TiDeSPLVAE, checkpoint_bytes, strict_from_dict
from .objectives import total_loss
from .synthdata import Partition

log = logging.getLogger(__name__)

LOSS_TERMS = ("recons", "regular", "contrast", "swap_recons", "prior_l2", "total")


class TrainingError(FloatingPointError):
    """Non-finite loss term or gradient; ``name`` is the term or parameter."""

    def __init__(self, msg: str, name: str, iteration: int | None = None):
        self.name = name
        self.iteration = iteration
        super().__init__(msg)


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 64
    n_negatives: int | None = None
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.n_negatives is None:
            self.n_negatives = 2 * self.batch_size - 1
        if self.n_negatives < 0:
            raise ConfigError("n_negatives must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam constants")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be positive")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")

    @property
    def fresh_negatives(self) -> int:
        """Windows drawn on top of the other anchors to fill the negative pool."""
        return max(0, self.n_negatives - (self.batch_size - 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return strict_from_dict(cls, data)


# ---------------------------------------------------------------- sampling


def sample_offset(t0: int, length: int, seq_len: int, max_offset: int, rng: np.random.Generator) -> int:
    """Signed offset of the positive window, never 0 unless ``max_offset`` is 0.

    The magnitude is uniform on 1..max_offset with a random sign.  If the
    shifted window would leave the trial the sign is reflected; if neither
    sign fits, the offset is redrawn among the feasible ones.
    """
    last = length - seq_len
    if last < 0:
        raise ValueError(f"trial of length {length} is shorter than the window ({seq_len})")
    if not 0 <= t0 <= last:
        raise ValueError(f"window start {t0} outside [0, {last}]")
    if max_offset == 0:
        return 0
    d = int(rng.integers(1, max_offset + 1)) * (1 if rng.random() < 0.5 else -1)
    if 0 <= t0 + d <= last:
        return d
    if 0 <= t0 - d <= last:
        return -d
    feasible = [k for k in range(-max_offset, max_offset + 1) if k and 0 <= t0 + k <= last]
    if not feasible:
        raise ValueError(f"no positive window within +-{max_offset} of start {t0} in a trial of length {length}")
    return int(feasible[rng.integers(len(feasible))])


def sample_positive(trial: np.ndarray, t0: int, seq_len: int, max_offset: int, rng: np.random.Generator):
    """(anchor window, positive window, offset) from one (T, N) trial."""
    trial = np.asarray(trial)
    if max_offset >= seq_len and seq_len > 1:
        raise ValueError("max_offset must be smaller than seq_len so windows overlap")
    d = sample_offset(t0, trial.shape[0], seq_len, max_offset, rng)
    return trial[t0:t0 + seq_len], trial[t0 + d:t0 + d + seq_len], d


class WindowSampler:
    """Uniform draws over the (trial, start) pairs of a partition."""

    def __init__(self, part: Partition, seq_len: int, min_length: int | None = None):
        need = seq_len if min_length is None else min_length
        self.seq_len = seq_len
        self.trials = [np.asarray(c, dtype=float) for c in part.counts]
        keep = [i for i, c in enumerate(self.trials) if c.shape[0] >= need]
        dropped = len(self.trials) - len(keep)
        if dropped:
            log.warning("excluding %d trial(s) shorter than %d time steps", dropped, need)
        if not keep:
            raise ValueError(f"no trial has at least {need} time steps")
        self.keep = np.array(keep)
        starts = np.array([self.trials[i].shape[0] - seq_len + 1 for i in keep])
        self.cum = np.cumsum(starts)

    @property
    def n_windows(self) -> int:
        return int(self.cum[-1])

    def draw(self, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
        flat = rng.integers(0, self.n_windows, size=n)
        pos = np.searchsorted(self.cum, flat, side="right")
        base = np.concatenate([[0], self.cum[:-1]])
        return [(int(self.keep[p]), int(f - base[p])) for p, f in zip(pos, flat)]

    def window(self, trial: int, start: int) -> np.ndarray:
        return self.trials[trial][start:start + self.seq_len]


def sample_negatives(part: Partition, n: int, seq_len: int, rng: np.random.Generator) -> list[np.ndarray]:
    """``n`` windows drawn uniformly over (trial, start) pairs.  They may
    coincide with an anchor; that is allowed."""
    sampler = WindowSampler(part, seq_len)
    return [sampler.window(i, s) for i, s in sampler.draw(n, rng)]


def make_batch(sampler: WindowSampler, batch_size: int, n_fresh: int, max_offset: int,
               rng: np.random.Generator) -> np.ndarray:
    """(T, 2B + n_fresh, N) batch: anchors, their positives, fresh negatives."""
    anchors = sampler.draw(batch_size, rng)
    rows = [sampler.window(i, s) for i, s in anchors]
    for i, s in anchors:
        d = sample_offset(s, sampler.trials[i].shape[0], sampler.seq_len, max_offset, rng)
        rows.append(sampler.window(i, s + d))
    rows.extend(sampler.window(i, s) for i, s in sampler.draw(n_fresh, rng))
    return np.stack(rows, axis=1)


# ------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, nx.Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place.  Every gradient is checked before
    any parameter moves; a non-finite one rejects the whole step."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'", name)
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: TiDeSPLVAE
    records: list[dict]
    checkpoint: bytes

    def log_text(self) -> str:
        return "".join(format_record(r) for r in self.records)


def format_record(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":")) + "\n"


def _streams(seed: int):
    init, data, noise = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(data), np.random.default_rng(noise)


def train_step(model: TiDeSPLVAE, x: np.ndarray, batch_size: int, state: AdamState, cfg: TrainConfig,
               noise_rng: np.random.Generator, iteration: int | None = None) -> dict[str, float]:
    nx.zero_grads(model.parameters())
    try:
        traj = model.unroll(x, training=True, noise=noise_rng)
        losses = total_loss(model, traj, x, batch_size)
    except nx.NonFiniteError as e:
        raise TrainingError(f"iteration {iteration}: {e}", e.where or e.op, iteration) from None
    values = losses.values()
    for k in LOSS_TERMS:
        if not np.isfinite(values[k]):
            raise TrainingError(f"iteration {iteration}: loss term '{k}' is non-finite", k, iteration)
    nx.backward(losses.total)
    try:
        adam_step(model.params, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    except TrainingError as e:
        raise TrainingError(f"iteration {iteration}: {e}", e.name, iteration) from None
    return values


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, part: Partition, out_dir=None,
          model: TiDeSPLVAE | None = None, meta: dict | None = None) -> TrainResult:
    """Train from a seeded initialization (or ``model``) on ``part``.

    With ``out_dir`` the loss log (``loss_log.jsonl``), periodic checkpoints
    and ``final.ckpt`` are written there.
    """
    if part.n_neurons != model_cfg.n_neurons:
        raise ConfigError(f"model expects {model_cfg.n_neurons} neurons but the data has {part.n_neurons}")
    init_rng, data_rng, noise_rng = _streams(train_cfg.seed)
    if model is None:
        model = TiDeSPLVAE(model_cfg, init_rng)
    meta = {"train_config": train_cfg.to_dict(), **(meta or {})}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_f = open(out / "loss_log.jsonl", "w")
    records: list[dict] = []
    try:
        if train_cfg.iterations:
            min_len = model_cfg.seq_len + (1 if model_cfg.max_offset else 0)
            sampler = WindowSampler(part, model_cfg.seq_len, min_len)
        state = AdamState()
        for it in range(1, train_cfg.iterations + 1):
            x = make_batch(sampler, train_cfg.batch_size, train_cfg.fresh_negatives, model_cfg.max_offset, data_rng)
            values = train_step(model, x, train_cfg.batch_size, state, train_cfg, noise_rng, it)
            if it % train_cfg.log_interval == 0 or it == train_cfg.iterations:
                rec = {"iteration": it, **values}
                records.append(rec)
                if out is not None:
                    log_f.write(format_record(rec))
                    log_f.flush()
            if out is not None and train_cfg.checkpoint_interval and it % train_cfg.checkpoint_interval == 0:
                (out / f"iter_{it:06d}.ckpt").write_bytes(checkpoint_bytes(model, {**meta, "iteration": it}))
    finally:
        if out is not None:
            log_f.close()
    nx.zero_grads(model.parameters())
    ckpt = checkpoint_bytes(model, {**meta, "iteration": train_cfg.iterations})
    if out is not None:
        (out / "final.ckpt").write_bytes(ckpt)
    return TrainResult(model, records, ckpt)
