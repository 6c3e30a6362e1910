"""TiDeSPL-VAE network: split content/style latents unrolled in time order.

Per step t (batch rows are independent sequences)::

    f_t      = relu(bn(x_t W_x))                          input embedding
    zc_t     = head_c([f_t, hc_{t-1}])                     deterministic content
    mu, lv   = head_s([f_t, hs_{t-1}])                     style posterior
    mu~, lv~ = prior(hs_{t-1})                             style prior
    zs_t     = mu + exp(lv / 2) * eps
    r_t      = softplus(dec([zc_t, zs_t, hs_{t-1}]))       Poisson rates
    hc_t     = cell_c(f_t, hc_{t-1})
    hs_t     = cell_s([f_t, zc_t, zs_t], hs_{t-1})

Steps that do not feed the recurrence (embedding, prior, decoder) run once
over the stacked (time, batch, features) arrays; their batch norm still uses
per-time-step batch statistics, so a step never sees statistics of a later
step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import BatchNormState, Tensor

LOGVAR_MIN = -30.0
LOGVAR_MAX = 10.0

CELLS = ("gru", "rnn", "lstm")
PRIORS = ("time_dependent", "standard_normal")
CONTRASTS = ("full", "positive_only", "off")


class ConfigError(ValueError):
    pass


def strict_from_dict(cls, data: dict):
    """Build dataclass ``cls`` from ``data``; unknown keys are an error."""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {unknown}")
    return cls(**data)


@dataclass
class ModelConfig:
    n_neurons: int
    latent_dim: int = 8
    state_dim: int | None = None
    cell: str = "gru"
    prior: str = "time_dependent"
    beta: float = 1.0
    gamma: float = 1.0
    prior_l2: float = 0.01
    temperature: float = 0.5
    seq_len: int = 5
    max_offset: int = 3
    markov_order: int | None = None
    contrast: str = "full"
    swap: bool = True

    def __post_init__(self):
        if self.n_neurons < 1:
            raise ConfigError("n_neurons must be positive")
        if self.latent_dim < 2 or self.latent_dim % 2:
            raise ConfigError(f"latent_dim must be even and >= 2, got {self.latent_dim}")
        if self.state_dim is None:
            self.state_dim = self.latent_dim
        if self.state_dim < 1:
            raise ConfigError("state_dim must be positive")
        if self.cell not in CELLS:
            raise ConfigError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if self.contrast not in CONTRASTS:
            raise ConfigError(f"contrast must be one of {CONTRASTS}, got {self.contrast!r}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be positive")
        if not 0 <= self.max_offset < self.seq_len:
            raise ConfigError(f"max_offset must lie in [0, seq_len), got {self.max_offset}")
        if self.max_offset == 0 and self.seq_len > 1:
            raise ConfigError("max_offset may be 0 only for single-step sequences")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.markov_order is None:
            self.markov_order = self.seq_len - 1
        if self.markov_order < 0:
            raise ConfigError("markov_order must be >= 0")

    @property
    def content_dim(self) -> int:
        return self.latent_dim // 2

    @property
    def style_dim(self) -> int:
        return self.latent_dim // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return strict_from_dict(cls, data)


@dataclass
class LatentTrajectory:
    """Stacked per-step quantities, each (T, B, dim)."""

    z_content: Tensor
    z_style: Tensor
    post_mean: Tensor
    post_logvar: Tensor
    prior_mean: Tensor
    prior_logvar: Tensor
    rates: Tensor
    h_content: Tensor
    h_style: Tensor
    h_style_prev: Tensor
    cell_content: Tensor | None = None
    cell_style: Tensor | None = None

    @property
    def latents(self) -> np.ndarray:
        """Concatenated [content, style] latents as a (T, B, M) array."""
        return np.concatenate([self.z_content.data, self.z_style.data], axis=-1)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class TiDeSPLVAE:
    """Parameters, batch-norm buffers and the forward computations."""

    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self._build(rng)

    # -- construction ---------------------------------------------------

    def _linear(self, rng, name, fan_in, fan_out, bias=True):
        self.params[f"{name}.W"] = nx.parameter(_uniform(rng, (fan_in, fan_out), fan_in), f"{name}.W")
        if bias:
            self.params[f"{name}.b"] = nx.parameter(_uniform(rng, (fan_out,), fan_in), f"{name}.b")

    def _bn(self, name, features):
        self.params[f"{name}.gamma"] = nx.parameter(np.ones(features), f"{name}.gamma")
        self.params[f"{name}.beta"] = nx.parameter(np.zeros(features), f"{name}.beta")
        self.bn[name] = BatchNormState.create(features)

    def _cell(self, rng, name, n_in):
        H = self.config.state_dim
        gates = {"gru": 3, "rnn": 1, "lstm": 4}[self.config.cell]
        self.params[f"{name}.Wx"] = nx.parameter(_uniform(rng, (n_in, gates * H), H), f"{name}.Wx")
        self.params[f"{name}.Wh"] = nx.parameter(_uniform(rng, (H, gates * H), H), f"{name}.Wh")
        self.params[f"{name}.bx"] = nx.parameter(np.zeros(gates * H), f"{name}.bx")
        if self.config.cell == "gru":
            self.params[f"{name}.bh"] = nx.parameter(np.zeros(gates * H), f"{name}.bh")

    def _build(self, rng):
        c = self.config
        N, M, H = c.n_neurons, c.latent_dim, c.state_dim
        # bias-free linears ahead of batch norm: the shift would be cancelled
        self._linear(rng, "fx", N, N, bias=False)
        self._bn("fx.bn", N)
        self._linear(rng, "enc_c.l1", N + H, M, bias=False)
        self._bn("enc_c.bn1", M)
        self._linear(rng, "enc_c.l2", M, c.content_dim)
        self._linear(rng, "enc_s.l1", N + H, M, bias=False)
        self._bn("enc_s.bn1", M)
        self._linear(rng, "enc_s.l2", M, 2 * c.style_dim)
        self._linear(rng, "prior.l1", H, M)
        self._linear(rng, "prior.l2", M, 2 * c.style_dim)
        self._linear(rng, "dec.l1", M + H, M, bias=False)
        self._bn("dec.bn1", M)
        self._linear(rng, "dec.l2", M, M, bias=False)
        self._bn("dec.bn2", M)
        self._linear(rng, "dec.l3", M, N)
        self._cell(rng, "cell_c", N)
        self._cell(rng, "cell_s", N + M)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_parameters(self) -> None:
        for p in self.params.values():
            p.data[...] = 0.0

    def copy(self) -> "TiDeSPLVAE":
        other = TiDeSPLVAE.__new__(TiDeSPLVAE)
        other.config = ModelConfig.from_dict(self.config.to_dict())
        other.params = {k: nx.parameter(v.data.copy(), k) for k, v in self.params.items()}
        other.bn = {k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps)
                    for k, s in self.bn.items()}
        return other

    # -- building blocks ------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _block(self, x, lin, bn, training):
        h = nx.matmul(x, self._p(f"{lin}.W"))
        h = nx.batchnorm(h, self._p(f"{bn}.gamma"), self._p(f"{bn}.beta"), self.bn[bn], training)
        return nx.relu(h)

    def _affine(self, x, lin):
        return nx.linear(x, self._p(f"{lin}.W"), self._p(f"{lin}.b"))

    @staticmethod
    def _check_last(x: Tensor, n: int, what: str):
        if x.shape[-1] != n:
            raise nx.ShapeError(f"{what}: expected trailing dimension {n}, got shape {x.shape}")

    @staticmethod
    def _batched(x) -> Tensor:
        x = nx.as_tensor(x)
        return nx.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x

    # -- single-step operations ----------------------------------------

    def embed_input(self, x, training: bool = False) -> Tensor:
        """Input embedding f_x: one linear/batch-norm/ReLU block, N -> N."""
        x = self._batched(x)
        self._check_last(x, self.config.n_neurons, "embed_input")
        if np.any(x.data < 0):
            raise ValueError("embed_input: spike counts must be non-negative")
        return self._block(x, "fx", "fx.bn", training)

    def encode_content(self, feat, h_content, training: bool = False) -> Tensor:
        c = self.config
        feat, h_content = self._batched(feat), self._batched(h_content)
        self._check_last(feat, c.n_neurons, "encode_content")
        self._check_last(h_content, c.state_dim, "encode_content")
        h = self._block(nx.concat([feat, h_content]), "enc_c.l1", "enc_c.bn1", training)
        return self._affine(h, "enc_c.l2")

    def encode_style_posterior(self, feat, h_style, training: bool = False) -> tuple[Tensor, Tensor]:
        c = self.config
        feat, h_style = self._batched(feat), self._batched(h_style)
        self._check_last(feat, c.n_neurons, "encode_style_posterior")
        self._check_last(h_style, c.state_dim, "encode_style_posterior")
        h = self._block(nx.concat([feat, h_style]), "enc_s.l1", "enc_s.bn1", training)
        out = self._affine(h, "enc_s.l2")
        Ms = c.style_dim
        mean = nx.slice_axis(out, 0, Ms)
        logvar = nx.clamp(nx.slice_axis(out, Ms, 2 * Ms), LOGVAR_MIN, LOGVAR_MAX)
        return mean, logvar

    def compute_prior(self, h_style_prev) -> tuple[Tensor, Tensor]:
        c = self.config
        h = self._batched(h_style_prev)
        self._check_last(h, c.state_dim, "compute_prior")
        Ms = c.style_dim
        if c.prior == "standard_normal":
            zeros = nx.Tensor(np.zeros(h.shape[:-1] + (Ms,)))
            return zeros, nx.Tensor(np.zeros(h.shape[:-1] + (Ms,)))
        out = self._affine(nx.relu(self._affine(h, "prior.l1")), "prior.l2")
        mean = nx.slice_axis(out, 0, Ms)
        logvar = nx.clamp(nx.slice_axis(out, Ms, 2 * Ms), LOGVAR_MIN, LOGVAR_MAX)
        return mean, logvar

    @staticmethod
    def reparameterize(mean, logvar, noise) -> Tensor:
        mean, logvar = nx.as_tensor(mean), nx.as_tensor(logvar)
        noise = np.asarray(noise, dtype=float)
        if noise.shape != mean.shape:
            raise nx.ShapeError(f"reparameterize: noise {noise.shape} vs mean {mean.shape}")
        logvar = nx.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)
        return nx.add(mean, nx.mul(nx.exp(nx.scale(logvar, 0.5)), noise))

    def decode(self, z_content, z_style, h_style_prev, training: bool = False) -> Tensor:
        c = self.config
        zc, zs, h = self._batched(z_content), self._batched(z_style), self._batched(h_style_prev)
        self._check_last(zc, c.content_dim, "decode")
        self._check_last(zs, c.style_dim, "decode")
        self._check_last(h, c.state_dim, "decode")
        u = self._block(nx.concat([zc, zs, h]), "dec.l1", "dec.bn1", training)
        u = self._block(u, "dec.l2", "dec.bn2", training)
        return nx.softplus(self._affine(u, "dec.l3"))

    def _cell_step(self, name, inp, h, cstate=None):
        p = self.params
        kind = self.config.cell
        if kind == "gru":
            return nx.gru_cell(inp, h, p[f"{name}.Wx"], p[f"{name}.Wh"], p[f"{name}.bx"], p[f"{name}.bh"]), None
        if kind == "rnn":
            return nx.rnn_cell(inp, h, p[f"{name}.Wx"], p[f"{name}.Wh"], p[f"{name}.bx"]), None
        if cstate is None:
            cstate = nx.Tensor(np.zeros(h.shape))
        H = self.config.state_dim
        packed = nx.lstm_cell(inp, h, cstate, p[f"{name}.Wx"], p[f"{name}.Wh"], p[f"{name}.bx"])
        return nx.slice_axis(packed, 0, H), nx.slice_axis(packed, H, 2 * H)

    def update_content_state(self, feat, h_content, c_content=None):
        """One recurrent step of the content state factor.

        Returns the new hidden vector, or (hidden, cell) for LSTM cells.
        """
        feat, h_content = self._batched(feat), self._batched(h_content)
        self._check_last(feat, self.config.n_neurons, "update_content_state")
        h, cs = self._cell_step("cell_c", feat, h_content, c_content)
        return (h, cs) if self.config.cell == "lstm" else h

    def update_style_state(self, feat, z_content, z_style, h_style, c_style=None):
        inp = nx.concat([self._batched(feat), self._batched(z_content), self._batched(z_style)])
        self._check_last(inp, self.config.n_neurons + self.config.latent_dim, "update_style_state")
        h, cs = self._cell_step("cell_s", inp, self._batched(h_style), c_style)
        return (h, cs) if self.config.cell == "lstm" else h

    # -- unrolled sequence ------------------------------------------------

    def unroll(self, x, training: bool = False, noise=None, sample: bool | None = None) -> LatentTrajectory:
        """Run the model over spike counts ``x`` of shape (T, B, N) or (T, N).

        ``noise`` is either a (T, B, M_s) array of standard-normal draws or a
        numpy Generator.  ``sample`` defaults to ``training``; when False the
        style latent is the posterior mean and no noise is consumed.
        """
        c = self.config
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[:, None, :]
        if x.ndim != 3 or x.shape[0] < 1:
            raise nx.ShapeError(f"unroll: expected (T, B, N) counts, got {x.shape}")
        if x.shape[-1] != c.n_neurons:
            raise nx.ShapeError(f"unroll: expected {c.n_neurons} neurons, got {x.shape[-1]}")
        T, B, _ = x.shape
        H, Ms = c.state_dim, c.style_dim
        if sample is None:
            sample = training
        if sample:
            if isinstance(noise, np.random.Generator):
                noise = noise.standard_normal((T, B, Ms))
            elif noise is None:
                raise ValueError("unroll: sampling requires noise or a Generator")
            noise = np.asarray(noise, dtype=float)
            if noise.shape != (T, B, Ms):
                raise nx.ShapeError(f"unroll: noise shape {noise.shape} != {(T, B, Ms)}")

        def where(t):
            return f"time step {t + 1}"

        try:
            feats = self.embed_input(x, training)
        except nx.NonFiniteError as e:
            raise nx.NonFiniteError(e.op, "input embedding") from None

        hc = nx.Tensor(np.zeros((B, H)))
        hs = nx.Tensor(np.zeros((B, H)))
        cc = cs = None
        lstm = c.cell == "lstm"
        if lstm:
            cc = nx.Tensor(np.zeros((B, H)))
            cs = nx.Tensor(np.zeros((B, H)))
        zcs, zss, mus, lvs, hcs, hss, hprev, ccs, css = [], [], [], [], [], [], [], [], []
        for t in range(T):
            try:
                f = nx.index(feats, t)
                zc = self.encode_content(f, hc, training)
                mu, lv = self.encode_style_posterior(f, hs, training)
                zs = nx.add(mu, nx.mul(nx.exp(nx.scale(lv, 0.5)), noise[t])) if sample else mu
                hprev.append(hs)
                hc, cc = self._cell_step("cell_c", f, hc, cc)
                hs, cs = self._cell_step("cell_s", nx.concat([f, zc, zs]), hs, cs)
            except nx.NonFiniteError as e:
                raise nx.NonFiniteError(e.op, where(t)) from None
            zcs.append(zc)
            zss.append(zs)
            mus.append(mu)
            lvs.append(lv)
            hcs.append(hc)
            hss.append(hs)
            if lstm:
                ccs.append(cc)
                css.append(cs)
        hs_prev = nx.stack(hprev)
        z_content, z_style = nx.stack(zcs), nx.stack(zss)
        try:
            prior_mean, prior_logvar = self.compute_prior(hs_prev)
            rates = self.decode(z_content, z_style, hs_prev, training)
        except nx.NonFiniteError as e:
            raise nx.NonFiniteError(e.op, "prior/decoder") from None
        return LatentTrajectory(
            z_content=z_content,
            z_style=z_style,
            post_mean=nx.stack(mus),
            post_logvar=nx.stack(lvs),
            prior_mean=prior_mean,
            prior_logvar=prior_logvar,
            rates=rates,
            h_content=nx.stack(hcs),
            h_style=nx.stack(hss),
            h_style_prev=hs_prev,
            cell_content=nx.stack(ccs) if lstm else None,
            cell_style=nx.stack(css) if lstm else None,
        )

    def infer_windowed_latents(self, x, n: int | None = None, batch_size: int = 4096) -> LatentTrajectory:
        """Latents of each time point from the window of its ``n`` antecedent
        points plus itself, unrolled from a zero state in deterministic eval
        mode.  Points with fewer than ``n`` antecedents use the available
        prefix.  ``x`` is one recording of shape (T, N)."""
        if n is None:
            n = self.config.markov_order
        if n < 0:
            raise ValueError("markov order must be >= 0")
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError(f"infer_windowed_latents: expected a non-empty (T, N) recording, got {x.shape}")
        T = x.shape[0]
        parts: list[LatentTrajectory] = []
        with nx.no_grad():
            head = min(n, T)
            if head:
                # by causality, step t of the prefix unroll is the window ending at t
                parts.append(_squeeze_batch(self.unroll(x[:head], training=False)))
            if T > n:
                starts = np.arange(0, T - n)
                for lo in range(0, len(starts), batch_size):
                    s = starts[lo:lo + batch_size]
                    win = np.stack([x[i:i + n + 1] for i in s], axis=1)
                    traj = self.unroll(win, training=False)
                    parts.append(_last_step(traj))
        return _concat_time(parts)

    # -- checkpoint ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, s in self.bn.items():
            out[f"buffer/{k}.running_mean"] = s.running_mean
            out[f"buffer/{k}.running_var"] = s.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ValueError(f"checkpoint tensors do not match model: missing {missing}, unexpected {extra}")
        for k, v in arrays.items():
            kind, name = k.split("/", 1)
            if kind == "param":
                if v.shape != self.params[name].shape:
                    raise ValueError(f"checkpoint tensor {name} has shape {v.shape}")
                self.params[name].data = np.array(v, dtype=float)
            else:
                layer, stat = name.rsplit(".", 1)
                setattr(self.bn[layer], stat, np.array(v, dtype=float))


def _squeeze_batch(traj: LatentTrajectory) -> LatentTrajectory:
    vals = {}
    for f in fields(traj):
        v = getattr(traj, f.name)
        vals[f.name] = None if v is None else nx.Tensor(v.data[:, 0, :])
    return LatentTrajectory(**vals)


def _last_step(traj: LatentTrajectory) -> LatentTrajectory:
    vals = {}
    for f in fields(traj):
        v = getattr(traj, f.name)
        vals[f.name] = None if v is None else nx.Tensor(v.data[-1])
    return LatentTrajectory(**vals)


def _concat_time(parts: list[LatentTrajectory]) -> LatentTrajectory:
    vals = {}
    for f in fields(LatentTrajectory):
        arrs = [getattr(p, f.name) for p in parts]
        vals[f.name] = None if arrs[0] is None else nx.Tensor(np.concatenate([a.data for a in arrs], axis=0))
    return LatentTrajectory(**vals)


# ---------------------------------------------------------------- checkpoint IO

CKPT_MAGIC = b"TDCK"
CKPT_VERSION = 1


def checkpoint_bytes(model: TiDeSPLVAE, meta: dict | None = None) -> bytes:
    header = {"config": model.config.to_dict(), "meta": meta or {}}
    hjson = json.dumps(header, sort_keys=True).encode()
    arrays = model.state_arrays()
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(hjson))
    out += hjson
    out += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes()
    return bytes(out)


def save_checkpoint(path, model: TiDeSPLVAE, meta: dict | None = None) -> bytes:
    data = checkpoint_bytes(model, meta)
    Path(path).write_bytes(data)
    return data


def parse_checkpoint(data: bytes) -> tuple[TiDeSPLVAE, dict]:
    def need(off, n):
        if off + n > len(data):
            raise ValueError(f"checkpoint truncated at byte offset {off} (need {n} more bytes)")

    need(0, 12)
    if data[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint: bad magic at byte offset 0")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    need(off, hlen)
    header = json.loads(data[off:off + hlen])
    off += hlen
    need(off, 4)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        need(off, 4)
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        need(off, nlen)
        name = data[off:off + nlen].decode()
        off += nlen
        need(off, 4)
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        need(off, 4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        need(off, nbytes)
        arrays[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(float)
        off += nbytes
    if off != len(data):
        raise ValueError(f"checkpoint has {len(data) - off} trailing bytes at offset {off}")
    model = TiDeSPLVAE(ModelConfig.from_dict(header["config"]), seed=0)
    model.load_state_arrays(arrays)
    return model, header.get("meta", {})


def load_checkpoint(path) -> tuple[TiDeSPLVAE, dict]:
    return parse_checkpoint(Path(path).read_bytes())
