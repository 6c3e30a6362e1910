"""Synthetic spike datasets: RealNVP-warped clusters, Lorenz-driven
populations, the time-shuffle control and a labeled scene-like surrogate."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ConfigError, strict_from_dict

log = logging.getLogger(__name__)

PARTITIONS = ("train", "validation", "test")


@dataclass
class Partition:
    """Trials of one split.  ``counts[i]`` is (T_i, N); ``latents[i]`` is
    (T_i, D) ground truth when known."""

    counts: list[np.ndarray]
    latents: list[np.ndarray] | None = None
    labels: np.ndarray | None = None
    conditions: np.ndarray | None = None

    def __post_init__(self):
        if self.latents is not None and len(self.latents) != len(self.counts):
            raise ValueError("latents and counts differ in trial count")
        for name in ("labels", "conditions"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.int64)
                if v.shape != (len(self.counts),):
                    raise ValueError(f"{name} must have one entry per trial")
                setattr(self, name, v)

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def n_neurons(self) -> int:
        return self.counts[0].shape[1] if self.counts else 0

    @property
    def lengths(self) -> np.ndarray:
        return np.array([c.shape[0] for c in self.counts], dtype=np.int64)

    def stacked_counts(self) -> np.ndarray:
        return np.concatenate(self.counts, axis=0) if self.counts else np.zeros((0, 0))

    def stacked_latents(self) -> np.ndarray:
        if self.latents is None:
            raise ValueError("partition has no ground-truth latents")
        return np.concatenate(self.latents, axis=0)


@dataclass
class DatasetBundle:
    partitions: dict[str, Partition]
    manifest: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Partition:
        return self.partitions[name]

    @property
    def n_neurons(self) -> int:
        return self.partitions["train"].n_neurons


def _split_sizes(n: int, fractions) -> list[int]:
    sizes = [int(round(n * f)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    return sizes


# ------------------------------------------------------------ non-temporal


@dataclass
class NonTemporalSpec:
    n_clusters: int = 4
    samples_per_cluster: int = 4000
    obs_dim: int = 100
    flow_depth: int = 4
    flow_width: int = 64
    var_floor: float = 1e-3
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1 or self.samples_per_cluster < 1:
            raise ConfigError("cluster counts must be positive")
        if self.obs_dim < 2:
            raise ConfigError("obs_dim must be at least 2")
        if self.flow_depth < 0 or self.flow_width < 1:
            raise ConfigError("invalid flow size")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")


def cluster_interval(i: int, n_clusters: int = 4) -> tuple[float, float]:
    """Label interval of cluster i: [2 i pi / n, (2 i + 1) pi / n]."""
    return 2 * i * np.pi / n_clusters, (2 * i + 1) * np.pi / n_clusters


def cluster_latent_params(u, var_floor: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Mean (5 sin u, 5 cos u) and variances (0.6 - 0.5|cos u|, 0.5|cos u|),
    each floored at ``var_floor``."""
    u = np.asarray(u, dtype=float)
    c = np.abs(np.cos(u))
    mean = np.stack([5 * np.sin(u), 5 * np.cos(u)], axis=-1)
    var = np.stack([0.6 - 0.5 * c, 0.5 * c], axis=-1)
    return mean, np.maximum(var, var_floor)


@dataclass
class RealNVP:
    """Affine couplings over ``dim`` features with alternating half masks.

    Coupling k keeps the masked half a and maps the other half b to
    ``b * exp(s(a)) + t(a)`` with s = tanh(relu(a W1 + b1) Ws + bs) and
    t = relu(a W1 + b1) Wt + bt.
    """

    dim: int
    layers: list[dict[str, np.ndarray]]

    @classmethod
    def random(cls, dim: int, depth: int, width: int, rng: np.random.Generator) -> "RealNVP":
        layers = []
        for k in range(depth):
            keep = np.zeros(dim, dtype=bool)
            half = dim // 2
            if k % 2 == 0:
                keep[:half] = True
            else:
                keep[half:] = True
            n_in, n_out = int(keep.sum()), int((~keep).sum())
            layers.append({
                "keep": keep,
                "W1": rng.normal(0, 1 / np.sqrt(n_in), (n_in, width)),
                "b1": rng.normal(0, 0.1, width),
                "Ws": rng.normal(0, 0.5 / np.sqrt(width), (width, n_out)),
                "bs": np.zeros(n_out),
                "Wt": rng.normal(0, 1 / np.sqrt(width), (width, n_out)),
                "bt": rng.normal(0, 0.1, n_out),
            })
        return cls(dim, layers)

    @staticmethod
    def _st(layer, a):
        h = np.maximum(a @ layer["W1"] + layer["b1"], 0.0)
        return np.tanh(h @ layer["Ws"] + layer["bs"]), h @ layer["Wt"] + layer["bt"]

    def forward(self, v: np.ndarray) -> np.ndarray:
        v = np.array(v, dtype=float)
        for layer in self.layers:
            keep = layer["keep"]
            s, t = self._st(layer, v[..., keep])
            v[..., ~keep] = v[..., ~keep] * np.exp(s) + t
        return v

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.array(y, dtype=float)
        for layer in reversed(self.layers):
            keep = layer["keep"]
            s, t = self._st(layer, y[..., keep])
            y[..., ~keep] = (y[..., ~keep] - t) * np.exp(-s)
        return y


def pad_latents(z: np.ndarray, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.zeros(z.shape[:-1] + (dim,))
    out[..., :z.shape[-1]] = z
    return out


def realnvp_forward(z, flow: RealNVP) -> np.ndarray:
    """Zero-pad 2-dim latents to the flow dimension and push them through."""
    return flow.forward(pad_latents(z, flow.dim))


def softplus(v):
    return np.logaddexp(0.0, v)


def gen_nontemporal(spec: NonTemporalSpec | None = None) -> DatasetBundle:
    spec = spec or NonTemporalSpec()
    ss = np.random.SeedSequence(spec.seed)
    flow_ss, sample_ss, split_ss = ss.spawn(3)
    flow = RealNVP.random(spec.obs_dim, spec.flow_depth, spec.flow_width, np.random.default_rng(flow_ss))
    rng = np.random.default_rng(sample_ss)
    us, zs, labels = [], [], []
    for i in range(spec.n_clusters):
        lo, hi = cluster_interval(i, spec.n_clusters)
        u = rng.uniform(lo, hi, spec.samples_per_cluster)
        mean, var = cluster_latent_params(u, spec.var_floor)
        zs.append(mean + np.sqrt(var) * rng.standard_normal(mean.shape))
        us.append(u)
        labels.append(np.full(spec.samples_per_cluster, i))
    z = np.concatenate(zs)
    labels = np.concatenate(labels)
    rates = softplus(realnvp_forward(z, flow))
    counts = rng.poisson(rates)

    split_rng = np.random.default_rng(split_ss)
    train_idx, test_idx = [], []
    for i in range(spec.n_clusters):
        idx = np.flatnonzero(labels == i)
        idx = idx[split_rng.permutation(len(idx))]
        n_train = _split_sizes(len(idx), (spec.train_fraction, 1 - spec.train_fraction))[0]
        train_idx.append(np.sort(idx[:n_train]))
        test_idx.append(np.sort(idx[n_train:]))

    def part(idx):
        idx = np.concatenate(idx)
        return Partition(
            counts=[counts[i:i + 1] for i in idx],
            latents=[z[i:i + 1] for i in idx],
            labels=labels[idx],
            conditions=labels[idx],
        )

    return DatasetBundle(
        {"train": part(train_idx), "test": part(test_idx)},
        {"kind": "nontemporal", "spec": asdict(spec)},
    )


# ------------------------------------------------------------------ Lorenz


@dataclass
class LorenzSpec:
    sigma: float = 10.0
    rho: float = 28.0
    b: float = 8.0 / 3.0
    dt: float = 0.005
    n_steps: int = 1000
    burn_in: int = 500
    bin_ms: float = 1.0
    n_conditions: int = 5
    trials_per_condition: int = 20
    n_neurons: int = 30
    base_rate_hz: float = 20.0
    gain: float = 1.0
    init_range: float = 10.0
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.bin_ms <= 0:
            raise ConfigError("dt and bin_ms must be positive")
        for name in ("n_steps", "n_conditions", "trials_per_condition", "n_neurons"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be non-negative")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")


def lorenz_deriv(s, sigma=10.0, rho=28.0, b=8.0 / 3.0) -> np.ndarray:
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - b * z], axis=-1)


def euler_step(s, dt, sigma=10.0, rho=28.0, b=8.0 / 3.0) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return s + dt * lorenz_deriv(s, sigma, rho, b)


def rk4_step(s, dt, sigma=10.0, rho=28.0, b=8.0 / 3.0) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    k1 = lorenz_deriv(s, sigma, rho, b)
    k2 = lorenz_deriv(s + 0.5 * dt * k1, sigma, rho, b)
    k3 = lorenz_deriv(s + 0.5 * dt * k2, sigma, rho, b)
    k4 = lorenz_deriv(s + dt * k3, sigma, rho, b)
    return s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_lorenz(s0, n_steps: int, dt: float, burn_in: int = 0,
                     sigma=10.0, rho=28.0, b=8.0 / 3.0) -> np.ndarray:
    """(n_steps, 3) trajectory after ``burn_in`` discarded RK4 steps."""
    s = np.asarray(s0, dtype=float)
    for _ in range(burn_in):
        s = rk4_step(s, dt, sigma, rho, b)
    out = np.empty((n_steps, 3))
    for i in range(n_steps):
        out[i] = s
        s = rk4_step(s, dt, sigma, rho, b)
    return out


def gen_lorenz(spec: LorenzSpec | None = None, readout: tuple[np.ndarray, np.ndarray] | None = None) -> DatasetBundle:
    """Trials of Poisson spikes driven by Lorenz latents.  ``readout`` may
    override the random (W, bias) pair, W of shape (N, 3)."""
    spec = spec or LorenzSpec()
    ss = np.random.SeedSequence(spec.seed)
    readout_ss, init_ss, spike_ss, split_ss = ss.spawn(4)

    init_rng = np.random.default_rng(init_ss)
    trajs = []
    for c in range(spec.n_conditions):
        while True:
            s0 = init_rng.uniform(-spec.init_range, spec.init_range, 3)
            with np.errstate(over="ignore", invalid="ignore"):
                traj = integrate_lorenz(s0, spec.n_steps, spec.dt, spec.burn_in, spec.sigma, spec.rho, spec.b)
            if np.all(np.isfinite(traj)):
                break
            log.warning("condition %d: trajectory diverged from %s, redrawing", c, s0)
        trajs.append(traj)
    lat = np.stack(trajs)  # (C, T, 3)
    flat = lat.reshape(-1, 3)
    sd = flat.std(axis=0)
    lat = (lat - flat.mean(axis=0)) / np.where(sd > 0, sd, 1.0)

    if readout is None:
        rrng = np.random.default_rng(readout_ss)
        W = rrng.standard_normal((spec.n_neurons, 3))
        bias = rrng.standard_normal(spec.n_neurons)
    else:
        W, bias = (np.asarray(a, dtype=float) for a in readout)
        if W.shape != (spec.n_neurons, 3) or bias.shape != (spec.n_neurons,):
            raise ValueError("readout must be W (N, 3) and bias (N,)")
    scale = spec.base_rate_hz * spec.bin_ms / 1000.0
    rates = softplus(spec.gain * lat @ W.T + bias) * scale  # expected counts per bin

    # one independent stream per (condition, trial), ordered by index
    streams = spike_ss.spawn(spec.n_conditions * spec.trials_per_condition)
    split_rng = np.random.default_rng(split_ss)
    n_train = _split_sizes(spec.trials_per_condition, (spec.train_fraction, 1 - spec.train_fraction))[0]
    parts = {"train": ([], [], []), "test": ([], [], [])}
    for c in range(spec.n_conditions):
        order = split_rng.permutation(spec.trials_per_condition)
        is_train = np.zeros(spec.trials_per_condition, dtype=bool)
        is_train[order[:n_train]] = True
        for k in range(spec.trials_per_condition):
            counts = np.random.default_rng(streams[c * spec.trials_per_condition + k]).poisson(rates[c])
            dest = parts["train" if is_train[k] else "test"]
            dest[0].append(counts)
            dest[1].append(lat[c].copy())
            dest[2].append(c)

    return DatasetBundle(
        {name: Partition(counts=cs, latents=ls, conditions=np.array(cond, dtype=np.int64))
         for name, (cs, ls, cond) in parts.items()},
        {"kind": "lorenz", "spec": asdict(spec)},
    )


# ---------------------------------------------------------------- shuffling


def permute_time(bundle: DatasetBundle, perms: dict[str, list[np.ndarray]]) -> DatasetBundle:
    """Apply one time permutation per trial, jointly to counts and latents."""
    out = {}
    for name, part in bundle.partitions.items():
        ps = perms[name]
        if len(ps) != len(part):
            raise ValueError(f"{name}: need one permutation per trial")
        counts, lats = [], []
        for i, (c, p) in enumerate(zip(part.counts, ps)):
            p = np.asarray(p)
            if sorted(p.tolist()) != list(range(c.shape[0])):
                raise ValueError(f"{name} trial {i}: not a permutation of its time indices")
            counts.append(c[p])
            if part.latents is not None:
                lats.append(part.latents[i][p])
        out[name] = Partition(counts, lats if part.latents is not None else None,
                              None if part.labels is None else part.labels.copy(),
                              None if part.conditions is None else part.conditions.copy())
    return DatasetBundle(out, dict(bundle.manifest))


def shuffle_time(bundle: DatasetBundle, seed: int) -> DatasetBundle:
    """Independently permute each trial's time axis (spikes and latents
    together), destroying temporal dependence but keeping each time point's
    (spikes, latent) pair intact."""
    ss = np.random.SeedSequence([seed, 0x5F])
    perms = {}
    for name in sorted(bundle.partitions):
        part = bundle.partitions[name]
        rngs = [np.random.default_rng(s) for s in ss.spawn(len(part))]
        perms[name] = [r.permutation(c.shape[0]) for r, c in zip(rngs, part.counts)]
    out = permute_time(bundle, perms)
    out.manifest = {**bundle.manifest, "shuffle_seed": seed}
    return out


def lag1_autocorr(x: np.ndarray) -> np.ndarray:
    """Lag-1 autocorrelation per column of a (T, D) array."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean(axis=0)
    den = (x * x).sum(axis=0)
    num = (x[1:] * x[:-1]).sum(axis=0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


# --------------------------------------------------------- scene surrogate


@dataclass
class SceneSpec:
    n_classes: int = 8
    trials_per_class: int = 30
    n_steps: int = 25
    n_neurons: int = 40
    base_rate: float = 0.3
    template_spread: float = 1.0
    jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "trials_per_class", "n_steps", "n_neurons"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.base_rate <= 0 or self.jitter < 0 or self.template_spread < 0:
            raise ConfigError("rates and spreads must be non-negative")


def gen_scene_surrogate(spec: SceneSpec | None = None, templates: np.ndarray | None = None) -> DatasetBundle:
    """Per class a fixed (T, N) rate template; each trial adds Gaussian rate
    jitter (clipped at 0) and draws Poisson counts.  Trials are split 80/10/10
    within each class."""
    spec = spec or SceneSpec()
    ss = np.random.SeedSequence(spec.seed)
    tmpl_ss, trial_ss, split_ss = ss.spawn(3)
    shape = (spec.n_classes, spec.n_steps, spec.n_neurons)
    if templates is None:
        trng = np.random.default_rng(tmpl_ss)
        templates = spec.base_rate * np.exp(spec.template_spread * trng.standard_normal(shape))
    templates = np.asarray(templates, dtype=float)
    if templates.shape != shape:
        raise ValueError(f"templates must have shape {shape}")
    streams = trial_ss.spawn(spec.n_classes * spec.trials_per_class)
    split_rng = np.random.default_rng(split_ss)
    sizes = _split_sizes(spec.trials_per_class, (0.8, 0.1, 0.1))
    parts = {name: ([], []) for name in PARTITIONS}
    for k in range(spec.n_classes):
        order = split_rng.permutation(spec.trials_per_class)
        dest = np.empty(spec.trials_per_class, dtype=object)
        dest[order[:sizes[0]]] = "train"
        dest[order[sizes[0]:sizes[0] + sizes[1]]] = "validation"
        dest[order[sizes[0] + sizes[1]:]] = "test"
        for j in range(spec.trials_per_class):
            rng = np.random.default_rng(streams[k * spec.trials_per_class + j])
            rate = np.maximum(templates[k] + spec.jitter * rng.standard_normal(templates[k].shape), 0.0)
            parts[dest[j]][0].append(rng.poisson(rate))
            parts[dest[j]][1].append(k)
    return DatasetBundle(
        {name: Partition(counts=cs, labels=np.array(ls, dtype=np.int64), conditions=np.array(ls, dtype=np.int64))
         for name, (cs, ls) in parts.items()},
        {"kind": "scene", "spec": asdict(spec)},
    )


# ----------------------------------------------------------------- manifest

SPECS = {"nontemporal": NonTemporalSpec, "lorenz": LorenzSpec, "scene": SceneSpec}
GENERATORS = {"nontemporal": gen_nontemporal, "lorenz": gen_lorenz, "scene": gen_scene_surrogate}


def spec_from_dict(kind: str, data: dict):
    if kind not in SPECS:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected one of {sorted(SPECS)}")
    return strict_from_dict(SPECS[kind], data)


def generate(kind: str, spec=None) -> DatasetBundle:
    if spec is None:
        spec = SPECS[kind]() if kind in SPECS else None
    if isinstance(spec, dict):
        spec = spec_from_dict(kind, spec)
    if kind not in GENERATORS:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    return GENERATORS[kind](spec)


def regenerate(manifest: dict) -> DatasetBundle:
    """Rebuild a bundle from its manifest (including any shuffle)."""
    bundle = generate(manifest["kind"], dict(manifest["spec"]))
    if "shuffle_seed" in manifest:
        bundle = shuffle_time(bundle, manifest["shuffle_seed"])
    return bundle
