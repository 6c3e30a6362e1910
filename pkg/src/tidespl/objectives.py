"""Loss terms: time-wise ELBO (Poisson NLL + Gaussian KL), NT-Xent contrast,
content-swap reconstruction and the prior L2 penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def stirling_log_factorial(x) -> np.ndarray:
    """x log x - x + log(2 pi x) / 2 for x > 1, and 0 for x <= 1."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    big = x > 1
    v = x[big]
    lv = np.log(v)
    out[big] = v * lv - v + 0.5 * lv + HALF_LOG_2PI
    return out


def poisson_nll(x, rates, axis=-1) -> Tensor:
    """Poisson NLL with the Stirling approximation of log x!, averaged over
    the neuron axis.  Returns one value per leading index."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
    rates = nx.as_tensor(rates)
    if x.shape != rates.shape:
        raise nx.ShapeError(f"poisson_nll: counts {x.shape} vs rates {rates.shape}")
    if np.any(x < 0):
        raise ValueError("poisson_nll: counts must be non-negative")
    if np.any(rates.data <= 0):
        raise ValueError("poisson_nll: rates must be strictly positive")
    per = nx.add(nx.sub(rates, nx.mul(x, nx.log(rates))), stirling_log_factorial(x))
    return nx.mean(per, axis=axis)


def gaussian_kl(q_mean, q_logvar, p_mean, p_logvar, axis=-1) -> Tensor:
    """KL(N(q) || N(p)) for diagonal Gaussians, summed over ``axis``."""
    q_mean, q_logvar = nx.as_tensor(q_mean), nx.as_tensor(q_logvar)
    p_mean, p_logvar = nx.as_tensor(p_mean), nx.as_tensor(p_logvar)
    if not (q_mean.shape == q_logvar.shape == p_mean.shape == p_logvar.shape):
        raise nx.ShapeError("gaussian_kl: parameter shapes differ")
    diff2 = nx.square(nx.sub(q_mean, p_mean))
    ratio = nx.mul(nx.add(diff2, nx.exp(q_logvar)), nx.exp(nx.neg(p_logvar)))
    per = nx.scale(nx.add(nx.sub(ratio, q_logvar), nx.add(p_logvar, -1.0)), 0.5)
    return nx.sum(per, axis=axis)


def _normalize_rows(a: Tensor) -> Tensor:
    # zero-norm rows stay zero, so their cosine similarity is 0
    norm = nx.sqrt(nx.sum(nx.square(a), axis=-1, keepdims=True))
    return nx.div(a, nx.maximum_const(norm, 1e-12))


def cosine_similarity(a, b) -> Tensor:
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape:
        raise nx.ShapeError(f"cosine_similarity: {a.shape} vs {b.shape}")
    return nx.sum(nx.mul(_normalize_rows(a), _normalize_rows(b)), axis=-1)


def nt_xent(anchor, positive, negatives, temperature: float, exclude=None) -> Tensor:
    """Mean over anchors of -log softmax of the positive against negatives.

    ``anchor`` and ``positive`` are (B, D); ``negatives`` is a shared (K, D)
    pool.  ``exclude`` is an optional (B, K) boolean mask of pool entries
    that are not negatives for a given anchor (e.g. the anchor itself).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    anchor, positive, negatives = nx.as_tensor(anchor), nx.as_tensor(positive), nx.as_tensor(negatives)
    if anchor.ndim != 2 or anchor.shape != positive.shape:
        raise nx.ShapeError(f"nt_xent: anchor {anchor.shape} vs positive {positive.shape}")
    if negatives.ndim != 2 or negatives.shape[1] != anchor.shape[1]:
        raise nx.ShapeError(f"nt_xent: negatives {negatives.shape} vs anchor {anchor.shape}")
    an, pn = _normalize_rows(anchor), _normalize_rows(positive)
    pos = nx.reshape(nx.sum(nx.mul(an, pn), axis=-1), (anchor.shape[0], 1))
    logits = [pos]
    if negatives.shape[0]:
        neg = nx.matmul_t(an, _normalize_rows(negatives))
        if exclude is not None:
            exclude = np.asarray(exclude, dtype=bool)
            if exclude.shape != neg.shape:
                raise nx.ShapeError(f"nt_xent: exclude mask {exclude.shape} vs {neg.shape}")
            # excluded entries get a logit so low that exp() underflows to 0
            neg = nx.add(neg, np.where(exclude, -1e4 * temperature, 0.0))
        logits.append(neg)
    z = nx.scale(nx.concat(logits, axis=1), 1.0 / temperature)
    return nx.mean(nx.sub(nx.logsumexp(z, axis=1), nx.reshape(nx.slice_axis(z, 0, 1, axis=1), (anchor.shape[0],))))


def positive_only_loss(anchor, positive) -> Tensor:
    """Mean cosine distance between positive pairs (no negatives)."""
    return nx.mean(nx.sub(1.0, cosine_similarity(anchor, positive)))


def prior_l2(prior_mean, prior_logvar) -> Tensor:
    """Mean of squared prior means and log-variances over all entries."""
    m, lv = nx.as_tensor(prior_mean), nx.as_tensor(prior_logvar)
    return nx.scale(nx.add(nx.mean(nx.square(m)), nx.mean(nx.square(lv))), 0.5)


def sequence_recon(x, rates) -> Tensor:
    """Per-sequence reconstruction loss, (T, B, N) -> (B,): neuron mean, then time mean."""
    return nx.mean(poisson_nll(x, rates), axis=0)


def swap_losses(model, traj, x, pair_a, pair_b, training: bool = True) -> Tensor:
    """Swap reconstruction for positive pairs (rows ``pair_a[i]``, ``pair_b[i]``
    of a batched trajectory): member a is decoded from (zc_b, zs_a, hs_a) and
    member b from (zc_a, zs_b, hs_b).  Returns the batch mean of the summed,
    time-averaged losses of both members."""
    pair_a, pair_b = np.asarray(pair_a), np.asarray(pair_b)
    if pair_a.shape != pair_b.shape:
        raise nx.ShapeError("swap_losses: pair index arrays differ in length")
    own = np.concatenate([pair_a, pair_b])
    partner = np.concatenate([pair_b, pair_a])
    zc = nx.take(traj.z_content, partner, axis=1)
    zs = nx.take(traj.z_style, own, axis=1)
    hs = nx.take(traj.h_style_prev, own, axis=1)
    rates = model.decode(zc, zs, hs, training)
    per_seq = sequence_recon(np.asarray(x)[:, own, :], rates)
    B = len(pair_a)
    return nx.scale(nx.sum(per_seq), 1.0 / B)


def swap_loss_pair(model, traj_a, traj_b, x_a, x_b, training: bool = False) -> Tensor:
    """Swap reconstruction for two separately unrolled trajectories of equal
    length: batch-mean of L(x_a | zc_b, zs_a, hs_a) + L(x_b | zc_a, zs_b, hs_b)."""
    if traj_a.z_content.shape != traj_b.z_content.shape:
        raise nx.ShapeError("swap_loss_pair: trajectories differ in length or batch")
    ra = model.decode(traj_b.z_content, traj_a.z_style, traj_a.h_style_prev, training)
    rb = model.decode(traj_a.z_content, traj_b.z_style, traj_b.h_style_prev, training)
    xa = np.asarray(x_a, dtype=float).reshape(ra.shape)
    xb = np.asarray(x_b, dtype=float).reshape(rb.shape)
    return nx.add(nx.mean(sequence_recon(xa, ra)), nx.mean(sequence_recon(xb, rb)))


@dataclass
class LossBreakdown:
    recons: Tensor
    regular: Tensor
    contrast: Tensor
    swap_recons: Tensor
    prior_l2: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in
                ("recons", "regular", "contrast", "swap_recons", "prior_l2", "total")}


def total_loss(model, traj, x, n_pairs: int, config=None, training: bool = True) -> LossBreakdown:
    """Assemble the full objective for a batched unroll.

    Batch layout along axis 1 of ``x``/``traj``: rows [0, B) anchors, rows
    [B, 2B) their positives, rows [2B, ...) extra negative windows.
    """
    cfg = config or model.config
    x = np.asarray(x, dtype=float)
    B = n_pairs
    T = x.shape[0]
    pair = np.arange(2 * B)
    rates = nx.slice_axis(traj.rates, 0, 2 * B, axis=1)
    per_seq = sequence_recon(x[:, :2 * B, :], rates)
    recons = nx.scale(nx.sum(per_seq), 1.0 / B)

    post_m = nx.slice_axis(traj.post_mean, 0, 2 * B, axis=1)
    post_lv = nx.slice_axis(traj.post_logvar, 0, 2 * B, axis=1)
    prior_m = nx.slice_axis(traj.prior_mean, 0, 2 * B, axis=1)
    prior_lv = nx.slice_axis(traj.prior_logvar, 0, 2 * B, axis=1)
    kl = gaussian_kl(post_m, post_lv, prior_m, prior_lv)  # (T, 2B), summed over dims
    regular = nx.scale(nx.sum(kl), 1.0 / (T * B * post_m.shape[-1]))

    zero = nx.Tensor(np.zeros(()))
    if cfg.contrast == "off":
        contrast = zero
    else:
        total_rows = traj.z_content.shape[1]
        reps = nx.reshape(nx.transpose(traj.z_content, (1, 0, 2)), (total_rows, -1))
        anchor = nx.slice_axis(reps, 0, B, axis=0)
        positive = nx.slice_axis(reps, B, 2 * B, axis=0)
        if cfg.contrast == "positive_only":
            contrast = positive_only_loss(anchor, positive)
        else:
            pool = nx.concat([anchor, nx.slice_axis(reps, 2 * B, total_rows, axis=0)], axis=0)
            exclude = np.zeros((B, pool.shape[0]), dtype=bool)
            exclude[np.arange(B), np.arange(B)] = True
            contrast = nt_xent(anchor, positive, pool, cfg.temperature, exclude)

    swap = swap_losses(model, traj, x, pair[:B], pair[B:], training) if cfg.swap else zero

    if cfg.prior == "time_dependent":
        pl2 = prior_l2(prior_m, prior_lv)
    else:
        pl2 = zero

    total = nx.add(nx.add(recons, swap), nx.add(nx.scale(regular, cfg.beta), nx.scale(contrast, cfg.gamma)))
    total = nx.add(total, nx.scale(pl2, cfg.prior_l2))
    return LossBreakdown(recons, regular, contrast, swap, pl2, total)


