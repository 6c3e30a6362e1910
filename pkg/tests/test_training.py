import itertools
import json

import numpy as np
import pytest

from tidespl import numerics as nx
from tidespl import training as tr
from tidespl.model import ConfigError, ModelConfig, TiDeSPLVAE, checkpoint_bytes
from tidespl.synthdata import Partition


def toy_part(rng, n_trials=4, T=12, N=5):
    return Partition([rng.poisson(1.0, size=(T, N)) for _ in range(n_trials)])


def toy_cfg(**kw):
    base = dict(n_neurons=5, latent_dim=4, state_dim=4, seq_len=4, max_offset=2)
    base.update(kw)
    return ModelConfig(**base)


# ----------------------------------------------------------------- offsets


def test_offset_never_zero_and_bounded(rng):
    for _ in range(2000):
        t0 = int(rng.integers(0, 7))
        d = tr.sample_offset(t0, 10, 4, 3, rng)
        assert d != 0 and abs(d) <= 3 and 0 <= t0 + d <= 6


def test_offset_reflects_at_start(rng):
    ds = {tr.sample_offset(0, 20, 5, 3, rng) for _ in range(500)}
    assert ds == {1, 2, 3}


def test_offset_distribution_symmetric_inside(rng):
    ds = np.array([tr.sample_offset(10, 30, 5, 3, rng) for _ in range(12000)])
    freq = np.array([np.mean(ds == k) for k in (-3, -2, -1, 1, 2, 3)])
    assert np.all(np.abs(freq - 1 / 6) < 3 * np.sqrt((1 / 6) * (5 / 6) / len(ds)))


def test_offset_redraws_when_neither_sign_fits(rng):
    # length 6, window 5: starts 0 and 1 only; from 0 only +1 works
    assert {tr.sample_offset(0, 6, 5, 3, rng) for _ in range(200)} == {1}


def test_offset_errors(rng):
    with pytest.raises(ValueError):
        tr.sample_offset(0, 3, 5, 2, rng)
    with pytest.raises(ValueError):
        tr.sample_offset(0, 5, 5, 2, rng)


def test_sample_positive_overlap(rng):
    trial = np.arange(40).reshape(20, 2)
    a, p, d = tr.sample_positive(trial, 5, 5, 3, rng)
    shared = set(map(tuple, a)) & set(map(tuple, p))
    assert len(shared) >= 2 and d != 0
    np.testing.assert_array_equal(p, trial[5 + d:10 + d])


def test_zero_offset_only_for_single_steps(rng):
    assert tr.sample_offset(0, 1, 1, 0, rng) == 0


# --------------------------------------------------------------- negatives


def test_single_window_set(rng):
    part = Partition([np.arange(10).reshape(5, 2)])
    (w,) = tr.sample_negatives(part, 1, 5, rng)
    np.testing.assert_array_equal(w, part.counts[0])


def test_negatives_uniform_over_windows(rng):
    # trial 0 has 1 window, trial 1 has 3: draws follow window counts
    part = Partition([np.zeros((4, 1)), np.ones((6, 1))])
    sampler = tr.WindowSampler(part, 4)
    draws = sampler.draw(10000, rng)
    p1 = np.mean([i == 1 for i, _ in draws])
    assert abs(p1 - 0.75) < 3 * np.sqrt(0.75 * 0.25 / 10000)
    starts = np.bincount([s for i, s in draws if i == 1])
    assert starts.size == 3


def test_uniform_over_trials_of_equal_length(rng):
    part = Partition([np.zeros((6, 1)) for _ in range(4)])
    counts = np.bincount([i for i, _ in tr.WindowSampler(part, 3).draw(10000, rng)], minlength=4)
    se = np.sqrt(0.25 * 0.75 / 10000)
    assert np.all(np.abs(counts / 10000 - 0.25) < 3 * se)


def test_short_trials_excluded(rng, caplog):
    part = Partition([np.zeros((2, 1)), np.zeros((6, 1))])
    sampler = tr.WindowSampler(part, 4)
    assert "excluding 1" in caplog.text
    assert all(i == 1 for i, _ in sampler.draw(50, rng))
    with pytest.raises(ValueError):
        tr.WindowSampler(Partition([np.zeros((2, 1))]), 4)


def test_batch_layout(rng):
    part = toy_part(rng)
    sampler = tr.WindowSampler(part, 4, 5)
    x = tr.make_batch(sampler, 3, 2, 2, rng)
    assert x.shape == (4, 8, 5)


# -------------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    p = nx.parameter(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    tr.adam_step({"p": p}, tr.AdamState(), 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    p = nx.parameter(np.array([0.0, 0.0]))
    p.grad = np.array([3.0, -0.5])
    tr.adam_step({"p": p}, tr.AdamState(), 0.01)
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)


def test_adam_rejects_non_finite_and_names_param():
    a, b = nx.parameter(np.ones(2)), nx.parameter(np.ones(2))
    a.grad = np.ones(2)
    b.grad = np.array([1.0, np.nan])
    state = tr.AdamState()
    with pytest.raises(tr.TrainingError, match="'b'") as e:
        tr.adam_step({"a": a, "b": b}, state, 0.1)
    assert e.value.name == "b"
    np.testing.assert_array_equal(a.data, 1.0)
    assert state.t == 0


# ------------------------------------------------------------------- loop


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig.from_dict({"iterations": 1, "lr_": 1})
    cfg = tr.TrainConfig(batch_size=8)
    assert cfg.n_negatives == 15 and cfg.fresh_negatives == 8


def test_zero_iterations_returns_init(rng):
    cfg = toy_cfg()
    res = tr.train(cfg, tr.TrainConfig(iterations=0, seed=4), toy_part(rng))
    fresh = TiDeSPLVAE(cfg, tr._streams(4)[0])
    for k, v in fresh.state_arrays().items():
        np.testing.assert_array_equal(v, res.model.state_arrays()[k])
    assert res.records == []


def test_training_is_reproducible(rng, tmp_path):
    part = toy_part(rng)
    cfg = toy_cfg()
    tc = tr.TrainConfig(iterations=6, batch_size=3, lr=1e-2, log_interval=2, checkpoint_interval=3, seed=9)
    a = tr.train(cfg, tc, part, tmp_path / "a")
    b = tr.train(cfg, tc, part, tmp_path / "b")
    assert a.checkpoint == b.checkpoint
    assert (tmp_path / "a" / "loss_log.jsonl").read_bytes() == (tmp_path / "b" / "loss_log.jsonl").read_bytes()
    assert (tmp_path / "a" / "iter_000003.ckpt").read_bytes() == (tmp_path / "b" / "iter_000003.ckpt").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == a.checkpoint


def test_loss_log_records(rng, tmp_path):
    res = tr.train(toy_cfg(), tr.TrainConfig(iterations=5, batch_size=2, log_interval=2), toy_part(rng), tmp_path)
    lines = (tmp_path / "loss_log.jsonl").read_text().splitlines()
    recs = [json.loads(l) for l in lines]
    assert [r["iteration"] for r in recs] == [2, 4, 5]
    assert set(recs[0]) == {"iteration", *tr.LOSS_TERMS}
    assert res.log_text().splitlines() == lines


def test_dimension_mismatch_named(rng):
    with pytest.raises(ConfigError, match="neurons"):
        tr.train(toy_cfg(n_neurons=6), tr.TrainConfig(iterations=1), toy_part(rng))


def test_non_finite_loss_names_term(rng):
    part = toy_part(rng)
    model = TiDeSPLVAE(toy_cfg(), 0)
    model.params["dec.l3.b"].data[...] = 1e308  # rates sum past the float range
    with pytest.raises(tr.TrainingError) as e:
        with np.errstate(all="ignore"):
            tr.train(toy_cfg(), tr.TrainConfig(iterations=1, batch_size=2), part, model=model)
    assert e.value.iteration == 1
    assert "iteration 1" in str(e.value)


def overfit_losses(n_iter, lr):
    rng = np.random.default_rng(0)
    cfg = toy_cfg()
    part = toy_part(rng)
    model = TiDeSPLVAE(cfg, 0)
    tc = tr.TrainConfig(iterations=n_iter, batch_size=4, lr=lr)
    x = tr.make_batch(tr.WindowSampler(part, 4, 5), 4, tc.fresh_negatives, 2, rng)
    state = tr.AdamState()
    losses = []
    for _ in range(n_iter):
        # same batch and same reparameterization noise every step
        losses.append(tr.train_step(model, x, 4, state, tc, np.random.default_rng(1))["total"])
    return losses


def test_overfit_strictly_decreases_first_50():
    losses = overfit_losses(50, 1e-3)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_overfit_halves_loss_within_500():
    losses = overfit_losses(500, 1e-2)
    assert min(losses) <= 0.5 * losses[0]


def test_seven_ablation_variants_constructible(rng):
    variants = [dict(contrast="positive_only"), dict(contrast="off"), dict(swap=False),
                dict(contrast="off", swap=False), dict(prior="standard_normal"), dict(cell="rnn"), dict(cell="lstm")]
    part = toy_part(rng)
    seen = set()
    for v in variants:
        cfg = toy_cfg(**v)
        res = tr.train(cfg, tr.TrainConfig(iterations=1, batch_size=2), part)
        seen.add(checkpoint_bytes(res.model))
    assert len(seen) == 7
    flags = list(itertools.product(["full", "positive_only", "off"], [True, False], ["time_dependent", "standard_normal"],
                                   ["gru", "rnn", "lstm"]))
    assert all(toy_cfg(contrast=c, swap=s, prior=p, cell=k) for c, s, p, k in flags)
