import dataclasses

import numpy as np
import pytest

from hcal import numcore as nc
from hcal.dataio import SynthSpec, synth_generate
from hcal.errors import CheckpointError, ConfigError, DataError, NumericalError
from hcal.trainer import (
    LoopState,
    OptimizerState,
    TrainConfig,
    build_model,
    fit,
    init_optimizer,
    load_checkpoint,
    predict_model,
    save_checkpoint,
    sgd_step,
)


@pytest.fixture(scope="module")
def tiny():
    train, test, tax = synth_generate(SynthSpec(classes_per_level=(4, 2), input_dim=6, per_class=10, seed=1))
    return train, test, tax


def cfg(**kw):
    base = dict(epochs=2, dim=8, hidden_dims=(), batch_size=8, seed=3)
    return TrainConfig(**{**base, **kw})


def test_sgd_hand_example():
    p = nc.Parameter(np.array([2.0]), "w", "encoder")
    state = OptimizerState(lrs={"encoder": 0.5})
    config = cfg(weight_decay=0.1, momentum=0.5)
    sgd_step([p], {"w": np.array([1.0])}, state, config)
    assert p.data[0] == pytest.approx(1.4, abs=1e-15)
    # second step: v = 0.5 * 1.2 + (1 + 0.14) = 1.74
    sgd_step([p], {"w": np.array([1.0])}, state, config)
    assert p.data[0] == pytest.approx(1.4 - 0.5 * 1.74, abs=1e-15)


def test_sgd_missing_grad():
    p = nc.Parameter(np.zeros(2), "w", "encoder")
    with pytest.raises(NumericalError, match="w"):
        sgd_step([p], {}, OptimizerState(lrs={"encoder": 0.1}), cfg())


def test_proto_lr_doubles_per_level():
    c = cfg()
    assert [c.proto_lr(k) for k in (1, 2, 3)] == [0.05, 0.1, 0.2]


@pytest.mark.parametrize(
    "kw",
    [
        {"epochs": -1},
        {"batch_size": 0},
        {"tau": 0.0},
        {"momentum": 1.0},
        {"fixed_weights": (0.7, 0.7)},
        {"weighting": "magic"},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        cfg(**kw)


def test_config_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})
    assert TrainConfig.from_dict(cfg().to_dict()) == cfg()


def test_weights_on_simplex_and_fixed(tiny):
    train, _, tax = tiny
    rep, _, _ = fit(train, tax, cfg(epochs=3))
    for r in rep.records:
        assert abs(sum(r.weights) - 1) < 1e-9
    rep, _, _ = fit(train, tax, cfg(epochs=2, weighting="fixed", fixed_weights=(0.5, 0.5)))
    assert all(r.weights == [0.5, 0.5] for r in rep.records)


def test_zero_epochs_leaves_params(tiny):
    train, _, tax = tiny
    fresh = build_model(tax, train.input_dim, cfg())
    rep, model, _ = fit(train, tax, cfg(epochs=0))
    assert rep.records == []
    for a, b in zip(fresh.parameters(), model.parameters()):
        assert np.array_equal(a.data, b.data)


def test_empty_dataset(tiny):
    train, _, tax = tiny
    with pytest.raises(DataError):
        fit(train.subset([]), tax, cfg())


def test_deterministic(tiny):
    train, _, tax = tiny
    a, ma, _ = fit(train, tax, cfg())
    b, mb, _ = fit(train, tax, cfg())
    assert a.to_csv(2) == b.to_csv(2)
    for p, q in zip(ma.parameters(), mb.parameters()):
        assert np.array_equal(p.data, q.data)


def test_perturbation_off_equals_epsilon_zero(tiny):
    train, _, tax = tiny
    a, _, _ = fit(train, tax, cfg(prototype_perturbation=False))
    b, _, _ = fit(train, tax, cfg(epsilon=0.0))
    c, _, _ = fit(train, tax, cfg(perturb_mode="off"))
    assert a.to_csv(2) == b.to_csv(2) == c.to_csv(2)


def test_loss_decreases(tiny):
    train, _, tax = tiny
    rep, _, _ = fit(train, tax, cfg(epochs=15))
    assert rep.records[-1].total < rep.records[0].total


@pytest.mark.parametrize(
    "kw",
    [
        {"feature_aggregation": False},
        {"aggregation_mode": "child_mean"},
        {"negatives": "base_only"},
        {"perturb_mode": "static"},
        {"weight_source": "previous", "weight_ema": 0.5},
        {"trainable": "last_layer", "hidden_dims": (5,)},
    ],
)
def test_variants_train(tiny, kw):
    train, _, tax = tiny
    rep, _, _ = fit(train, tax, cfg(**kw))
    assert all(np.isfinite(r.total) for r in rep.records)


def test_single_task_shares_nothing(tiny):
    train, _, tax = tiny
    model = build_model(tax, train.input_dim, cfg(multi_task=False))
    assert len(model.towers) == tax.m
    seen = [{id(p) for p in t.parameters()} for t in model.towers]
    assert not seen[0] & seen[1]
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names))
    rep, model, _ = fit(train, tax, cfg(multi_task=False))
    assert rep.records[0].weights == [0.5, 0.5]
    preds, _ = predict_model(model, train.features)
    assert sorted(preds) == [1, 2]


def test_checkpoint_roundtrip(tiny, tmp_path):
    train, test, tax = tiny
    rep, model, state = fit(train, tax, cfg(perturb_mode="static"), out_dir=tmp_path)
    model2, state2, config2 = load_checkpoint(rep.checkpoint)
    assert config2 == cfg(perturb_mode="static")
    for p, q in zip(model.parameters(), model2.parameters()):
        assert p.name == q.name and np.array_equal(p.data, q.data)
    for k, v in state.optimizer.velocity.items():
        assert np.array_equal(v, state2.optimizer.velocity[k])
    assert (state2.step, state2.epoch) == (state.step, state.epoch)
    np.testing.assert_array_equal(model.towers[0].bank.static_noise[1], model2.towers[0].bank.static_noise[1])
    a, _ = predict_model(model, test.features)
    b, _ = predict_model(model2, test.features)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_errors(tiny, tmp_path):
    train, _, tax = tiny
    rep, _, _ = fit(train, tax, cfg(epochs=1), out_dir=tmp_path)
    with pytest.raises(CheckpointError, match="dimension"):
        load_checkpoint(rep.checkpoint, expect_dim=16)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.npz")


@pytest.mark.parametrize("kw", [{}, {"multi_task": False}, {"weight_source": "previous", "weight_ema": 0.3}])
def test_resume_equals_unbroken(tiny, tmp_path, kw):
    train, _, tax = tiny
    full, m_full, _ = fit(train, tax, cfg(epochs=4, **kw))
    first, _, _ = fit(train, tax, cfg(epochs=2, **kw), out_dir=tmp_path)
    model, state, config = load_checkpoint(first.checkpoint)
    second, m_res, _ = fit(train, tax, dataclasses.replace(config, epochs=2), model=model, state=state)
    assert [r.epoch for r in second.records] == [3, 4]
    assert first.to_csv(2).splitlines()[1:] + second.to_csv(2).splitlines()[1:] == full.to_csv(2).splitlines()[1:]
    for p, q in zip(m_full.parameters(), m_res.parameters()):
        assert np.array_equal(p.data, q.data)
