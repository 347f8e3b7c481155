import math
from dataclasses import replace

import numpy as np
import pytest

from mcgkt import tensor as T
from mcgkt.archive import WeightArchive
from mcgkt.errors import ConfigError, NumericError, UsageError
from mcgkt.model import ModelConfig, expected_parameter_count, init_model
from mcgkt.rain import RainConfig, make_synthetic_dataset
from mcgkt.tensor import Tensor
from mcgkt.train import (ALL_COMBOS, AdamState, TrainConfig, ablation_csv, adam_step, batch_for_step,
                         build_model, history_csv, load_checkpoint, resume, run_ablation, train)

from oracles import adam_scalar

TINY = ModelConfig(base_channels=2, se_ratio=2)
CFG = TrainConfig(batch_size=2, steps=6, patch_size=16, seed=3)


@pytest.fixture(scope="module")
def data():
    return make_synthetic_dataset(5, 24, RainConfig(), seed=11)


# ------------------------------------------------------------------ Adam

def scalar(value, grad):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return p


def test_adam_first_step_is_lr():
    p = scalar(1.0, 1.0)
    adam_step({"p": p}, AdamState(), 1e-3)
    assert abs((1.0 - p.data[0]) - 1e-3) <= 1e-8 * 1e-3
    assert p.grad is None


def test_adam_zero_grad_keeps_params():
    p = scalar(0.7, 0.0)
    st = AdamState()
    adam_step({"p": p}, st, 1e-3)
    assert p.data[0] == 0.7 and st.t == 1


def test_adam_two_steps_match_reference():
    p = scalar(0.5, 0.3)
    st = AdamState()
    adam_step({"p": p}, st, 0.01)
    p.grad = np.array([0.3])
    adam_step({"p": p}, st, 0.01)
    assert abs(p.data[0] - adam_scalar(0.5, [0.3, 0.3], 0.01)) < 1e-10


def test_adam_lr_zero_bit_identical():
    model = init_model(TINY, seed=1)
    before = model.state_dict()
    x = np.random.default_rng(0).random((1, 3, 8, 8)).astype(np.float32)
    T.backward(T.mse_loss(model(x), Tensor(x)))
    adam_step(model.parameters(), AdamState(), 0.0)
    for name, arr in model.state_dict().items():
        assert np.array_equal(arr, before[name]), name


def test_adam_missing_grad_names_parameter():
    with pytest.raises(UsageError, match="enc9"):
        adam_step({"enc9": Tensor(np.zeros(1), requires_grad=True)}, AdamState(), 1e-3)


# ------------------------------------------------------------------ config and batching

@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"batch_size": 0}, {"patch_size": 12}, {"steps": -1}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_step_budget():
    assert TrainConfig(batch_size=4, epochs=3).total_steps(10) == 9
    assert TrainConfig(steps=7).total_steps(10) == 7


def test_batches_are_pure_functions_of_step(data):
    a = batch_for_step(data, CFG, 4)
    b = batch_for_step(data, CFG, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].shape == (2, 3, 16, 16) and a[0].dtype == np.float32
    assert not np.array_equal(batch_for_step(data, CFG, 5)[0], a[0])


# ------------------------------------------------------------------ training

def _run(data, **kw):
    model, _ = build_model(TINY, CFG)
    return train(model, data, CFG, **kw)


def test_training_deterministic(data):
    a, b = _run(data), _run(data)
    assert a.history == b.history
    assert len(a.history) == 6 and all(math.isfinite(v) for v in a.history)
    for name, arr in a.model.state_dict().items():
        assert np.array_equal(arr, b.model.parameters()[name].data)


def test_resume_matches_uninterrupted(tmp_path, data):
    full = _run(data)
    cfg = replace(CFG, checkpoint_interval=3)
    model, _ = build_model(TINY, cfg)
    part = train(model, data, cfg, checkpoint_dir=tmp_path, stop_at=3)
    assert [p.name for p in part.checkpoints] == ["ckpt_000003.mcgw"]
    resumed = resume(part.checkpoints[0], data)
    assert resumed.history == full.history
    for name, arr in full.model.state_dict().items():
        assert np.array_equal(arr, resumed.model.parameters()[name].data)


def test_checkpoint_contents(tmp_path, data):
    cfg = replace(CFG, checkpoint_interval=2, steps=2)
    model, _ = build_model(TINY, cfg)
    res = train(model, data, cfg, checkpoint_dir=tmp_path)
    m, st, hist, saved = load_checkpoint(res.checkpoints[-1])
    assert saved == cfg and st.t == 2 and hist == res.history
    assert set(st.m) == set(m.parameters())


def test_empty_dataset():
    with pytest.raises(ConfigError):
        _run([])


def test_non_finite_loss_aborts(data):
    model, _ = build_model(TINY, CFG)
    model.head.bias.data[:] = np.inf
    with pytest.raises(NumericError, match="step 0"):
        train(model, data, CFG)


def test_history_csv():
    assert history_csv([0.5, 0.25]) == "step,loss\n1,0.5\n2,0.25\n"


def test_build_model_applies_toggles_and_ekt(tmp_path):
    cfg = replace(CFG, ikt=False, mlcg=False)
    model, report = build_model(TINY, cfg)
    assert model.ikt == [] and model.se == [] and report is None
    w = np.ones((2, 3, 3, 3), np.float32)
    path = WeightArchive({"stage1.conv1.weight": w}).save(tmp_path / "v.mcgw")
    model, report = build_model(TINY, replace(CFG, ekt=True, ekt_archive=str(path)))
    assert len(report.copied) == 1
    assert np.array_equal(model.parameters()["enc1.conv1.weight"].data, w)
    with pytest.raises(ConfigError):
        build_model(TINY, replace(CFG, ekt=True))


@pytest.mark.parametrize("combo", ALL_COMBOS)
def test_toggle_parameter_count(combo):
    ikt, _, mlcg = combo
    model, _ = build_model(ModelConfig.desk(), replace(CFG, ikt=ikt, mlcg=mlcg))
    assert model.parameter_count() == expected_parameter_count(model.config)


# ------------------------------------------------------------------ ablation

def test_ablation_rows(data):
    train_set, eval_set = data[:3], data[3:]
    cfg = replace(CFG, steps=2)
    combos = [(False, False, False), (True, False, True), (False, True, False), (True, False, True)]
    rows = run_ablation(train_set, eval_set, TINY, cfg, combos)
    labels = [r.label for r in rows]
    assert labels == ["rainy-input", "baseline", "IKT+MLCG", "EKT"]
    assert rows[1].status == "ok" and math.isfinite(rows[1].psnr)
    assert rows[3].status.startswith("failed")   # EKT without an archive
    text = ablation_csv(rows)
    assert text.splitlines()[0] == "setup,ikt,ekt,mlcg,psnr_db,ssim,status"
    assert text.splitlines()[1].startswith("rainy-input,,,,")


def test_ablation_baseline_is_plain_encoder_decoder(data):
    cfg = replace(CFG, steps=1, ikt=False, mlcg=False)
    model, _ = build_model(TINY, cfg)
    assert not any(n.startswith(("ikt", "se")) for n in model.parameters())


def test_ablation_rejects_overlap(data):
    with pytest.raises(ConfigError):
        run_ablation(data[:3], data[2:], TINY, CFG, [(False, False, False)])
