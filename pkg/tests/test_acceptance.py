"""The eight acceptance criteria, one test each.

Every test records one ``criterion N: PASS|FAIL ...`` line, printed in the
pytest terminal summary (and immediately with ``-s``).
"""
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from mcgkt import tensor as T
from mcgkt.archive import WeightArchive
from mcgkt.gradcheck import run_suite
from mcgkt.layers import ConvBlockParams, ConvLSTMParams, ConvParams, SEParams, conv_block, ikt_fuse, se_gate
from mcgkt.metrics import psnr, ssim
from mcgkt.model import (MCGKTModel, ModelConfig, expected_parameter_count, import_ekt, init_model,
                         load_model, save_model)
from mcgkt.rain import RainConfig, make_synthetic_dataset
from mcgkt.tensor import Tensor
from mcgkt.train import ALL_COMBOS, TrainConfig, build_model, evaluate_model, resume, train

import conftest
from oracles import conv_loop, convlstm_loop, maxpool_loop, psnr_loop, se_loop, ssim_constant


@contextmanager
def criterion(number, title):
    """Record a pass/fail line for ``number``; the details dict is filled by the body."""
    details = {}
    t0 = time.perf_counter()
    try:
        yield details
    except BaseException as exc:
        status, note = "FAIL", f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    else:
        status, note = "PASS", ""
    finally:
        extra = " ".join(f"{k}={v}" for k, v in details.items())
        line = f"criterion {number}: {status} {title} [{time.perf_counter() - t0:.1f}s] {extra} {note}".rstrip()
        conftest.ACCEPTANCE_LINES.append(line)
        print(line)


def _randomize(params, rng, scale=0.5):
    for t in params.tensors().values():
        t.data = rng.standard_normal(t.shape) * scale
    return params


# ------------------------------------------------------------------ 1

def test_criterion_1_gradients():
    with criterion(1, "finite-difference gradients, every op + tiny model, 20 instances") as d:
        t0 = time.perf_counter()
        results = run_suite(instances=20, seed=0, include_model=True)
        elapsed = time.perf_counter() - t0
        d["ops"] = len(results)
        d["worst"] = f"{max(r.worst for r in results):.2e}"
        d["excluded_kink_probes"] = sum(r.straddled for r in results)
        failed = [(r.name, r.worst) for r in results if not r.passed]
        assert not failed, failed
        assert all(r.instances >= 20 for r in results)
        assert any(r.name == "model" for r in results)
        assert elapsed < 120, f"suite took {elapsed:.0f}s"


# ------------------------------------------------------------------ 2

def test_criterion_2_oracles():
    with criterion(2, "brute-force / scalar oracle equivalence") as d:
        rng = np.random.default_rng(20)
        worst = {}
        for shape, cout in (((1, 2, 5, 5), 4), ((2, 3, 6, 4), 2), ((1, 1, 3, 3), 1)):
            x = rng.standard_normal(shape).astype(np.float32)
            w = rng.standard_normal((cout, shape[1], 3, 3)).astype(np.float32)
            b = rng.standard_normal(cout).astype(np.float32)
            err = np.abs(T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data - conv_loop(x, w, b)).max()
            worst["conv2d"] = max(worst.get("conv2d", 0), err)
        assert worst["conv2d"] < 1e-5

        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        worst["maxpool"] = np.abs(T.maxpool2x2(Tensor(x)).data - maxpool_loop(x)).max()
        assert worst["maxpool"] == 0

        p = _randomize(ConvLSTMParams.zeros(2, np.float64), rng)
        e, dd = rng.standard_normal((2, 1, 2, 4, 4))
        ref = convlstm_loop(e, dd, {k: v.data for k, v in p.tensors().items()})
        worst["convlstm"] = np.abs(ikt_fuse(Tensor(e), Tensor(dd), p).data - ref).max()
        assert worst["convlstm"] < 1e-5

        p = _randomize(SEParams.zeros(6, 2, np.float64), rng, 1.0)
        x = rng.standard_normal((2, 6, 3, 4))
        ref = se_loop(x, p.fc1.weight.data, p.fc1.bias.data, p.fc2.weight.data, p.fc2.bias.data)
        worst["se"] = np.abs(se_gate(Tensor(x), p).data - ref).max()
        assert worst["se"] < 1e-5

        a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
        worst["psnr_db"] = abs(psnr(a, b) - psnr_loop(a, b))
        assert worst["psnr_db"] < 1e-6
        c = np.full((3, 16, 16), 10 / 255)
        assert abs(psnr(c, c + 10 / 255) - 20 * math.log10(25.5)) < 0.01

        worst["ssim"] = max(abs(ssim(np.full((3, 12, 12), v1 / 255), np.full((3, 12, 12), v2 / 255))
                                - ssim_constant(v1, v2)) for v1, v2 in ((100, 140), (0, 255), (17, 200)))
        assert worst["ssim"] < 1e-6
        d.update({k: f"{v:.1e}" for k, v in worst.items()})


# ------------------------------------------------------------------ 3

def test_criterion_3_layer_invariants():
    with criterion(3, "analytic layer invariants") as d:
        rng = np.random.default_rng(30)
        e, dd = (Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32)) for _ in range(2))
        assert np.array_equal(ikt_fuse(e, dd, ConvLSTMParams.zeros(4)).data, np.zeros((2, 4, 6, 6)))

        x = rng.standard_normal((2, 8, 5, 5)).astype(np.float32)
        assert np.array_equal(se_gate(Tensor(x), SEParams.zeros(8, 4)).data, x * np.float32(0.5))

        sat = SEParams.zeros(8, 4)
        sat.fc2.bias.data[:] = 40
        d["saturated_se_err"] = f"{np.abs(se_gate(Tensor(x), sat).data - x).max():.1e}"
        assert np.abs(se_gate(Tensor(x), sat).data - x).max() <= 1e-4

        eye = np.zeros((4, 4, 3, 3), np.float32)
        eye[range(4), range(4), 1, 1] = 1
        ident = ConvParams(Tensor(eye), Tensor(np.zeros(4, np.float32)))
        x = rng.random((1, 4, 8, 8)).astype(np.float32)
        assert np.array_equal(conv_block(Tensor(x), ConvBlockParams(ident, ident, ident)).data, x)


# ------------------------------------------------------------------ 4

def test_criterion_4_shape_laws():
    with criterion(4, "shape, level and parameter-count laws") as d:
        model = init_model(ModelConfig.desk(), seed=4)
        shapes = [(1, 3, 8, 8), (1, 3, 64, 64), (2, 3, 32, 32), (3, 3, 16, 40)]
        with T.no_grad():
            for s in shapes:
                x = Tensor(np.zeros(s, np.float32))
                f = model.features(x)
                assert f["output"].shape == s
                n, _, h, w = s
                for j in range(1, 5):
                    want = (n, 8 * 2 ** (j - 1), h >> (j - 1), w >> (j - 1))
                    assert f[f"E_o{j}"].shape == want and f[f"D_o{j}"].shape == want
        counts = {}
        for ikt, _, mlcg in ALL_COMBOS:
            for fusion in ("sum", "concat"):
                cfg = ModelConfig.desk(enable_ikt=ikt, enable_mlcg=mlcg, skip_fusion=fusion)
                n = MCGKTModel(cfg).parameter_count()
                assert n == expected_parameter_count(cfg), cfg
                counts[(ikt, mlcg, fusion)] = n
        ikt_add = counts[(True, False, "sum")] - counts[(False, False, "sum")]
        se_add = counts[(False, True, "sum")] - counts[(False, False, "sum")]
        assert ikt_add == sum(8 * 9 * c * c + 4 * c for c in (8, 16, 32))
        assert se_add == sum(2 * (c // 4) * c + c // 4 + c for c in (8, 16, 32, 64))
        d.update(sizes=len(shapes), full_params=counts[(True, True, "sum")], ikt_adds=ikt_add, mlcg_adds=se_add)


# ------------------------------------------------------------------ 5

def test_criterion_5_overfit():
    with criterion(5, "overfit one 32x32 pair, C0=8, 500 steps, lr 2e-4") as d:
        pair = make_synthetic_dataset(1, 32, RainConfig(), seed=0)
        config = TrainConfig(learning_rate=2e-4, steps=500, patch_size=32, batch_size=4, seed=0)
        model, _ = build_model(ModelConfig.desk(), config)
        t0 = time.perf_counter()
        result = train(model, pair, config)
        elapsed = time.perf_counter() - t0
        p = pair[0][1]
        out = model.derain(p.rainy)
        mse = float(np.mean((out - p.clean) ** 2))
        d.update(mse=f"{mse:.2e}", psnr=f"{psnr(out, p.clean):.2f}dB", rainy_psnr=f"{psnr(p.rainy, p.clean):.2f}dB",
                 loss_200_ratio=f"{result.history[199] / result.history[0]:.3f}")
        assert len(result.history) == 500
        assert mse < 1e-3
        assert psnr(out, p.clean) > 30
        assert result.history[199] < 0.1 * result.history[0]
        assert elapsed < 300


# ------------------------------------------------------------------ 6

def test_criterion_6_desk_scale():
    with criterion(6, "desk scale: 50 train / 10 held-out 64x64 regular pairs, 2000 steps") as d:
        rain = RainConfig(mode="regular")
        train_set = make_synthetic_dataset(50, 64, rain, seed=1, prefix="train")
        eval_set = make_synthetic_dataset(10, 64, rain, seed=2, prefix="eval")
        config = TrainConfig(steps=2000, patch_size=64, batch_size=4, seed=0)
        model, _ = build_model(ModelConfig.desk(), config)
        assert model.config.enable_ikt and model.config.enable_mlcg
        t0 = time.perf_counter()
        train(model, train_set, config)
        elapsed = time.perf_counter() - t0
        rainy_psnr = float(np.mean([psnr(p.rainy, p.clean) for _, p in eval_set]))
        rainy_ssim = float(np.mean([ssim(p.rainy, p.clean) for _, p in eval_set]))
        out_psnr, out_ssim = evaluate_model(model, eval_set)
        d.update(rainy=f"{rainy_psnr:.2f}dB/{rainy_ssim:.3f}", derained=f"{out_psnr:.2f}dB/{out_ssim:.3f}",
                 gain=f"{out_psnr - rainy_psnr:+.2f}dB")
        assert out_psnr - rainy_psnr >= 2.0
        assert out_ssim > rainy_ssim
        assert elapsed < 1800


# ------------------------------------------------------------------ 7

def test_criterion_7_determinism(tmp_path):
    with criterion(7, "determinism, save/load, checkpoint resume") as d:
        data = make_synthetic_dataset(6, 32, RainConfig(), seed=7)
        config = TrainConfig(steps=12, patch_size=32, batch_size=2, seed=5, checkpoint_interval=5)

        def fresh():
            return build_model(ModelConfig.desk(), config)[0]

        a = train(fresh(), data, config)
        b = train(fresh(), data, config)
        assert a.history == b.history

        path = save_model(a.model, tmp_path / "m.mcgw")
        back = load_model(path)
        for name, arr in a.model.state_dict().items():
            assert np.array_equal(back.parameters()[name].data, arr)

        part = train(fresh(), data, config, checkpoint_dir=tmp_path / "ck", stop_at=5)
        resumed = resume(part.checkpoints[-1], data)
        assert resumed.history == a.history
        for name, arr in a.model.state_dict().items():
            assert np.array_equal(resumed.model.parameters()[name].data, arr)
        d.update(steps=len(a.history), resumed_from=part.checkpoints[-1].name)


# ------------------------------------------------------------------ 8

def _vgg16_archive(stages=(1, 2, 3), seed=8):
    rng = np.random.default_rng(seed)
    convs = {1: 2, 2: 2, 3: 3}
    arch, cin = WeightArchive(), 3
    for s in stages:
        c = 64 * 2 ** (s - 1)
        for k in range(1, convs[s] + 1):
            arch[f"stage{s}.conv{k}.weight"] = rng.standard_normal((c, cin, 3, 3)) * 0.05
            arch[f"stage{s}.conv{k}.bias"] = rng.standard_normal(c) * 0.05
            cin = c
    return arch


def test_criterion_8_ekt():
    with criterion(8, "EKT import contract") as d:
        w = np.random.default_rng(80).standard_normal((64, 3, 3, 3)).astype(np.float32)
        single = WeightArchive({"stage1.conv1.weight": w})
        big = MCGKTModel(ModelConfig())
        rep = import_ekt(big, single)
        assert len(rep.copied) == 1 and rep.skipped_by_shape == []
        assert np.array_equal(big.parameters()["enc1.conv1.weight"].data, w)

        small = init_model(ModelConfig.desk())
        rep = import_ekt(small, single)
        assert rep.copied == [] and len(rep.skipped_by_shape) == 1

        rep = import_ekt(init_model(ModelConfig.desk()), _vgg16_archive(stages=(1, 2)))
        assert {"enc1.conv3", "enc2.conv3"} <= set(rep.unmapped)

        arch = _vgg16_archive()
        model = init_model(ModelConfig(base_channels=64), seed=0)
        rep = import_ekt(model, arch)
        params = model.parameters()
        for src, dst in rep.copied:
            assert np.array_equal(params[dst].data, arch[src]), dst
        assert len(rep.copied) == 14 and rep.skipped_by_shape == []
        assert rep.unmapped == ["enc1.conv3", "enc2.conv3"]
        assert not np.array_equal(params["enc4.conv1.weight"].data, 0)
        d.update(c0_64_copied=len(rep.copied), unmapped=",".join(rep.unmapped))
