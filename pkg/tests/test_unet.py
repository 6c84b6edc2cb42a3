from dataclasses import replace

import numpy as np
import pytest

from rediffuse import autodiff as ad
from rediffuse.diffusion import make_schedule
from rediffuse.groups import RotationGroup, rotate_field
from rediffuse.unet import (Denoiser, UNetConfig, check_input_size, conv_parameter_table,
                            count_parameters, init_params, layout, resblock_forward,
                            sinusoidal_embedding, time_embedding, unet_forward)


def _inputs(n=2, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((n, size, size, 1)).astype(np.float32) for _ in range(3)]


def test_sinusoidal_at_zero():
    e = sinusoidal_embedding(0, 32)[0]
    np.testing.assert_array_equal(e[:16], 0.0)
    np.testing.assert_array_equal(e[16:], 1.0)


def test_time_embedding_distinct_steps():
    cfg = UNetConfig()
    P = init_params(cfg, np.random.default_rng(0))
    tape = ad.Tape(record=False)
    e = time_embedding(tape, tape.params(P), np.array([1, 50, 100]), cfg).value
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(e[i] - e[j]) > 0


def _res_params(rng, cin, cout, m, zero=False):
    cfg = UNetConfig(base_channels=cin * m, m=m, gn_groups=1)
    f = (lambda s: np.zeros(s)) if zero else (lambda s: rng.standard_normal(s) * 0.3)
    P = {"r.gn1.gamma": np.ones(cin), "r.gn1.beta": np.zeros(cin),
         "r.conv1": f((cout, cin, m, 3, 3)), "r.temb.w": f((8, cout)), "r.temb.b": np.zeros(cout),
         "r.gn2.gamma": np.ones(cout), "r.gn2.beta": np.zeros(cout), "r.conv2": f((cout, cout, m, 3, 3))}
    if cin != cout:
        P["r.skip"] = f((cout, cin, m, 1, 1))
    return cfg, P


def _run_res(cfg, P, f, temb):
    tape = ad.Tape(record=False)
    return resblock_forward(tape.const(f), tape.const(temb), tape.params(P), "r", cfg).value


def test_resblock_zero_weights_identity():
    rng = np.random.default_rng(0)
    cfg, P = _res_params(rng, 3, 3, 4, zero=True)
    f = rng.standard_normal((2, 6, 6, 4, 3))
    np.testing.assert_array_equal(_run_res(cfg, P, f, rng.standard_normal((2, 8))), f)


def test_resblock_equivariant():
    rng = np.random.default_rng(1)
    cfg, P = _res_params(rng, 2, 3, 4)
    f = rng.standard_normal((1, 8, 8, 4, 2))
    temb = rng.standard_normal((1, 8))
    g = RotationGroup(4)
    base = _run_res(cfg, P, f, temb)
    for k in (1, 2, 3):
        got = _run_res(cfg, P, rotate_field(f, g, k), temb)
        assert np.abs(got - rotate_field(base, g, k)).max() <= 1e-5


def test_resblock_time_dependence():
    rng = np.random.default_rng(2)
    cfg, P = _res_params(rng, 2, 2, 4)
    f = rng.standard_normal((1, 6, 6, 4, 2))
    t1, t2 = rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
    assert not np.allclose(_run_res(cfg, P, f, t1), _run_res(cfg, P, f, t2))
    P["r.temb.w"] = np.zeros_like(P["r.temb.w"])
    np.testing.assert_array_equal(_run_res(cfg, P, f, t1), _run_res(cfg, P, f, t2))


def test_shape_contract_depth4():
    cfg = UNetConfig(base_channels=64, depth=4, gn_groups=16)
    P = init_params(cfg, np.random.default_rng(0))
    a, b, f = _inputs(1)
    out = Denoiser(P, cfg)(a, b, f, 10)
    assert out.shape == (1, 32, 32, 1)
    assert 32 // 2 ** cfg.depth == 2


@pytest.mark.parametrize("skip_mode", ["pre_pool", "post_pool"])
def test_end_to_end_equivariance_m4(skip_mode):
    cfg = UNetConfig(skip_mode=skip_mode)
    model = Denoiser(init_params(cfg, np.random.default_rng(3)), cfg)
    a, b, f = _inputs()
    t = np.array([1, 77])
    base = model(a, b, f, t)
    r = lambda x, k: np.rot90(x, k, axes=(1, 2)).copy()
    for k in (1, 2, 3):
        assert np.abs(model(r(a, k), r(b, k), r(f, k), t) - r(base, k)).max() <= 1e-4


def test_plain_ablation_not_equivariant():
    cfg = UNetConfig(equivariant=False)
    model = Denoiser(init_params(cfg, np.random.default_rng(3)), cfg)
    a, b, f = _inputs()
    base = model(a, b, f, 10)
    got = model(*(np.rot90(x, 1, axes=(1, 2)).copy() for x in (a, b, f)), 10)
    assert np.abs(got - np.rot90(base, 1, axes=(1, 2))).max() > 1e-2


def test_parameter_counts_closed_form():
    cfg = UNetConfig()
    P = init_params(cfg, np.random.default_rng(0))
    rows = conv_parameter_table(cfg)
    for name, count, regular in rows:
        assert count * cfg.m == regular, name
        assert P[name].size == count
    lay = layout(cfg)
    hand = sum(c for _, c, _ in rows) + 2 * sum(lay.norms.values()) + sum(a * b + b for a, b in lay.dense.values())
    assert count_parameters(P) == hand


def test_parameter_counts_hand_formula():
    # head lift: 8 fields x 3 inputs x 3 x 3; a group conv 8 -> 8: 8 x 8 x 4 x 3 x 3
    cfg = UNetConfig()
    table = {name: count for name, count, _ in conv_parameter_table(cfg)}
    assert table["head.conv"] == 8 * 3 * 9
    assert table["down0.res0.conv1"] == 8 * 8 * 4 * 9
    assert table["out.conv"] == 1 * 8 * 4 * 9


def test_indivisible_size_diagnostic():
    with pytest.raises(ValueError, match="pad to 36x36"):
        check_input_size(34, 34, 2)
    cfg = UNetConfig()
    P = init_params(cfg, np.random.default_rng(0))
    x = np.zeros((1, 30, 30, 1), np.float32)
    with pytest.raises(ValueError):
        Denoiser(P, cfg)(x, x, x, 1)


def test_mismatched_inputs_rejected():
    cfg = UNetConfig()
    P = init_params(cfg, np.random.default_rng(0))
    tape = ad.Tape(record=False)
    with pytest.raises(ValueError):
        unet_forward(tape, tape.params(P), np.zeros((1, 32, 32, 1)), np.zeros((1, 16, 16, 1)),
                     np.zeros((1, 32, 32, 1)), np.array([1]), cfg)


@pytest.mark.parametrize("kwargs", [dict(depth=0), dict(kernel_size=4), dict(base_channels=30),
                                    dict(gn_groups=5), dict(head_order="x"), dict(skip_mode="x")])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        UNetConfig(**kwargs)


def test_denoiser_deterministic():
    cfg = UNetConfig()
    model = Denoiser(init_params(cfg, np.random.default_rng(0)), cfg)
    a, b, f = _inputs()
    np.testing.assert_array_equal(model(a, b, f, 5), model(a, b, f, 5))


def test_dc_anchor_changes_only_the_mean():
    cfg = UNetConfig(base_channels=8, m=4, depth=1, gn_groups=2)
    P = init_params(cfg, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    a, b, f = (rng.random((2, 8, 8, 1)).astype(np.float32) for _ in range(3))
    on = Denoiser(P, cfg)(a, b, f, 30)
    off = Denoiser(P, replace(cfg, dc_anchor=False))(a, b, f, 30)
    c = lambda x: x - x.mean(axis=(1, 2, 3), keepdims=True)
    np.testing.assert_allclose(c(on), c(off), atol=1e-5)
    sched = make_schedule(cfg.T)
    ab = sched.alpha_bar[30]
    want = (f.mean(axis=(1, 2, 3)) - np.sqrt(ab) * (a + b).mean(axis=(1, 2, 3)) / 2) / np.sqrt(1 - ab)
    np.testing.assert_allclose(on.mean(axis=(1, 2, 3)), want, atol=1e-5)
