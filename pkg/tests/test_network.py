import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omrlane.autodiff import Tensor, conv2d
from omrlane.autodiff.gradcheck import check_gradients
from omrlane.config import ModelConfig
from omrlane.eigenlane import EigenlaneBasis
from omrlane.errors import ConfigError, DimensionError
from omrlane.network import LaneNet, init_network_params, positional_bias, threshold_obstacles
from omrlane.nms import nms_decode, render_lane_mask

from oracles import nms_sort_scan, stripe_pixels


def small_cfg(**kw):
    base = dict(image_h=64, image_w=64, K=8, H=8, W=8, M=3, N=10, backbone=(4, 4, 8, 8, 8))
    base.update(kw)
    return ModelConfig(**base)


def make_net(cfg, seed=0):
    return LaneNet(cfg, init_network_params(cfg, np.random.default_rng(seed)))


def random_basis(N, M, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(N, M)))
    return EigenlaneBasis(q)


# ---- encoder -------------------------------------------------------------------------------------
def test_desk_encoder_shape():
    cfg = ModelConfig()
    F = make_net(cfg).encode(np.random.default_rng(0).uniform(size=(3, 96, 160)))
    assert F.shape == (16, 24, 40)


def test_paper_scale_encoder_shape():
    cfg = ModelConfig.paper_scale()
    F = make_net(cfg).encode(np.zeros((1, 3, 384, 640)))
    assert F.shape == (1, 64, 96, 160)


def test_zero_image_gives_zero_features():
    cfg = small_cfg()
    F = make_net(cfg).encode(np.zeros((2, 3, 64, 64)))
    assert np.all(F.data == 0.0)


def test_encoder_rejects_bad_input():
    net = make_net(small_cfg())
    with pytest.raises(ConfigError):
        net.encode(np.zeros((3, 60, 64)))
    with pytest.raises(DimensionError):
        net.encode(np.zeros((4, 64, 64)))


@settings(max_examples=6, deadline=None)
@given(hk=st.integers(1, 3), wk=st.integers(1, 3), K=st.sampled_from([4, 8]), M=st.integers(1, 4),
       H=st.integers(4, 10), W=st.integers(4, 10))
def test_shapes_over_random_configs(hk, wk, K, M, H, W):
    cfg = ModelConfig(image_h=32 * hk, image_w=32 * wk, K=K, H=H, W=W, M=M, N=8, backbone=(4, 4, 4, 4, 4))
    net = make_net(cfg)
    F = net.encode(np.random.default_rng(0).uniform(size=(3, cfg.image_h, cfg.image_w)))
    assert F.shape == (K, H, W)
    maps = net.decode(F)
    assert maps.P.shape == (1, H, W) and maps.C.shape == (M, H, W)
    assert maps.E1.shape == (50, H, W) and maps.E2.shape == (25, H, W) and maps.B.shape == (K, H, W)


# ---- decoder ----------------------------------------------------------------------------------
def test_probabilities_strictly_inside_unit_interval():
    cfg = small_cfg()
    net = make_net(cfg)
    P = net.decode_prob(Tensor(np.random.default_rng(1).normal(scale=5, size=(8, 8, 8)))).data
    assert np.all(P > 0) and np.all(P < 1)


def test_zero_projection_gives_half():
    cfg = small_cfg()
    net = make_net(cfg)
    net.params["dec.prob.proj.w"].data[:] = 0
    net.params["dec.prob.proj.b"].data[:] = 0
    P = net.decode_prob(Tensor(np.random.default_rng(2).normal(size=(8, 8, 8)))).data
    assert np.all(P == 0.5)


def test_forced_offsets_reduce_coefficients_to_plain_conv():
    cfg = small_cfg()
    net = make_net(cfg)
    net.params["dec.dcn.b"].data[:] = np.random.default_rng(3).normal(size=cfg.M)
    F = Tensor(np.random.default_rng(4).normal(size=(8, 8, 8)))
    C, parts = net.decode_coeff(F, force_offsets=0.0, force_modulation=1.0, return_parts=True)
    ref = conv2d(parts["T"], net.params["dec.dcn.w"], net.params["dec.dcn.b"], pad=2).data * cfg.coeff_scale
    assert np.max(np.abs(C.data - ref)) < 1e-10


def test_decoded_map_channel_counts():
    cfg = ModelConfig()
    net = make_net(cfg)
    maps = net.decode(Tensor(np.random.default_rng(5).normal(size=(1, 16, 24, 40))))
    assert maps.E1.shape[1] == 50 and maps.E2.shape[1] == 25
    assert maps.C.shape == (1, 6, 24, 40)


def test_decode_prob_gradcheck():
    cfg = small_cfg()
    net = make_net(cfg)
    rng = np.random.default_rng(6)
    F = Tensor(rng.normal(size=(8, 8, 8)), requires_grad=True)
    w = rng.normal(size=(1, 8, 8))
    params = [net.params[n] for n in ("dec.prob.c1.w", "dec.prob.proj.w", "dec.prob.proj.b")]
    res = check_gradients(lambda: (net.decode_prob(F) * w).sum(), [F] + params, max_entries=60, rng=rng)
    assert res.max_rel_error < 1e-3


def test_decode_coeff_gradcheck():
    cfg = small_cfg()
    net = make_net(cfg)
    rng = np.random.default_rng(7)
    # non-trivial offsets and modulation so the deformable path is exercised
    net.params["dec.off.proj.w"].data[:] = rng.normal(scale=0.3, size=net.params["dec.off.proj.w"].shape)
    net.params["dec.mod.proj.w"].data[:] = rng.normal(scale=0.3, size=net.params["dec.mod.proj.w"].shape)
    F = Tensor(rng.normal(size=(8, 8, 8)), requires_grad=True)
    w = rng.normal(size=(cfg.M, 8, 8)) / cfg.coeff_scale
    names = ("dec.off.c1.w", "dec.off.proj.w", "dec.mod.proj.w", "dec.feat.c2.w", "dec.dcn.w", "dec.dcn.b")
    res = check_gradients(lambda: (net.decode_coeff(F) * w).sum(), [F] + [net.params[n] for n in names],
                          max_entries=40, rng=rng)
    assert res.max_rel_error < 1e-3 and res.checked > 150


# ---- positional bias ------------------------------------------------------------------------------
def test_positional_bias_values():
    B = positional_bias(6, 7, 8)
    assert B.shape == (8, 6, 7)
    assert B[0, 0, 3] == 0.0 and B[1, 0, 3] == 1.0
    assert B[4, 2, 0] == 0.0 and B[5, 2, 0] == 1.0
    assert np.all(np.abs(B) <= 1.0)
    assert np.allclose(B[2, :, 0], np.sin(np.arange(6) * 10000 ** (-2 / 4)))
    assert positional_bias(6, 7, 8) is B
    with pytest.raises(ConfigError):
        positional_bias(6, 7, 6)


# ---- obstacles -------------------------------------------------------------------------------------
def test_threshold_is_strict():
    assert list(threshold_obstacles(np.array([0.29, 0.30, 0.31]), 0.3)) == [0.0, 0.0, 1.0]


def test_flipping_one_value_flips_one_pixel():
    S = np.random.default_rng(8).uniform(size=(6, 6))
    O = threshold_obstacles(S)
    S2 = S.copy()
    S2[2, 3] = 0.1 if S[2, 3] > 0.3 else 0.9
    assert np.count_nonzero(threshold_obstacles(S2) != O) == 1


def test_zero_weight_obstacle_head():
    cfg = small_cfg()
    net = make_net(cfg)
    net.params["obs.proj.w"].data[:] = 0
    net.params["obs.proj.b"].data[:] = 0
    out = net.detect_obstacles(Tensor(np.random.default_rng(9).normal(size=(8, 8, 8))))
    assert np.all(out.S.data == 0.5) and np.all(out.O == 1.0)


# ---- NMS -----------------------------------------------------------------------------------------
def nms_cfg():
    return ModelConfig(image_h=64, image_w=64, K=8, H=16, W=16, M=3, N=12)


def test_nms_nothing_above_threshold():
    cfg = nms_cfg()
    P = np.full((16, 16), 0.5)
    out = nms_decode(P, np.zeros((3, 16, 16)), random_basis(12, 3, 0), cfg)
    assert out.lanes == [] and not out.L.any()


def test_nms_single_peak():
    cfg = nms_cfg()
    basis = random_basis(12, 3, 1)
    P = np.full((16, 16), 0.1)
    P[5, 7] = 0.9
    c = np.array([60.0, 5.0, -3.0])
    C = np.broadcast_to(c[:, None, None], (3, 16, 16)).copy()
    out = nms_decode(P, C, basis, cfg)
    assert len(out.lanes) == 1
    assert np.array_equal(out.lanes[0][0].xs, basis.reconstruct(c))
    assert np.array_equal(out.L, render_lane_mask([basis.reconstruct(c)], cfg))


def _vertical_lane_coeffs(basis, x):
    return basis.project(np.full(basis.N, x))


def test_nms_two_peaks_inside_and_outside_stripe():
    cfg = nms_cfg()
    U = np.linalg.qr(np.column_stack([np.ones(12), np.linspace(0, 1, 12), np.linspace(0, 1, 12) ** 2]))[0]
    basis = EigenlaneBasis(U)
    for col2, expected in ((5, 1), (13, 2)):
        P = np.full((16, 16), 0.2)
        C = np.zeros((3, 16, 16))
        P[8, 4], P[9, col2] = 0.9, 0.8
        for r, c in ((8, 4), (9, col2)):
            C[:, r, c] = _vertical_lane_coeffs(basis, (c + 0.5) * 4 - 0.5)
        out = nms_decode(P, C, basis, cfg)
        assert len(out.lanes) == expected


@pytest.mark.parametrize("seed", range(12))
def test_nms_matches_sort_and_scan_oracle(seed):
    cfg = nms_cfg()
    rng = np.random.default_rng(seed)
    basis = random_basis(12, 3, seed + 100)
    P = rng.uniform(0, 1, size=(16, 16)) ** 2
    C = np.zeros((3, 16, 16))
    for r in range(16):
        for c in range(16):
            xs = (c + 0.5) * 4 - 0.5 + rng.normal(scale=3) * np.linspace(-1, 1, 12)
            C[:, r, c] = basis.project(xs)
    out = nms_decode(P, C, basis, cfg)
    rows = cfg.sample_rows
    kept = nms_sort_scan(P, C, basis.U, cfg, lambda xs: stripe_pixels(
        xs, rows, 16, 16, 64, 64, 2 * cfg.nms_half_width, (0, 11)))
    assert out.seeds == [(r, c) for r, c, _, _ in kept]
    for (lane, score), (_, _, xs, p) in zip(out.lanes, kept):
        assert score == p and np.allclose(lane.xs, xs, rtol=0, atol=1e-9)
    scores = [s for _, s in out.lanes]
    assert all(s > 0.5 for s in scores) and scores == sorted(scores, reverse=True)
    assert len(out.lanes) <= cfg.nms_max_lanes


def test_nms_respects_cap():
    cfg = ModelConfig(image_h=64, image_w=64, K=8, H=16, W=16, M=3, N=12, nms_half_width=0.1)
    basis = random_basis(12, 3, 3)
    P = np.full((16, 16), 0.9)
    out = nms_decode(P, np.zeros((3, 16, 16)), basis, cfg)
    assert len(out.lanes) == cfg.nms_max_lanes
