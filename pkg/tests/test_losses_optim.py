import logging

import numpy as np
import pytest

from omrlane.autodiff import ParamStore, Tensor
from omrlane.autodiff.gradcheck import check_gradients
from omrlane.eigenlane import LaneCurve
from omrlane.errors import GraphError
from omrlane.losses import (
    LossReport,
    focal_loss,
    focal_loss_np,
    liou,
    liou_loss_batch,
    liou_loss_curves,
)
from omrlane.optim import AdamW, PlateauHalver

from oracles import interval_liou


# ---- focal ---------------------------------------------------------------------------------------
def test_focal_perfect_prediction():
    gt = (np.random.default_rng(0).uniform(size=(3, 5)) > 0.5) * 1.0
    assert focal_loss(Tensor(gt), gt).item() < 1e-5


def test_focal_single_pixel_value():
    v = focal_loss(Tensor([0.5]), [1.0]).item()
    assert abs(v - 0.25 * 0.25 * np.log(2)) < 1e-15
    assert round(v, 6) == 0.043322


def test_focal_reduces_to_bce():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.01, 0.99, size=(4, 6))
    gt = (rng.uniform(size=(4, 6)) > 0.5) * 1.0
    bce = -np.mean(gt * np.log(p) + (1 - gt) * np.log(1 - p))
    assert abs(focal_loss(Tensor(p), gt, gamma=0, alpha=None).item() - bce) < 1e-10


def test_focal_clamps_exact_zero_and_one():
    v = focal_loss(Tensor([0.0, 1.0]), [1.0, 0.0]).item()
    assert np.isfinite(v) and v > 0
    assert focal_loss(Tensor([0.0, 1.0]), [0.0, 1.0]).item() >= 0


def test_focal_numpy_and_tensor_agree():
    rng = np.random.default_rng(2)
    p = rng.uniform(size=(2, 1, 5, 5))
    gt = (rng.uniform(size=p.shape) > 0.7) * 1.0
    assert abs(focal_loss(Tensor(p), gt).item() - focal_loss_np(p, gt)) < 1e-15


def test_focal_gradcheck():
    rng = np.random.default_rng(3)
    p = Tensor(rng.uniform(0.05, 0.95, size=(1, 6, 6)))
    gt = (rng.uniform(size=(1, 6, 6)) > 0.6) * 1.0
    assert check_gradients(lambda: focal_loss(p, gt), [p]).max_rel_error < 1e-3


# ---- LIoU ----------------------------------------------------------------------------------------
def test_liou_identical_curves():
    xs = np.linspace(10, 50, 9)
    assert liou(xs, xs, 3.0) == 1.0
    assert liou_loss_curves(LaneCurve(xs), LaneCurve(xs), 3.0) == 0.0


def test_liou_touching_segments():
    xs = np.linspace(10, 50, 9)
    assert liou(xs + 6.0, xs, 3.0) == 0.0
    assert liou_loss_curves(LaneCurve(xs + 6.0), LaneCurve(xs), 3.0) == 1.0


def test_liou_far_apart_is_negative_and_loss_bounded():
    xs = np.zeros(5)
    v = liou(xs + 1000.0, xs, 2.0)
    assert -1 < v < 0
    assert 1 < 1 - v <= 2


@pytest.mark.parametrize("seed", range(10))
def test_liou_matches_interval_oracle(seed):
    rng = np.random.default_rng(seed)
    N = 20
    p, g = rng.normal(60, 15, size=N), rng.normal(60, 15, size=N)
    e = rng.uniform(1, 10)
    rows = rng.uniform(size=N) > 0.3
    assert abs(liou(p, g, e, rows) - interval_liou(p, g, e, rows)) < 1e-10
    a = LaneCurve(p, (2, 15))
    b = LaneCurve(g, (5, 19))
    both = a.valid_mask() & b.valid_mask()
    assert abs(liou_loss_curves(a, b, e) - (1 - interval_liou(p, g, e, both))) < 1e-10


def test_liou_no_shared_rows(caplog):
    a = LaneCurve(np.zeros(10), (0, 3))
    b = LaneCurve(np.zeros(10), (5, 9))
    with caplog.at_level(logging.WARNING):
        assert liou_loss_curves(a, b, 3.0) == 1.0
    assert caplog.records


def test_liou_batch_matches_scalar_and_gradcheck():
    rng = np.random.default_rng(11)
    pred = Tensor(rng.normal(50, 8, size=(4, 12)))
    gt = rng.normal(50, 8, size=(4, 12))
    rows = rng.uniform(size=(4, 12)) > 0.2
    got = liou_loss_batch(pred, gt, rows, 3.75).item()
    ref = np.mean([1 - interval_liou(pred.data[i], gt[i], 3.75, rows[i]) for i in range(4)])
    assert abs(got - ref) < 1e-12
    assert check_gradients(lambda: liou_loss_batch(pred, gt, rows, 3.75), [pred]).max_rel_error < 1e-3


def test_loss_report_total_is_sum():
    rep = LossReport.from_parts(0.1, 0.7, 0.2)
    assert rep.total == rep.cls_P + rep.reg_C + rep.cls_S
    rep2 = LossReport.from_parts(0.3, 0.4)
    assert rep2.total == 0.3 + 0.4 and "cls_S" not in rep2.to_dict()


# ---- optimizer -----------------------------------------------------------------------------------
def test_zero_gradient_no_decay_leaves_params():
    store = ParamStore()
    p = store.add("p", np.array([1.0, -2.0]))
    opt = AdamW(store, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_quadratic_converges():
    store = ParamStore()
    theta = store.add("theta", np.array([4.0]))
    target = -1.5
    opt = AdamW(store, lr=0.05, weight_decay=0.0)
    for _ in range(500):
        ((theta - target) ** 2).sum().backward()
        opt.step()
        store.zero_grad()
    assert abs(theta.data[0] - target) < 1e-3


def test_adamw_matches_closed_form_first_step():
    store = ParamStore()
    p = store.add("p", np.array([2.0]))
    opt = AdamW(store, lr=0.1, weight_decay=0.01)
    p.grad = np.array([0.5])
    opt.step()
    # bias-corrected first step moves by lr * sign(g) (up to eps), after decoupled decay
    assert abs(p.data[0] - (2.0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8))) < 1e-12


def test_frozen_parameter_never_changes():
    store = ParamStore()
    a = store.add("a", np.ones(3))
    b = store.add("b", np.ones(3))
    store.freeze(["b"])
    opt = AdamW(store, lr=0.5)
    for _ in range(3):
        (a * b * 7.0).sum().backward()
        opt.step()
        store.zero_grad()
    assert np.array_equal(b.data, np.ones(3)) and not np.array_equal(a.data, np.ones(3))
    b.grad = np.ones(3)
    with pytest.raises(GraphError):
        opt.step()


def test_non_finite_gradient_skips_step():
    store = ParamStore()
    p = store.add("p", np.ones(2))
    opt = AdamW(store)
    p.grad = np.array([np.nan, 1.0])
    assert opt.step() is False
    assert opt.skipped == 1 and opt.t == 0 and np.array_equal(p.data, np.ones(2))


def test_plateau_halving():
    store = ParamStore()
    store.add("p", np.ones(1))
    opt = AdamW(store, lr=1.0)
    sched = PlateauHalver(opt, patience=2, max_halvings=2)
    for v in (5.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0):
        sched.observe(v)
    assert opt.lr == 0.25 and sched.halvings == 2
