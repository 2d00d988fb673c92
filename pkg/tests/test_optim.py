import numpy as np
import pytest

from dge.errors import DimensionError, NumericError
from dge.optim import AdamW, OptimizerState, optimizer_step
from dge.tensor import Tensor


def test_zero_gradient_without_decay_leaves_params(f64):
    w = Tensor([1.0, -2.0], requires_grad=True)
    state = OptimizerState(weight_decay=0.0)
    optimizer_step(state, {"w": w}, {"w": np.zeros(2)})
    assert np.array_equal(w.data, [1.0, -2.0])
    assert state.step == 1


def test_one_step_descends(f64):
    w = Tensor([1.0], requires_grad=True)
    opt = AdamW([("w", w)], lr=0.1, weight_decay=0.0)
    (w * w * 0.5).sum().backward()
    opt.step()
    assert abs(w.data[0]) < 1.0


def test_converges_on_quadratic(f64):
    a = np.array([[1.0, 0.2], [0.2, 0.5]])
    w = Tensor([1.0, -1.0], requires_grad=True)
    opt = AdamW([("w", w)], lr=0.05, weight_decay=0.0)
    for _ in range(200):
        opt.zero_grad()
        loss = ((w.reshape(1, 2) @ Tensor(a) @ w.reshape(2, 1)) * 0.5).sum()
        loss.backward()
        opt.step()
    assert np.linalg.norm(a @ w.data) < 1e-3


def test_decay_is_decoupled_and_skips_exempt(f64):
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = AdamW([("w", w), ("b", b)], lr=0.1, weight_decay=0.5, no_decay=["b"])
    w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
    opt.step()
    assert np.allclose(w.data, 0.95)
    assert np.array_equal(b.data, np.ones(2))


def test_moment_shapes_and_step_count(f64):
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    opt = AdamW([("w", w)])
    for step in range(1, 4):
        w.grad = np.full((3, 2), 0.1)
        opt.step()
        assert opt.state.step == step
    assert opt.state.first_moment["w"].shape == (3, 2)
    assert opt.state.second_moment["w"].shape == (3, 2)


def test_non_finite_gradient_names_parameter(f64):
    w = Tensor([1.0], requires_grad=True)
    with pytest.raises(NumericError, match="'blocks.0.weight'"):
        optimizer_step(OptimizerState(), {"blocks.0.weight": w}, {"blocks.0.weight": np.array([np.nan])})
    assert w.data[0] == 1.0


def test_gradient_shape_mismatch(f64):
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(DimensionError):
        optimizer_step(OptimizerState(), {"w": w}, {"w": np.zeros(3)})


def test_huge_f32_gradient_still_moves_parameter():
    w = Tensor([1.0, -1.0], requires_grad=True)
    assert w.data.dtype == np.float32
    opt = AdamW([("w", w)], lr=0.1, weight_decay=0.0)
    w.grad = np.array([1e20, -1e20], dtype=np.float32)
    opt.step()
    assert np.isfinite(opt.state.second_moment["w"]).all()
    assert np.allclose(w.data, [0.9, -0.9])
    assert w.data.dtype == np.float32


def test_overflowing_squared_gradient_is_rejected(f64):
    w = Tensor([1.0], requires_grad=True)
    state = OptimizerState()
    with pytest.raises(NumericError, match="'w'"):
        optimizer_step(state, {"w": w}, {"w": np.array([1e200])})
    assert w.data[0] == 1.0 and state.step == 0
