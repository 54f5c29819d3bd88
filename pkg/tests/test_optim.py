import numpy as np
import pytest

from hgvae.errors import NonFiniteError
from hgvae.optim import AdamState, adam_step, clip_global_norm, global_norm
from hgvae.tensor import Tensor


def params(**arrays):
    return {name: Tensor(value, requires_grad=True, name=name) for name, value in arrays.items()}


def test_zero_gradient_leaves_parameters_unchanged():
    p = params(w=np.array([1.0, -2.0, 3.0]))
    out = adam_step(p, {"w": np.zeros(3)}, AdamState(), lr=0.1)
    assert np.array_equal(out["w"].numpy(), p["w"].numpy())


def test_constant_gradient_moves_against_its_sign():
    p = params(w=np.array([0.0, 0.0]))
    state = AdamState()
    for _ in range(50):
        p = adam_step(p, {"w": np.array([0.3, -2.0])}, state, lr=0.01)
    w = p["w"].numpy()
    assert w[0] < 0 < w[1]


def test_single_step_on_square():
    p = params(x=np.array(1.0))
    out = adam_step(p, {"x": np.array(2.0)}, AdamState(), lr=0.1)
    # the first bias-corrected step has magnitude lr
    assert float(out["x"].numpy()) == pytest.approx(0.9, abs=1e-7)


def test_state_tracks_steps_and_moment_shapes():
    p = params(w=np.ones((2, 3)), b=np.ones(3))
    grads = {"w": np.full((2, 3), 0.5), "b": np.full(3, -0.5)}
    state = AdamState()
    for expected in (1, 2, 3):
        p = adam_step(p, grads, state, lr=1e-3)
        assert state.step == expected
    assert state.first_moment["w"].shape == (2, 3)
    assert state.second_moment["b"].shape == (3,)


def test_parameters_without_gradient_are_kept():
    p = params(w=np.ones(2), frozen=np.ones(2))
    out = adam_step(p, {"w": np.ones(2)}, AdamState(), lr=0.1)
    assert out["frozen"] is p["frozen"]
    assert out["w"].requires_grad
    assert out["w"].name == "w"


def test_nan_gradient_names_the_parameter():
    p = params(layer_w=np.ones(2))
    with pytest.raises(NonFiniteError, match="'layer_w'"):
        adam_step(p, {"layer_w": np.array([np.nan, 0.0])}, AdamState(), lr=0.1)


@pytest.mark.parametrize("lr", [0.0, -1.0])
def test_learning_rate_must_be_positive(lr):
    with pytest.raises(ValueError, match="learning rate"):
        adam_step(params(w=np.ones(1)), {"w": np.ones(1)}, AdamState(), lr=lr)


def test_gradient_shape_must_match():
    with pytest.raises(ValueError, match="shape"):
        adam_step(params(w=np.ones(2)), {"w": np.ones(3)}, AdamState(), lr=0.1)


def test_clip_below_threshold_is_identity():
    grads = {"a": np.array([30.0, 40.0])}
    clipped, norm = clip_global_norm(grads, 100.0)
    assert norm == pytest.approx(50.0)
    assert np.array_equal(clipped["a"], grads["a"])


def test_clip_above_threshold_scales_every_entry():
    grads = {"a": np.array([120.0, 0.0]), "b": np.array([[0.0, 160.0]])}
    clipped, norm = clip_global_norm(grads, 100.0)
    assert norm == pytest.approx(200.0)
    assert np.allclose(clipped["a"], [60.0, 0.0])
    assert np.allclose(clipped["b"], [[0.0, 80.0]])


@pytest.mark.parametrize("seed", range(10))
def test_clipped_norm_is_min_of_norm_and_threshold(seed):
    rng = np.random.default_rng(seed)
    grads = {f"p{i}": rng.standard_normal((4, 5)) * rng.uniform(1, 40) for i in range(3)}
    clipped, norm = clip_global_norm(grads, 100.0)
    assert abs(global_norm(clipped) - min(norm, 100.0)) < 1e-10


def test_clip_rejects_non_finite_and_bad_threshold():
    with pytest.raises(NonFiniteError, match="'g'"):
        clip_global_norm({"g": np.array([np.inf])}, 1.0)
    with pytest.raises(ValueError, match="max_norm"):
        clip_global_norm({"g": np.ones(1)}, 0.0)


def test_adam_state_validates_hyperparameters():
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)


@pytest.mark.parametrize("max_norm", [1.0, 100.0, 0.3])
def test_clipped_norm_never_exceeds_threshold(max_norm):
    rng = np.random.default_rng(int(max_norm * 10))
    for _ in range(500):
        grads = {f"p{i}": rng.standard_normal(rng.integers(1, 30)) * rng.uniform(0.1, 1e4) for i in range(4)}
        clipped, norm = clip_global_norm(grads, max_norm)
        assert global_norm(clipped) <= max_norm
        if norm > max_norm:
            assert global_norm(clipped) > max_norm * (1 - 1e-12)
