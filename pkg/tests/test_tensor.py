import numpy as np
import pytest

from hgvae.errors import NonFiniteError, ShapeError
from hgvae.gradcheck import check_gradients
from hgvae.tensor import (
    GradientTape,
    Tensor,
    add,
    backward,
    clip,
    concat,
    default_dtype,
    div,
    exp,
    gelu,
    log,
    matmul,
    mean,
    mul,
    neg,
    precision,
    reshape,
    sqrt,
    square,
    sub,
    sum_,
    take,
    transpose,
    where,
)


def normal(*shape):
    return lambda rng: rng.standard_normal(shape)


def positive(*shape):
    return lambda rng: rng.uniform(0.5, 2.0, size=shape)


def off_kinks(*shape, kinks=(-0.5, 0.5)):
    def make(rng):
        values = rng.uniform(-1.5, 1.5, size=shape)
        for kink in kinks:
            values = np.where(np.abs(values - kink) < 0.05, values + 0.1, values)
        return values

    return make


MASK = np.array([[True, False, True, False]] * 3)

PRIMITIVES = {
    "add": (lambda a, b: add(a, b), [normal(3, 4), normal(3, 4)]),
    "add-bias": (lambda a, b: a + b, [normal(3, 4), normal(4)]),
    "sub": (lambda a, b: sub(a, b), [normal(3, 4), normal(3, 1)]),
    "mul": (lambda a, b: mul(a, b), [normal(3, 4), normal(3, 4)]),
    "div": (lambda a, b: div(a, b), [normal(3, 4), positive(3, 4)]),
    "neg": (lambda a: neg(a), [normal(3, 4)]),
    "matmul": (lambda a, b: matmul(a, b), [normal(3, 4), normal(4, 2)]),
    "batched-matmul": (lambda a, b: matmul(a, b), [normal(2, 3, 4), normal(4, 5)]),
    "exp": (lambda a: exp(a), [normal(3, 4)]),
    "log": (lambda a: log(a), [positive(3, 4)]),
    "square": (lambda a: square(a), [normal(3, 4)]),
    "sqrt": (lambda a: sqrt(a), [positive(3, 4)]),
    "gelu": (lambda a: gelu(a), [normal(3, 4)]),
    "clip": (lambda a: clip(a, -0.5, 0.5), [off_kinks(3, 4)]),
    "sum": (lambda a: sum_(a, axis=0), [normal(3, 4)]),
    "sum-keepdims": (lambda a: sum_(a, axis=1, keepdims=True), [normal(3, 4)]),
    "mean": (lambda a: mean(a, axis=1), [normal(3, 4)]),
    "concat": (lambda a, b: concat([a, b], axis=0), [normal(3, 4), normal(2, 4)]),
    "slice": (lambda a: take(a, (slice(1, None), slice(None, None, 2))), [normal(3, 4)]),
    "gather": (lambda a: take(a, np.array([0, 2, 0])), [normal(3, 4)]),
    "transpose": (lambda a: transpose(a), [normal(3, 4)]),
    "reshape": (lambda a: reshape(a, (4, 3)), [normal(3, 4)]),
    "where": (lambda a, b: where(MASK, a, b), [normal(3, 4), normal(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, makers = PRIMITIVES[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        inputs = [make(rng) for make in makers]
        result = check_gradients(fn, *inputs, seed=seed)
        assert result.ok(1e-4), f"{name} seed {seed}: {result.errors}"


def test_matmul_identity():
    a = np.arange(12.0).reshape(3, 4)
    out = matmul(Tensor(np.eye(3)), Tensor(a))
    assert np.array_equal(out.numpy(), a)


def test_gelu_fixes_zero():
    assert gelu(Tensor(0.0)).item() == 0.0


def test_exp_log_inverse_pair():
    x = Tensor([1.0, 2.0, 3.0])
    assert abs(sum_(exp(log(x))).item() - 6.0) < 1e-12


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    with GradientTape() as tape:
        y = x * x
    assert float(backward(y, tape)[x]) == pytest.approx(6.0)


def test_matmul_weight_gradient():
    rng = np.random.default_rng(1)
    X = Tensor(rng.standard_normal((5, 3)))
    W = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    with GradientTape() as tape:
        loss = matmul(X, W).sum()
    expected = X.numpy().T @ np.ones((5, 2))
    assert np.allclose(backward(loss, tape)[W], expected, atol=1e-12)


def test_gradients_accumulate_across_uses():
    x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)
    with GradientTape() as tape:
        loss = (x * x + exp(x)).sum()
    grad = backward(loss, tape)[x]

    a = Tensor(x.numpy(), requires_grad=True)
    b = Tensor(x.numpy(), requires_grad=True)
    c = Tensor(x.numpy(), requires_grad=True)
    with GradientTape() as tape:
        split = (a * b + exp(c)).sum()
    grads = backward(split, tape)
    assert np.allclose(grad, grads[a] + grads[b] + grads[c], atol=1e-12)


def test_unreachable_tensor_has_zero_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    unused = Tensor(np.ones((3,)), requires_grad=True)
    with GradientTape() as tape:
        loss = square(x).sum()
    grads = backward(loss, tape)
    assert unused not in grads
    assert np.array_equal(grads[unused], np.zeros(3))


def test_constants_get_no_gradient():
    x = Tensor(2.0, requires_grad=True)
    c = Tensor(5.0)
    with GradientTape() as tape:
        loss = x * c
    grads = backward(loss, tape)
    assert c not in grads
    assert float(grads[x]) == pytest.approx(5.0)


def test_backward_needs_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradientTape() as tape, pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0, tape)


def test_backward_needs_a_tape():
    x = Tensor(1.0, requires_grad=True)
    with pytest.raises(RuntimeError, match="GradientTape"):
        backward(x * 2.0)


def test_operations_outside_a_tape_are_not_recorded():
    x = Tensor(1.0, requires_grad=True)
    y = x * 2.0
    with GradientTape() as tape:
        z = x * 3.0
    assert len(tape) == 1
    assert y.requires_grad and z.requires_grad


@pytest.mark.parametrize(
    "op, a, b",
    [
        ("add", (2, 3), (4,)),
        ("mul", (2, 3), (3, 2)),
        ("matmul", (2, 3), (2, 3)),
    ],
)
def test_shape_errors_name_primitive_and_shapes(op, a, b):
    fn = {"add": add, "mul": mul, "matmul": matmul}[op]
    with pytest.raises(ShapeError, match=rf"{op}: incompatible shapes \(2, 3\)"):
        fn(Tensor(np.zeros(a)), Tensor(np.zeros(b)))


def test_concat_shape_error():
    with pytest.raises(ShapeError, match="concat"):
        concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2)))], axis=0)


def test_reshape_shape_error():
    with pytest.raises(ShapeError, match="reshape"):
        Tensor(np.zeros((2, 3))).reshape(4, 2)


def test_tensors_are_immutable():
    t = Tensor(np.zeros(3))
    with pytest.raises(TypeError, match="immutable"):
        t[0] = 1.0
    with pytest.raises(ValueError):
        t.numpy()[0] = 1.0


def test_non_finite_result_names_primitive():
    with pytest.raises(NonFiniteError, match="primitive 'log'"):
        log(Tensor([-1.0, 1.0]))


def test_division_by_zero_is_non_finite():
    with pytest.raises(NonFiniteError, match="div"):
        div(Tensor([1.0]), Tensor([0.0]))


def test_precision_context():
    assert default_dtype() == np.float64
    with precision("float32"):
        assert Tensor(1.0).dtype == np.float32
    assert Tensor(1.0).dtype == np.float64


def test_item_needs_single_element():
    with pytest.raises(ValueError, match="single element"):
        Tensor(np.zeros(2)).item()


def test_operators_match_functions():
    rng = np.random.default_rng(3)
    a = Tensor(rng.standard_normal((2, 2)))
    b = Tensor(rng.uniform(1.0, 2.0, size=(2, 2)))
    assert np.array_equal((a + b).numpy(), add(a, b).numpy())
    assert np.array_equal((1.0 - a).numpy(), 1.0 - a.numpy())
    assert np.array_equal((a / b).numpy(), div(a, b).numpy())
    assert np.array_equal((-a).numpy(), -a.numpy())
    assert np.array_equal((a @ b).numpy(), a.numpy() @ b.numpy())
    assert np.array_equal(a.mT.numpy(), a.numpy().T)
    assert np.array_equal(a[0].numpy(), a.numpy()[0])


def test_determinism():
    def run():
        rng = np.random.default_rng(7)
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        x = Tensor(rng.standard_normal((5, 4)))
        with GradientTape() as tape:
            loss = gelu(matmul(x, w)).mean()
        return loss.item(), backward(loss, tape)[w]

    first, second = run(), run()
    assert first[0] == second[0]
    assert np.array_equal(first[1], second[1])
