import numpy as np
import pytest

from affuse import autodiff as A
from affuse import tensor as K
from affuse.autodiff import Parameter, StateError, Tape, Var
from affuse.fusion import Fusion
from affuse.networks import NetworkSpec, build_network


def test_single_relu_node_matches_kernel(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    np.testing.assert_array_equal(A.relu(Var(x)).value, K.relu(x))


def test_diamond_records_one_node_with_repeated_parent():
    x = Var(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
    with Tape() as tape:
        z = A.mul(x, x)
    assert len(tape.nodes) == 1 and tape.nodes[0] is z
    assert z.parents == (x, x)
    assert tape.backward(z)[x].item() == 6.0


def test_identity_chain_gradient_is_one(rng):
    x = Var(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    with Tape() as tape:
        z = A.scale(x, 1.0)
    np.testing.assert_array_equal(tape.backward(z)[x], 1.0)


def test_fan_out_gradients_sum(rng):
    xv = rng.standard_normal((1, 2, 3, 3))
    x = Var(xv, requires_grad=True)
    with Tape() as tape:
        z = A.add(A.mul(x, x), A.sigmoid(x))
    s = K.sigmoid(xv)
    np.testing.assert_allclose(tape.backward(z)[x], 2 * xv + s * (1 - s), rtol=1e-14)


def test_backward_before_forward_is_state_error():
    x = Var(np.ones((1, 1, 1, 1)), requires_grad=True)
    with Tape() as tape:
        pass
    with pytest.raises(StateError):
        tape.backward(A.relu(x))


def test_tape_cannot_be_consumed_twice():
    x = Var(np.ones((1, 1, 1, 1)), requires_grad=True)
    with Tape() as tape:
        z = A.relu(x)
    tape.backward(z)
    with pytest.raises(StateError):
        tape.backward(z)


def test_seed_shape_checked():
    x = Var(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        z = A.relu(x)
    with pytest.raises(K.DimensionError):
        tape.backward(z, np.ones((1, 1, 1, 1)))


def test_parameters_accumulate_grad(rng):
    w = Parameter(rng.standard_normal((2, 2, 1, 1)))
    x = rng.standard_normal((1, 2, 3, 3))
    for _ in range(2):
        with Tape() as tape:
            out = A.conv2d(Var(x), w)
        tape.backward(out)
    once = np.einsum("ncij->c", x)[None, :, None, None].repeat(2, axis=0)
    np.testing.assert_allclose(w.grad, 2 * once, rtol=1e-12)


def test_grad_check_linear_is_exact(rng):
    # on a scalar linear map the central difference is exact up to rounding of x +- h
    for seed in range(10):
        w = Parameter(rng.standard_normal((1, 1)))
        err = A.grad_check(lambda x: A.fully_connected(x, w), [rng.standard_normal((1, 1, 1, 1))], [w], seed=seed)
        assert err < 1e-10


def test_grad_check_linear_within_rounding_floor(rng):
    # with many outputs the floor is the rounding of the summed objective: ~eps * sum|out * R| / h
    w = Parameter(rng.standard_normal((3, 2, 3, 3)))
    x = rng.standard_normal((1, 2, 4, 4))
    err = A.grad_check(lambda v: A.conv2d(v, w, None, 1, 1), [x], [w])
    assert err < 1e-7
def test_sigmoid_derivative_at_zero():
    x = Var(np.zeros((1, 1, 1, 1)), requires_grad=True)
    with Tape() as tape:
        z = A.sigmoid(x)
    assert tape.backward(z)[x].item() == 0.25
    assert A.grad_check(A.sigmoid, [np.zeros((1, 1, 1, 1))]) < 1e-10


PRIMITIVES = {
    "conv2d": lambda x, w: A.conv2d(x, w, None, 1, 1),
    "relu": lambda x, w: A.relu(x),
    "sigmoid": lambda x, w: A.sigmoid(x),
    "gap": lambda x, w: A.global_avg_pool(x),
    "mul": lambda x, w: A.mul(x, x),
    "upsample": lambda x, w: A.upsample2x(x),
    "bn_train": lambda x, w: A.batch_norm(x, Var(np.array([1.3, 0.7])), Var(np.array([0.1, -0.2])),
                                          np.zeros(2), np.ones(2), 1e-5, 0.9, True),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_finite_difference(rng, name):
    w = Parameter(rng.standard_normal((2, 2, 3, 3)))
    err = A.grad_check(lambda x: PRIMITIVES[name](x, w), [rng.standard_normal((1, 2, 3, 3))],
                       [w] if name == "conv2d" else [])
    assert err < 1e-4


def test_aff_block_end_to_end(rng):
    f = Fusion("aff", 8, 2, rng=rng)
    err = A.grad_check(lambda x, y: f(x, y), [rng.standard_normal((4, 8, 3, 3)) for _ in range(2)],
                       f.parameters())
    assert err < 1e-4


def test_grad_check_needs_double_precision():
    K.set_precision("f32")
    with pytest.raises(StateError):
        A.grad_check(A.relu, [np.ones((1, 1, 1, 1))])


def test_lr_zero_training_step_is_bit_identical(rng):
    from affuse.optim import Optimizer
    net = build_network(NetworkSpec(fusion="aff", base_channels=4, multipliers=(1, 2), r=2, num_classes=3), rng)
    before = {n: p.value.copy() for n, p in net.named_parameters()}
    opt = Optimizer(net.parameters(), lr=0.0, momentum=0.9, weight_decay=1e-4)
    with Tape() as tape:
        loss = A.softmax_cross_entropy(net(Var(rng.standard_normal((4, 3, 8, 8)))), np.array([0, 1, 2, 0]))
    tape.backward(loss)
    assert any(np.any(p.grad != 0) for p in net.parameters())
    opt.step()
    for n, p in net.named_parameters():
        np.testing.assert_array_equal(p.value, before[n], err_msg=n)
