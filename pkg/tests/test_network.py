import numpy as np
import pytest

from fimlab import settings
from fimlab.errors import InputRejected
from fimlab.expfam import FamilyKind, FamilyModel, moments
from fimlab.fim import exact_fim
from fimlab.network import (
    Activation,
    NetworkSpec,
    ParamSet,
    activate,
    backprop_factors,
    forward,
    hessian_hL,
    init_params,
    jacobian_hL,
    jacobian_norm_report,
    loglik,
    loglik_grad,
    loglik_hessian,
    pin_output,
    resolve_subset,
)
from tests.oracles import enum_mean, fd_derivative, fd_loglik_grad, fd_loglik_hessian, make_net, outcomes

NORM1 = FamilyModel(FamilyKind.NORMAL, 1)


def _normal_unit(w: float, b: float):
    spec = NetworkSpec(layer_sizes=(1, 1), activation="identity", family=NORM1)
    return spec, ParamSet.from_arrays(spec, [[[w, b]]])


def test_forward_affine_example():
    spec, params = _normal_unit(2.0, 1.0)
    assert forward(spec, params, [3.0]).h_out.tolist() == [7.0]


def test_forward_zero_weights_gives_last_bias():
    spec = NetworkSpec(layer_sizes=(2, 3, 2), activation="tanh", family=FamilyModel(FamilyKind.BERNOULLI, 2))
    w0 = np.zeros((3, 3))
    w1 = np.zeros((2, 4))
    w1[:, -1] = [0.3, -0.2]
    params = ParamSet.from_arrays(spec, [w0, w1])
    np.testing.assert_array_equal(forward(spec, params, [1.5, -2.0]).h_out, [0.3, -0.2])


def test_forward_trace_reproduces_recurrence():
    spec, params, x = make_net([3, 4, 2], activation="softplus", seed=3)
    trace = forward(spec, params, x)
    for l, w in enumerate(params.weights):
        z = w @ trace.hbar[l]
        expected = z if l == spec.depth - 1 else activate(spec.activation, z)[0]
        np.testing.assert_array_equal(trace.h[l + 1], expected)
        np.testing.assert_array_equal(trace.hbar[l], np.append(trace.h[l], 1.0))


def test_forward_rejects_wrong_input_length():
    spec, params = _normal_unit(1.0, 0.0)
    with pytest.raises(InputRejected) as ei:
        forward(spec, params, [1.0, 2.0])
    assert ei.value.code == "dimension_mismatch"


@pytest.mark.parametrize("name", ["relu", "ReLU", "leaky_relu", "gelu"])
def test_non_c2_activation_rejected(name):
    with pytest.raises(InputRejected) as ei:
        NetworkSpec(layer_sizes=(2, 1), activation=name, family=FamilyModel(FamilyKind.BERNOULLI, 1))
    assert ei.value.code == "non_c2_activation"


def test_spec_validation():
    with pytest.raises(InputRejected):
        NetworkSpec(layer_sizes=(3,), activation="tanh", family=FamilyModel(FamilyKind.BERNOULLI, 3))
    with pytest.raises(InputRejected) as ei:
        NetworkSpec(layer_sizes=(3, 2), activation="tanh", family=FamilyModel(FamilyKind.BERNOULLI, 1))
    assert ei.value.code == "dimension_mismatch"


def test_flat_index_bijection():
    spec, params, _ = make_net([3, 4, 2, 2], seed=1)
    seen = set()
    for i in range(spec.n_params):
        l, r, c = spec.unflat_index(i)
        assert spec.flat_index(l, r, c) == i
        seen.add((l, r, c))
    assert len(seen) == spec.n_params == 16 + 10 + 6
    theta = params.flat()
    back = ParamSet.from_flat(spec, theta)
    for a, b in zip(back.weights, params.weights):
        np.testing.assert_array_equal(a, b)
    # layer blocks are contiguous, bias last in every row
    assert spec.layer_indices(1).tolist() == list(range(16, 26))
    assert theta[spec.flat_index(0, 1, 3)] == params.weights[0][1, 3]


def test_init_params_deterministic_and_bounded():
    spec, _, _ = make_net([4, 6, 2], seed=0)
    a = init_params(spec, 42)
    b = init_params(spec, 42)
    c = init_params(spec, 43)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)
    assert not np.array_equal(a.flat(), c.flat())
    assert np.max(np.abs(a.weights[0])) <= np.sqrt(6.0 / 10.0)
    assert np.max(np.abs(a.weights[1])) <= np.sqrt(6.0 / 8.0)


def test_backprop_single_layer():
    spec, params, x = make_net([3, 2], seed=2)
    bp = backprop_factors(spec, params, forward(spec, params, x))
    np.testing.assert_array_equal(bp.B[1], np.eye(2))
    np.testing.assert_array_equal(bp.D[0], np.ones(2))
    assert bp.B[0].shape == (2, 3)


def test_backprop_identity_two_layers():
    spec, params, x = make_net([3, 4, 2], activation="identity", seed=4)
    bp = backprop_factors(spec, params, forward(spec, params, x))
    np.testing.assert_allclose(bp.B[1], params.weights[1][:, :-1], rtol=1e-15)


def _tail(spec, params, l):
    def run(h):
        for i in range(l, spec.depth):
            z = params.weights[i] @ np.append(h, 1.0)
            h = z if i == spec.depth - 1 else activate(spec.activation, z)[0]
        return h

    return run


def test_backprop_factor_is_layer_jacobian():
    spec, params, x = make_net([3, 4, 3, 2], activation="sigmoid", seed=5)
    trace = forward(spec, params, x)
    bp = backprop_factors(spec, params, trace)
    for l in range(spec.depth + 1):
        fd = fd_derivative(_tail(spec, params, l), trace.h[l])
        np.testing.assert_allclose(bp.B[l], fd, rtol=1e-6, atol=1e-9)


def test_jacobian_single_layer_normal():
    spec, params = _normal_unit(0.7, -0.4)
    np.testing.assert_allclose(jacobian_hL(spec, params, [2.5]), [[2.5, 1.0]])


def test_jacobian_zero_input_kills_first_layer_weights():
    spec, params, _ = make_net([3, 2, 1], activation="identity", seed=6)
    jac = jacobian_hL(spec, params, np.zeros(3))
    block = jac[:, spec.layer_indices(0)].reshape(1, 2, 4)
    assert np.all(block[:, :, :3] == 0.0)
    assert np.any(block[:, :, 3] != 0.0)


NETS = [
    ([2, 3], "tanh"),
    ([3, 4, 2], "tanh"),
    ([2, 5, 3, 2], "sigmoid"),
    ([3, 8, 4], "softplus"),
    ([2, 3, 3, 3, 2], "tanh"),
    ([4, 3, 2, 3, 1], "identity"),
    ([2, 8, 8, 2], "sigmoid"),
]


@pytest.mark.parametrize("layers,act", NETS)
def test_jacobian_matches_finite_differences(layers, act):
    spec, params, x = make_net(layers, activation=act, seed=len(layers) * 10 + layers[1])
    jac = jacobian_hL(spec, params, x)
    fd = fd_derivative(lambda th: forward(spec, ParamSet.from_flat(spec, th), x).h_out, params.flat())
    np.testing.assert_allclose(jac, fd, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("layers,act", NETS)
def test_hessian_matches_finite_differences(layers, act):
    spec, params, x = make_net(layers, activation=act, seed=len(layers) * 10 + layers[1])
    hess = hessian_hL(spec, params, x)
    fd = fd_derivative(lambda th: jacobian_hL(spec, ParamSet.from_flat(spec, th), x), params.flat())
    np.testing.assert_allclose(hess, fd, rtol=1e-5, atol=1e-8)
    assert np.array_equal(hess, hess.transpose(0, 2, 1))


def test_hessian_subset_is_restriction_of_full():
    spec, params, x = make_net([3, 4, 2], activation="tanh", seed=8)
    full = hessian_hL(spec, params, x)
    sub = np.array([1, 5, 17, 20, 25])
    np.testing.assert_allclose(hessian_hL(spec, params, x, sub), full[:, sub][:, :, sub], rtol=1e-13, atol=1e-15)
    np.testing.assert_array_equal(jacobian_hL(spec, params, x, sub), jacobian_hL(spec, params, x)[:, sub])


def test_hessian_zero_for_affine_net():
    spec, params, x = make_net([4, 3], activation="tanh", seed=9)
    assert np.all(hessian_hL(spec, params, x) == 0.0)


def test_hessian_two_layer_identity_blocks():
    spec, params, x = make_net([2, 3, 2], activation="identity", seed=10)
    hess = hessian_hL(spec, params, x)
    l0, l1 = spec.layer_indices(0), spec.layer_indices(1)
    assert np.all(hess[:, l0][:, :, l0] == 0.0)
    assert np.all(hess[:, l1][:, :, l1] == 0.0)
    hbar0 = np.append(x, 1.0)
    for a in range(2):
        for j in range(3):
            for k in range(3):
                p, q = spec.flat_index(1, a, j), spec.flat_index(0, j, k)
                assert hess[a, p, q] == hbar0[k]
                assert hess[1 - a, p, q] == 0.0


def test_loglik_grad_examples():
    spec, params = _normal_unit(0.8, 0.1)
    x0, y = 1.5, 2.0
    g = loglik_grad(spec, params, [x0], [y])
    np.testing.assert_allclose(g, (y - (0.8 * x0 + 0.1)) * np.array([x0, 1.0]), rtol=1e-15)
    spec, params, x = make_net([3, 4, 2], seed=11)
    eta = moments(spec.family, forward(spec, params, x).h_out).eta
    assert np.all(loglik_grad(spec, params, x, eta) == 0.0)


def test_score_has_zero_mean():
    spec, params, x = make_net([3, 3, 2], activation="tanh", seed=12)
    mean = enum_mean(outcomes(spec, params, x), lambda t: loglik_grad(spec, params, x, t))
    np.testing.assert_allclose(mean, 0.0, atol=1e-12)


def test_loglik_hessian_affine_net():
    spec, params, x = make_net([3, 2], seed=13)
    jac = jacobian_hL(spec, params, x)
    fim_head = moments(spec.family, forward(spec, params, x).h_out).fim_head
    for t in ([0.0, 1.0], [1.0, 1.0]):
        np.testing.assert_allclose(loglik_hessian(spec, params, x, t), -jac.T @ fim_head @ jac, atol=1e-14)


def test_loglik_hessian_at_mean_is_minus_fim():
    spec, params, x = make_net([3, 4, 2], seed=14)
    eta = moments(spec.family, forward(spec, params, x).h_out).eta
    np.testing.assert_allclose(loglik_hessian(spec, params, x, eta), -exact_fim(spec, params, x).values, atol=1e-14)


def test_loglik_hessian_matches_finite_differences():
    spec, params, x = make_net([3, 4, 2], activation="tanh", seed=15)
    t = np.array([1.0, 0.0])
    fd = fd_derivative(lambda th: loglik_grad(spec, ParamSet.from_flat(spec, th), x, t), params.flat())
    np.testing.assert_allclose(loglik_hessian(spec, params, x, t), fd, rtol=1e-5, atol=1e-8)


def test_loglik_value_normal_head():
    spec, params = _normal_unit(0.8, 0.1)
    assert loglik(spec, params, [1.5], [2.0]) == pytest.approx(2.0 * 1.3 - 0.5 * 1.3**2, rel=1e-14)
    with pytest.raises(InputRejected) as ei:
        loglik(spec, params, [1.5], [2.0, 1.0])
    assert ei.value.code == "dimension_mismatch"


@pytest.mark.parametrize("activation,family", [("tanh", "bernoulli"), ("softplus", "poisson"), ("sigmoid", "categorical")])
def test_loglik_derivatives_match_differences_of_loglik(activation, family):
    spec, params, x = make_net([2, 3, 2], activation=activation, family=family, seed=21)
    t = np.array([1.0, 0.0]) if family != "poisson" else np.array([2.0, 0.0])
    np.testing.assert_allclose(loglik_grad(spec, params, x, t), fd_loglik_grad(spec, params, x, t), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(loglik_hessian(spec, params, x, t), fd_loglik_hessian(spec, params, x, t), rtol=1e-5, atol=1e-7)


def test_jacobian_norm_report_last_layer_is_tight():
    spec, params, x = make_net([3, 4, 3], activation="tanh", seed=16)
    rep = jacobian_norm_report(spec, params, x, spec.depth - 1)
    hbar = np.linalg.norm(forward(spec, params, x).hbar[-1])
    assert rep.lhs_frobenius == pytest.approx(np.sqrt(3) * hbar, rel=1e-14)
    assert rep.lhs_frobenius == pytest.approx(rep.rhs_frobenius, rel=1e-14)
    assert rep.lhs_spectral == pytest.approx(rep.rhs_spectral, rel=1e-14)


def test_jacobian_norm_report_identity_spectral_tight():
    spec, params, x = make_net([3, 4, 2], activation="identity", seed=17)
    rep = jacobian_norm_report(spec, params, x, 0)
    hbar = np.linalg.norm(np.append(x, 1.0))
    assert rep.lhs_spectral == pytest.approx(np.linalg.norm(params.weights[1][:, :-1], 2) * hbar, rel=1e-12)
    assert rep.lhs_spectral == pytest.approx(rep.rhs_spectral, rel=1e-12)


def test_jacobian_norm_bounds_hold_on_random_sigmoid_nets():
    rng = np.random.default_rng(99)
    for k in range(1000):
        layers = [int(v) for v in rng.integers(1, 5, size=int(rng.integers(2, 5)))]
        spec, params, x = make_net(layers, activation="sigmoid", seed=k)
        for l in range(spec.depth):
            assert jacobian_norm_report(spec, params, x, l).holds()


@pytest.mark.parametrize("activation", [a.value for a in Activation])
def test_jacobian_norm_bounds_hold_for_every_activation(activation):
    rng = np.random.default_rng(5)
    for k in range(200):
        layers = [int(v) for v in rng.integers(1, 5, size=int(rng.integers(2, 5)))]
        spec, params, x = make_net(layers, activation=activation, seed=k)
        for l in range(spec.depth):
            assert jacobian_norm_report(spec, params, x, l).holds()


def test_pin_output_hits_mean():
    spec, params, x = make_net([3, 4, 2], seed=18)
    pinned = pin_output(spec, params, x, [0.3, 0.8])
    np.testing.assert_allclose(moments(spec.family, forward(spec, pinned, x).h_out).eta, [0.3, 0.8], rtol=1e-12)
    np.testing.assert_array_equal(pinned.weights[0], params.weights[0])


def test_subset_validation(monkeypatch):
    spec, params, x = make_net([3, 2], seed=19)
    with pytest.raises(InputRejected) as ei:
        resolve_subset(spec, [0, 99])
    assert ei.value.code == "subset_out_of_range"
    with pytest.raises(InputRejected):
        resolve_subset(spec, [1, 1])
    monkeypatch.setattr(settings, "FIMLAB_MAX_PARAMS", 3)
    with pytest.raises(InputRejected) as ei:
        hessian_hL(spec, params, x)
    assert ei.value.code == "cap_exceeded"
    assert hessian_hL(spec, params, x, [0, 1, 2]).shape == (2, 3, 3)
