"""
Reference computations the closed forms are checked against: exhaustive
enumeration over finite-support heads and finite differences.
"""

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from fimlab.expfam import FamilyModel, enumerate_outcomes
from fimlab.fim import Linearization, SampleBatch
from fimlab.network import NetworkSpec, ParamSet, forward, init_params, loglik, pin_output

_STENCIL = ((-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0))


def make_net(
    layers: Sequence[int],
    activation: str = "tanh",
    family: str = "bernoulli",
    seed: int = 0,
    p: Optional[Sequence[float]] = None,
) -> Tuple[NetworkSpec, ParamSet, np.ndarray]:
    fam = FamilyModel.from_config(family, None if family == "gaussian2" else layers[-1])
    spec = NetworkSpec(layer_sizes=tuple(layers), activation=activation, family=fam)
    params = init_params(spec, seed)
    x = np.random.default_rng(seed + 1000).normal(size=layers[0])
    if p is not None:
        params = pin_output(spec, params, x, p)
    return spec, params, x


def zero_head_net(layers: Sequence[int], activation: str = "tanh", family: str = "bernoulli", seed: int = 0):
    """Random hidden layers, all-zero last layer: h_L is exactly 0."""
    spec, params, x = make_net(layers, activation, family, seed)
    ws = list(params.weights)
    ws[-1] = np.zeros_like(ws[-1])
    return spec, ParamSet(weights=tuple(ws)), x


def outcomes(spec: NetworkSpec, params: ParamSet, x) -> List[Tuple[float, np.ndarray]]:
    return enumerate_outcomes(spec.family, forward(spec, params, x).h_out)


def enum_mean(pairs, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    return sum(p * np.asarray(fn(t)) for p, t in pairs)


def enum_cov(pairs, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Exact covariance tensor E[(X - EX) (x) (X - EX)] of a random matrix X = fn(t)."""
    mean = enum_mean(pairs, fn)
    out = 0.0
    for p, t in pairs:
        d = np.asarray(fn(t)) - mean
        out = out + p * np.einsum("ij,kl->ijkl", d, d)
    return out


def single(t: np.ndarray) -> SampleBatch:
    return SampleBatch(t_samples=np.asarray(t, dtype=float).reshape(1, -1))


def fd_derivative(f: Callable[[np.ndarray], np.ndarray], theta, step: float = 1e-3) -> np.ndarray:
    """4th-order central differences of f; the derivative index is the last axis."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for i in range(theta.size):
        acc = 0.0
        for k, w in _STENCIL:
            th = theta.copy()
            th[i] += k * step
            acc = acc + w * np.asarray(f(th), dtype=float)
        cols.append(acc / step)
    return np.stack(cols, axis=-1)


def fd_loglik_grad(spec: NetworkSpec, params: ParamSet, x, t, step: float = 1e-3) -> np.ndarray:
    return fd_derivative(lambda th: loglik(spec, ParamSet.from_flat(spec, th), x, t), params.flat(), step)


def fd_loglik_hessian(spec: NetworkSpec, params: ParamSet, x, t, step: float = 1e-3) -> np.ndarray:
    """Nested differences of the scalar log-likelihood; no analytic gradient involved."""
    return fd_derivative(lambda th: fd_loglik_grad(spec, ParamSet.from_flat(spec, th), x, t, step), params.flat(), step)


def random_bernoulli_configs(count: int, max_depth: int = 3, max_width: int = 3, seed: int = 7):
    """Small random nets with bernoulli heads for enumeration sweeps."""
    rng = np.random.default_rng(seed)
    acts = ["identity", "tanh", "sigmoid", "softplus"]
    out = []
    for k in range(count):
        depth = int(rng.integers(1, max_depth + 1))
        layers = [int(rng.integers(1, max_width + 1)) for _ in range(depth + 1)]
        out.append((layers, acts[k % len(acts)], 100 + k))
    return out


def linearize(spec, params, x, subset=None) -> Linearization:
    return Linearization.build(spec, params, x, subset)
