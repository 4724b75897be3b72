"""
Feed-forward network with an exponential-family head.

    h_0 = x
    h_{l+1} = sigma(W_l hbar_l)      l < L-1
    h_L     = W_{L-1} hbar_{L-1}     (linear last layer, h_L is the natural parameter)

with hbar_l = (h_l, 1). W_l has shape n_{l+1} x (n_l + 1), bias in the last column.

Flat parameter order: layer-major, then row-major within W_l (bias column last in
every row), so the block of layer l is contiguous.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from fimlab import settings
from fimlab.errors import InputRejected
from fimlab.expfam import FamilyModel, log_density_stat, moments, natural_from_mean
from fimlab.rng import init_stream

log = logging.getLogger(__name__)


class Activation(str, Enum):
    # every member has |sigma'| <= 1, which the Jacobian norm bounds rely on
    IDENTITY = "identity"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"


def parse_activation(name) -> Activation:
    if isinstance(name, Activation):
        return name
    key = str(name).strip().lower()
    try:
        return Activation(key)
    except ValueError:
        raise InputRejected(
            "non_c2_activation",
            f"activation {name!r} is not supported (must be C2 on the reals)",
            {"activation": str(name), "supported": [a.value for a in Activation]},
        )


def activate(kind: Activation, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """sigma(z), sigma'(z), sigma''(z)."""
    if kind == Activation.IDENTITY:
        return z.copy(), np.ones_like(z), np.zeros_like(z)
    if kind == Activation.TANH:
        t = np.tanh(z)
        d1 = 1.0 - t * t
        return t, d1, -2.0 * t * d1
    if kind == Activation.SIGMOID:
        s = expit(z)
        d1 = s * (1.0 - s)
        return s, d1, d1 * (1.0 - 2.0 * s)
    # softplus; expit keeps the derivative finite for large |z|
    s = expit(z)
    return np.logaddexp(0.0, z), s, s * (1.0 - s)


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: Tuple[int, ...]
    activation: Activation
    family: FamilyModel

    def __post_init__(self) -> None:
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", parse_activation(self.activation))
        if len(sizes) < 2:
            raise InputRejected("invalid_config", "network needs at least one layer (L >= 1)", {"layers": list(sizes)})
        if any(n < 1 for n in sizes):
            raise InputRejected("invalid_config", "layer sizes must be positive", {"layers": list(sizes)})
        if self.family.dim_h != sizes[-1]:
            raise InputRejected(
                "dimension_mismatch",
                "output width must equal the family dimension",
                {"n_L": sizes[-1], "family_dim": self.family.dim_h},
            )

    @property
    def depth(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def layer_shape(self, l: int) -> Tuple[int, int]:
        return self.layer_sizes[l + 1], self.layer_sizes[l] + 1

    @property
    def offsets(self) -> Tuple[int, ...]:
        out = [0]
        for l in range(self.depth):
            rows, cols = self.layer_shape(l)
            out.append(out[-1] + rows * cols)
        return tuple(out)

    @property
    def n_params(self) -> int:
        return self.offsets[-1]

    def flat_index(self, l: int, row: int, col: int) -> int:
        rows, cols = self.layer_shape(l)
        if not (0 <= row < rows and 0 <= col < cols):
            raise InputRejected("subset_out_of_range", "weight position out of range", {"layer": l, "row": row, "col": col})
        return self.offsets[l] + row * cols + col

    def unflat_index(self, i: int) -> Tuple[int, int, int]:
        i = int(i)
        if not 0 <= i < self.n_params:
            raise InputRejected("subset_out_of_range", "flat index out of range", {"index": i, "P": self.n_params})
        offs = self.offsets
        l = int(np.searchsorted(offs, i, side="right")) - 1
        cols = self.layer_shape(l)[1]
        row, col = divmod(i - offs[l], cols)
        return l, row, col

    def layer_indices(self, l: int) -> np.ndarray:
        if not 0 <= l < self.depth:
            raise InputRejected("subset_out_of_range", "layer out of range", {"layer": l, "L": self.depth})
        return np.arange(self.offsets[l], self.offsets[l + 1])


@dataclass(frozen=True)
class ParamSet:
    weights: Tuple[np.ndarray, ...]

    def flat(self) -> np.ndarray:
        return np.concatenate([w.reshape(-1) for w in self.weights])

    @classmethod
    def from_flat(cls, spec: NetworkSpec, theta) -> "ParamSet":
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != spec.n_params:
            raise InputRejected("dimension_mismatch", "parameter vector has wrong length", {"expected": spec.n_params, "got": int(theta.size)})
        offs = spec.offsets
        ws = tuple(theta[offs[l]:offs[l + 1]].reshape(spec.layer_shape(l)).copy() for l in range(spec.depth))
        return cls(weights=ws)

    @classmethod
    def from_arrays(cls, spec: NetworkSpec, arrays: Sequence) -> "ParamSet":
        if len(arrays) != spec.depth:
            raise InputRejected("dimension_mismatch", "one weight matrix per layer is required", {"expected": spec.depth, "got": len(arrays)})
        ws = []
        for l, a in enumerate(arrays):
            w = np.asarray(a, dtype=float)
            if w.shape != spec.layer_shape(l):
                raise InputRejected(
                    "dimension_mismatch",
                    f"W_{l} has shape {w.shape}, expected {spec.layer_shape(l)}",
                    {"layer": l, "expected": list(spec.layer_shape(l)), "got": list(w.shape)},
                )
            if not np.all(np.isfinite(w)):
                raise InputRejected("domain_violation", f"W_{l} has non-finite entries", {"layer": l})
            ws.append(w.copy())
        return cls(weights=tuple(ws))


@dataclass(frozen=True)
class ForwardTrace:
    h: List[np.ndarray]
    hbar: List[np.ndarray]
    z: List[np.ndarray] = field(default_factory=list)

    @property
    def h_out(self) -> np.ndarray:
        return self.h[-1]


@dataclass(frozen=True)
class BackpropTrace:
    B: List[np.ndarray]
    D: List[np.ndarray]


@dataclass(frozen=True)
class JacobianNormReport:
    layer: int
    lhs_frobenius: float
    rhs_frobenius: float
    lhs_spectral: float
    rhs_spectral: float

    def holds(self, rtol: float = 1e-12) -> bool:
        return self.lhs_frobenius <= self.rhs_frobenius * (1 + rtol) and self.lhs_spectral <= self.rhs_spectral * (1 + rtol)


def init_params(spec: NetworkSpec, seed: int) -> ParamSet:
    """Fan-based uniform(-a, a) with a = sqrt(6 / (n_l + n_{l+1})), bias entries included."""
    rng = init_stream(seed)
    ws = []
    for l in range(spec.depth):
        a = np.sqrt(6.0 / (spec.layer_sizes[l] + spec.layer_sizes[l + 1]))
        ws.append(rng.uniform(-a, a, size=spec.layer_shape(l)))
    return ParamSet(weights=tuple(ws))


def resolve_subset(spec: NetworkSpec, subset=None, cap: Optional[int] = None) -> np.ndarray:
    if subset is None:
        idx = np.arange(spec.n_params)
    else:
        idx = np.asarray(list(subset), dtype=int).reshape(-1)
        if idx.size == 0:
            raise InputRejected("subset_out_of_range", "parameter subset is empty", {})
        bad = idx[(idx < 0) | (idx >= spec.n_params)]
        if bad.size:
            raise InputRejected(
                "subset_out_of_range",
                "subset index outside [0, P)",
                {"index": int(bad[0]), "P": spec.n_params},
            )
        if np.unique(idx).size != idx.size:
            raise InputRejected("subset_out_of_range", "subset has repeated indices", {})
    if cap is not None and idx.size > cap:
        raise InputRejected(
            "cap_exceeded",
            f"subset of {idx.size} parameters exceeds the cap {cap}; select a smaller subset",
            {"size": int(idx.size), "cap": int(cap)},
        )
    return idx


def _check_params(spec: NetworkSpec, params: ParamSet) -> None:
    if len(params.weights) != spec.depth:
        raise InputRejected("dimension_mismatch", "parameter set does not match the network depth", {"expected": spec.depth, "got": len(params.weights)})
    for l, w in enumerate(params.weights):
        if w.shape != spec.layer_shape(l):
            raise InputRejected("dimension_mismatch", f"W_{l} has the wrong shape", {"layer": l, "expected": list(spec.layer_shape(l)), "got": list(w.shape)})


def forward(spec: NetworkSpec, params: ParamSet, x) -> ForwardTrace:
    _check_params(spec, params)
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != spec.layer_sizes[0]:
        raise InputRejected("dimension_mismatch", "input has wrong length", {"expected": spec.layer_sizes[0], "got": int(x.size)})
    h, hbar, z = [x], [], []
    for l, w in enumerate(params.weights):
        hb = np.append(h[l], 1.0)
        zl = w @ hb
        hbar.append(hb)
        z.append(zl)
        h.append(zl if l == spec.depth - 1 else activate(spec.activation, zl)[0])
    return ForwardTrace(h=h, hbar=hbar, z=z)


def backprop_factors(spec: NetworkSpec, params: ParamSet, trace: ForwardTrace) -> BackpropTrace:
    L = spec.depth
    B: List[Optional[np.ndarray]] = [None] * (L + 1)
    D: List[Optional[np.ndarray]] = [None] * L
    B[L] = np.eye(spec.n_out)
    for l in range(L - 1, -1, -1):
        D[l] = np.ones(spec.layer_sizes[l + 1]) if l == L - 1 else activate(spec.activation, trace.z[l])[1]
        B[l] = (B[l + 1] * D[l]) @ params.weights[l][:, :-1]
    return BackpropTrace(B=B, D=D)


def jacobian_hL(spec: NetworkSpec, params: ParamSet, x, subset=None, trace: Optional[ForwardTrace] = None) -> np.ndarray:
    """dh_L/dtheta, shape n_L x P_s; block of layer l is (B_{l+1} D_l)[a, r] * hbar_l[c]."""
    idx = resolve_subset(spec, subset, cap=settings.FIMLAB_MAX_PARAMS)
    trace = trace or forward(spec, params, x)
    bp = backprop_factors(spec, params, trace)
    blocks = []
    for l in range(spec.depth):
        bd = bp.B[l + 1] * bp.D[l]
        blocks.append(np.einsum("ar,c->arc", bd, trace.hbar[l]).reshape(spec.n_out, -1))
    return np.concatenate(blocks, axis=1)[:, idx]


def hessian_hL(spec: NetworkSpec, params: ParamSet, x, subset=None, trace: Optional[ForwardTrace] = None) -> np.ndarray:
    """
    d2h_L/dtheta dtheta^T for every output, shape n_L x P_s x P_s.

    Exact forward second-order propagation over the subset columns: each layer
    carries G = dh_l/dtheta (n_l x P_s) and T = d2h_l/dtheta2 (n_l x P_s x P_s).
    """
    idx = resolve_subset(spec, subset, cap=settings.FIMLAB_MAX_PARAMS)
    trace = trace or forward(spec, params, x)
    s = idx.size
    pos = np.arange(s)
    where = np.array([spec.unflat_index(i) for i in idx], dtype=int).reshape(s, 3)

    n0 = spec.layer_sizes[0]
    G = np.zeros((n0, s))
    T = np.zeros((n0, s, s))
    for l, w in enumerate(params.weights):
        n_in = spec.layer_sizes[l]
        w_in = w[:, :-1]
        mine = where[:, 0] == l
        rows, cols, p_l = where[mine, 1], where[mine, 2], pos[mine]

        dz = w_in @ G
        dz[rows, p_l] += trace.hbar[l][cols]

        d2z = np.einsum("rc,cpq->rpq", w_in, T)
        inner = cols < n_in
        if np.any(inner):
            # d W_l[r, c] / d theta_q  times  d hbar_l[c] / d theta_q'
            cross = np.zeros_like(d2z)
            np.add.at(cross, (rows[inner], p_l[inner]), G[cols[inner]])
            d2z += cross + cross.transpose(0, 2, 1)

        if l == spec.depth - 1:
            G, T = dz, d2z
        else:
            _, s1, s2 = activate(spec.activation, trace.z[l])
            G = s1[:, None] * dz
            T = s2[:, None, None] * dz[:, :, None] * dz[:, None, :] + s1[:, None, None] * d2z
    return 0.5 * (T + T.transpose(0, 2, 1))


def loglik(spec: NetworkSpec, params: ParamSet, x, t) -> float:
    """log p(y | x, theta) up to the base measure: t^T h_L - F(h_L)."""
    return log_density_stat(spec.family, forward(spec, params, x).h_out, _as_stat(spec, t))


def _as_stat(spec: NetworkSpec, t) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(-1)
    if t.size != spec.family.dim_t:
        raise InputRejected("dimension_mismatch", "sufficient statistic has wrong length", {"expected": spec.family.dim_t, "got": int(t.size)})
    return t


def loglik_grad(spec: NetworkSpec, params: ParamSet, x, t, subset=None) -> np.ndarray:
    t = _as_stat(spec, t)
    trace = forward(spec, params, x)
    jac = jacobian_hL(spec, params, x, subset, trace=trace)
    eta = moments(spec.family, trace.h_out).eta
    return jac.T @ (t - eta)


def loglik_hessian(spec: NetworkSpec, params: ParamSet, x, t, subset=None) -> np.ndarray:
    t = _as_stat(spec, t)
    trace = forward(spec, params, x)
    jac = jacobian_hL(spec, params, x, subset, trace=trace)
    hess = hessian_hL(spec, params, x, subset, trace=trace)
    ms = moments(spec.family, trace.h_out)
    out = np.einsum("a,apq->pq", t - ms.eta, hess) - jac.T @ ms.fim_head @ jac
    return 0.5 * (out + out.T)


def jacobian_norm_report(spec: NetworkSpec, params: ParamSet, x, l: int) -> JacobianNormReport:
    """
    Norms of the layer-l Jacobian block dh_L/dW_l against products of weight norms.

    For l = L-1 the product is empty and B_L D_{L-1} = I; the Frobenius side then
    uses ||I||_F = sqrt(n_L) so both sides stay equal.
    """
    if not 0 <= l < spec.depth:
        raise InputRejected("subset_out_of_range", "layer out of range", {"layer": l, "L": spec.depth})
    trace = forward(spec, params, x)
    bp = backprop_factors(spec, params, trace)
    bd = bp.B[l + 1] * bp.D[l]
    hb = float(np.linalg.norm(trace.hbar[l]))

    rhs_f, rhs_s = 1.0, 1.0
    for i in range(l + 1, spec.depth):
        w_in = params.weights[i][:, :-1]
        rhs_f *= float(np.linalg.norm(w_in, "fro"))
        rhs_s *= float(np.linalg.norm(w_in, 2))
    if l == spec.depth - 1:
        rhs_f = float(np.sqrt(spec.n_out))

    return JacobianNormReport(
        layer=l,
        lhs_frobenius=float(np.linalg.norm(bd, "fro")) * hb,
        rhs_frobenius=rhs_f * hb,
        lhs_spectral=float(np.linalg.norm(bd, 2)) * hb,
        rhs_spectral=rhs_s * hb,
    )


def pin_output(spec: NetworkSpec, params: ParamSet, x, mean_params) -> ParamSet:
    """Shift the last-layer bias so the head sits at the given mean parameters at x."""
    target = natural_from_mean(spec.family, mean_params)
    h_out = forward(spec, params, x).h_out
    ws = [w.copy() for w in params.weights]
    ws[-1][:, -1] += target - h_out
    log.debug("pinned output bias: shift=%s", target - h_out)
    return ParamSet(weights=tuple(ws))
