"""
Exponential-family output heads.

A head is described by its natural parameter h (the network output h_L) and
its sufficient statistic t(y). The log-partition F(h) generates the cumulants
of t: eta = dF, I(h) = d2F = Cov(t), third and fourth cumulants from d3F and
d4F. The fourth central moment K is assembled from the cumulants.

Factorized kinds (bernoulli, normal, poisson) treat every coordinate of h as
an independent scalar head; their cumulant tensors are diagonal.
"""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import expit, gammaln, logit, logsumexp

from fimlab.errors import InputRejected, NumericalFailure, Unsupported

log = logging.getLogger(__name__)


class FamilyKind(str, Enum):
    BERNOULLI = "bernoulli"
    NORMAL = "normal"
    POISSON = "poisson"
    GAUSSIAN2 = "gaussian2"
    CATEGORICAL = "categorical"


FACTORIZED_KINDS = frozenset({FamilyKind.BERNOULLI, FamilyKind.NORMAL, FamilyKind.POISSON})

# bernoulli heads wider than this are not enumerated (2^dim outcomes)
MAX_ENUM_BERNOULLI_DIM = 20


@dataclass(frozen=True)
class FamilyModel:
    kind: FamilyKind
    dim_h: int

    def __post_init__(self) -> None:
        if int(self.dim_h) < 1:
            raise InputRejected("invalid_config", "family dim must be positive", {"dim": self.dim_h})
        if self.kind == FamilyKind.GAUSSIAN2 and self.dim_h != 2:
            raise InputRejected("invalid_config", "gaussian2 has exactly 2 natural parameters", {"dim": self.dim_h})
        if self.kind == FamilyKind.CATEGORICAL and self.dim_h < 2:
            raise InputRejected("invalid_config", "categorical needs at least 2 classes", {"dim": self.dim_h})

    @property
    def dim_t(self) -> int:
        return self.dim_h

    @property
    def factorized(self) -> bool:
        return self.kind in FACTORIZED_KINDS

    @property
    def finite_support(self) -> bool:
        return self.kind in (FamilyKind.BERNOULLI, FamilyKind.CATEGORICAL)

    @classmethod
    def from_config(cls, name: str, dim: Optional[int] = None) -> "FamilyModel":
        try:
            kind = FamilyKind(str(name).strip().lower())
        except ValueError:
            raise InputRejected(
                "unknown_family",
                f"unknown family {name!r}",
                {"family": name, "known": [k.value for k in FamilyKind]},
            )
        if dim is None:
            dim = 2 if kind == FamilyKind.GAUSSIAN2 else 1
        return cls(kind=kind, dim_h=int(dim))


@dataclass(frozen=True)
class MomentSet:
    eta: np.ndarray
    fim_head: np.ndarray
    cum3: np.ndarray
    cum4: np.ndarray
    cmom4: np.ndarray

    @property
    def kurt_minus_square(self) -> np.ndarray:
        """K - I (x) I: the covariance of the random matrix (t - eta)(t - eta)^T."""
        return self.cmom4 - np.einsum("ab,cd->abcd", self.fim_head, self.fim_head)


def _as_h(family: FamilyModel, h) -> np.ndarray:
    arr = np.asarray(h, dtype=float).reshape(-1)
    if arr.shape != (family.dim_h,):
        raise InputRejected(
            "dimension_mismatch",
            f"natural parameter has length {arr.size}, family expects {family.dim_h}",
            {"expected": family.dim_h, "got": int(arr.size)},
        )
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise InputRejected("domain_violation", "natural parameter is not finite", {"coordinate": int(bad[0])})
    if family.kind == FamilyKind.GAUSSIAN2 and not arr[1] < 0.0:
        raise InputRejected(
            "domain_violation",
            "gaussian2 requires h[1] < 0",
            {"coordinate": 1, "value": float(arr[1])},
        )
    return arr


def _diag(values: np.ndarray, order: int) -> np.ndarray:
    d = values.size
    out = np.zeros((d,) * order)
    idx = np.arange(d)
    out[(idx,) * order] = values
    return out


def _pairings(fim: np.ndarray) -> np.ndarray:
    return (
        np.einsum("ab,cd->abcd", fim, fim)
        + np.einsum("ac,bd->abcd", fim, fim)
        + np.einsum("ad,bc->abcd", fim, fim)
    )


def _by_count(table: Tuple[float, ...], order: int) -> np.ndarray:
    # 2-dim symmetric tensor whose entry depends only on how many indices are 1
    out = np.empty((2,) * order)
    for idx in itertools.product((0, 1), repeat=order):
        out[idx] = table[sum(idx)]
    return out


def log_partition(family: FamilyModel, h) -> float:
    h = _as_h(family, h)
    kind = family.kind
    if kind == FamilyKind.BERNOULLI:
        return float(np.sum(np.logaddexp(0.0, h)))
    if kind == FamilyKind.NORMAL:
        return float(0.5 * np.sum(h * h))
    if kind == FamilyKind.POISSON:
        return float(np.sum(np.exp(h)))
    if kind == FamilyKind.GAUSSIAN2:
        u, v = h
        return float(-u * u / (4.0 * v) + 0.5 * np.log(-np.pi / v))
    return float(logsumexp(h))


def moments(family: FamilyModel, h) -> MomentSet:
    h = _as_h(family, h)
    kind = family.kind
    if kind == FamilyKind.BERNOULLI:
        p = expit(h)
        var = p * (1.0 - p)
        eta = p
        fim = _diag(var, 2)
        cum3 = _diag(var * (1.0 - 2.0 * p), 3)
        cum4 = _diag(var * (6.0 * p * p - 6.0 * p + 1.0), 4)
    elif kind == FamilyKind.NORMAL:
        eta = h.copy()
        fim = np.eye(family.dim_h)
        cum3 = np.zeros((family.dim_h,) * 3)
        cum4 = np.zeros((family.dim_h,) * 4)
    elif kind == FamilyKind.POISSON:
        lam = np.exp(h)
        eta = lam
        fim = _diag(lam, 2)
        cum3 = _diag(lam, 3)
        cum4 = _diag(lam, 4)
    elif kind == FamilyKind.GAUSSIAN2:
        u, v = h
        eta = np.array([-u / (2.0 * v), (u * u - 2.0 * v) / (4.0 * v * v)])
        fim = _by_count((-1.0 / (2.0 * v), u / (2.0 * v**2), -(u * u) / (2.0 * v**3) + 1.0 / (2.0 * v**2)), 2)
        cum3 = _by_count((0.0, 1.0 / (2.0 * v**2), -u / v**3, 3.0 * u * u / (2.0 * v**4) - 1.0 / v**3), 3)
        cum4 = _by_count((0.0, 0.0, -1.0 / v**3, 3.0 * u / v**4, -6.0 * u * u / v**5 + 3.0 / v**4), 4)
    else:
        # one-hot statistics: the cumulants of log-sum-exp are finite sums over classes
        p = np.exp(h - logsumexp(h))
        dev = np.eye(family.dim_h) - p
        eta = p
        fim = np.diag(p) - np.outer(p, p)
        cum3 = np.einsum("y,ya,yb,yc->abc", p, dev, dev, dev)
        cum4 = np.einsum("y,ya,yb,yc,yd->abcd", p, dev, dev, dev, dev) - _pairings(fim)
    cmom4 = cum4 + _pairings(fim)
    return MomentSet(eta=np.asarray(eta, dtype=float), fim_head=fim, cum3=cum3, cum4=cum4, cmom4=cmom4)


def natural_from_mean(family: FamilyModel, mean_params) -> np.ndarray:
    """
    Inverse link. gaussian2 takes (mu, s) with s the standard deviation;
    categorical takes class probabilities.
    """
    m = np.asarray(mean_params, dtype=float).reshape(-1)
    kind = family.kind
    if kind in FACTORIZED_KINDS and m.size == 1 and family.dim_h > 1:
        m = np.full(family.dim_h, m[0])
    if m.shape != (family.dim_h,):
        raise InputRejected(
            "dimension_mismatch",
            "mean parameters do not match the family dimension",
            {"expected": family.dim_h, "got": int(m.size)},
        )

    def _reject(coord: int, why: str) -> None:
        raise InputRejected("domain_violation", why, {"coordinate": int(coord), "value": float(m[coord])})

    if kind == FamilyKind.BERNOULLI:
        for i, p in enumerate(m):
            if not 0.0 < p < 1.0:
                _reject(i, "bernoulli mean must lie in (0, 1)")
        return logit(m)
    if kind == FamilyKind.NORMAL:
        for i, mu in enumerate(m):
            if not np.isfinite(mu):
                _reject(i, "normal mean must be finite")
        return m.copy()
    if kind == FamilyKind.POISSON:
        for i, lam in enumerate(m):
            if not lam > 0.0:
                _reject(i, "poisson rate must be positive")
        return np.log(m)
    if kind == FamilyKind.GAUSSIAN2:
        mu, s = m
        if not np.isfinite(mu):
            _reject(0, "gaussian mean must be finite")
        if not s > 0.0:
            _reject(1, "gaussian standard deviation must be positive")
        return np.array([mu / (s * s), -1.0 / (2.0 * s * s)])
    for i, p in enumerate(m):
        if not p > 0.0:
            _reject(i, "categorical probabilities must be positive")
    if abs(float(np.sum(m)) - 1.0) > 1e-12:
        raise InputRejected("domain_violation", "categorical probabilities must sum to 1", {"sum": float(np.sum(m))})
    return np.log(m)


# numpy's poisson sampler refuses lam near the int64 range; PTRS takes over above this
POISSON_NUMPY_MAX_LAM = 1e18


def _stirlerr(k: float) -> float:
    """log k! - [(k + 1/2) log k - k + log(2 pi)/2]."""
    if k < 1e6:
        return float(gammaln(k + 1.0) - (k + 0.5) * np.log(k) + k - 0.5 * np.log(2.0 * np.pi))
    return 1.0 / (12.0 * k) - 1.0 / (360.0 * k**3)


def _poisson_log_pmf(k: float, lam: float) -> float:
    # k log(lam) - lam - log k!, without the cancellation of the naive form at large lam
    if k == 0.0:
        return -lam
    d = (k - lam) / lam
    bd0 = lam * ((1.0 + d) * np.log1p(d) - d)
    return float(-bd0 - 0.5 * np.log(2.0 * np.pi * k) - _stirlerr(k))


def _poisson_ptrs(lam: float, rng: np.random.Generator) -> float:
    """Transformed rejection with squeeze (PTRS), exact for lam >= 10."""
    slam = np.sqrt(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    log_inv_alpha = np.log(1.1239 + 1.1328 / (b - 3.4))
    vr = 0.9277 - 3.6224 / (b - 2.0)
    while True:
        u = rng.random() - 0.5
        v = rng.random()
        us = 0.5 - abs(u)
        k = np.floor((2.0 * a / us + b) * u + lam + 0.43)
        if us >= 0.07 and v <= vr:
            return float(k)
        if k < 0.0 or (us < 0.013 and v > us):
            continue
        if np.log(v) + log_inv_alpha - np.log(a / (us * us) + b) <= _poisson_log_pmf(float(k), lam):
            return float(k)


def _poisson_batch(lam: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if not np.all(np.isfinite(lam)):
        raise NumericalFailure("non_finite", "poisson rate overflows at this natural parameter", {"lam": lam.tolist()})
    if np.all(lam <= POISSON_NUMPY_MAX_LAM):
        return rng.poisson(lam, size=(n, lam.size)).astype(float)
    log.debug("poisson rate above %g, sampling coordinate by coordinate", POISSON_NUMPY_MAX_LAM)
    out = np.empty((n, lam.size))
    for i in range(n):
        for a, rate in enumerate(lam):
            out[i, a] = _poisson_ptrs(float(rate), rng) if rate > POISSON_NUMPY_MAX_LAM else float(rng.poisson(rate))
    return out


def sample_batch(family: FamilyModel, h, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw n sufficient-statistic vectors t(y_i), y_i ~ p(y | h), as an (n, dim_t) array.
    Row i only consumes draws after those of rows < i.
    """
    h = _as_h(family, h)
    n = int(n)
    if n < 1:
        raise InputRejected("invalid_config", "sample count must be at least 1", {"n": n})
    d = family.dim_h
    kind = family.kind
    if kind == FamilyKind.BERNOULLI:
        # inverse CDF, one uniform per coordinate
        u = rng.random((n, d))
        return (u < expit(h)).astype(float)
    if kind == FamilyKind.NORMAL:
        return h + rng.standard_normal((n, d))
    if kind == FamilyKind.POISSON:
        with np.errstate(over="ignore"):
            lam = np.exp(h)
        return _poisson_batch(lam, n, rng)
    if kind == FamilyKind.GAUSSIAN2:
        u, v = h
        mu, s = -u / (2.0 * v), np.sqrt(-1.0 / (2.0 * v))
        y = mu + s * rng.standard_normal(n)
        return np.column_stack([y, y * y])
    p = np.exp(h - logsumexp(h))
    cdf = np.cumsum(p)
    cls = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), d - 1)
    return np.eye(d)[cls]


def sample(family: FamilyModel, h, rng: np.random.Generator):
    """One exact draw. Returns (y, t(y))."""
    t = sample_batch(family, h, 1, rng)[0]
    if family.kind == FamilyKind.GAUSSIAN2:
        y = float(t[0])
    elif family.kind == FamilyKind.CATEGORICAL:
        y = int(np.argmax(t))
    elif family.kind == FamilyKind.NORMAL:
        y = t.copy()
    else:
        y = t.astype(int)
    return y, t


def enumerate_outcomes(family: FamilyModel, h) -> List[Tuple[float, np.ndarray]]:
    h = _as_h(family, h)
    if family.kind == FamilyKind.CATEGORICAL:
        p = np.exp(h - logsumexp(h))
        eye = np.eye(family.dim_h)
        return [(float(p[k]), eye[k].copy()) for k in range(family.dim_h)]
    if family.kind != FamilyKind.BERNOULLI:
        raise Unsupported("infinite_support", f"{family.kind.value} has no finite outcome list", {"family": family.kind.value})
    if family.dim_h > MAX_ENUM_BERNOULLI_DIM:
        raise Unsupported(
            "infinite_support",
            "bernoulli head too wide to enumerate",
            {"dim": family.dim_h, "max": MAX_ENUM_BERNOULLI_DIM},
        )
    p = expit(h)
    out = []
    for bits in itertools.product((0.0, 1.0), repeat=family.dim_h):
        t = np.array(bits)
        prob = float(np.prod(np.where(t > 0.5, p, 1.0 - p)))
        out.append((prob, t))
    return out


def log_density_stat(family: FamilyModel, h, t) -> float:
    """t^T h - F(h): the log-likelihood without the base measure."""
    h = _as_h(family, h)
    return float(np.dot(np.asarray(t, dtype=float), h) - log_partition(family, h))


# 4th-order central stencil for a first derivative
_STENCIL = ((-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0))


def _nested_fd(f: Callable[[np.ndarray], float], h: np.ndarray, order: int, step: float) -> np.ndarray:
    if order == 0:
        return np.asarray(f(h), dtype=float)
    parts = []
    for a in range(h.size):
        acc = 0.0
        for k, w in _STENCIL:
            hh = h.copy()
            hh[a] += k * step
            acc = acc + w * _nested_fd(f, hh, order - 1, step)
        parts.append(acc / step)
    return np.stack(parts, axis=0)


def numeric_derivatives(family: FamilyModel, h, order: int) -> np.ndarray:
    """
    Finite-difference derivative tensor of F of the given order (1..4).
    Test oracle only; production paths use the closed forms in moments().
    """
    h = _as_h(family, h)
    if order not in (1, 2, 3, 4):
        raise InputRejected("invalid_config", "derivative order must be 1..4", {"order": order})
    scale = max(1.0, float(np.max(np.abs(h))))
    base = {1: 1e-5, 2: 1e-3}.get(order, 1e-2)
    return _nested_fd(lambda z: log_partition(family, z), h, order, base * scale)
