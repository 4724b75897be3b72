"""
Coordinate changes theta <-> xi over a parameter subset.

Both kinds expose, at the current point theta:
  jacobian(theta): d theta / d xi            (P_s x P_s)
  second(theta):   d2 theta_b / d xi d xi^T  (P_s x P_s x P_s, indexed [b, i, j])
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from fimlab.errors import InputRejected

# affine maps with condition number above this are treated as singular
_MAX_COND = 1e12


@dataclass(frozen=True)
class AffineReparam:
    """xi = A theta + b."""

    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self) -> None:
        a = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        b = np.asarray(self.offset, dtype=float).reshape(-1)
        if a.shape[0] != a.shape[1] or b.size != a.shape[0]:
            raise InputRejected("dimension_mismatch", "affine map needs a square matrix and matching offset", {"matrix": list(a.shape), "offset": int(b.size)})
        cond = np.linalg.cond(a)
        if not np.isfinite(cond) or cond > _MAX_COND:
            raise InputRejected("singular_reparam", "affine reparametrization is not invertible", {"cond": float(cond)})
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "offset", b)

    @classmethod
    def scaled(cls, c: float, dim: int) -> "AffineReparam":
        return cls(matrix=float(c) * np.eye(dim), offset=np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def xi(self, theta) -> np.ndarray:
        return self.matrix @ np.asarray(theta, dtype=float) + self.offset

    def theta(self, xi) -> np.ndarray:
        return np.linalg.solve(self.matrix, np.asarray(xi, dtype=float) - self.offset)

    def jacobian(self, theta) -> np.ndarray:
        return np.linalg.inv(self.matrix)

    def second(self, theta) -> np.ndarray:
        return np.zeros((self.dim,) * 3)


@dataclass(frozen=True)
class ElementwiseReparam:
    """xi_b = to_xi(theta_b) per coordinate; dtheta/d2theta are derivatives of the inverse, as functions of xi."""

    name: str
    to_xi: Callable[[np.ndarray], np.ndarray]
    to_theta: Callable[[np.ndarray], np.ndarray]
    dtheta: Callable[[np.ndarray], np.ndarray]
    d2theta: Callable[[np.ndarray], np.ndarray]

    def xi(self, theta) -> np.ndarray:
        return self.to_xi(np.asarray(theta, dtype=float))

    def theta(self, xi) -> np.ndarray:
        return self.to_theta(np.asarray(xi, dtype=float))

    def jacobian(self, theta) -> np.ndarray:
        xi = self.xi(theta)
        return np.diag(np.broadcast_to(self.dtheta(xi), xi.shape).astype(float))

    def second(self, theta) -> np.ndarray:
        xi = self.xi(theta)
        n = xi.size
        out = np.zeros((n, n, n))
        k = np.arange(n)
        out[k, k, k] = np.broadcast_to(self.d2theta(xi), xi.shape)
        return out


def identity_map() -> ElementwiseReparam:
    return ElementwiseReparam(
        name="identity",
        to_xi=lambda th: th.copy(),
        to_theta=lambda xi: xi.copy(),
        dtheta=lambda xi: np.ones_like(xi),
        d2theta=lambda xi: np.zeros_like(xi),
    )


def exp_map() -> ElementwiseReparam:
    """xi = exp(theta), so theta = log xi."""
    return ElementwiseReparam(
        name="exp",
        to_xi=np.exp,
        to_theta=np.log,
        dtheta=lambda xi: 1.0 / xi,
        d2theta=lambda xi: -1.0 / (xi * xi),
    )


def scale_map(c: float) -> ElementwiseReparam:
    c = float(c)
    if c == 0.0 or not np.isfinite(c):
        raise InputRejected("singular_reparam", "scale factor must be finite and nonzero", {"c": c})
    return ElementwiseReparam(
        name=f"scale({c:g})",
        to_xi=lambda th: c * th,
        to_theta=lambda xi: xi / c,
        dtheta=lambda xi: np.full_like(xi, 1.0 / c),
        d2theta=lambda xi: np.zeros_like(xi),
    )


REPARAM_BUILDERS = {
    "identity": identity_map,
    "exp": exp_map,
}


def parse_reparam(text: str) -> ElementwiseReparam:
    """Map named by "identity", "exp" or "scale:C" (xi = C theta)."""
    name, _, arg = str(text).strip().lower().partition(":")
    if name == "scale":
        try:
            c = float(arg)
        except ValueError:
            raise InputRejected("unknown_reparam", "scale needs a factor, e.g. scale:2", {"reparam": text})
        return scale_map(c)
    if name not in REPARAM_BUILDERS or arg:
        raise InputRejected("unknown_reparam", f"unknown reparametrization {text!r}", {"reparam": text, "known": [*REPARAM_BUILDERS, "scale:C"]})
    return REPARAM_BUILDERS[name]()
