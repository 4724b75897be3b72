"""
Closed-form covariance of the FIM estimators and the bounds on it.

With Q = K - I(h_L) (x) I(h_L):

  Cov(I1)^{ijkl} = (1/N) J_i^a J_j^b J_k^c J_l^d Q_abcd
  Cov(I2)^{ijkl} = (1/N) H^a_ij I_ab H^b_kl

Tensors are computed at N = 1 and divided by N once.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from fimlab import settings
from fimlab.errors import InputRejected, Unsupported
from fimlab.expfam import MomentSet

log = logging.getLogger(__name__)

ESTIMATORS = ("1", "2", "combined")


@dataclass(frozen=True)
class CovTensor:
    values: np.ndarray
    subset: np.ndarray
    N: int
    estimator: str
    metadata: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class VarMatrix:
    values: np.ndarray
    N: int
    estimator: str


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs: float
    kind: str

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def ratio(self) -> Optional[float]:
        """lhs / rhs; 0 when lhs is 0, None for 0/0."""
        if self.lhs == 0.0:
            return None if self.rhs == 0.0 else 0.0
        return self.lhs / self.rhs if self.rhs > 0.0 else float("inf")

    def holds(self, rtol: float = 1e-9) -> bool:
        return self.slack >= -rtol * abs(self.rhs)


def _check_N(N) -> int:
    n = int(N)
    if n < 1 or n != N:
        raise InputRejected("invalid_config", "sample count N must be a positive integer", {"N": N})
    return n


def _check_which(which: str) -> str:
    w = str(which)
    if w not in ESTIMATORS:
        raise InputRejected("invalid_config", f"unknown estimator {which!r}", {"estimator": which, "known": list(ESTIMATORS)})
    return w


def _check_cap(ps: int) -> None:
    cap = settings.FIMLAB_MAX_COV_PARAMS
    if ps > cap:
        raise InputRejected(
            "cap_exceeded",
            f"a {ps}^4 covariance tensor exceeds the materialization cap; use a subset of at most {cap} parameters",
            {"size": int(ps), "cap": int(cap), "required_cap": int(ps)},
        )


def _subset(subset, ps: int) -> np.ndarray:
    return np.arange(ps) if subset is None else np.asarray(subset, dtype=int)


def _contract_all(tensor: np.ndarray, mat: np.ndarray) -> np.ndarray:
    # T_abcd M_ai M_bj M_ck M_dl -> (i, j, k, l); each step contracts the leading axis
    out = tensor
    for _ in range(tensor.ndim):
        out = np.tensordot(out, mat, axes=([0], [0]))
    return out


def _cov1_unscaled(jac: np.ndarray, ms: MomentSet) -> np.ndarray:
    return _contract_all(ms.kurt_minus_square, jac)


def _cov2_unscaled(hess: np.ndarray, ms: MomentSet) -> np.ndarray:
    ih = np.tensordot(ms.fim_head, hess, axes=([1], [0]))
    return np.tensordot(hess, ih, axes=([0], [0]))


def _cross_unscaled(jac: np.ndarray, hess: np.ndarray, ms: MomentSet) -> np.ndarray:
    """X_ijkl = J_i^a J_j^b H^c_kl cum3_abc, averaged with its (ij)<->(kl) exchange."""
    y = np.tensordot(ms.cum3, hess, axes=([2], [0]))
    y = np.tensordot(y, jac, axes=([0], [0]))
    y = np.tensordot(y, jac, axes=([0], [0]))
    x = y.transpose(2, 3, 0, 1)
    return 0.5 * (x + x.transpose(2, 3, 0, 1))


def cov_estimator1(jac: np.ndarray, ms: MomentSet, N: int, subset=None) -> CovTensor:
    n = _check_N(N)
    _check_cap(jac.shape[1])
    values = _cov1_unscaled(jac, ms) / n
    return CovTensor(values=values, subset=_subset(subset, jac.shape[1]), N=n, estimator="1")


def cov_estimator2(hess: np.ndarray, ms: MomentSet, N: int, subset=None) -> CovTensor:
    n = _check_N(N)
    _check_cap(hess.shape[1])
    values = _cov2_unscaled(hess, ms) / n
    return CovTensor(values=values, subset=_subset(subset, hess.shape[1]), N=n, estimator="2")


def cov_combined(alpha: float, jac: np.ndarray, hess: np.ndarray, ms: MomentSet, N: int, subset=None) -> CovTensor:
    """
    Covariance of alpha*I1 + (1-alpha)*I2 on one batch. The cross term is
    -cum3 contracted with J, J and H; off the ijij diagonal it is averaged
    over the (ij)<->(kl) exchange so the result is a proper covariance.
    """
    a = float(alpha)
    if not 0.0 <= a <= 1.0:
        raise InputRejected("alpha_out_of_range", "alpha must lie in [0, 1]", {"alpha": a})
    n = _check_N(N)
    meta = {"alpha": a, "cross_term_symmetrized": True}
    if a == 1.0:
        base = cov_estimator1(jac, ms, n, subset)
    elif a == 0.0:
        base = cov_estimator2(hess, ms, n, subset)
    else:
        _check_cap(jac.shape[1])
        unscaled = (
            a * a * _cov1_unscaled(jac, ms)
            + (1.0 - a) ** 2 * _cov2_unscaled(hess, ms)
            - 2.0 * a * (1.0 - a) * _cross_unscaled(jac, hess, ms)
        )
        return CovTensor(values=unscaled / n, subset=_subset(subset, jac.shape[1]), N=n, estimator="combined", metadata=meta)
    return CovTensor(values=base.values, subset=base.subset, N=n, estimator="combined", metadata=meta)


def var_matrix(cov: CovTensor) -> VarMatrix:
    return VarMatrix(values=np.einsum("ijij->ij", cov.values).copy(), N=cov.N, estimator=cov.estimator)


def var_matrix_direct(
    which: str,
    jac: Optional[np.ndarray],
    hess: Optional[np.ndarray],
    ms: MomentSet,
    N: int,
    alpha: float = 0.5,
) -> VarMatrix:
    """Element-wise variances Cov^{ijij} without forming the 4D tensor."""
    which = _check_which(which)
    n = _check_N(N)

    def _v1() -> np.ndarray:
        d = ms.kurt_minus_square.shape[0]
        q = ms.kurt_minus_square.transpose(0, 2, 1, 3).reshape(d * d, d * d)
        pairs = np.einsum("ai,ci->aci", jac, jac).reshape(d * d, -1)
        return pairs.T @ q @ pairs

    def _v2() -> np.ndarray:
        return np.einsum("aij,ab,bij->ij", hess, ms.fim_head, hess)

    if which == "1":
        unscaled = _v1()
    elif which == "2":
        unscaled = _v2()
    else:
        a = float(alpha)
        if not 0.0 <= a <= 1.0:
            raise InputRejected("alpha_out_of_range", "alpha must lie in [0, 1]", {"alpha": a})
        cross = np.einsum("ai,bj,cij,abc->ij", jac, jac, hess, ms.cum3)
        unscaled = a * a * _v1() + (1.0 - a) ** 2 * _v2() - 2.0 * a * (1.0 - a) * cross
    return VarMatrix(values=unscaled / n, N=n, estimator=which)


def frobenius_norm(which: str, deriv: np.ndarray, ms: MomentSet, N: int) -> float:
    """
    ||Cov||_F via Gram matrices of the derivatives, never materializing the tensor.
    deriv is the Jacobian for estimator 1 and the Hessian for estimator 2.
    """
    which = _check_which(which)
    n = _check_N(N)
    if which == "1":
        gram = deriv @ deriv.T
        q = ms.kurt_minus_square
        sq = float(np.sum(q * _contract_all(q, gram)))
    elif which == "2":
        gram = np.einsum("aij,bij->ab", deriv, deriv)
        i = ms.fim_head
        sq = float(np.einsum("ab,cd,ac,bd->", i, i, gram, gram))
    else:
        raise Unsupported("invalid_config", "Frobenius norm without materialization covers estimators 1 and 2", {"estimator": which})
    return float(np.sqrt(max(sq, 0.0))) / n


def bound_frobenius(which: str, deriv: np.ndarray, ms: MomentSet, N: int) -> BoundReport:
    which = _check_which(which)
    n = _check_N(N)
    lhs = frobenius_norm(which, deriv, ms, n)
    if which == "1":
        rhs = float(np.linalg.norm(deriv) ** 4 * np.linalg.norm(ms.kurt_minus_square.reshape(-1))) / n
    elif which == "2":
        rhs = float(np.linalg.norm(deriv.reshape(-1)) ** 2 * np.linalg.norm(ms.fim_head)) / n
    else:
        raise Unsupported("invalid_config", "Frobenius bounds exist for estimators 1 and 2", {"estimator": which})
    return BoundReport(lhs=lhs, rhs=rhs, kind=f"frobenius_{which}")


def elementwise_entry(which: str, idx: Sequence[int], deriv: np.ndarray, ms: MomentSet, N: int) -> float:
    i, j, k, l = (int(v) for v in idx)
    n = _check_N(N)
    if which == "1":
        val = np.einsum("a,b,c,d,abcd->", deriv[:, i], deriv[:, j], deriv[:, k], deriv[:, l], ms.kurt_minus_square)
    else:
        val = deriv[:, i, j] @ ms.fim_head @ deriv[:, k, l]
    return float(val) / n


def bound_elementwise(which: str, idx: Sequence[int], deriv: np.ndarray, ms: MomentSet, N: int) -> BoundReport:
    """Hoelder bound on one entry (i, j, k, l) of the covariance tensor."""
    which = _check_which(which)
    if which == "combined":
        raise Unsupported("invalid_config", "element-wise bounds exist for estimators 1 and 2", {"estimator": which})
    n = _check_N(N)
    i, j, k, l = (int(v) for v in idx)
    lhs = abs(elementwise_entry(which, (i, j, k, l), deriv, ms, n))
    if which == "1":
        cols = np.linalg.norm(deriv, axis=0)
        rhs = float(cols[i] * cols[j] * cols[k] * cols[l] * np.linalg.norm(ms.kurt_minus_square.reshape(-1))) / n
    else:
        rhs = float(np.linalg.norm(deriv[:, i, j]) * np.linalg.norm(deriv[:, k, l]) * np.linalg.norm(ms.fim_head)) / n
    return BoundReport(lhs=lhs, rhs=rhs, kind=f"elementwise_{which}")


def elementwise_var_bounds(which: str, deriv: np.ndarray, ms: MomentSet, N: int) -> np.ndarray:
    """The element-wise bound evaluated at every variance entry (i, j, i, j)."""
    which = _check_which(which)
    n = _check_N(N)
    if which == "1":
        cols = np.linalg.norm(deriv, axis=0) ** 2
        return np.outer(cols, cols) * float(np.linalg.norm(ms.kurt_minus_square.reshape(-1))) / n
    if which == "2":
        return np.linalg.norm(deriv, axis=0) ** 2 * float(np.linalg.norm(ms.fim_head)) / n
    raise Unsupported("invalid_config", "element-wise bounds exist for estimators 1 and 2", {"estimator": which})


def bound_linf(which: str, deriv: np.ndarray, ms: MomentSet, N: int) -> BoundReport:
    which = _check_which(which)
    n = _check_N(N)
    if which == "1":
        cov = cov_estimator1(deriv, ms, n)
        rhs = float(np.max(np.abs(deriv)) ** 4 * np.sum(np.abs(ms.kurt_minus_square))) / n
    elif which == "2":
        cov = cov_estimator2(deriv, ms, n)
        rhs = float(np.max(np.abs(deriv)) ** 2 * np.sum(np.abs(ms.fim_head))) / n
    else:
        raise Unsupported("invalid_config", "L-infinity bounds exist for estimators 1 and 2", {"estimator": which})
    return BoundReport(lhs=float(np.max(np.abs(cov.values))), rhs=rhs, kind=f"linf_{which}")


def bound_moments(ms: MomentSet) -> Tuple[float, float]:
    """
    Bounds of ||K - I(x)I||_F and ||I||_F by the diagonals of K and I:
      sqrt(2) * (sum_a sqrt(K_aaaa) + I_aa)^2   and   sum_a I_aa
    """
    d = ms.fim_head.shape[0]
    k_diag = np.array([ms.cmom4[a, a, a, a] for a in range(d)])
    i_diag = np.diag(ms.fim_head)
    bound_k = float(np.sqrt(2.0) * np.sum(np.sqrt(k_diag) + i_diag) ** 2)
    return bound_k, float(np.sum(i_diag))


def moment_bound_reports(ms: MomentSet) -> Tuple[BoundReport, BoundReport]:
    bound_k, bound_i = bound_moments(ms)
    return (
        BoundReport(lhs=float(np.linalg.norm(ms.kurt_minus_square.reshape(-1))), rhs=bound_k, kind="moments_K"),
        BoundReport(lhs=float(np.linalg.norm(ms.fim_head)), rhs=bound_i, kind="moments_I"),
    )


def chebyshev_radius(var: VarMatrix, eps: float) -> float:
    """Radius r with P(||I_hat - I||_F <= r) >= 1 - eps."""
    e = float(eps)
    if not 0.0 < e < 1.0:
        raise InputRejected("eps_out_of_range", "eps must lie in (0, 1)", {"eps": e})
    single = max(float(np.sum(var.values)) * var.N, 0.0)
    return float(np.sqrt(single) / np.sqrt(e * var.N))


def cov_reparam(cov: CovTensor, reparam, lin) -> CovTensor:
    """
    Covariance in xi coordinates. Estimator 1 is a pure 4-fold contraction with
    dtheta/dxi; estimator 2 adds the covariance carried by the second
    derivatives of theta(xi).
    """
    if cov.estimator not in ("1", "2"):
        raise Unsupported("invalid_config", "coordinate changes are available for estimators 1 and 2", {"estimator": cov.estimator})
    theta_s = lin.params.flat()[lin.subset]
    jx = reparam.jacobian(theta_s)
    if jx.shape[0] != cov.values.shape[0]:
        raise InputRejected("dimension_mismatch", "reparametrization dimension differs from the tensor", {"tensor": int(cov.values.shape[0]), "map": list(jx.shape)})
    values = _contract_all(cov.values, jx)
    if cov.estimator == "2":
        hess = lin.need_hessian()
        a = np.einsum("pi,apq,qj->aij", jx, hess, jx)
        g = np.einsum("ab,bij->aij", lin.jac, reparam.second(theta_s))
        i = lin.moments.fim_head
        extra = (
            np.einsum("aij,ab,bkl->ijkl", a, i, g)
            + np.einsum("aij,ab,bkl->ijkl", g, i, a)
            + np.einsum("aij,ab,bkl->ijkl", g, i, g)
        )
        values = values + extra / cov.N
    meta = dict(cov.metadata)
    meta["reparam"] = getattr(reparam, "name", type(reparam).__name__)
    return CovTensor(values=values, subset=cov.subset, N=cov.N, estimator=cov.estimator, metadata=meta)
