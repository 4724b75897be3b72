import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import eigvalsh

from fimlab.errors import InputRejected, NumericalFailure
from fimlab.fim import Linearization, SampleBatch, exact_fim_from
from fimlab.network import NetworkSpec, ParamSet

log = logging.getLogger(__name__)

# lambda_min(I(theta)) below this makes the p.s.d. probability bound uninformative
LAMBDA_MIN_FLOOR = 1e-12

# absolute tolerance on max |A - A^T|
SYMMETRY_ATOL = 1e-9


@dataclass(frozen=True)
class SpectrumReport:
    eigenvalues: np.ndarray
    lambda_min: float
    lambda_max: float
    is_psd: bool
    rho_per_output: Optional[np.ndarray] = None

    @property
    def tol(self) -> float:
        return 1e-10 * max(1.0, abs(self.lambda_max))


def spectral_radii(hess: np.ndarray) -> np.ndarray:
    """rho(d2h_L^a) for every output a, by dense symmetric eigensolve."""
    return np.array([float(np.max(np.abs(eigvalsh(h)))) if h.size else 0.0 for h in hess])


def spectrum_report(matrix, hess: Optional[np.ndarray] = None) -> SpectrumReport:
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise InputRejected("not_symmetric", "matrix is not square", {"shape": list(a.shape)})
    if not np.all(np.isfinite(a)):
        raise NumericalFailure("non_finite", "matrix has non-finite entries", {"shape": list(a.shape)})
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_ATOL:
        raise InputRejected("not_symmetric", "matrix is not symmetric", {"max_asymmetry": asym})
    ev = eigvalsh(0.5 * (a + a.T))
    lo, hi = float(ev[0]), float(ev[-1])
    rho = spectral_radii(hess) if hess is not None else None
    return SpectrumReport(
        eigenvalues=ev,
        lambda_min=lo,
        lambda_max=hi,
        is_psd=bool(lo >= -1e-10 * max(1.0, abs(hi))),
        rho_per_output=rho,
    )


def psd_probability_bound_from(lin: Linearization, N: int) -> Optional[float]:
    """
    Lower bound on P(I2 is p.s.d.):
        1 - n_L ||rho||^2 lambda_max(I(h_L)) / (N lambda_min(I(theta))^2)
    None when lambda_min(I(theta)) is numerically zero. May be negative.
    """
    n = int(N)
    if n < 1:
        raise InputRejected("invalid_config", "N must be positive", {"N": N})
    rho = spectral_radii(lin.need_hessian())
    if not np.any(rho):
        return 1.0
    lam_min = float(eigvalsh(exact_fim_from(lin).values)[0])
    if lam_min < LAMBDA_MIN_FLOOR:
        log.info("psd bound uninformative: lambda_min(I(theta))=%.3e", lam_min)
        return None
    lam_head = float(eigvalsh(lin.moments.fim_head)[-1])
    n_out = lin.moments.eta.size
    return float(1.0 - n_out * float(rho @ rho) * lam_head / (n * lam_min * lam_min))


def psd_probability_bound(spec: NetworkSpec, params: ParamSet, x, N: int, subset=None) -> Optional[float]:
    return psd_probability_bound_from(Linearization.build(spec, params, x, subset), N)


def min_eig_bound_from(lin: Linearization, batch: SampleBatch) -> float:
    """-sum_a rho(d2h_L^a) |eta_a - mean t_a|, a certified lower bound on lambda_min(I2)."""
    lin.check_batch(batch)
    rho = spectral_radii(lin.need_hessian())
    return float(-np.sum(rho * np.abs(lin.moments.eta - batch.mean_t)))


def min_eig_bound(spec: NetworkSpec, params: ParamSet, x, batch: SampleBatch, subset=None) -> float:
    return min_eig_bound_from(Linearization.build(spec, params, x, subset), batch)
