"""
Exact FIM and its two sample estimators.

  exact        I(theta) = J^T I(h_L) J
  estimator 1  (1/N) sum_i J^T (t_i - eta)(t_i - eta)^T J
  estimator 2  I(theta) + (eta_a - mean t_a) d2h_L^a      (only the bias term is sampled)

All estimators take a pre-drawn SampleBatch so one batch can feed every
estimator of a comparison.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from fimlab.errors import InputRejected
from fimlab.expfam import MomentSet, moments, sample_batch
from fimlab.network import (
    NetworkSpec,
    ParamSet,
    backprop_factors,
    forward,
    hessian_hL,
    jacobian_hL,
    loglik_hessian,
    resolve_subset,
)
from fimlab.rng import stream
from fimlab import settings

log = logging.getLogger(__name__)


class Provenance(str, Enum):
    EXACT = "exact"
    ESTIMATOR1 = "estimator1"
    ESTIMATOR2 = "estimator2"
    COMBINED = "combined"


@dataclass(frozen=True)
class FimMatrix:
    values: np.ndarray
    subset: np.ndarray
    provenance: Provenance
    alpha: Optional[float] = None

    @property
    def label(self) -> str:
        if self.provenance == Provenance.COMBINED:
            return f"combined({self.alpha:g})"
        return self.provenance.value


@dataclass(frozen=True)
class SampleBatch:
    t_samples: np.ndarray
    seed: int = 0
    trial: int = 0

    def __post_init__(self) -> None:
        t = np.asarray(self.t_samples, dtype=float)
        if t.ndim == 1:
            t = t.reshape(-1, 1)
        if t.ndim != 2 or t.shape[0] < 1:
            raise InputRejected("invalid_config", "a sample batch needs N >= 1 rows", {"shape": list(t.shape)})
        object.__setattr__(self, "t_samples", t)

    @property
    def N(self) -> int:
        return int(self.t_samples.shape[0])

    @property
    def mean_t(self) -> np.ndarray:
        return self.t_samples.mean(axis=0)

    def residual_second_moment(self, eta: np.ndarray) -> np.ndarray:
        """(1/N) sum (t_i - eta)(t_i - eta)^T."""
        r = self.t_samples - eta
        return (r.T @ r) / self.N


@dataclass(frozen=True)
class Linearization:
    """h_L, head moments, Jacobian and (optionally) Hessian of h_L at one (theta, x), over a subset."""

    spec: NetworkSpec
    params: ParamSet
    x: np.ndarray
    subset: np.ndarray
    h_out: np.ndarray
    moments: MomentSet
    jac: np.ndarray
    hess: Optional[np.ndarray] = None

    @classmethod
    def build(cls, spec: NetworkSpec, params: ParamSet, x, subset=None, with_hessian: bool = True) -> "Linearization":
        idx = resolve_subset(spec, subset, cap=settings.FIMLAB_MAX_PARAMS)
        trace = forward(spec, params, x)
        ms = moments(spec.family, trace.h_out)
        jac = jacobian_hL(spec, params, x, idx, trace=trace)
        hess = hessian_hL(spec, params, x, idx, trace=trace) if with_hessian else None
        return cls(spec=spec, params=params, x=trace.h[0], subset=idx, h_out=trace.h_out, moments=ms, jac=jac, hess=hess)

    def need_hessian(self) -> np.ndarray:
        if self.hess is None:
            raise InputRejected("invalid_config", "this linearization was built without the Hessian of h_L", {})
        return self.hess

    def check_batch(self, batch: SampleBatch) -> None:
        if batch.t_samples.shape[1] != self.moments.eta.size:
            raise InputRejected(
                "dimension_mismatch",
                "batch statistics do not match the head dimension",
                {"expected": int(self.moments.eta.size), "got": int(batch.t_samples.shape[1])},
            )


def _pullback(jac: np.ndarray, metric: np.ndarray) -> np.ndarray:
    out = jac.T @ metric @ jac
    return 0.5 * (out + out.T)


def _check_alpha(alpha: float) -> float:
    a = float(alpha)
    if not 0.0 <= a <= 1.0:
        raise InputRejected("alpha_out_of_range", "alpha must lie in [0, 1]", {"alpha": a})
    return a


def draw_batch(spec: NetworkSpec, params: ParamSet, x, n: int, seed: int, trial: int = 0) -> SampleBatch:
    h_out = forward(spec, params, x).h_out
    t = sample_batch(spec.family, h_out, n, stream(seed, trial))
    return SampleBatch(t_samples=t, seed=int(seed), trial=int(trial))


def exact_fim_from(lin: Linearization) -> FimMatrix:
    return FimMatrix(values=_pullback(lin.jac, lin.moments.fim_head), subset=lin.subset, provenance=Provenance.EXACT)


def estimate_fim1_from(lin: Linearization, batch: SampleBatch) -> FimMatrix:
    lin.check_batch(batch)
    s = batch.residual_second_moment(lin.moments.eta)
    return FimMatrix(values=_pullback(lin.jac, s), subset=lin.subset, provenance=Provenance.ESTIMATOR1)


def estimate_fim2_from(lin: Linearization, batch: SampleBatch) -> FimMatrix:
    lin.check_batch(batch)
    bias = np.einsum("a,apq->pq", lin.moments.eta - batch.mean_t, lin.need_hessian())
    values = exact_fim_from(lin).values + 0.5 * (bias + bias.T)
    return FimMatrix(values=values, subset=lin.subset, provenance=Provenance.ESTIMATOR2)


def estimate_fim_combined_from(alpha: float, lin: Linearization, batch: SampleBatch) -> FimMatrix:
    a = _check_alpha(alpha)
    if a == 1.0:
        values = estimate_fim1_from(lin, batch).values
    elif a == 0.0:
        values = estimate_fim2_from(lin, batch).values
    else:
        values = a * estimate_fim1_from(lin, batch).values + (1.0 - a) * estimate_fim2_from(lin, batch).values
    return FimMatrix(values=values, subset=lin.subset, provenance=Provenance.COMBINED, alpha=a)


def exact_fim(spec: NetworkSpec, params: ParamSet, x, subset=None) -> FimMatrix:
    return exact_fim_from(Linearization.build(spec, params, x, subset, with_hessian=False))


def estimate_fim1(spec: NetworkSpec, params: ParamSet, x, batch: SampleBatch, subset=None) -> FimMatrix:
    return estimate_fim1_from(Linearization.build(spec, params, x, subset, with_hessian=False), batch)


def estimate_fim2(spec: NetworkSpec, params: ParamSet, x, batch: SampleBatch, subset=None) -> FimMatrix:
    return estimate_fim2_from(Linearization.build(spec, params, x, subset), batch)


def estimate_fim_combined(alpha: float, spec: NetworkSpec, params: ParamSet, x, batch: SampleBatch, subset=None) -> FimMatrix:
    _check_alpha(alpha)
    return estimate_fim_combined_from(alpha, Linearization.build(spec, params, x, subset), batch)


def estimate_from(which: str, lin: Linearization, batch: SampleBatch, alpha: float = 0.5) -> FimMatrix:
    """Dispatch on the estimator name used by configs: "1", "2" or "combined"."""
    if which == "1":
        return estimate_fim1_from(lin, batch)
    if which == "2":
        return estimate_fim2_from(lin, batch)
    if which == "combined":
        return estimate_fim_combined_from(alpha, lin, batch)
    raise InputRejected("invalid_config", f"unknown estimator {which!r}", {"estimator": which, "known": ["1", "2", "combined"]})


def backprop_metric(spec: NetworkSpec, params: ParamSet, x, batch: SampleBatch, l: int) -> np.ndarray:
    """B_l^T [(1/N) sum (t_i - eta)(t_i - eta)^T] B_l, the estimator-1 metric pulled back to layer l."""
    if not 0 <= l <= spec.depth:
        raise InputRejected("subset_out_of_range", "layer out of range", {"layer": l, "L": spec.depth})
    trace = forward(spec, params, x)
    bp = backprop_factors(spec, params, trace)
    eta = moments(spec.family, trace.h_out).eta
    return _pullback(bp.B[l], batch.residual_second_moment(eta))


def empirical_gap(
    spec: NetworkSpec, params: ParamSet, x, t_target, batch: SampleBatch, subset=None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gap between the empirical Fisher of one observed label and the two estimators:
      dI1 = g g^T - I1,   g = J^T (t_target - eta)
      dI2 = -d2 loglik(t_target) - I2
    """
    lin = Linearization.build(spec, params, x, subset)
    t_target = np.asarray(t_target, dtype=float).reshape(-1)
    g = lin.jac.T @ (t_target - lin.moments.eta)
    d1 = np.outer(g, g) - estimate_fim1_from(lin, batch).values
    d2 = -loglik_hessian(spec, params, x, t_target, lin.subset) - estimate_fim2_from(lin, batch).values
    return d1, d2


def reparam_estimators(fim_est: FimMatrix, reparam, lin: Linearization, batch: Optional[SampleBatch] = None) -> FimMatrix:
    """
    Express an estimate in xi coordinates.

    Every kind is pulled back by dtheta/dxi. Estimator 2 also picks up
    (eta_a - mean t_a) J^a_b d2theta_b/dxi dxi^T, since the Hessian of the
    log-likelihood is not a tensor; the combined estimator carries it with
    weight (1 - alpha).
    """
    if fim_est.subset.size != lin.subset.size or np.any(fim_est.subset != lin.subset):
        raise InputRejected("dimension_mismatch", "estimate and linearization cover different subsets", {})
    theta_s = lin.params.flat()[lin.subset]
    jx = reparam.jacobian(theta_s)
    if jx.shape != (lin.subset.size, lin.subset.size):
        raise InputRejected("dimension_mismatch", "reparametrization dimension differs from the subset size", {"subset": int(lin.subset.size), "map": list(jx.shape)})
    values = jx.T @ fim_est.values @ jx

    weight = {Provenance.ESTIMATOR2: 1.0, Provenance.COMBINED: 1.0 - (fim_est.alpha or 0.0)}.get(fim_est.provenance, 0.0)
    if weight != 0.0:
        if batch is None:
            raise InputRejected("invalid_config", "estimator 2 in new coordinates needs the batch it was computed from", {})
        second = reparam.second(theta_s)
        corr = np.einsum("a,ab,bij->ij", lin.moments.eta - batch.mean_t, lin.jac, second)
        values = values + weight * corr
    values = 0.5 * (values + values.T)
    return FimMatrix(values=values, subset=fim_est.subset, provenance=fim_est.provenance, alpha=fim_est.alpha)


def average_over_inputs(spec: NetworkSpec, params: ParamSet, xs: Sequence, subset=None) -> FimMatrix:
    """Exact FIM averaged over M inputs."""
    if len(xs) == 0:
        raise InputRejected("invalid_config", "at least one input is required", {})
    mats = [exact_fim(spec, params, x, subset) for x in xs]
    values = np.mean(np.stack([m.values for m in mats]), axis=0)
    return FimMatrix(values=values, subset=mats[0].subset, provenance=Provenance.EXACT)
