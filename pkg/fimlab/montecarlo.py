"""
Monte Carlo harness: R independent batches of N samples, every estimator fed
from the same batch, aggregated against the closed forms.

Trial r draws its batch from stream(seed, r), so a summary depends only on the
config, never on how trials were scheduled across threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from fimlab import settings
from fimlab.errors import InputRejected, NumericalFailure
from fimlab.expfam import log_partition, moments, sample_batch
from fimlab.fim import (
    Linearization,
    SampleBatch,
    estimate_fim1_from,
    estimate_fim2_from,
    estimate_fim_combined_from,
    exact_fim_from,
)
from fimlab.models import MCConfig
from fimlab.network import NetworkSpec, ParamSet, forward, jacobian_hL
from fimlab.rng import stream
from fimlab.spectrum import min_eig_bound_from
from fimlab.variance import (
    VarMatrix,
    bound_frobenius,
    bound_linf,
    chebyshev_radius,
    elementwise_var_bounds,
    var_matrix_direct,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrialSummary:
    exact: np.ndarray
    mean_estimate: np.ndarray
    empirical_cov: Optional[np.ndarray]
    empirical_var: Optional[np.ndarray]
    closed_form_var: np.ndarray
    frobenius_errors: np.ndarray
    lambda_min: np.ndarray
    psd_flags: np.ndarray
    distance_12: np.ndarray
    lambda_min_2: np.ndarray
    min_eig_bounds: np.ndarray
    bound_ratios: Dict[str, np.ndarray]
    chebyshev: Dict[float, Tuple[float, float]]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def psd_frequency(self) -> float:
        return float(np.mean(self.psd_flags))

    def bias_within_se(self, sigma: Optional[float] = None) -> np.ndarray:
        """Element-wise |mean - exact| <= sigma * sqrt(closed_form_var / R), sigma from FIMLAB_SE_SIGMA by default."""
        sigma = settings.FIMLAB_SE_SIGMA if sigma is None else float(sigma)
        se = np.sqrt(np.clip(self.closed_form_var, 0.0, None) / self.frobenius_errors.size)
        # zero-variance entries only get roundoff slack
        slack = 1e-12 * np.maximum(np.abs(self.exact), 1.0)
        return np.abs(self.mean_estimate - self.exact) <= sigma * se + slack

    def trial_rows(self) -> List[Tuple[int, float, float, int, float]]:
        return [
            (r, float(self.frobenius_errors[r]), float(self.lambda_min[r]), int(self.psd_flags[r]), float(self.distance_12[r]))
            for r in range(self.frobenius_errors.size)
        ]

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "metadata": self.metadata,
            "exact": self.exact.tolist(),
            "mean_estimate": self.mean_estimate.tolist(),
            "empirical_var": None if self.empirical_var is None else self.empirical_var.tolist(),
            "closed_form_var": self.closed_form_var.tolist(),
            "se_sigma": settings.FIMLAB_SE_SIGMA,
            "bias_within_se": bool(np.all(self.bias_within_se())),
            "psd_frequency": self.psd_frequency,
            "mean_frobenius_error": float(np.mean(self.frobenius_errors)),
            "mean_distance_12": float(np.mean(self.distance_12)),
            "min_eig_bound_violations": int(np.sum(self.lambda_min_2 < self.min_eig_bounds - 1e-10)),
            "chebyshev": {f"{e:g}": {"radius": r, "coverage": c} for e, (r, c) in self.chebyshev.items()},
            "bound_ratio_max": {k: (float(np.max(v)) if v.size else None) for k, v in self.bound_ratios.items()},
            "bound_ratio_median": {k: (float(np.median(v)) if v.size else None) for k, v in self.bound_ratios.items()},
        }


@dataclass(frozen=True)
class ConvergenceFit:
    n_list: List[int]
    mean_errors: np.ndarray
    slope: Optional[float]
    stderr: Optional[float]
    intercept: Optional[float]


@dataclass(frozen=True)
class DistanceCurve:
    n_list: List[int]
    mean_distance: np.ndarray
    spearman: Optional[float]

    @property
    def decreasing(self) -> Optional[bool]:
        return None if self.spearman is None else bool(self.spearman < 0)


@dataclass(frozen=True)
class RatioHistograms:
    ratios: Dict[str, np.ndarray]
    bins: Dict[str, Tuple[np.ndarray, np.ndarray]]

    def medians(self) -> Dict[str, Optional[float]]:
        return {k: (float(np.median(v)) if v.size else None) for k, v in self.ratios.items()}


def _prepare(config: MCConfig) -> Tuple[Linearization, np.ndarray]:
    spec, params, x, subset = config.build()
    for e in config.eps:
        if not 0.0 < e < 1.0:
            raise InputRejected("eps_out_of_range", "eps must lie in (0, 1)", {"eps": e})
    if config.estimator == "combined" and not 0.0 <= config.alpha <= 1.0:
        raise InputRejected("alpha_out_of_range", "alpha must lie in [0, 1]", {"alpha": config.alpha})
    lin = Linearization.build(spec, params, x, subset)
    exact = exact_fim_from(lin).values
    if not np.all(np.isfinite(exact)):
        raise NumericalFailure("non_finite", "exact FIM has non-finite entries", {})
    return lin, exact


def _batch(lin: Linearization, n: int, seed: int, trial: int) -> SampleBatch:
    t = sample_batch(lin.spec.family, lin.h_out, n, stream(seed, trial))
    return SampleBatch(t_samples=t, seed=seed, trial=trial)


def _chosen(config: MCConfig, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    if config.estimator == "1":
        return f1
    if config.estimator == "2":
        return f2
    a = float(config.alpha)
    if a == 1.0:
        return f1
    if a == 0.0:
        return f2
    return a * f1 + (1.0 - a) * f2


def _parallel(fn: Callable[[int], Any], count: int, threads: Optional[int]) -> List[Any]:
    workers = max(1, int(threads or settings.threads()))
    if workers == 1 or count == 1:
        return [fn(r) for r in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(count)))


def _sample_var(stack: np.ndarray) -> np.ndarray:
    # entries that never move across trials have exactly zero variance
    var = np.var(stack, axis=0, ddof=1)
    return np.where(np.ptp(stack, axis=0) == 0.0, 0.0, var)


def _ratios(emp: np.ndarray, bound) -> np.ndarray:
    # 0/0 entries are dropped, 0/b counts as 0
    emp = np.asarray(emp, dtype=float)
    bnd = np.broadcast_to(np.asarray(bound, dtype=float), emp.shape)
    out = []
    for e, b in zip(emp.reshape(-1), bnd.reshape(-1)):
        if b == 0.0:
            if e == 0.0:
                continue
            out.append(float("inf"))
        else:
            out.append(0.0 if e == 0.0 else e / b)
    return np.array(out)


def _bound_ratios(lin: Linearization, N: int, var1: np.ndarray, var2: np.ndarray) -> Dict[str, np.ndarray]:
    ms, jac, hess = lin.moments, lin.jac, lin.need_hessian()
    out = {
        "frobenius_1": _ratios(var1, bound_frobenius("1", jac, ms, N).rhs),
        "frobenius_2": _ratios(var2, bound_frobenius("2", hess, ms, N).rhs),
        "elementwise_1": _ratios(var1, elementwise_var_bounds("1", jac, ms, N)),
        "elementwise_2": _ratios(var2, elementwise_var_bounds("2", hess, ms, N)),
    }
    if lin.subset.size <= settings.FIMLAB_MAX_COV_PARAMS:
        out["linf_1"] = _ratios(var1, bound_linf("1", jac, ms, N).rhs)
        out["linf_2"] = _ratios(var2, bound_linf("2", hess, ms, N).rhs)
    else:
        log.info("skipping L-infinity ratios: subset of %d exceeds the tensor cap", lin.subset.size)
    return out


def run_trials(config: MCConfig, threads: Optional[int] = None) -> TrialSummary:
    lin, exact = _prepare(config)
    N, R, seed = int(config.N), int(config.R), int(config.seed)
    log.info("run_trials: seed=%d R=%d N=%d estimator=%s P_s=%d", seed, R, N, config.estimator, lin.subset.size)

    def one(r: int):
        batch = _batch(lin, N, seed, r)
        f1 = estimate_fim1_from(lin, batch).values
        f2 = estimate_fim2_from(lin, batch).values
        est = _chosen(config, f1, f2)
        if not np.all(np.isfinite(est)):
            raise NumericalFailure("non_finite", "an estimate has non-finite entries", {"seed": seed, "trial": r})
        ev = np.linalg.eigvalsh(est)
        lam2 = float(np.linalg.eigvalsh(f2)[0])
        return f1, f2, est, float(ev[0]), float(ev[-1]), lam2, min_eig_bound_from(lin, batch)

    results = _parallel(one, R, threads)
    f1s = np.stack([res[0] for res in results])
    f2s = np.stack([res[1] for res in results])
    ests = np.stack([res[2] for res in results])
    lam = np.array([res[3] for res in results])
    lam_max = np.array([res[4] for res in results])
    lam2 = np.array([res[5] for res in results])
    meb = np.array([res[6] for res in results])

    frob = np.sqrt(np.sum((ests - exact) ** 2, axis=(1, 2)))
    dist = np.sqrt(np.sum((f1s - f2s) ** 2, axis=(1, 2)))
    psd = (lam >= -1e-10 * np.maximum(1.0, np.abs(lam_max))).astype(int)

    mean_est = ests.mean(axis=0)
    emp_cov = emp_var = None
    var1 = var2 = None
    if R >= 2:
        centered = ests - mean_est
        emp_var = _sample_var(ests)
        if lin.subset.size <= settings.FIMLAB_MAX_COV_PARAMS:
            emp_cov = np.einsum("rij,rkl->ijkl", centered, centered) / (R - 1)
        var1 = _sample_var(f1s)
        var2 = _sample_var(f2s)

    closed = var_matrix_direct(config.estimator, lin.jac, lin.hess, lin.moments, N, config.alpha)
    single = VarMatrix(values=closed.values, N=N, estimator=config.estimator)
    cheb = {}
    for e in config.eps:
        radius = chebyshev_radius(single, e)
        cheb[float(e)] = (radius, float(np.mean(frob <= radius)))

    ratios = _bound_ratios(lin, N, var1, var2) if var1 is not None else {}
    meta = {
        "seed": seed,
        "R": R,
        "N": N,
        "estimator": config.estimator,
        "alpha": float(config.alpha),
        "subset": lin.subset.tolist(),
        "stream": "philox(seed, trial)",
    }
    return TrialSummary(
        exact=exact,
        mean_estimate=mean_est,
        empirical_cov=emp_cov,
        empirical_var=emp_var,
        closed_form_var=closed.values,
        frobenius_errors=frob,
        lambda_min=lam,
        psd_flags=psd,
        distance_12=dist,
        lambda_min_2=lam2,
        min_eig_bounds=meb,
        bound_ratios=ratios,
        chebyshev=cheb,
        metadata=meta,
    )


def _errors_at(lin: Linearization, exact: np.ndarray, config: MCConfig, n: int, threads: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    seed = int(config.seed)

    def one(r: int):
        batch = _batch(lin, n, seed, r)
        f1 = estimate_fim1_from(lin, batch).values
        f2 = estimate_fim2_from(lin, batch).values
        est = _chosen(config, f1, f2)
        return float(np.linalg.norm(est - exact)), float(np.linalg.norm(f1 - f2))

    res = _parallel(one, int(config.R), threads)
    return np.array([r[0] for r in res]), np.array([r[1] for r in res])


def _check_n_list(n_list: Sequence[int]) -> List[int]:
    ns = [int(n) for n in n_list]
    if len(ns) < 2 or any(n < 1 for n in ns):
        raise InputRejected("invalid_config", "need at least two positive sample counts", {"n_list": ns})
    return ns


def convergence_sweep(config: MCConfig, n_list: Sequence[int], threads: Optional[int] = None) -> ConvergenceFit:
    """Mean ||I_hat - I||_F per N and the least-squares slope of log error against log N."""
    ns = _check_n_list(n_list)
    lin, exact = _prepare(config)
    log.info("convergence_sweep: seed=%d R=%d n_list=%s", config.seed, config.R, ns)
    means = np.array([float(np.mean(_errors_at(lin, exact, config, n, threads)[0])) for n in ns])
    if np.any(means <= 0.0):
        log.info("convergence_sweep: zero error at some N, slope undefined")
        return ConvergenceFit(n_list=ns, mean_errors=means, slope=None, stderr=None, intercept=None)
    fit = stats.linregress(np.log(ns), np.log(means))
    return ConvergenceFit(n_list=ns, mean_errors=means, slope=float(fit.slope), stderr=float(fit.stderr), intercept=float(fit.intercept))


def distance_curve(config: MCConfig, n_list: Sequence[int], threads: Optional[int] = None) -> DistanceCurve:
    ns = _check_n_list(n_list)
    lin, exact = _prepare(config)
    log.info("distance_curve: seed=%d R=%d n_list=%s", config.seed, config.R, ns)
    means = np.array([float(np.mean(_errors_at(lin, exact, config, n, threads)[1])) for n in ns])
    if np.all(means == means[0]):
        return DistanceCurve(n_list=ns, mean_distance=means, spearman=None)
    rho = stats.spearmanr(ns, means).statistic
    return DistanceCurve(n_list=ns, mean_distance=means, spearman=float(rho))


def ratio_histograms(config: MCConfig, bins: int = 20, threads: Optional[int] = None) -> RatioHistograms:
    """Empirical-variance / bound ratios per parameter entry for every variance bound, with histogram bins."""
    if config.R < 2:
        raise InputRejected("invalid_config", "ratio histograms need R >= 2", {"R": config.R})
    return histograms_of(run_trials(config, threads), bins)


def histograms_of(summary: TrialSummary, bins: int = 20) -> RatioHistograms:
    out_bins = {}
    for kind, vals in summary.bound_ratios.items():
        finite = vals[np.isfinite(vals)]
        top = max(1.0, float(np.max(finite))) if finite.size else 1.0
        out_bins[kind] = np.histogram(finite, bins=bins, range=(0.0, top))
    return RatioHistograms(ratios=summary.bound_ratios, bins=out_bins)


def fit_to_target(
    spec: NetworkSpec,
    params: ParamSet,
    x,
    t_target,
    tol: float = 1e-3,
    lr: float = 0.5,
    max_iter: int = 20000,
) -> ParamSet:
    """
    Full-batch gradient descent on -log p(t_target | x, theta) until
    ||t_target - eta|| < tol; the "trained network" surrogate. The target must
    be an interior mean (e.g. 0.9 for a bernoulli head, not 1).
    """
    t = np.asarray(t_target, dtype=float).reshape(-1)
    theta = params.flat()
    family = spec.family

    def nll(th: np.ndarray) -> Tuple[float, np.ndarray]:
        h = forward(spec, ParamSet.from_flat(spec, th), x).h_out
        return log_partition(family, h) - float(t @ h), moments(family, h).eta

    loss, eta = nll(theta)
    step = float(lr)
    for it in range(int(max_iter)):
        if np.linalg.norm(t - eta) < tol:
            log.info("fit_to_target converged: iterations=%d residual=%.3e", it, np.linalg.norm(t - eta))
            return ParamSet.from_flat(spec, theta)
        grad = jacobian_hL(spec, ParamSet.from_flat(spec, theta), x).T @ (t - eta)
        # backtracking: halve until the loss does not increase
        while step > 1e-12:
            cand = theta + step * grad
            c_loss, c_eta = nll(cand)
            if np.isfinite(c_loss) and c_loss <= loss:
                theta, loss, eta = cand, c_loss, c_eta
                step = min(2.0 * step, float(lr))
                break
            step *= 0.5
        else:
            break
    raise NumericalFailure("non_finite", "fit_to_target did not reach the target residual", {"residual": float(np.linalg.norm(t - eta)), "tol": tol})


def trained_vs_random(config: MCConfig, t_target, threads: Optional[int] = None) -> Dict[str, Dict[str, Any]]:
    """
    Median bound ratios of the configured (random) network and of the same
    network fitted to t_target. trained_looser[kind] is True when the fitted
    network's median ratio is the smaller one, None when either side has no
    finite ratios. No direction is enforced: it depends on the net and target.
    """
    spec, params, x, _ = config.build()
    fitted = fit_to_target(spec, params, x, t_target)
    trained_net = config.network.model_copy(
        update={"weights": [w.tolist() for w in fitted.weights], "p": None, "x": x.tolist()}
    )
    trained = config.model_copy(update={"network": trained_net})
    random_med = ratio_histograms(config, threads=threads).medians()
    trained_med = ratio_histograms(trained, threads=threads).medians()
    looser = {
        k: None if random_med[k] is None or trained_med.get(k) is None else bool(trained_med[k] < random_med[k])
        for k in random_med
    }
    log.info("trained_vs_random: trained median below random for %s", sorted(k for k, v in looser.items() if v))
    return {"random": random_med, "trained": trained_med, "trained_looser": looser}
