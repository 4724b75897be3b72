"""
fimlab 命令行入口。

每个子命令都是库函数的薄封装：读取网络配置 JSON，写出 CSV/JSON 结果，最后写 manifest.json。
错误以一行 JSON 写到 stderr，退出码：1 = 输入/配置错误，2 = 数值失败（出现非有限值）。
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from fimlab import __version__
from fimlab.errors import FimlabError, InputRejected, NumericalFailure, Unsupported
from fimlab.expfam import FamilyKind, FamilyModel, log_partition, moments, natural_from_mean
from fimlab.export import write_cov_binary, write_csv, write_json, write_matrix_csv, write_tensor_csv
from fimlab.fim import (
    Linearization,
    backprop_metric,
    draw_batch,
    empirical_gap,
    estimate_fim1_from,
    estimate_fim2_from,
    estimate_from,
    exact_fim_from,
    reparam_estimators,
)
from fimlab.logging_setup import setup_logging
from fimlab.models import FamilyConfig, MCConfig, NetworkConfig, RunManifest, RunOptions
from fimlab.montecarlo import convergence_sweep, distance_curve, histograms_of, run_trials
from fimlab.network import NetworkSpec, jacobian_norm_report, resolve_subset
from fimlab import settings
from fimlab.reparam import parse_reparam
from fimlab.spectrum import min_eig_bound_from, psd_probability_bound_from, spectrum_report
from fimlab.variance import (
    bound_elementwise,
    bound_frobenius,
    bound_linf,
    cov_combined,
    cov_estimator1,
    cov_estimator2,
    cov_reparam,
    moment_bound_reports,
    var_matrix,
    var_matrix_direct,
)

log = logging.getLogger(__name__)

DEFAULT_GRIDS = {
    FamilyKind.BERNOULLI: [round(0.05 * k, 2) for k in range(1, 20)],
    FamilyKind.NORMAL: [float(v) for v in range(-3, 4)],
    FamilyKind.POISSON: [0.5 * k for k in range(1, 21)],
}


# -----------------------------
# config / subset parsing
# -----------------------------
def parse_subset(spec: NetworkSpec, text: Optional[str]) -> np.ndarray:
    """Comma-separated tokens: "W<l>" or "layer<l>" (whole layer), "a-b" (inclusive range), "i"."""
    if text is None or not str(text).strip():
        return resolve_subset(spec, None)
    out: List[int] = []
    for raw in str(text).split(","):
        tok = raw.strip()
        if not tok:
            continue
        low = tok.lower()
        try:
            if low.startswith("layer") or low.startswith("w"):
                layer = int(low[5:] if low.startswith("layer") else low[1:])
                out.extend(int(i) for i in spec.layer_indices(layer))
            elif "-" in tok:
                a, b = tok.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(tok))
        except ValueError:
            raise InputRejected("subset_out_of_range", f"cannot parse subset token {tok!r}", {"token": tok})
    return resolve_subset(spec, out)


def load_network_config(path: str, options: RunOptions, p: Optional[Sequence[float]] = None) -> NetworkConfig:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InputRejected("invalid_config", f"cannot read config: {e}", {"path": str(path)})
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as e:
        raise InputRejected("invalid_json", f"config is not valid JSON: {e.msg}", {"line": e.lineno, "column": e.colno})
    cfg = _validate(NetworkConfig, obj)
    if options.family:
        dim = options.dim
        if dim is None and options.family.strip().lower() != FamilyKind.GAUSSIAN2.value:
            dim = cfg.layers[-1]
        cfg = cfg.model_copy(update={"family": FamilyConfig(family=options.family, dim=dim)})
    if p is not None:
        cfg = cfg.model_copy(update={"p": [float(v) for v in p]})
    return cfg


def _validate(model, obj):
    try:
        return model.model_validate(obj)
    except ValidationError as e:
        errors = [{"loc": [str(v) for v in err["loc"]], "msg": err["msg"]} for err in e.errors()]
        raise InputRejected("invalid_config", "config failed validation", {"errors": errors})


def _mc_config(cfg: NetworkConfig, opt: RunOptions, subset: np.ndarray) -> MCConfig:
    return MCConfig(
        network=cfg,
        estimator=opt.estimator,
        alpha=opt.alpha,
        N=opt.samples,
        R=opt.trials,
        seed=opt.seed,
        subset=[int(i) for i in subset],
        eps=opt.eps,
    )


def _write_matrix(out: Path, stem: str, values: np.ndarray, subset, opt: RunOptions) -> str:
    if opt.format == "json":
        name = f"{stem}.json"
        write_json(out / name, {"subset": [int(s) for s in subset], "values": values})
    else:
        name = f"{stem}.csv"
        write_matrix_csv(out / name, values, subset)
    return name


# -----------------------------
# commands
# -----------------------------
def cmd_family_table(cfg: Optional[NetworkConfig], opt: RunOptions, out: Path) -> List[str]:
    if not opt.family:
        raise InputRejected("invalid_config", "family-table needs --family", {})
    # dim 2 is valid for every kind; only the kind is needed here
    kind = FamilyModel.from_config(opt.family, 2).kind
    if kind not in DEFAULT_GRIDS:
        raise Unsupported("invalid_config", "the family table covers the scalar families", {"family": kind.value})
    family = FamilyModel(kind=kind, dim_h=1)
    grid = opt.grid if opt.grid else DEFAULT_GRIDS[family.kind]
    rows = []
    for m in grid:
        try:
            h = natural_from_mean(family, [m])
        except InputRejected:
            log.warning("family-table: %s mean %r out of range, skipped", family.kind.value, m)
            rows.append((m, None, None, None, None, None, None, "out_of_range"))
            continue
        ms = moments(family, h)
        d2 = float(ms.fim_head[0, 0])
        k = float(ms.cmom4[0, 0, 0, 0])
        rows.append((float(m), float(h[0]), log_partition(family, h), d2, float(ms.cum4[0, 0, 0, 0]), k, k - d2 * d2, "ok"))
    write_csv(out / "family_table.csv", ["mean_param", "h", "F", "d2F", "d4F", "K", "K_minus_Var2", "status"], rows)
    return ["family_table.csv"]


def cmd_exact(cfg: NetworkConfig, opt: RunOptions, out: Path) -> List[str]:
    spec, params, x = cfg.build()
    lin = Linearization.build(spec, params, x, parse_subset(spec, opt.subset), with_hessian=False)
    fim = exact_fim_from(lin)
    return [_write_matrix(out, "exact", fim.values, fim.subset, opt)]


def cmd_estimate(cfg: NetworkConfig, opt: RunOptions, out: Path) -> List[str]:
    spec, params, x = cfg.build()
    lin = Linearization.build(spec, params, x, parse_subset(spec, opt.subset), with_hessian=opt.estimator != "1")
    batch = draw_batch(spec, params, x, opt.samples, opt.seed)
    est = estimate_from(opt.estimator, lin, batch, opt.alpha)
    if opt.reparam:
        est = reparam_estimators(est, parse_reparam(opt.reparam), lin, batch)
    names = [_write_matrix(out, "estimate", est.values, est.subset, opt)]
    if opt.layer is not None:
        metric = backprop_metric(spec, params, x, batch, opt.layer)
        names.append(_write_matrix(out, f"metric_l{opt.layer}", metric, range(metric.shape[0]), opt))
    return names


def cmd_gap(cfg: NetworkConfig, opt: RunOptions, out: Path) -> List[str]:
    if opt.target is None:
        raise InputRejected("invalid_config", "gap needs --target", {})
    spec, params, x = cfg.build()
    subset = parse_subset(spec, opt.subset)
    batch = draw_batch(spec, params, x, opt.samples, opt.seed)
    d1, d2 = empirical_gap(spec, params, x, opt.target, batch, subset)
    return [_write_matrix(out, "gap1", d1, subset, opt), _write_matrix(out, "gap2", d2, subset, opt)]


def cmd_variance(cfg: NetworkConfig, opt: RunOptions, out: Path) -> List[str]:
    spec, params, x = cfg.build()
    lin = Linearization.build(spec, params, x, parse_subset(spec, opt.subset))
    ms, n = lin.moments, opt.samples
    names: List[str] = []
    meta = {"estimator": opt.estimator, "N": n, "subset": lin.subset.tolist(), "materialized": False}
    reparam = parse_reparam(opt.reparam) if opt.reparam else None
    if reparam is not None and lin.subset.size > settings.FIMLAB_MAX_COV_PARAMS:
        raise InputRejected(
            "cap_exceeded",
            "a coordinate change needs the full covariance tensor",
            {"size": int(lin.subset.size), "cap": settings.FIMLAB_MAX_COV_PARAMS, "required_cap": int(lin.subset.size)},
        )
    if lin.subset.size <= settings.FIMLAB_MAX_COV_PARAMS:
        if opt.estimator == "1":
            cov = cov_estimator1(lin.jac, ms, n, lin.subset)
        elif opt.estimator == "2":
            cov = cov_estimator2(lin.hess, ms, n, lin.subset)
        else:
            cov = cov_combined(opt.alpha, lin.jac, lin.hess, ms, n, lin.subset)
        if reparam is not None:
            cov = cov_reparam(cov, reparam, lin)
        write_tensor_csv(out / "cov.csv", cov)
        write_cov_binary(out / "cov.bin", cov)
        names += ["cov.csv", "cov.bin"]
        var = var_matrix(cov)
        meta.update(cov.metadata)
        meta["materialized"] = True
    else:
        log.info("variance: subset of %d above the tensor cap, writing ijij variances only", lin.subset.size)
        var = var_matrix_direct(opt.estimator, lin.jac, lin.hess, ms, n, opt.alpha)
        if opt.estimator == "combined":
            meta.update({"alpha": opt.alpha, "cross_term_symmetrized": True})
    write_matrix_csv(out / "var.csv", var.values, lin.subset)
    write_json(out / "variance.json", meta)
    return names + ["var.csv", "variance.json"]


def cmd_bounds(cfg: NetworkConfig, opt: RunOptions, out: Path) -> List[str]:
    spec, params, x = cfg.build()
    lin = Linearization.build(spec, params, x, parse_subset(spec, opt.subset))
    ms, n, ps = lin.moments, opt.samples, lin.subset.size
    rows = []
    for which, deriv in (("1", lin.jac), ("2", lin.hess)):
        r = bound_frobenius(which, deriv, ms, n)
        rows.append((r.kind, None, None, None, None, r.lhs, r.rhs, r.slack))
        if ps <= settings.FIMLAB_MAX_COV_PARAMS:
            r = bound_linf(which, deriv, ms, n)
            rows.append((r.kind, None, None, None, None, r.lhs, r.rhs, r.slack))
        for a in range(ps):
            for b in range(ps):
                r = bound_elementwise(which, (a, b, a, b), deriv, ms, n)
                i, j = int(lin.subset[a]), int(lin.subset[b])
                rows.append((r.kind, i, j, i, j, r.lhs, r.rhs, r.slack))
    for r in moment_bound_reports(ms):
        rows.append((r.kind, None, None, None, None, r.lhs, r.rhs, r.slack))
    write_csv(out / "bounds.csv", ["kind", "i", "j", "k", "l", "lhs", "rhs", "slack"], rows)

    layers = range(spec.depth) if opt.layer is None else [opt.layer]
    jrows = []
    for l in layers:
        rep = jacobian_norm_report(spec, params, x, l)
        jrows.append((l, rep.lhs_frobenius, rep.rhs_frobenius, rep.lhs_spectral, rep.rhs_spectral))
    write_csv(out / "jacobian_norms.csv", ["layer", "lhs_frobenius", "rhs_frobenius", "lhs_spectral", "rhs_spectral"], jrows)
    return ["bounds.csv", "jacobian_norms.csv"]


def cmd_spectrum(cfg: NetworkConfig, opt: RunOptions, out: Path) -> List[str]:
    spec, params, x = cfg.build()
    lin = Linearization.build(spec, params, x, parse_subset(spec, opt.subset))
    batch = draw_batch(spec, params, x, opt.samples, opt.seed)
    mats = {"1": estimate_fim1_from(lin, batch).values, "2": estimate_fim2_from(lin, batch).values}
    if opt.estimator == "combined":
        mats["combined"] = estimate_from("combined", lin, batch, opt.alpha).values
    rows, reports = [], {}
    for name, m in mats.items():
        rep = spectrum_report(m, lin.hess if name != "1" else None)
        reports[name] = {"lambda_min": rep.lambda_min, "lambda_max": rep.lambda_max, "is_psd": rep.is_psd}
        rows += [(name, k, float(v)) for k, v in enumerate(rep.eigenvalues)]
    rho = spectrum_report(mats["2"], lin.hess).rho_per_output
    summary = {
        "N": opt.samples,
        "seed": opt.seed,
        "estimators": reports,
        "rho_per_output": rho,
        "psd_probability_bound": psd_probability_bound_from(lin, opt.samples),
        "min_eig_bound": min_eig_bound_from(lin, batch),
    }
    write_csv(out / "eigenvalues.csv", ["estimator", "k", "value"], rows)
    write_json(out / "spectrum.json", summary)
    return ["eigenvalues.csv", "spectrum.json"]


def cmd_convergence(cfg: NetworkConfig, opt: RunOptions, out: Path) -> List[str]:
    spec, _, _ = cfg.build()
    mc = _mc_config(cfg, opt, parse_subset(spec, opt.subset))
    fit = convergence_sweep(mc, opt.n_list)
    curve = distance_curve(mc, opt.n_list)
    rows = [(n, float(e), float(d)) for n, e, d in zip(fit.n_list, fit.mean_errors, curve.mean_distance)]
    write_csv(out / "convergence.csv", ["N", "mean_frobenius_error", "mean_distance_12"], rows)
    write_json(
        out / "convergence.json",
        {
            "seed": opt.seed,
            "R": opt.trials,
            "estimator": opt.estimator,
            "slope": fit.slope,
            "stderr": fit.stderr,
            "intercept": fit.intercept,
            "distance_spearman": curve.spearman,
            "distance_decreasing": curve.decreasing,
        },
    )
    return ["convergence.csv", "convergence.json"]


def cmd_ratios(cfg: NetworkConfig, opt: RunOptions, out: Path) -> List[str]:
    spec, _, _ = cfg.build()
    mc = _mc_config(cfg, opt, parse_subset(spec, opt.subset))
    if mc.R < 2:
        raise InputRejected("invalid_config", "ratios need --trials >= 2", {"R": mc.R})
    summary = run_trials(mc)
    hist = histograms_of(summary)
    ratio_rows = [(kind, float(v)) for kind, vals in summary.bound_ratios.items() for v in vals]
    bin_rows = []
    for kind, (counts, edges) in hist.bins.items():
        bin_rows += [(kind, float(edges[k]), float(edges[k + 1]), int(counts[k])) for k in range(counts.size)]
    write_csv(out / "ratios.csv", ["kind", "ratio"], ratio_rows)
    write_csv(out / "histograms.csv", ["kind", "bin_lo", "bin_hi", "count"], bin_rows)
    write_csv(out / "trials.csv", ["trial", "frobenius_error", "lambda_min", "psd_flag", "distance_12"], summary.trial_rows())
    write_json(out / "summary.json", summary.to_json_dict())
    return ["ratios.csv", "histograms.csv", "trials.csv", "summary.json"]


COMMANDS: Dict[str, Callable[[Optional[NetworkConfig], RunOptions, Path], List[str]]] = {
    "family-table": cmd_family_table,
    "exact": cmd_exact,
    "estimate": cmd_estimate,
    "gap": cmd_gap,
    "variance": cmd_variance,
    "bounds": cmd_bounds,
    "spectrum": cmd_spectrum,
    "convergence": cmd_convergence,
    "ratios": cmd_ratios,
}


def execute(command: str, cfg: Optional[NetworkConfig], opt: RunOptions, out: Path) -> RunManifest:
    if command != "family-table" and cfg is None:
        raise InputRejected("invalid_config", f"{command} needs --config", {})
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    log.info("run %s: seed=%d out=%s", command, opt.seed, out)
    outputs = COMMANDS[command](cfg, opt, out)
    manifest = RunManifest(
        version=__version__,
        command=command,
        config=cfg.model_dump() if cfg is not None else None,
        options=opt.model_dump(),
        seed=opt.seed,
        outputs=outputs,
        wall_clock_seconds=round(time.monotonic() - t0, 6),
    )
    # manifest last: its presence marks a complete run
    write_json(out / "manifest.json", manifest.model_dump())
    return manifest


def rerun(manifest_path: str, out: Path) -> RunManifest:
    try:
        obj = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except OSError as e:
        raise InputRejected("invalid_config", f"cannot read manifest: {e}", {"path": str(manifest_path)})
    except json.JSONDecodeError as e:
        raise InputRejected("invalid_json", f"manifest is not valid JSON: {e.msg}", {"line": e.lineno})
    manifest = _validate(RunManifest, obj)
    if manifest.command not in COMMANDS:
        raise InputRejected("invalid_config", f"unknown command {manifest.command!r}", {"command": manifest.command})
    cfg = _validate(NetworkConfig, manifest.config) if manifest.config is not None else None
    return execute(manifest.command, cfg, _validate(RunOptions, manifest.options), out)


# -----------------------------
# argparse
# -----------------------------
class _Parser(argparse.ArgumentParser):
    """Usage errors go through the same JSON-on-stderr path as every other input error."""

    def error(self, message: str):
        raise InputRejected("usage", message, {"prog": self.prog})


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="network config JSON")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    common.add_argument("--estimator", choices=["1", "2", "combined"], default="1")
    common.add_argument("--alpha", type=float, default=0.5, help="weight of estimator 1 in the combined estimator")
    common.add_argument("--subset", default=None, help='parameter subset, e.g. "W1" or "0-5,9"')
    common.add_argument("--trials", type=int, default=1000, help="Monte Carlo trials R")
    common.add_argument("--samples", type=int, default=10, help="samples per estimate N")
    common.add_argument("--eps", type=_floats, default=[0.1, 0.5], help="Chebyshev eps list, comma separated")
    common.add_argument("--n-list", dest="n_list", type=_ints, default=[10, 100, 1000], help="sample counts for sweeps")
    common.add_argument("--p", type=_floats, default=None, help="pin the head at these mean parameters")
    common.add_argument("--family", default=None, help="override the config family")
    common.add_argument("--dim", type=int, default=None, help="family dimension for --family")
    common.add_argument("--layer", type=int, default=None)
    common.add_argument("--grid", type=_floats, default=None, help="mean-parameter grid for family-table")
    common.add_argument("--target", type=_floats, default=None, help="observed sufficient statistic for gap")
    common.add_argument("--reparam", default=None, help="coordinate change for estimate/variance: identity, exp or scale:C")
    common.add_argument("--format", choices=["csv", "json"], default="csv")

    parser = _Parser(prog="fimlab", description="Fisher information estimators: exact values, variances, bounds.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "family-table": "log-partition, cumulants and K - Var^2 over a mean-parameter grid",
        "exact": "exact FIM J^T I(h_L) J",
        "estimate": "estimator 1, 2 or combined on one seeded batch",
        "gap": "empirical Fisher gap of an observed label against both estimators",
        "variance": "closed-form covariance tensor and element-wise variances",
        "bounds": "Frobenius, element-wise, L-infinity, moment and Jacobian norm bounds",
        "spectrum": "eigenvalues, p.s.d. probability bound and minimum-eigenvalue bound",
        "convergence": "error and estimator-distance curves over --n-list",
        "ratios": "Monte Carlo trials, bound ratios and histograms",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    rp = sub.add_parser("rerun", help="replay a run manifest")
    rp.add_argument("--manifest", required=True)
    rp.add_argument("--out", default="out")
    return parser


def _options(args: argparse.Namespace) -> RunOptions:
    return _validate(
        RunOptions,
        {
            "seed": args.seed,
            "estimator": args.estimator,
            "alpha": args.alpha,
            "trials": args.trials,
            "samples": args.samples,
            "subset": args.subset,
            "eps": args.eps,
            "n_list": args.n_list,
            "layer": args.layer,
            "grid": args.grid,
            "family": args.family,
            "dim": args.dim,
            "target": args.target,
            "reparam": args.reparam,
            "format": args.format,
        },
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging("fimlab")
    command = "fimlab"
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if args.command == "rerun":
            rerun(args.manifest, Path(args.out))
            return 0
        opt = _options(args)
        cfg = load_network_config(args.config, opt, args.p) if args.config else None
        execute(args.command, cfg, opt, Path(args.out))
        return 0
    except FimlabError as e:
        return _report(command, e)
    except np.linalg.LinAlgError as e:
        return _report(command, NumericalFailure("linalg_failure", str(e), {"exception": type(e).__name__}))
    except (ValueError, FloatingPointError, OverflowError) as e:
        log.exception("%s: numerical error escaped the command", command)
        return _report(command, NumericalFailure("non_finite", str(e), {"exception": type(e).__name__}))


def _report(command: str, e: FimlabError) -> int:
    log.error("%s failed: %s (%s)", command, e.message, e.code)
    sys.stderr.write(json.dumps(e.to_dict(), default=str) + "\n")
    return e.exit_code
