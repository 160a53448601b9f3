"""Experiment harness and command line interface.

Subcommands: ``run`` (replicated reconstruction experiment over exposure
times), ``rates`` (convergence-rate study against the effective noise level),
``errn`` (decay study of the effective noise level), and ``check``
(adjoint/derivative/gradient invariant suite).  Configuration comes from a
YAML file; ``--seed`` and ``--out`` override/locate everything else.  Outputs
are CSV files plus a plain-text manifest, all carrying the config hash, and
are byte-identical for identical config and seed.
"""

import argparse
import copy
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .core import (
    Grid,
    IdentityGram,
    InvalidInputError,
    Signal,
    SobolevGram,
    QuadraticPenalty,
    check_adjoint,
    check_derivative,
)
from .misfit import KLMisfit, L2Misfit, OffsetParam, PearsonMisfit
from .poisson import Binning, bin_adjoint, bin_apply, replicate_seed, sample_counts
from .problems import (
    DeconvolutionModel,
    PhaseRetrievalModel,
    make_cell_phantom,
    sobolev_symbol,
)
from .rates import fit_rate
from .solver import NewtonConfig, run_newton
from .stopping import (
    LepskiiRule,
    MaxIterRule,
    a_priori_stop_hoelder,
    a_priori_stop_log,
    oracle_stop,
)

__all__ = [
    "DEFAULTS",
    "load_config",
    "resolve_config",
    "config_hash",
    "build_problem",
    "build_misfit",
    "build_newton_config",
    "run_experiment",
    "run_rate_study",
    "run_errn_study",
    "run_check",
    "main",
]

DEFAULTS = {
    "problem": {
        "kind": "deconvolution",
        "n": 128,
        "kernel_order": 2.0,
        "kernel_scale": 8.0,
        "phantom": "two_bumps",
        "background": 0.02,
        "source_nu": 0.5,
        "source_scale": 0.6,
        "source_seed": 1234,
        "n_bins": None,
        "support_n": 32,
        "measurement_n": 48,
        "rho": 0.4,
        "kappa": 16.0,
    },
    "misfit": {"kind": "kl", "sigma0": 0.002, "sigma_decay": 0.8, "cutoff": 0.2},
    "misfits": None,
    "penalty": {"sobolev_s": 0.0},
    "newton": {
        "alpha0": 0.5,
        "c_dec": 1.5,
        "max_outer": 16,
        "inner_tol": 0.1,
        "max_inner": 10,
        "step_eta": 0.9,
        "cg_tol": 1.0e-8,
        "cg_max_iter": 600,
        "min_step": 1.0e-4,
    },
    "stopping": {
        "rule": "oracle",
        "scope": "mean",
        "tau": 1.0,
        "nu": 0.5,
        "gamma_nl": 0.0,
        "err_bound": None,
    },
    "exposures": [1000.0, 10000.0],
    "replicates": 100,
    "seed": 7,
    "errn": {"max_steps": 20},
    "rates": {"nu": 0.5},
}


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path):
    with open(path) as fh:
        user = yaml.safe_load(fh) or {}
    if not isinstance(user, dict):
        raise InvalidInputError("config file must hold a mapping")
    return resolve_config(user)


def resolve_config(user):
    cfg = _deep_merge(DEFAULTS, user)
    exposures = [float(t) for t in cfg["exposures"]]
    if any(t <= 0 for t in exposures) or exposures != sorted(exposures):
        raise InvalidInputError("exposures must be positive and ascending")
    cfg["exposures"] = exposures
    if int(cfg["replicates"]) < 1:
        raise InvalidInputError("replicate count must be >= 1")
    cfg["replicates"] = int(cfg["replicates"])
    cfg["seed"] = int(cfg["seed"])
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _periodic_bumps(grid, background):
    x = grid.points
    length = grid.total_measure

    def bump(center, width, amp):
        d = np.abs(x - center)
        d = np.minimum(d, length - d)
        return amp * np.exp(-((d / width) ** 2))

    vals = background + bump(0.3 * length, 0.05 * length, 3.0) + bump(
        0.7 * length, 0.10 * length, 1.5
    )
    return Signal(vals, grid)


def _source_element(grid, symbol, nu, scale, seed):
    """Truth with an exact Hoelder-type source representation: the offset
    from u0 has spectrum ``symbol**(2 nu)`` times unit-modulus noise, so it
    lies on the boundary of the corresponding source set."""
    n = grid.size
    rng = np.random.default_rng(seed)
    coef = np.zeros(n // 2 + 1, dtype=complex)
    phases = rng.uniform(0.0, 2 * np.pi, n // 2 + 1)
    coef[1:] = np.exp(1j * phases[1:])
    if n % 2 == 0:
        coef[-1] = np.sign(np.cos(phases[-1])) or 1.0
    shaped = coef * symbol ** (2.0 * nu)
    vals = np.fft.irfft(shaped, n=n)
    vals /= grid.norm(vals)
    return vals, scale


def build_problem(cfg):
    """Instantiate model, penalty, truth, exact data, and binning."""
    pcfg = cfg["problem"]
    scfg = cfg["penalty"]
    if pcfg["kind"] == "deconvolution":
        n = int(pcfg["n"])
        grid = Grid.periodic_1d(n)
        symbol = sobolev_symbol(n, float(pcfg["kernel_order"]), float(pcfg["kernel_scale"]))
        model = DeconvolutionModel.from_symbol(grid, symbol)
        u0 = Signal(np.ones(n), grid)
        if pcfg["phantom"] == "two_bumps":
            u_true = _periodic_bumps(grid, float(pcfg["background"]))
        elif pcfg["phantom"] == "source_hoelder":
            nu = float(pcfg["source_nu"])
            direction, scale = _source_element(
                grid,
                model.symbol,  # effective symbol: exact source representation
                nu,
                float(pcfg["source_scale"]),
                int(pcfg["source_seed"]),
            )
            response = model.apply(Signal(direction, grid)).values
            dip = max(0.0, -response.min())
            if scale * dip > 0.9:
                scale = 0.9 / dip
            u_true = Signal(u0.values + scale * direction, grid)
        else:
            raise InvalidInputError(f"unknown phantom {pcfg['phantom']!r}")
        s = float(scfg["sobolev_s"])
        gram = IdentityGram() if s == 0 else SobolevGram(grid.shape, s)
        penalty = QuadraticPenalty(u0, gram)
    elif pcfg["kind"] == "phase_retrieval":
        model = PhaseRetrievalModel(
            support_n=int(pcfg["support_n"]),
            rho=float(pcfg["rho"]),
            measurement_n=int(pcfg["measurement_n"]),
            kappa=float(pcfg["kappa"]),
        )
        grid = model.input_grid
        u0 = Signal(np.ones(grid.size), grid)
        u_true = make_cell_phantom(grid, model.rho)
        s = float(scfg["sobolev_s"])
        gram = (
            IdentityGram()
            if s == 0
            else SobolevGram(model.support_shape, s, mask=model.mask)
        )
        penalty = QuadraticPenalty(u0, gram)
    else:
        raise InvalidInputError(f"unknown problem kind {pcfg['kind']!r}")

    gdag = model.apply(u_true)
    n_bins = pcfg.get("n_bins")
    if n_bins:
        binning = Binning.regular(model.output_grid, int(n_bins))
    else:
        binning = Binning.identity(model.output_grid)
    return {
        "model": model,
        "penalty": penalty,
        "u0": u0,
        "u_true": u_true,
        "gdag": gdag,
        "binning": binning,
    }


def build_misfit(spec):
    kind = spec["kind"]
    if kind == "l2":
        return L2Misfit(), OffsetParam()
    if kind == "kl":
        sigma0 = float(spec.get("sigma0", 0.0))
        decay = float(spec.get("sigma_decay", 1.0))
        return KLMisfit(sigma0), OffsetParam(sigma0, decay)
    if kind == "pearson":
        return PearsonMisfit(float(spec.get("cutoff", 0.2))), OffsetParam()
    raise InvalidInputError(f"unknown misfit kind {kind!r}")


def build_newton_config(cfg, offset, max_outer=None):
    ncfg = cfg["newton"]
    return NewtonConfig(
        alpha0=float(ncfg["alpha0"]),
        c_dec=float(ncfg["c_dec"]),
        max_outer=int(max_outer if max_outer is not None else ncfg["max_outer"]),
        inner_tol=float(ncfg["inner_tol"]),
        max_inner=int(ncfg["max_inner"]),
        step_eta=float(ncfg["step_eta"]),
        offset=offset,
        cg_tol=float(ncfg["cg_tol"]),
        cg_max_iter=int(ncfg["cg_max_iter"]),
        min_step=float(ncfg["min_step"]),
    )


def _misfit_specs(cfg):
    if cfg.get("misfits"):
        return [dict(DEFAULTS["misfit"], **spec) for spec in cfg["misfits"]]
    return [cfg["misfit"]]


def _select_index(cfg, trace, u_true):
    """Per-run stopping selection; mean-scope oracle is handled upstream."""
    rule = cfg["stopping"]["rule"]
    if rule == "oracle":
        return oracle_stop(trace, u_true)
    if rule == "max_iter":
        return trace.n_steps
    if rule == "lepskii":
        sel = LepskiiRule(
            err_bound=cfg["stopping"]["err_bound"],
            gamma_nl=float(cfg["stopping"]["gamma_nl"]),
        ).select(trace)
        return sel[0]
    if rule == "a_priori_hoelder":
        return a_priori_stop_hoelder(
            trace, float(cfg["stopping"]["tau"]), float(cfg["stopping"]["nu"])
        ).index
    if rule == "a_priori_log":
        return a_priori_stop_log(trace, float(cfg["stopping"]["tau"])).index
    raise InvalidInputError(f"unknown stopping rule {rule!r}")


def _run_replicates(cfg, problem, misfit, offset, t_values, replicates, max_outer=None):
    """Run the solver over (t, replicate) pairs with shared seeds per pair.

    Yields dict records; counts are sampled once per pair so different
    misfits see paired data.
    """
    ncfg = build_newton_config(cfg, offset, max_outer=max_outer)
    model, penalty = problem["model"], problem["penalty"]
    u_true, gdag, binning = problem["u_true"], problem["gdag"], problem["binning"]
    records = []
    for ti, t in enumerate(t_values):
        for rep in range(replicates):
            seed = replicate_seed(cfg["seed"], ti * replicates + rep)
            counts = sample_counts(gdag, t, binning, seed)
            rec = {"t": t, "replicate": rep, "seed": seed}
            try:
                _, trace = run_newton(
                    model,
                    misfit,
                    penalty,
                    counts,
                    ncfg,
                    stop=MaxIterRule(),
                    u_true=u_true,
                    gdag=gdag,
                    errn_variant="B",
                )
                rec["trace"] = trace
                rec["status"] = trace.status
            except Exception as exc:  # failures are data, not fatal
                rec["trace"] = None
                rec["status"] = f"failed: {exc}"
            records.append(rec)
    return records


def _apply_selection(cfg, records, u_true, penalty):
    """Attach stop index and error to each record; mean-scope oracle picks a
    common index per exposure time minimizing the empirical mean squared
    error, as in the reference experiments."""
    scope = cfg["stopping"].get("scope", "per_run")
    rule = cfg["stopping"]["rule"]
    if rule == "oracle" and scope == "mean":
        by_t = {}
        for rec in records:
            if rec["trace"] is not None:
                by_t.setdefault(rec["t"], []).append(rec)
        for t, recs in by_t.items():
            n_common = min(r["trace"].n_steps for r in recs)
            curves = np.array(
                [r["trace"].true_errors(u_true)[: n_common + 1] for r in recs]
            )
            n_star = int(np.argmin(np.mean(curves**2, axis=0)))
            for r in recs:
                r["stop_index"] = n_star
                r["error"] = float(r["trace"].true_errors(u_true)[n_star])
    else:
        for rec in records:
            if rec["trace"] is None:
                continue
            idx = _select_index(cfg, rec["trace"], u_true)
            rec["stop_index"] = idx
            rec["error"] = float(penalty.xnorm(rec["trace"].iterates[idx], u_true))
    for rec in records:
        rec.setdefault("stop_index", None)
        rec.setdefault("error", None)
    return records


def _aggregate(records):
    ok = [r for r in records if r["error"] is not None]
    agg = {"n_runs": len(records), "n_success": len(ok)}
    if ok:
        errors = np.array([r["error"] for r in ok])
        agg["mean_stop_index"] = float(np.mean([r["stop_index"] for r in ok]))
        agg["rms_error"] = float(np.sqrt(np.mean(errors**2)))
        agg["std_error"] = float(np.std(errors))
    else:
        agg["mean_stop_index"] = math.nan
        agg["rms_error"] = math.nan
        agg["std_error"] = math.nan
    return agg


def run_experiment(cfg, out_dir):
    """Replicated reconstruction experiment; writes runs.csv and summary.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    problem = build_problem(cfg)
    u_true, penalty = problem["u_true"], problem["penalty"]
    initial_error = penalty.xnorm(problem["u0"], u_true)

    all_rows = []
    summary_rows = []
    for spec in _misfit_specs(cfg):
        misfit, offset = build_misfit(spec)
        records = _run_replicates(
            cfg, problem, misfit, offset, cfg["exposures"], cfg["replicates"]
        )
        _apply_selection(cfg, records, u_true, penalty)
        for rec in records:
            all_rows.append(
                {
                    "misfit": spec["kind"],
                    "t": rec["t"],
                    "replicate": rec["replicate"],
                    "seed": rec["seed"],
                    "status": rec["status"],
                    "stop_index": rec["stop_index"],
                    "error": rec["error"],
                }
            )
        for t in cfg["exposures"]:
            agg = _aggregate([r for r in records if r["t"] == t])
            agg.update(misfit=spec["kind"], t=t)
            summary_rows.append(agg)

    header = [f"config_sha256={chash}", f"seed={cfg['seed']}"]
    _write_csv(
        out / "runs.csv",
        header,
        ["misfit", "t", "replicate", "seed", "status", "stop_index", "error"],
        all_rows,
    )
    _write_csv(
        out / "summary.csv",
        header + [f"initial_error={initial_error!r}"],
        ["misfit", "t", "n_runs", "n_success", "mean_stop_index", "rms_error", "std_error"],
        summary_rows,
    )
    _write_manifest(out / "manifest.txt", cfg, chash)
    return summary_rows


def run_rate_study(cfg, nu=None, out_dir=None):
    """Convergence-rate study: mean squared error at the oracle index versus
    the effective noise level 1/sqrt(t); returns (slope, r2)."""
    if len(cfg["exposures"]) < 3:
        raise InvalidInputError("rate study needs at least 3 exposure times")
    cfg = copy.deepcopy(cfg)
    nu = float(cfg["rates"]["nu"] if nu is None else nu)
    cfg["problem"]["kind"] = "deconvolution"
    cfg["problem"]["phantom"] = "source_hoelder"
    cfg["problem"]["source_nu"] = nu
    chash = config_hash(cfg)
    problem = build_problem(cfg)
    u_true, penalty = problem["u_true"], problem["penalty"]
    misfit, offset = build_misfit(cfg["misfit"])
    records = _run_replicates(
        cfg, problem, misfit, offset, cfg["exposures"], cfg["replicates"]
    )
    cfg["stopping"]["rule"] = "oracle"
    cfg["stopping"]["scope"] = "mean"
    _apply_selection(cfg, records, u_true, penalty)

    rows = []
    for t in cfg["exposures"]:
        errs = [r["error"] for r in records if r["t"] == t and r["error"] is not None]
        if not errs:
            raise InvalidInputError(f"all runs failed at t={t}")
        rows.append(
            {
                "t": t,
                "noise_level": 1.0 / math.sqrt(t),
                "mean_sq_error": float(np.mean(np.square(errs))),
                "n_success": len(errs),
            }
        )
    slope, r2 = fit_rate(
        [row["noise_level"] for row in rows], [row["mean_sq_error"] for row in rows]
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = [
            f"config_sha256={chash}",
            f"seed={cfg['seed']}",
            f"nu={nu!r}",
            f"slope={slope!r}",
            f"r2={r2!r}",
        ]
        _write_csv(
            out / "rates.csv",
            header,
            ["t", "noise_level", "mean_sq_error", "n_success"],
            rows,
        )
        _write_manifest(out / "manifest.txt", cfg, chash)
    return slope, r2


def run_errn_study(cfg, out_dir=None):
    """Decay study of the effective noise level: mean of ``max_n err_n`` per
    exposure time and the reduction factors between successive times."""
    cfg = copy.deepcopy(cfg)
    cfg["misfit"]["kind"] = "kl"
    chash = config_hash(cfg)
    problem = build_problem(cfg)
    misfit, offset = build_misfit(cfg["misfit"])
    max_steps = int(cfg["errn"]["max_steps"])
    records = _run_replicates(
        cfg,
        problem,
        misfit,
        offset,
        cfg["exposures"],
        cfg["replicates"],
        max_outer=max_steps + 1,
    )
    rows = []
    for t in cfg["exposures"]:
        maxima = []
        for rec in records:
            if rec["t"] != t or rec["trace"] is None:
                continue
            errs = rec["trace"].err_array()
            if errs is None or errs.size == 0:
                continue
            maxima.append(float(np.max(errs[: max_steps + 1])))
        if not maxima:
            raise InvalidInputError(f"no usable runs at t={t}")
        rows.append({"t": t, "mean_max_errn": float(np.mean(maxima)), "n": len(maxima)})
    for k, row in enumerate(rows):
        row["ratio_vs_prev"] = (
            "" if k == 0 else rows[k - 1]["mean_max_errn"] / row["mean_max_errn"]
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = [f"config_sha256={chash}", f"seed={cfg['seed']}"]
        _write_csv(
            out / "errn.csv", header, ["t", "mean_max_errn", "n", "ratio_vs_prev"], rows
        )
        _write_manifest(out / "manifest.txt", cfg, chash)
    return rows


def run_check(out_dir=None):
    """Adjoint/derivative/gradient invariant suite over the shipped models."""
    lines = []
    ok = True

    def record(name, value, bound):
        nonlocal ok
        good = value <= bound
        ok = ok and good
        lines.append(f"{'ok' if good else 'FAIL'} {name} value={value:.3e} bound={bound:.1e}")

    grid = Grid.periodic_1d(64)
    model = DeconvolutionModel.from_symbol(grid, sobolev_symbol(64, 2.0, 6.0))
    u = Signal(np.ones(64), grid)
    record("adjoint_deconvolution", check_adjoint(model, u, trials=8, seed=0), 1e-8)
    order = check_derivative(model, u)
    lines.append(f"ok derivative_deconvolution order={order} (linear, exact)")

    pr = PhaseRetrievalModel(support_n=16, rho=0.4, measurement_n=24, kappa=12.0)
    phi = make_cell_phantom(pr.input_grid, pr.rho)
    record("adjoint_phase_retrieval", check_adjoint(pr, phi, trials=8, seed=1), 1e-8)
    order = check_derivative(pr, phi)
    record("derivative_order_phase_retrieval", max(0.0, 0.9 - order), 0.0)

    rng = np.random.default_rng(3)
    g = Signal(0.5 + rng.random(40), Grid.periodic_1d(40))
    obs = Signal(0.5 + rng.random(40), g.grid)
    for name, m in [
        ("kl", KLMisfit(0.1)),
        ("l2", L2Misfit()),
        ("pearson", PearsonMisfit(0.2)),
    ]:
        grad = m.gradient(g, obs)
        fd = np.zeros_like(grad)
        eps = 1e-6
        for i in range(g.grid.size):
            up = g.values.copy()
            dn = g.values.copy()
            up[i] += eps
            dn[i] -= eps
            fd[i] = (m.value(g.with_values(up), obs) - m.value(g.with_values(dn), obs)) / (
                2 * eps
            )
        rel = np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-12)
        record(f"gradient_{name}", rel, 1e-5)

    binning = Binning.regular(g.grid, 8)
    v = rng.random(8)
    lhs = np.sum(bin_apply(binning, g) * v / binning.measures)
    rhs = g.grid.inner(g.values, bin_adjoint(binning, v).values)
    record("binning_adjoint_identity", abs(lhs - rhs) / max(abs(lhs), 1e-300), 1e-12)
    p1 = binning.project(g.values)
    record("binning_projection_idempotent", float(np.max(np.abs(binning.project(p1) - p1))), 1e-12)

    report = "\n".join(lines)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "check.txt").write_text(report + "\n")
    return ok, report


def _write_csv(path, header_comments, columns, rows):
    with open(path, "w") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            cells = []
            for col in columns:
                val = row.get(col, "")
                if isinstance(val, float):
                    cells.append(repr(val))
                elif val is None:
                    cells.append("")
                else:
                    cells.append(str(val))
            fh.write(",".join(cells) + "\n")


def _write_manifest(path, cfg, chash):
    with open(path, "w") as fh:
        fh.write(f"config_sha256={chash}\n")
        fh.write(f"seed={cfg['seed']}\n")
        fh.write("package=irnewton 0.1.0\n")
        fh.write("--- resolved config ---\n")
        fh.write(yaml.safe_dump(cfg, sort_keys=True))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="irnewton")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "rates", "errn"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", required=True)
    p = sub.add_parser("check")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    try:
        if args.command == "check":
            ok, report = run_check(args.out)
            print(report)
            return 0 if ok else 1
        cfg = load_config(args.config)
        cfg["seed"] = int(args.seed)
        if args.command == "run":
            summary = run_experiment(cfg, args.out)
            for row in summary:
                print(
                    f"misfit={row['misfit']} t={row['t']:g} "
                    f"rms_error={row['rms_error']:.6g} mean_N={row['mean_stop_index']:.3g}"
                )
        elif args.command == "rates":
            slope, r2 = run_rate_study(cfg, out_dir=args.out)
            print(f"slope={slope:.4f} r2={r2:.4f}")
        elif args.command == "errn":
            rows = run_errn_study(cfg, out_dir=args.out)
            for row in rows:
                ratio = row["ratio_vs_prev"]
                extra = "" if ratio == "" else f" ratio={ratio:.3f}"
                print(f"t={row['t']:g} mean_max_errn={row['mean_max_errn']:.6g}{extra}")
        return 0
    except Exception as exc:
        print(
            json.dumps({"error": str(exc), "type": type(exc).__name__}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
