"""Outer iteratively regularized Newton loop and inner Gauss-Newton/CG solver.

Each outer step linearizes the forward operator at the current iterate and
minimizes ``quadratic model of the misfit + (alpha_n/2) R`` by a damped inner
iteration: every inner step solves a regularized least-squares problem via CG
on the normal equations ``(F'* W^2 F' + alpha G) h = -F'* W r - alpha G (u -
u0)`` and advances with the largest step length in [0, 1] keeping the
linearized output above ``-step_eta * sigma`` pointwise.

The full per-step history is kept on an :class:`IterateTrace` so that
stopping rules (a priori, Lepskii, oracle) can select any iterate after the
fact.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    FeasibilityError,
    InvalidInputError,
    Signal,
)
from .misfit import OffsetParam
from .poisson import CountData, err_poisson

__all__ = [
    "NewtonConfig",
    "IterateTrace",
    "solve_inner_ls",
    "inner_gauss_newton",
    "run_newton",
    "inner_objective",
]


@dataclass(frozen=True)
class NewtonConfig:
    """Parameters of the outer and inner iterations.

    The regularization weights follow ``alpha_n = alpha0 * c_dec**(-n)``,
    which satisfies the admissibility requirements ``alpha0 <= 1``,
    ``alpha_n`` decreasing, and bounded decay ratio.  The offset parameter
    decays multiplicatively alongside.
    """

    alpha0: float = 0.5
    c_dec: float = 1.5
    max_outer: int = 16
    inner_tol: float = 0.1
    max_inner: int = 10
    step_eta: float = 0.9
    offset: OffsetParam = field(default_factory=OffsetParam)
    cg_tol: float = 1e-10
    cg_max_iter: int = 500
    min_step: float = 1e-4

    def __post_init__(self):
        if not 0 < self.alpha0 <= 1:
            raise InvalidInputError("alpha0 must lie in (0, 1]")
        if self.c_dec <= 1:
            raise InvalidInputError("c_dec must exceed 1 for a decreasing schedule")
        if not 0 <= self.step_eta < 1:
            raise InvalidInputError("step_eta must lie in [0, 1)")
        if self.max_outer < 1 or self.max_inner < 1:
            raise InvalidInputError("iteration counts must be positive")
        if self.inner_tol <= 0 or self.cg_tol <= 0:
            raise InvalidInputError("tolerances must be positive")
        if self.min_step < 0:
            raise InvalidInputError("min_step must be nonnegative")

    def alpha_at(self, n):
        return self.alpha0 * self.c_dec ** (-n)


class IterateTrace:
    """Per-step record of a Newton run.

    Keeps every iterate (the Lepskii rule compares them pairwise), the
    nonlinear and linearized outputs, misfit/penalty values, and the
    effective-noise surrogate ``err_n`` where computable.  ``iterates[0]`` is
    the initial guess; step ``n`` used ``alphas[n]`` to produce
    ``iterates[n + 1]``.
    """

    def __init__(self, penalty, u0, f0):
        self.penalty = penalty
        self.iterates = [u0]
        self.outputs = [f0]
        self.alphas = []
        self.sigmas = []
        self.lin_outputs = []
        self.lin_truth_outputs = []
        self.misfit_values = []
        self.penalty_values = []
        self.err_values = []
        self.inner_iters = []
        self.step_lengths = []
        self.cg_clean = []
        self.status = "running"
        self.selected = None
        self.selection_info = {}

    @property
    def n_steps(self):
        return len(self.alphas)

    def add_step(
        self,
        alpha,
        sigma,
        u_next,
        f_next,
        lin_output,
        lin_truth_output,
        misfit_value,
        penalty_value,
        err_value,
        diagnostics,
    ):
        if self.alphas and not alpha < self.alphas[-1]:
            raise InvalidInputError("regularization weights must decrease strictly")
        self.alphas.append(float(alpha))
        self.sigmas.append(float(sigma))
        self.iterates.append(u_next)
        self.outputs.append(f_next)
        self.lin_outputs.append(lin_output)
        self.lin_truth_outputs.append(lin_truth_output)
        self.misfit_values.append(float(misfit_value))
        self.penalty_values.append(float(penalty_value))
        self.err_values.append(None if err_value is None else float(err_value))
        self.inner_iters.append(int(diagnostics["inner_iters"]))
        self.step_lengths.append(list(diagnostics["step_lengths"]))
        self.cg_clean.append(bool(diagnostics["cg_clean"]))

    def xnorm_between(self, i, j):
        return self.penalty.xnorm(self.iterates[i], self.iterates[j])

    def true_errors(self, u_true):
        """X-norm distance of every iterate (including the initial guess)
        to a reference solution."""
        return np.array([self.penalty.xnorm(u, u_true) for u in self.iterates])

    def err_array(self):
        if any(e is None for e in self.err_values):
            return None
        return np.array(self.err_values, dtype=float)

    def to_csv(self, path, u_true=None, comments=()):
        true_err = None if u_true is None else self.true_errors(u_true)
        with open(path, "w") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            cols = "n,alpha,sigma,misfit,penalty,err_n,inner_iters,min_step_len"
            if true_err is not None:
                cols += ",true_error"
            fh.write(cols + "\n")
            for n in range(self.n_steps):
                err = self.err_values[n]
                min_s = min(self.step_lengths[n]) if self.step_lengths[n] else 1.0
                row = (
                    f"{n},{self.alphas[n]!r},{self.sigmas[n]!r},"
                    f"{self.misfit_values[n]!r},{self.penalty_values[n]!r},"
                    f"{'' if err is None else repr(err)},"
                    f"{self.inner_iters[n]},{min_s!r}"
                )
                if true_err is not None:
                    row += f",{true_err[n + 1]!r}"
                fh.write(row + "\n")
            fh.write(f"# status={self.status}\n")
            if self.selected is not None:
                fh.write(f"# selected={self.selected}\n")
            for key, val in self.selection_info.items():
                fh.write(f"# {key}={val}\n")


def _cg_normal(op, b, inner, tol, max_iter):
    """CG for a symmetric positive definite operator in a weighted inner
    product; returns (solution, info)."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = inner(r, r)
    b_norm = math.sqrt(max(inner(b, b), 0.0))
    info = {"iterations": 0, "converged": True, "breakdown": False}
    if b_norm == 0.0:
        return x, info
    for k in range(1, max_iter + 1):
        Ap = op(p)
        pAp = inner(p, Ap)
        if not np.isfinite(pAp) or pAp <= 0:
            info.update(breakdown=True, converged=False, iterations=k)
            return x, info
        a = rs / pAp
        x = x + a * p
        r = r - a * Ap
        rs_new = inner(r, r)
        info["iterations"] = k
        if math.sqrt(max(rs_new, 0.0)) <= tol * b_norm:
            return x, info
        p = r + (rs_new / rs) * p
        rs = rs_new
    info["converged"] = False
    return x, info


def solve_inner_ls(
    weight,
    residual,
    apply_lin,
    adjoint_lin,
    penalty,
    u_cur,
    alpha,
    cg_tol=1e-10,
    cg_max_iter=500,
):
    """Regularized linearized least-squares step.

    Approximately minimizes ``sum w 1/2 (weight * F'h + residual)^2 +
    (alpha/2) R(u_cur + h)`` by CG on the normal equations; the normal
    operator ``F'* W^2 F' + alpha G`` is symmetric positive definite in the
    weighted inner product of the parameter grid.  ``apply_lin`` and
    ``adjoint_lin`` act on plain value arrays.
    """
    wv = weight.values
    if np.any(~np.isfinite(wv)) or np.any(wv < 0):
        raise InvalidInputError("quadratic-model weights must be finite and >= 0")
    if np.any(~np.isfinite(residual.values)):
        raise InvalidInputError("quadratic-model residual must be finite")
    grid_in = u_cur.grid
    gram = penalty.gram

    def normal_op(h):
        return adjoint_lin(wv * wv * apply_lin(h)) + alpha * gram(h)

    offset = u_cur.values - penalty.u0.values
    b = -adjoint_lin(wv * residual.values) - alpha * gram(offset)
    h_vals, info = _cg_normal(normal_op, b, grid_in.inner, cg_tol, cg_max_iter)
    if np.any(~np.isfinite(h_vals)):
        raise InvalidInputError("CG produced non-finite values")
    return Signal(h_vals, grid_in), info


def _largest_step(g_cur, direction, bound):
    """Largest s in [0, 1] with ``g_cur + s * direction >= bound`` pointwise,
    as the exact ratio test over points with negative direction."""
    neg = direction < 0
    if not np.any(neg):
        return 1.0
    ratios = (bound - g_cur[neg]) / direction[neg]
    return float(min(1.0, max(0.0, ratios.min())))


def inner_objective(misfit, penalty, g_lin, obs, alpha, u):
    """Value of the functional the inner iteration minimizes, in its own
    scaling: ``quad_scale * S(g_lin; obs) + (alpha/2) R(u)``."""
    return misfit.quad_scale * misfit.value(g_lin, obs) + 0.5 * alpha * penalty.value(u)


def inner_gauss_newton(model, misfit, penalty, u_n, obs, alpha_n, cfg, f_n=None):
    """One outer Newton step: damped inner Gauss-Newton iteration on the
    linearization at ``u_n``.

    Returns ``(u_next, diagnostics)``.  The inner loop stops when the update
    norm has dropped below ``inner_tol`` relative to the first update, after
    ``max_inner`` steps, or when the feasibility step length collapses below
    ``min_step`` (the current iterate is returned and flagged).
    """
    if not model.domain_check(u_n):
        raise FeasibilityError("iterate left the operator domain")
    if f_n is None:
        f_n = model.apply(u_n)
    grid_in, grid_out = model.input_grid, model.output_grid

    def apply_lin(vals):
        return model.derivative(u_n, Signal(vals, grid_in)).values

    def adjoint_lin(vals):
        return model.adjoint_derivative(u_n, Signal(vals, grid_out)).values

    u_cur = u_n
    g_cur = f_n.values.copy()
    if misfit.constrained and misfit.sigma > 0:
        # the previous step's guard used a larger offset, so inherited outputs
        # may sit slightly below the current bound; project the linearization
        # base onto the current trust region to keep the model defined
        g_cur = np.maximum(g_cur, -cfg.step_eta * misfit.sigma)
    diag = {
        "inner_iters": 0,
        "step_lengths": [],
        "cg_clean": True,
        "reason": "max_inner",
        "objectives": [inner_objective(misfit, penalty, Signal(g_cur, grid_out), obs, alpha_n, u_cur)],
    }
    h0_norm = None
    for _ in range(cfg.max_inner):
        weight, residual = misfit.quadratic_model(Signal(g_cur, grid_out), obs)
        h, cg_info = solve_inner_ls(
            weight,
            residual,
            apply_lin,
            adjoint_lin,
            penalty,
            u_cur,
            alpha_n,
            cg_tol=cfg.cg_tol,
            cg_max_iter=cfg.cg_max_iter,
        )
        diag["cg_clean"] = diag["cg_clean"] and not cg_info["breakdown"]
        h_norm = grid_in.norm(h.values)
        if h0_norm is None:
            h0_norm = h_norm
            if h0_norm == 0.0:
                diag["reason"] = "stationary"
                break
        direction = apply_lin(h.values)
        if misfit.constrained:
            s = _largest_step(g_cur, direction, -cfg.step_eta * misfit.sigma)
        else:
            s = 1.0
        if s < cfg.min_step:
            diag["reason"] = "step_collapsed"
            break
        u_cur = u_cur + s * h
        g_cur = g_cur + s * direction
        diag["inner_iters"] += 1
        diag["step_lengths"].append(s)
        diag["objectives"].append(
            inner_objective(misfit, penalty, Signal(g_cur, grid_out), obs, alpha_n, u_cur)
        )
        if h_norm <= cfg.inner_tol * h0_norm:
            diag["reason"] = "converged"
            break
    diag["lin_output"] = Signal(g_cur, grid_out)
    diag["f_n"] = f_n
    return u_cur, diag


def run_newton(
    model,
    misfit,
    penalty,
    obs,
    cfg,
    stop=None,
    u_true=None,
    gdag=None,
    errn_variant="B",
    constants=None,
):
    """Run the outer Newton iteration and select an iterate by a stopping rule.

    When count data and the exact intensity ``gdag`` are available (synthetic
    mode), the per-step effective noise level ``err_n`` is recorded on the
    trace; variant ``"B"`` additionally needs ``u_true`` for its
    linearized-truth term and falls back to ``None`` entries without it.

    Returns ``(u_selected, trace)``; the trace always retains all iterates,
    so other rules can be applied to it afterwards.
    """
    from .stopping import MaxIterRule

    if stop is None:
        stop = MaxIterRule()
    constants = dict(constants or {})
    c_err = float(constants.get("C_err", 1.0))
    c_tc = float(constants.get("C_tc", 1.0))
    eta = float(constants.get("eta", 0.0))

    u = penalty.u0
    if not model.domain_check(u):
        raise FeasibilityError("initial guess outside the operator domain")
    f = model.apply(u)
    trace = IterateTrace(penalty, u, f)
    synthetic = isinstance(obs, CountData) and gdag is not None

    for n in range(cfg.max_outer):
        alpha_n = cfg.alpha_at(n)
        sigma_n = cfg.offset.at_step(n)
        misfit_n = misfit.with_sigma(sigma_n)
        try:
            u_next, diag = inner_gauss_newton(
                model, misfit_n, penalty, u, obs, alpha_n, cfg, f_n=f
            )
        except (FeasibilityError, InvalidInputError) as exc:
            trace.status = f"inner_failure_at_{n}: {exc}"
            break
        f_next = model.apply(u_next)
        lin_output = diag["lin_output"]
        lin_truth = None
        if u_true is not None:
            lin_truth = Signal(
                f.values + model.derivative(u, u_true - u).values, model.output_grid
            )
        err_n = None
        if synthetic:
            if errn_variant == "B" and lin_truth is not None:
                err_n = err_poisson(lin_output, obs, gdag, sigma_n) + c_err * err_poisson(
                    lin_truth, obs, gdag, sigma_n
                )
            elif errn_variant == "A":
                err_n = (
                    err_poisson(f_next, obs, gdag, sigma_n) / c_err
                    + 2 * eta * c_tc * err_poisson(f, obs, gdag, sigma_n)
                    + c_tc * c_err * err_poisson(gdag, obs, gdag, sigma_n)
                )
        trace.add_step(
            alpha_n,
            sigma_n,
            u_next,
            f_next,
            lin_output,
            lin_truth,
            misfit_n.value(f_next, obs),
            penalty.value(u_next),
            err_n,
            diag,
        )
        u, f = u_next, f_next
        if stop.should_stop(trace):
            trace.status = "stopped_early"
            break
    if trace.status == "running":
        trace.status = "completed"

    index, info = stop.select(trace)
    trace.selected = int(index)
    trace.selection_info = dict(info)
    return trace.iterates[trace.selected], trace
