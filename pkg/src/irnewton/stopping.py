"""Stopping rules: a priori thresholds, the Lepskii balancing principle, and
the synthetic-mode oracle.

The module-level functions are pure selections on a recorded trace; the rule
classes adapt them to the online interface the Newton driver polls after each
outer step.  A priori rules need the trace to carry ``err_n`` values; the
Lepskii rule only needs a bound on the effective noise level and the stored
iterates.
"""

from typing import NamedTuple

import numpy as np

from .core import InvalidInputError, UnsupportedModeError
from .rates import theta

__all__ = [
    "StopDecision",
    "LepskiiSelection",
    "a_priori_stop_theta",
    "a_priori_stop_hoelder",
    "a_priori_stop_log",
    "lepskii_select",
    "oracle_stop",
    "StoppingRule",
    "MaxIterRule",
    "APrioriThetaRule",
    "APrioriHoelderRule",
    "APrioriLogRule",
    "LepskiiRule",
    "OracleRule",
]


class StopDecision(NamedTuple):
    """Stopping index plus whether the criterion actually triggered (when it
    never does, the index is the last available step)."""

    index: int
    triggered: bool


class LepskiiSelection(NamedTuple):
    index: int
    n_max: int
    truncated: bool


def _err_values(trace):
    errs = trace.err_array()
    if errs is None:
        raise UnsupportedModeError(
            "trace carries no err_n values; run in synthetic mode or supply them"
        )
    return errs


def _check_tau(tau):
    if tau < 1:
        raise InvalidInputError("stopping parameter tau must be >= 1")


def a_priori_stop_theta(trace, tau, phi):
    """First step with ``Theta(alpha_n) <= tau * err_n`` where
    ``Theta(t) = t phi(t)^2``."""
    _check_tau(tau)
    errs = _err_values(trace)
    Theta = theta(phi)
    for n, alpha in enumerate(trace.alphas):
        if Theta(alpha) <= tau * errs[n]:
            return StopDecision(n, True)
    return StopDecision(trace.n_steps - 1, False)


def a_priori_stop_hoelder(trace, tau, nu):
    """First step with ``alpha_n <= tau * err_n^(1/(1+2 nu))`` for a Hoelder
    smoothness index ``nu in (0, 1/2]``."""
    _check_tau(tau)
    if not 0 < nu <= 0.5:
        raise InvalidInputError("nu must lie in (0, 1/2]")
    errs = _err_values(trace)
    expo = 1.0 / (1.0 + 2.0 * nu)
    for n, alpha in enumerate(trace.alphas):
        if alpha <= tau * errs[n] ** expo:
            return StopDecision(n, True)
    return StopDecision(trace.n_steps - 1, False)


def a_priori_stop_log(trace, tau):
    """First step with ``alpha_n^2 <= tau * err_n``; implementable without
    knowing the logarithmic smoothness index."""
    _check_tau(tau)
    errs = _err_values(trace)
    for n, alpha in enumerate(trace.alphas):
        if alpha**2 <= tau * errs[n]:
            return StopDecision(n, True)
    return StopDecision(trace.n_steps - 1, False)


def phi_noi(trace, err_bound, n):
    """Propagated-noise envelope ``2 err / alpha_{n-1}`` of iterate ``n >= 1``."""
    return 2.0 * err_bound / trace.alphas[n - 1]


def lepskii_select(trace, err_bound, gamma_nl=0.0, c_bd=None, q=None):
    """Lepskii balancing principle over the stored iterates.

    ``N_max`` is the first index whose noise envelope reaches 1 (in the
    ``q``-th root, scaled by ``c_bd``); the balancing index is the first
    ``n`` whose distance to every later iterate up to ``N_max`` stays below
    ``c * phi_noi(m)^(1/q)`` with ``c = c_bd^(1/q) * 4 * (1 + gamma_nl)``.
    If the trace is shorter than ``N_max`` the available prefix is used and
    the result flagged as truncated.
    """
    if err_bound <= 0:
        raise InvalidInputError("err_bound must be positive")
    c_bd = trace.penalty.c_bd if c_bd is None else float(c_bd)
    q = trace.penalty.q if q is None else float(q)
    n_steps = trace.n_steps
    if n_steps < 1:
        raise InvalidInputError("trace has no completed steps")
    n_max = None
    for n in range(1, n_steps + 1):
        if c_bd ** (1.0 / q) * phi_noi(trace, err_bound, n) ** (1.0 / q) >= 1.0:
            n_max = n
            break
    truncated = n_max is None
    if truncated:
        n_max = n_steps
    c = c_bd ** (1.0 / q) * 4.0 * (1.0 + gamma_nl)
    for n in range(1, n_max + 1):
        ok = all(
            trace.xnorm_between(n, m)
            <= c * phi_noi(trace, err_bound, m) ** (1.0 / q)
            for m in range(n, n_max + 1)
        )
        if ok:
            return LepskiiSelection(n, n_max, truncated)
    return LepskiiSelection(n_max, n_max, truncated)


def oracle_stop(trace, u_true):
    """Index of the iterate (initial guess included) with smallest true
    X-norm error; ties go to the smaller index."""
    errors = trace.true_errors(u_true)
    return int(np.argmin(errors))


class StoppingRule:
    """Online interface: ``should_stop`` is polled after every outer step,
    ``select`` picks the final iterate index from the trace."""

    name = "base"

    def should_stop(self, trace):
        return False

    def select(self, trace):
        raise NotImplementedError

    def describe(self):
        return {"rule": self.name}


class MaxIterRule(StoppingRule):
    """Run to the configured number of outer steps, return the last iterate."""

    name = "max_iter"

    def select(self, trace):
        return trace.n_steps, self.describe()


class _APrioriRule(StoppingRule):
    def _scan(self, trace):
        raise NotImplementedError

    def should_stop(self, trace):
        if trace.err_array() is None:
            return False
        decision = self._scan(trace)
        return decision.triggered

    def select(self, trace):
        decision = self._scan(trace)
        info = self.describe()
        info["triggered"] = decision.triggered
        return decision.index, info


class APrioriThetaRule(_APrioriRule):
    """Theorem-style rule ``Theta(alpha_n) <= tau err_n`` for a general
    source-condition function."""

    name = "a_priori_theta"

    def __init__(self, tau, phi):
        _check_tau(tau)
        self.tau = float(tau)
        self.phi = phi

    def _scan(self, trace):
        return a_priori_stop_theta(trace, self.tau, self.phi)

    def describe(self):
        return {"rule": self.name, "tau": self.tau, "phi": repr(self.phi)}


class APrioriHoelderRule(_APrioriRule):
    name = "a_priori_hoelder"

    def __init__(self, tau, nu):
        _check_tau(tau)
        self.tau = float(tau)
        self.nu = float(nu)

    def _scan(self, trace):
        return a_priori_stop_hoelder(trace, self.tau, self.nu)

    def describe(self):
        return {"rule": self.name, "tau": self.tau, "nu": self.nu}


class APrioriLogRule(_APrioriRule):
    name = "a_priori_log"

    def __init__(self, tau):
        _check_tau(tau)
        self.tau = float(tau)

    def _scan(self, trace):
        return a_priori_stop_log(trace, self.tau)

    def describe(self):
        return {"rule": self.name, "tau": self.tau}


class LepskiiRule(StoppingRule):
    """Balancing rule; with ``err_bound=None`` (synthetic mode) the bound is
    the largest recorded ``err_n`` of the trace."""

    name = "lepskii"

    def __init__(self, err_bound=None, gamma_nl=0.0, c_bd=None, q=None):
        self.err_bound = err_bound
        self.gamma_nl = float(gamma_nl)
        self.c_bd = c_bd
        self.q = q

    def _bound(self, trace):
        if self.err_bound is not None:
            return float(self.err_bound)
        errs = trace.err_array()
        if errs is None or not np.any(errs > 0):
            raise UnsupportedModeError(
                "lepskii without err_bound needs recorded err_n values"
            )
        return float(errs.max())

    def should_stop(self, trace):
        if self.err_bound is None:
            return False
        c_bd = trace.penalty.c_bd if self.c_bd is None else self.c_bd
        q = trace.penalty.q if self.q is None else self.q
        n = trace.n_steps
        return c_bd ** (1.0 / q) * phi_noi(trace, self.err_bound, n) ** (1.0 / q) >= 1.0

    def select(self, trace):
        bound = self._bound(trace)
        sel = lepskii_select(trace, bound, self.gamma_nl, self.c_bd, self.q)
        info = self.describe()
        info.update(err_bound=bound, n_max=sel.n_max, truncated=sel.truncated)
        return sel.index, info

    def describe(self):
        return {"rule": self.name, "gamma_nl": self.gamma_nl}


class OracleRule(StoppingRule):
    """Synthetic-mode rule minimizing the true error along the run."""

    name = "oracle"

    def __init__(self, u_true):
        self.u_true = u_true

    def select(self, trace):
        idx = oracle_stop(trace, self.u_true)
        return idx, self.describe()

    def describe(self):
        return {"rule": self.name}
