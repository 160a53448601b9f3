"""Index-function calculus and rate-fitting utilities.

An index function is continuous, strictly increasing, and vanishes at zero.
From a source-condition function ``phi`` the calculus derives

* ``Theta(t) = t phi(t)^2`` and ``vartheta(t) = sqrt(t) phi(t)`` (stopping
  thresholds of the a priori rule),
* ``psi(t) = 1/phi'(phi^{-1}(t))``, ``Psi(t) = int_0^t psi^{-1}``, and
  ``Lambda``, the squared least concave majorant of ``sqrt(Psi(t)/t)``
  (error envelopes of the a posteriori theory).

All inverses are monotone bisection on the working interval; nothing is
manipulated symbolically.  Derived functions are precomputed on cached
log-spaced grids (400 points per decade over 6 decades by default) and are
pure and concurrency-safe after construction.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .core import InvalidInputError, UnsupportedModeError

__all__ = [
    "IndexFunction",
    "RateAssumptions",
    "hoelder",
    "hoelder_additive",
    "log_index",
    "theta",
    "vartheta",
    "psi_of",
    "big_psi",
    "lambda_of",
    "fit_rate",
    "tangential_cone_probe",
]

GRID_PER_DECADE = 400
GRID_DECADES = 6.0
_DIFF_STEP = 0.01  # log-space step of the 4th order differentiation stencil


class IndexFunction:
    """Strictly increasing function on ``(0, t_max]`` with ``f(0) = 0``.

    Evaluations outside ``[t_min, t_max]`` (except exactly zero) raise;
    there is no extrapolation.  ``inverse`` is a monotone bisection on the
    same interval, accurate to better than 1e-12 relative.
    """

    def __init__(self, fn, kind="Custom", param=None, t_min=1e-12, t_max=1.0):
        if not 0 < t_min < t_max:
            raise InvalidInputError("need 0 < t_min < t_max")
        self._fn = fn
        self.kind = kind
        self.param = param
        self.t_min = float(t_min)
        self.t_max = float(t_max)

    def __repr__(self):
        p = "" if self.param is None else f"({self.param})"
        return f"IndexFunction[{self.kind}{p}] on [{self.t_min:g}, {self.t_max:g}]"

    def __call__(self, t):
        arr = np.asarray(t, dtype=float)
        scalar = arr.ndim == 0
        a = np.atleast_1d(arr).astype(float)
        zero = a == 0.0
        inside = (~zero) & (a >= self.t_min * (1 - 1e-12)) & (a <= self.t_max * (1 + 1e-12))
        if not np.all(zero | inside):
            raise InvalidInputError(
                f"evaluation outside the working interval [{self.t_min:g}, {self.t_max:g}]"
            )
        out = np.zeros_like(a)
        if inside.any():
            out[inside] = self._fn(np.clip(a[inside], self.t_min, self.t_max))
        return float(out[0]) if scalar else out

    def inverse(self, s, iters=90):
        """Solve ``f(t) = s`` by bisection in log space."""
        arr = np.asarray(s, dtype=float)
        scalar = arr.ndim == 0
        a = np.atleast_1d(arr).astype(float)
        f_lo = self(self.t_min)
        f_hi = self(self.t_max)
        zero = a == 0.0
        inside = (~zero) & (a >= f_lo * (1 - 1e-9)) & (a <= f_hi * (1 + 1e-9))
        if not np.all(zero | inside):
            raise InvalidInputError(
                f"inverse argument outside the attained range [{f_lo:g}, {f_hi:g}]"
            )
        lo = np.full(a.shape, self.t_min)
        hi = np.full(a.shape, self.t_max)
        target = np.clip(a, f_lo, f_hi)
        for _ in range(iters):
            mid = np.sqrt(lo * hi)
            below = self._fn(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        out = np.where(zero, 0.0, np.sqrt(lo * hi))
        return float(out[0]) if scalar else out


@dataclass(frozen=True)
class RateAssumptions:
    """Named theory constants; consumed by err_n formulas, the Lepskii rule,
    and reporting.  None of them is estimated from data."""

    c_tc: float = 1.0
    eta: float = 0.0
    c_err: float = 1.0
    c_dec: float = 1.5
    beta: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0
    c_bd: float = 1.0
    q: float = 2.0

    def __post_init__(self):
        if self.c_tc < 1 or self.c_err < 1:
            raise InvalidInputError("C_tc and C_err must be >= 1")
        if self.c_dec <= 1:
            raise InvalidInputError("C_dec must exceed 1")
        if not 0 <= self.beta1 < 0.5:
            raise InvalidInputError("beta1 must lie in [0, 1/2)")
        if self.q < 1:
            raise InvalidInputError("q must be >= 1")


def hoelder(nu, t_max=1.0):
    """Hoelder index function ``t^nu`` for ``nu in (0, 1/2]``."""
    if not 0 < nu <= 0.5:
        raise InvalidInputError("Hoelder exponent must lie in (0, 1/2]")
    return IndexFunction(lambda t: t**nu, kind="Hoelder", param=float(nu), t_max=t_max)


def hoelder_additive(nu, t_max=1.0):
    """Additive-form counterpart of Hilbert-space smoothness ``nu``:
    ``t^(2 nu / (1 + 2 nu))``.  Feeding it through ``big_psi``/``lambda_of``
    reproduces the familiar order ``err^(2 nu / (1 + 2 nu))``."""
    if not 0 < nu <= 0.5:
        raise InvalidInputError("Hoelder exponent must lie in (0, 1/2]")
    return hoelder(2 * nu / (1 + 2 * nu), t_max=t_max)


def log_index(p, t_max=1.0):
    """Logarithmic index function ``(-ln t)^(-p)`` up to ``exp(-p-1)``,
    extended beyond the splice by its tangent line, which keeps the function
    concave and continuously differentiable."""
    if p <= 0:
        raise InvalidInputError("logarithmic exponent must be positive")
    t0 = np.exp(-p - 1.0)
    a = (p + 1.0) ** (-p)
    slope = p * (p + 1.0) ** (-p - 1.0) / t0

    def fn(t):
        t = np.asarray(t, dtype=float)
        out = np.empty_like(t)
        core = t <= t0
        out[core] = (-np.log(t[core])) ** (-p)
        out[~core] = a + slope * (t[~core] - t0)
        return out

    return IndexFunction(fn, kind="Log", param=float(p), t_max=t_max)


def theta(phi):
    """``Theta(t) = t phi(t)^2``."""
    return IndexFunction(
        lambda t: t * phi._fn(t) ** 2,
        kind=f"Theta[{phi.kind}]",
        param=phi.param,
        t_min=phi.t_min,
        t_max=phi.t_max,
    )


def vartheta(phi):
    """``vartheta(t) = sqrt(Theta(t)) = sqrt(t) phi(t)``."""
    return IndexFunction(
        lambda t: np.sqrt(t) * phi._fn(t),
        kind=f"vartheta[{phi.kind}]",
        param=phi.param,
        t_min=phi.t_min,
        t_max=phi.t_max,
    )


def _loglog_interp(x_knots, y_knots):
    lx, ly = np.log(x_knots), np.log(y_knots)

    def fn(t):
        return np.exp(np.interp(np.log(np.asarray(t, dtype=float)), lx, ly))

    return fn


def psi_of(phi, per_decade=GRID_PER_DECADE, decades=GRID_DECADES):
    """``psi(s) = 1/phi'(phi^{-1}(s)) = (phi^{-1})'(s)`` with ``psi(0) = 0``.

    ``phi`` must be strictly concave and differentiable with unbounded slope
    at zero on the working interval; the derivative of ``phi^{-1}`` is taken
    by fourth-order differences on a cached log-spaced grid.  Where ``phi``
    stops being strictly concave (for instance on the affine tail of the
    logarithmic family) the grid is truncated to the strictly concave part.
    """
    h = _DIFF_STEP
    margin = np.exp(2 * h)
    s_hi = phi(phi.t_max) / margin
    s_lo = max(phi(phi.t_min) * margin, s_hi * 10.0 ** (-decades))
    if not s_lo < s_hi:
        raise UnsupportedModeError("phi range too narrow for the working grid")
    n = int(np.ceil(np.log10(s_hi / s_lo) * per_decade)) + 1
    s = np.geomspace(s_lo, s_hi, n)
    f_p2 = phi.inverse(s * np.exp(2 * h))
    f_p1 = phi.inverse(s * np.exp(h))
    f_m1 = phi.inverse(s * np.exp(-h))
    f_m2 = phi.inverse(s * np.exp(-2 * h))
    psi_vals = (-f_p2 + 8 * f_p1 - 8 * f_m1 + f_m2) / (12 * h * s)
    if np.any(psi_vals <= 0):
        raise UnsupportedModeError("phi is not an admissible concave index function")
    # keep the strictly increasing prefix (psi flattens where phi' is constant)
    rel_inc = np.diff(psi_vals) / psi_vals[:-1]
    flat = np.nonzero(rel_inc < 1e-8)[0]
    if flat.size:
        keep = flat[0] + 1
        if keep < 10:
            raise UnsupportedModeError("phi is not strictly concave on the grid")
        s, psi_vals = s[:keep], psi_vals[:keep]
    out = IndexFunction(
        _loglog_interp(s, psi_vals),
        kind=f"psi[{phi.kind}]",
        param=phi.param,
        t_min=s[0],
        t_max=s[-1],
    )
    out._knots = (s, psi_vals)
    return out


def _psi_inverse_extended(psi):
    """Inverse of psi from its knot cache, extended below the grid by the
    power law of the first segment (used only for the Psi quadrature)."""
    s, vals = psi._knots
    lv, ls = np.log(vals), np.log(s)
    head_slope = (ls[1] - ls[0]) / (lv[1] - lv[0])

    def inv(r):
        r = np.asarray(r, dtype=float)
        out = np.exp(np.interp(np.log(np.maximum(r, 1e-300)), lv, ls))
        low = r < vals[0]
        if np.any(low):
            out = np.where(low, s[0] * (r / vals[0]) ** head_slope, out)
        return out

    return inv, float(vals[0]), float(vals[-1])


def big_psi(phi, per_decade=GRID_PER_DECADE, decades=GRID_DECADES):
    """``Psi(t) = int_0^t psi^{-1}(s) ds`` by adaptive quadrature
    (relative tolerance 1e-8), cached on a log-spaced knot grid."""
    psi = psi_of(phi, per_decade=per_decade, decades=decades)
    inv, r_lo, r_hi = _psi_inverse_extended(psi)
    n = int(np.ceil(np.log10(r_hi / r_lo) * per_decade)) + 1
    knots = np.geomspace(r_lo, r_hi, n)
    scalar_inv = lambda x: float(inv(x))
    values = np.empty(n)
    values[0] = quad(scalar_inv, 0.0, knots[0], epsabs=1e-300, epsrel=1e-8, limit=200)[0]
    for k in range(1, n):
        seg = quad(scalar_inv, knots[k - 1], knots[k], epsabs=1e-300, epsrel=1e-8, limit=200)[0]
        values[k] = values[k - 1] + seg
    out = IndexFunction(
        _loglog_interp(knots, values),
        kind=f"Psi[{phi.kind}]",
        param=phi.param,
        t_min=knots[0],
        t_max=knots[-1],
    )
    out._knots = (knots, values)
    return out


def _upper_concave_hull(x, y):
    """Vertices of the least concave majorant through (0, 0)."""
    pts = [(0.0, 0.0)] + list(zip(x, y))
    hull = []
    for p in pts:
        while len(hull) >= 2:
            ox, oy = hull[-2]
            ax, ay = hull[-1]
            if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    hx = np.array([p[0] for p in hull])
    hy = np.array([p[1] for p in hull])
    return hx, hy


def lambda_of(phi, per_decade=GRID_PER_DECADE, decades=GRID_DECADES):
    """Squared least concave majorant of ``t -> sqrt(Psi(t)/t)``.

    The infimum over concave index functions is realized discretely as the
    upper hull over the cached knot grid, so grid resolution bounds the
    approximation; for Hoelder-type inputs ``sqrt(Psi(t)/t)`` is already
    concave and the hull touches every knot.
    """
    Psi = big_psi(phi, per_decade=per_decade, decades=decades)
    knots, psi_vals = Psi._knots
    ratio = np.sqrt(psi_vals / knots)
    hx, hy = _upper_concave_hull(knots, ratio)

    def fn(t):
        t = np.asarray(t, dtype=float)
        return np.interp(t, hx, hy) ** 2

    out = IndexFunction(
        fn,
        kind=f"Lambda[{phi.kind}]",
        param=phi.param,
        t_min=knots[0],
        t_max=knots[-1],
    )
    out._knots = (knots, ratio**2)
    out._hull = (hx, hy)
    return out


def fit_rate(xs, ys):
    """Least-squares slope of ``ln y`` against ``ln x`` and its r^2."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 3 or ys.size != xs.size:
        raise InvalidInputError("need at least 3 matching points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise InvalidInputError("rate fits need positive data")
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(r2)


def tangential_cone_probe(model, u_samples, v_samples, norm_power=1.0):
    """Sampled estimate of the tangential-cone constant.

    Returns the maximum over the given pairs of
    ``||F(u) + F'(u; v-u) - F(v)||^r / ||F(u) - F(v)||^r``; pairs with
    coinciding outputs are skipped.  Zero for linear operators.
    """
    worst = 0.0
    for u, v in zip(u_samples, v_samples):
        fu = model.apply(u)
        fv = model.apply(v)
        den = model.output_grid.norm(fu.values - fv.values)
        if den == 0.0:
            continue
        lin = fu.values + model.derivative(u, v - u).values - fv.values
        num = model.output_grid.norm(lin)
        worst = max(worst, (num / den) ** norm_power)
    return worst
