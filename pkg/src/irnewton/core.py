"""Domain types shared by all modules: grids, signals, forward-model contract,
and the quadratic penalty with its Bregman distance.

All inner products are quadrature-weighted sums over grid points.  Types are
immutable after construction; operations are pure functions, so everything in
here is safe to share across concurrent runs.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridAlignmentError",
    "InvalidInputError",
    "FeasibilityError",
    "UnsupportedModeError",
    "Grid",
    "Signal",
    "ForwardModel",
    "IdentityGram",
    "SobolevGram",
    "QuadraticPenalty",
    "penalty_value",
    "bregman_distance",
    "check_adjoint",
    "check_derivative",
]


class GridAlignmentError(ValueError):
    """Signals or observations defined on incompatible grids."""


class InvalidInputError(ValueError):
    """Inputs violate a documented precondition (NaN, negative counts, ...)."""


class FeasibilityError(RuntimeError):
    """An iterate left the domain on which the misfit model is defined."""


class UnsupportedModeError(RuntimeError):
    """Operation needs information (true solution, err values) not available."""


@dataclass(frozen=True, eq=False)
class Grid:
    """Discretization of a measurement or parameter domain.

    Parameters
    ----------
    points : ndarray
        Coordinates, shape ``(n,)`` for 1D or ``(n, d)`` for d-dimensional
        point sets.
    weights : ndarray
        Strictly positive quadrature weights, shape ``(n,)``.  Their sum is
        the total measure of the domain.
    shape : tuple of int, optional
        Logical tensor shape for grids that are regular samplings of a box
        (used by FFT-based operators and matrix serialization).  ``None`` for
        irregular point sets.
    """

    points: np.ndarray
    weights: np.ndarray
    shape: tuple = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if pts.shape[0] < 1:
            raise InvalidInputError("grid needs at least one point")
        if w.shape != (pts.shape[0],):
            raise InvalidInputError("weights must be one per point")
        if not np.all(w > 0):
            raise InvalidInputError("quadrature weights must be strictly positive")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(m) for m in self.shape))
            if int(np.prod(self.shape)) != pts.shape[0]:
                raise InvalidInputError("shape does not match number of points")

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def total_measure(self):
        return float(self.weights.sum())

    def inner(self, a, b):
        """Weighted inner product of two value arrays."""
        return float(np.sum(self.weights * np.asarray(a) * np.asarray(b)))

    def norm(self, a):
        return float(np.sqrt(np.sum(self.weights * np.asarray(a) ** 2)))

    def compatible(self, other):
        if other is self:
            return True
        return (
            other.size == self.size
            and np.array_equal(other.weights, self.weights)
            and np.array_equal(other.points, self.points)
        )

    @staticmethod
    def periodic_1d(n, length=1.0):
        """Uniform grid on the circle of circumference ``length``."""
        h = length / n
        points = np.arange(n) * h
        weights = np.full(n, h)
        return Grid(points, weights, shape=(n,))

    @staticmethod
    def regular_2d(nx, ny, x_extent, y_extent, centered=True):
        """Tensor grid of cell centers on a rectangle.

        ``x_extent``/``y_extent`` are the side lengths; with ``centered`` the
        rectangle is symmetric about the origin.
        """
        hx, hy = x_extent / nx, y_extent / ny
        x = (np.arange(nx) + 0.5) * hx
        y = (np.arange(ny) + 0.5) * hy
        if centered:
            x -= x_extent / 2
            y -= y_extent / 2
        xx, yy = np.meshgrid(x, y, indexing="ij")
        points = np.column_stack([xx.ravel(), yy.ravel()])
        weights = np.full(nx * ny, hx * hy)
        return Grid(points, weights, shape=(nx, ny))


@dataclass(frozen=True, eq=False)
class Signal:
    """Real-valued function sampled on a grid."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.size,):
            raise GridAlignmentError(
                f"signal has {v.shape} values for a grid of size {self.grid.size}"
            )
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("signal values must be finite")
        object.__setattr__(self, "values", v)

    def with_values(self, values):
        return Signal(np.asarray(values, dtype=float), self.grid)

    def norm(self):
        return self.grid.norm(self.values)

    def __add__(self, other):
        require_aligned(self, other)
        return Signal(self.values + other.values, self.grid)

    def __sub__(self, other):
        require_aligned(self, other)
        return Signal(self.values - other.values, self.grid)

    def __mul__(self, scalar):
        return Signal(self.values * float(scalar), self.grid)

    __rmul__ = __mul__


def require_aligned(a, b):
    """Raise GridAlignmentError unless two signals share a grid."""
    if not a.grid.compatible(b.grid):
        raise GridAlignmentError("signals live on different grids")


class ForwardModel(ABC):
    """Operator F mapping parameters to measurement densities.

    Implementations provide the nonlinear map, its directional derivative
    ``F'(u; h)``, and the adjoint of the linearization with respect to the
    quadrature-weighted inner products of ``input_grid`` and ``output_grid``.
    """

    input_grid: Grid
    output_grid: Grid

    @abstractmethod
    def apply(self, u: Signal) -> Signal:
        ...

    @abstractmethod
    def derivative(self, u: Signal, h: Signal) -> Signal:
        ...

    @abstractmethod
    def adjoint_derivative(self, u: Signal, r: Signal) -> Signal:
        ...

    def domain_check(self, u: Signal) -> bool:
        """Membership test for the operator domain; default accepts any
        finite signal on the input grid."""
        return u.grid.compatible(self.input_grid) and bool(
            np.all(np.isfinite(u.values))
        )


class IdentityGram:
    """Trivial Gram operator: the plain weighted L2 inner product on X."""

    def __call__(self, values):
        return np.asarray(values, dtype=float)


class SobolevGram:
    """Sobolev-type Gram operator realized as the Fourier multiplier
    ``(1 + |k|^2)^s`` on a uniform periodic grid.

    ``k`` counts whole oscillations per domain, so ``s = 0`` gives the
    identity.  For signals living on a masked subset of a regular grid
    (``mask`` given as a boolean array of the full shape), the operator is
    embed-multiply-restrict, which stays symmetric positive definite on the
    subspace.
    """

    def __init__(self, shape, s, mask=None):
        if s < 0:
            raise InvalidInputError("Sobolev index must be >= 0")
        self.shape = tuple(int(m) for m in shape)
        self.s = float(s)
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        if self.mask is not None and self.mask.shape != self.shape:
            raise InvalidInputError("mask shape does not match grid shape")
        grids = np.meshgrid(
            *[np.fft.fftfreq(m, d=1.0 / m) for m in self.shape], indexing="ij"
        )
        k2 = sum(g**2 for g in grids)
        mult = (1.0 + k2) ** self.s
        # store the rfft layout actually used by rfftn
        self.multiplier = mult[..., : self.shape[-1] // 2 + 1]

    def __call__(self, values):
        v = np.asarray(values, dtype=float)
        if self.mask is None:
            work = v.reshape(self.shape)
        else:
            work = np.zeros(self.shape)
            work[self.mask] = v
        out = np.fft.irfftn(
            np.fft.rfftn(work) * self.multiplier, s=self.shape
        )
        if self.mask is None:
            return out.reshape(-1)
        return out[self.mask]


@dataclass(frozen=True, eq=False)
class QuadraticPenalty:
    """Quadratic penalty ``R(u) = <u - u0, G (u - u0)>`` with offset ``u0``.

    ``gram_apply`` realizes a symmetric positive definite weighting G (for
    example :class:`SobolevGram`); the induced Bregman distance between ``u``
    and ``uref`` is ``<u - uref, G (u - uref)>``.  ``q`` is the norm power
    used by the Lepskii rule and ``c_bd`` the norm-versus-Bregman constant;
    both default to the Hilbert-space values.
    """

    u0: Signal
    gram_apply: callable = field(default_factory=IdentityGram)
    q: float = 2.0
    c_bd: float = 1.0

    def __post_init__(self):
        if self.q < 1:
            raise InvalidInputError("norm power q must be >= 1")
        if self.c_bd <= 0:
            raise InvalidInputError("c_bd must be positive")

    @property
    def grid(self):
        return self.u0.grid

    def value(self, u):
        return penalty_value(self, u)

    def bregman(self, u, uref):
        return bregman_distance(self, u, uref)

    def gram(self, values):
        return self.gram_apply(np.asarray(values, dtype=float))

    def xnorm(self, u, uref=None):
        """Norm induced by G, of ``u`` or of ``u - uref``."""
        d = u.values if uref is None else u.values - uref.values
        return float(np.sqrt(max(self.grid.inner(d, self.gram(d)), 0.0)))


def penalty_value(penalty, u):
    """Evaluate ``R(u) = <u - u0, G (u - u0)>``; nonnegative."""
    require_aligned(u, penalty.u0)
    d = u.values - penalty.u0.values
    return float(penalty.grid.inner(d, penalty.gram(d)))


def bregman_distance(penalty, u, uref):
    """Bregman distance of the quadratic penalty between ``u`` and ``uref``.

    For a quadratic penalty this is ``<u - uref, G (u - uref)>``: symmetric,
    nonnegative, and equal to ``penalty_value`` with the offset moved to
    ``uref``.
    """
    require_aligned(u, uref)
    require_aligned(u, penalty.u0)
    d = u.values - uref.values
    return float(penalty.grid.inner(d, penalty.gram(d)))


def check_adjoint(model, u, trials=10, seed=0):
    """Randomized adjoint test for a forward model's linearization.

    Draws ``trials`` pairs of directions ``(h, r)`` and returns the maximum of
    ``|<F'(u;h), r>_Y - <h, F'[u]* r>_X| / (||h||_X ||r||_Y)``.  Deterministic
    for a fixed seed; zero directions are skipped.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        h = Signal(rng.standard_normal(model.input_grid.size), model.input_grid)
        r = Signal(rng.standard_normal(model.output_grid.size), model.output_grid)
        hn, rn = h.norm(), r.norm()
        if hn == 0.0 or rn == 0.0:
            continue
        lhs = model.output_grid.inner(model.derivative(u, h).values, r.values)
        rhs = model.input_grid.inner(h.values, model.adjoint_derivative(u, r).values)
        worst = max(worst, abs(lhs - rhs) / (hn * rn))
    return worst


def check_derivative(model, u, h=None, eps=(1e-3, 1e-4, 1e-5), seed=0):
    """Finite-difference consistency test for the directional derivative.

    Returns the observed order of ``||F(u+eps*h) - F(u) - eps*F'(u;h)|| / eps``
    as a log-log slope over the given step sizes.  For (numerically) exact
    linearizations the residuals vanish and the order is reported as ``inf``.
    """
    if h is None:
        rng = np.random.default_rng(seed)
        h = Signal(rng.standard_normal(model.input_grid.size), model.input_grid)
    f0 = model.apply(u)
    df = model.derivative(u, h)
    scale = max(f0.norm(), 1.0)
    errs = []
    for e in eps:
        pred = f0.values + e * df.values
        actual = model.apply(u.with_values(u.values + e * h.values)).values
        errs.append(model.output_grid.norm(actual - pred) / e)
    if max(errs) <= 1e-12 * scale:
        return float("inf")
    slope = np.polyfit(np.log(np.asarray(eps)), np.log(np.asarray(errs)), 1)[0]
    return float(slope)
