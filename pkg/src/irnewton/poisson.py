"""Poisson count simulation, binning operators, and effective noise levels.

Counts are drawn per bin with the exact binned means, which is
distributionally identical to thinning a point process and avoids storing
point sets.  The binning operators are the cell-integral map ``S_J``, its
adjoint ``S_J*`` (piecewise-constant embedding), and the induced L2
projection ``P_J = S_J* S_J``.

The module also evaluates the data-dependent effective noise level of the
Poisson model, whose empirical decay like ``1/sqrt(t)`` in the exposure time
is what the stopping rules consume.
"""

import math
from dataclasses import dataclass

import numpy as np

from .core import Grid, GridAlignmentError, InvalidInputError, Signal
from .misfit import kl_divergence

__all__ = [
    "Binning",
    "CountData",
    "sample_counts",
    "bin_apply",
    "bin_adjoint",
    "bin_project",
    "err_poisson",
    "err_discretization",
    "err_n_estimate",
    "replicate_seed",
]


@dataclass(frozen=True, eq=False)
class Binning:
    """Partition of a measurement grid into J bins.

    ``labels`` assigns every grid point to a bin index in ``0..J-1``; bins
    must be nonempty, so every bin has positive measure.
    """

    grid: Grid
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=int)
        if lab.shape != (self.grid.size,):
            raise InvalidInputError("one bin label per grid point required")
        if lab.min() < 0:
            raise InvalidInputError("bin labels must be nonnegative")
        J = int(lab.max()) + 1
        counts = np.bincount(lab, minlength=J)
        if np.any(counts == 0):
            raise InvalidInputError("every bin must contain at least one point")
        object.__setattr__(self, "labels", lab)
        measures = np.bincount(lab, weights=self.grid.weights, minlength=J)
        object.__setattr__(self, "_measures", measures)

    @property
    def n_bins(self):
        return self._measures.shape[0]

    @property
    def measures(self):
        return self._measures

    def apply(self, values):
        """Cell integrals ``(S_J g)_j = sum_{i in bin j} w_i g_i``."""
        return np.bincount(
            self.labels, weights=self.grid.weights * np.asarray(values), minlength=self.n_bins
        )

    def adjoint(self, v):
        """Piecewise-constant embedding ``S_J* v = sum_j v_j / |M_j| 1_{M_j}``."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_bins,):
            raise InvalidInputError(f"expected {self.n_bins} bin values, got {v.shape}")
        return v[self.labels] / self._measures[self.labels]

    def project(self, values):
        """L2-orthogonal projection onto bin-wise constants."""
        return self.adjoint(self.apply(values))

    @staticmethod
    def identity(grid):
        """One bin per grid point; bin measures equal quadrature weights."""
        return Binning(grid, np.arange(grid.size))

    @staticmethod
    def regular(grid, n_bins):
        """Contiguous blocks of grid points, as equal as the sizes allow."""
        if not 1 <= n_bins <= grid.size:
            raise InvalidInputError("need 1 <= n_bins <= number of grid points")
        labels = (np.arange(grid.size) * n_bins) // grid.size
        return Binning(grid, labels)


@dataclass(frozen=True, eq=False)
class CountData:
    """Binned photon counts with exposure time and bin geometry."""

    counts: np.ndarray
    t: float
    binning: Binning
    seed: int = None

    def __post_init__(self):
        c = np.asarray(self.counts)
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.round(c)):
                raise InvalidInputError("counts must be integers")
            c = c.astype(np.int64)
        if np.any(c < 0):
            raise InvalidInputError("counts must be nonnegative")
        if c.shape != (self.binning.n_bins,):
            raise InvalidInputError("one count per bin required")
        if not self.t > 0:
            raise InvalidInputError("exposure time must be positive")
        object.__setattr__(self, "counts", c)

    @property
    def grid(self):
        return self.binning.grid

    @property
    def bin_measures(self):
        return self.binning.measures

    def empirical_density(self):
        """Observed intensity ``S_J*(counts / t)`` on the measurement grid."""
        return Signal(self.binning.adjoint(self.counts / self.t), self.grid)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(f"# t={self.t!r} seed={self.seed!r}\n")
            fh.write("bin_index,count,measure\n")
            for j, (c, m) in enumerate(zip(self.counts, self.binning.measures)):
                fh.write(f"{j},{int(c)},{m!r}\n")

    @staticmethod
    def from_csv(path, binning):
        with open(path) as fh:
            meta = fh.readline().strip()
            header = fh.readline().strip()
            if header != "bin_index,count,measure":
                raise InvalidInputError(f"unexpected header {header!r}")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        fields = dict(item.split("=") for item in meta.lstrip("# ").split())
        counts = np.zeros(binning.n_bins, dtype=np.int64)
        for j, c, m in rows:
            counts[int(j)] = int(c)
            if not math.isclose(float(m), binning.measures[int(j)], rel_tol=1e-9):
                raise InvalidInputError("bin measures do not match the binning")
        seed = None if fields["seed"] == "None" else int(fields["seed"])
        return CountData(counts, float(fields["t"]), binning, seed=seed)


def replicate_seed(base_seed, index):
    """Seed for replicate ``index`` derived from ``base_seed``."""
    return int(base_seed) + int(index)


def sample_counts(gdag, t, binning, seed):
    """Draw Poisson counts with mean ``t * (S_J gdag)_j`` per bin.

    Deterministic for a fixed seed; the seed is recorded on the returned
    :class:`CountData`.
    """
    if not gdag.grid.compatible(binning.grid):
        raise GridAlignmentError("intensity not aligned with the binning grid")
    if np.any(gdag.values < 0):
        raise InvalidInputError("Poisson intensity must be nonnegative")
    if not t > 0:
        raise InvalidInputError("exposure time must be positive")
    means = t * binning.apply(gdag.values)
    rng = np.random.default_rng(seed)
    counts = rng.poisson(means)
    return CountData(counts, float(t), binning, seed=seed)


def bin_apply(binning, g):
    """Per-bin quadrature integrals ``S_J g`` of a signal."""
    if not g.grid.compatible(binning.grid):
        raise GridAlignmentError("signal not aligned with the binning grid")
    return binning.apply(g.values)


def bin_adjoint(binning, v):
    """Piecewise-constant signal ``S_J* v`` from per-bin values."""
    return Signal(binning.adjoint(v), binning.grid)


def bin_project(binning, g):
    """``P_J g``, the L2 projection of a signal onto bin-wise constants."""
    if not g.grid.compatible(binning.grid):
        raise GridAlignmentError("signal not aligned with the binning grid")
    return Signal(binning.project(g.values), binning.grid)


def err_poisson(g, counts, gdag, sigma=0.0):
    """Stochastic part of the effective noise level in the binned model:
    ``| sum_j ln((S_J g)_j + sigma) ((1/t) counts_j - (S_J gdag)_j) |``.

    For ``sigma > 0`` an infeasible ``g < -sigma/2`` returns 0 (the branch on
    which the misfit itself is infinite); for ``sigma = 0`` a bin with
    vanishing predicted mass but observed or exact photons makes the value
    infinite.
    """
    binning = counts.binning
    if not g.grid.compatible(binning.grid) or not gdag.grid.compatible(binning.grid):
        raise GridAlignmentError("signals not aligned with the counts' binning")
    if sigma > 0 and np.any(g.values < -sigma / 2):
        return 0.0
    pred = binning.apply(g.values) + sigma
    fluct = counts.counts / counts.t - binning.apply(gdag.values)
    if sigma == 0:
        bad = (pred <= 0) & (np.abs(fluct) > 0)
        if np.any(bad):
            return math.inf
    ok = pred > 0
    logs = np.zeros_like(pred)
    logs[ok] = np.log(pred[ok])
    return float(abs(np.sum(logs * fluct)))


def err_discretization(g, gdag, binning):
    """Discretization part of the effective noise level:
    ``|KL(g; gdag) - KL(P_J g; P_J gdag)|`` on the fine grid."""
    kl_fine = kl_divergence(g, gdag, 0.0)
    kl_proj = kl_divergence(bin_project(binning, g), bin_project(binning, gdag), 0.0)
    if math.isinf(kl_fine) and math.isinf(kl_proj):
        return math.inf
    return abs(kl_fine - kl_proj)


def err_n_estimate(variant, trace, counts, gdag, constants=None):
    """Per-step effective noise levels of a Newton run.

    Variant ``"A"`` combines the noise levels of consecutive nonlinear
    outputs, ``(1/C_err) err(F(u_{n+1})) + 2 eta C_tc err(F(u_n)) +
    C_tc C_err err(gdag)``.  Variant ``"B"`` uses the linearized outputs,
    ``err(F(u_n) + F'(u_n; u_{n+1}-u_n)) + C_err err(F(u_n) +
    F'(u_n; u_dag-u_n))``; its second term needs the true solution and is
    available only on traces recorded in synthetic-truth mode.

    Returns an array with one value per completed outer step.
    """
    from .core import UnsupportedModeError

    constants = dict(constants or {})
    c_err = float(constants.get("C_err", 1.0))
    c_tc = float(constants.get("C_tc", 1.0))
    eta = float(constants.get("eta", 0.0))
    n_steps = trace.n_steps
    values = np.zeros(n_steps)
    if variant == "A":
        for n in range(n_steps):
            sig = trace.sigmas[n]
            e_next = err_poisson(trace.outputs[n + 1], counts, gdag, sig)
            e_cur = err_poisson(trace.outputs[n], counts, gdag, sig)
            e_dag = err_poisson(gdag, counts, gdag, sig)
            values[n] = e_next / c_err + 2 * eta * c_tc * e_cur + c_tc * c_err * e_dag
    elif variant == "B":
        if any(v is None for v in trace.lin_truth_outputs[:n_steps]):
            raise UnsupportedModeError(
                "variant B needs linearized-truth outputs; rerun with the true solution"
            )
        for n in range(n_steps):
            sig = trace.sigmas[n]
            e_lin = err_poisson(trace.lin_outputs[n], counts, gdag, sig)
            e_truth = err_poisson(trace.lin_truth_outputs[n], counts, gdag, sig)
            values[n] = e_lin + c_err * e_truth
    else:
        raise InvalidInputError(f"unknown err_n variant {variant!r}")
    return values
