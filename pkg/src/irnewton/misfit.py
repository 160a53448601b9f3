"""Data misfit functionals and their second-order models.

Three fidelities are shipped: squared L2 distance, the offset Kullback-Leibler
divergence / Poisson negative log-likelihood, and Pearson's phi^2 distance
with a cutoff.  Each one knows its value on noisy observations, the
corresponding exact-data divergence, and the (weight, residual) pair defining
the least-squares form of its second-order Taylor model, which is what the
inner Gauss-Newton solver consumes.

Infinite values are returned as ``math.inf`` and propagated; they are never
raised as exceptions.
"""

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    FeasibilityError,
    GridAlignmentError,
    InvalidInputError,
    Signal,
    require_aligned,
)

__all__ = [
    "OffsetParam",
    "kl_divergence",
    "poisson_neg_loglik",
    "l2_misfit",
    "pearson_phi2",
    "quadratic_model",
    "Misfit",
    "L2Misfit",
    "KLMisfit",
    "PearsonMisfit",
]


@dataclass(frozen=True)
class OffsetParam:
    """Offset (shift) parameter for the Kullback-Leibler fidelity.

    ``sigma`` is the initial offset, reduced by the factor ``decay`` in each
    outer Newton step; the side constraint tied to it is ``g >= -sigma/2``.
    """

    sigma: float = 0.0
    decay: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidInputError("offset sigma must be >= 0")
        if not 0 < self.decay <= 1:
            raise InvalidInputError("offset decay must lie in (0, 1]")

    def at_step(self, n):
        return self.sigma * self.decay**n


def _check_sigma(sigma):
    if not np.isfinite(sigma) or sigma < 0:
        raise InvalidInputError("sigma must be a finite nonnegative number")


def kl_divergence(g, gdag, sigma=0.0):
    """Offset Kullback-Leibler divergence between densities on a grid.

    Returns ``sum_j w_j [g_j - gdag_j - (gdag_j+sigma) ln((g_j+sigma) /
    (gdag_j+sigma))]`` over the set ``{gdag + sigma > 0}`` when the side
    constraint ``g >= -sigma/2`` holds, and ``inf`` otherwise.  With
    ``sigma = 0`` the convention ``0 ln 0 = 0`` applies and the value is
    ``inf`` as soon as ``g_j = 0 < gdag_j`` somewhere.
    """
    require_aligned(g, gdag)
    _check_sigma(sigma)
    gv, dv = g.values, gdag.values
    if np.any(gv < -sigma / 2):
        return math.inf
    a = gv + sigma
    b = dv + sigma
    mask = b > 0
    if np.any(mask & (a == 0.0)):
        return math.inf
    am, bm = a[mask], b[mask]
    terms = am - bm - bm * np.log(am / bm)
    return float(np.sum(g.grid.weights[mask] * terms))


def poisson_neg_loglik(g, counts, sigma=0.0):
    """Negative Poisson log-likelihood of a predicted density given counts.

    ``g`` lives on the base grid of the count data's binning; the likelihood
    is evaluated on bin averages:
    ``sum_j [(S_J g)_j - sigma |M_j| ln(ybar_j+sigma)]
    - sum_j (counts_j/t) ln(ybar_j+sigma)`` with ``ybar_j`` the mean of ``g``
    over bin j.  Returns ``inf`` if ``g < -sigma/2`` anywhere, or if
    ``sigma = 0`` and some bin with observed counts has vanishing predicted
    mass.
    """
    _check_sigma(sigma)
    if np.any(counts.counts < 0):
        raise InvalidInputError("counts must be nonnegative")
    binning = counts.binning
    if not g.grid.compatible(binning.grid):
        raise GridAlignmentError("signal not aligned with the counts' binning")
    if np.any(g.values < -sigma / 2):
        return math.inf
    integrals = binning.apply(g.values)
    measures = binning.measures
    ybar = integrals / measures
    shifted = ybar + sigma
    obs = counts.counts / counts.t
    if np.any((shifted <= 0) & (obs > 0)):
        return math.inf
    log_ok = shifted > 0
    log_terms = np.zeros_like(shifted)
    log_terms[log_ok] = np.log(shifted[log_ok])
    value = integrals.sum() - sigma * np.sum(measures * log_terms)
    value -= np.sum(obs * log_terms)
    return float(value)


def l2_misfit(g, obs):
    """Quadrature-weighted squared L2 distance; symmetric, zero iff equal."""
    require_aligned(g, obs)
    d = g.values - obs.values
    return float(np.sum(g.grid.weights * d * d))


def pearson_phi2(g, obs, cutoff):
    """Pearson phi^2 distance ``sum_j w_j |g_j - obs_j|^2 / max(obs_j, c)``.

    The cutoff guards the denominator against the many zero counts typical
    for Poisson data.
    """
    if cutoff <= 0:
        raise InvalidInputError("pearson cutoff must be positive")
    require_aligned(g, obs)
    d = g.values - obs.values
    den = np.maximum(obs.values, cutoff)
    return float(np.sum(g.grid.weights * d * d / den))


class Misfit:
    """Behavioral contract of a data fidelity.

    ``quadratic_model`` returns ``(weight, residual)`` such that the
    least-squares functional ``sum w 1/2 (weight * F'h + residual)^2`` is the
    second-order Taylor model of ``quad_scale * value`` around the current
    linearized output (``quad_scale`` is 1 for the Kullback-Leibler fidelity
    and 1/2 for the L2 and Pearson fidelities, following the usual
    conventions for each).
    """

    constrained = False  # has a pointwise side constraint g >= -sigma/2
    quad_scale = 0.5
    sigma = 0.0

    def with_sigma(self, sigma):
        """Return a variant using offset ``sigma``; identity for fidelities
        without an offset."""
        return self

    def value(self, g, obs):
        raise NotImplementedError

    def exact_divergence(self, g, gdag):
        raise NotImplementedError

    def quadratic_model(self, g, obs):
        raise NotImplementedError

    def gradient(self, g, obs):
        """Gradient of ``value`` with respect to the values of ``g``."""
        raise NotImplementedError

    def feasible(self, g, obs=None):
        return True

    def observed_density(self, obs, grid):
        """Normalize an observation to a density on ``grid``."""
        if isinstance(obs, Signal):
            if not obs.grid.compatible(grid):
                raise GridAlignmentError("observation not aligned with the model output grid")
            return obs.values
        density = obs.empirical_density()
        if not density.grid.compatible(grid):
            raise GridAlignmentError("observation not aligned with the model output grid")
        return density.values


class L2Misfit(Misfit):
    """Squared L2 fidelity; the classical IRGNM choice."""

    def value(self, g, obs):
        ghat = self.observed_density(obs, g.grid)
        d = g.values - ghat
        return float(np.sum(g.grid.weights * d * d))

    def exact_divergence(self, g, gdag):
        return l2_misfit(g, gdag)

    def quadratic_model(self, g, obs):
        ghat = self.observed_density(obs, g.grid)
        weight = g.with_values(np.ones(g.grid.size))
        residual = g.with_values(g.values - ghat)
        return weight, residual

    def gradient(self, g, obs):
        ghat = self.observed_density(obs, g.grid)
        return 2.0 * g.grid.weights * (g.values - ghat)


class KLMisfit(Misfit):
    """Offset Kullback-Leibler fidelity for Poisson-distributed counts.

    On count data the value is the binned negative log-likelihood; on a
    density observation it is the quadrature form
    ``sum w [g - sigma ln(g+sigma)] - sum w ghat ln(g+sigma)``.
    """

    constrained = True
    quad_scale = 1.0

    def __init__(self, sigma=0.0):
        _check_sigma(sigma)
        self.sigma = float(sigma)

    def with_sigma(self, sigma):
        return KLMisfit(sigma)

    def value(self, g, obs):
        if not isinstance(obs, Signal):
            return poisson_neg_loglik(g, obs, self.sigma)
        ghat = self.observed_density(obs, g.grid)
        if np.any(g.values < -self.sigma / 2):
            return math.inf
        shifted = g.values + self.sigma
        if np.any((shifted <= 0) & (ghat > 0)):
            return math.inf
        log_ok = shifted > 0
        logs = np.zeros_like(shifted)
        logs[log_ok] = np.log(shifted[log_ok])
        w = g.grid.weights
        return float(
            np.sum(w * g.values) - self.sigma * np.sum(w * logs) - np.sum(w * ghat * logs)
        )

    def exact_divergence(self, g, gdag):
        return kl_divergence(g, gdag, self.sigma)

    def quadratic_model(self, g, obs):
        ghat = self.observed_density(obs, g.grid)
        den = g.values + self.sigma
        if np.any(den <= 0):
            raise FeasibilityError(
                "predicted density reached -sigma; shrink the step"
            )
        num = ghat + self.sigma
        root = np.sqrt(num)
        weight = g.with_values(root / den)
        residual = g.with_values(
            np.divide(g.values - ghat, root, out=np.zeros_like(root), where=root > 0)
        )
        return weight, residual

    def gradient(self, g, obs):
        ghat = self.observed_density(obs, g.grid)
        return g.grid.weights * (1.0 - (ghat + self.sigma) / (g.values + self.sigma))

    def feasible(self, g, obs=None):
        if np.any(g.values < -self.sigma / 2):
            return False
        if self.sigma == 0 and obs is not None:
            ghat = self.observed_density(obs, g.grid)
            if np.any((g.values == 0) & (ghat > 0)):
                return False
        return True

    def shift_constant(self, gdag):
        """Additive constant ``s(gdag)`` tying the likelihood to the exact
        divergence; used by consistency tests only, the iteration never needs
        it."""
        shifted = gdag.values + self.sigma
        logs = np.where(shifted > 0, np.log(np.maximum(shifted, 1e-300)), 0.0)
        terms = gdag.values - shifted * logs
        return float(np.sum(gdag.grid.weights * terms))


class PearsonMisfit(Misfit):
    """Pearson phi^2 fidelity with denominator cutoff."""

    def __init__(self, cutoff=0.2):
        if cutoff <= 0:
            raise InvalidInputError("pearson cutoff must be positive")
        self.cutoff = float(cutoff)

    def value(self, g, obs):
        ghat = self.observed_density(obs, g.grid)
        return pearson_phi2(g, g.with_values(ghat), self.cutoff)

    def exact_divergence(self, g, gdag):
        return pearson_phi2(g, gdag, self.cutoff)

    def quadratic_model(self, g, obs):
        ghat = self.observed_density(obs, g.grid)
        root = np.sqrt(np.maximum(ghat, self.cutoff))
        weight = g.with_values(1.0 / root)
        residual = g.with_values((g.values - ghat) / root)
        return weight, residual

    def gradient(self, g, obs):
        ghat = self.observed_density(obs, g.grid)
        return 2.0 * g.grid.weights * (g.values - ghat) / np.maximum(ghat, self.cutoff)


def quadratic_model(misfit, g, obs, sigma=None):
    """(weight, residual) of the second-order model of ``misfit`` at ``g``,
    optionally overriding the offset."""
    m = misfit if sigma is None else misfit.with_sigma(sigma)
    return m.quadratic_model(g, obs)
