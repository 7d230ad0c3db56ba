"""Ordered-logistic probabilities and Dirichlet-anchored cutpoints.

The partially observed Position+Consistency score (0..4) is modeled with a
threshold ordered-logistic likelihood.  Rather than sampling cutpoints under
an ordering constraint, the sampler parameterizes a length-5 probability
simplex plus an anchor point; the cutpoints are the deterministic image

    c_k = phi + logit(p_0 + ... + p_k),    k = 0..3

so that the ordered-logistic pmf evaluated at eta = phi reproduces the
simplex exactly.  A Dirichlet prior on the simplex then induces a proper
prior on the cutpoints without an explicit Jacobian term.

Every function below accepts plain numpy values or autodiff ``Var`` nodes,
so the same code serves the model's differentiable log-density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

K_CATEGORIES = 5

_PMF_FLOOR = 1e-300


@dataclass(frozen=True)
class CutpointSet:
    """Anchor, simplex, and the induced strictly increasing cutpoints."""

    phi: float
    probs: np.ndarray
    cutpoints: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        cuts = np.asarray(self.cutpoints, dtype=float)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "cutpoints", cuts)
        if probs.shape != (K_CATEGORIES,):
            raise ValueError(f"simplex must have length {K_CATEGORIES}")
        if np.any(probs <= 0.0):
            raise ValueError("simplex entries must be strictly positive")
        if abs(float(probs.sum()) - 1.0) > 1e-12:
            raise ValueError("simplex must sum to 1 within 1e-12")
        if cuts.shape != (K_CATEGORIES - 1,):
            raise ValueError("expected 4 cutpoints")
        if np.any(np.diff(cuts) <= 0.0):
            raise ValueError("cutpoints must be strictly increasing")
        if not np.isfinite(self.phi):
            raise ValueError("phi must be finite")


def cutpoints_from_simplex(probs, phi) -> CutpointSet:
    """Build the anchored cutpoints induced by a category simplex."""
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (K_CATEGORIES,):
        raise ValueError(f"simplex must have length {K_CATEGORIES}")
    if np.any(probs <= 0.0):
        raise ValueError("simplex entries must be strictly positive")
    cum = np.cumsum(probs)[:-1]
    if np.any(cum >= 1.0 - 1e-15):
        raise ValueError("cumulative probability reaches 1 before the last entry")
    cuts = phi + np.log(cum) - np.log1p(-cum)
    return CutpointSet(phi=float(phi), probs=probs, cutpoints=cuts)


def ordered_logistic_logpmf(k, eta, cutpoints):
    """Log pmf of category ``k`` under the threshold ordered logistic.

    ``cutpoints`` is any indexable of ``len(cutpoints) + 1 == K`` strictly
    increasing thresholds (numpy array or autodiff scalars).  ``eta`` may be
    a scalar or a vector of linear predictors.

    The three branches are sigma-complement at the bottom, a difference of
    sigmoids in the interior, and a plain sigmoid at the top.  The interior
    difference is evaluated through the exact factorization
    ``sigma(a) - sigma(b) = sigma(a) * sigma(-b) * (1 - exp(b - a))`` whose
    log never cancels catastrophically for extreme eta.
    """
    n_cuts = len(cutpoints)
    if not 0 <= k <= n_cuts:
        raise ValueError(f"category {k} outside 0..{n_cuts}")
    if k == 0:
        return ad.log_sigmoid(-(eta - cutpoints[0]))
    if k == n_cuts:
        return ad.log_sigmoid(eta - cutpoints[n_cuts - 1])
    a = eta - cutpoints[k - 1]
    b = eta - cutpoints[k]
    # b - a = c[k-1] - c[k] < 0 independent of eta.
    gap = cutpoints[k - 1] - cutpoints[k]
    one_minus = ad.clamp_min(-_expm1(gap), _PMF_FLOOR)
    return ad.log_sigmoid(a) + ad.log_sigmoid(-b) + ad.log(one_minus)


def ordered_logistic_pmf(k, eta, cutpoints):
    """Probability of category ``k``; plain-value convenience wrapper."""
    cuts = np.asarray(cutpoints, dtype=float)
    if cuts.ndim != 1 or cuts.size < 1:
        raise ValueError("cutpoints must be a non-empty 1-d sequence")
    if np.any(np.diff(cuts) <= 0.0):
        raise ValueError("cutpoints must be strictly increasing")
    return np.exp(ordered_logistic_logpmf(k, eta, cuts))


def ordinal_prior_logdensity(cs: CutpointSet, alpha) -> float:
    """Log Dirichlet(alpha) density of the cutpoint set's simplex.

    The sampler parameterizes the simplex itself (stick-breaking to
    unconstrained coordinates) and derives cutpoints deterministically, so
    the change-of-variables Jacobian to cutpoint space never has to be
    computed; this density plus the stick-breaking Jacobian is the whole
    prior story.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (K_CATEGORIES,):
        raise ValueError(f"alpha must have length {K_CATEGORIES}")
    if np.any(alpha <= 0.0):
        raise ValueError("alpha entries must be positive")
    p = cs.probs
    if np.any(p <= 0.0):
        raise ValueError("simplex entries must be strictly positive")
    norm = math.lgamma(float(alpha.sum())) - sum(math.lgamma(a) for a in alpha)
    return float(norm + np.sum((alpha - 1.0) * np.log(p)))


def _expm1(x):
    if isinstance(x, ad.Var):
        v = np.expm1(x.value)
        return ad.Var(v, (x,), lambda g: (g * np.exp(x.value),), op="expm1")
    return np.expm1(x)
