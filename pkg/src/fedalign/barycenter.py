"""Entropic Wasserstein barycenters on a fixed 1D grid.

``bregman_barycenter`` runs iterative Bregman projections (alternating
KL projections onto the input marginals and onto the common-marginal set)
on a shared support grid. ``quantile_barycenter_1d`` is the closed-form
W2 barycenter in 1D, used to check it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError, ValidationError
from .ot import LOG_DOMAIN_BELOW, SUM_TOL, DiscreteMeasure, build_cost

logger = logging.getLogger(__name__)

__all__ = [
    "BarycenterConfig",
    "BarycenterResult",
    "bregman_barycenter",
    "quantile_barycenter_1d",
    "bin_to_grid",
]


@dataclass(frozen=True)
class BarycenterConfig:
    """Settings for :func:`bregman_barycenter`.

    ``weights=None`` means uniform weights over the inputs.
    """

    epsilon: float = 1e-1
    weights: Optional[Sequence[float]] = None
    max_iterations: int = 10_000
    tolerance: float = 1e-7
    p: float = 2.0
    log_domain: Optional[bool] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1) > SUM_TOL:
                raise ValidationError("barycenter weights must be a probability vector")
            object.__setattr__(self, "weights", tuple(w.tolist()))

    @property
    def use_log_domain(self) -> bool:
        if self.log_domain is None:
            return self.epsilon < LOG_DOMAIN_BELOW
        return bool(self.log_domain)

    def resolved_weights(self, n_inputs: int) -> np.ndarray:
        if self.weights is None:
            return np.full(n_inputs, 1.0 / n_inputs)
        if len(self.weights) != n_inputs:
            raise ValidationError(
                f"{len(self.weights)} barycenter weights given for {n_inputs} inputs"
            )
        return np.asarray(self.weights, dtype=float)


@dataclass(frozen=True, eq=False)
class BarycenterResult:
    measure: DiscreteMeasure
    converged: bool
    iterations: int
    last_change: float


def bregman_barycenter(
    inputs: Sequence[DiscreteMeasure], cfg: Optional[BarycenterConfig] = None
) -> BarycenterResult:
    """Entropic barycenter of measures sharing one 1D support grid.

    Each iteration projects onto every input marginal, then sets the
    barycenter to the weighted geometric mean of the resulting second
    marginals. Stops once the normalised barycenter changes by at most
    ``cfg.tolerance`` in max-norm between iterations and its total mass is
    within ``cfg.tolerance`` of one.

    Inputs are processed in a canonical order (by weight, then by bytes),
    so permuting inputs and weights together gives a bit-identical result.
    """
    cfg = cfg or BarycenterConfig()
    if len(inputs) == 0:
        raise ValidationError("barycenter needs at least one input measure")
    grid = inputs[0]
    for k, m in enumerate(inputs[1:], 1):
        if not m.same_support(grid):
            raise ValidationError(f"input {k} does not share the support grid of input 0")
    if grid.dim != 1:
        raise ValidationError("barycenters are computed on 1D grids only")
    lam = cfg.resolved_weights(len(inputs))

    order = sorted(
        range(len(inputs)),
        key=lambda s: (lam[s], inputs[s].floored().weights.tobytes()),
    )
    B = np.stack([inputs[s].floored().weights for s in order])
    lam = lam[order]
    C = build_cost(grid.support, grid.support, cfg.p).entries

    if cfg.use_log_domain:
        a, it, change = _ibp_log(B, lam, C, cfg)
    else:
        a, it, change = _ibp_plain(B, lam, C, cfg)
    converged = bool(change <= cfg.tolerance)
    if not converged:
        logger.warning(
            "barycenter did not converge: change %.3e after %d iterations", change, it
        )
    a = np.maximum(a, 0.0)
    return BarycenterResult(DiscreteMeasure.from_masses(grid.support, a), converged, it, float(change))


def _change(a, a_prev):
    # Early iterates can carry almost no mass, so compare normalised iterates
    # and also require the mass itself to have settled at one.
    mass = a.sum()
    a_norm = a / mass
    if a_prev is None:
        return np.inf, a_norm
    return max(np.abs(a_norm - a_prev).max(), abs(mass - 1.0)), a_norm


def _ibp_plain(B, lam, C, cfg):
    with np.errstate(under="ignore"):
        K = np.exp(-C / cfg.epsilon)
    if np.any(K.sum(1) == 0):
        raise NumericalError(
            f"kernel underflows at eps={cfg.epsilon}; retry with log_domain=True"
        )
    v = np.ones_like(B)
    a_prev = None
    change = np.inf
    it = 0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore", under="ignore"):
        while it < cfg.max_iterations:
            it += 1
            u = B / (v @ K.T)
            ktu = u @ K
            a = np.exp(lam @ np.log(ktu))
            v = a[None, :] / ktu
            if not np.all(np.isfinite(a)) or not np.all(np.isfinite(v)):
                raise NumericalError(
                    f"scalings over/underflowed at eps={cfg.epsilon}; retry with log_domain=True"
                )
            change, a_prev = _change(a, a_prev)
            if change <= cfg.tolerance:
                break
    return a, it, change


def _ibp_log(B, lam, C, cfg):
    logK = -C / cfg.epsilon
    logB = np.log(B)
    S, n = B.shape
    lv = np.zeros((S, n))
    lu = np.empty((S, n))
    lktu = np.empty((S, n))
    a_prev = None
    change = np.inf
    it = 0
    while it < cfg.max_iterations:
        it += 1
        for s in range(S):
            lu[s] = logB[s] - logsumexp(logK + lv[s][None, :], axis=1)
            lktu[s] = logsumexp(logK.T + lu[s][None, :], axis=1)
        la = lam @ lktu
        lv = la[None, :] - lktu
        a = np.exp(la)
        change, a_prev = _change(a, a_prev)
        if change <= cfg.tolerance:
            break
    return a, it, change


def quantile_barycenter_1d(
    inputs: Sequence[DiscreteMeasure],
    weights: Optional[Sequence[float]] = None,
    grid: Optional[np.ndarray] = None,
) -> DiscreteMeasure:
    """Exact 1D W2 barycenter, re-binned onto a grid.

    The barycenter's quantile function is the weighted average of the
    inputs' quantile functions. Its atoms are spread onto ``grid`` (default:
    the support of the first input) by splitting each atom's mass between
    the two neighbouring grid points, which preserves mass and mean.
    """
    if len(inputs) == 0:
        raise ValidationError("barycenter needs at least one input measure")
    if any(m.dim != 1 for m in inputs):
        raise ValidationError("quantile barycenter needs 1D measures")
    lam = (
        np.full(len(inputs), 1.0 / len(inputs))
        if weights is None
        else np.asarray(weights, dtype=float)
    )
    if len(lam) != len(inputs) or np.any(lam < 0) or abs(lam.sum() - 1) > SUM_TOL:
        raise ValidationError("weights must be a probability vector matching the inputs")
    grid = np.sort(inputs[0].support) if grid is None else np.asarray(grid, dtype=float)

    steps = []
    for m in inputs:
        order = np.argsort(m.support, kind="stable")
        cum = np.cumsum(m.weights[order])
        cum[-1] = 1.0
        steps.append((cum, m.support[order]))
    t = np.unique(np.concatenate([cum for cum, _ in steps]))
    t = t[(t > 0) & (t < 1)]
    t = np.concatenate([[0.0], t, [1.0]])
    mid = 0.5 * (t[:-1] + t[1:])
    mass = np.diff(t)
    q = np.zeros_like(mid)
    for w, (cum, x) in zip(lam, steps):
        idx = np.minimum(np.searchsorted(cum, mid, side="left"), len(x) - 1)
        q += w * x[idx]
    return DiscreteMeasure.from_masses(grid, bin_to_grid(q, mass, grid))


def bin_to_grid(points, masses, grid) -> np.ndarray:
    """Spread point masses onto a sorted grid by linear splitting.

    Points outside the grid range go to the nearest end point; points
    within 1e-9 (relative to the local spacing) of a grid node land on it.
    """
    grid = np.asarray(grid, dtype=float)
    points = np.asarray(points, dtype=float)
    masses = np.asarray(masses, dtype=float)
    out = np.zeros(len(grid))
    if len(grid) == 1:
        out[0] = masses.sum()
        return out
    x = np.clip(points, grid[0], grid[-1])
    hi = np.clip(np.searchsorted(grid, x, side="right"), 1, len(grid) - 1)
    lo = hi - 1
    frac = (x - grid[lo]) / (grid[hi] - grid[lo])
    frac = np.where(frac < 1e-9, 0.0, np.where(frac > 1 - 1e-9, 1.0, frac))
    np.add.at(out, lo, masses * (1 - frac))
    np.add.at(out, hi, masses * frac)
    return out
