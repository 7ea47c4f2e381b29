"""Score limits implied by annotator noise, and the frame-noise mixture fit.

Model: each annotation round is ``Z = Y + X`` with ``X`` i.i.d. across rounds,
so two rounds differ by ``X1 - X2`` whose law is the self-convolution of the
law of ``X``. ``X`` is a mixture of a wide uniform on ``[-U, U]`` (weight
``w``, the annotator giving up) and a Laplace of scale ``b`` (ordinary
imprecision), discretised to integer frames.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFit, InputError

# Intra-annotator figures reported for CAMUS.
CAMUS_INTRA_RMSE = 5.7
CAMUS_INTRA_CORR = 0.801
# Reference E|X| in frames from a ~1,000-clip relabelling (data not public).
PUBLISHED_EXPECTED_ABS = {"ES": 2.0, "ED": 2.4}

SUPPORT = 100  # X is evaluated on integers in [-SUPPORT, SUPPORT]
MIN_SAMPLES = 50

COARSE_W = tuple(round(0.002 * k, 3) for k in range(26))
COARSE_U = tuple(float(u) for u in range(20, 81, 10))
COARSE_B = tuple(round(0.1 * k, 1) for k in range(6, 61))


def rmse_floor(rmse_rounds):
    """Best reachable RMSE against a single annotation: round-to-round RMSE / sqrt(2)."""
    if rmse_rounds < 0:
        raise InputError(f"RMSE must be nonnegative, got {rmse_rounds}")
    return rmse_rounds / math.sqrt(2.0)


def corr_ceiling(corr_rounds):
    """Best reachable correlation with one annotator: sqrt of the round-to-round correlation."""
    if not 0.0 <= corr_rounds <= 1.0:
        raise InputError(f"correlation must lie in [0, 1], got {corr_rounds}")
    return math.sqrt(corr_rounds)


@dataclass(frozen=True)
class AnnotatorNoiseModel:
    mixture_weight: float
    uniform_halfwidth: float
    laplace_scale: float
    log_likelihood: float = float("nan")
    degenerate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.mixture_weight <= 1.0:
            raise InputError(f"mixture weight must lie in [0, 1], got {self.mixture_weight}")
        if not self.degenerate and (self.uniform_halfwidth <= 0 or self.laplace_scale <= 0):
            raise InputError("uniform half-width and Laplace scale must be positive")


def expected_abs(model):
    """E|X| = w * U/2 + (1 - w) * b."""
    w = model.mixture_weight
    return w * model.uniform_halfwidth / 2.0 + (1.0 - w) * model.laplace_scale


def laplace_pmf(b, support=SUPPORT):
    """Laplace(0, b) mass on each unit bin ``[k - 1/2, k + 1/2]``, renormalised."""
    k = np.arange(-support, support + 1, dtype=float)
    hi, lo = k + 0.5, k - 0.5

    def cdf(x):
        return np.where(x < 0, 0.5 * np.exp(x / b), 1.0 - 0.5 * np.exp(-x / b))

    p = cdf(hi) - cdf(lo)
    return p / p.sum()


def uniform_pmf(U, support=SUPPORT):
    """Continuous uniform on [-U, U] integrated over unit bins."""
    k = np.arange(-support, support + 1, dtype=float)
    overlap = np.clip(np.minimum(k + 0.5, U) - np.maximum(k - 0.5, -U), 0.0, None)
    return overlap / overlap.sum()


def mixture_pmf(w, U, b, support=SUPPORT):
    return w * uniform_pmf(U, support) + (1 - w) * laplace_pmf(b, support)


def diff_pmf(w, U, b, support=SUPPORT):
    """Law of X1 - X2 on integers in [-2*support, 2*support]."""
    p = mixture_pmf(w, U, b, support)
    return np.convolve(p, p[::-1])


def log_likelihood(diffs, w, U, b, support=SUPPORT):
    values, counts = np.unique(np.asarray(diffs, dtype=int), return_counts=True)
    pmf = diff_pmf(w, U, b, support)
    idx = values + 2 * support
    probs = np.where((idx >= 0) & (idx < len(pmf)), pmf[np.clip(idx, 0, len(pmf) - 1)], 0.0)
    return float(np.dot(counts, np.log(np.maximum(probs, 1e-300))))


def _grid_search(values, counts, ws, Us, bs, support):
    """Exhaustive search over a grid; returns the best (loglik, w, U, b).

    Uses p*p = w^2 u*u + 2w(1-w) u*l + (1-w)^2 l*l so each (U, b) pair needs
    three convolutions and all weights are scored at once.
    """
    idx = values + 2 * support
    ws = np.asarray(ws, dtype=float)
    lap = {b: laplace_pmf(b, support) for b in bs}
    uni = {U: uniform_pmf(U, support) for U in Us}
    ll_conv = {b: np.convolve(l, l[::-1])[idx] for b, l in lap.items()}
    uu_conv = {U: np.convolve(u, u[::-1])[idx] for U, u in uni.items()}
    best = (-math.inf, 0.0, 0.0, 0.0)
    for U in Us:
        for b in bs:
            ul = np.convolve(uni[U], lap[b][::-1])[idx]
            # symmetric laws: u*l reversed equals l*u, so the cross term is 2 * ul
            probs = (
                (ws**2)[:, None] * uu_conv[U][None]
                + (2 * ws * (1 - ws))[:, None] * ul[None]
                + ((1 - ws) ** 2)[:, None] * ll_conv[b][None]
            )
            lls = np.log(np.maximum(probs, 1e-300)) @ counts
            for w, ll in zip(ws, lls):
                cand = (float(ll), float(w), float(U), float(b))
                if cand > best:
                    best = cand
    return best


def fit_noise_mixture(round_diffs, refinements=2, support=SUPPORT):
    """Maximum-likelihood (w, U, b) from integer differences between two rounds.

    Coarse grid first, then ``refinements`` rounds of a 10x finer grid
    spanning one coarse step either side of the current optimum.
    """
    diffs = np.asarray(round_diffs, dtype=int).ravel()
    if len(diffs) < MIN_SAMPLES:
        raise InputError(f"need at least {MIN_SAMPLES} differences, got {len(diffs)}")
    if np.all(diffs == 0):
        warnings.warn("all differences are zero; returning a degenerate model", DegenerateFit, stacklevel=2)
        return AnnotatorNoiseModel(0.0, 0.0, 0.0, 0.0, degenerate=True)
    if np.abs(diffs).max() > 2 * support:
        raise InputError(f"differences beyond +/-{2 * support} frames are outside the model support")
    values, counts = np.unique(diffs, return_counts=True)
    counts = counts.astype(float)

    best = _grid_search(values, counts, COARSE_W, COARSE_U, COARSE_B, support)
    steps = (0.002, 10.0, 0.1)
    for _ in range(refinements):
        steps = tuple(s / 10 for s in steps)
        _, w0, U0, b0 = best
        ws = [w for w in (w0 + steps[0] * k for k in range(-10, 11)) if 0.0 <= w <= 1.0]
        Us = [U for U in (U0 + steps[1] * k for k in range(-10, 11)) if 1.0 <= U <= support]
        bs = [b for b in (b0 + steps[2] * k for k in range(-10, 11)) if b >= 0.05]
        best = max(best, _grid_search(values, counts, ws, Us, bs, support))
    ll, w, U, b = best
    return AnnotatorNoiseModel(w, U, b, ll)


def sample_round_diffs(n, w, U, b, rng):
    """Draw ``n`` integer differences X1 - X2 from the discretised mixture."""

    def draw(size):
        lap = np.rint(rng.laplace(0.0, b, size))
        uni = np.rint(rng.uniform(-U, U, size))
        return np.where(rng.random(size) < w, uni, lap).astype(int)

    return draw(n) - draw(n)
