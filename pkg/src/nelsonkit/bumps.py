"""Smooth cutoff functions built from the exp(-1/x) mollifier family.

Every cutoff in the toolkit (torus windows, radial plateaus, energy
localizations) is drawn from this module so that results are reproducible:
one profile, fixed once.

The basic brick is the C^inf transition ``smooth_step`` which is exactly 0
for x <= 0 and exactly 1 for x >= 1.  Plateau bumps return exactly 1.0 on
their plateau and exactly 0.0 outside their support, which is what makes
partition-of-unity sums come out at 1.0 to machine precision.
"""

from __future__ import annotations

import numpy as np

__all__ = ["smooth_step", "plateau_bump", "window_bump", "radial_floor"]


def _phi(x):
    # exp(-1/x) for x > 0, 0 otherwise; vectorized and overflow-safe
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0.0
    with np.errstate(over="ignore", divide="ignore"):
        out[pos] = np.exp(-1.0 / x[pos])
    return out


def smooth_step(x):
    """C^inf step: 0 for x <= 0, 1 for x >= 1, strictly increasing between."""
    x = np.asarray(x, dtype=float)
    a = _phi(x)
    b = _phi(1.0 - x)
    out = np.empty_like(x)
    lo = x <= 0.0
    hi = x >= 1.0
    mid = ~(lo | hi)
    out[lo] = 0.0
    out[hi] = 1.0
    out[mid] = a[mid] / (a[mid] + b[mid])
    return out if out.ndim else float(out)


def plateau_bump(t, lo, hi, margin_lo, margin_hi=None):
    """Smooth plateau: exactly 1 on [lo, hi], exactly 0 outside
    (lo - margin_lo, hi + margin_hi), monotone on the two collars.

    ``margin_hi`` defaults to ``margin_lo``.
    """
    if margin_hi is None:
        margin_hi = margin_lo
    if not (hi >= lo and margin_lo > 0 and margin_hi > 0):
        raise ValueError("plateau_bump needs hi >= lo and positive margins")
    t = np.asarray(t, dtype=float)
    left = np.asarray(smooth_step((t - (lo - margin_lo)) / margin_lo))
    right = np.asarray(smooth_step(((hi + margin_hi) - t) / margin_hi))
    out = left * right
    # plateau is exactly 1: both factors saturate there
    return out if out.ndim else float(out)


def window_bump(t, center, half_width, support_half_width):
    """Plateau bump centered at ``center``: 1 on |t-c| <= half_width,
    0 for |t-c| >= support_half_width."""
    if not support_half_width > half_width > 0:
        raise ValueError("need support_half_width > half_width > 0")
    m = support_half_width - half_width
    return plateau_bump(t, center - half_width, center + half_width, m, m)


def radial_floor(r, inner, outer):
    """Smooth 0->1 switch in a radial variable: exactly 0 for r <= inner,
    exactly 1 for r >= outer.  Used to carve momentum space around k = 0
    for infrared-singular couplings."""
    if not outer > inner >= 0:
        raise ValueError("need outer > inner >= 0")
    r = np.asarray(r, dtype=float)
    return smooth_step((r - inner) / (outer - inner))
