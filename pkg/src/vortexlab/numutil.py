"""Small numerical helpers shared across modules (periodic wrapping, batched
3x3 linear algebra, smoothstep profiles)."""

from __future__ import annotations

import numpy as np


def wrap_position(x: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Map points into the fundamental domain [0, box) per axis."""
    return np.mod(x, box)


def wrap_delta(dx: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Minimal-image displacement: componentwise wrap into [-box/2, box/2)."""
    return dx - box * np.round(dx / box)


def det3(m: np.ndarray) -> np.ndarray:
    """Determinant of (..., 3, 3) arrays without LAPACK round-trips."""
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    g, h, i = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def inv3(m: np.ndarray, det: np.ndarray | None = None) -> np.ndarray:
    """Inverse of (..., 3, 3) arrays via the adjugate formula."""
    if det is None:
        det = det3(m)
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    out[..., 0, 1] = m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]
    out[..., 0, 2] = m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]
    out[..., 1, 0] = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
    out[..., 1, 1] = m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
    out[..., 1, 2] = m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]
    out[..., 2, 0] = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
    out[..., 2, 1] = m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]
    out[..., 2, 2] = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    return out / det[..., None, None]


def quintic_smoothstep(t: np.ndarray) -> np.ndarray:
    """C^2 ramp 0 -> 1 on [0, 1]: 6t^5 - 15t^4 + 10t^3, clipped outside."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def ramp_down(r: np.ndarray, inner: float, outer: float) -> np.ndarray:
    """C^2 cutoff: 1 on [0, inner], 0 beyond outer."""
    return 1.0 - quintic_smoothstep((np.asarray(r) - inner) / (outer - inner))


def core_profile(s: np.ndarray) -> np.ndarray:
    """Amplitude profile: identity on [0, 1/2], 1 beyond 1, C^2 in between.

    On [1/2, 1] the profile is s + (1 - s) blended by the quintic ramp so both
    plateaus are matched with continuous second derivatives.
    """
    s = np.asarray(s, dtype=float)
    w = quintic_smoothstep((s - 0.5) * 2.0)
    return np.clip(s + w * (1.0 - s), 0.0, 1.0)


def principal_angle(a: np.ndarray) -> np.ndarray:
    """Wrap angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)
