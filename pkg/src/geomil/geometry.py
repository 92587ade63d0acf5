"""Poincare-ball primitives: Mobius addition, origin exp/log maps, distance.

Convention: for curvature magnitude ``c > 0`` the ball is the open set
``{x : sqrt(c) * ||x|| < 1}``, i.e. radius ``1/sqrt(c)``.  All maps here are
based at the origin.  Operations accept arrays whose *last* axis is the
vector dimension and broadcast over any leading axes.

Everything is computed in float64 regardless of the caller's dtype:
``arctanh`` amplifies rounding near the boundary, so single-precision
intermediates are never used even when the surrounding model runs in
single precision.
"""

from __future__ import annotations

import numpy as np

# Margin kept between any ball-valued result and the boundary, so that
# downstream arctanh arguments stay strictly inside (-1, 1).
BALL_EPS = 1e-5

# Below sqrt(c)*||v|| = SMALL_NORM the exp/log scale factors use their
# first-order limit (identity scaling) to avoid 0/0.
SMALL_NORM = 1e-8


class GeometryError(ValueError):
    """Raised when an input is non-finite or outside the operation's domain."""


def check_curvature(c: float) -> float:
    """Validate a curvature magnitude and return it as a plain float."""
    c = float(c)
    if not np.isfinite(c) or c <= 0.0:
        raise GeometryError(f"curvature must be a finite positive real, got {c!r}")
    return c


def _as_float64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} contains non-finite entries")
    return arr


def _interior(x, c: float, name: str) -> np.ndarray:
    """Validate that ``x`` lies strictly inside the ball of curvature ``c``."""
    arr = _as_float64(x, name)
    sq = np.sum(arr * arr, axis=-1)
    if np.any(c * sq >= 1.0):
        raise GeometryError(f"{name} lies on or outside the ball of curvature {c}")
    return arr


def project_to_ball(y, c: float, eps: float = BALL_EPS) -> np.ndarray:
    """Rescale ``y`` onto the closed ball of radius ``(1 - eps)/sqrt(c)``.

    Points already inside that radius are returned unchanged; anything
    further out keeps its direction and is pulled back to the margin.
    """
    c = check_curvature(c)
    y = _as_float64(y, "y")
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    max_norm = (1.0 - eps) / np.sqrt(c)
    scale = np.where(norm > max_norm, max_norm / np.maximum(norm, SMALL_NORM), 1.0)
    return y * scale


def mobius_add(x, y, c: float) -> np.ndarray:
    """Gyro-addition ``x (+)_c y`` on the Poincare ball.

    Closed form::

        x (+) y = [(1 + 2c<x,y> + c||y||^2) x + (1 - c||x||^2) y]
                  / (1 + 2c<x,y> + c^2 ||x||^2 ||y||^2)

    The result is re-projected into the ball so that follow-up distance
    computations keep strictly valid arctanh arguments.
    """
    c = check_curvature(c)
    x = _interior(x, c, "x")
    y = _interior(y, c, "y")
    xy = np.sum(x * y, axis=-1, keepdims=True)
    x2 = np.sum(x * x, axis=-1, keepdims=True)
    y2 = np.sum(y * y, axis=-1, keepdims=True)
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    return project_to_ball(num / den, c)


def exp_map0(v, c: float) -> np.ndarray:
    """Exponential map at the origin: tangent vector -> ball point.

    ``exp_0^c(v) = tanh(sqrt(c) ||v||) * v / (sqrt(c) ||v||)``; the origin is
    a fixed point and the image always lies strictly inside the ball.
    """
    c = check_curvature(c)
    v = _as_float64(v, "v")
    sqrt_c = np.sqrt(c)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    t = sqrt_c * norm
    safe_t = np.maximum(t, SMALL_NORM)
    scale = np.where(t < SMALL_NORM, 1.0, np.tanh(safe_t) / safe_t)
    return project_to_ball(scale * v, c)


def log_map0(y, c: float) -> np.ndarray:
    """Logarithmic map at the origin: ball point -> tangent vector.

    Inverse of :func:`exp_map0` on the ball interior:
    ``log_0^c(y) = arctanh(sqrt(c) ||y||) * y / (sqrt(c) ||y||)``.
    """
    c = check_curvature(c)
    y = _interior(y, c, "y")
    sqrt_c = np.sqrt(c)
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    t = sqrt_c * norm
    safe_t = np.maximum(t, SMALL_NORM)
    scale = np.where(t < SMALL_NORM, 1.0, np.arctanh(safe_t) / safe_t)
    return scale * y


def hyp_distance(x, y, c: float) -> np.ndarray:
    """Hyperbolic distance ``(2/sqrt(c)) arctanh(sqrt(c) ||(-x) (+) y||)``.

    Symmetric, zero iff ``x == y``, and converges to ``2 ||x - y||`` as the
    curvature approaches zero.  Reduces over the last axis.
    """
    c = check_curvature(c)
    diff = mobius_add(-np.asarray(x, dtype=np.float64), y, c)
    sqrt_c = np.sqrt(c)
    norm = np.linalg.norm(diff, axis=-1)
    return (2.0 / sqrt_c) * np.arctanh(sqrt_c * norm)


def dist_to_origin(y, c: float) -> np.ndarray:
    """Hyperbolic distance from the origin, ``(2/sqrt(c)) arctanh(sqrt(c)||y||)``."""
    c = check_curvature(c)
    y = _interior(y, c, "y")
    sqrt_c = np.sqrt(c)
    norm = np.linalg.norm(y, axis=-1)
    return (2.0 / sqrt_c) * np.arctanh(sqrt_c * norm)
