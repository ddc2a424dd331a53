"""Fourth-order finite differences in time for sampled trajectories.

Space is spectral everywhere in this package; time derivatives of sampled
paths are the one place classical stencils appear.  Uniform grids only.
"""

from __future__ import annotations

import numpy as np

__all__ = ["fd_derivative", "require_uniform"]

# Fourth-order first-derivative weights, denominators of 12h.
_CENTRAL = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0          # offsets -2..2
_FORWARD0 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0    # offsets 0..4
_FORWARD1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0      # offsets -1..3


def require_uniform(times: np.ndarray, rtol: float = 1e-9) -> float:
    """Return the common step of a uniform time grid, or raise."""
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size < 2:
        raise ValueError("need a 1D time grid with at least two samples")
    steps = np.diff(times)
    dt = float(steps.mean())
    if dt <= 0.0 or np.abs(steps - dt).max() > rtol * abs(dt):
        raise ValueError("time grid is not uniform")
    return dt


def _stencil_derivative(values: np.ndarray, dt: float) -> np.ndarray:
    """Apply the 4th-order stencil family along axis 0 (>= 5 samples)."""
    m = values.shape[0]
    out = np.empty_like(values)
    out[0] = np.tensordot(_FORWARD0, values[0:5], axes=(0, 0))
    out[1] = np.tensordot(_FORWARD1, values[0:5], axes=(0, 0))
    # interior: vectorized five-point central stencil
    out[2:m - 2] = (
        values[0:m - 4] * _CENTRAL[0]
        + values[1:m - 3] * _CENTRAL[1]
        + values[3:m - 1] * _CENTRAL[3]
        + values[4:m] * _CENTRAL[4]
    )
    out[m - 2] = -np.tensordot(_FORWARD1, values[m - 1:m - 6:-1], axes=(0, 0))
    out[m - 1] = -np.tensordot(_FORWARD0, values[m - 1:m - 6:-1], axes=(0, 0))
    return out / dt


def fd_derivative(times, values, with_error: bool = True):
    """Differentiate sampled data in time at 4th order.

    Args:
        times: uniform 1D grid, at least 5 samples (9 for error estimates).
        values: array whose axis 0 runs over ``times``.
        with_error: also return a Richardson step-halving error estimate.

    Returns:
        ``deriv`` shaped like ``values``; if ``with_error``, also ``err``
        of the same shape (edge entries copy the nearest interior estimate,
        so they are indicative, not certified).
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != times.size:
        raise ValueError(f"axis 0 of values ({values.shape[0]}) != len(times) ({times.size})")
    if times.size < 5:
        raise ValueError("4th-order differentiation needs at least 5 samples")
    dt = require_uniform(times)
    # Differencing the offset from the initial sample leaves the derivative
    # unchanged but removes the cancellation of a large common level; constant
    # series come out exactly zero instead of O(eps |f| / dt).
    values = values - values[0]
    deriv = _stencil_derivative(values, dt)
    if not with_error:
        return deriv

    err = np.full_like(values, np.nan)
    m = times.size
    if m >= 9:
        # Stride-2 central stencil where it fits; |d_h - d_2h| / 15 estimates
        # the 4th-order term of the finer stencil.
        coarse = (
            values[0:m - 8] * _CENTRAL[0]
            + values[2:m - 6] * _CENTRAL[1]
            + values[6:m - 2] * _CENTRAL[3]
            + values[8:m] * _CENTRAL[4]
        ) / (2.0 * dt)
        err[4:m - 4] = np.abs(deriv[4:m - 4] - coarse) / 15.0
        err[:4] = err[4]
        err[m - 4:] = err[m - 5]
    else:
        # Too short for step-halving: fall back to a crude scale bound.
        scale = np.max(np.abs(deriv), axis=0, keepdims=True)
        err[:] = dt**4 * scale
    return deriv, err
