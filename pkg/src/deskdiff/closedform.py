"""Closed-form continuum references for solver convergence experiments.

For centered isotropic Gaussian data ``x0 ~ N(0, data_scale^2 I)`` the
posterior-mean noise prediction is linear in the state,

    eps_hat(x, t) = sigma_t / v_t * x,        v_t = abar_t s^2 + (1 - abar_t),

with ``alpha_t = sqrt(abar_t)`` and ``sigma_t = sqrt(1 - abar_t)``. Every
deterministic solver recursion is then scalar, and its vanishing-step limit
is a linear ODE in the half-log-SNR variable ``lam`` with an elementary
antiderivative. These functions evaluate those antiderivatives, giving the
exact endpoint any refinement of the discrete solver converges to, so
discretization error can be measured without a reference simulation.

Two flows are covered:

* the mean recursion of the second-order multistep SDE solver (noise turned
  off), with slope ``-(1 + alpha^2) + 2 alpha sigma / v``;
* the deterministic ancestral recursion (``eta = 0``), with slope
  ``alpha^2 sigma^2 (s^2 - 1) / v``, identically zero for unit-scale data.

Both end with the same final transition to the clean state, whose exact
gain is ``alpha s^2 / v`` evaluated at the last executed step.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError
from .schedule import NoiseSchedule

__all__ = [
    "solver_flow_slope",
    "solver_flow_antiderivative",
    "ddim_flow_slope",
    "ddim_flow_antiderivative",
    "terminal_gain",
    "exact_solver_endpoint",
    "exact_ddim_endpoint",
]


def _check_scale(data_scale: float) -> None:
    if not data_scale > 0.0:
        raise ParameterError(f"data_scale must be positive, got {data_scale}")


def _alpha_sq(lam: float) -> float:
    # abar as a function of half-log-SNR: alpha^2 = 1 / (1 + exp(-2 lam))
    return 1.0 / (1.0 + math.exp(-2.0 * lam))


def solver_flow_slope(lam: float, data_scale: float) -> float:
    """d(ln x)/d(lam) of the multistep SDE solver's mean flow."""
    _check_scale(data_scale)
    a2 = _alpha_sq(lam)
    s2 = 1.0 - a2
    v = a2 * data_scale**2 + s2
    return -(1.0 + a2) + 2.0 * math.sqrt(a2 * s2) / v


def solver_flow_antiderivative(lam: float, data_scale: float) -> float:
    """Antiderivative of :func:`solver_flow_slope` in ``lam``."""
    _check_scale(data_scale)
    s = data_scale
    return -lam - 0.5 * float(np.logaddexp(0.0, 2.0 * lam)) + (2.0 / s) * math.atan(s * math.exp(lam))


def ddim_flow_slope(lam: float, data_scale: float) -> float:
    """d(ln x)/d(lam) of the deterministic ancestral flow."""
    _check_scale(data_scale)
    a2 = _alpha_sq(lam)
    s2 = 1.0 - a2
    v = a2 * data_scale**2 + s2
    return a2 * s2 * (data_scale**2 - 1.0) / v


def ddim_flow_antiderivative(lam: float, data_scale: float) -> float:
    """Antiderivative of :func:`ddim_flow_slope`; zero for unit-scale data."""
    _check_scale(data_scale)
    s2 = data_scale**2
    two_lam = 2.0 * lam
    # 0.5 * [ln(s^2 e^{2lam} + 1) - ln(e^{2lam} + 1)], stable for large lam
    return 0.5 * float(np.logaddexp(math.log(s2) + two_lam, 0.0) - np.logaddexp(two_lam, 0.0))


def terminal_gain(schedule: NoiseSchedule, t: int, data_scale: float) -> float:
    """Exact gain of the final signal-prediction transition at step ``t``."""
    _check_scale(data_scale)
    abar = schedule.abar(t)
    v = abar * data_scale**2 + (1.0 - abar)
    return math.sqrt(abar) * data_scale**2 / v


def _body_gain(antiderivative, schedule, data_scale, t_start, t_end):
    if not 1 <= t_end < t_start <= schedule.T:
        raise ParameterError(f"need 1 <= t_end < t_start <= T, got {t_end}, {t_start}")
    lam_start = schedule.half_log_snr(t_start)
    lam_end = schedule.half_log_snr(t_end)
    return math.exp(antiderivative(lam_end, data_scale) - antiderivative(lam_start, data_scale))


def exact_solver_endpoint(
    schedule: NoiseSchedule, data_scale: float, t_start: int, t_end: int
) -> float:
    """Continuum gain ``x_start -> clean state`` of the multistep SDE solver.

    The body flow runs from ``t_start`` to the last executed step ``t_end``;
    the final transition contributes :func:`terminal_gain` at ``t_end``.
    """
    body = _body_gain(solver_flow_antiderivative, schedule, data_scale, t_start, t_end)
    return body * terminal_gain(schedule, t_end, data_scale)


def exact_ddim_endpoint(
    schedule: NoiseSchedule, data_scale: float, t_start: int, t_end: int
) -> float:
    """Continuum gain of the deterministic ancestral flow, terminal included."""
    body = _body_gain(ddim_flow_antiderivative, schedule, data_scale, t_start, t_end)
    return body * terminal_gain(schedule, t_end, data_scale)
