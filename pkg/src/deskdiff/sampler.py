"""Reverse-process solvers.

Two step families are implemented:

* ``step_ancestral``: the classic ancestral update with noise level
  ``eta * sqrt(beta_tilde)``; ``eta = 0`` is the deterministic limit and the
  final transition to the clean boundary collapses to the signal prediction.

* ``step_dpmpp_2m_sde``: a second-order multistep exponential-integrator SDE
  update. The second-order correction reuses the noise prediction from the
  previous (noisier) transition; the first executed transition drops it.

Both families split each update into a deterministic mean and an additive
``sigma * z`` term through the same helper, so that noise maps extracted by
the inversion module replay through the generator with identical floating
point operations.

All step arithmetic keeps field dtype float32; schedule-derived scalars are
Python floats, which numpy treats as weak scalars and never upcast arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateGridError, InternalError, ParameterError
from .model import AttentionStash, DenoiserModel, Field
from .schedule import NoiseSchedule, TimestepGrid, h_step, sigma_ancestral, sigma_dpmpp

__all__ = [
    "SolverState",
    "GuidanceFn",
    "NoiseSource",
    "apply_noise",
    "step_ancestral",
    "dpmpp_mu",
    "step_dpmpp_2m_sde",
    "terminal_mu",
    "sigma_terminal",
    "step_terminal",
    "run_reverse",
    "run_ancestral",
    "zeros_noise",
    "stream_noise",
]

# callback(x_t, t, eps_uncond, stash) -> possibly edited eps
GuidanceFn = Callable[[Field, int, Field, Optional[AttentionStash]], Field]
# provider(transition_index, shape) -> z field
NoiseSource = Callable[[int, tuple[int, ...]], np.ndarray]


@dataclass
class SolverState:
    """Loop-carried solver state, exposed for introspection and tests."""

    x: Field
    index: int
    eps_prev: Optional[Field] = None
    prev_source_step: Optional[int] = None


def apply_noise(mu: Field, sigma: float, z: Optional[Field]) -> Field:
    """``mu + sigma * z`` with the zero-noise case skipping the add.

    Extraction and generation both go through this helper, which is what
    makes replay bit-exact: a stored z multiplied by the same sigma lands on
    the same float32 value.
    """
    if sigma == 0.0:
        return mu
    if z is None:
        raise ParameterError("sigma > 0 requires a noise field z")
    if z.shape != mu.shape:
        raise ParameterError(f"z shape {z.shape} does not match state shape {mu.shape}")
    return mu + sigma * z.astype(np.float32, copy=False)


def step_ancestral(
    schedule: NoiseSchedule,
    x_t: Field,
    eps_hat: Field,
    t: int,
    t_prev: int,
    eta: float,
    z: Optional[Field] = None,
) -> Field:
    """One ancestral transition ``t -> t_prev`` (``t_prev`` may be 0).

    The mean interpolates the signal prediction and the noise direction:

        mu = sqrt(abar_prev) * (x_t - sqrt(1-abar_t) eps) / sqrt(abar_t)
             + sqrt(1 - abar_prev - sigma^2) * eps

    With ``eta = 0`` the result does not depend on ``z``; at ``t_prev = 0``
    the noise level vanishes and the step returns the signal prediction.
    """
    sigma = sigma_ancestral(schedule, t, t_prev, eta)
    abar_t = schedule.abar(t)
    abar_prev = schedule.abar(t_prev)
    x0_coeff = math.sqrt(abar_prev) / math.sqrt(abar_t)
    residual = 1.0 - abar_prev - sigma * sigma
    if residual < -1e-12:
        raise InternalError(f"noise budget exceeded: 1 - abar_prev - sigma^2 = {residual}")
    dir_coeff = math.sqrt(max(residual, 0.0))
    mu = x0_coeff * (x_t - math.sqrt(1.0 - abar_t) * eps_hat) + dir_coeff * eps_hat
    return apply_noise(mu, sigma, z)


def dpmpp_mu(
    schedule: NoiseSchedule,
    x_t: Field,
    eps_hat: Field,
    t: int,
    t_prev: int,
    eps_hat_prev: Optional[Field] = None,
    t_next: Optional[int] = None,
) -> Field:
    """Deterministic part of the second-order multistep SDE update.

        mu = sqrt(1-abar_prev)/sqrt(1-abar_t) * exp(-h) * x_t
             + sqrt(abar_prev) * (1 - exp(-2h)) * eps_hat
             + 1/2 * sqrt(abar_prev) * (1 - exp(-2h)) * (-h_prev / h)
               * (eps_hat_prev - eps_hat)

    ``h`` is the log-SNR gap of this transition and ``h_prev`` the gap of
    the previous one (source ``t_next`` -> ``t``). Omitting
    ``eps_hat_prev`` drops the correction, which is the bootstrap used on
    the first executed transition.
    """
    if t_prev < 1:
        raise ParameterError(f"dpmpp transitions need t_prev >= 1, got {t_prev}")
    h = h_step(schedule, t_prev, t)
    if h == 0.0:
        raise DegenerateGridError(f"repeated step {t} -> {t_prev} has no log-SNR gap")
    abar_t = schedule.abar(t)
    abar_prev = schedule.abar(t_prev)
    decay = math.exp(-h)
    gain = -math.expm1(-2.0 * h)  # 1 - exp(-2h), accurate for small h
    mu = (math.sqrt(1.0 - abar_prev) / math.sqrt(1.0 - abar_t) * decay) * x_t
    mu = mu + (math.sqrt(abar_prev) * gain) * eps_hat
    if eps_hat_prev is not None:
        if t_next is None:
            raise ParameterError("eps_hat_prev requires the step t_next it was evaluated at")
        h_prev = h_step(schedule, t, t_next)
        if h_prev == 0.0:
            raise DegenerateGridError(f"repeated step {t_next} -> {t} has no log-SNR gap")
        coeff = 0.5 * math.sqrt(abar_prev) * gain * (-h_prev / h)
        mu = mu + coeff * (eps_hat_prev - eps_hat)
    return mu


def step_dpmpp_2m_sde(
    schedule: NoiseSchedule,
    x_t: Field,
    eps_hat: Field,
    t: int,
    t_prev: int,
    z: Optional[Field] = None,
    eps_hat_prev: Optional[Field] = None,
    t_next: Optional[int] = None,
) -> Field:
    """One stochastic transition ``t -> t_prev`` with ``t_prev >= 1``."""
    mu = dpmpp_mu(schedule, x_t, eps_hat, t, t_prev, eps_hat_prev, t_next)
    sigma = sigma_dpmpp(schedule, t_prev, t)
    return apply_noise(mu, sigma, z)


def terminal_mu(schedule: NoiseSchedule, x_t: Field, eps_hat: Field, t: int) -> Field:
    """Signal prediction at the last grid step: ``(x - sqrt(1-abar) eps) / sqrt(abar)``."""
    abar = schedule.abar(t)
    return (x_t - math.sqrt(1.0 - abar) * eps_hat) * (1.0 / math.sqrt(abar))


def sigma_terminal(schedule: NoiseSchedule, t: int, mode: str) -> float:
    """Noise level of the final transition to the clean state.

    ``exact`` keeps the step stochastic with ``sigma = sqrt((1-abar)/abar)``,
    scaled so a stored ``z = eps_hat - eps_true`` reproduces any target
    exactly. ``deterministic`` collapses the step to the signal prediction.
    """
    if mode == "deterministic":
        return 0.0
    if mode != "exact":
        raise ParameterError(f"unknown terminal mode {mode!r}")
    abar = schedule.abar(t)
    return math.sqrt((1.0 - abar) / abar)


def step_terminal(
    schedule: NoiseSchedule,
    x_t: Field,
    eps_hat: Field,
    t: int,
    z: Optional[Field] = None,
    mode: str = "exact",
) -> Field:
    """Final transition from the last grid step to the clean state."""
    mu = terminal_mu(schedule, x_t, eps_hat, t)
    return apply_noise(mu, sigma_terminal(schedule, t, mode), z)


def zeros_noise(index: int, shape: tuple[int, ...]) -> np.ndarray:
    return np.zeros(shape, dtype=np.float32)


def stream_noise(seed: int, domain: int) -> NoiseSource:
    """Noise source drawing independent fields from counter-based streams."""
    from .rng import normal_field

    def provider(index: int, shape: tuple[int, ...]) -> np.ndarray:
        return normal_field(seed, domain, index, shape)

    return provider


def run_reverse(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    x_start: Field,
    noise: NoiseSource,
    guidance_fn: Optional[GuidanceFn] = None,
) -> Field:
    """Run the multistep SDE solver along a grid's executed transitions.

    ``x_start`` is the state at the first executed grid step. Each
    transition spends one unconditional model evaluation; the guidance
    callback may spend more and returns the noise prediction actually
    stepped with, which also becomes the multistep memory. One ``z`` is
    drawn per transition, the terminal one included.
    """
    state = SolverState(x=x_start, index=grid.start_index)
    steps = grid.steps
    n = len(steps)
    while state.index < n:
        i = state.index
        t = steps[i]
        eps_u, stash = model.eps(state.x, t, None)
        eps_g = guidance_fn(state.x, t, eps_u, stash) if guidance_fn is not None else eps_u
        z = noise(i, state.x.shape)
        if i == n - 1:
            x_new = step_terminal(schedule, state.x, eps_g, t, z, mode=grid.terminal)
        else:
            x_new = step_dpmpp_2m_sde(
                schedule, state.x, eps_g, t, steps[i + 1],
                z=z, eps_hat_prev=state.eps_prev, t_next=state.prev_source_step,
            )
        state = SolverState(x=x_new, index=i + 1, eps_prev=eps_g, prev_source_step=t)
    return state.x


def run_ancestral(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    steps: tuple[int, ...],
    x_start: Field,
    eta: float,
    noise: NoiseSource,
) -> Field:
    """Run the ancestral sampler along ``steps`` down to the clean state.

    ``steps`` must be strictly decreasing; an implicit final transition to
    the boundary (``abar = 1``) is appended, where the noise level is zero
    and the update is the plain signal prediction.
    """
    if any(a <= b for a, b in zip(steps, steps[1:])):
        raise DegenerateGridError(f"ancestral steps must be strictly decreasing, got {steps}")
    x = x_start
    targets = list(steps[1:]) + [0]
    for i, (t, t_prev) in enumerate(zip(steps, targets)):
        eps_hat, _ = model.eps(x, t, None)
        z = noise(i, x.shape)
        x = step_ancestral(schedule, x, eps_hat, t, t_prev, eta, z)
    return x
