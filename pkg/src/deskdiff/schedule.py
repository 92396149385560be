"""Noise schedules, log-SNR geometry, and timestep grids.

A schedule fixes the forward-process variances ``beta_t`` for integer steps
``t = 1..T`` and everything derived from them:

* ``alpha_t = 1 - beta_t`` and the running product ``abar_t``,
* the half-log-SNR ``lambda_t = ln(sqrt(abar_t)) - ln(sqrt(1 - abar_t))``,
* the two noise-level families ``sigma_ancestral`` and ``sigma_dpmpp``.

``abar`` extends to the clean boundary with ``abar_0 = 1``. ``lambda`` is
only defined for ``t >= 1`` (it diverges at the boundary), and every
operation that consumes it states that precondition.

All derived arrays are float64 and read-only; a schedule is immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGridError, ParameterError

__all__ = [
    "NoiseSchedule",
    "TimestepGrid",
    "build_schedule",
    "build_grid",
    "sigma_ancestral",
    "sigma_dpmpp",
    "h_step",
]

SCHEDULE_KINDS = ("linear", "scaled-linear")
TERMINAL_MODES = ("exact", "deterministic")


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process variance schedule and derived quantities.

    Attributes:
        kind: Spacing family, ``linear`` or ``scaled-linear``.
        T: Number of diffusion steps; valid step indices are ``1..T``.
        beta_min: First variance value.
        beta_max: Last variance value.
        beta: Per-step variances, shape ``(T,)``, ``beta[t-1]`` is step t.
        alpha_bar: Cumulative products of ``1 - beta``, shape ``(T,)``.
        lam: Half-log-SNR per step, shape ``(T,)``.
    """

    kind: str
    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    lam: np.ndarray = field(repr=False)

    def abar(self, t: int) -> float:
        """Cumulative signal level at step ``t``, with ``abar(0) == 1``."""
        if not 0 <= t <= self.T:
            raise ParameterError(f"step {t} outside [0, {self.T}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def half_log_snr(self, t: int) -> float:
        """``lambda_t`` for ``t >= 1``; diverges at the clean boundary."""
        if not 1 <= t <= self.T:
            raise ParameterError(f"half_log_snr needs 1 <= t <= {self.T}, got {t}")
        return float(self.lam[t - 1])

    @property
    def fingerprint_bytes(self) -> bytes:
        """SHA-256 over the defining parameters, stable across processes."""
        text = f"schedule/{self.kind}/{self.T}/{self.beta_min:.17g}/{self.beta_max:.17g}"
        return hashlib.sha256(text.encode("ascii")).digest()

    @property
    def fingerprint(self) -> str:
        return self.fingerprint_bytes.hex()


def build_schedule(
    kind: str = "linear",
    T: int = 1000,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
) -> NoiseSchedule:
    """Construct a schedule.

    ``linear`` spaces ``beta`` uniformly from ``beta_min`` to ``beta_max``;
    ``scaled-linear`` spaces ``sqrt(beta)`` uniformly and squares it.
    """
    if kind not in SCHEDULE_KINDS:
        raise ParameterError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParameterError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    else:
        beta = np.linspace(math.sqrt(beta_min), math.sqrt(beta_max), T, dtype=np.float64) ** 2
    alpha_bar = np.cumprod(1.0 - beta)
    lam = 0.5 * (np.log(alpha_bar) - np.log1p(-alpha_bar))
    for arr in (beta, alpha_bar, lam):
        arr.setflags(write=False)
    return NoiseSchedule(
        kind=kind, T=T, beta_min=float(beta_min), beta_max=float(beta_max),
        beta=beta, alpha_bar=alpha_bar, lam=lam,
    )


def h_step(schedule: NoiseSchedule, t: int, t_next: int) -> float:
    """Log-SNR gap ``lambda_t - lambda_{t_next}`` for ``1 <= t <= t_next``.

    ``t`` is the less-noisy step, so the gap is non-negative, zero only when
    the steps coincide. Gaps are additive along a grid:
    ``h(a, c) == h(a, b) + h(b, c)``.
    """
    if not (1 <= t <= schedule.T and 1 <= t_next <= schedule.T):
        raise ParameterError(f"steps must lie in [1, {schedule.T}], got {t}, {t_next}")
    if t > t_next:
        raise ParameterError(f"h_step needs t <= t_next, got t={t} > t_next={t_next}")
    return schedule.half_log_snr(t) - schedule.half_log_snr(t_next)


def sigma_ancestral(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    """Ancestral noise level for the transition ``t -> t_prev``.

    Returns ``eta * sqrt(beta_tilde)`` with

    ``beta_tilde = (1 - abar_prev) / (1 - abar_t) * (1 - abar_t / abar_prev)``.

    ``eta = 0`` gives the deterministic limit; ``eta = 1`` recovers the
    ancestral posterior standard deviation. ``t_prev = 0`` (clean boundary,
    ``abar = 1``) yields zero.
    """
    if not (0 <= t_prev < t <= schedule.T):
        raise ParameterError(f"need 0 <= t_prev < t <= {schedule.T}, got t={t}, t_prev={t_prev}")
    if eta < 0:
        raise ParameterError(f"eta must be >= 0, got {eta}")
    abar_t = schedule.abar(t)
    abar_prev = schedule.abar(t_prev)
    beta_tilde = (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev)
    return eta * math.sqrt(beta_tilde)


def sigma_dpmpp(schedule: NoiseSchedule, t_prev: int, t: int) -> float:
    """SDE solver noise level for the transition ``t -> t_prev``.

    Returns ``sqrt(1 - abar_{t_prev}) * sqrt(1 - exp(-2 h))`` where ``h`` is
    the log-SNR gap of the transition. Requires ``t_prev >= 1``; a repeated
    step (``h = 0``) degenerates to zero.
    """
    if t_prev < 1:
        raise ParameterError(f"sigma_dpmpp needs t_prev >= 1, got {t_prev}")
    h = h_step(schedule, t_prev, t)
    if h == 0.0:
        return 0.0
    return math.sqrt(1.0 - schedule.abar(t_prev)) * math.sqrt(-math.expm1(-2.0 * h))


@dataclass(frozen=True)
class TimestepGrid:
    """Strictly decreasing integer steps plus execution bookkeeping.

    ``steps[0]`` is the noisiest grid point and ``steps[-1]`` the last one
    before the clean boundary. ``start_index`` marks where execution begins
    once the skip fraction is applied; entries before it are carried in
    caches but never stepped through. ``terminal`` selects how the final
    transition to the clean state is taken: ``exact`` keeps it stochastic so
    stored noise can reproduce any target bit for bit, ``deterministic``
    collapses it to the plain signal prediction.
    """

    steps: tuple[int, ...]
    skip: float
    start_index: int
    terminal: str = "exact"

    def __post_init__(self) -> None:
        if len(self.steps) == 0:
            raise ParameterError("grid needs at least one step")
        if any(a <= b for a, b in zip(self.steps, self.steps[1:])):
            raise DegenerateGridError(f"grid steps must be strictly decreasing, got {self.steps}")
        if not 0 <= self.start_index < len(self.steps):
            raise ParameterError(f"start_index {self.start_index} outside grid")
        if self.terminal not in TERMINAL_MODES:
            raise ParameterError(f"terminal mode {self.terminal!r} not in {TERMINAL_MODES}")

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def n_executed(self) -> int:
        """Number of transitions actually run, terminal step included."""
        return len(self.steps) - self.start_index

    @property
    def executed_steps(self) -> tuple[int, ...]:
        return self.steps[self.start_index:]


def build_grid(
    schedule: NoiseSchedule,
    n_steps: int,
    skip: float = 0.0,
    terminal: str = "exact",
) -> TimestepGrid:
    """Uniform grid of ``n_steps`` integers from ``T`` down to 1.

    With ``skip = s`` the first executed step is the largest grid step at or
    below ``round((1 - s) * T)``; the grid itself always spans the full
    range so caches built over it stay valid for the recorded skip.
    """
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    if n_steps > schedule.T:
        raise ParameterError(f"n_steps {n_steps} exceeds schedule T {schedule.T}")
    if not 0.0 <= skip < 1.0:
        raise ParameterError(f"skip must lie in [0, 1), got {skip}")
    raw = np.round(np.linspace(schedule.T, 1, n_steps)).astype(int)
    steps = tuple(int(v) for v in raw)
    if len(set(steps)) != len(steps):
        raise DegenerateGridError(f"{n_steps} steps collide on T={schedule.T}; use fewer steps")
    start_index = 0
    if skip > 0.0:
        cutoff = round((1.0 - skip) * schedule.T)
        candidates = [i for i, s in enumerate(steps) if s <= cutoff]
        if not candidates:
            raise ParameterError(f"skip {skip} leaves no executable steps on this grid")
        start_index = candidates[0]
    return TimestepGrid(steps=steps, skip=float(skip), start_index=start_index, terminal=terminal)
