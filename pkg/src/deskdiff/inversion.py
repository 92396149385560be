"""Edit-friendly inversion: noisy sequences with independent noise,
extracted per-step noise maps, and the latent cache format.

The forward construction draws a *fresh* noise field for every grid step,

    x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps_tilde_t,

with the eps_tilde mutually independent across steps (counter-based streams
keyed by step). Consecutive states are therefore nearly uncorrelated, which
is what lets the extracted per-step noise ``z_t`` carry more than unit
variance and pin the whole trajectory.

Extraction walks the executed transitions and solves each solver update for
its noise term,

    z_t = (x_target - mu_t) / sigma_t,

using exactly the mean, noise level, and multistep memory the generator
will use. After each solve the stored target is overwritten with
``mu + sigma * z`` so that later steps see the same float32 states the
generator will produce; replaying the cache is then bit-exact and the
reconstruction error collapses to a single rounding step.

A DDIM inversion baseline is included for comparison: it estimates the
terminal state by reversing the deterministic update and has no per-step
noise to absorb model error, so its round-trip error is orders of magnitude
larger.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FormatError, ParameterError, StaleCacheError
from .model import Conditioning, DenoiserModel, Field, validate_field
from .rng import DOMAIN_FORWARD_NOISE, normal_field
from .sampler import apply_noise, dpmpp_mu, sigma_terminal, terminal_mu
from .schedule import NoiseSchedule, TimestepGrid, sigma_dpmpp

__all__ = [
    "EditFriendlyLatents",
    "build_reconstruction_sequence",
    "extract_noise_maps",
    "invert",
    "ddim_invert",
    "save_latents",
    "load_latents",
]

LATENTS_MAGIC = b"LPL1"
_TERMINAL_CODES = {"exact": 0, "deterministic": 1}
_TERMINAL_NAMES = {v: k for k, v in _TERMINAL_CODES.items()}


@dataclass(frozen=True)
class EditFriendlyLatents:
    """Everything needed to replay or edit one inverted input.

    ``x_seq`` holds the state at every grid step (noisiest first) plus the
    clean state at the end; entries at and beyond the executed window are
    sequence-corrected so the generator reproduces them bit for bit.
    ``z_seq`` holds one noise map per grid transition, index-aligned with
    the grid; transitions before the executed window and deterministic
    steps store zeros.
    """

    grid: TimestepGrid
    seed: int
    x_seq: np.ndarray
    z_seq: np.ndarray
    schedule_fingerprint: bytes
    model_fingerprint: bytes

    def __post_init__(self) -> None:
        k = self.grid.n_steps
        if self.x_seq.shape[0] != k + 1:
            raise ParameterError(f"x_seq must hold {k + 1} states, got {self.x_seq.shape[0]}")
        if self.z_seq.shape[0] != k:
            raise ParameterError(f"z_seq must hold {k} noise maps, got {self.z_seq.shape[0]}")
        if self.x_seq.shape[1:] != self.z_seq.shape[1:]:
            raise ParameterError("x_seq and z_seq field shapes differ")
        if self.x_seq.dtype != np.float32 or self.z_seq.dtype != np.float32:
            raise ParameterError("latent sequences must be float32")
        if len(self.schedule_fingerprint) != 32 or len(self.model_fingerprint) != 32:
            raise ParameterError("fingerprints must be 32 raw bytes")

    @property
    def field_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_seq.shape[1:])  # type: ignore[return-value]

    @property
    def x_start(self) -> Field:
        """State at the first executed grid step."""
        return self.x_seq[self.grid.start_index]

    def deterministic_steps(self, schedule: NoiseSchedule) -> tuple[bool, ...]:
        """Which executed transitions carry zero noise under this grid."""
        flags = []
        steps = self.grid.steps
        for i in range(self.grid.start_index, len(steps)):
            if i == len(steps) - 1:
                sigma = sigma_terminal(schedule, steps[i], self.grid.terminal)
            else:
                sigma = sigma_dpmpp(schedule, steps[i + 1], steps[i])
            flags.append(sigma == 0.0)
        return tuple(flags)

    def mean_z_power(self) -> float:
        """Mean of ``|z_t|^2 / N`` over executed transitions, a diagnostic."""
        z = self.z_seq[self.grid.start_index:]
        return float(np.mean(z.astype(np.float64) ** 2))


def build_reconstruction_sequence(
    x0: Field,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    seed: int,
) -> np.ndarray:
    """Noisy states at every grid step from independent per-step noise.

    Returns an array of ``n_steps + 1`` fields: index ``i`` is the state at
    ``grid.steps[i]`` and the last entry is ``x0`` itself. The noise field
    for step ``t`` comes from the stream ``(seed, forward-noise, t)``, so
    two sequences from the same seed agree step by step and sequences from
    different seeds are independent.
    """
    validate_field(x0, "x0")
    out = np.empty((grid.n_steps + 1, *x0.shape), dtype=np.float32)
    for i, t in enumerate(grid.steps):
        abar = schedule.abar(t)
        eps_tilde = normal_field(seed, DOMAIN_FORWARD_NOISE, t, x0.shape)
        out[i] = math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps_tilde
    out[grid.n_steps] = x0
    return out


def extract_noise_maps(
    x_seq: np.ndarray,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    cond: Optional[Conditioning] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve each executed transition for its noise map.

    Returns ``(x_corrected, z_seq)``. ``x_corrected`` starts as a copy of
    ``x_seq`` and has every executed target overwritten with
    ``mu + sigma * z`` so that replay is bit-exact; ``z_seq`` is
    index-aligned with the grid and zero outside the executed window and at
    deterministic steps. One model evaluation is spent per executed
    transition, reused as the multistep memory of the next one.
    """
    steps = grid.steps
    k = grid.n_steps
    if x_seq.shape[0] != k + 1:
        raise ParameterError(f"x_seq must hold {k + 1} states, got {x_seq.shape[0]}")
    work = x_seq.copy()
    z_seq = np.zeros((k, *x_seq.shape[1:]), dtype=np.float32)
    eps_prev: Optional[Field] = None
    prev_source: Optional[int] = None
    for i in range(grid.start_index, k):
        t = steps[i]
        eps_hat, _ = model.eps(work[i], t, cond)
        if i == k - 1:
            mu = terminal_mu(schedule, work[i], eps_hat, t)
            sigma = sigma_terminal(schedule, t, grid.terminal)
        else:
            mu = dpmpp_mu(
                schedule, work[i], eps_hat, t, steps[i + 1],
                eps_hat_prev=eps_prev, t_next=prev_source,
            )
            sigma = sigma_dpmpp(schedule, steps[i + 1], t)
        if sigma > 0.0:
            z = (work[i + 1] - mu) * np.float32(1.0 / sigma)
            z_seq[i] = z
            work[i + 1] = apply_noise(mu, sigma, z)
        else:
            work[i + 1] = mu
        eps_prev = eps_hat
        prev_source = t
    return work, z_seq


def invert(
    x0: Field,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    seed: int,
    cond: Optional[Conditioning] = None,
) -> EditFriendlyLatents:
    """Build the noisy sequence and extract its noise maps in one call."""
    raw = build_reconstruction_sequence(x0, schedule, grid, seed)
    corrected, z_seq = extract_noise_maps(raw, model, schedule, grid, cond)
    return EditFriendlyLatents(
        grid=grid,
        seed=seed,
        x_seq=corrected,
        z_seq=z_seq,
        schedule_fingerprint=schedule.fingerprint_bytes,
        model_fingerprint=bytes(model.fingerprint_bytes),
    )


def ddim_invert(
    x0: Field,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    steps: tuple[int, ...],
) -> Field:
    """Estimate the terminal state by reversing the deterministic update.

    Walks the grid from clean to noisy. Each ascent evaluates the model at
    the *target* step with the current state, predicts the clean signal
    from the current (less noisy) step, and re-noises it to the target:

        x_tgt = sqrt(abar_tgt) x0pred + sqrt(1 - abar_tgt) eps_hat

    The mismatch between the state the model was evaluated at and the state
    the deterministic generator will visit is the baseline's error source.
    """
    validate_field(x0, "x0")
    if any(a <= b for a, b in zip(steps, steps[1:])):
        raise ParameterError(f"steps must be strictly decreasing, got {steps}")
    x = x0
    sources = [0] + list(reversed(steps))[:-1]
    for t_src, t_tgt in zip(sources, reversed(steps)):
        eps_hat, _ = model.eps(x, t_tgt, None)
        abar_src = schedule.abar(t_src)
        abar_tgt = schedule.abar(t_tgt)
        x0_pred = (x - math.sqrt(1.0 - abar_src) * eps_hat) * (1.0 / math.sqrt(abar_src))
        x = math.sqrt(abar_tgt) * x0_pred + math.sqrt(1.0 - abar_tgt) * eps_hat
    return x


def save_latents(path, latents: EditFriendlyLatents) -> None:
    """Write a latent cache: fingerprints, grid, seed, then raw sequences."""
    grid = latents.grid
    c, h, w = latents.field_shape
    with open(path, "wb") as fh:
        fh.write(LATENTS_MAGIC)
        fh.write(latents.schedule_fingerprint)
        fh.write(latents.model_fingerprint)
        fh.write(struct.pack("<I", grid.n_steps))
        fh.write(struct.pack(f"<{grid.n_steps}I", *grid.steps))
        fh.write(struct.pack("<d", grid.skip))
        fh.write(struct.pack("<I", grid.start_index))
        fh.write(struct.pack("<B", _TERMINAL_CODES[grid.terminal]))
        fh.write(struct.pack("<Q", latents.seed))
        fh.write(struct.pack("<3I", c, h, w))
        fh.write(np.ascontiguousarray(latents.x_seq).tobytes())
        fh.write(np.ascontiguousarray(latents.z_seq).tobytes())


def load_latents(
    path,
    schedule: Optional[NoiseSchedule] = None,
    model: Optional[DenoiserModel] = None,
) -> EditFriendlyLatents:
    """Read a latent cache, verifying fingerprints when given a context.

    Passing the schedule or model the cache is about to be used with turns
    a mismatch into :class:`StaleCacheError` instead of silent corruption.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    if len(view) < 4 + 64 or bytes(view[:4]) != LATENTS_MAGIC:
        raise FormatError("not a latent cache: bad magic")
    sched_fp = bytes(view[4:36])
    model_fp = bytes(view[36:68])
    pos = 68
    try:
        (n_steps,) = struct.unpack_from("<I", view, pos)
        pos += 4
        steps = struct.unpack_from(f"<{n_steps}I", view, pos)
        pos += 4 * n_steps
        (skip,) = struct.unpack_from("<d", view, pos)
        pos += 8
        (start_index,) = struct.unpack_from("<I", view, pos)
        pos += 4
        (terminal_code,) = struct.unpack_from("<B", view, pos)
        pos += 1
        (seed,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        c, h, w = struct.unpack_from("<3I", view, pos)
        pos += 12
    except struct.error as exc:
        raise FormatError(f"latent cache truncated in header: {exc}") from exc
    if terminal_code not in _TERMINAL_NAMES:
        raise FormatError(f"unknown terminal mode code {terminal_code}")
    field_elems = c * h * w
    x_bytes = 4 * (n_steps + 1) * field_elems
    z_bytes = 4 * n_steps * field_elems
    if len(view) - pos != x_bytes + z_bytes:
        raise FormatError(
            f"latent cache payload has {len(view) - pos} bytes, expected {x_bytes + z_bytes}"
        )
    x_seq = np.frombuffer(view, dtype=np.float32, count=(n_steps + 1) * field_elems, offset=pos)
    x_seq = x_seq.reshape(n_steps + 1, c, h, w).copy()
    pos += x_bytes
    z_seq = np.frombuffer(view, dtype=np.float32, count=n_steps * field_elems, offset=pos)
    z_seq = z_seq.reshape(n_steps, c, h, w).copy()
    grid = TimestepGrid(
        steps=tuple(int(s) for s in steps),
        skip=float(skip),
        start_index=int(start_index),
        terminal=_TERMINAL_NAMES[terminal_code],
    )
    latents = EditFriendlyLatents(
        grid=grid, seed=int(seed), x_seq=x_seq, z_seq=z_seq,
        schedule_fingerprint=sched_fp, model_fingerprint=model_fp,
    )
    if schedule is not None and schedule.fingerprint_bytes != sched_fp:
        raise StaleCacheError("latent cache was built under a different schedule")
    if model is not None and bytes(model.fingerprint_bytes) != model_fp:
        raise StaleCacheError("latent cache was built under a different model")
    return latents
