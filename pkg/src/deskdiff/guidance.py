"""Multi-concept semantic guidance on top of unconditional sampling.

For each edit concept ``i`` at each executed step the guidance term is

    gamma_i = phi_i * psi_i,
    psi_i   = +-(eps_cond_i - eps_uncond),
    phi_i   = scale_i * M1_i * M2_i   (or scale_i * user_mask),

and the stepped noise prediction is ``eps_uncond + sum_i gamma_i``. The sum
runs in instruction order, so results are deterministic regardless of how
many concepts are active. With no active concepts the unconditional
prediction passes through unchanged (object identity, not a copy), which is
what makes zero-edit runs bit-identical to pure reconstruction.

Classifier-free guidance is the single-concept special case with an
all-ones mask: ``eps_uncond + scale * (eps_cond - eps_uncond)``. The
composition here shares that arithmetic literally, so the reduction is
exact, not approximate.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError
from .masking import MaskPair, masks_for_concept, phi_mask
from .model import AttentionStash, Conditioning, DenoiserModel, Field
from .sampler import GuidanceFn
from .schedule import NoiseSchedule

__all__ = [
    "EditInstruction",
    "GuidanceRecorder",
    "cfg_eps",
    "psi",
    "gamma",
    "combine_edits",
    "build_guidance",
    "active_concepts_at",
]

DIRECTIONS = ("positive", "negative")


@dataclass(frozen=True)
class EditInstruction:
    """One edit concept: what to condition on and how to apply it.

    ``skip`` delays the concept's activation: at steps noisier than
    ``round((1 - skip) * T)`` the concept is skipped entirely (no model
    evaluation, no contribution). Defaults to always active.

    ``attend_positions`` selects which caption positions' attention columns
    define the attention mask. Empty means every position after the leading
    scene token (or all of them for a single-token caption), matching the
    edit-caption structure where position 0 names the whole scene.
    """

    conditioning: Conditioning
    direction: str = "positive"
    scale: float = 5.0
    threshold: float = 0.75
    user_mask: Optional[np.ndarray] = None
    skip: float = 0.0
    label: str = ""
    attend_positions: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.direction not in DIRECTIONS:
            raise ParameterError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        n_tok = len(self.conditioning.tokens)
        for pos in self.attend_positions:
            if not 0 <= pos < n_tok:
                raise ParameterError(
                    f"attend position {pos} outside the {n_tok}-token caption"
                )
        if len(set(self.attend_positions)) != len(self.attend_positions):
            raise ParameterError("attend positions must not repeat")
        if self.scale < 0:
            raise ParameterError(f"edit scale must be >= 0, got {self.scale}")
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 <= self.skip < 1.0:
            raise ParameterError(f"per-concept skip must lie in [0, 1), got {self.skip}")
        if self.user_mask is not None:
            m = np.asarray(self.user_mask)
            if m.ndim != 2:
                raise ParameterError("user mask must be 2-d (H, W)")
            if not np.all(np.isin(np.unique(m), (0, 1))):
                raise ParameterError("user mask must be binary with values in {0, 1}")
            object.__setattr__(self, "user_mask", m.astype(np.float32))


@dataclass
class StepMaskRecord:
    """Per-step, per-concept mask bookkeeping for metrics and dumps."""

    t: int
    concept: int
    label: str
    m1_count: int
    m2_count: int
    phi_count: int
    source: str  # "implicit" or "user"
    pair: Optional[MaskPair] = None


@dataclass
class GuidanceRecorder:
    """Collects mask records across a run; attach via ``build_guidance``."""

    records: list[StepMaskRecord] = dataclass_field(default_factory=list)
    keep_pairs: bool = False

    def add(self, record: StepMaskRecord) -> None:
        if not self.keep_pairs:
            record.pair = None
        self.records.append(record)


def cfg_eps(eps_uncond: Field, eps_cond: Field, scale: float) -> Field:
    """Classifier-free guidance: ``eps_uncond + scale (eps_cond - eps_uncond)``."""
    return eps_uncond + scale * (eps_cond - eps_uncond)


def psi(eps_uncond: Field, eps_cond: Field, direction: str) -> Field:
    """Signed guidance direction for one concept."""
    if direction not in DIRECTIONS:
        raise ParameterError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    diff = eps_cond - eps_uncond
    return diff if direction == "positive" else -diff


def gamma(psi_field: Field, phi: np.ndarray) -> Field:
    """Masked guidance term ``phi * psi``, ``phi`` broadcast over channels."""
    if phi.shape != psi_field.shape[1:]:
        raise ParameterError(f"phi shape {phi.shape} does not match field spatial shape")
    return phi * psi_field


def combine_edits(gammas: Sequence[Field], like: Optional[Field] = None) -> Field:
    """Sum guidance terms in order; an empty list is the zero field."""
    if len(gammas) == 0:
        if like is None:
            raise ParameterError("empty edit set needs a reference field for its shape")
        return np.zeros_like(like)
    out = gammas[0].copy()
    for g in gammas[1:]:
        if g.shape != out.shape:
            raise ParameterError("guidance terms must share one field shape")
        out += g
    return out


def build_guidance(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    instructions: Sequence[EditInstruction],
    recorder: Optional[GuidanceRecorder] = None,
) -> GuidanceFn:
    """Compose edit instructions into a sampler guidance callback.

    Each active concept spends one conditional model evaluation per step;
    its attention stash (when the model yields one) feeds ``M1`` with no
    extra evaluation. With an empty instruction list, or at steps where
    every concept is inactive, the unconditional prediction is returned
    unchanged.
    """
    instructions = list(instructions)

    def guidance_fn(
        x_t: Field, t: int, eps_uncond: Field, stash_uncond: Optional[AttentionStash]
    ) -> Field:
        gammas: list[Field] = []
        for idx, ins in enumerate(instructions):
            if t > round((1.0 - ins.skip) * schedule.T):
                continue
            eps_cond, stash_cond = model.eps(x_t, t, ins.conditioning)
            p = psi(eps_uncond, eps_cond, ins.direction)
            if ins.user_mask is not None:
                if ins.user_mask.shape != x_t.shape[1:]:
                    raise ParameterError(
                        f"user mask shape {ins.user_mask.shape} does not match field "
                        f"spatial shape {x_t.shape[1:]}"
                    )
                phi = ins.scale * ins.user_mask
                pair = None
                count = int(np.count_nonzero(ins.user_mask))
                counts = (count, count, count)
                source = "user"
            else:
                positions = ins.attend_positions
                if not positions:
                    n_tok = len(ins.conditioning.tokens)
                    positions = tuple(range(1, n_tok)) if n_tok > 1 else tuple(range(n_tok))
                pair = masks_for_concept(p, stash_cond, positions, ins.threshold)
                phi = phi_mask(ins.scale, pair.m1, pair.m2)
                counts = pair.counts
                source = "implicit"
            gammas.append(gamma(p, phi))
            if recorder is not None:
                recorder.add(StepMaskRecord(
                    t=t, concept=idx, label=ins.label,
                    m1_count=counts[0], m2_count=counts[1], phi_count=counts[2],
                    source=source, pair=pair,
                ))
        if not gammas:
            return eps_uncond
        return eps_uncond + combine_edits(gammas)

    return guidance_fn


def active_concepts_at(
    instructions: Sequence[EditInstruction], schedule: NoiseSchedule, t: int
) -> int:
    """How many concepts evaluate at step ``t``; feeds eval-count checks."""
    return sum(1 for ins in instructions if t <= round((1.0 - ins.skip) * schedule.T))
