"""Denoiser models: the common interface, the analytic mixture denoiser,
and the binary weights format.

A *field* is a ``float32`` array of shape ``(C, H, W)``. Models consume a
field at an integer step ``t`` and return the predicted noise ``eps`` plus,
when the architecture produces one, a stash of cross-attention maps.

The analytic denoiser computes the exact posterior-mean noise prediction
for an isotropic Gaussian mixture, which makes it a ground-truth reference:
every quantity downstream of it can be checked against closed forms instead
of a trained network.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from .errors import FormatError, ParameterError
from .schedule import NoiseSchedule

__all__ = [
    "Field",
    "validate_field",
    "Conditioning",
    "AttentionStash",
    "DenoiserModel",
    "GMMSpec",
    "AnalyticGMMDenoiser",
    "CountingModel",
    "serialize_weights",
    "deserialize_weights",
    "save_weights",
    "load_weights",
    "weights_fingerprint_bytes",
]

Field = np.ndarray

WEIGHTS_MAGIC = b"LPW1"


def validate_field(x: np.ndarray, name: str = "field") -> np.ndarray:
    """Check the ``(C, H, W)`` float32 convention and return the array."""
    if not isinstance(x, np.ndarray) or x.ndim != 3:
        raise ParameterError(f"{name} must be a 3-d array (C, H, W)")
    if x.dtype != np.float32:
        raise ParameterError(f"{name} must be float32, got {x.dtype}")
    return x


@dataclass(frozen=True)
class Conditioning:
    """What a model is conditioned on for one concept.

    ``tokens`` address attention-bearing models; ``components`` restrict the
    analytic mixture to a subset of its modes. Either may be empty when the
    model does not use it.
    """

    tokens: tuple[int, ...] = ()
    components: tuple[int, ...] = ()
    label: str = ""


@dataclass(frozen=True)
class AttentionStash:
    """Cross-attention maps captured during one model evaluation.

    ``maps`` has shape ``(layers, heads, H, W, tokens)`` at the smallest
    feature resolution. Entries are non-negative and each spatial position's
    row over tokens sums to one.
    """

    maps: np.ndarray

    def __post_init__(self) -> None:
        if self.maps.ndim != 5:
            raise ParameterError("attention stash must be (layers, heads, H, W, tokens)")

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.maps.shape[2], self.maps.shape[3])

    @property
    def n_tokens(self) -> int:
        return self.maps.shape[4]


@runtime_checkable
class DenoiserModel(Protocol):
    """Anything that predicts noise from a noisy field at step ``t``."""

    @property
    def fingerprint_bytes(self) -> bytes: ...

    def eps(
        self, x: Field, t: int, cond: Optional[Conditioning] = None
    ) -> tuple[Field, Optional[AttentionStash]]: ...


@dataclass(frozen=True)
class GMMSpec:
    """Isotropic Gaussian mixture over clean fields.

    Attributes:
        means: Component means, shape ``(K, C, H, W)``, float64.
        scales: Per-component isotropic standard deviations, shape ``(K,)``.
        weights: Mixing weights, shape ``(K,)``; normalized to sum to one.
    """

    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 4:
            raise ParameterError("means must have shape (K, C, H, W)")
        scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        weights = self.weights
        if weights is None:
            weights = np.full(means.shape[0], 1.0 / means.shape[0])
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        k = means.shape[0]
        if k == 0:
            raise ParameterError("mixture needs at least one component")
        if scales.shape != (k,) or weights.shape != (k,):
            raise ParameterError("scales and weights must have one entry per component")
        if np.any(scales <= 0):
            raise ParameterError("component scales must be positive")
        if np.any(weights <= 0):
            raise ParameterError("component weights must be positive")
        weights = weights / weights.sum()
        for arr in (means, scales, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "weights", weights)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def field_shape(self) -> tuple[int, int, int]:
        return tuple(self.means.shape[1:])  # type: ignore[return-value]

    @property
    def fingerprint_bytes(self) -> bytes:
        h = hashlib.sha256(b"gmm")
        h.update(struct.pack("<4I", *self.means.shape))
        h.update(self.means.tobytes())
        h.update(self.scales.tobytes())
        h.update(self.weights.tobytes())
        return h.digest()


class AnalyticGMMDenoiser:
    """Exact posterior-mean noise prediction under a Gaussian mixture prior.

    For ``x_t = sqrt(abar) x_0 + sqrt(1 - abar) eps`` with ``x_0`` drawn
    from the mixture, the marginal of ``x_t`` given component ``k`` is
    ``N(sqrt(abar) mu_k, (abar s_k^2 + 1 - abar) I)``. The denoiser forms
    component responsibilities from those marginals, takes the posterior
    mean of ``x_0``, and converts it to a noise prediction:

        eps_hat = (x_t - sqrt(abar) E[x_0 | x_t]) / sqrt(1 - abar)

    Conditioning restricts the mixture to a component subset with weights
    renormalized, which is how concept prompts are realized analytically.
    Evaluations are pure float64 arithmetic and bit-reproducible.
    """

    def __init__(self, spec: GMMSpec, schedule: NoiseSchedule):
        self.spec = spec
        self.schedule = schedule

    @property
    def fingerprint_bytes(self) -> bytes:
        return self.spec.fingerprint_bytes

    @property
    def fingerprint(self) -> str:
        return self.fingerprint_bytes.hex()

    def _subset(self, cond: Optional[Conditioning]) -> np.ndarray:
        if cond is None or len(cond.components) == 0:
            if cond is not None and len(cond.tokens) > 0 and len(cond.components) == 0:
                raise ParameterError("analytic denoiser conditioning needs component indices")
            return np.arange(self.spec.n_components)
        idx = np.asarray(cond.components, dtype=int)
        if idx.size == 0:
            raise ParameterError("component subset must be non-empty")
        if np.any(idx < 0) or np.any(idx >= self.spec.n_components):
            raise ParameterError(f"component indices {cond.components} out of range")
        if len(set(cond.components)) != len(cond.components):
            raise ParameterError("component subset must not repeat indices")
        return idx

    def posterior_mean_x0(
        self, x: Field, t: int, cond: Optional[Conditioning] = None
    ) -> np.ndarray:
        """``E[x_0 | x_t]`` under the (possibly restricted) mixture, float64."""
        validate_field(x)
        if x.shape != self.spec.field_shape:
            raise ParameterError(
                f"field shape {x.shape} does not match mixture shape {self.spec.field_shape}"
            )
        idx = self._subset(cond)
        means = self.spec.means[idx]
        scales = self.spec.scales[idx]
        weights = self.spec.weights[idx]
        weights = weights / weights.sum()

        abar = self.schedule.abar(t)
        if t < 1:
            raise ParameterError(f"model evaluation needs t >= 1, got {t}")
        sa = np.sqrt(abar)
        var = abar * scales**2 + (1.0 - abar)  # (k,)

        x64 = x.astype(np.float64)
        diff = x64[None] - sa * means  # (k, C, H, W)
        sq = np.sum(diff * diff, axis=(1, 2, 3))  # (k,)
        n = x64.size
        log_resp = np.log(weights) - 0.5 * n * np.log(2.0 * np.pi * var) - sq / (2.0 * var)
        log_resp -= log_resp.max()
        resp = np.exp(log_resp)
        resp /= resp.sum()

        shrink = (sa * scales**2) / var  # (k,)
        cond_mean = means + shrink[:, None, None, None] * diff
        return np.tensordot(resp, cond_mean, axes=(0, 0))

    def eps(
        self, x: Field, t: int, cond: Optional[Conditioning] = None
    ) -> tuple[Field, Optional[AttentionStash]]:
        abar = self.schedule.abar(t)
        x0_hat = self.posterior_mean_x0(x, t, cond)
        eps = (x.astype(np.float64) - np.sqrt(abar) * x0_hat) / np.sqrt(1.0 - abar)
        return eps.astype(np.float32), None


class CountingModel:
    """Decorator that counts evaluations of a wrapped denoiser.

    Pipelines wrap their model once per run and read the counter back into
    the metrics record, where it is checked against the closed-form
    prediction for the run's step and concept structure.
    """

    def __init__(self, inner: DenoiserModel):
        self.inner = inner
        self.count = 0

    @property
    def fingerprint_bytes(self) -> bytes:
        return self.inner.fingerprint_bytes

    def eps(
        self, x: Field, t: int, cond: Optional[Conditioning] = None
    ) -> tuple[Field, Optional[AttentionStash]]:
        self.count += 1
        return self.inner.eps(x, t, cond)


def serialize_weights(weights: dict[str, np.ndarray]) -> bytes:
    """Encode named float32 tensors; names are sorted for stable bytes."""
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<I", len(weights)))
    for name in sorted(weights):
        arr = weights[name]
        if arr.dtype != np.float32:
            raise ParameterError(f"tensor {name!r} must be float32, got {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def deserialize_weights(data: bytes) -> dict[str, np.ndarray]:
    """Decode tensors written by :func:`serialize_weights`."""
    view = memoryview(data)
    if len(view) < 8 or bytes(view[:4]) != WEIGHTS_MAGIC:
        raise FormatError("not a weights payload: bad magic")
    (count,) = struct.unpack_from("<I", view, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            if len(view[pos : pos + name_len]) != name_len:
                raise FormatError("weights payload truncated in name")
            pos += name_len
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            n_elems = int(np.prod(shape, dtype=np.int64))
            n_bytes = 4 * n_elems
            raw = bytes(view[pos : pos + n_bytes])
            if len(raw) != n_bytes:
                raise FormatError("weights payload truncated in tensor data")
            pos += n_bytes
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}")
            out[name] = np.frombuffer(raw, dtype=np.float32).reshape(shape).copy()
    except struct.error as exc:
        raise FormatError(f"weights payload truncated: {exc}") from exc
    if pos != len(view):
        raise FormatError("trailing bytes after last tensor")
    return out


def save_weights(path, weights: dict[str, np.ndarray]) -> None:
    data = serialize_weights(weights)
    with open(path, "wb") as fh:
        fh.write(data)


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return deserialize_weights(fh.read())


def weights_fingerprint_bytes(weights: dict[str, np.ndarray]) -> bytes:
    return hashlib.sha256(serialize_weights(weights)).digest()
