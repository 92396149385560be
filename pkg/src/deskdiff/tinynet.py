"""A small convolutional denoiser with one cross-attention block.

The network exists to exercise the attention plumbing end to end: noisy
field in, noise prediction out, cross-attention maps stashed per layer,
head, position, and token. It is deliberately tiny (two downsampling
convolutions, one two-head cross-attention block at quarter resolution,
two upsampling convolutions) and entirely numpy, forward and backward, so
evaluations are bit-reproducible across processes with no framework in the
loop.

Weights live in a flat name-to-array dict, serialized with the tensor
format in :mod:`deskdiff.model`; the model fingerprint is the hash of that
serialization. Training is plain Adam on the noise-prediction objective
with a fixed seed and a fixed step budget, both of which belong in the run
configuration of any experiment that uses a trained instance.
"""

from __future__ import annotations

import hashlib
import math
from typing import Optional

import numpy as np

from .errors import ParameterError
from .model import AttentionStash, Conditioning, Field, serialize_weights, validate_field
from .rng import DOMAIN_TRAINING, DOMAIN_WEIGHTS, stream_generator
from .schedule import NoiseSchedule

__all__ = ["TinyDenoiser", "init_tiny_weights", "train_tiny"]

N_HEADS = 2


def _sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos position features of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t[:, None].astype(np.float64) * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return emb.astype(np.float32)


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _im2col(x: np.ndarray) -> np.ndarray:
    """3x3 patches of a padded batch, shape (B, H*W, C*9)."""
    b, c, h, w = x.shape
    xp = _pad1(x)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # (B, C, H, W, 3, 3) -> (B, H*W, C*9)
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(b, h * w, c * 9)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter patch gradients back."""
    b, c, h, w = shape
    # channels-last accumulator so the nine shifted adds stay contiguous;
    # one transpose at the end instead of one per patch offset
    grad = np.zeros((b, h + 2, w + 2, c), dtype=cols.dtype)
    patches = cols.reshape(b, h, w, c, 3, 3)
    for di in range(3):
        for dj in range(3):
            grad[:, di : di + h, dj : dj + w, :] += patches[:, :, :, :, di, dj]
    return np.ascontiguousarray(grad[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2))


def _conv_forward(x, w, b):
    """3x3 same-padding convolution via im2col; returns output and cache."""
    bsz, c, h, width = x.shape
    f = w.shape[0]
    cols = _im2col(x)
    flat_w = w.reshape(f, c * 9)
    out = cols @ flat_w.T + b
    return out.reshape(bsz, h, width, f).transpose(0, 3, 1, 2), (cols, flat_w, x.shape)


def _conv_backward(dout, cache, need_dx: bool = True):
    cols, flat_w, x_shape = cache
    bsz, _, h, w = x_shape
    f = flat_w.shape[0]
    dflat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(bsz * h * w, f)
    dw = (dflat.T @ cols.reshape(bsz * h * w, -1)).reshape(f, x_shape[1], 3, 3)
    db = dflat.sum(axis=0)
    dx = None
    if need_dx:
        dx = _col2im((dflat @ flat_w).reshape(bsz, h * w, -1), x_shape)
    return dx, dw, db


def _avgpool2(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) * np.float32(0.25)


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample2_backward(dout):
    b, c, h, w = dout.shape
    return dout.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def init_tiny_weights(
    seed: int,
    channels: int = 1,
    features: int = 16,
    vocab: int = 4,
) -> dict[str, np.ndarray]:
    """Seed-deterministic initialization; same seed, same bits."""
    if features % N_HEADS != 0:
        raise ParameterError(f"features must be divisible by {N_HEADS} heads")
    gen = stream_generator(seed, DOMAIN_WEIGHTS, 0)

    def dense(fan_in, *shape):
        scale = math.sqrt(2.0 / fan_in)
        return (gen.standard_normal(shape, dtype=np.float32) * np.float32(scale))

    f = features
    weights = {
        "conv1.w": dense(channels * 9, f, channels, 3, 3),
        "conv1.b": np.zeros(f, dtype=np.float32),
        "conv2.w": dense(f * 9, f, f, 3, 3),
        "conv2.b": np.zeros(f, dtype=np.float32),
        "time.w": dense(f, f, f),
        "time.b": np.zeros(f, dtype=np.float32),
        "tok.emb": dense(f, vocab, f),
        "attn.wq": dense(f, f, f),
        "attn.bq": np.zeros(f, dtype=np.float32),
        "attn.wk": dense(f, f, f),
        "attn.bk": np.zeros(f, dtype=np.float32),
        "attn.wv": dense(f, f, f),
        "attn.bv": np.zeros(f, dtype=np.float32),
        "attn.wo": dense(f, f, f),
        "attn.bo": np.zeros(f, dtype=np.float32),
        "conv3.w": dense(f * 9, f, f, 3, 3),
        "conv3.b": np.zeros(f, dtype=np.float32),
        "conv4.w": dense(f * 9, channels, f, 3, 3),
        "conv4.b": np.zeros(channels, dtype=np.float32),
    }
    return weights


def _forward(weights, x, t, tokens):
    """Batched forward pass returning prediction, attention, and cache."""
    cache: dict = {"tokens": tokens}
    f = weights["conv1.w"].shape[0]

    h1_pre, cache["conv1"] = _conv_forward(x, weights["conv1.w"], weights["conv1.b"])
    h1 = np.maximum(h1_pre, 0.0)
    cache["relu1"] = h1_pre > 0
    p1 = _avgpool2(h1)

    h2_pre, cache["conv2"] = _conv_forward(p1, weights["conv2.w"], weights["conv2.b"])
    h2 = np.maximum(h2_pre, 0.0)
    cache["relu2"] = h2_pre > 0
    p2 = _avgpool2(h2)

    temb = _sinusoidal_embedding(t, f)
    tproj = temb @ weights["time.w"].T + weights["time.b"]
    cache["temb"] = temb
    feat = p2 + tproj[:, :, None, None]

    attn_maps = None
    if tokens is not None:
        b, _, hh, ww = feat.shape
        n_tok = tokens.shape[1]
        dh = f // N_HEADS
        emb = weights["tok.emb"][tokens]  # (B, L, F)
        feat_flat = feat.transpose(0, 2, 3, 1).reshape(b, hh * ww, f)
        q = feat_flat @ weights["attn.wq"].T + weights["attn.bq"]
        k = emb @ weights["attn.wk"].T + weights["attn.bk"]
        v = emb @ weights["attn.wv"].T + weights["attn.bv"]
        qh = q.reshape(b, hh * ww, N_HEADS, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(b, n_tok, N_HEADS, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(b, n_tok, N_HEADS, dh).transpose(0, 2, 1, 3)
        logits = (qh @ kh.transpose(0, 1, 3, 2)) * np.float32(1.0 / math.sqrt(dh))
        logits -= logits.max(axis=-1, keepdims=True)
        expd = np.exp(logits)
        attn = expd / expd.sum(axis=-1, keepdims=True)  # (B, heads, HW, L)
        ctx = attn @ vh  # (B, heads, HW, dh)
        ctx_merged = ctx.transpose(0, 2, 1, 3).reshape(b, hh * ww, f)
        out = ctx_merged @ weights["attn.wo"].T + weights["attn.bo"]
        attn_out = out.reshape(b, hh, ww, f).transpose(0, 3, 1, 2)
        cache["attn"] = (feat.shape, feat_flat, emb, q, k, v, attn, ctx_merged)
        feat = feat + attn_out
        attn_maps = attn.reshape(b, N_HEADS, hh, ww, n_tok)

    u1 = _upsample2(feat)
    h3_pre, cache["conv3"] = _conv_forward(u1, weights["conv3.w"], weights["conv3.b"])
    h3 = np.maximum(h3_pre, 0.0)
    cache["relu3"] = h3_pre > 0
    u2 = _upsample2(h3)
    pred, cache["conv4"] = _conv_forward(u2, weights["conv4.w"], weights["conv4.b"])
    return pred, attn_maps, cache


def _backward(weights, dpred, cache):
    """Gradients of every weight given the loss gradient on the prediction."""
    grads: dict[str, np.ndarray] = {}
    tokens = cache["tokens"]
    f = weights["conv1.w"].shape[0]

    du2, grads["conv4.w"], grads["conv4.b"] = _conv_backward(dpred, cache["conv4"])
    dh3 = _upsample2_backward(du2) * cache["relu3"]
    du1, grads["conv3.w"], grads["conv3.b"] = _conv_backward(dh3, cache["conv3"])
    dfeat = _upsample2_backward(du1)

    if tokens is not None:
        feat_shape, feat_flat, emb, q, k, v, attn, ctx_merged = cache["attn"]
        b, _, hh, ww = feat_shape
        n_tok = tokens.shape[1]
        dh = f // N_HEADS
        # residual add: dfeat reaches the attention output and the skip path
        dout = dfeat.transpose(0, 2, 3, 1).reshape(b, hh * ww, f)
        grads["attn.wo"] = np.einsum("bnf,bnc->fc", dout, ctx_merged)
        grads["attn.bo"] = dout.sum(axis=(0, 1))
        dctx_merged = dout @ weights["attn.wo"]
        dctx = dctx_merged.reshape(b, hh * ww, N_HEADS, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(b, n_tok, N_HEADS, dh).transpose(0, 2, 1, 3)
        qh = q.reshape(b, hh * ww, N_HEADS, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(b, n_tok, N_HEADS, dh).transpose(0, 2, 1, 3)
        dattn = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ dctx
        inner = (dattn * attn).sum(axis=-1, keepdims=True)
        dlogits = attn * (dattn - inner) * np.float32(1.0 / math.sqrt(dh))
        dqh = dlogits @ kh
        dkh = dlogits.transpose(0, 1, 3, 2) @ qh
        dq = dqh.transpose(0, 2, 1, 3).reshape(b, hh * ww, f)
        dk = dkh.transpose(0, 2, 1, 3).reshape(b, n_tok, f)
        dv = dvh.transpose(0, 2, 1, 3).reshape(b, n_tok, f)
        grads["attn.wq"] = np.einsum("bnf,bnc->fc", dq, feat_flat)
        grads["attn.bq"] = dq.sum(axis=(0, 1))
        grads["attn.wk"] = np.einsum("blf,blc->fc", dk, emb)
        grads["attn.bk"] = dk.sum(axis=(0, 1))
        grads["attn.wv"] = np.einsum("blf,blc->fc", dv, emb)
        grads["attn.bv"] = dv.sum(axis=(0, 1))
        demb = dk @ weights["attn.wk"] + dv @ weights["attn.wv"]
        grads["tok.emb"] = np.zeros_like(weights["tok.emb"])
        np.add.at(grads["tok.emb"], tokens.ravel(), demb.reshape(-1, f))
        dfeat_q = (dq @ weights["attn.wq"]).reshape(b, hh, ww, f).transpose(0, 3, 1, 2)
        dfeat = dfeat + dfeat_q

    dtproj = dfeat.sum(axis=(2, 3))
    grads["time.w"] = dtproj.T @ cache["temb"].astype(dtproj.dtype)
    grads["time.b"] = dtproj.sum(axis=0)

    dp2 = dfeat
    dh2 = _avgpool2_backward(dp2) * cache["relu2"]
    dp1, grads["conv2.w"], grads["conv2.b"] = _conv_backward(dh2, cache["conv2"])
    dh1 = _avgpool2_backward(dp1) * cache["relu1"]
    _, grads["conv1.w"], grads["conv1.b"] = _conv_backward(dh1, cache["conv1"], need_dx=False)
    return grads


class TinyDenoiser:
    """Denoiser-protocol wrapper over the numpy network."""

    def __init__(self, weights: dict[str, np.ndarray]):
        missing = set(init_tiny_weights(0)) - set(weights)
        if missing:
            raise ParameterError(f"weights missing tensors: {sorted(missing)}")
        self.weights = weights

    @property
    def fingerprint_bytes(self) -> bytes:
        return hashlib.sha256(serialize_weights(self.weights)).digest()

    @property
    def fingerprint(self) -> str:
        return self.fingerprint_bytes.hex()

    @property
    def channels(self) -> int:
        return self.weights["conv1.w"].shape[1]

    @property
    def vocab(self) -> int:
        return self.weights["tok.emb"].shape[0]

    def eps(
        self, x: Field, t: int, cond: Optional[Conditioning] = None
    ) -> tuple[Field, Optional[AttentionStash]]:
        validate_field(x)
        if x.shape[0] != self.channels:
            raise ParameterError(f"field has {x.shape[0]} channels, weights expect {self.channels}")
        if x.shape[1] % 4 != 0 or x.shape[2] % 4 != 0:
            raise ParameterError("field height and width must be divisible by 4")
        if t < 1:
            raise ParameterError(f"model evaluation needs t >= 1, got {t}")
        # The unconditional branch is the null caption: attention runs over
        # token zero alone, so concept differences cancel the shared context
        # exactly instead of comparing against an attention-free pass.
        tokens = np.zeros((1, 1), dtype=np.int64)
        if cond is not None and len(cond.tokens) > 0:
            tok = np.asarray(cond.tokens, dtype=np.int64)
            if np.any(tok < 0) or np.any(tok >= self.vocab):
                raise ParameterError(f"token ids {cond.tokens} outside vocab of {self.vocab}")
            tokens = tok[None, :]
        elif cond is not None and len(cond.components) > 0:
            raise ParameterError("this denoiser is conditioned by tokens, not components")
        pred, attn, _ = _forward(self.weights, x[None], np.array([t]), tokens)
        stash = AttentionStash(maps=attn[0][None].astype(np.float32))  # (1, heads, H, W, L)
        return pred[0].astype(np.float32), stash


def train_tiny(
    weights: dict[str, np.ndarray],
    schedule: NoiseSchedule,
    sample_batch,
    seed: int,
    steps: int,
    batch_size: int = 8,
    lr: float = 2e-3,
    cond_drop: float = 0.1,
) -> list[float]:
    """Adam training on the noise-prediction objective, in place.

    ``sample_batch(generator, batch_size)`` must yield ``(x0, tokens)`` with
    ``x0`` of shape (B, C, H, W) float32 and ``tokens`` int64 (B, L).
    With probability ``cond_drop`` per step the caption collapses to the
    null caption (all token zero) so the branch that concept guidance
    subtracts against trains too. Returns the per-step loss history.
    """
    gen = stream_generator(seed, DOMAIN_TRAINING, 0)
    adam_m = {k: np.zeros_like(w) for k, w in weights.items()}
    adam_v = {k: np.zeros_like(w) for k, w in weights.items()}
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    losses = []
    for step in range(1, steps + 1):
        x0, tokens = sample_batch(gen, batch_size)
        t = gen.integers(1, schedule.T + 1, size=batch_size)
        noise = gen.standard_normal(x0.shape, dtype=np.float32)
        abar = schedule.alpha_bar[t - 1].astype(np.float32)
        sa = np.sqrt(abar)[:, None, None, None]
        sn = np.sqrt(1.0 - abar)[:, None, None, None].astype(np.float32)
        x_t = sa * x0 + sn * noise
        if gen.random() < cond_drop:
            tokens = np.zeros_like(tokens)
        pred, _, cache = _forward(weights, x_t, t, tokens)
        diff = (pred - noise).astype(np.float32)
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        losses.append(loss)
        dpred = (2.0 / diff.size) * diff
        grads = _backward(weights, dpred, cache)
        for name, g in grads.items():
            adam_m[name] = beta1 * adam_m[name] + (1 - beta1) * g
            adam_v[name] = beta2 * adam_v[name] + (1 - beta2) * (g * g)
            mhat = adam_m[name] / (1 - beta1**step)
            vhat = adam_v[name] / (1 - beta2**step)
            weights[name] -= (lr * mhat / (np.sqrt(vhat) + eps_adam)).astype(np.float32)
    return losses
