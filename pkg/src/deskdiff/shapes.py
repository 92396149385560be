"""Seeded synthetic scenes of axis-aligned shapes with exact masks.

Each scene is a single-channel 32x32 field containing one to three
non-overlapping rectangles of three kinds (square, horizontal bar,
vertical bar), each kind with its own signed intensity so a model can
tell them apart. The caption is a token sequence: a scene token followed
by one kind token per placed object, in placement order, so token ``j+1``
refers to object ``j`` and the dataset can hand back the exact pixel mask
that token should attend to.

Everything is a pure function of ``(seed, index)`` through the dataset
random stream, so scenes are reproducible across processes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .rng import DOMAIN_DATASET, stream_generator

__all__ = ["SceneSample", "TOKEN_SCENE", "TOKEN_SQUARE", "TOKEN_HBAR", "TOKEN_VBAR", "VOCAB_SIZE", "make_scene", "scene_batch_sampler"]

TOKEN_SCENE = 0
TOKEN_SQUARE = 1
TOKEN_HBAR = 2
TOKEN_VBAR = 3
VOCAB_SIZE = 4

SIDE = 32
# kind -> (height range, width range, base intensity)
_KIND_GEOMETRY = {
    TOKEN_SQUARE: ((8, 12), (8, 12), 1.0),
    TOKEN_HBAR: ((4, 6), (14, 22), -1.0),
    TOKEN_VBAR: ((14, 22), (4, 6), 0.6),
}


@dataclass(frozen=True)
class SceneSample:
    """One generated scene: field, caption tokens, and per-object masks."""

    field: np.ndarray  # (1, SIDE, SIDE) float32
    tokens: tuple[int, ...]  # TOKEN_SCENE followed by one kind token per object
    masks: np.ndarray  # (n_objects, SIDE, SIDE) float32 in {0, 1}

    @property
    def n_objects(self) -> int:
        return self.masks.shape[0]


def _place_rect(gen, occupied, kind):
    """Try to place one rectangle of the given kind; None if it never fits."""
    (hmin, hmax), (wmin, wmax), _ = _KIND_GEOMETRY[kind]
    for _ in range(40):
        h = int(gen.integers(hmin, hmax + 1))
        w = int(gen.integers(wmin, wmax + 1))
        r = int(gen.integers(0, SIDE - h + 1))
        c = int(gen.integers(0, SIDE - w + 1))
        if not occupied[r : r + h, c : c + w].any():
            return r, c, h, w
    return None


def make_scene(seed: int, index: int) -> SceneSample:
    """Deterministic scene number ``index`` of the dataset stream ``seed``."""
    if index < 0:
        raise ParameterError(f"scene index must be non-negative, got {index}")
    gen = stream_generator(seed, DOMAIN_DATASET, index)
    n_objects = int(gen.integers(1, 4))
    field = np.zeros((1, SIDE, SIDE), dtype=np.float32)
    occupied = np.zeros((SIDE, SIDE), dtype=bool)
    tokens = [TOKEN_SCENE]
    masks = []
    for _ in range(n_objects):
        kind = int(gen.integers(TOKEN_SQUARE, TOKEN_VBAR + 1))
        spot = _place_rect(gen, occupied, kind)
        if spot is None:
            continue  # crowded scene; keep what fit
        r, c, h, w = spot
        base = _KIND_GEOMETRY[kind][2]
        value = np.float32(base * (1.0 + 0.1 * (gen.random() - 0.5)))
        field[0, r : r + h, c : c + w] = value
        occupied[r : r + h, c : c + w] = True
        mask = np.zeros((SIDE, SIDE), dtype=np.float32)
        mask[r : r + h, c : c + w] = 1.0
        tokens.append(kind)
        masks.append(mask)
    return SceneSample(field=field, tokens=tuple(tokens), masks=np.stack(masks, axis=0))


def scene_batch_sampler(pad_tokens: int = 4):
    """Training-batch callback: scenes with captions padded to a fixed length.

    Captions shorter than ``pad_tokens`` repeat the scene token, which is
    harmless padding: it names the whole scene rather than any object.
    """

    def sample(gen: np.random.Generator, batch_size: int):
        fields = np.zeros((batch_size, 1, SIDE, SIDE), dtype=np.float32)
        tokens = np.full((batch_size, pad_tokens), TOKEN_SCENE, dtype=np.int64)
        base = int(gen.integers(0, 2**31))
        for i in range(batch_size):
            scene = make_scene(base, i)
            fields[i] = scene.field
            ntok = min(len(scene.tokens), pad_tokens)
            tokens[i, :ntok] = scene.tokens[:ntok]
        return fields, tokens

    return sample
