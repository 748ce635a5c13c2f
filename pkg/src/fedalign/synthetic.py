"""Synthetic image networks used by the tests, the acceptance suite and demos.

Two families:

* :func:`shifted_network` -- agents draw from one image distribution and
  then apply an agent-specific additive shift per colour channel.
* :func:`confounded_shapes` -- a 3-class shape dataset in which every agent
  adds its own colour cast plus a class-dependent brightness offset, so
  colour predicts the label locally but not across agents or on the
  held-out split.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from . import seeding
from .align import AgentState, LabeledImages, make_agents

SHAPE_CLASSES = 3


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def smooth_images(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Random low-frequency colour images with values in roughly [0.3, 0.7]."""
    coarse = rng.uniform(0.3, 0.7, size=(n, 4, 4, 3))
    reps = size // 4
    img = np.repeat(np.repeat(coarse, reps, axis=1), reps, axis=2)
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return img


def shifted_network(
    shifts: Sequence[Sequence[float]],
    images_per_agent: int = 200,
    size: int = 16,
    seed: int = 0,
) -> List[AgentState]:
    """Agents whose images differ by per-channel additive intensity shifts.

    ``shifts[a]`` is the ``(red, green, blue)`` shift of agent ``a`` in
    normalised units. Labels are all zero.
    """
    agents = []
    for a, shift in enumerate(shifts):
        rng = seeding.rng(seed, seeding.SYNTHETIC, 0, a)
        base = smooth_images(images_per_agent, size, rng)
        imgs = _to_uint8(base + np.asarray(shift, dtype=float)[None, None, None, :])
        agents.append(
            LabeledImages(imgs, np.zeros(images_per_agent, dtype=np.int64))
        )
    return make_agents(agents)


def _shape_masks(size: int) -> np.ndarray:
    masks = np.zeros((SHAPE_CLASSES, size, size))
    mid = size // 2
    w = max(2, size // 4)
    masks[0, mid - w // 2: mid + w // 2, 2:size - 2] = 1.0  # horizontal bar
    masks[1, 2:size - 2, mid - w // 2: mid + w // 2] = 1.0  # vertical bar
    masks[2, 2:size - 2, 2:size - 2] = 1.0  # hollow square
    masks[2, 2 + w:size - 2 - w, 2 + w:size - 2 - w] = 0.0
    return masks


def shape_images(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Grey-level shape images in [0, 1]: dim background, bright shape, noise."""
    masks = _shape_masks(size)
    n = len(labels)
    out = np.empty((n, size, size, 3))
    for i, c in enumerate(labels):
        dy, dx = rng.integers(-2, 3, size=2)
        mask = np.roll(np.roll(masks[c], dy, axis=0), dx, axis=1)
        bg = rng.uniform(0.30, 0.40)
        fg = bg + rng.uniform(0.15, 0.25)
        base = bg + (fg - bg) * mask
        out[i] = base[..., None] + rng.normal(0.0, 0.05, size=(size, size, 3))
    return out


def confounded_shapes(
    n_agents: int = 5,
    images_per_agent: int = 150,
    n_test: int = 300,
    size: int = 16,
    seed: int = 0,
    cast: float = 0.2,
    confound: float = 0.15,
) -> Tuple[List[AgentState], LabeledImages]:
    """Shape classes confounded by agent-specific colour.

    Agent ``a`` adds a colour cast drawn from ``[-cast, cast]^3`` and a
    brightness offset that depends on the class through an agent-specific
    permutation of ``{-confound, 0, +confound}``. The held-out split gets
    independent random casts and no class-dependent offset.
    """
    rng0 = seeding.rng(seed, seeding.SYNTHETIC, 1)
    offsets = np.linspace(-confound, confound, SHAPE_CLASSES)
    shards = []
    for a in range(n_agents):
        rng = seeding.rng(seed, seeding.SYNTHETIC, 2, a)
        labels = rng.integers(0, SHAPE_CLASSES, size=images_per_agent)
        base = shape_images(labels, size, rng)
        agent_cast = rng0.uniform(-cast, cast, size=3)
        class_offset = offsets[rng0.permutation(SHAPE_CLASSES)]
        shifted = base + agent_cast[None, None, None, :] + class_offset[labels][:, None, None, None]
        shards.append(LabeledImages(_to_uint8(shifted), labels))
    rng = seeding.rng(seed, seeding.SYNTHETIC, 3)
    labels = rng.integers(0, SHAPE_CLASSES, size=n_test)
    base = shape_images(labels, size, rng)
    casts = rng.uniform(-cast, cast, size=(n_test, 1, 1, 3))
    bright = rng.uniform(-confound, confound, size=(n_test, 1, 1, 1))
    test = LabeledImages(_to_uint8(base + casts + bright), labels)
    return make_agents(shards), test
