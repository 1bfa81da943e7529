"""Algorithmic learner variants: how each composes its gradient batch.

Four kinds: a pure online learner, one that trains only on replay samples,
one that mixes the two half-and-half, and a gradient-projection learner that
keeps the update from increasing replay loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEARNER_KINDS = ("online-only", "replay-only", "mixed-replay", "a-gem")


@dataclass(frozen=True)
class LearnerKind:
    kind: str = "online-only"
    mix_fraction: float = 0.5       # share of the gradient batch drawn from replay
    replay_sample: int | None = None  # None: match the popped batch size

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if not 0.0 <= self.mix_fraction <= 1.0:
            raise ValueError("mix_fraction must be in [0, 1]")


def compose_training_set(kind: LearnerKind, popped, replay, rng) -> list:
    """Assemble the gradient batch for one stream step.

    ``popped`` is the data the validation buffer released this step. An empty
    result means the caller should skip the update entirely.
    """
    popped = list(popped)
    if kind.kind in ("online-only", "a-gem"):
        return popped
    want = kind.replay_sample if kind.replay_sample is not None else len(popped)
    if kind.kind == "replay-only":
        return replay.sample(want, rng)
    # mixed-replay: popped plus a replay draw sized by the mix fraction,
    # truncated to the buffer's population instead of oversampling.
    f = kind.mix_fraction
    if f >= 1.0:
        return replay.sample(min(want, len(replay)), rng)
    n_replay = round(len(popped) * f / (1.0 - f))
    return popped + replay.sample(min(n_replay, len(replay)), rng)


def project_gradient(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Remove from g any component that conflicts with the reference gradient.

    Returns g unchanged when the gradients agree (non-negative dot product);
    otherwise projects g onto the half-space where dot(g, g_ref) = 0.
    """
    dot = float(g @ g_ref)
    if dot >= 0.0:
        return g
    denom = float(g_ref @ g_ref)
    if denom == 0.0:
        return g
    return g - (dot / denom) * g_ref


def agem_gradient(model, popped, replay, rng) -> tuple[float, np.ndarray]:
    """Loss on the popped batch and its gradient projected against replay.

    The reference gradient comes from a fresh replay sample of the same size
    as the popped batch; with an empty replay buffer the raw gradient is
    returned.
    """
    if not popped:
        raise ValueError("popped batch must be non-empty")
    loss, g = model.loss_and_grad_flat(popped)
    if len(replay) == 0:
        return loss, g
    ref = replay.sample(len(popped), rng)
    _, g_ref = model.loss_and_grad_flat(ref)
    return loss, project_gradient(g, g_ref)
