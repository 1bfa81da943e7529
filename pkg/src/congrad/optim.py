"""Step rules and update loops.

``clipped_step`` applies one SGD or Adam step with global-norm clipping and a
linear learning-rate warm-up. ``online_gd_update`` runs a fixed number of
steps on one gradient batch. ``congrad_update`` generates step-count
candidates and keeps whichever scores best on the validation residents,
rolling optimizer state back with it so rejected steps leave no trace.

All functions are pure: inputs are never mutated, fresh arrays come back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import NumericError, ShapeError


@dataclass(frozen=True)
class OptimConfig:
    rule: str = "adam"              # "sgd" | "adam"
    lr: float = 2.5e-4
    warmup: int = 2000              # steps of linear ramp from 0; 0 disables
    clip: float | None = 0.25       # l2-norm ceiling; None disables
    k_max: int = 1                  # gradient steps per stream batch
    delta: float | None = None      # stop when grad norm falls below; None disables
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    include_zero_step: bool = True  # let candidate selection keep the unstepped model

    def __post_init__(self):
        if self.rule not in ("sgd", "adam"):
            raise ValueError(f"unknown step rule {self.rule!r}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be > 0 when enabled")


class AdamState:
    """Moment estimates plus the global step counter driving warm-up."""

    __slots__ = ("m", "v", "step")

    def __init__(self, m: np.ndarray, v: np.ndarray, step: int):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)

    def resized(self, n: int) -> "AdamState":
        """State padded with zero moments for freshly appended parameters."""
        if n < len(self.m):
            raise ShapeError("parameter vector cannot shrink")
        if n == len(self.m):
            return self
        pad = n - len(self.m)
        return AdamState(np.concatenate([self.m, np.zeros(pad)]),
                         np.concatenate([self.v, np.zeros(pad)]), self.step)


def effective_lr(cfg: OptimConfig, step: int) -> float:
    """Learning rate after the linear warm-up ramp at a given step count."""
    if cfg.warmup <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup)


def clip_gradient(g: np.ndarray, clip: float | None) -> np.ndarray:
    if clip is None:
        return g
    norm = float(np.linalg.norm(g))
    if norm > clip:
        return g * (clip / norm)
    return g


def clipped_step(theta: np.ndarray, g: np.ndarray, state: AdamState,
                 cfg: OptimConfig) -> tuple[np.ndarray, AdamState]:
    """One optimizer step: clip, warm-up-scaled rate, SGD or Adam rule."""
    if theta.shape != g.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    g = clip_gradient(g, cfg.clip)
    step = state.step + 1
    lr = effective_lr(cfg, step)
    if cfg.rule == "sgd":
        return theta - lr * g, AdamState(state.m, state.v, step)
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    step_size = lr * math.sqrt(1.0 - cfg.beta2 ** step) / (1.0 - cfg.beta1 ** step)
    theta_next = theta - step_size * m / (np.sqrt(v) + cfg.eps)
    return theta_next, AdamState(m, v, step)


def online_gd_update(theta: np.ndarray, grad_fn, cfg: OptimConfig,
                     state: AdamState) -> tuple[np.ndarray, AdamState, int, float]:
    """k_max clipped steps on one batch; returns (theta, state, steps, last loss).

    ``grad_fn(theta) -> (loss, grad)`` is re-evaluated at each iterate. With a
    stop tolerance configured, iteration ends early once the gradient norm
    falls below it.
    """
    steps = 0
    last_loss = math.nan
    for _ in range(cfg.k_max):
        loss, g = grad_fn(theta)
        if cfg.delta is not None and float(np.linalg.norm(g)) <= cfg.delta:
            break
        theta, state = clipped_step(theta, g, state, cfg)
        steps += 1
        last_loss = loss
    return theta, state, steps, last_loss


def congrad_update(theta: np.ndarray, grad_fn, val_loss_fn, cfg: OptimConfig,
                   state: AdamState) -> tuple[np.ndarray, AdamState, int, float, float]:
    """Run up to k_max steps, keep the candidate with minimum validation loss.

    ``val_loss_fn(theta) -> float`` scores a candidate on the validation
    residents; pass None (no residents) to fall back to plain online GD.
    Candidates are theta after 0..k_max steps; ties go to the smallest step
    count. Returns (theta, state, chosen_k, last training loss, chosen
    validation loss).
    """
    if val_loss_fn is None:
        theta, state, steps, last_loss = online_gd_update(theta, grad_fn, cfg, state)
        return theta, state, steps, last_loss, math.nan

    best_val = math.inf
    best = None
    if cfg.include_zero_step:
        best_val = val_loss_fn(theta)
        best = (theta, state, 0)
    cur_theta, cur_state = theta, state
    last_loss = math.nan
    for k in range(1, cfg.k_max + 1):
        loss, g = grad_fn(cur_theta)
        last_loss = loss
        cur_theta, cur_state = clipped_step(cur_theta, g, cur_state, cfg)
        val = val_loss_fn(cur_theta)
        if val < best_val or best is None:
            best_val = val
            best = (cur_theta, cur_state, k)
    theta, state, chosen_k = best
    return theta, state, chosen_k, last_loss, best_val
