"""Dense MLP predictor with manual backpropagation and per-user conditioning.

The backbone is a feed-forward ReLU network over 64-bit floats. A model can
condition on a per-user embedding in one of four ways:

  * ``agnostic``  -- the user id is ignored entirely.
  * ``encoder``   -- a residual MLP modulates the input features.
  * ``decoder``   -- a residual MLP modulates the final hidden activation.
  * ``adapter``   -- one residual MLP per hidden layer modulates each
                     hidden activation.

Every residual block computes ``h + W2 @ relu(W1 @ [h; e_u] + b1) + b2`` with
the output layer (W2, b2) initialised to zero, so a fresh model and a fresh
user both start exactly at the user-agnostic function.

All trainable parameters live in one flat float64 vector ``theta``: the
static blocks (backbone + residual blocks) first, then user embeddings in
creation order. The vector grows at the end when new users appear, so
optimizer state indexed against it stays aligned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MODES = ("agnostic", "encoder", "decoder", "adapter")


class ShapeError(ValueError):
    """Input or parameter dimensions do not match the configured model."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where finite math is required."""


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (100, 100)
    mode: str = "agnostic"
    user_dim: int = 32
    cond_hidden: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown conditioning mode {self.mode!r}, expected one of {MODES}")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer sizes must be positive")


def _block_dims(cfg: ModelConfig) -> list[int]:
    """Widths of the activations modulated by residual blocks, in forward order."""
    if cfg.mode == "encoder":
        return [cfg.input_dim]
    if cfg.mode == "decoder":
        return [cfg.hidden[-1]]
    if cfg.mode == "adapter":
        return list(cfg.hidden)
    return []


class Model:
    """MLP with a growing per-user embedding table, all parameters flat."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self._shapes: list[tuple[str, tuple[int, ...]]] = []
        dims = (cfg.input_dim, *cfg.hidden, cfg.output_dim)
        for i in range(len(dims) - 1):
            self._shapes.append((f"W{i}", (dims[i + 1], dims[i])))
            self._shapes.append((f"b{i}", (dims[i + 1],)))
        for j, d in enumerate(_block_dims(cfg)):
            self._shapes.append((f"cW1_{j}", (cfg.cond_hidden, d + cfg.user_dim)))
            self._shapes.append((f"cb1_{j}", (cfg.cond_hidden,)))
            self._shapes.append((f"cW2_{j}", (d, cfg.cond_hidden)))
            self._shapes.append((f"cb2_{j}", (d,)))
        self._shape_map = dict(self._shapes)
        self._offsets: dict[str, tuple[int, int]] = {}
        off = 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            self._offsets[name] = (off, size)
            off += size
        self.static_size = off
        self._theta = np.zeros(off, dtype=np.float64)
        self._slots: dict = {}          # user id -> embedding slot index
        self._user_order: list = []     # slot index -> user id
        self.user_created: dict = {}    # user id -> step at first sighting
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        dims = (self.cfg.input_dim, *self.cfg.hidden, self.cfg.output_dim)
        for i in range(len(dims) - 1):
            w = self.param(f"W{i}")
            w[:] = rng.normal(0.0, math.sqrt(2.0 / dims[i]), w.shape)
        for j, d in enumerate(_block_dims(self.cfg)):
            w1 = self.param(f"cW1_{j}")
            w1[:] = rng.normal(0.0, math.sqrt(2.0 / (d + self.cfg.user_dim)), w1.shape)
            w2 = self.param(f"cW2_{j}")
            # small but nonzero so embedding gradients flow from the first step;
            # embeddings start at zero, so conditioning is still user-neutral
            w2[:] = rng.normal(0.0, 0.1 * math.sqrt(2.0 / self.cfg.cond_hidden), w2.shape)

    # -- parameter access ---------------------------------------------------

    @property
    def theta(self) -> np.ndarray:
        """Flat parameter vector (static blocks then user embeddings)."""
        return self._theta

    @theta.setter
    def theta(self, value: np.ndarray):
        if value.shape != self._theta.shape:
            raise ShapeError(
                f"theta length {value.shape} does not match current {self._theta.shape}"
            )
        self._theta = np.asarray(value, dtype=np.float64)

    def param(self, name: str) -> np.ndarray:
        off, size = self._offsets[name]
        shape = self._shape_map[name]
        return self._theta[off:off + size].reshape(shape)

    def param_names(self) -> list[str]:
        return [n for n, _ in self._shapes]

    @property
    def n_users(self) -> int:
        return len(self._user_order)

    @property
    def users(self) -> tuple:
        return tuple(self._user_order)

    def ensure_user(self, user, step: int = 0) -> int:
        """Return the user's embedding slot, creating a zero embedding once."""
        slot = self._slots.get(user)
        if slot is None:
            slot = len(self._user_order)
            self._slots[user] = slot
            self._user_order.append(user)
            self.user_created[user] = step
            self._theta = np.concatenate(
                [self._theta, np.zeros(self.cfg.user_dim, dtype=np.float64)]
            )
        return slot

    def embedding(self, user) -> np.ndarray:
        slot = self.ensure_user(user)
        off = self.static_size + slot * self.cfg.user_dim
        return self._theta[off:off + self.cfg.user_dim]

    def _emb_matrix(self) -> np.ndarray:
        return self._theta[self.static_size:].reshape(self.n_users, self.cfg.user_dim)

    def snapshot(self) -> np.ndarray:
        return self._theta.copy()

    def restore(self, theta: np.ndarray):
        self.theta = theta

    def randomize(self, rng, scale: float = 0.5):
        """Overwrite every parameter (embeddings included) with Gaussian noise."""
        self._theta = rng.normal(0.0, scale, self._theta.shape)

    # -- forward / backward -------------------------------------------------

    def _gather_embeddings(self, users) -> tuple[np.ndarray, np.ndarray]:
        slots = np.array([self.ensure_user(u) for u in users], dtype=np.intp)
        return self._emb_matrix()[slots], slots

    def _block_forward(self, j: int, h: np.ndarray, emb: np.ndarray):
        cat = np.concatenate([h, emb], axis=1)
        z1 = cat @ self.param(f"cW1_{j}").T + self.param(f"cb1_{j}")
        r = np.maximum(z1, 0.0)
        out = r @ self.param(f"cW2_{j}").T + self.param(f"cb2_{j}")
        return h + out, (cat, z1, r)

    def _forward_batch(self, X: np.ndarray, users, keep_cache: bool):
        cfg = self.cfg
        if X.ndim != 2 or X.shape[1] != cfg.input_dim:
            raise ShapeError(f"inputs have shape {X.shape}, expected (*, {cfg.input_dim})")
        emb = slots = None
        if cfg.mode != "agnostic":
            if any(u is None for u in users):
                raise ShapeError(f"mode {cfg.mode!r} requires a user id for every event")
            emb, slots = self._gather_embeddings(users)
        cache = {"inputs": [], "zs": [], "blocks": {}, "slots": slots, "emb": emb}
        h = X
        if cfg.mode == "encoder":
            h, bc = self._block_forward(0, h, emb)
            cache["blocks"][0] = bc
        n_hidden = len(cfg.hidden)
        for i in range(n_hidden):
            cache["inputs"].append(h)
            z = h @ self.param(f"W{i}").T + self.param(f"b{i}")
            cache["zs"].append(z)
            h = np.maximum(z, 0.0)
            if cfg.mode == "adapter":
                h, bc = self._block_forward(i, h, emb)
                cache["blocks"][i] = bc
        if cfg.mode == "decoder":
            h, bc = self._block_forward(0, h, emb)
            cache["blocks"][0] = bc
        cache["inputs"].append(h)
        logits = h @ self.param(f"W{n_hidden}").T + self.param(f"b{n_hidden}")
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite activation in forward pass")
        return (logits, cache) if keep_cache else (logits, None)

    def forward(self, x, user=None) -> np.ndarray:
        """Unnormalized logits for one feature vector."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.cfg.input_dim,):
            raise ShapeError(f"input has shape {x.shape}, expected ({self.cfg.input_dim},)")
        logits, _ = self._forward_batch(x[None, :], [user], keep_cache=False)
        return logits[0]

    def _batch_arrays(self, events) -> tuple[np.ndarray, np.ndarray, list]:
        if not events:
            raise ValueError("batch must be non-empty")
        X = np.stack([np.asarray(e.x, dtype=np.float64) for e in events])
        y = np.array([e.y for e in events], dtype=np.intp)
        if np.any(y < 0) or np.any(y >= self.cfg.output_dim):
            bad = int(y[(y < 0) | (y >= self.cfg.output_dim)][0])
            raise ValueError(f"label {bad} outside [0, {self.cfg.output_dim})")
        return X, y, [e.user for e in events]

    @staticmethod
    def _nll(logits: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        nll = logz - shifted[np.arange(len(y)), y]
        probs = np.exp(shifted - logz[:, None])
        return nll, probs

    def per_event_losses(self, events) -> np.ndarray:
        """Cross-entropy in nats for each event, no aggregation."""
        X, y, users = self._batch_arrays(events)
        logits, _ = self._forward_batch(X, users, keep_cache=False)
        nll, _ = self._nll(logits, y)
        return nll

    def loss(self, events) -> float:
        return float(self.per_event_losses(events).mean())

    def eval_metrics(self, events) -> tuple[float, float]:
        """(mean cross-entropy, top-1 accuracy) under the current parameters."""
        X, y, users = self._batch_arrays(events)
        logits, _ = self._forward_batch(X, users, keep_cache=False)
        nll, _ = self._nll(logits, y)
        acc = float((logits.argmax(axis=1) == y).mean())
        return float(nll.mean()), acc

    def _block_backward(self, j: int, dacc, cache, gview, demb):
        cat, z1, r = cache
        d = self._shape_map[f"cW2_{j}"][0]
        gview(f"cW2_{j}")[:] += dacc.T @ r
        gview(f"cb2_{j}")[:] += dacc.sum(axis=0)
        dr = dacc @ self.param(f"cW2_{j}")
        dz1 = dr * (z1 > 0)
        gview(f"cW1_{j}")[:] += dz1.T @ cat
        gview(f"cb1_{j}")[:] += dz1.sum(axis=0)
        dcat = dz1 @ self.param(f"cW1_{j}")
        demb += dcat[:, d:]
        return dacc + dcat[:, :d]

    def loss_and_grad_flat(self, events) -> tuple[float, np.ndarray]:
        """Mean cross-entropy and its gradient as one flat vector over theta."""
        X, y, users = self._batch_arrays(events)
        logits, cache = self._forward_batch(X, users, keep_cache=True)
        nll, probs = self._nll(logits, y)
        loss = float(nll.mean())
        n = len(events)

        gflat = np.zeros_like(self._theta)

        def gview(name: str) -> np.ndarray:
            off, size = self._offsets[name]
            return gflat[off:off + size].reshape(self._shape_map[name])

        dlogits = probs
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n

        cfg = self.cfg
        n_hidden = len(cfg.hidden)
        demb = None
        if cfg.mode != "agnostic":
            demb = np.zeros_like(cache["emb"])

        h_last = cache["inputs"][n_hidden]
        gview(f"W{n_hidden}")[:] += dlogits.T @ h_last
        gview(f"b{n_hidden}")[:] += dlogits.sum(axis=0)
        dh = dlogits @ self.param(f"W{n_hidden}")

        if cfg.mode == "decoder":
            dh = self._block_backward(0, dh, cache["blocks"][0], gview, demb)
        for i in reversed(range(n_hidden)):
            if cfg.mode == "adapter":
                dh = self._block_backward(i, dh, cache["blocks"][i], gview, demb)
            dz = dh * (cache["zs"][i] > 0)
            gview(f"W{i}")[:] += dz.T @ cache["inputs"][i]
            gview(f"b{i}")[:] += dz.sum(axis=0)
            dh = dz @ self.param(f"W{i}")
        if cfg.mode == "encoder":
            self._block_backward(0, dh, cache["blocks"][0], gview, demb)

        if demb is not None:
            gemb = gflat[self.static_size:].reshape(self.n_users, self.cfg.user_dim)
            np.add.at(gemb, cache["slots"], demb)

        if not (math.isfinite(loss) and np.all(np.isfinite(gflat))):
            raise NumericError("non-finite loss or gradient")
        return loss, gflat

    def loss_and_grad(self, events):
        """Mean loss, gradient of the static blocks, and per-user embedding grads.

        Only users actually present in the batch appear in the returned map.
        """
        loss, gflat = self.loss_and_grad_flat(events)
        gshared = gflat[:self.static_size].copy()
        gemb = gflat[self.static_size:].reshape(self.n_users, self.cfg.user_dim)
        gusers = {}
        for u in {e.user for e in events}:
            if u in self._slots:
                gusers[u] = gemb[self._slots[u]].copy()
        return loss, gshared, gusers


def perplexity(mean_nll: float) -> float:
    """exp of a mean negative log-likelihood in nats."""
    return math.exp(mean_nll)
