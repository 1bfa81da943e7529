"""The learner-vs-nature game loop and its evaluation metrics.

Each step: draw the next batch, score it with the current model (the online
loss is always a prediction, never a fit), push the batch through the
validation buffer, train on whatever the buffer displaced plus replay, then
offer the displaced events to the replay memory.

Metrics: per-step records streamed to CSV, periodic test evaluations, the
online-fit running average, retention curves via deterministic stream
replay, and the loss-decomposition diagnostics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .buffers import ReplayBuffer, ValidationBuffer
from .errors import ConfigError
from .learners import LearnerKind, agem_gradient, compose_training_set
from .models import Model, perplexity
from .optim import AdamState, OptimConfig, congrad_update, online_gd_update

OPTIMIZER_MODES = ("online-gd", "congrad")

CSV_COLUMNS = ("t", "online_loss", "chosen_k", "train_loss", "replay_size", "vbuf_size")


@dataclass(slots=True)
class StepRecord:
    t: int
    online_loss: float
    chosen_k: int
    train_loss: float
    replay_size: int
    vbuf_size: int


@dataclass(slots=True)
class DiagRecord:
    t: int
    total_history_loss: float
    core_set_loss: float
    training_loss: float
    next_batch_loss: float
    generalization_gap: float


@dataclass
class MetricsLog:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def online_losses(self) -> np.ndarray:
        return np.array([r.online_loss for r in self.steps])

    def chosen_k_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for r in self.steps:
            hist[r.chosen_k] = hist.get(r.chosen_k, 0) + 1
        return hist

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for r in self.steps:
                fh.write(f"{r.t},{r.online_loss!r},{r.chosen_k},{r.train_loss!r},"
                         f"{r.replay_size},{r.vbuf_size}\n")

    def summary(self) -> dict:
        out = dict(self.meta)
        out["steps"] = len(self.steps)
        out["chosen_k_histogram"] = {str(k): v for k, v in
                                     sorted(self.chosen_k_histogram().items())}
        if self.steps:
            curve = online_fit_curve(self)
            out["online_fit_final"] = float(curve[-1])
        if self.evals:
            out["evals"] = self.evals
            out["final"] = self.evals[-1]
        if self.diagnostics:
            out["diagnostics"] = [vars(d) for d in self.diagnostics]
        return out

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def online_fit_curve(log) -> np.ndarray:
    """Running average of the recorded next-batch losses."""
    losses = log.online_losses() if isinstance(log, MetricsLog) else np.asarray(log, float)
    if len(losses) < 2:
        raise ValueError("online fit curve needs at least 2 recorded steps")
    return np.cumsum(losses) / np.arange(1, len(losses) + 1)


def _aggregate_per_user(per_user: dict) -> dict:
    loss = float(np.mean([m["loss"] for m in per_user.values()]))
    acc = float(np.mean([m["accuracy"] for m in per_user.values()]))
    return {
        "loss": loss,
        "accuracy": acc,
        "perplexity": perplexity(loss),
        "per_user": per_user,
    }


def test_eval(model: Model, events) -> dict:
    """Balanced evaluation: mean per-user loss/accuracy, averaged over users."""
    if not events:
        raise ConfigError("test set is empty")
    by_user: dict = {}
    for e in events:
        by_user.setdefault(e.user, []).append(e)
    per_user = {}
    for user, evs in by_user.items():
        loss, acc = model.eval_metrics(evs)
        per_user[str(user)] = {"loss": loss, "accuracy": acc, "n": len(evs)}
    return _aggregate_per_user(per_user)


def benchmark_test_eval(model: Model, stream) -> dict:
    """Balanced evaluation over a benchmark's per-task test splits.

    Tasks are materialized and scored one at a time so the full test corpus
    never lives in memory at once.
    """
    per_user = {}
    for task in stream.task_ids:
        events = stream.task_test_events(task)
        loss, acc = model.eval_metrics(events)
        per_user[str(task)] = {"loss": loss, "accuracy": acc, "n": len(events)}
    if not per_user:
        raise ConfigError("benchmark stream has no test tasks")
    return _aggregate_per_user(per_user)


@dataclass
class RetentionCurve:
    per_age: list          # mean loss on the batch this many steps old
    averaged: list         # running mean over ages 0..i

    def endpoints(self) -> tuple[float, float]:
        return self.per_age[0], self.per_age[-1]


def retention_curve(model: Model, stream_cfg, horizon: int | None = None) -> RetentionCurve:
    """Replay the stream from its seed and score every past batch with the
    final model, newest first."""
    from .streams import make_stream

    stream = make_stream(stream_cfg)
    losses = []
    while True:
        batch = stream.next_batch()
        if batch is None:
            break
        losses.append(model.loss(batch))
    if not losses:
        raise ConfigError("stream replayed zero batches")
    losses.reverse()  # index = age in steps
    if horizon is not None:
        losses = losses[:horizon + 1]
    averaged = np.cumsum(losses) / np.arange(1, len(losses) + 1)
    return RetentionCurve(per_age=[float(v) for v in losses],
                          averaged=[float(v) for v in averaged])


def decomposition_diag(model: Model, history_sample, mbar, next_batch) -> DiagRecord:
    """Loss decomposition terms at the current parameters.

    total history loss = core-set loss + training loss, and next-batch loss =
    generalization gap + training loss, both exact by construction.
    """
    total = model.loss(history_sample) if history_sample else math.nan
    train = model.loss(mbar)
    nxt = model.loss(next_batch)
    return DiagRecord(
        t=0,
        total_history_loss=total,
        core_set_loss=total - train,
        training_loss=train,
        next_batch_loss=nxt,
        generalization_gap=nxt - train,
    )


class Game:
    """Drives one continual-learning run; ``step()`` is one stream batch."""

    def __init__(self, stream, model: Model, learner: LearnerKind,
                 optimizer_mode: str, replay: ReplayBuffer, vbuf: ValidationBuffer,
                 optim_cfg: OptimConfig, rng, *,
                 test_events=None, eval_every: int = 0,
                 diag: bool = False, diag_history_cap: int = 400,
                 diag_seed: int = 0, diag_hook=None):
        if optimizer_mode not in OPTIMIZER_MODES:
            raise ConfigError(f"unknown optimizer mode {optimizer_mode!r}")
        self.stream = stream
        self.model = model
        self.learner = learner
        self.mode = optimizer_mode
        self.replay = replay
        self.vbuf = vbuf
        self.optim_cfg = optim_cfg
        self.rng = rng
        self.opt_state = AdamState.zeros(len(model.theta))
        self.test_events = test_events
        self.eval_every = eval_every
        self.diag = diag
        self.diag_history_cap = diag_history_cap
        self.diag_seed = diag_seed
        self.diag_hook = diag_hook
        self.log = MetricsLog()
        self.t = 0
        self.last_train: list = []        # composed gradient batch of the last step
        self._history_events: list = []   # kept only while diagnostics run
        self._pending_diag = None

    # -- helpers ------------------------------------------------------------

    def _grad_fn(self, train):
        model = self.model
        if self.learner.kind == "a-gem":
            replay, rng = self.replay, self.rng

            def grad_fn(theta):
                model.theta = theta
                return agem_gradient(model, train, replay, rng)
        else:
            def grad_fn(theta):
                model.theta = theta
                return model.loss_and_grad_flat(train)
        return grad_fn

    def _val_loss_fn(self, residents):
        if not residents:
            return None
        model = self.model

        def val_loss(theta):
            model.theta = theta
            return model.loss(residents)
        return val_loss

    def _emit_pending_diag(self, next_batch):
        pending = self._pending_diag
        self._pending_diag = None
        if pending is None:
            return
        t_prev, mbar = pending
        hist_rng = np.random.default_rng(
            np.random.SeedSequence([self.diag_seed, 4, t_prev]))
        history = self._history_events
        if len(history) > self.diag_history_cap:
            idx = hist_rng.choice(len(history), size=self.diag_history_cap,
                                  replace=False)
            history = [history[i] for i in sorted(idx)]
        rec = decomposition_diag(self.model, history, mbar, next_batch)
        rec.t = t_prev
        self.log.diagnostics.append(rec)
        if self.diag_hook is not None:
            self.diag_hook(rec, history, mbar, next_batch, self.model)

    # -- the game step ------------------------------------------------------

    def step(self) -> bool:
        batch = self.stream.next_batch()
        if batch is None:
            return False
        self.t += 1
        for e in batch:
            if self.model.cfg.mode != "agnostic":
                self.model.ensure_user(e.user, step=self.t)
        online_loss, _ = self.model.eval_metrics(batch)

        if self.diag:
            self._emit_pending_diag(batch)

        if self.mode == "congrad":
            popped = self.vbuf.push(batch)
            residents = self.vbuf.peek()
        else:
            popped = list(batch)
            residents = []

        chosen_k = 0
        train_loss = math.nan
        train = []
        if popped:
            train = compose_training_set(self.learner, popped, self.replay, self.rng)
        self.last_train = train
        if train:
            self.opt_state = self.opt_state.resized(len(self.model.theta))
            grad_fn = self._grad_fn(train)
            if self.mode == "congrad":
                theta, state, chosen_k, train_loss, _ = congrad_update(
                    self.model.theta, grad_fn, self._val_loss_fn(residents),
                    self.optim_cfg, self.opt_state)
            else:
                theta, state, chosen_k, train_loss = online_gd_update(
                    self.model.theta, grad_fn, self.optim_cfg, self.opt_state)
            self.model.theta = theta
            self.opt_state = state

        self.replay.update(popped, self.rng)

        self.log.steps.append(StepRecord(
            t=self.t, online_loss=online_loss, chosen_k=chosen_k,
            train_loss=train_loss, replay_size=len(self.replay),
            vbuf_size=len(self.vbuf)))

        if self.diag:
            self._history_events.extend(batch)
            if train:
                self._pending_diag = (self.t, train)

        if self.eval_every and self.test_events and self.t % self.eval_every == 0:
            metrics = test_eval(self.model, self.test_events)
            metrics.pop("per_user", None)
            metrics["t"] = self.t
            self.log.evals.append(metrics)
        return True

    def run(self) -> MetricsLog:
        from .models import NumericError

        checkpoint = self.model.snapshot()
        try:
            while True:
                if not self.step():
                    break
                checkpoint = self.model.snapshot()
        except NumericError as err:
            if len(checkpoint) == len(self.model.theta):
                self.model.restore(checkpoint)
            self.log.meta["aborted"] = str(err)
            self.log.meta["aborted_at_step"] = self.t
        return self.log


def run_game(stream, learner: LearnerKind, optimizer_mode: str, model: Model,
             replay: ReplayBuffer, vbuf: ValidationBuffer, optim_cfg: OptimConfig,
             rng, **kwargs) -> MetricsLog:
    """Run a stream to exhaustion; see Game for the step semantics."""
    game = Game(stream, model, learner, optimizer_mode, replay, vbuf,
                optim_cfg, rng, **kwargs)
    return game.run()
