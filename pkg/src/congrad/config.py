"""Plain-text run configuration: dotted keys, one `key = value` per line.

Grammar: blank lines and `#` comments are ignored; every other line must be
`key = value` with a key from the schema below. Unknown keys and malformed
lines are rejected with their line number. Values are typed per key; `none`
clears optional values; lists are comma-separated.

The canonical echo (every effective key, sorted) re-parses to an identical
run, and its SHA-256 is the run's config hash.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .buffers import REPLAY_STRATEGIES, VBUF_STRATEGIES, ReplayBuffer, ValidationBuffer
from .errors import ConfigError
from .learners import LEARNER_KINDS, LearnerKind
from .models import MODES, Model, ModelConfig
from .optim import OptimConfig
from .streams import (MNIST_FILES, BenchmarkStreamConfig, SyntheticPollConfig,
                      holdout_split, make_stream)

ENV_OUTPUT_ROOT = "CONGRAD_RUNS"
ENV_DATA_DIR = "CONGRAD_DATA_DIR"

STREAM_TYPES = ("synthetic", "permuted-mnist", "disjoint-mnist", "disjoint-cifar")


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _opt(parse):
    def inner(raw: str):
        return None if raw.lower() in ("none", "") else parse(raw)
    return inner


def _int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    return tuple(int(v) for v in raw.split(",")) if raw else ()


def _str_list(raw: str) -> tuple[str, ...]:
    raw = raw.strip()
    return tuple(v.strip() for v in raw.split(",")) if raw else ()


def _schedule(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    entries = []
    for part in raw.split(","):
        fields = part.split(":")
        if len(fields) != 3:
            raise ValueError(f"schedule entry {part!r} is not step:add:drop")
        entries.append(tuple(int(v) for v in fields))
    return tuple(entries)


def _choice(options):
    def inner(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {raw!r}")
        return raw
    return inner


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "stream.type": (_choice(STREAM_TYPES), "synthetic"),
    "stream.batch_size": (int, 10),
    "stream.steps": (int, 1000),
    "stream.vocab": (int, 32),
    "stream.context_len": (int, 4),
    "stream.eps": (float, 0.3),
    "stream.alpha": (float, 0.3),
    "stream.drift": (float, 0.0),
    "stream.rate_spread": (float, 0.0),
    "stream.initial_users": (int, 10),
    "stream.schedule": (_schedule, ()),
    "stream.tasks": (int, 0),
    "stream.data_dir": (str, ""),
    "stream.holdout_per_user": (int, 0),
    "model.mode": (_choice(MODES), "agnostic"),
    "model.hidden": (_int_list, (100, 100)),
    "model.user_dim": (int, 32),
    "model.cond_hidden": (int, 16),
    "learner.kind": (_choice(LEARNER_KINDS), "online-only"),
    "learner.mix_fraction": (float, 0.5),
    "learner.replay_sample": (_opt(int), None),
    "optim.rule": (_choice(("sgd", "adam")), "adam"),
    "optim.lr": (float, 2.5e-4),
    "optim.warmup": (int, 2000),
    "optim.clip": (_opt(float), 0.25),
    "optim.k": (int, 1),
    "optim.delta": (_opt(float), None),
    "optim.include_zero_step": (_bool, True),
    "buffers.replay_capacity": (int, 300),
    "buffers.replay_strategy": (_choice(REPLAY_STRATEGIES), "reservoir"),
    "buffers.replay_user_quota": (int, 5),
    "buffers.vbuf_capacity": (int, 50),
    "buffers.vbuf_strategy": (_choice(VBUF_STRATEGIES), "fifo"),
    "optimizer.mode": (_choice(("online-gd", "congrad")), "online-gd"),
    "eval.period": (int, 0),
    "eval.test_subsample": (int, 0),
    "eval.retention": (_bool, False),
    "eval.retention_horizon": (_opt(int), None),
    "eval.diagnostics": (_bool, False),
    "eval.diag_history_cap": (int, 400),
    "run.name": (str, "run"),
    "run.dir": (str, ""),
    "output_root": (str, ""),
    "seed": (int, 0),
    "sweep.k": (_int_list, ()),
    "sweep.vbuf_size": (_int_list, ()),
    "sweep.vbuf_strategy": (_str_list, ()),
    "sweep.learner": (_str_list, ()),
    "sweep.seeds": (_int_list, ()),
}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(":".join(str(x) for x in entry) for entry in value)
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = dict(self.values)
        for key, raw in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            parse = SCHEMA[key][0]
            if isinstance(raw, str):
                try:
                    merged[key] = parse(raw)
                except ValueError as err:
                    raise ConfigError(f"bad value for {key}: {err}") from err
            else:
                merged[key] = raw
        return RunConfig(merged)

    def canonical_text(self) -> str:
        lines = [f"{key} = {_format_value(self.values[key])}"
                 for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        parse = SCHEMA[key][0]
        try:
            values[key] = parse(raw)
        except ValueError as err:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {err}") from err
    return RunConfig(values)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def validate_inputs(cfg: RunConfig) -> None:
    """Check every referenced file exists before any work starts."""
    stype = cfg["stream.type"]
    if stype == "synthetic":
        return
    data_dir = cfg["stream.data_dir"] or os.environ.get(ENV_DATA_DIR, "")
    if not data_dir:
        raise ConfigError(
            f"stream.data_dir is required for {stype} (or set {ENV_DATA_DIR})")
    root = Path(data_dir)
    if stype == "disjoint-cifar":
        if not root.exists():
            raise ConfigError(f"stream.data_dir: missing dataset file {root}")
        return
    for stem in MNIST_FILES.values():
        if not (root / stem).exists() and not (root / (stem + ".gz")).exists():
            raise ConfigError(f"stream.data_dir: missing dataset file {root / stem}[.gz]")


# -- builders -----------------------------------------------------------------

def stream_config(cfg: RunConfig):
    stype = cfg["stream.type"]
    if stype == "synthetic":
        return SyntheticPollConfig(
            vocab=cfg["stream.vocab"],
            context_len=cfg["stream.context_len"],
            eps=cfg["stream.eps"],
            alpha=cfg["stream.alpha"],
            initial_users=cfg["stream.initial_users"],
            schedule=cfg["stream.schedule"],
            batch_size=cfg["stream.batch_size"],
            steps=cfg["stream.steps"],
            drift=cfg["stream.drift"],
            rate_spread=cfg["stream.rate_spread"],
            seed=cfg["seed"],
        )
    data_dir = cfg["stream.data_dir"] or os.environ.get(ENV_DATA_DIR, "")
    return BenchmarkStreamConfig(
        dataset=stype,
        data_dir=data_dir,
        tasks=cfg["stream.tasks"],
        batch_size=cfg["stream.batch_size"],
        seed=cfg["seed"],
    )


def build_stream_and_tests(cfg: RunConfig):
    """(training stream, test events for periodic evaluation or None).

    Benchmark streams keep their full per-task test splits out of memory;
    periodic evaluation gets a seeded per-task subsample and the final
    evaluation walks the tasks lazily (see protocol.benchmark_test_eval).
    """
    scfg = stream_config(cfg)
    k = cfg["stream.holdout_per_user"]
    if k > 0:
        rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 5]))
        return holdout_split(scfg, k, rng)
    if isinstance(scfg, SyntheticPollConfig):
        return make_stream(scfg), None
    stream = make_stream(scfg)
    cap = cfg["eval.test_subsample"] or 2000
    per_task = max(1, cap // len(stream.task_ids))
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 6]))
    sample = []
    for task in stream.task_ids:
        events = stream.task_test_events(task)
        if per_task < len(events):
            idx = rng.choice(len(events), size=per_task, replace=False)
            events = [events[i] for i in sorted(idx)]
        sample += events
    return stream, sample


def build_model(cfg: RunConfig, stream) -> Model:
    mcfg = ModelConfig(
        input_dim=stream.input_dim,
        output_dim=stream.n_classes,
        hidden=tuple(cfg["model.hidden"]),
        mode=cfg["model.mode"],
        user_dim=cfg["model.user_dim"],
        cond_hidden=cfg["model.cond_hidden"],
    )
    return Model(mcfg, seed=cfg["seed"])


def build_learner(cfg: RunConfig) -> LearnerKind:
    return LearnerKind(
        kind=cfg["learner.kind"],
        mix_fraction=cfg["learner.mix_fraction"],
        replay_sample=cfg["learner.replay_sample"],
    )


def build_optim(cfg: RunConfig) -> OptimConfig:
    return OptimConfig(
        rule=cfg["optim.rule"],
        lr=cfg["optim.lr"],
        warmup=cfg["optim.warmup"],
        clip=cfg["optim.clip"],
        k_max=cfg["optim.k"],
        delta=cfg["optim.delta"],
        include_zero_step=cfg["optim.include_zero_step"],
    )


def build_buffers(cfg: RunConfig) -> tuple[ReplayBuffer, ValidationBuffer]:
    replay = ReplayBuffer(cfg["buffers.replay_capacity"],
                          cfg["buffers.replay_strategy"],
                          cfg["buffers.replay_user_quota"])
    vb_seed = int(np.random.SeedSequence([cfg["seed"], 7]).generate_state(1)[0])
    vbuf = ValidationBuffer(cfg["buffers.vbuf_capacity"],
                            cfg["buffers.vbuf_strategy"], seed=vb_seed)
    return replay, vbuf


def output_root(cfg: RunConfig) -> Path:
    root = cfg["output_root"] or os.environ.get(ENV_OUTPUT_ROOT, "") or "runs"
    return Path(root)
