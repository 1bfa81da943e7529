"""Data sources for the streaming game.

Two families share one interface (``next_batch`` returning ``None`` when the
stream is exhausted, plus deterministic reconstruction from the config):

  * ``SyntheticPollStream`` -- a non-stationary multi-user token stream.
    Each user owns a Markov chain over a small vocabulary; users join and
    leave on a schedule, chains can drift, and events carry the last L
    tokens one-hot encoded as features with the next token as the label.
  * ``BenchmarkStream`` -- one-pass permuted/disjoint image benchmarks with
    the task id standing in for the user id.

Also: a bit-exact IDX binary parser, JSON-Lines event export/import, and
balanced holdout splitting.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

HOLDOUT_EID_BASE = 10 ** 9


@dataclass(slots=True)
class Event:
    eid: int
    t: int
    user: object
    x: np.ndarray
    y: int


# ---------------------------------------------------------------------------
# IDX binary format
# ---------------------------------------------------------------------------

IDX_DTYPES = {0x08: ("u1", 1), 0x0D: (">f4", 4)}


class IdxParseError(ValueError):
    """Malformed IDX payload; message carries the failing byte offset."""


def parse_idx(data: bytes) -> tuple[list[int], np.ndarray]:
    """Decode an IDX buffer into (dimension list, float64 array).

    Unsigned-byte payloads are scaled to [0, 1]; float payloads pass through.
    """
    if len(data) < 4:
        raise IdxParseError(f"truncated header: {len(data)} bytes at offset 0")
    if data[0] != 0 or data[1] != 0:
        raise IdxParseError(f"bad magic bytes {data[0]:#04x} {data[1]:#04x} at offset 0")
    type_code, ndim = data[2], data[3]
    if type_code not in IDX_DTYPES:
        raise IdxParseError(f"unsupported type code {type_code:#04x} at offset 2")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxParseError(f"truncated dimension block at offset {len(data)}")
    dims = list(struct.unpack(f">{ndim}I", data[4:header_end]))
    dtype, itemsize = IDX_DTYPES[type_code]
    expected = int(np.prod(dims)) * itemsize if dims else itemsize
    actual = len(data) - header_end
    if actual != expected:
        raise IdxParseError(
            f"payload length mismatch at offset {header_end}: "
            f"expected {expected} bytes, got {actual}"
        )
    values = np.frombuffer(data, dtype=dtype, offset=header_end).astype(np.float64)
    if type_code == 0x08:
        values = values / 255.0
    return dims, values.reshape(dims)


def load_idx(path) -> tuple[list[int], np.ndarray]:
    """parse_idx over a file, transparently decompressing gzip."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


# ---------------------------------------------------------------------------
# Synthetic multi-user token stream
# ---------------------------------------------------------------------------

def random_chain(n: int, rng, alpha: float = 0.3) -> np.ndarray:
    """Row-stochastic transition matrix with Dirichlet(alpha) rows."""
    return rng.dirichlet(np.full(n, alpha), size=n)


def gen_user_chain(base: np.ndarray, eps: float, rng, alpha: float = 0.3) -> np.ndarray:
    """Blend a base chain with a fresh random chain: (1-eps)*base + eps*random."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must be in [0, 1]")
    return (1.0 - eps) * base + eps * random_chain(base.shape[0], rng, alpha)


@dataclass(frozen=True)
class SyntheticPollConfig:
    vocab: int = 32
    context_len: int = 4
    eps: float = 0.3
    alpha: float = 0.3
    initial_users: int = 10
    schedule: tuple = ()        # (step, add_count, drop_count) entries
    batch_size: int = 8
    steps: int = 1000
    drift: float = 0.0          # per-step mixing toward a fresh random chain
    rate_spread: float = 0.0    # >0 gives users heterogeneous posting rates
    seed: int = 0

    def roster(self) -> list[int]:
        """Every user id the schedule will ever activate, in creation order."""
        n = self.initial_users + sum(add for _, add, _ in self.schedule)
        return list(range(n))


class SyntheticPollStream:
    """Non-stationary multi-user stream of (context, next-token) events."""

    def __init__(self, cfg: SyntheticPollConfig):
        self.cfg = cfg
        self.input_dim = cfg.vocab * cfg.context_len
        self.n_classes = cfg.vocab
        self._rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        base_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.base_chain = random_chain(cfg.vocab, base_rng, cfg.alpha)
        self._users: dict[int, dict] = {}
        self._active: list[int] = []
        self._next_uid = 0
        self._eid = 0
        self.t = 0
        self._schedule = sorted(cfg.schedule, key=lambda entry: entry[0])
        for _ in range(cfg.initial_users):
            self._add_user()

    def user_chain(self, uid: int) -> np.ndarray:
        """The chain a user starts with, reproducible from the stream seed."""
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 2, uid]))
        return gen_user_chain(self.base_chain, self.cfg.eps, rng, self.cfg.alpha)

    def _add_user(self):
        uid = self._next_uid
        self._next_uid += 1
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 2, uid]))
        chain = gen_user_chain(self.base_chain, self.cfg.eps, rng, self.cfg.alpha)
        rate = float(np.exp(self.cfg.rate_spread * rng.normal())) if self.cfg.rate_spread else 1.0
        ctx = rng.integers(0, self.cfg.vocab, size=self.cfg.context_len)
        self._users[uid] = {"chain": chain, "ctx": ctx, "rate": rate}
        self._active.append(uid)

    @property
    def active_users(self) -> tuple[int, ...]:
        return tuple(self._active)

    @property
    def steps(self) -> int:
        return self.cfg.steps

    def encode_context(self, ctx) -> np.ndarray:
        x = np.zeros(self.input_dim)
        for i, tok in enumerate(ctx):
            x[i * self.cfg.vocab + int(tok)] = 1.0
        return x

    def next_batch(self):
        cfg = self.cfg
        if self.t >= cfg.steps:
            return None
        for step, add, drop in self._schedule:
            if step == self.t:
                for _ in range(add):
                    self._add_user()
                for _ in range(drop):
                    if self._active:
                        dropped = min(self._active)
                        self._active.remove(dropped)
        if not self._active:
            raise ConfigError(f"no active users at step {self.t}")
        if cfg.drift > 0.0:
            for uid in self._active:
                user = self._users[uid]
                user["chain"] = (1.0 - cfg.drift) * user["chain"] \
                    + cfg.drift * random_chain(cfg.vocab, self._rng, cfg.alpha)
        rates = np.array([self._users[u]["rate"] for u in self._active])
        probs = rates / rates.sum()
        chosen = self._rng.choice(self._active, size=cfg.batch_size, p=probs)
        batch = [self._emit(int(uid)) for uid in chosen]
        self.t += 1
        return batch

    def _emit(self, uid: int) -> Event:
        user = self._users[uid]
        row = user["chain"][int(user["ctx"][-1])]
        y = int(self._rng.choice(self.cfg.vocab, p=row))
        event = Event(self._eid, self.t, uid, self.encode_context(user["ctx"]), y)
        self._eid += 1
        user["ctx"] = np.concatenate([user["ctx"][1:], [y]])
        return event

    def clone(self) -> "SyntheticPollStream":
        """Fresh stream that replays this one's exact event sequence."""
        return SyntheticPollStream(self.cfg)


# ---------------------------------------------------------------------------
# One-pass image benchmarks
# ---------------------------------------------------------------------------

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

_DATA_CACHE: dict = {}


def _find_idx(data_dir: Path, stem: str) -> Path:
    for suffix in ("", ".gz"):
        candidate = data_dir / (stem + suffix)
        if candidate.exists():
            return candidate
    raise ConfigError(f"missing dataset file {data_dir / stem}[.gz]")


def load_mnist(data_dir) -> dict[str, np.ndarray]:
    """MNIST arrays keyed train/test images (N, 784 in [0,1]) and labels (N,)."""
    data_dir = Path(data_dir)
    key = str(data_dir)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    out = {}
    for name, stem in MNIST_FILES.items():
        dims, values = load_idx(_find_idx(data_dir, stem))
        if "images" in name:
            out[name] = values.reshape(dims[0], -1)
        else:
            out[name] = np.round(values * 255.0).astype(np.intp)
    _DATA_CACHE[key] = out
    return out


def load_flat_npz(path) -> dict[str, np.ndarray]:
    """Pre-flattened image classification data from an .npz archive."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing dataset file {path}")
    with np.load(path) as z:
        needed = ("x_train", "y_train", "x_test", "y_test")
        if any(k not in z for k in needed):
            raise ConfigError(f"{path} must contain {needed}")
        out = {
            "train_images": z["x_train"].astype(np.float64),
            "train_labels": z["y_train"].astype(np.intp),
            "test_images": z["x_test"].astype(np.float64),
            "test_labels": z["y_test"].astype(np.intp),
        }
    for k in ("train_images", "test_images"):
        if out[k].max() > 1.5:
            out[k] = out[k] / 255.0
        out[k] = out[k].reshape(out[k].shape[0], -1)
    return out


BENCHMARK_DATASETS = ("permuted-mnist", "disjoint-mnist", "disjoint-cifar")


@dataclass(frozen=True)
class BenchmarkStreamConfig:
    dataset: str
    data_dir: str = ""
    tasks: int = 0              # 0 picks the dataset default
    batch_size: int = 10
    holdout_per_task: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in BENCHMARK_DATASETS:
            raise ConfigError(f"unknown benchmark dataset {self.dataset!r}")

    @property
    def n_tasks(self) -> int:
        if self.tasks:
            return self.tasks
        return 10 if self.dataset == "permuted-mnist" else 5


class BenchmarkStream:
    """One pass over a benchmark, tasks in sequence, task id as user id.

    Every training example is emitted exactly once; task order and the order
    within each task are shuffled by the seed. Feature vectors materialize
    lazily so only live events hold float data.
    """

    def __init__(self, cfg: BenchmarkStreamConfig):
        self.cfg = cfg
        if cfg.dataset == "disjoint-cifar":
            data = load_flat_npz(cfg.data_dir)
        else:
            data = load_mnist(cfg.data_dir)
        self._train_x = data["train_images"]
        self._train_y = data["train_labels"]
        self._test_x = data["test_images"]
        self._test_y = data["test_labels"]
        self.input_dim = self._train_x.shape[1]
        self.n_classes = int(self._train_y.max()) + 1
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
        n_tasks = cfg.n_tasks

        if cfg.dataset == "permuted-mnist":
            self._perms = [np.arange(self.input_dim)] + [
                rng.permutation(self.input_dim) for _ in range(n_tasks - 1)
            ]
            shuffled = rng.permutation(len(self._train_y))
            chunks = np.array_split(shuffled, n_tasks)
            self._task_indices = {task: chunks[task] for task in range(n_tasks)}
        else:
            if self.n_classes % n_tasks != 0:
                raise ConfigError(
                    f"{self.n_classes} classes cannot split into {n_tasks} tasks")
            per = self.n_classes // n_tasks
            self._groups = {
                task: tuple(range(task * per, (task + 1) * per))
                for task in range(n_tasks)
            }
            self._task_indices = {}
            for task, group in self._groups.items():
                mask = np.isin(self._train_y, group)
                idx = np.flatnonzero(mask)
                self._task_indices[task] = rng.permutation(idx)

        self._holdout: list[tuple[int, int]] = []   # (task, source index)
        if cfg.holdout_per_task:
            k = cfg.holdout_per_task
            for task in range(n_tasks):
                if len(self._task_indices[task]) <= k:
                    raise ConfigError(
                        f"task {task} has only {len(self._task_indices[task])} "
                        f"examples, cannot withhold {k}")
                self._holdout += [(task, int(i)) for i in self._task_indices[task][:k]]
                self._task_indices[task] = self._task_indices[task][k:]

        self._task_order = [int(task) for task in rng.permutation(n_tasks)]
        self._flat: list[tuple[int, int]] = []      # (task, source index) emission order
        for task in self._task_order:
            self._flat += [(task, int(i)) for i in self._task_indices[task]]
        self._pos = 0
        self._eid = 0
        self.t = 0

    def _features(self, task: int, source_x: np.ndarray) -> np.ndarray:
        if self.cfg.dataset == "permuted-mnist":
            return source_x[self._perms[task]]
        return source_x.copy()

    @property
    def total_events(self) -> int:
        return len(self._flat)

    @property
    def steps(self) -> int:
        bs = self.cfg.batch_size
        return (len(self._flat) + bs - 1) // bs

    def next_batch(self):
        if self._pos >= len(self._flat):
            return None
        batch = []
        for task, src in self._flat[self._pos:self._pos + self.cfg.batch_size]:
            x = self._features(task, self._train_x[src])
            batch.append(Event(self._eid, self.t, task, x, int(self._train_y[src])))
            self._eid += 1
        self._pos += len(batch)
        self.t += 1
        return batch

    def holdout_events(self) -> list[Event]:
        """The withheld per-task training examples, k per task."""
        out = []
        for j, (task, src) in enumerate(self._holdout):
            x = self._features(task, self._train_x[src])
            out.append(Event(HOLDOUT_EID_BASE + j, 0, task, x, int(self._train_y[src])))
        return out

    def task_test_events(self, task: int) -> list[Event]:
        """The dataset's own test split, transformed for one task."""
        if self.cfg.dataset == "permuted-mnist":
            idx = np.arange(len(self._test_y))
        else:
            idx = np.flatnonzero(np.isin(self._test_y, self._groups[task]))
        out = []
        for j, src in enumerate(idx):
            x = self._features(task, self._test_x[src])
            out.append(Event(2 * HOLDOUT_EID_BASE + j, 0, task, x, int(self._test_y[src])))
        return out

    @property
    def task_ids(self) -> list[int]:
        return sorted(self._task_indices)

    def clone(self) -> "BenchmarkStream":
        return BenchmarkStream(self.cfg)


def make_stream(cfg):
    if isinstance(cfg, SyntheticPollConfig):
        return SyntheticPollStream(cfg)
    if isinstance(cfg, BenchmarkStreamConfig):
        return BenchmarkStream(cfg)
    raise ConfigError(f"unknown stream config type {type(cfg).__name__}")


# ---------------------------------------------------------------------------
# Holdout splitting
# ---------------------------------------------------------------------------

def holdout_split(cfg, k: int, rng) -> tuple[object, list[Event]]:
    """Build the training stream plus a per-user balanced withheld test set.

    Synthetic configs draw k fresh events per rostered user from that user's
    own chain; benchmark configs withhold k training examples per task. The
    two sides never share an event id.
    """
    if k < 0:
        raise ConfigError("holdout size must be >= 0")
    if isinstance(cfg, BenchmarkStreamConfig):
        stream = BenchmarkStream(
            BenchmarkStreamConfig(cfg.dataset, cfg.data_dir, cfg.tasks,
                                  cfg.batch_size, k, cfg.seed))
        return stream, stream.holdout_events()
    if not isinstance(cfg, SyntheticPollConfig):
        raise ConfigError(f"unknown stream config type {type(cfg).__name__}")
    stream = SyntheticPollStream(cfg)
    test: list[Event] = []
    eid = HOLDOUT_EID_BASE
    for uid in cfg.roster():
        chain = stream.user_chain(uid)
        for _ in range(k):
            ctx = [int(rng.integers(cfg.vocab))]
            for _ in range(cfg.context_len - 1):
                ctx.append(int(rng.choice(cfg.vocab, p=chain[ctx[-1]])))
            y = int(rng.choice(cfg.vocab, p=chain[ctx[-1]]))
            test.append(Event(eid, 0, uid, stream.encode_context(ctx), y))
            eid += 1
    return stream, test


# ---------------------------------------------------------------------------
# JSON Lines event exchange
# ---------------------------------------------------------------------------

def events_to_jsonl(events, path) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps({
                "eid": e.eid, "t": e.t, "user": e.user,
                "x": [float(v) for v in e.x], "y": int(e.y),
            }) + "\n")


def events_from_jsonl(path) -> list[Event]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(Event(rec["eid"], rec["t"], rec["user"],
                             np.array(rec["x"], dtype=np.float64), rec["y"]))
    return out
