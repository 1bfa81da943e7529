"""Capacity-bounded event stores: the replay memory and the validation queue.

The replay buffer keeps a bounded summary of past events for rehearsal. The
validation buffer sits between the stream and the trainer: fresh events are
pushed in, and whatever the push displaces is what the trainer gets, so no
event is ever dropped or trained on while it is still scoring candidates.
"""

from __future__ import annotations

import json

import numpy as np

REPLAY_STRATEGIES = ("reservoir", "per-user-fifo")
VBUF_STRATEGIES = ("fifo", "reservoir", "stratified")


class ReplayBuffer:
    """Bounded store of past events with a maintenance strategy.

    ``reservoir`` keeps every event ever offered with equal probability
    capacity/seen. ``per-user-fifo`` keeps at most ``user_quota`` most recent
    events per user, evicting the globally oldest event if total capacity is
    still exceeded.
    """

    def __init__(self, capacity: int, strategy: str = "reservoir", user_quota: int = 5):
        if strategy not in REPLAY_STRATEGIES:
            raise ValueError(f"unknown replay strategy {strategy!r}")
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.strategy = strategy
        self.user_quota = user_quota
        self.seen = 0
        self._items: list = []

    def __len__(self):
        return len(self._items)

    @property
    def items(self) -> tuple:
        return tuple(self._items)

    def update(self, new, rng) -> None:
        """Offer a batch of events to the buffer."""
        if self.capacity == 0:
            self.seen += len(new)
            return
        if self.strategy == "reservoir":
            self._update_reservoir(new, rng)
        else:
            self._update_per_user_fifo(new)

    def _update_reservoir(self, new, rng):
        items, cap = self._items, self.capacity
        i = 0
        while len(items) < cap and i < len(new):
            items.append(new[i])
            self.seen += 1
            i += 1
        rest = len(new) - i
        if rest == 0:
            return
        # One uniform draw per remaining event; slot j < cap replaces resident j.
        ticket = np.arange(self.seen + 1, self.seen + rest + 1, dtype=np.float64)
        slots = np.floor(rng.random(rest) * ticket).astype(np.intp)
        for k in np.flatnonzero(slots < cap):
            items[slots[k]] = new[i + k]
        self.seen += rest

    def _update_per_user_fifo(self, new):
        for e in new:
            self.seen += 1
            self._items.append(e)
            mine = [i for i, it in enumerate(self._items) if it.user == e.user]
            if len(mine) > self.user_quota:
                del self._items[mine[0]]
            if len(self._items) > self.capacity:
                del self._items[0]

    def sample(self, n: int, rng) -> list:
        """n events drawn uniformly with replacement; empty buffer yields []."""
        if n <= 0 or not self._items:
            return []
        idx = rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in idx]

    def dump_json(self, path) -> None:
        state = {
            "kind": "replay",
            "capacity": self.capacity,
            "strategy": self.strategy,
            "seen": self.seen,
            "event_ids": [e.eid for e in self._items],
        }
        with open(path, "w") as fh:
            json.dump(state, fh, indent=2, sort_keys=True)


class ValidationBuffer:
    """Bounded queue that delays events before they reach training.

    ``push`` offers a batch and returns the displaced events; ``pop`` hands
    out the most recent displacement exactly once; ``peek`` reads the current
    residents without mutation. Conservation holds for every strategy:
    residents-after + displaced == residents-before + pushed (as multisets).
    """

    def __init__(self, capacity: int, strategy: str = "fifo", seed: int = 0):
        if strategy not in VBUF_STRATEGIES:
            raise ValueError(f"unknown validation buffer strategy {strategy!r}")
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.strategy = strategy
        self.seen = 0
        self._items: list = []
        self._rng = np.random.default_rng(seed)
        self._last_displaced: list = []

    def __len__(self):
        return len(self._items)

    def push(self, new) -> list:
        displaced: list = []
        for e in new:
            self.seen += 1
            if self.capacity == 0:
                displaced.append(e)
            elif self.strategy == "fifo":
                self._items.append(e)
                if len(self._items) > self.capacity:
                    displaced.append(self._items.pop(0))
            elif self.strategy == "reservoir":
                if len(self._items) < self.capacity:
                    self._items.append(e)
                else:
                    j = int(self._rng.integers(0, self.seen))
                    if j < self.capacity:
                        displaced.append(self._items[j])
                        self._items[j] = e
                    else:
                        displaced.append(e)
            else:
                self._items.append(e)
                if len(self._items) > self.capacity:
                    displaced.append(self._evict_stratified())
        self._last_displaced = list(displaced)
        return displaced

    def _evict_stratified(self):
        # Evict the oldest item of the most-represented user; ties resolve to
        # whichever tied user holds the globally oldest item.
        counts: dict = {}
        for it in self._items:
            counts[it.user] = counts.get(it.user, 0) + 1
        maxc = max(counts.values())
        for i, it in enumerate(self._items):
            if counts[it.user] == maxc:
                return self._items.pop(i)
        raise AssertionError("unreachable")

    def pop(self) -> list:
        """The events displaced by the most recent push, emitted once."""
        out = self._last_displaced
        self._last_displaced = []
        return out

    def peek(self) -> list:
        return list(self._items)

    def dump_json(self, path) -> None:
        state = {
            "kind": "validation",
            "capacity": self.capacity,
            "strategy": self.strategy,
            "seen": self.seen,
            "event_ids": [e.eid for e in self._items],
        }
        with open(path, "w") as fh:
            json.dump(state, fh, indent=2, sort_keys=True)
