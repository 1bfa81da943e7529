"""Shared test utilities: a bare event record and independent numeric oracles."""

from dataclasses import dataclass

import numpy as np


@dataclass
class Ev:
    """Minimal stand-in for a stream event (models only need x, y, user)."""
    x: np.ndarray
    y: int
    user: object = None
    eid: int = -1
    t: int = 0


def finite_diff(f, theta, coords, h=1e-5):
    """Central finite differences of scalar f at theta along the given coords."""
    out = {}
    for i in coords:
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        out[i] = (f(up) - f(down)) / (2.0 * h)
    return out


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def make_batch(rng, n, input_dim, n_classes, users):
    return [
        Ev(x=rng.normal(size=input_dim), y=int(rng.integers(n_classes)),
           user=users[i % len(users)])
        for i in range(n)
    ]
