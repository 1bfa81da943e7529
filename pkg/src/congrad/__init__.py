"""Deterministic continual-learning engine.

Streams of (time, user, input, label) events are fed through a learner-vs-
nature game loop: the model predicts each batch before training on it, data
is delayed through a validation buffer, and the optimizer can select its
per-batch step count against that buffer. Includes replay-based learner
baselines, benchmark stream adapters, and run metrics.
"""

__version__ = "0.1.0"
