#!/usr/bin/env python3
"""Run the learner x optimizer grid on a classic benchmark and print a table.

Example:
    python3 scripts/benchmark_grid.py --dataset permuted-mnist \
        --data-dir /root/data/mnist --seeds 1 2 3
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from congrad.buffers import ReplayBuffer, ValidationBuffer
from congrad.learners import LearnerKind
from congrad.models import Model, ModelConfig
from congrad.optim import OptimConfig
from congrad.protocol import Game, test_eval
from congrad.streams import BenchmarkStream, BenchmarkStreamConfig


def run_one(dataset, data_dir, learner, mode, seed, *, lr=0.05, k=1, rule="sgd",
            batch=10, vbuf=50, memory=300, clip=None, warmup=0, quiet=False):
    stream = BenchmarkStream(BenchmarkStreamConfig(dataset, data_dir,
                                                   batch_size=batch, seed=seed))
    model = Model(ModelConfig(stream.input_dim, stream.n_classes, (100, 100)),
                  seed=seed)
    optim = OptimConfig(rule=rule, lr=lr, warmup=warmup, clip=clip, k_max=k)
    vb_seed = int(np.random.SeedSequence([seed, 7]).generate_state(1)[0])
    game = Game(stream, model, LearnerKind(learner),
                mode, ReplayBuffer(memory, "reservoir"),
                ValidationBuffer(vbuf if mode == "congrad" else 0, "fifo", seed=vb_seed),
                optim, np.random.default_rng(np.random.SeedSequence([seed, 8])))
    t0 = time.perf_counter()
    game.run()
    test_events = []
    for task in stream.task_ids:
        test_events += stream.task_test_events(task)
    metrics = test_eval(model, test_events)
    wall = time.perf_counter() - t0
    if not quiet:
        print(f"  {dataset} {learner} x {mode} k={k} lr={lr} seed={seed}: "
              f"acc={100 * metrics['accuracy']:.1f} ({wall:.0f}s)")
    return metrics["accuracy"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", default="permuted-mnist")
    ap.add_argument("--data-dir", default="/root/data/mnist")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--k-online", type=int, default=1)
    ap.add_argument("--k-congrad", type=int, default=5)
    ap.add_argument("--batch", type=int, default=10)
    ap.add_argument("--vbuf", type=int, default=50)
    ap.add_argument("--memory", type=int, default=300)
    ap.add_argument("--learners", nargs="+",
                    default=["online-only", "replay-only", "mixed-replay"])
    ap.add_argument("--out", default="")
    args = ap.parse_args()

    table = {}
    for mode, k in (("online-gd", args.k_online), ("congrad", args.k_congrad)):
        for learner in args.learners:
            accs = [run_one(args.dataset, args.data_dir, learner, mode, s,
                            lr=args.lr, k=k, batch=args.batch, vbuf=args.vbuf,
                            memory=args.memory)
                    for s in args.seeds]
            table[f"{mode}/{learner}"] = (float(np.mean(accs)), float(np.std(accs)))

    print(f"\n{args.dataset}: final mean accuracy over {len(args.seeds)} seeds")
    for key, (mean, std) in table.items():
        print(f"  {key:30s} {100 * mean:.1f}({100 * std:.1f})")
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
