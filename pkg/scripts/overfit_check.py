#!/usr/bin/env python3
"""Sanity harness: drive the training loss to ~0 on one fixed batch.

A model + autodiff + optimizer stack that cannot memorize 8 windows is
broken somewhere; this prints the loss trace so regressions show up as a
curve that flattens early instead of collapsing.
"""
import argparse

from bikecast.data import Normalizer, make_windows
from bikecast.model import ArchConfig
from bikecast.synth import synth_generate
from bikecast.train import overfit_single_batch


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=11, help="synthetic data seed")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--target", type=float, default=1e-3)
    args = ap.parse_args()

    graph, demand, _ = synth_generate(8, 96, seed=args.seed, process="diffusion")
    windows = make_windows(demand)
    norm = Normalizer.fit(demand.values[: windows.train_row_end], "zscore_per_node")
    ds = windows.transformed(norm.apply)
    arch = ArchConfig(block1=(1, 8, 16), block2=(16, 8, 16))

    trace = overfit_single_batch(
        ds.inputs[:8], ds.targets[:8], graph, None, arch,
        steps=args.steps, lr=args.lr, seed=0, target_loss=args.target,
    )
    for i in range(0, len(trace), max(1, len(trace) // 20)):
        print(f"step {i:>5}: loss {trace[i]:.6f}")
    print(f"step {len(trace) - 1:>5}: loss {trace[-1]:.6f} "
          f"({'reached' if trace[-1] < args.target else 'missed'} target {args.target:g})")


if __name__ == "__main__":
    main()
