#!/usr/bin/env python3
"""Sensitivity of the final enhancement state to the per-stage epoch budget.

Runs the planted-corruption search with several epochs-per-stage budgets
on identical data and reports the chosen-state path for each, plus the
pairwise Hamming distances between the final states.
"""

import argparse
import time
from itertools import combinations

from neam import data_io, graph, optimize, search


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--budgets", type=int, nargs="+", default=[10, 30, 50])
    ap.add_argument("--corruption", default="fresnel", choices=data_io.CORRUPTIONS)
    ap.add_argument("--materials", type=int, default=4)
    ap.add_argument("--samples", type=int, default=10_000)
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    params = data_io.benchmark_material_params(args.materials, seed=42)
    data = data_io.gen_corrupted_ggx(params, args.corruption, args.samples, seed=11)
    g = graph.build_ggx_graph()

    finals = {}
    for budget in args.budgets:
        cfg = search.SearchConfig(
            hamming_threshold=1, epochs_per_stage=budget, max_stages=6, hidden=(8, 16, 8)
        )
        tcfg = optimize.TrainConfig(batch_size=args.batch_size, seed=args.seed)
        t0 = time.time()
        _, trace = search.run_enhancement(g, data, cfg, tcfg)
        path = " -> ".join(st.chosen_state.to_string() for st in trace.stages)
        finals[budget] = trace.final_state
        print(f"budget {budget:3d}: {time.time() - t0:5.0f}s  {path}")

    for a, b in combinations(sorted(finals), 2):
        dist = sum(x != y for x, y in zip(finals[a].bits, finals[b].bits))
        print(f"final-state Hamming distance {a} vs {b}: {dist}")


if __name__ == "__main__":
    main()
