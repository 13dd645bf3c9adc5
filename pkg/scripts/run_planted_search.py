#!/usr/bin/env python3
"""Plant a corrupted term in the GGX generator and let the search find it.

Generates specular-dominant materials, corrupts one closed-form term in
the virtual-measurement generator, trains a converged pure-analytical
baseline, then runs the hypercube search and reports the loss ratio.
"""

import argparse
import time

from neam import data_io, graph, optimize, search


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corruption", default="fresnel", choices=data_io.CORRUPTIONS)
    ap.add_argument("--materials", type=int, default=4)
    ap.add_argument("--samples", type=int, default=10_000)
    ap.add_argument("--epochs-per-stage", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--max-stages", type=int, default=6)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--baseline-epochs", type=int, default=240)
    args = ap.parse_args()

    params = data_io.benchmark_material_params(args.materials, seed=42)
    data = data_io.gen_corrupted_ggx(params, args.corruption, args.samples, seed=11)
    g = graph.build_ggx_graph()
    tcfg = optimize.TrainConfig(batch_size=args.batch_size, seed=args.seed)

    train_td, val_td = optimize.pack_samplesets(data, tcfg.val_fraction, tcfg.seed)
    tm0 = optimize.TrainableModel.fresh(graph.all_zero_model(g), args.materials)
    t0 = time.time()
    base = optimize.train_model(tm0, train_td, val_td, args.baseline_epochs, tcfg)
    print(f"converged analytical baseline: val {base.val_loss:.4e} ({time.time() - t0:.0f}s)")

    cfg = search.SearchConfig(
        hamming_threshold=1,
        epochs_per_stage=args.epochs_per_stage,
        max_stages=args.max_stages,
        hidden=(8, 16, 8),
    )
    t0 = time.time()
    tm, trace = search.run_enhancement(g, data, cfg, tcfg)
    print(f"search finished in {time.time() - t0:.0f}s")
    print(trace.to_text())
    final = trace.stages[-1].chosen_loss
    print(f"final/baseline loss ratio: {final / base.val_loss:.3f}")


if __name__ == "__main__":
    main()
