"""Command-line driver for the full workflow.

Subcommands: enhance, fit, eval, slice, export, gen, merl. Every run
echoes its effective configuration (lines starting with "config ") so it
can be reproduced exactly. Logs go to stderr; reports to stdout or --out.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys

import numpy as np

from . import data_io, optimize as opt, runtime, search
from .errors import NeamError, NonFinite, OutOfRange
from .graph import BUILDERS
from .neural import weight_count

log = logging.getLogger("neam")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser():
    p = _Parser(prog="neam", description="hybrid neural/analytical reflectance models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=int(os.environ.get("NEAM_THREADS", "1")))
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("enhance", help="search for the best neural replacement state")
    e.add_argument("--model", default="ggx", choices=sorted(BUILDERS))
    e.add_argument("--data", required=True, help=".neas path, directory, or synthetic:<spec>")
    e.add_argument("--epochs-per-stage", type=int, default=30)
    e.add_argument("--threshold", type=int, default=1)
    e.add_argument("--max-modules", type=int, default=None)
    e.add_argument("--fix-bit", action="append", default=[], metavar="SLOT=V")
    e.add_argument("--max-stages", type=int, default=20)
    e.add_argument("--batch-size", type=int, default=2048)
    e.add_argument("--out", default=None, help="model file to write")
    e.add_argument("--checkpoint", default=None, help="checkpoint directory")
    e.add_argument("--resume", default=None, help="checkpoint file to resume from")
    e.add_argument("--report", default=None, help="write the stage report here instead of stdout")

    f = sub.add_parser("fit", help="fit per-material parameters with frozen weights")
    f.add_argument("--model", required=True, help="model file (.neam)")
    f.add_argument("--data", required=True, help="sample set (.neas)")
    f.add_argument("--epochs", type=int, default=1000)
    f.add_argument("--lr", type=float, default=1e-3)
    f.add_argument("--batch-size", type=int, default=None)
    f.add_argument("--out", default=None, help="fit text file")

    v = sub.add_parser("eval", help="report losses of a fit on a sample set")
    v.add_argument("--model", required=True)
    v.add_argument("--fit", required=True)
    v.add_argument("--data", required=True)

    s = sub.add_parser("slice", help="render a reflectance slice image (PFM)")
    s.add_argument("--model", required=True)
    s.add_argument("--fit", required=True)
    s.add_argument("--wo", default="0.0,0.0", help="theta,phi of the fixed outgoing direction")
    s.add_argument("--mode", default="fixed-wo", choices=["fixed-wo", "half-diff"])
    s.add_argument("--res", type=int, default=128)
    s.add_argument("--out", required=True)

    x = sub.add_parser("export", help="write the model as a self-contained shader")
    x.add_argument("--model", required=True)
    x.add_argument("--fit", default=None)
    x.add_argument("--out", required=True)

    g = sub.add_parser("gen", help="generate synthetic sample sets")
    g.add_argument("--kind", default="ggx",
                   help="ggx or corrupted:{fresnel|geometry|norm}")
    g.add_argument("--materials", type=int, default=4)
    g.add_argument("--samples", type=int, default=10000)
    g.add_argument("--noise-sigma", type=float, default=None)
    g.add_argument("--mode", default="anisotropic", choices=["isotropic", "anisotropic"])
    g.add_argument("--out", required=True, help="output directory")

    m = sub.add_parser("merl", help="inspect or convert MERL binary tables")
    mx = m.add_mutually_exclusive_group(required=True)
    mx.add_argument("--info", default=None, metavar="PATH")
    mx.add_argument("--to-sampleset", nargs=3, default=None, metavar=("PATH", "N", "OUT"))
    return p


def _echo_config(args, out):
    items = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    line = " ".join(f"{k.replace('_', '-')}={v}" for k, v in items.items())
    print(f"config command={args.command} {line}", file=out)


def _resolve_data(spec, seed):
    """Sample sets from a synthetic:<spec> string, a file, or a directory."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        kind = parts[1]
        kv = {}
        for chunk in parts[2:]:
            for item in chunk.split(","):
                if item:
                    k, _, val = item.partition("=")
                    kv[k] = val
        materials = int(kv.get("materials", 4))
        samples = int(kv.get("samples", 10000))
        seed = int(kv.get("seed", seed))
        mode = kv.get("mode", "anisotropic")
        if kind == "ggx":
            params = data_io.random_material_params(materials, seed)
            sigma = float(kv.get("sigma", 0.1))
            return data_io.gen_synthetic_ggx(params, samples, noise_sigma=sigma, seed=seed, mode=mode)
        if kind.startswith("planted-"):
            corruption = kind.removeprefix("planted-")
            sigma = float(kv.get("sigma", 0.0))
            params = data_io.benchmark_material_params(materials, seed=42)
            return data_io.gen_corrupted_ggx(
                params, corruption, samples, noise_sigma=sigma, seed=seed, mode=mode
            )
        raise OutOfRange(f"unknown synthetic data kind {kind!r}")
    if os.path.isdir(spec):
        paths = sorted(glob.glob(os.path.join(spec, "*.neas")))
        if not paths:
            raise FileNotFoundError(f"no .neas files under {spec}")
        return [data_io.read_sampleset(p) for p in paths]
    return [data_io.read_sampleset(spec)]


def _load_fit(path):
    with open(path) as f:
        return runtime.fit_from_text(f.read())


def cmd_enhance(args):
    data = _resolve_data(args.data, args.seed)
    graph = BUILDERS[args.model]()
    fixed_bits = {}
    for item in args.fix_bit:
        slot, _, v = item.partition("=")
        fixed_bits[int(slot)] = int(v)
    cfg = search.SearchConfig(
        hamming_threshold=args.threshold,
        epochs_per_stage=args.epochs_per_stage,
        max_modules=args.max_modules,
        fixed_bits=fixed_bits or None,
        max_stages=args.max_stages,
    )
    tcfg = opt.TrainConfig(batch_size=args.batch_size, seed=args.seed)
    train_log = log.debug if log.isEnabledFor(logging.DEBUG) else None
    if args.resume:
        tm, trace = search.resume_enhancement(
            args.resume, graph, data, threads=args.threads,
            checkpoint_dir=args.checkpoint, log_fn=train_log,
        )
    else:
        tm, trace = search.run_enhancement(
            graph, data, cfg, tcfg, threads=args.threads,
            checkpoint_dir=args.checkpoint, log_fn=train_log,
        )
    report = trace.to_text()
    n_weights = tm.model.total_module_weights()
    report += f"\nmodule weights total {n_weights}\n"
    if args.report:
        with open(args.report, "w") as f:
            f.write(report)
    else:
        print(report)
    if args.out:
        runtime.save_model(tm.model, args.out)
        log.info("wrote model to %s", args.out)
    return 0


def cmd_fit(args):
    model = runtime.load_model(args.model)
    data = _resolve_data(args.data, args.seed)
    if len(data) != 1:
        raise OutOfRange("fit expects exactly one material's sample set")
    fit = runtime.fit_material(
        model, data[0], epochs=args.epochs, lr=args.lr, seed=args.seed, batch_size=args.batch_size
    )
    text = runtime.fit_to_text(model.graph.model_name, model.state, fit)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        log.info("wrote fit to %s", args.out)
    else:
        print(text, end="")
    print(f"final_loss {fit.final_loss:.6e}", file=sys.stderr)
    return 0


def cmd_eval(args):
    model = runtime.load_model(args.model)
    _, _, fit = _load_fit(args.fit)
    data = _resolve_data(args.data, args.seed)
    total_eq1, total_mal, n = 0.0, 0.0, 0
    for s in data:
        pred = runtime.eval_fit(model, fit, s.wi, s.wo)
        cos_i = np.maximum(s.wi[:, 2], 0.0)
        total_eq1 += float(np.sum(opt.loss_log_l1(pred, s.value, cos_i)))
        delta = 1e-4
        mal = np.abs(np.log(np.maximum(pred, 0.0) + delta) - np.log(np.maximum(s.value, 0.0) + delta))
        total_mal += float(mal.sum())
        n += s.n_samples
    print(f"mean_loss {total_eq1 / n:.6e}")
    print(f"mean_abs_log_error {total_mal / (3 * n):.6e}")
    return 0


def cmd_slice(args):
    model = runtime.load_model(args.model)
    _, _, fit = _load_fit(args.fit)
    if args.mode == "fixed-wo":
        theta, _, phi = args.wo.partition(",")
        mode = ("fixed_wo", float(theta), float(phi or 0.0))
    else:
        mode = ("theta_h_theta_d",)
    runtime.render_slice(model, fit, mode, args.res, args.out)
    log.info("wrote slice to %s", args.out)
    return 0


def cmd_export(args):
    model = runtime.load_model(args.model)
    fit = _load_fit(args.fit)[2] if args.fit else None
    text = runtime.export_shader(model, fit, args.out)
    log.info("wrote shader (%d bytes) to %s", len(text), args.out)
    return 0


def cmd_gen(args):
    seed = args.seed
    if args.kind == "ggx":
        params = data_io.random_material_params(args.materials, seed)
        sigma = 0.1 if args.noise_sigma is None else args.noise_sigma
        sets = data_io.gen_synthetic_ggx(params, args.samples, noise_sigma=sigma, seed=seed, mode=args.mode)
    elif args.kind.startswith("corrupted:"):
        corruption = args.kind.split(":", 1)[1]
        sigma = 0.0 if args.noise_sigma is None else args.noise_sigma
        params = data_io.benchmark_material_params(args.materials, seed=42)
        sets = data_io.gen_corrupted_ggx(
            params, corruption, args.samples, noise_sigma=sigma, seed=seed, mode=args.mode
        )
    else:
        raise OutOfRange(f"unknown generator kind {args.kind!r}")
    os.makedirs(args.out, exist_ok=True)
    for s in sets:
        path = os.path.join(args.out, f"{s.material_id}.neas")
        data_io.write_sampleset(s, path)
        print(f"wrote {path} ({s.n_samples} samples)")
    return 0


def cmd_merl(args):
    if args.info:
        table = data_io.read_merl(args.info)
        scaled = [table.planes[c] * data_io.MERL_SCALES[c] for c in range(3)]
        print(f"dims {table.dims}")
        for c, name in enumerate("rgb"):
            valid = table.planes[c] >= 0
            print(
                f"channel {name}: valid_cells {int(valid.sum())} "
                f"max {scaled[c][valid].max():.6g} mean {scaled[c][valid].mean():.6g}"
            )
        return 0
    path, n, out = args.to_sampleset
    table = data_io.read_merl(path)
    s = data_io.merl_to_sampleset(table, int(n), seed=args.seed, material_id=data_io._stem(path))
    data_io.write_sampleset(s, out)
    print(f"wrote {out} ({s.n_samples} samples)")
    return 0


_COMMANDS = {
    "enhance": cmd_enhance,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "slice": cmd_slice,
    "export": cmd_export,
    "gen": cmd_gen,
    "merl": cmd_merl,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
    )
    _echo_config(args, sys.stdout)
    try:
        return _COMMANDS[args.command](args)
    except NonFinite as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (NeamError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
