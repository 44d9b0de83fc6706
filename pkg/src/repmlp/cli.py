"""Command-line entry point: ``repmlp {count,convert,verify,bench,infer,inspect}``.

Exit codes: 0 ok, 1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from repmlp.bench import EquivalenceError, bench_config, write_csv
from repmlp.block import DEPLOY, TRAIN, block_forward, convert_block
from repmlp.counting import count_params_flops
from repmlp.errors import RepMLPError
from repmlp.model_io import export_locality_heatmap, load_config, load_net, save_net
from repmlp.net import NAMED_CONFIGS, convert_net, net_forward
from repmlp.reparam import fuse_bn_grouped_fc
from repmlp.verify import TOL_BLOCK, TOL_NET, run_all

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config_name(source):
    return source.upper() if source.upper() in NAMED_CONFIGS else Path(source).stem or "custom"


def cmd_count(args):
    cfg = load_config(args.config)
    report = count_params_flops(cfg, mode=args.mode, name=_config_name(args.config))
    print(report.format(per_layer=args.per_layer))
    return EXIT_OK


def cmd_convert(args):
    net = load_net(args.inp)
    if net.mode != TRAIN:
        raise UsageError(f"input checkpoint has mode flag {net.mode!r}; convert needs a {TRAIN!r} checkpoint")
    deploy = convert_net(net)
    rng = np.random.default_rng(args.seed)
    worst_block = 0.0
    print(f"{'layer':<28} {'max_abs_diff':>14}")
    for i, (stage, dstage) in enumerate(zip(net.stages, deploy.stages)):
        for j, ((block, _), (dblock, _)) in enumerate(zip(stage, dstage)):
            cfg = block.cfg
            x = rng.standard_normal((args.probe_batch, cfg.c, cfg.h, cfg.w)).astype(np.float32)
            diff = float(np.abs(block_forward(x, block) - block_forward(x, dblock)).max())
            worst_block = max(worst_block, diff)
            print(f"{f'stage{i}.{j}.block':<28} {diff:>14.3e}")
    x = rng.standard_normal((args.probe_batch, 3) + net.cfg.input_hw).astype(np.float32)
    net_diff = float(np.abs(net_forward(net, x) - net_forward(deploy, x)).max())
    print(f"{'logits':<28} {net_diff:>14.3e}")
    save_net(args.out, deploy)
    ok = worst_block <= TOL_BLOCK and net_diff <= TOL_NET
    print(f"{'OK' if ok else 'FAIL'}: worst block {worst_block:.3e} (tol {TOL_BLOCK:.0e}), "
          f"logits {net_diff:.3e} (tol {TOL_NET:.0e}); wrote {args.out}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(args):
    cfg = load_config(args.config) if args.config else None
    results = run_all(args.seed, exhaustive=args.exhaustive_small, config=cfg, perturb=args.perturb)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print("verify: " + ("FAILED " + ", ".join(failed) if failed else "all suites passed"))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args):
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = set(modes) - {TRAIN, DEPLOY}
    if bad or not modes:
        raise UsageError(f"--modes takes a comma list of {TRAIN},{DEPLOY}; got {args.modes!r}")
    limits = None
    if args.threads:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(args.threads)
    try:
        rows = []
        for source in args.config:
            rows += bench_config(_config_name(source), load_config(source), args.batch, modes, args.warmup, args.iters, args.seed)
    except EquivalenceError as e:
        print(f"bench: {e}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if limits is not None:
            limits.restore_original_limits()
    if args.out:
        with open(args.out, "w", newline="") as f:
            write_csv(rows, f)
    else:
        write_csv(rows, sys.stdout)
    return EXIT_OK


def cmd_infer(args):
    net = load_net(args.ckpt)
    h = args.height or net.cfg.input_hw[0]
    w = args.width or net.cfg.input_hw[1]
    shape = (args.batch, 3, h, w)
    raw = Path(args.input).read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise UsageError(
            f"input holds {len(raw)} bytes; expected {expected} for f32 NCHW dims {shape}"
        )
    x = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    logits = net_forward(net, x)
    k = min(args.topk, logits.shape[1])
    for i, row in enumerate(logits):
        top = np.argsort(-row, kind="stable")[:k]
        print(f"sample {i}: " + " ".join(f"{int(c)}:{row[c]:.4f}" for c in top))
    return EXIT_OK


def cmd_inspect(args):
    net = load_net(args.ckpt)
    stage, block_idx, set_idx = args.stage - 1, args.block - 1, args.set - 1
    try:
        i, j = (int(v) - 1 for v in args.pos.split(","))
    except ValueError:
        raise UsageError(f"--pos takes 'i,j', got {args.pos!r}") from None
    if not 0 <= stage < len(net.stages) or not 0 <= block_idx < len(net.stages[stage]):
        raise UsageError(f"no block {args.block} in stage {args.stage}")
    block = net.stages[stage][block_idx][0]
    cfg = block.cfg
    if args.kernel == "merged":
        fc3 = convert_block(block).fc3 if block.mode == TRAIN else block.fc3
    elif block.mode != TRAIN:
        raise UsageError(f"--kernel {args.kernel} needs a train checkpoint; deploy blocks only hold the merged kernel")
    else:
        original = fuse_bn_grouped_fc(block.fc3, block.bn3, cfg.hw)
        fc3 = original
        if args.kernel == "diff":
            fc3 = convert_block(block).fc3.weight - original.weight
    try:
        heat = export_locality_heatmap(fc3, cfg.s, cfg.h, cfg.w, set_idx, (i, j), args.out)
    except IndexError as e:
        raise UsageError(str(e)) from None
    base = Path(args.out).with_suffix("")
    print(f"stage {args.stage} block {args.block} set {args.set} pos ({args.pos}): "
          f"kernel {args.kernel}, min |w| {heat.min_abs:.3e}; wrote {base}.csv and {base}.pgm")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="repmlp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="parameter / FLOPs report")
    p.add_argument("--config", required=True, help="preset name, config file or inline document")
    p.add_argument("--mode", choices=(TRAIN, DEPLOY), default=DEPLOY)
    p.add_argument("--per-layer", action="store_true")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("convert", help="train checkpoint -> deploy checkpoint")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-batch", type=int, default=2)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("verify", help="run the equivalence suites")
    p.add_argument("--config", help="also check whole-net conversion for this config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exhaustive-small", action="store_true")
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="forward latency of train vs deploy form")
    p.add_argument("--config", action="append", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--modes", default=f"{TRAIN},{DEPLOY}")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--threads", type=int, default=0, help="pin BLAS/OpenMP threads")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("infer", help="top-k classes for a raw f32 NCHW input file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--topk", type=int, default=5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("inspect", help="export an FC3 locality heatmap (1-based indices)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--set", type=int, default=1)
    p.add_argument("--pos", required=True, help="output point 'i,j'")
    p.add_argument("--kernel", choices=("merged", "original", "diff"), default="merged")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, RepMLPError, OSError) as e:
        print(f"repmlp {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
