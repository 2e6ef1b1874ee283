"""Command-line entry point.

Subcommands: synth, train, eval, count, footprint, erf, gradcheck. Exit
codes: 0 success, 1 usage error, 2 validation/config error, 3 numeric
failure. Errors print one machine-readable line to stderr:

    lkdnet: error code=<N> <message>

--threads caps BLAS worker threads via environment variables; it must
take effect before numpy is first imported, which is why this module
defers all heavy imports into the subcommand handlers.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(code: int, message: str) -> None:
    line = " ".join(str(message).split())
    print(f"lkdnet: error code={code} {line}", file=sys.stderr)


def _set_threads(n: int) -> None:
    if n < 1:
        raise UsageError(f"--threads must be positive, got {n}")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    if "numpy" in sys.modules:
        # Pools may already be sized; the cap still applies to new processes.
        pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="lkdnet",
        description="Dehazing network toolchain: synthesis, training, evaluation, "
        "cost counting, footprint analysis, ERF probing, gradient checking.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, seed_help="seed override (default: config value, else LKD_SEED, else 0)"):
        p.add_argument("--config", default=None, help="run config JSON (default: built-in defaults)")
        p.add_argument("--seed", type=int, default=None, help=seed_help)
        p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (default: leave unset)")

    p = sub.add_parser("synth", help="generate a hazy/clean dataset with manifest")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train a model on a synthesized dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory (from synth)")
    p.add_argument("--out", required=True, help="output directory for model.ckpt and metrics.csv")

    p = sub.add_parser("eval", help="evaluate a checkpoint; per-image CSV on stdout")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (default: leave unset)")

    p = sub.add_parser("count", help="parameter/MAC report or formula evaluation")
    p.add_argument("--variant", choices=["t", "s", "b", "l", "tiny"], default=None,
                   help="variant preset to count (default: t unless --eq3/--ablation)")
    p.add_argument("--ablation", choices=["base", "sf", "sf_sr", "sf_sr_dlk", "sf_sr_cefn", "full"],
                   default=None, help="count an ablation config instead of a variant")
    p.add_argument("--hw", type=int, default=256, help="input height=width for MACs (default 256)")
    p.add_argument("--eq3", nargs=3, type=int, metavar=("K", "D", "C"), default=None,
                   help="evaluate the printed parameter formula against exact counts")
    p.add_argument("--compare-k", default=None,
                   help="comma-separated kernel list for the direct-vs-decomposed CSV (with --eq3's d, C)")

    p = sub.add_parser("footprint", help="decomposition footprint report")
    p.add_argument("--K", type=int, required=True, help="target kernel size (odd)")
    p.add_argument("--d", type=int, required=True, help="dilation rate")

    p = sub.add_parser("erf", help="effective receptive field probe")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--tap", choices=["output", "bottleneck"], default=None,
                   help="probe tap (default: config value, else output)")
    p.add_argument("--out", default=".", help="output directory for report files (default .)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--op", default=None, help="run a single named check (default: all)")
    p.add_argument("--seeds", type=int, default=5, help="seeds per check (default 5)")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (default: leave unset)")

    return parser


def _cmd_synth(args) -> int:
    from .haze import make_dataset, write_dataset
    from .runconfig import load_run_config, resolve_seed

    cfg = load_run_config(args.config)
    seed = resolve_seed(cfg, "data", args.seed)
    pairs = make_dataset(
        cfg.data.n,
        cfg.data.size,
        seed=seed,
        clean_source=cfg.data.clean_source,
        source_dir=cfg.data.source_dir,
    )
    write_dataset(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out} (size {cfg.data.size}, seed {seed})")
    return EXIT_OK


def _cmd_train(args) -> int:
    from dataclasses import replace

    from .haze import load_dataset
    from .model import LkdNet
    from .runconfig import load_run_config, resolve_seed
    from .train import train

    cfg = load_run_config(args.config)
    seed = resolve_seed(cfg, "train", args.seed)
    tcfg = replace(cfg.train, seed=seed)
    pairs = load_dataset(args.data)
    model = LkdNet(cfg.model, seed=seed)
    result = train(model, pairs, tcfg, out_dir=args.out)
    print(
        f"trained {tcfg.steps} steps (seed {seed}); final loss {result.final_loss:.6g}; "
        f"checkpoint and metrics.csv in {args.out}"
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .haze import load_dataset
    from .model import LkdNet
    from .train import evaluate

    model = LkdNet.load(args.ckpt)
    pairs = load_dataset(args.data)
    rows, mean_psnr, mean_ssim = evaluate(model, pairs)
    print("image,psnr,ssim")
    for i, (p, s) in enumerate(rows):
        print(f"{i},{p:.6f},{s:.6f}")
    print(f"mean,{mean_psnr:.6f},{mean_ssim:.6f}")
    return EXIT_OK


def _cmd_count(args) -> int:
    from .analysis import (
        compare_direct_vs_decomposed,
        compare_rows_to_csv,
        count_flops,
        direct_params,
        eval_eq3,
        eval_eq4,
        exact_decomposed_params,
    )
    from .model import LkdNet, ablation_config, variant_config

    if args.hw < 4 or args.hw % 4:
        raise UsageError(f"--hw must be a positive multiple of 4, got {args.hw}")
    if args.eq3 is not None:
        k, d, c = args.eq3
        ex = exact_decomposed_params(k, d, c)
        print("quantity,value")
        print(f"eq3_params,{eval_eq3(k, d, c)}")
        print(f"eq4_flops_{args.hw}x{args.hw},{eval_eq4(k, d, c, args.hw, args.hw)}")
        print(f"exact_small_leg,{ex['small_leg']}")
        print(f"exact_dilated_leg,{ex['dilated_leg']}")
        print(f"exact_pointwise,{ex['pointwise']}")
        print(f"exact_decomposed_total,{ex['total']}")
        print(f"direct_dw,{direct_params(k, c)}")
        print(
            "# printed formula and exact decomposed count differ by construction; "
            "both are reported, neither is corrected"
        )
        if args.compare_k:
            kernels = [int(x) for x in args.compare_k.split(",") if x]
            print(compare_rows_to_csv(compare_direct_vs_decomposed(kernels, d, c)), end="")
        return EXIT_OK
    if args.compare_k:
        raise UsageError("--compare-k needs --eq3 K D C for the dilation and channel count")
    if args.ablation is not None:
        cfg = ablation_config(args.ablation)
    else:
        cfg = variant_config(args.variant or "t")
    model = LkdNet(cfg, seed=0)
    report = count_flops(model, args.hw, args.hw)
    print(report.to_csv(), end="")
    return EXIT_OK


def _cmd_footprint(args) -> int:
    from .analysis import footprint, footprint_by_convolution
    from .blocks import Decomposition

    decomp = Decomposition(args.K, args.d)
    fp = footprint(decomp)
    oracle = footprint_by_convolution(decomp)
    agree = fp.offsets == oracle.offsets
    print(fp.report_text())
    print(f"indicator-convolution oracle agreement: {'yes' if agree else 'NO'}")
    if not agree:
        raise AssertionError("footprint disagrees with the indicator-convolution oracle")
    return EXIT_OK


def _cmd_erf(args) -> int:
    from .erf import erf_probe, save_heat_map
    from .model import LkdNet
    from .runconfig import load_run_config, resolve_seed
    from .tensor import Tensor, save_tensor

    cfg = load_run_config(args.config)
    seed = resolve_seed(cfg, "erf", args.seed)
    tap = args.tap or cfg.erf.tap
    model = LkdNet.load(args.ckpt)
    report = erf_probe(
        model,
        n_samples=cfg.erf.n_samples,
        input_size=cfg.erf.input_size,
        seed=seed,
        tap=tap,
    )
    os.makedirs(args.out, exist_ok=True)
    import numpy as np

    save_tensor(
        os.path.join(args.out, "erf_map.lkdt"),
        Tensor(report.contribution[None, None].astype(np.float64), dtype=np.float64),
    )
    save_heat_map(os.path.join(args.out, "erf_heat.ppm"), report.contribution)
    text = report.to_text()
    with open(os.path.join(args.out, "erf_r_table.txt"), "w") as f:
        f.write(text)
    print(text, end="")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, run_suite
    from .tensor import NumericError

    if args.seeds < 1:
        raise UsageError(f"--seeds must be positive, got {args.seeds}")
    names = None
    if args.op is not None:
        if args.op not in CHECKS:
            raise UsageError(f"unknown op {args.op!r}; known: {', '.join(sorted(CHECKS))}")
        names = [args.op]
    results, ok = run_suite(names=names, seeds=range(args.seeds))
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(
            f"{r.name} seed={r.seed} max_rel={r.max_rel_err:.3e} "
            f"checked={r.checked} kinks_skipped={r.skipped_kinks} {status}"
        )
    if not ok:
        raise NumericError("gradient check failed")
    return EXIT_OK


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "count": _cmd_count,
    "footprint": _cmd_footprint,
    "erf": _cmd_erf,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        threads = getattr(args, "threads", None)
        if threads is not None:
            _set_threads(threads)
        return _HANDLERS[args.command](args)
    except UsageError as e:
        _emit_error(EXIT_USAGE, str(e))
        return EXIT_USAGE
    except (AssertionError, ArithmeticError) as e:
        _emit_error(EXIT_NUMERIC, str(e))
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as e:
        _emit_error(EXIT_VALIDATION, str(e))
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
