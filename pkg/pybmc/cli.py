"""
The ``pybmc`` command line: calibrate, sweep, advise and generate.

Exit codes: 0 on success, 2 for usage and configuration errors, 3 when
the decode loop fails numerically.
"""

import sys
import json
import math
import logging
import argparse

import numpy as np

from . import __version__
from ._coreutils import BmcError, NumericError
from ._types import ModelDims, policy_from_name
from .costmodel import CostParams
from .sim import ToyModel, generate, generate_speculative, proposer_from_name
from .report import FORMATS, write_atomic
from .bench import POLICY_NAMES, SweepSpec
from .bench import cmd_calibrate, cmd_sweep, cmd_advise


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValueError(f"Expected comma-separated ints, not {text!r}.")


def _add_model_args(parser):
    group = parser.add_argument_group("model")
    group.add_argument("--batch", type=int, default=1, help="batch size B")
    group.add_argument("--layers", type=int, default=2, help="layers L")
    group.add_argument("--heads", type=int, default=4, help="query heads H")
    group.add_argument("--head-dim", type=int, default=16, help="head dim d")
    group.add_argument("--groups", type=int, default=1, help="GQA group size G")
    group.add_argument("--seq-len", type=int, default=128, help="max context N")
    group.add_argument("--prompt-len", type=int, default=1, help="prompt tokens")
    group.add_argument("--steps", type=int, default=None, help="default N - prompt")
    group.add_argument("--vocab", type=int, default=256)
    group.add_argument("--seed", type=int, default=0)
    group.add_argument(
        "--spec",
        default="off",
        help="speculation: off, script:<m>[,<m>...] or self:<depth>[:<skip>]",
    )


def make_parser():
    parser = argparse.ArgumentParser(
        prog="pybmc", description="KV-cache allocation benchmarks and advice."
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v info, -vv debug"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="measure copy bandwidth and compute rate")
    p.add_argument("--duration", type=float, default=1.0, help="seconds to measure")

    p = sub.add_parser("sweep", help="run the decode loop per (policy, T)")
    _add_model_args(p)
    p.add_argument("--policy", action="append", choices=POLICY_NAMES)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--allocs", default="auto", help="T values, or 'auto'")
    group.add_argument("--chunk", type=int, default=None, help="chunk size r")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--format", choices=FORMATS, default="json")
    p.add_argument("--out", default=None, help="output file, default stdout")
    p.add_argument("--cprime", type=float, default=None, help="skip calibration")

    p = sub.add_parser("advise", help="recommend the number of allocations")
    p.add_argument("--n", type=int, required=True, help="max context N")
    p.add_argument("--cprime", type=float, default=None)
    p.add_argument("--c0", type=float, default=0.0, help="time per allocation")
    p.add_argument("--spec-k", type=int, default=None, help="candidates per step")
    p.add_argument("--spec-m", type=float, default=None, help="mean accepted")
    p.add_argument("--beta-prime-ratio", type=float, default=1.0)

    p = sub.add_parser("generate", help="run one decode and print its report")
    _add_model_args(p)
    p.add_argument("--policy", default="bmc(16)", help="e.g. iterative, bmc(16)")
    p.add_argument("--out", default=None)

    return parser


def _dims_from_args(args):
    return ModelDims(
        batch=args.batch,
        layers=args.layers,
        heads=args.heads,
        head_dim=args.head_dim,
        max_context=args.seq_len,
        groups=args.groups,
    )


def run_calibrate(args):
    cmd_calibrate(args.duration)


def run_sweep(args):
    allocs = None
    if args.chunk is None and args.allocs != "auto":
        allocs = _int_list(args.allocs)
    spec = SweepSpec(
        dims=_dims_from_args(args),
        policies=tuple(args.policy or POLICY_NAMES),
        allocs=allocs,
        chunk=args.chunk,
        prompt_len=args.prompt_len,
        steps=args.steps,
        spec=args.spec,
        reps=args.reps,
        seed=args.seed,
        vocab=args.vocab,
        cprime=args.cprime,
        fmt=args.format,
        out=args.out,
    )
    cmd_sweep(spec)


def run_advise(args):
    if args.cprime is None:
        raise ValueError("advise needs --cprime (measure it with 'pybmc calibrate').")
    sd = args.spec_k is not None or args.spec_m is not None
    kwargs = {"c0": args.c0}
    if sd:
        m = 1.0 if args.spec_m is None else args.spec_m
        kwargs["m"] = m
        kwargs["k"] = math.ceil(m) if args.spec_k is None else args.spec_k
        kwargs["beta_prime_c"] = args.beta_prime_ratio
    params = CostParams.from_cprime(args.n, args.cprime, **kwargs)
    cmd_advise(args.n, params, sd=sd)


def run_generate(args):
    dims = _dims_from_args(args)
    policy = policy_from_name(args.policy)
    steps = dims.max_context - args.prompt_len if args.steps is None else args.steps
    model = ToyModel(dims, args.vocab, args.seed)
    prompt = np.random.default_rng(args.seed).integers(
        0, args.vocab, (dims.batch, args.prompt_len)
    )
    proposer = proposer_from_name(args.spec)
    if proposer is None:
        report = generate(model, policy, prompt, steps, args.seed)
    else:
        report = generate_speculative(model, policy, prompt, steps, proposer, args.seed)
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        write_atomic(text, args.out)
    else:
        print(text, end="")


COMMANDS = {
    "calibrate": run_calibrate,
    "sweep": run_sweep,
    "advise": run_advise,
    "generate": run_generate,
}


def main(argv=None):
    """Run the command line, return the exit code."""
    parser = make_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except NumericError as err:
        print(f"pybmc: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BmcError, ValueError) as err:
        print(f"pybmc: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK
