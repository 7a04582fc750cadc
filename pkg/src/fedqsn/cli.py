"""Command line front end.

    fedqsn run CONFIG [--resume CHECKPOINT]
    fedqsn sweep CONFIG --axis NAME --values V1,V2,...
    fedqsn compare SUMMARY_A SUMMARY_B
    fedqsn inspect-checkpoint PATH

Set ``FEDQSN_MASTER_SEED`` to override ``fed.master_seed`` for any config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .checkpoint import read_checkpoint
from .config import parse_config
from .errors import FedQSNError
from .runner import SWEEP_AXES, RunSummary, compare, run_experiment, sweep


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    summary = run_experiment(cfg, resume_from=args.resume)
    print(f"output: {cfg.output_dir}")
    print(f"best global loss  {summary.best_global:.6g}")
    print(f"best proxy loss   {summary.best_proxy:.6g}")
    print(f"gap               {summary.gap:+.6g}")
    print(f"final cosine      {_fmt(summary.final_cosine)}")
    print(f"reconstructed     {summary.reconstructed_loss:.6g} (unscaled {summary.reconstructed_loss_unscaled:.6g})")
    return 0


def _parse_values(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            out.append(int(part))
        except ValueError:
            out.append(float(part))
    return out


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    values = _parse_values(args.values)
    summaries = sweep(cfg, args.axis, values)
    print(f"{args.axis:>12} {'global':>10} {'proxy':>10} {'gap':>10} {'cosine':>8}")
    for v, s in zip(values, summaries):
        print(f"{v!s:>12} {s.best_global:10.4g} {s.best_proxy:10.4g} {s.gap:+10.4g} {_fmt(s.final_cosine):>8}")
    return 0


def cmd_compare(args) -> int:
    rows = compare(RunSummary.load(args.summary_a), RunSummary.load(args.summary_b))
    for name, row in rows.items():
        print(f"{name:28} {_fmt(row['a']):>14} {_fmt(row['b']):>14} {_fmt(row['diff']):>14}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = read_checkpoint(args.path)
    state = ckpt.state
    print(f"round            {state.round}")
    print(f"config hash      {ckpt.config_hash or '-'}")
    print(f"parameters       {state.global_model.num_params}")
    print(f"server mask p1   {state.server_mask.ratio:.4g} (realized {state.server_mask.drop_fraction():.4f})")
    for name, arr in state.global_model.params.items():
        hidden = int((~state.server_mask.keep[name]).sum()) if name in state.server_mask.keep else 0
        print(f"  {name:24} {str(arr.shape):14} hidden columns: {hidden}")
    history = ckpt.extras.get("history", [])
    if history:
        print(f"history          {len(history)} rounds; last global loss {history[-1]['global_loss']:.6g}")
    if args.json:
        print(json.dumps({"round": state.round, "config_hash": ckpt.config_hash, "history": history}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedqsn", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("config")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a saved round")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one experiment per value of a parameter")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=sorted(set(SWEEP_AXES)))
    p.add_argument("--values", required=True, help="comma separated, e.g. 2,3,4")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="compare two summary.json files")
    p.add_argument("summary_a")
    p.add_argument("summary_b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect-checkpoint", help="describe a checkpoint file")
    p.add_argument("path")
    p.add_argument("--json", action="store_true", help="also dump the stored history")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FedQSNError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
