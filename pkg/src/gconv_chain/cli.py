"""Command line entry point: ``gconv-chain <command> NETWORK [options]``."""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .accel import load_accelerator, map_chain
from .chainopt import fuse_chain
from .errors import GConvError, StageError
from .frontend import (chain_to_dict, dumps, load_network, plan_to_dict, run_pipeline,
                       verify_network, write_atomic)
from .lowering import lower_network
from .perf import analyze_chain

COMMANDS = ("lower", "fuse", "map", "analyze", "compile", "verify", "emit")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gconv-chain",
                                description="Lower CNN layer graphs to GCONV chains and "
                                            "model them on spatial accelerators.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("lower", "lower a network to a GCONV chain"),
                        ("fuse", "lower and fuse reduce-free GCONVs"),
                        ("map", "compute unroll plans on an accelerator"),
                        ("analyze", "model cycles and data movement"),
                        ("compile", "run the full pipeline and write a report"),
                        ("verify", "check the chain against direct layer evaluation"),
                        ("emit", "write the binary instruction stream")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("network", help="shipped network name or path to a JSON document")
        sp.add_argument("--report", metavar="PATH", help="write the JSON result here")
        sp.add_argument("--dump-chain", metavar="PATH", help="also write the final chain as JSON")
        if name in ("map", "analyze", "compile", "emit"):
            sp.add_argument("--accel", default="eyeriss",
                            help="preset name (tpu, dnnweaver, eyeriss, eagerpruning, nlr) or path")
            sp.add_argument("--no-fuse", action="store_true", help="skip operation fusion")
        if name in ("compile", "emit"):
            sp.add_argument("--no-exchange", action="store_true",
                            help="skip consistency loop exchange")
        if name in ("compile", "emit"):
            sp.add_argument("--emit", metavar="PATH", dest="emit_path",
                            help="write the binary instruction stream here")
            sp.add_argument("--disasm", metavar="PATH", help="write a textual disassembly here")
        if name == "verify":
            sp.add_argument("--seeds", type=int, default=10, help="random instances to check")
            sp.add_argument("--no-fuse", action="store_true", help="check the unfused chain only")
    return p


def _output(args, doc) -> None:
    text = dumps(doc)
    if args.report:
        write_atomic(args.report, text)
    else:
        sys.stdout.write(text)


def _load(name):
    try:
        return load_network(name)
    except GConvError as e:
        raise StageError("parse", e) from e


def _chain(args):
    net = _load(args.network)
    chain = lower_network(net)
    if args.command == "fuse" or (hasattr(args, "no_fuse") and not args.no_fuse
                                  and args.command != "lower"):
        chain = fuse_chain(chain)
    return net, chain


def run(args) -> int:
    cmd = args.command
    if cmd == "verify":
        res = verify_network(_load(args.network), args.seeds, fuse=not args.no_fuse)
        _output(args, res)
        return 0 if res["ok"] else 1
    if cmd in ("compile", "emit"):
        res = run_pipeline(_load(args.network), args.accel, fuse=not args.no_fuse,
                           exchange=not args.no_exchange)
        if args.dump_chain:
            write_atomic(args.dump_chain, dumps(chain_to_dict(res.chain)))
        if args.emit_path:
            write_atomic(args.emit_path, res.stream.to_bytes())
        if args.disasm:
            write_atomic(args.disasm, res.stream.disassemble())
        if cmd == "compile":
            _output(args, res.report_dict())
        else:
            _output(args, {"entries": len(res.stream.entries),
                           "bytes": len(res.stream.to_bytes()), "nodes": len(res.chain)})
        return 0
    net, chain = _chain(args)
    if args.dump_chain:
        write_atomic(args.dump_chain, dumps(chain_to_dict(chain)))
    if cmd in ("lower", "fuse"):
        _output(args, chain_to_dict(chain))
        return 0
    acc = load_accelerator(args.accel)
    plans = map_chain(chain, acc)
    if cmd == "map":
        _output(args, {"accelerator": acc.name,
                       "plans": {k: plan_to_dict(v) for k, v in plans.items()}})
        return 0
    _output(args, analyze_chain(chain, plans, acc).to_dict())
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except StageError as e:
        err = {"error": type(e.error).__name__, "stage": e.stage, "message": str(e.error)}
    except GConvError as e:
        err = {"error": type(e).__name__, "message": str(e)}
    except OSError as e:
        err = {"error": type(e).__name__, "message": str(e)}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return 2


if __name__ == "__main__":
    sys.exit(main())
