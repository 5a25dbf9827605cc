"""Command-line entry point: ``tagi <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, NumericalError, TagiError
from .evaluation import FlopsQuery, evaluate_tasks, flops_standard, flops_tagi
from .gradcheck import format_report, run_gradcheck
from .pipeline import (
    build_suite_for, load_tagi, paths_for, run_finetune, run_pretrain, run_teachers,
)

log = logging.getLogger("tagi")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"{v} must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tagi", description="Instruction-to-adapter hypernetwork pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run config (defaults if omitted)")
        sp.add_argument("--out-dir", help="override paths.out_dir")
        return sp

    with_config(sub.add_parser("pretrain", help="pretrain backbone + hypernetwork on the corpus"))

    sp = with_config(sub.add_parser("train-teachers", help="fit one LoRA teacher per meta-train task"))
    sp.add_argument("--force", action="store_true", help="retrain teachers that already exist")

    sp = with_config(sub.add_parser("finetune", help="distil teachers into the hypernetwork"))
    for flag in ("pretrain", "fusion", "kl", "ins", "pred"):
        sp.add_argument(f"--no-{flag}", action="store_true", help=f"disable {flag}")
    sp.add_argument("--lambda1", type=float, help="weight of the KL term")
    sp.add_argument("--resume", action="store_true", help="continue from tagi.ckpt")
    sp.add_argument("--stop-after", type=_positive, help="stop after this many total steps")

    sp = with_config(sub.add_parser("evaluate", help="score a checkpoint on a task split"))
    sp.add_argument("--checkpoint", help="defaults to <out_dir>/tagi.ckpt")
    sp.add_argument("--split", default="test", choices=("train", "valid", "test"))
    sp.add_argument("--adapters", default="generated", choices=("generated", "zero"),
                    help="'zero' gives the frozen-base baseline")
    sp.add_argument("--n", type=_positive, help="instances per task (default: all)")
    sp.add_argument("--max-new", type=_positive, default=20)
    sp.add_argument("--allow-mismatch", action="store_true")
    sp.add_argument("--report", help="output path (default <out_dir>/report_<split>.json)")

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op and the objective")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--samples", type=_positive, default=64)

    sp = sub.add_parser("flops", help="analytical inference cost, standard vs instruction-once")
    for k, help_ in (("N", "parameters"), ("n", "instances"), ("t", "instruction length"),
                     ("i", "input length")):
        sp.add_argument(k, type=_positive, help=help_)
    sp.add_argument("--json", action="store_true")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "out_dir", None):
        cfg.paths.out_dir = args.out_dir
    return cfg


def _finetune_overrides(cfg: RunConfig, args) -> RunConfig:
    tc = cfg.train
    if args.no_pretrain:
        tc.pretrain_enabled = False
    if args.no_fusion:
        tc.fusion_enabled = False
    if args.no_kl:
        tc.use_kl = False
    if args.no_ins:
        tc.use_ins = False
    if args.no_pred:
        tc.use_pred = False
    if args.lambda1 is not None:
        if args.lambda1 < 0:
            raise ConfigError("--lambda1 must be >= 0")
        tc.lambda1 = args.lambda1
    return cfg


def _dispatch(args) -> int:
    if args.cmd == "gradcheck":
        checks = run_gradcheck(tol=args.tol, h=args.h, n_samples=args.samples)
        print(format_report(checks))
        return EXIT_OK if all(c.passed for c in checks) else EXIT_NUMERICAL

    if args.cmd == "flops":
        q = FlopsQuery(args.N, args.n, args.t, args.i)
        std, tagi = flops_standard(q), flops_tagi(q)
        if args.json:
            print(json.dumps({"N": q.N, "n": q.n, "t": q.t, "i": q.i, "standard": std,
                              "tagi": tagi, "ratio": tagi / std}))
        else:
            print(f"{'method':<10} {'flops':>16}")
            print(f"{'standard':<10} {std:>16,}")
            print(f"{'tagi':<10} {tagi:>16,}")
            print(f"{'ratio':<10} {tagi / std:>16.4f}")
        return EXIT_OK

    cfg = _config(args)
    if args.cmd == "pretrain":
        run_pretrain(cfg)
    elif args.cmd == "train-teachers":
        run_teachers(cfg, force=args.force)
    elif args.cmd == "finetune":
        run_finetune(_finetune_overrides(cfg, args), resume=args.resume, stop_after=args.stop_after)
    elif args.cmd == "evaluate":
        model = load_tagi(cfg, args.checkpoint, args.allow_mismatch)
        suite = build_suite_for(cfg)
        report = evaluate_tasks(model, suite.split(args.split), cfg.suite.mode, args.n,
                                args.adapters, args.max_new, cfg.config_hash)
        report["split"] = args.split
        tag = "" if args.adapters == "generated" else "_zero"
        out = args.report or paths_for(cfg).report(args.split, tag)
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        agg = report["aggregate"]
        log.info("%s: rouge_l %.4f exact_match %.4f -> %s", args.split, agg["rouge_l"],
                 agg["exact_match"], out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as e:
        log.error("I/O error: %s", e)
        return EXIT_IO
    except TagiError as e:
        log.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
