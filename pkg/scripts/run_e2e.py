"""Three-seed end-to-end run plus ablation rows; writes runs/acceptance/summary_<key>.json."""

import argparse
import json
import logging
import sys

from tagi.e2e import load_summary, run_all, summary_path


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", default="runs/acceptance")
    p.add_argument("--no-ablations", action="store_true")
    p.add_argument("--force", action="store_true", help="rerun even if a summary exists")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s",
                        stream=sys.stderr)
    summary = None if args.force else load_summary(args.root)
    if summary is None:
        summary = run_all(args.root, with_ablations=not args.no_ablations)
    print(summary_path(args.root))
    for s in summary["seeds"]:
        print(f"seed {s['seed']}: EM generated {s['generated']['exact_match']:.4f} "
              f"zero {s['zero']['exact_match']:.4f}")
    for r in summary["ablations"]:
        print(f"{r['row']:<16} EM {r['generated']['exact_match']:.4f} "
              f"ROUGE-L {r['generated']['rouge_l']:.4f}")
    print(json.dumps({"main_seconds": summary["main_seconds"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
