"""Fit one LoRA teacher on a single task and report held-in token accuracy."""

import argparse
import json
import sys
import time

from tagi.checkpoint import load_checkpoint
from tagi.config import load_config
from tagi.pipeline import build_model
from tagi.tasks import build_suite
from tagi.training import EncodedTask, teacher_token_accuracy, train_teacher


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", help="JSON run config (defaults if omitted)")
    p.add_argument("--task", default="copy")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, help="override train.teacher_lr")
    p.add_argument("--backbone", help="pretrain.ckpt to start from (default: seeded init)")
    args = p.parse_args()
    cfg = load_config(args.config)
    if args.lr is not None:
        cfg.train.teacher_lr = args.lr
    model = build_model(cfg)
    if args.backbone:
        tensors, _ = load_checkpoint(args.backbone)
        model.load_state_dict(tensors)
    enc = EncodedTask.build(build_suite(cfg.suite.seed, n_train_instances=cfg.suite.n_train_instances)
                            .get(args.task), cfg.suite.mode)
    t0 = time.perf_counter()
    res = train_teacher(model, enc, cfg.train, steps=args.steps)
    secs = time.perf_counter() - t0
    acc = teacher_token_accuracy(model, enc, res.adapters, list(range(len(enc.targets))))
    print(json.dumps({"task": args.task, "steps": args.steps, "lr": cfg.train.teacher_lr,
                      "final_loss": res.final_loss, "token_accuracy": acc, "seconds": secs}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
