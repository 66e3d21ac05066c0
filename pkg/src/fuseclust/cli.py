"""Command-line front end: train, eval, export-attention, cost, gen-synth,
check-grad."""

import argparse
import os
import sys

from . import runner
from .pipeline import gen_confusable, gen_synthetic, load_dataset, save_dataset


def _add_common(p):
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")


def _load_cfg(args):
    cfg = runner.load_config(args.config) if args.config \
        else runner.TrainConfig()
    for item in args.set or []:
        cfg = runner.parse_config(cfg.serialize() + item + "\n")
    if args.seed is not None:
        cfg = runner.parse_config(cfg.serialize() + f"seed={args.seed}\n")
    return cfg


def cmd_train(args):
    cfg = _load_cfg(args)
    data = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    ckpt, log = runner.train(cfg, data,
                             log_file=os.path.join(args.out, "log.jsonl"))
    runner.save_checkpoint(os.path.join(args.out, "checkpoint.mfck"), ckpt)
    with open(os.path.join(args.out, "config.txt"), "w") as f:
        f.write(cfg.serialize())
    print(f"best epoch {ckpt.epoch}  best loss {ckpt.best_loss:.6f}  "
          f"({len(log)} epochs run)")
    return 0


def cmd_eval(args):
    data = load_dataset(args.data)
    report = runner.evaluate_checkpoint(args.checkpoint, data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.txt"), "w") as f:
        f.write(report.to_text())
    with open(os.path.join(args.out, "contingency.csv"), "w") as f:
        f.write(report.contingency_csv())
    model = runner.model_from_checkpoint(runner.load_checkpoint(args.checkpoint),
                                         data)
    preds = runner.predict(model, data)
    with open(os.path.join(args.out, "predictions.csv"), "w") as f:
        f.write("id,pred,label\n")
        for i, p in enumerate(preds):
            f.write(f"{data.ids[i]},{p},{data.labels[i]}\n")
    print(report.to_text(), end="")
    return 0


def cmd_export_attention(args):
    data = load_dataset(args.data)
    if not 0 <= args.index < len(data):
        print(f"index {args.index} out of range for {len(data)} images",
              file=sys.stderr)
        return 2
    model = runner.model_from_checkpoint(runner.load_checkpoint(args.checkpoint),
                                         data)
    paths = runner.export_attention(model, data.images[args.index], args.out,
                                    image_id=data.ids[args.index])
    for p in paths:
        print(p)
    return 0


def cmd_cost(args):
    cmp = runner.compare_schedules(args.stages, args.tokens, args.embed,
                                   args.batch, args.heads)
    print(cmp.to_text(), end="")
    return 0


def cmd_gen_synth(args):
    if args.confusable:
        data = gen_confusable(args.per_class, args.side, args.sigma, args.seed)
    else:
        data = gen_synthetic(args.classes, args.per_class, args.side,
                             args.sigma, args.seed)
    save_dataset(data, args.out)
    print(f"wrote {len(data)} images under {args.out}")
    return 0


def cmd_check_grad(args):
    report = runner.check_grad(fusion=args.fusion, seed=args.seed or 0)
    print(report.to_text(), end="")
    ok = report.max_rel <= args.tolerance
    print(f"{'PASS' if ok else 'FAIL'}: max relative error "
          f"{report.max_rel:.3e} vs tolerance {args.tolerance:.0e}")
    return 0 if ok else 1


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="fuseclust",
        description="dual-branch contrastive clustering with token-fusion "
                    "transformer stages")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on an image directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config field")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="cluster a labeled directory and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-attention",
                       help="write final-stage attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    _add_common(p)
    p.set_defaults(fn=cmd_export_attention)

    p = sub.add_parser("cost", help="print the attention cost/memory model")
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--tokens", type=int, default=198)
    p.add_argument("--embed", type=int, default=512)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--heads", type=int, default=8)
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("gen-synth", help="write a synthetic PPM dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=128)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--confusable", action="store_true",
                   help="two near-identical classes instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("check-grad",
                       help="finite-difference audit of every gradient")
    p.add_argument("--fusion", action="store_true",
                   help="include anchor-bank and feature-projection params")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_check_grad)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
