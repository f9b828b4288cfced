"""Command line for the exporter: dataset/checkpoint utilities, export,
assembly checks, and distillation."""

import argparse
import json
import sys

import numpy as np
import torch

from . import distill as distill_mod
from . import models
from .assemble import MissingFactorError, assemble_model
from .export import export_checkpoint, read_mapping


def cmd_make_dataset(args):
    distill_mod.make_dataset(args.out, samples=args.samples, classes=args.classes,
                             channels=args.channels, size=args.size, seed=args.seed)
    print(f"dataset written to {args.out}")
    return 0


def cmd_init_model(args):
    torch.manual_seed(args.seed)
    model = models.build(args.arch)
    if args.dataset and args.epochs > 0:
        dataset = distill_mod.load_dataset(args.dataset)
        optimizer = torch.optim.SGD(model.parameters(), lr=args.lr, momentum=0.9,
                                    nesterov=True)
        criterion = torch.nn.CrossEntropyLoss()
        loader = torch.utils.data.DataLoader(dataset, batch_size=64, shuffle=True,
                                             generator=torch.Generator().manual_seed(args.seed))
        for _ in range(args.epochs):
            for x, y in loader:
                optimizer.zero_grad()
                criterion(model(x), y).backward()
                optimizer.step()
        print(f"trained accuracy: {distill_mod.accuracy(model, dataset):.4f}")
    torch.save(model.state_dict(), args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_export(args):
    _, mapping, skipped = export_checkpoint(args.checkpoint, args.arch, args.out,
                                            args.mapping)
    for path, reason in skipped:
        print(f"warning: skipped {path}: {reason}", file=sys.stderr)
    print(f"exported {len(mapping['layers'])} conv layers to {args.out}")
    print(f"mapping written to {args.mapping}")
    return 0


def cmd_check(args):
    model = models.build(args.arch)
    state = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    student = models.build(args.arch)
    student.load_state_dict(state)
    assemble_model(student, args.compressed, read_mapping(args.mapping))
    student.eval()
    c, h, w = (int(p) for p in args.input_size.lower().split("x"))
    gen = torch.Generator().manual_seed(args.seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(args.trials):
            x = torch.randn(2, c, h, w, generator=gen)
            ref = model(x)
            got = student(x)
            dev = (got - ref).norm().item() / max(ref.norm().item(), 1e-30)
            worst = max(worst, dev)
    print(json.dumps({"trials": args.trials, "max_rel_dev": worst}, indent=2))
    return 0 if worst <= args.tolerance else 3


def cmd_distill(args):
    teacher = models.build(args.arch)
    state = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
    teacher.load_state_dict(state)
    teacher.eval()
    student = models.build(args.arch)
    student.load_state_dict(state)
    if args.compressed:
        assemble_model(student, args.compressed, read_mapping(args.mapping))
    log = distill_mod.finetune_distill(student, teacher, args.dataset,
                                       epochs=args.epochs, lr=args.lr,
                                       seed=args.seed)
    for row in log:
        print(f"epoch {row['epoch']}: distill loss {row['distill_loss']:.6f} "
              f"accuracy {row['student_accuracy']:.4f}")
    if args.out:
        torch.save(student.state_dict(), args.out)
        print(f"recovered model written to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="otar-exporter",
        description="Bridge torch checkpoints to .otar archives and back")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("init-model", help="create (optionally train) a checkpoint")
    p.add_argument("--arch", default="toycnn", choices=sorted(models.ARCHITECTURES))
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--epochs", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("export", help="write conv weights to a .otar archive")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", default="toycnn", choices=sorted(models.ARCHITECTURES))
    p.add_argument("--out", required=True)
    p.add_argument("--mapping", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("check", help="compare original vs assembled outputs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", default="toycnn", choices=sorted(models.ARCHITECTURES))
    p.add_argument("--compressed", required=True)
    p.add_argument("--mapping", required=True)
    p.add_argument("--input-size", default="3x16x16")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("distill", help="teacher-student fine-tuning (toy scale)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", default="toycnn", choices=sorted(models.ARCHITECTURES))
    p.add_argument("--compressed", default=None)
    p.add_argument("--mapping", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_distill)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except (MissingFactorError, distill_mod.DatasetMissingError, ValueError) as exc:
        print(f"otar-exporter: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"otar-exporter: I/O error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
