"""Command-line entry point: ``codaseg <subcommand> ...``.

Exit codes: 0 success, 1 usage or I/O problem, 2 bad configuration,
3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import load_config
from .container import FormatError
from .metrics import (
    evaluate_split, export_embeddings, iou, miou_on, prototype_distance_diagnostic,
    write_distance_csv, write_iou_csv,
)
from .network import checkpoint_meta, load_checkpoint, save_checkpoint
from .synthgen import ConfigError, DomainPairDataset, generate_dataset
from .trainer import NumericError, pretrain_all, pretrain_source, selftrain

log = logging.getLogger("codaseg")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
ABLATIONS = ("no-contrast", "no-expand", "no-transfer", "no-pretrain")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def apply_ablations(cfg, ablations):
    """Translate ``--ablate`` switches into a training config."""
    for a in ablations:
        if a == "no-contrast":
            cfg = replace(cfg, alpha=0.0)
        elif a == "no-expand":
            cfg = replace(cfg, max_dist=-1.0)
        elif a == "no-transfer":
            cfg = replace(cfg, transfer=False)
        elif a == "no-pretrain":
            cfg = replace(cfg, contrast_pretrain=False)
    return cfg


def cmd_gen_data(args):
    rc = load_config(args.config)
    ds = generate_dataset(rc.scene.build(), args.seed, rc.data.n_source, rc.data.n_target)
    ds.save(args.out)
    print(f"wrote {rc.data.n_source} source / {rc.data.n_target} target images to {args.out}")


def _seed_for(args, ds):
    return args.seed if args.seed is not None else int(ds.manifest["seed"])


def cmd_pretrain(args):
    rc = load_config(args.config)
    ds = DomainPairDataset.load(args.data)
    cfg = rc.train_config(_seed_for(args, ds))
    params = pretrain_all(ds.adaptation_view(), cfg)
    save_checkpoint(params, args.out, {"stage": "pretrain", "seed": cfg.seed})
    print(f"saved pre-trained checkpoint to {args.out}")


def cmd_selftrain(args):
    rc = load_config(args.config)
    ds = DomainPairDataset.load(args.data)
    cfg = apply_ablations(rc.train_config(_seed_for(args, ds)), args.ablate)
    view = ds.adaptation_view()
    if {"no-transfer", "no-pretrain"} & set(args.ablate):
        # these switch off parts of the pre-training stage, so redo it here
        log.info("re-running pre-training for ablation %s", ",".join(args.ablate))
        params = pretrain_all(view, cfg) if cfg.contrast_pretrain else pretrain_source(view, cfg)
    else:
        params = load_checkpoint(args.init)
    if params.arch.num_classes != ds.num_classes:
        raise UsageError(f"checkpoint has {params.arch.num_classes} classes, data has {ds.num_classes}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        params, slog = selftrain(params, view, cfg, evaluate=lambda p: miou_on(p, ds))
    except NumericError as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "last_good", {"stage": "selftrain-aborted", "seed": cfg.seed})
        raise
    slog.write_csv(out / "metrics.csv")
    save_checkpoint(params, out, {"stage": "selftrain", "seed": cfg.seed,
                                  "ablate": ",".join(args.ablate) or "none"})
    print(f"saved self-trained checkpoint to {out} (final target mIoU {slog.rows[-1]['miou_tgt'] * 100:.2f})")


def cmd_eval(args):
    ds = DomainPairDataset.load(args.data)
    params = load_checkpoint(args.ckpt)
    conf = evaluate_split(params, ds, args.split)
    per_class, miou = iou(conf)
    write_iou_csv(conf, args.out)
    included = [k for k, v in enumerate(per_class) if v == v]
    log.info("mIoU over classes %s", included)
    print(f"{args.split} mIoU {miou * 100:.2f} over {len(included)} classes")


def cmd_diagnose(args):
    ds = DomainPairDataset.load(args.data)
    params = load_checkpoint(args.ckpt)
    dist, mean = prototype_distance_diagnostic(params, ds)
    write_distance_csv(dist, mean, args.out)
    out = Path(args.out)
    emb_path = out.with_name(out.stem + "_embeddings.csv")
    rows = export_embeddings(params, ds, args.samples_per_class, emb_path, args.seed)
    print(f"mean prototype distance {mean:.4f}; {rows} embeddings written to {emb_path}")


def build_parser():
    p = _Parser(prog="codaseg", description="Contrastive self-training for cross-domain segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic source/target benchmark")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    pt = sub.add_parser("pretrain", help="run the pre-training stage")
    pt.add_argument("--data", required=True)
    pt.add_argument("--config")
    pt.add_argument("--out", required=True)
    pt.add_argument("--seed", type=int, help="defaults to the dataset seed")
    pt.set_defaults(func=cmd_pretrain)

    st = sub.add_parser("selftrain", help="teacher/student self-training from a checkpoint")
    st.add_argument("--data", required=True)
    st.add_argument("--init", required=True)
    st.add_argument("--config")
    st.add_argument("--out", required=True)
    st.add_argument("--seed", type=int, help="defaults to the dataset seed")
    st.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    st.set_defaults(func=cmd_selftrain)

    ev = sub.add_parser("eval", help="per-class IoU and mIoU on a split")
    ev.add_argument("--data", required=True)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--split", choices=("source", "target"), default="target")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    dg = sub.add_parser("diagnose", help="cross-domain prototype distances and embedding export")
    dg.add_argument("--data", required=True)
    dg.add_argument("--ckpt", required=True)
    dg.add_argument("--out", required=True)
    dg.add_argument("--samples-per-class", type=int, default=100)
    dg.add_argument("--seed", type=int, default=0)
    dg.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, FileNotFoundError, FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
