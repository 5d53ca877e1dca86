"""Command-line entry point: ``sepipe <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, craft
from .data import LABELS, gen_synthetic_dataset, load_dataset
from .enhance import EnhanceConfig, enhance
from .errors import ConfigError, DataError, SepipeError
from .evaluate import Pipeline, evaluate, rate_of_reduction
from .experiment import (MODEL_ALIASES, clean_accuracy, load_defended, model_tag, read_config, split_config,
                         train_model)
from .image import Image, read_image, write_image
from .models import load_checkpoint, save_checkpoint
from .segment import apply_mask_real, heuristic_segment, read_mask
from .sweep import SweepGrid, standard_grid, sweep

log = logging.getLogger("sepipe")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
OPTION_ALIASES = {"crop": "crop_resize"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_attack_args(p, required=True):
    p.add_argument("--kind", choices=("fgsm", "pgd"), required=required, default="fgsm")
    p.add_argument("--eps", type=float, required=required, default=0.001)
    p.add_argument("--alpha", type=float, default=2 / 255)
    p.add_argument("--iters", type=int, default=7)
    p.add_argument("--threat-mode", choices=("direct", "bpda_identity", "transfer"), default="bpda_identity")


def build_parser():
    parser = _Parser(prog="sepipe", description="Segmentation + enhancement defenses against FGSM/PGD.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a classifier, optionally behind a preprocessing pipeline")
    p.add_argument("--model", choices=("cnn", "vit"), required=True)
    p.add_argument("--config", help="flat JSON of model, training and pipeline keys")
    p.add_argument("--data", required=True, help="manifest.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="train/test split seed")
    p.add_argument("--init", help="warm-start from this checkpoint")

    p = sub.add_parser("enhance", help="enhance one image")
    p.add_argument("--option", choices=("clahe", "um", "hfe", "crop", "none"), required=True)
    p.add_argument("--blur", choices=("gaussian", "median", "maximum", "minimum"), default="gaussian")
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--amount", type=float, default=2.0)
    p.add_argument("--cutoff", type=float, default=10.0)
    p.add_argument("--clip", type=float, default=8.0)
    p.add_argument("--margin", type=int, default=2)
    p.add_argument("--segment", action="store_true", help="mask to the lung field first")
    p.add_argument("--mask", help="mask PGM; heuristic segmentation when omitted")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("attack", help="craft an adversarial image")
    _add_attack_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--label", required=True, help="A/B (or normal/pneumonia, 0/1)")
    p.add_argument("--out", required=True, help=".npy keeps the float result; image formats quantize")
    p.add_argument("--pipeline", help="JSON pipeline for bpda_identity")
    p.add_argument("--base", help="base checkpoint for the transfer threat mode")

    p = sub.add_parser("evaluate", help="rate-of-reduction evaluation on the test split")
    _add_attack_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pipeline", help="JSON pipeline; defaults to the one stored in the checkpoint")
    p.add_argument("--base", help="undefended checkpoint; adds rate_of_reduction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("interpreted", "literal"), default="interpreted")
    p.add_argument("--shared-filter", action="store_true", help="filter both models on the base model's successes")

    p = sub.add_parser("sweep", help="full grid of enhancement x segmentation x attack")
    p.add_argument("--base", action="append", required=True, help="base checkpoint (repeatable)")
    p.add_argument("--defended-dir", required=True)
    p.add_argument("--grid", nargs="+", default=["paper"], help="'paper' or 'custom FILE'")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="manifest; defaults to the one recorded in the base checkpoint")
    p.add_argument("--seed", type=int, help="split seed; defaults to the recorded one")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mode", choices=("interpreted", "literal"), default="interpreted")
    return parser


def _label(text):
    key = text.strip().lower()
    if key in ("0", "1"):
        return int(key)
    if key not in LABELS:
        raise ConfigError(f"label must be A/B, normal/pneumonia or 0/1, got {text!r}")
    return LABELS[key]


def _attack_cfg(args):
    return AttackConfig(args.kind, args.eps, args.alpha, args.iters, args.threat_mode)


def _pipeline(path, model=None):
    if path is not None:
        return Pipeline.from_dict(read_config(path))
    if model is not None and "pipeline" in model.meta:
        return Pipeline.from_dict(model.meta["pipeline"])
    return Pipeline()


def cmd_gen_data(args):
    recs = gen_synthetic_dataset(args.n, args.size, args.seed, args.out)
    print(f"wrote {len(recs)} images to {args.out}")


def cmd_train(args):
    flat = read_config(args.config)
    flat.setdefault("kind", args.model)
    if MODEL_ALIASES.get(flat["kind"]) != MODEL_ALIASES[args.model]:
        raise ConfigError(f"--model {args.model} conflicts with config kind {flat['kind']!r}")
    model_cfg, train_cfg, pipeline = split_config(flat)
    train_set, test_set = load_dataset(args.data, args.seed)
    init = load_checkpoint(args.init) if args.init else None
    model = train_model(train_set, model_cfg, train_cfg, pipeline, init=init,
                        progress=lambda h: log.info("epoch %(epoch)d loss %(train_loss).4f val %(val_accuracy).4f", h))
    acc = clean_accuracy(model, test_set, pipeline)
    model.meta.update({"data": str(Path(args.data).resolve()), "data_seed": args.seed, "test_accuracy": acc})
    save_checkpoint(args.out, model)
    print(json.dumps({"checkpoint": args.out, "pipeline": pipeline.tag, "test_accuracy": acc}))


def cmd_enhance(args):
    img = read_image(args.inp)
    x = img.to_real()
    if args.segment:
        mask = read_mask(args.mask) if args.mask else heuristic_segment(img)
        x = apply_mask_real(x, mask)
    cfg = EnhanceConfig(OPTION_ALIASES.get(args.option, args.option), clip=args.clip, blur=args.blur,
                        radius=args.radius, amount=args.amount, cutoff=args.cutoff, margin=args.margin)
    write_image(args.out, enhance(Image.from_real(x), cfg))


def cmd_attack(args):
    model = load_checkpoint(args.model)
    x = read_image(args.inp).to_real()
    label = _label(args.label)
    cfg = _attack_cfg(args)
    if cfg.threat_mode == "transfer":
        if not args.base:
            raise ConfigError("threat mode transfer needs --base")
        adv = craft(load_checkpoint(args.base), x, label, cfg)
    elif cfg.threat_mode == "bpda_identity":
        pipe = _pipeline(args.pipeline, model)
        pre = None if pipe.is_identity else (lambda xb: pipe.apply_batch(xb))
        adv = craft(model, x, label, cfg, preprocess=pre)
    else:
        adv = craft(model, x, label, cfg)
    if args.out.endswith(".npy"):
        np.save(args.out, adv)
    else:
        write_image(args.out, Image.from_real(adv))
    print(json.dumps({"linf": float(np.max(np.abs(adv - x)))}))


def cmd_evaluate(args):
    model = load_checkpoint(args.model)
    pipe = _pipeline(args.pipeline, model)
    _, test_set = load_dataset(args.data, args.seed)
    cfg = _attack_cfg(args)
    base = load_checkpoint(args.base) if args.base else None
    out = {}
    keep = None
    if base is not None:
        base_records, base_rep = evaluate(base, test_set, cfg, Pipeline(), model_tag=model_tag(base), mode=args.mode)
        if args.shared_filter:
            keep = [r.example_id for r in base_records if r.attack_successful]
        out["base"] = _report_dict(base_rep)
    _, rep = evaluate(model, test_set, cfg, pipe, base_model=base, model_tag=model_tag(model),
                      mode=args.mode, keep_ids=keep)
    out["defended" if base is not None else "report"] = _report_dict(rep)
    if base is not None:
        rate = rate_of_reduction(base_rep, rep)
        out["rate_of_reduction_pct"] = None if rate is None else 100 * rate
    print(json.dumps(out, indent=2, sort_keys=True))


def _report_dict(rep):
    return {"model": rep.model_tag, "attack": rep.attack.to_dict(), "pipeline": rep.pipeline.tag,
            "n_total": rep.n_total, "n_filtered": rep.n_filtered, "mean_clean_conf": rep.mean_clean_conf,
            "mean_adv_conf": rep.mean_adv_conf, "diff": rep.diff, "clean_accuracy": rep.clean_accuracy}


def _grid(tokens):
    if tokens == ["paper"]:
        return standard_grid()
    if len(tokens) == 2 and tokens[0] == "custom":
        return SweepGrid.from_file(tokens[1])
    if len(tokens) == 1 and tokens[0] != "custom":
        return SweepGrid.from_file(tokens[0])
    raise ConfigError(f"--grid expects 'paper' or 'custom FILE', got {' '.join(tokens)!r}")


def cmd_sweep(args):
    grid = _grid(args.grid)
    bases = {}
    for path in args.base:
        m = load_checkpoint(path)
        bases[model_tag(m)] = m
    first = next(iter(bases.values()))
    data = args.data or first.meta.get("data")
    if data is None:
        raise ConfigError("no --data given and the base checkpoint does not record its manifest")
    seed = args.seed if args.seed is not None else first.meta.get("data_seed", 0)
    _, test_set = load_dataset(data, seed)
    defended = load_defended(args.defended_dir, set(bases))
    rows = sweep(bases, defended, test_set, grid, args.out, workers=args.workers, mode=args.mode)
    errors = sum(1 for r in rows if r.error)
    print(f"{len(rows)} rows written to {Path(args.out) / 'report.csv'} ({errors} with errors)")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "enhance": cmd_enhance, "attack": cmd_attack,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SepipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
