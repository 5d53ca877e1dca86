"""Train (or refresh) the base models and every defended model of the standard sweep grid.

    python3 scripts/train_defended.py --root e2e_out --models cnn vit

Writes ROOT/models/*__base.ckpt and ROOT/defended/*.ckpt; the sweep CLI
then runs with ``--defended-dir ROOT/defended``.
"""

import argparse
import logging

from sepipe.e2e import E2EConfig, prepare_data, train_all


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="e2e_out")
    ap.add_argument("--models", nargs="+", choices=("cnn", "vit"), default=["cnn", "vit"])
    ap.add_argument("--n", type=int, default=600)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = E2EConfig(n=args.n, size=args.size, data_seed=args.seed)
    manifest = prepare_data(cfg, args.root)
    bases, defended = train_all(cfg, args.root, manifest, tags=tuple(args.models))
    print(f"{len(bases)} base and {len(defended)} defended checkpoints under {args.root}")


if __name__ == "__main__":
    main()
