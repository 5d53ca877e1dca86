"""Desk-scale end-to-end run (data -> base + defended models -> sweep).

Trained checkpoints are cached under ROOT, keyed by their configs, so a
second invocation only repeats the sweep.

    python3 scripts/run_e2e.py --root e2e_out --workers 1
"""

import argparse
import logging

from sepipe.e2e import E2EConfig, run
from sepipe.sweep import directional_summary


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="e2e_out")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--sweep-dir", default="sweep")
    ap.add_argument("--n", type=int, default=600)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    out = run(E2EConfig(n=args.n, size=args.size, data_seed=args.seed), args.root, args.workers, args.sweep_dir)
    for tag, s in out["bases"].items():
        print(f"{tag}: test acc {s['test_accuracy']:.3f}, train {s['train_cpu_seconds']:.0f}s CPU, "
              f"FGSM(0.05) confidence drop {s['fgsm_confidence_drop']:.3f}")
    rows = out["rows"]
    print(f"{len(rows)} sweep rows, {sum(1 for r in rows if r.error)} errors -> {out['sweep_dir']}")
    print("directional check:", directional_summary(rows))


if __name__ == "__main__":
    main()
