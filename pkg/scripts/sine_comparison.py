"""Run TinyMetaFed, TinyReptile and FedSGD on the sine defaults and compare.

    python scripts/sine_comparison.py --out runs/sine --seeds 0 1 2 3 4
    python scripts/sine_comparison.py --out runs/quick --rounds 1000 --seeds 0
"""

import argparse
import sys
from pathlib import Path

from tinymetafed.harness import compare, format_summary, resolve_config, run_experiment

ALGORITHMS = ("tinymetafed", "tinyreptile", "fedsgd")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", default="sine")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--rounds", type=int)
    p.add_argument("--algorithms", nargs="+", default=list(ALGORITHMS))
    args = p.parse_args(argv)

    base = resolve_config(args.config)
    if args.rounds is not None:
        base = base.replace(rounds=args.rounds)
    for seed in args.seeds:
        dirs = []
        for algorithm in args.algorithms:
            out = args.out / f"seed{seed}" / algorithm
            print(f"seed {seed}: {algorithm} -> {out}", flush=True)
            status = run_experiment(base.replace(algorithm=algorithm, seed=seed), out)
            if status:
                return status
            dirs.append(out)
        print(format_summary(compare(dirs, args.out / f"seed{seed}" / "compare")))
    return 0


if __name__ == "__main__":
    sys.exit(main())
