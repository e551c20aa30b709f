"""Plot evaluation loss against rounds and against cumulative bytes.

Needs matplotlib (``pip install -e .[plot]``).

    python scripts/plot_curves.py runs/sine/seed0/* --out sine_seed0.png
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from tinymetafed.harness import load_run


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=Path("curves.png"))
    args = p.parse_args(argv)

    fig, (by_round, by_bytes) = plt.subplots(1, 2, figsize=(11, 4))
    for path in args.runs:
        if not (path / "evals.csv").exists():
            continue
        run = load_run(path)
        label = f"{run.config.algorithm} ({path.name})"
        by_round.plot(run.eval_rounds, run.eval_loss, label=label)
        by_round.fill_between(run.eval_rounds, run.eval_loss - run.eval_std, run.eval_loss + run.eval_std, alpha=0.15)
        by_bytes.plot(run.eval_bytes / 1e6, run.eval_loss, label=label)
    by_round.set_xlabel("round")
    by_bytes.set_xlabel("cumulative MB exchanged")
    for ax in (by_round, by_bytes):
        ax.set_ylabel("loss after fine-tuning")
        ax.set_yscale("log")
        ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
