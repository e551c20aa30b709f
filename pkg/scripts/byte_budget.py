"""Per-round byte accounting of each algorithm for one or more configs.

    python scripts/byte_budget.py sine synthetic_class
    python scripts/byte_budget.py sine --top-p 10 25 50
"""

import argparse

from tinymetafed.protocol import dense_size, sparse_size
from tinymetafed.harness import resolve_config
from tinymetafed.sparse import selection_size


def budget(cfg):
    spec = cfg.network()
    part = cfg.partition_for(spec)
    n, g = spec.param_count, part.global_count
    down, up = dense_size(g), sparse_size(selection_size(cfg.top_p, g))
    full = 2 * dense_size(n)
    return n, g, down, up, full


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("configs", nargs="+")
    p.add_argument("--top-p", type=float, nargs="*")
    args = p.parse_args(argv)
    print(f"{'config':<18} {'P':>5} {'params':>7} {'global':>7} {'down':>7} {'up':>7} {'TinyReptile':>12} {'ratio':>7}")
    for ref in args.configs:
        cfg = resolve_config(ref)
        for P in args.top_p or [cfg.top_p]:
            n, g, down, up, full = budget(cfg.replace(top_p=P))
            print(f"{ref:<18} {P:>5g} {n:>7} {g:>7} {down:>7} {up:>7} {full:>12} {(down + up) / full:>7.3f}")


if __name__ == "__main__":
    main()
