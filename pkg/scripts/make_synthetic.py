"""Write a synthetic emotion dataset, embeddings and mock backends to a run directory."""

from __future__ import annotations

import argparse

from promptgrid.synthetic import write_synthetic


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--n-train", type=int, default=60)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument(
        "--fail-on",
        metavar="STRATEGY=TEXT",
        action="append",
        default=[],
        help="make STRATEGY's backend raise on prompts containing TEXT",
    )
    args = ap.parse_args()
    fail_on = dict(item.split("=", 1) for item in args.fail_on)
    path = write_synthetic(
        args.out_dir, n_train=args.n_train, n_test=args.n_test, seed=args.seed, fail_on=fail_on or None
    )
    print(path)


if __name__ == "__main__":
    main()
