"""Build a synthetic run, evaluate the full strategy grid against mock backends, print the table.

    python3 scripts/run_mock_matrix.py /tmp/grid --break-definition
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from promptgrid.harness import RunConfig, emit_report, render_table, run_matrix
from promptgrid.synthetic import write_synthetic


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument(
        "--break-definition",
        action="store_true",
        help="fail the definition x definition cell to exercise partial-failure reporting",
    )
    args = ap.parse_args()

    fail_on = {"definition": "Sentiment category definitions:"} if args.break_definition else None
    cfg_path = write_synthetic(args.out_dir, n_test=args.n_test, seed=args.seed, fail_on=fail_on)
    cfg = RunConfig.load(cfg_path)

    t0 = time.perf_counter()
    result = run_matrix(cfg)
    elapsed = time.perf_counter() - t0
    emit_report(result, cfg.output_dir)

    print(render_table(result), end="")
    print(
        f"{result.n_populated}/{len(result.cells)} cells in {elapsed:.2f}s -> {cfg.output_dir}",
        file=sys.stderr,
    )
    return result.exit_code()


if __name__ == "__main__":
    sys.exit(main())
