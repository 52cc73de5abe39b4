"""Run every experiment command in order against one output directory.

    python3 scripts/run_all.py --out results [--config cfg.json] [--seed 0]
"""

import argparse
import sys

from l1transfer import cli

COMMANDS = ("learn", "transfer", "matrix", "repeat", "diff-ref", "relative-degree")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--skip", nargs="*", default=[], choices=COMMANDS)
    args = ap.parse_args()
    common = ["--out", args.out]
    if args.config:
        common += ["--config", args.config]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    for cmd in COMMANDS:
        if cmd in args.skip:
            continue
        code = cli.main(common + [cmd])
        if code:
            print(f"{cmd} failed with exit code {code}", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
