"""Command transport: `python3 -m ti_worker <workdir>`."""

import argparse
import sys

from .inversion import run_job


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ti_worker",
        description="Train one style token from the reference scenes in a job workdir.",
    )
    parser.add_argument("workdir", help="job directory holding style.json and refs/")
    args = parser.parse_args(argv)
    return run_job(args.workdir)


if __name__ == "__main__":
    sys.exit(main())
