"""Desk-scale run of every experiment (50 x 1024 tokens).

    python scripts/run_desk.py --weights gpt2.safetensors --corpus wiki.test.raw --out results/desk

Equivalent to ``tmlp run --preset desk --experiments <all> ...``.
"""

import argparse
import sys

from tmlp.cli import main as cli_main
from tmlp.experiments import REGISTRY


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--weights", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default="results/desk")
    p.add_argument("--workers", default="1")
    p.add_argument("--skip", default="", help="comma-separated experiments to leave out")
    args = p.parse_args()
    skip = {s for s in args.skip.split(",") if s}
    names = ",".join(n for n in REGISTRY if n not in skip)
    return cli_main(["run", "--preset", "desk", "--weights-path", args.weights, "--corpus-path", args.corpus,
                     "--output-dir", args.out, "--workers", args.workers, "--experiments", names])


if __name__ == "__main__":
    sys.exit(main())
