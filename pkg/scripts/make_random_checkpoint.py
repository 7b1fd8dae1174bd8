"""Write a seeded random-init GPT-2 checkpoint (safetensors) for smoke runs.

    python scripts/make_random_checkpoint.py out.safetensors --seed 0
    python scripts/make_random_checkpoint.py tiny.safetensors --d-model 64 --n-head 4

Narrow models keep the 12 layers, the 3,072-wide MLP and the full vocabulary so
that neuron indices and tokenization match GPT-2 Small.
"""

import argparse
import dataclasses

from tmlp.model import GPT2_SMALL, random_init, save_weights


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-model", type=int, default=GPT2_SMALL.d_model)
    p.add_argument("--n-head", type=int, default=GPT2_SMALL.n_head)
    p.add_argument("--n-ctx", type=int, default=GPT2_SMALL.n_ctx)
    args = p.parse_args()
    cfg = dataclasses.replace(GPT2_SMALL, d_model=args.d_model, n_head=args.n_head, n_ctx=args.n_ctx)
    save_weights(random_init(args.seed, cfg), args.out)
    print(f"wrote {args.out}: {cfg}")


if __name__ == "__main__":
    main()
