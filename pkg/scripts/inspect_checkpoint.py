"""List the tensors of a safetensors checkpoint and check it loads as GPT-2.

A Hugging Face ``gpt2`` ``model.safetensors`` loads directly: ``transformer.``
prefixes are stripped and the Conv1D (in, out) layout is what the engine uses.
Checkpoints saved with (out, in) linear layouts are transposed on load.

    python scripts/inspect_checkpoint.py model.safetensors
"""

import sys

from tmlp.model import load_weights, read_tensors


def main(path):
    tensors, meta = read_tensors(path)
    for name in sorted(tensors):
        print(f"{name:40s} {str(tensors[name].dtype):8s} {tensors[name].shape}")
    w = load_weights(path)
    print(f"loaded OK: {w.config}")


if __name__ == "__main__":
    main(sys.argv[1])
