"""GPT-2 Small inference and final-layer MLP routing analysis in numpy."""

from .model import GPT2_SMALL, AblationSpec, ModelConfig, ModelWeights, TraceRequest, forward, load_weights
from .tokenizer import decode, encode, load_vocab

__version__ = "0.1.0"

__all__ = ["GPT2_SMALL", "AblationSpec", "ModelConfig", "ModelWeights", "TraceRequest", "decode", "encode",
           "forward", "load_vocab", "load_weights"]
