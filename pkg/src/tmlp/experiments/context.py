from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from ..decomposition import ROUTING_LAYER, TierPartition
from ..lens import TunedLensConfig
from ..model import ModelWeights
from .corpus import CorpusPass, corpus_pass

CONTROL_THETAS = (0.01, 0.05, 0.1, 0.25, 0.5, 1.0)


def bundled(name: str) -> Path:
    return Path(str(resources.files("tmlp") / "data" / name))


@dataclass(frozen=True)
class Settings:
    theta: float = 0.1
    exception_threshold: float = 1.0
    resamples: int = 10_000
    seed: int = 42
    bin_width: float = 0.05
    ig_steps: int = 20
    workers: int = 1
    survey_tokens: int = 102_400
    random_init_seed: int = 0
    control_thetas: tuple[float, ...] = CONTROL_THETAS
    reconstruct_tokens: int = 10_000
    lens: TunedLensConfig = field(default_factory=TunedLensConfig)
    knowledge_prompts: Path = field(default_factory=lambda: bundled("knowledge_table5.tsv"))
    kn_prompts: Path = field(default_factory=lambda: bundled("kn_prompts.tsv"))
    transplant_pairs: Path = field(default_factory=lambda: bundled("transplant_pairs.tsv"))
    garden_path_pairs: Path = field(default_factory=lambda: bundled("garden_path_pairs.tsv"))


class Context:
    """Inputs shared by every experiment in a run, with lazily computed corpus passes."""

    def __init__(self, weights: ModelWeights, sequences, settings: Settings | None = None, vocab=None,
                 lens_sequences=(), partition: TierPartition | None = None, snapshot: dict | None = None):
        self.weights = weights
        self.sequences = [np.asarray(s, dtype=np.int64) for s in sequences]
        self.settings = settings or Settings()
        self.vocab = vocab
        self.lens_sequences = [np.asarray(s, dtype=np.int64) for s in lens_sequences]
        self.partition = partition or TierPartition(d_mlp=weights.config.d_mlp)
        self.snapshot = dict(snapshot or {})

    @property
    def layer(self) -> int:
        return min(ROUTING_LAYER, self.weights.config.n_layer - 1)

    @cached_property
    def l11(self) -> CorpusPass:
        return corpus_pass(self.sequences, self.weights, self.layer, self.settings.theta,
                           self.partition, self.settings.workers)

    def require_vocab(self):
        if self.vocab is None:
            raise ValueError("this experiment needs a tokenizer vocabulary")
        return self.vocab
