"""One traced pass over the evaluation corpus, shared by the final-layer experiments.

Every per-token quantity the routing experiments need is collected in a single
forward per sequence: firing bits, the exception neuron's activation, next-token
probabilities with and without the MLP, NLL under each tier ablation, and BOS
attention for one head. Ablated variants are recomputed from the traced
pre-MLP residual via ``resume_from_mlp``, which runs the model's own code path.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..decomposition import EXCEPTION_NEURON, TierPartition
from ..model import AblationSpec, ModelWeights, TraceRequest, forward, log_softmax, resume_from_mlp, unembed
from ..stats import FiringMatrix, TOKEN_META_DTYPE, firing_bits

log = logging.getLogger(__name__)

ABLATIONS = ("core", "differentiators", "specialists", "all")
BOS_HEAD = 7


def tier_ablations(partition: TierPartition, layer: int) -> dict[str, AblationSpec]:
    sets = {"core": partition.core, "differentiators": partition.differentiators,
            "specialists": partition.specialists, "all": partition.exception_handler}
    return {k: AblationSpec(zero_neurons={layer: tuple(v)}) for k, v in sets.items()}


@dataclass
class SequenceRecord:
    tokens: np.ndarray
    bits: np.ndarray  # T x d_mlp at theta
    h_exception: np.ndarray  # T, GELU output of the exception neuron
    h_routing: np.ndarray  # T x 27, GELU outputs of the named neurons
    p_full: np.ndarray  # T-1, P(true next token)
    p_zeroed: np.ndarray  # T-1, same with the layer's MLP removed
    p_pre_top1: np.ndarray  # T-1, max prob of the MLP-removed distribution
    nll: dict[str, np.ndarray]  # "baseline" and each tier ablation, T-1 each
    bos_mass: np.ndarray  # T
    mlp_out_sum_hi: np.ndarray  # d_model, sum of MLP outputs at consensus >= 6
    n_hi: int


def _process(tokens, weights: ModelWeights, layer: int, theta: float, partition: TierPartition,
             ablations: dict[str, AblationSpec]) -> SequenceRecord:
    tokens = np.asarray(tokens, dtype=np.int64)
    has_head = BOS_HEAD < weights.config.n_head
    request = TraceRequest(resid_pre_mlp=frozenset({layer}), mlp=frozenset({layer}),
                           attention=frozenset({(layer, BOS_HEAD)}) if has_head else frozenset())
    logits, trace = forward(tokens, weights, request=request)
    resid_mid = trace.resid_pre_mlp[layer]
    h = trace.mlp_post[layer]
    nxt = tokens[1:]
    rows = np.arange(len(nxt))

    lp_full = log_softmax(logits[:-1].astype(np.float64))
    if layer == weights.config.n_layer - 1:
        zeroed_logits = unembed(resid_mid, weights)
    else:
        zeroed_logits = resume_from_mlp(resid_mid, layer, weights, AblationSpec(zero_mlp={layer}))
    lp_zero = log_softmax(zeroed_logits[:-1].astype(np.float64))
    nll = {"baseline": -lp_full[rows, nxt]}
    for name, spec in ablations.items():
        lp = log_softmax(resume_from_mlp(resid_mid, layer, weights, spec)[:-1].astype(np.float64))
        nll[name] = -lp[rows, nxt]

    bits = firing_bits(h, theta)
    consensus = bits[:, list(partition.consensus)].sum(axis=1)
    hi = consensus >= 6
    block = weights.blocks[layer]
    mlp_hi = (h[hi] @ block.w_proj + block.b_proj).astype(np.float64).sum(axis=0)
    return SequenceRecord(
        tokens=tokens,
        bits=bits,
        h_exception=h[:, EXCEPTION_NEURON].copy(),
        h_routing=h[:, list(partition.routing)].copy(),
        p_full=np.exp(lp_full[rows, nxt]),
        p_zeroed=np.exp(lp_zero[rows, nxt]),
        p_pre_top1=np.exp(lp_zero.max(axis=1)),
        nll=nll,
        bos_mass=trace.attention[(layer, BOS_HEAD)][:, 0].copy() if has_head else np.full(len(tokens), np.nan),
        mlp_out_sum_hi=mlp_hi,
        n_hi=int(hi.sum()),
    )


@dataclass
class CorpusPass:
    """Concatenated per-token arrays; ``predicted`` marks rows with a next token."""

    layer: int
    theta: float
    matrix: FiringMatrix
    h_exception: np.ndarray
    h_routing: np.ndarray  # columns follow TierPartition.routing
    seq_id: np.ndarray
    predicted: np.ndarray
    p_full: np.ndarray  # aligned with rows; nan where not predicted
    p_zeroed: np.ndarray
    p_pre_top1: np.ndarray
    nll: dict[str, np.ndarray] = field(default_factory=dict)
    bos_mass: np.ndarray | None = None
    mean_mlp_out_hi: np.ndarray | None = None

    @property
    def n_sequences(self) -> int:
        return int(self.seq_id.max()) + 1 if len(self.seq_id) else 0


def _pad(values: np.ndarray) -> np.ndarray:
    return np.concatenate([values, [np.nan]])


def corpus_pass(sequences, weights: ModelWeights, layer: int = 11, theta: float = 0.1,
                partition: TierPartition | None = None, workers: int = 1) -> CorpusPass:
    partition = partition or TierPartition(d_mlp=weights.config.d_mlp)
    ablations = tier_ablations(partition, layer)

    def job(seq):
        return _process(seq, weights, layer, theta, partition, ablations)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            records = list(ex.map(job, sequences))
    else:
        records = [job(s) for s in sequences]
    log.info("corpus pass: %d sequences at layer %d", len(records), layer)

    meta = []
    for s, r in enumerate(records):
        m = np.zeros(len(r.tokens), TOKEN_META_DTYPE)
        m["sequence"] = s
        m["position"] = np.arange(len(r.tokens))
        m["token"] = r.tokens
        meta.append(m)
    meta = np.concatenate(meta)
    matrix = FiringMatrix(np.concatenate([r.bits for r in records]), float(theta), meta)
    n_hi = sum(r.n_hi for r in records)
    mean_hi = sum(r.mlp_out_sum_hi for r in records) / n_hi if n_hi else None
    return CorpusPass(
        layer=layer,
        theta=theta,
        matrix=matrix,
        h_exception=np.concatenate([r.h_exception for r in records]),
        h_routing=np.concatenate([r.h_routing for r in records]),
        seq_id=meta["sequence"].astype(np.int64),
        predicted=np.concatenate([np.r_[np.ones(len(r.tokens) - 1, bool), False] for r in records]),
        p_full=np.concatenate([_pad(r.p_full) for r in records]),
        p_zeroed=np.concatenate([_pad(r.p_zeroed) for r in records]),
        p_pre_top1=np.concatenate([_pad(r.p_pre_top1) for r in records]),
        nll={k: np.concatenate([_pad(r.nll[k]) for r in records]) for k in records[0].nll},
        bos_mass=np.concatenate([r.bos_mass for r in records]),
        mean_mlp_out_hi=mean_hi,
    )
