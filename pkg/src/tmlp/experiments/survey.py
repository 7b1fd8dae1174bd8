"""Cross-layer search for exception-handler structure, and null-model / threshold controls.

The survey streams the slice three times so that only packed firing bits and
per-neuron histograms are held for every layer:

1. histogram every neuron's GELU output and record theta-firing bits;
2. for each bimodal neuron, tabulate its high-mode rate against the layer's
   own consensus count (the 7 highest-rate neurons) and pick the most
   anticorrelated one as the layer's exception candidate;
3. recompute the candidate's high-mode mask for co-firing and enrichment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .. import stats
from ..decomposition import EXCEPTION_NEURON
from ..model import ModelWeights, TraceRequest, forward, random_init
from ..stats import BimodalityError
from .context import Context
from .report import Column, ExperimentReport

log = logging.getLogger(__name__)

HIST_LO = -0.2  # GELU output is bounded below by about -0.17
HIST_HI = 20.0
N_PARTNERS = 30
N_CONSENSUS = 7
HI_JACCARD = 0.5


def survey_slice(sequences, n_tokens: int) -> list[np.ndarray]:
    out, left = [], n_tokens
    for s in sequences:
        if left <= 0:
            break
        out.append(np.asarray(s[:left]))
        left -= len(out[-1])
    return out


def _all_layers_h(seq, weights: ModelWeights) -> dict[int, np.ndarray]:
    layers = frozenset(range(weights.config.n_layer))
    _, trace = forward(seq, weights, request=TraceRequest(mlp=layers), compute_logits=False)
    return trace.mlp_post


@dataclass
class LayerCandidate:
    layer: int
    neuron: int | None
    threshold: float | None
    correlation: float | None
    spread: float | None
    n_bimodal: int


def _jaccard_with(bits: np.ndarray, col: np.ndarray) -> np.ndarray:
    inter = col.astype(np.float64) @ bits
    union = col.sum() + bits.sum(axis=0) - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _cofiring_row(bits: np.ndarray, neuron: int, regime: np.ndarray, partners=None, k: int = N_PARTNERS) -> dict:
    """Max Jaccard, hi-Jaccard count and max enrichment of ``neuron``'s co-firing partners."""
    j = _jaccard_with(bits, bits[:, neuron])
    j[neuron] = -1.0
    if partners is None:
        partners = np.lexsort((np.arange(len(j)), -j))[:k]
    partners = np.asarray(partners)
    base = bits[:, partners].mean(axis=0)
    if regime.any():
        cond = bits[regime][:, partners].mean(axis=0)
        enr = np.divide(cond, base, out=np.zeros_like(cond), where=base > 0)
        max_enr = float(enr.max())
    else:
        max_enr = float("nan")
    return {"max_jaccard": float(j[partners].max()), "hi_jaccard_pairs": int((j[partners] > HI_JACCARD).sum()),
            "max_enrichment": max_enr}


def cross_layer_survey(sequences, weights: ModelWeights, theta: float = 0.1, bin_width: float = 0.05,
                       exception_threshold: float = 1.0, partition=None, layers=None):
    """Per-layer auto-detected candidate rows plus the canonical final-layer row."""
    cfg = weights.config
    layers = list(range(cfg.n_layer)) if layers is None else list(layers)
    n_bins = int(round((HIST_HI - HIST_LO) / bin_width))
    edges = HIST_LO + bin_width * np.arange(n_bins + 1)
    hist = {L: np.zeros((cfg.d_mlp, n_bins), np.int64) for L in layers}
    packed = {L: [] for L in layers}
    offsets = np.arange(cfg.d_mlp)[None, :] * n_bins

    # pass 1
    for seq in sequences:
        hs = _all_layers_h(seq, weights)
        for L in layers:
            h = hs[L]
            b = np.clip(((h - HIST_LO) / bin_width).astype(np.int64), 0, n_bins - 1)
            hist[L] += np.bincount((b + offsets).ravel(), minlength=cfg.d_mlp * n_bins).reshape(cfg.d_mlp, n_bins)
            packed[L].append(np.packbits(stats.firing_bits(h, theta), axis=1, bitorder="little"))
    n_tok = sum(len(s) for s in sequences)

    def bits_of(L):
        return np.unpackbits(np.concatenate(packed[L]), axis=1, count=cfg.d_mlp, bitorder="little").astype(bool)

    thresholds, consensus_sets = {}, {}
    for L in layers:
        th = {}
        for n in range(cfg.d_mlp):
            if hist[L][n].sum() < 1000:
                continue
            try:
                th[n] = stats.histogram_threshold(hist[L][n], edges)
            except BimodalityError:
                pass
        thresholds[L] = th
        rates = bits_of(L).mean(axis=0)
        consensus_sets[L] = tuple(int(i) for i in np.lexsort((np.arange(len(rates)), -rates))[:N_CONSENSUS])

    # pass 2
    sums = {}
    for L in layers:
        cand = np.array(sorted(set(thresholds[L]) - set(consensus_sets[L])), dtype=np.int64)
        sums[L] = dict(cand=cand, thr=np.array([thresholds[L][n] for n in cand], np.float32),
                       by_level=np.zeros((N_CONSENSUS + 1, len(cand))), level_n=np.zeros(N_CONSENSUS + 1),
                       r=np.zeros(len(cand)), rc=np.zeros(len(cand)), c=0.0, cc=0.0)
    for seq in sequences:
        hs = _all_layers_h(seq, weights)
        for L in layers:
            s = sums[L]
            if not len(s["cand"]):
                continue
            h = hs[L]
            c = (np.abs(h[:, list(consensus_sets[L])]) > theta).sum(axis=1)
            r = (h[:, s["cand"]] > s["thr"]).astype(np.float64)
            onehot = np.eye(N_CONSENSUS + 1)[c]
            s["by_level"] += onehot.T @ r
            s["level_n"] += onehot.sum(axis=0)
            s["r"] += r.sum(axis=0)
            s["rc"] += c @ r
            s["c"] += c.sum()
            s["cc"] += (c * c).sum()

    chosen: dict[int, LayerCandidate] = {}
    for L in layers:
        s = sums[L]
        if not len(s["cand"]):
            chosen[L] = LayerCandidate(L, None, None, None, None, 0)
            continue
        mr, mc = s["r"] / n_tok, s["c"] / n_tok
        cov = s["rc"] / n_tok - mr * mc
        var_r = mr - mr * mr
        var_c = s["cc"] / n_tok - mc * mc
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = cov / np.sqrt(var_r * var_c)
        corr = np.where(np.isfinite(corr), corr, np.inf)
        i = int(np.argmin(corr))  # ties resolve to the lowest neuron index
        if not np.isfinite(corr[i]):
            chosen[L] = LayerCandidate(L, None, None, None, None, len(s["cand"]))
            continue
        present = s["level_n"] > 0
        by_level = s["by_level"][present, i] / s["level_n"][present]
        chosen[L] = LayerCandidate(L, int(s["cand"][i]), float(s["thr"][i]), float(corr[i]),
                                   float(by_level.max() - by_level.min()), len(s["cand"]))

    # pass 3
    masks = {L: [] for L in layers}
    for seq in sequences:
        hs = _all_layers_h(seq, weights)
        for L in layers:
            cand = chosen[L]
            if cand.neuron is not None:
                masks[L].append(hs[L][:, cand.neuron] > cand.threshold)

    rows = []
    for L in layers:
        cand = chosen[L]
        row = dict(layer=f"L{L}", mode="auto", candidate=cand.neuron, bimodal_neurons=cand.n_bimodal,
                   consensus_neurons=list(consensus_sets[L]))
        if cand.neuron is None:
            row["status"] = "absent: no bimodal neuron"
        else:
            bits = bits_of(L)
            regime = np.concatenate(masks[L])
            row.update(status="ok", threshold=cand.threshold, correlation=cand.correlation, spread=cand.spread,
                       exception_rate=float(regime.mean()),
                       **_cofiring_row(bits, cand.neuron, regime))
        rows.append(row)
        packed[L] = []

    if partition is not None and cfg.n_layer - 1 in layers:
        rows.append(_known_row(sequences, weights, theta, exception_threshold, partition))
    return rows


def _known_row(sequences, weights, theta, exception_threshold, partition) -> dict:
    L = weights.config.n_layer - 1
    bits, regime = [], []
    for seq in sequences:
        _, trace = forward(seq, weights, request=TraceRequest(mlp=frozenset({L})), compute_logits=False)
        h = trace.mlp_post[L]
        bits.append(stats.firing_bits(h, theta))
        regime.append(h[:, EXCEPTION_NEURON] > exception_threshold)
    bits, regime = np.concatenate(bits), np.concatenate(regime)
    partners = [n for n in partition.exception_handler if n != EXCEPTION_NEURON]
    row = dict(layer=f"L{L}", mode="known", candidate=EXCEPTION_NEURON, status="ok",
               threshold=exception_threshold, exception_rate=float(regime.mean()),
               consensus_neurons=list(partition.consensus))
    row.update(_cofiring_row(bits, EXCEPTION_NEURON, regime, partners))
    return row


SURVEY_COLUMNS = [
    Column("layer"), Column("mode", note="auto = reconstructed detection procedure; known = canonical partition"),
    Column("candidate"), Column("status"), Column("bimodal_neurons"),
    Column("threshold", note="high-mode boundary from the histogram"),
    Column("correlation", note="Pearson(high-mode indicator, consensus count)"),
    Column("spread", note="max - min P(high mode | consensus level)"),
    Column("exception_rate"), Column("max_jaccard", note="candidate vs its top-30 co-firing partners"),
    Column("hi_jaccard_pairs", note="partners with Jaccard > 0.5"), Column("max_enrichment"),
    Column("consensus_neurons", note="the layer's 7 highest-rate neurons (known row: canonical)"),
]


def run_cross_layer_survey(ctx: Context) -> ExperimentReport:
    s = ctx.settings
    seqs = survey_slice(ctx.sequences, s.survey_tokens)
    report = ExperimentReport("cross_layer_survey", list(SURVEY_COLUMNS))
    report.notes.append("auto rows follow a reconstructed detection procedure")
    report.notes.append("known row partners are the other 19 exception-handler neurons")
    report.config_snapshot = {"tokens": int(sum(len(x) for x in seqs)), "theta": s.theta, "bin_width": s.bin_width}
    for row in cross_layer_survey(seqs, ctx.weights, s.theta, s.bin_width, s.exception_threshold, ctx.partition):
        report.add(**row)
    return report


# ---------------------------------------------------------------------------
# controls


# smallest level size whose rate has binomial standard error <= 2pp at any p: 0.25 / 0.02**2
MIN_LEVEL_TOKENS = 625


def consensus_spread(regime: np.ndarray, level: np.ndarray,
                     min_tokens: int = MIN_LEVEL_TOKENS) -> tuple[float, np.ndarray]:
    """max - min of P(regime | level) over levels with at least ``min_tokens`` tokens."""
    rates = []
    for lv in range(int(level.max()) + 1 if len(level) else 0):
        sel = level == lv
        if sel.sum() >= min_tokens:
            rates.append(regime[sel].mean())
    rates = np.array(rates)
    return (float(rates.max() - rates.min()) if len(rates) else float("nan")), rates


def _structure(h_routing: np.ndarray, h_exc: np.ndarray, partition, theta: float, exception_threshold: float,
               regime: np.ndarray | None = None) -> dict:
    routing = list(partition.routing)
    col = {n: i for i, n in enumerate(routing)}
    bits = np.abs(h_routing) > theta
    core = bits[:, [col[n] for n in partition.core]]
    sim = stats.pairwise_jaccard(core, range(core.shape[1]))
    if regime is None:
        regime = h_exc > exception_threshold
    level = bits[:, [col[n] for n in partition.consensus]].sum(axis=1)
    spread, _ = consensus_spread(regime, level)
    out = {"exception_rate": float(regime.mean()), "core_min_jaccard": stats.min_offdiagonal(sim),
           "core_max_jaccard": stats.max_offdiagonal(sim), "spread": spread}
    if regime.any() and (~regime).any():
        others = [col[n] for n in routing if n != EXCEPTION_NEURON]
        base = bits[:, others].mean(axis=0)
        cond = bits[regime][:, others].mean(axis=0)
        enr = np.divide(cond, base, out=np.full_like(cond, np.nan), where=base > 0)
        out["max_enrichment"] = float(np.nanmax(enr)) if np.isfinite(enr).any() else float("nan")
    return out


def random_init_structure(sequences, config, seed: int, partition, theta: float, exception_threshold: float,
                          bin_width: float = 0.05) -> tuple[dict, str]:
    """Routing statistics of a freshly initialised model on the same tokens."""
    weights = random_init(seed, config)
    h_routing = routing_activations(sequences, weights, partition)
    return null_structure(h_routing, partition, theta, exception_threshold, bin_width)


def null_structure(h_routing: np.ndarray, partition, theta: float, exception_threshold: float,
                   bin_width: float = 0.05) -> tuple[dict, str]:
    """Routing statistics from an untrained model's routing-neuron activations (tokens x 27).

    The exception regime is the exception neuron's high mode when its
    distribution is bimodal, otherwise its generic firing (no high mode exists).
    """
    h_exc = h_routing[:, list(partition.routing).index(EXCEPTION_NEURON)]
    try:
        thr = stats.bimodal_threshold(h_exc, bin_width)
        regime, how = h_exc > thr, f"high mode above {thr:.3f}"
    except BimodalityError:
        regime, how = np.abs(h_exc) > theta, f"unimodal; generic firing at theta={theta}"
    return _structure(h_routing, h_exc, partition, theta, exception_threshold, regime), how


def routing_activations(sequences, weights: ModelWeights, partition) -> np.ndarray:
    """Final-layer GELU outputs of the routing neurons, tokens x 27."""
    L = weights.config.n_layer - 1
    out = []
    for seq in sequences:
        _, trace = forward(seq, weights, request=TraceRequest(mlp=frozenset({L})), compute_logits=False)
        out.append(trace.mlp_post[L][:, list(partition.routing)])
    return np.concatenate(out)


CONTROL_COLUMNS = [
    Column("model"), Column("theta"), Column("exception_rate"),
    Column("core_min_jaccard"), Column("core_max_jaccard", note="Core-analog: canonical Core indices"),
    Column("spread", note=f"max - min P(exception regime | consensus level), levels with >= {MIN_LEVEL_TOKENS} tokens"),
    Column("max_enrichment", note="over the other 26 routing neurons"), Column("regime"),
]


def run_controls(ctx: Context) -> ExperimentReport:
    s = ctx.settings
    report = ExperimentReport("controls", list(CONTROL_COLUMNS))
    report.config_snapshot = {"random_init_seed": s.random_init_seed, "thetas": list(s.control_thetas)}
    cp = ctx.l11
    for theta in s.control_thetas:
        row = _structure(cp.h_routing, cp.h_exception, ctx.partition, theta, s.exception_threshold)
        report.add(model="trained", theta=theta, regime=f"GELU > {s.exception_threshold}", **row)
    seqs = survey_slice(ctx.sequences, s.survey_tokens)
    row, how = random_init_structure(seqs, ctx.weights.config, s.random_init_seed, ctx.partition, s.theta,
                                     s.exception_threshold, s.bin_width)
    report.add(model="random_init", theta=s.theta, regime=how, **row)
    return report
