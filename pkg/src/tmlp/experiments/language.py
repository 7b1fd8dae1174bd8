"""Garden-path minimal pairs: surprisal and routing signals at the disambiguation word."""

from __future__ import annotations

import math

import numpy as np

from .. import stats
from ..decomposition import EXCEPTION_NEURON
from ..model import AblationSpec, TraceRequest, forward, log_softmax, resume_from_mlp, unembed
from .context import Context
from .prompts import GardenPathPair, disambiguation_position, load_garden_path_pairs
from .report import Column, ExperimentReport

LOG2E = 1 / math.log(2)


def measure(sentence: str, word: str, verb: str, ctx: Context) -> dict:
    """Signals at the position that predicts the first BPE piece of ``word``."""
    vocab = ctx.require_vocab()
    layer = ctx.layer
    ids, pos = disambiguation_position(sentence, word, vocab, verb)
    request = TraceRequest(resid_pre_mlp=frozenset({layer}), mlp=frozenset({layer}))
    logits, trace = forward(ids, ctx.weights, request=request)
    at = pos - 1
    target = ids[pos]
    lp = log_softmax(logits[at].astype(np.float64))
    resid_mid = trace.resid_pre_mlp[layer][at:at + 1]
    if layer == ctx.weights.config.n_layer - 1:
        zeroed = unembed(resid_mid, ctx.weights)
    else:
        zeroed = resume_from_mlp(trace.resid_pre_mlp[layer], layer, ctx.weights,
                                 AblationSpec(zero_mlp={layer}))[at:at + 1]
    lp0 = log_softmax(zeroed[0].astype(np.float64))
    h = trace.mlp_post[layer][at]
    return {
        "position": pos,
        "surprisal_bits": float(-lp[target] * LOG2E),
        "consensus": int((np.abs(h[list(ctx.partition.consensus)]) > ctx.settings.theta).sum()),
        "n2123": float(h[EXCEPTION_NEURON]),
        "mlp_dp": float(np.exp(lp[target]) - np.exp(lp0[target])),
    }


def run_garden_path(ctx: Context, path=None, pairs: list[GardenPathPair] | None = None) -> list[ExperimentReport]:
    pairs = pairs if pairs is not None else load_garden_path_pairs(path or ctx.settings.garden_path_pairs)
    report = ExperimentReport("garden_path", [
        Column("pair"), Column("intransitive_verb"), Column("transitive_verb"), Column("disambiguation"),
        Column("s_int", unit="bits"), Column("s_trans", unit="bits"), Column("delta_bits", note="trans - int"),
        Column("consensus_int"), Column("consensus_trans"),
        Column("n2123_int"), Column("n2123_trans"),
        Column("mlp_dp_int", note="P_full - P_mlp_zeroed of the disambiguation piece"), Column("mlp_dp_trans"),
    ])
    report.notes.append("all signals read at the position that predicts the disambiguation token")
    for i, p in enumerate(pairs, start=1):
        a = measure(p.intransitive, p.disambiguation, p.intransitive_verb, ctx)
        b = measure(p.transitive, p.disambiguation, p.transitive_verb, ctx)
        report.add(pair=i, intransitive_verb=p.intransitive_verb, transitive_verb=p.transitive_verb,
                   disambiguation=p.disambiguation, s_int=a["surprisal_bits"], s_trans=b["surprisal_bits"],
                   delta_bits=b["surprisal_bits"] - a["surprisal_bits"],
                   consensus_int=a["consensus"], consensus_trans=b["consensus"],
                   n2123_int=a["n2123"], n2123_trans=b["n2123"],
                   mlp_dp_int=a["mlp_dp"], mlp_dp_trans=b["mlp_dp"])

    tests = ExperimentReport("garden_path_tests", [
        Column("test"), Column("statistic"), Column("df"), Column("p"), Column("n"), Column("detail"),
    ])
    delta = np.array(report.column("delta_bits"), dtype=np.float64)
    tests.add(test="median_delta_bits", statistic=float(np.median(delta)) if len(delta) else float("nan"),
              n=len(delta))
    tests.add(test="pairs_trans_higher", statistic=int((delta > 0).sum()), n=len(delta))
    s_pairs = np.c_[report.column("s_trans"), report.column("s_int")]
    try:
        w, p = stats.wilcoxon_signed_rank(s_pairs)
        tests.add(test="wilcoxon_surprisal", statistic=w, p=p, n=int((delta != 0).sum()),
                  detail="trans vs int, W = smaller signed-rank sum")
    except stats.DegenerateError as e:
        tests.add(test="wilcoxon_surprisal", n=len(delta), detail=f"degenerate: {e}")
    n_pairs = np.c_[report.column("n2123_int"), report.column("n2123_trans")]
    try:
        t, df, p = stats.paired_t_test(n_pairs)
        tests.add(test="paired_t_n2123", statistic=t, df=df, p=p, n=len(n_pairs), detail="int - trans")
    except (stats.DegenerateError, ValueError) as e:
        tests.add(test="paired_t_n2123", n=len(n_pairs), detail=f"degenerate: {e}")
    return [report, tests]
