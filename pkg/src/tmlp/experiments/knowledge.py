"""Factual-prompt experiments: progressive rank, attribution overlap, knockout, transplant."""

from __future__ import annotations

import logging
from collections import Counter

import numpy as np

from ..attribution import ig_attribution, top_neurons
from ..decomposition import progressive_rank
from ..model import AblationSpec, TraceRequest, forward, softmax
from ..tokenizer import encode
from .context import Context
from .prompts import load_cloze, load_transplant_pairs, single_token
from .report import Column, ExperimentReport

log = logging.getLogger(__name__)

TOP_K = 20


def run_knowledge_suite(ctx: Context, path=None, name: str = "knowledge_suite") -> list[ExperimentReport]:
    """Static and context progressive rank per prompt, plus per-category aggregates."""
    vocab = ctx.require_vocab()
    path = path or ctx.settings.knowledge_prompts
    prompts = load_cloze(path)
    per_prompt = ExperimentReport(name, [
        Column("prompt"), Column("target"), Column("category"), Column("expect"),
        Column("pre_mlp_rank"), Column("full_rank", note="base model rank"),
        Column("static_best", note="best rank over the k-grid, raw W_proj columns by norm"),
        Column("context_best", note="best rank over the k-grid, h_n * W_proj[:, n] by |h_n|*norm"),
        Column("context_k_best"), Column("status"),
    ])
    per_prompt.config_snapshot = {"prompt_file": str(path)}
    for p in prompts:
        target = single_token(p.target, vocab)
        if target is None:
            log.warning("skipping %r: target %r is not a single token", p.prompt, p.target)
            per_prompt.add(prompt=p.prompt, target=p.target, category=p.category, expect=p.expect,
                           status="skipped: multi-token target")
            continue
        tokens = encode(p.prompt, vocab)
        static = progressive_rank(tokens, target, "static", ctx.weights, layer=ctx.layer)
        context = progressive_rank(tokens, target, "context", ctx.weights, layer=ctx.layer)
        per_prompt.add(prompt=p.prompt, target=p.target, category=p.category, expect=p.expect,
                       pre_mlp_rank=context.pre_mlp_rank, full_rank=context.full_rank,
                       static_best=static.best, context_best=context.best,
                       context_k_best=context.k_grid[int(np.argmin(context.ranks))], status="ok")

    summary = ExperimentReport(f"{name}_categories", [
        Column("category"), Column("n"), Column("context_top10"), Column("static_top10"),
        Column("context_median_rank"),
    ])
    done = [r for r in per_prompt.rows if r["status"] == "ok"]
    groups: dict[str, list[dict]] = {}
    for r in done:
        groups.setdefault(r["category"] or "uncategorised", []).append(r)
    for cat, rows in sorted(groups.items()) + [("all", done)]:
        if not rows:
            continue
        ctx_ranks = np.array([r["context_best"] for r in rows])
        summary.add(category=cat, n=len(rows), context_top10=int((ctx_ranks <= 10).sum()),
                    static_top10=int(sum(r["static_best"] <= 10 for r in rows)),
                    context_median_rank=float(np.median(ctx_ranks)))
    return [per_prompt, summary]


def _final_state(tokens, ctx: Context):
    layer = ctx.layer
    logits, trace = forward(tokens, ctx.weights, request=TraceRequest(mlp=frozenset({layer})))
    return softmax(logits[-1].astype(np.float64)), trace.mlp_post[layer][-1]


def _prob_with(tokens, ctx: Context, spec: AblationSpec) -> np.ndarray:
    logits, _ = forward(tokens, ctx.weights, ablation=spec)
    return softmax(logits[-1].astype(np.float64))


def run_kn_replication(ctx: Context, path=None) -> list[ExperimentReport]:
    """IG top-20 at the final layer: overlap with routing neurons, knockout effect, recurrence."""
    vocab = ctx.require_vocab()
    path = path or ctx.settings.kn_prompts
    part = ctx.partition
    routing, consensus = set(part.routing), set(part.consensus)
    d_mlp = ctx.weights.config.d_mlp
    report = ExperimentReport("kn_replication", [
        Column("prompt"), Column("target"), Column("top20", note="IG top-20 neurons, descending"),
        Column("routing_overlap"), Column("consensus_overlap"),
        Column("p_full"), Column("p_knockout", note="top-20 overridden to 0 at the final position"),
        Column("delta_pp", note="(p_knockout - p_full) * 100"),
    ])
    report.config_snapshot = {"prompt_file": str(path), "ig_steps": ctx.settings.ig_steps, "k": TOP_K}
    recurrence: Counter[int] = Counter()
    for p in load_cloze(path):
        target = single_token(p.target, vocab)
        if target is None:
            raise ValueError(f"target {p.target!r} of {p.prompt!r} is not a single token")
        tokens = encode(p.prompt, vocab)
        attr = ig_attribution(tokens, target, ctx.layer, ctx.settings.ig_steps, ctx.weights)
        top = [int(n) for n in top_neurons(attr, TOP_K)]
        recurrence.update(n for n in top if n in routing)
        p_full, _ = _final_state(tokens, ctx)
        spec = AblationSpec(override_neurons={ctx.layer: {n: 0.0 for n in top}},
                            override_position=len(tokens) - 1)
        p_ko = _prob_with(tokens, ctx, spec)
        report.add(prompt=p.prompt, target=p.target, top20=top,
                   routing_overlap=len(routing.intersection(top)),
                   consensus_overlap=len(consensus.intersection(top)),
                   p_full=float(p_full[target]), p_knockout=float(p_ko[target]),
                   delta_pp=100 * float(p_ko[target] - p_full[target]))

    n = len(report.rows)
    chance_routing = len(routing) / d_mlp * TOP_K
    chance_consensus = len(consensus) / d_mlp * TOP_K
    mean_routing = float(np.mean(report.column("routing_overlap"))) if n else float("nan")
    mean_consensus = float(np.mean(report.column("consensus_overlap"))) if n else float("nan")
    deltas = np.array(report.column("delta_pp"), dtype=np.float64)
    summary = ExperimentReport("kn_summary", [
        Column("quantity"), Column("value"), Column("chance"),
    ])
    summary.add(quantity="prompts", value=n)
    summary.add(quantity="mean_routing_overlap", value=mean_routing, chance=chance_routing)
    summary.add(quantity="mean_consensus_overlap", value=mean_consensus, chance=chance_consensus)
    summary.add(quantity="routing_enrichment", value=mean_routing / chance_routing)
    summary.add(quantity="mean_knockout_delta_pp", value=float(deltas.mean()) if n else float("nan"))
    summary.add(quantity="prompts_positive", value=int((deltas > 0).sum()))
    summary.add(quantity="prompts_negligible", value=int((np.abs(deltas) < 0.1).sum()))

    rec = ExperimentReport("kn_recurrence", [Column("neuron"), Column("prompts")])
    for neuron, count in sorted(recurrence.items(), key=lambda kv: (-kv[1], kv[0])):
        rec.add(neuron=neuron, prompts=count)
    return [report, summary, rec]


def transplant(source_tokens, dest_tokens, fact: int, ctx: Context, k: int = TOP_K):
    """Copy the source's top-k IG activations into the destination's final position.

    Returns (neurons, p_dest_before, p_dest_after) for the source fact token.
    """
    layer = ctx.layer
    attr = ig_attribution(source_tokens, fact, layer, ctx.settings.ig_steps, ctx.weights)
    top = [int(n) for n in top_neurons(attr, k)]
    _, h_src = _final_state(source_tokens, ctx)
    p_before, _ = _final_state(dest_tokens, ctx)
    spec = AblationSpec(override_neurons={layer: {n: float(h_src[n]) for n in top}},
                        override_position=len(dest_tokens) - 1)
    p_after = _prob_with(dest_tokens, ctx, spec)
    return top, float(p_before[fact]), float(p_after[fact])


def run_transplant(ctx: Context, path=None, success_pp: float = 1.0) -> ExperimentReport:
    vocab = ctx.require_vocab()
    path = path or ctx.settings.transplant_pairs
    report = ExperimentReport("transplant", [
        Column("source"), Column("destination"), Column("fact"),
        Column("p_before"), Column("p_after"), Column("delta_pp"),
        Column("transplanted", note=f"fact gains >= {success_pp}pp at the destination"),
    ])
    report.config_snapshot = {"pairs_file": str(path), "ig_steps": ctx.settings.ig_steps, "k": TOP_K}
    for pair in load_transplant_pairs(path):
        fact = single_token(pair.fact, vocab)
        if fact is None:
            raise ValueError(f"fact {pair.fact!r} is not a single token")
        dest = encode(pair.destination, vocab)
        _, before, after = transplant(encode(pair.source, vocab), dest, fact, ctx)
        delta = 100 * (after - before)
        report.add(source=pair.source, destination=pair.destination, fact=pair.fact,
                   p_before=before, p_after=after, delta_pp=delta, transplanted=delta >= success_pp)
    return report
