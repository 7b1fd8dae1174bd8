"""Final-layer routing experiments: reconstruction, tier statistics, consensus crossover, ablations."""

from __future__ import annotations

import numpy as np

from .. import stats
from ..decomposition import EXCEPTION_NEURON, reconstruct_check, tier_norm_shares
from ..model import TraceRequest, forward
from ..stats import ExceptionRegime, bootstrap_ci, bootstrap_statistic, fisher_from_vectors
from .context import Context
from .corpus import BOS_HEAD
from .report import Column, ExperimentReport


def per_sequence_means(values: np.ndarray, mask: np.ndarray, seq_id: np.ndarray, n_seq: int) -> np.ndarray:
    """(token count, mean) per sequence over rows selected by ``mask``; mean 0 when empty."""
    counts = np.bincount(seq_id[mask], minlength=n_seq).astype(np.float64)
    sums = np.bincount(seq_id[mask], weights=values[mask], minlength=n_seq)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return np.c_[counts, means]


def exception_regime(ctx: Context) -> ExceptionRegime:
    return ExceptionRegime.from_activation(ctx.l11.h_exception, ctx.settings.exception_threshold)


# ---------------------------------------------------------------------------


def run_reconstruct(ctx: Context) -> ExperimentReport:
    """Tier sum versus direct MLP output on the first ``reconstruct_tokens`` corpus tokens."""
    layer = ctx.layer
    report = ExperimentReport("reconstruct", [
        Column("tokens"), Column("max_abs_diff", note="max over tokens of max elementwise |tiers - MLP|"),
        Column("min_cosine", note="min over tokens"), Column("tokens_over_6e-5"),
        Column("tokens_cos_below_0.9999999"),
    ])
    diffs, coss = [], []
    remaining = ctx.settings.reconstruct_tokens
    for seq in ctx.sequences:
        if remaining <= 0:
            break
        _, trace = forward(seq[:remaining], ctx.weights, request=TraceRequest(resid_pre_mlp=frozenset({layer})),
                           compute_logits=False)
        d, c = reconstruct_check(trace.resid_pre_mlp[layer], ctx.partition, ctx.weights, layer)
        diffs.append(np.atleast_1d(d))
        coss.append(np.atleast_1d(c))
        remaining -= len(np.atleast_1d(d))
    diffs, coss = np.concatenate(diffs), np.concatenate(coss)
    report.add(tokens=len(diffs), max_abs_diff=float(diffs.max()), min_cosine=float(coss.min()),
               **{"tokens_over_6e-5": int((diffs >= 6e-5).sum()),
                  "tokens_cos_below_0.9999999": int((coss <= 0.9999999).sum())})
    return report


def run_tier_stats(ctx: Context) -> list[ExperimentReport]:
    """Exception regime, per-neuron conditional rates and Fisher enrichment, per-tier summary."""
    cp = ctx.l11
    part = ctx.partition
    regime = exception_regime(ctx)
    m = cp.matrix

    regime_report = ExperimentReport("exception_regime", [
        Column("tokens"), Column("n2123_generic_rate", note=f"|GELU| > theta at theta={cp.theta}"),
        Column("exception_rate", note="GELU(x_2123) > threshold, signed"),
        Column("exception_threshold"), Column("bimodal_threshold", note="histogram minimum between modes"),
        Column("bimodal_bin_width"),
    ])
    try:
        bimodal = stats.bimodal_threshold(cp.h_exception, ctx.settings.bin_width)
    except (stats.BimodalityError, ValueError) as e:
        bimodal = float("nan")
        regime_report.notes.append(f"bimodal threshold not found: {e}")
    regime_report.add(tokens=m.n_tokens, n2123_generic_rate=float(m.bits[:, EXCEPTION_NEURON].mean()),
                      exception_rate=regime.rate, exception_threshold=regime.threshold,
                      bimodal_threshold=bimodal, bimodal_bin_width=ctx.settings.bin_width)

    neuron_report = ExperimentReport("neuron_enrichment", [
        Column("neuron"), Column("tier"), Column("base_rate"), Column("exception_rate", note="P(fire | regime)"),
        Column("enrichment"), Column("log10_p", note="one-sided Fisher exact"),
        Column("significant", note="p < 0.05/3072"),
    ])
    tier_of = {}
    for tier, idx in (("core", part.core), ("differentiators", part.differentiators),
                      ("specialists", part.specialists), ("consensus", part.consensus)):
        for n in idx:
            tier_of[n] = tier
    for n in part.routing:
        if regime.mask.any():
            r = fisher_from_vectors(m.bits[:, n], regime.mask)
            neuron_report.add(neuron=n, tier=tier_of[n], base_rate=r.base_rate, exception_rate=r.regime_rate,
                              enrichment=r.enrichment, log10_p=r.log10_p, significant=r.significant)
        else:
            neuron_report.add(neuron=n, tier=tier_of[n], base_rate=float(m.bits[:, n].mean()))
    if not regime.mask.any():
        neuron_report.notes.append("exception regime empty: conditional quantities undefined")

    tier_report = ExperimentReport("tier_summary", [
        Column("tier"), Column("neurons"), Column("cond_rate_min"), Column("cond_rate_max"),
        Column("jaccard_min", note="within-tier pairwise, theta firing"), Column("jaccard_max"),
        Column("norm_share", note="mean ||tier|| / sum of the four tier norms over exception tokens"),
    ])
    tier_report.notes.append("Jaccard ranges are within-tier pairwise (interpretation of an unstated reference set)")
    shares = {}
    if regime.mask.any():
        h_exc = _exception_h(ctx, regime)
        shares = tier_norm_shares(h_exc, part, ctx.weights, ctx.layer)
    for tier, idx in part.tiers().items():
        named = tier != "residual"
        row = dict(tier=tier, neurons=len(idx), norm_share=shares.get(tier))
        if named:
            sim = stats.pairwise_jaccard(m, idx)
            row.update(jaccard_min=stats.min_offdiagonal(sim), jaccard_max=stats.max_offdiagonal(sim))
            if regime.mask.any():
                rates = stats.conditional_fire_rates(m, regime, idx)
                row.update(cond_rate_min=float(rates.min()), cond_rate_max=float(rates.max()))
        tier_report.add(**row)
    return [regime_report, neuron_report, tier_report]


def _exception_h(ctx: Context, regime: ExceptionRegime, limit: int = 20_000) -> np.ndarray:
    """Full hidden activations at (up to ``limit``) exception-regime tokens, recomputed per sequence."""
    layer = ctx.layer
    cp = ctx.l11
    out, taken = [], 0
    for s, seq in enumerate(ctx.sequences):
        rows = np.flatnonzero(regime.mask[cp.seq_id == s])
        if rows.size == 0:
            continue
        _, trace = forward(seq, ctx.weights, request=TraceRequest(mlp=frozenset({layer})), compute_logits=False)
        out.append(trace.mlp_post[layer][rows])
        taken += rows.size
        if taken >= limit:
            break
    return np.concatenate(out)[:limit]


def run_consensus_dp(ctx: Context) -> ExperimentReport:
    """Mean next-token probability change from the final MLP, by consensus level."""
    cp = ctx.l11
    s = ctx.settings
    report = ExperimentReport("consensus_dp", [
        Column("level"), Column("tokens"), Column("mean_dp", note="P_full - P_mlp_zeroed, true next token"),
        Column("ci_lo"), Column("ci_hi"), Column("ci_excludes_zero"),
        Column("pre_mlp_top1_prob", note="mean max prob with the MLP removed"),
    ])
    report.notes.append(f"sequence-level percentile bootstrap, {s.resamples} resamples, seed {s.seed}")
    level = stats.consensus_level(cp.matrix, consensus=ctx.partition.consensus)
    dp = cp.p_full - cp.p_zeroed
    n_seq = len(ctx.sequences)
    for lv in range(len(ctx.partition.consensus) + 1):
        mask = cp.predicted & (level == lv)
        n = int(mask.sum())
        if n == 0:
            report.notes.append(f"level {lv}: no tokens, row omitted")
            continue
        per_seq = per_sequence_means(dp, mask, cp.seq_id, n_seq)
        if (per_seq[:, 0] > 0).sum() >= 2:
            ci = bootstrap_ci(per_seq, s.resamples, s.seed)
            lo, hi = ci.lo, ci.hi
        else:
            lo = hi = float("nan")
        report.add(level=lv, tokens=n, mean_dp=float(dp[mask].mean()), ci_lo=lo, ci_hi=hi,
                   ci_excludes_zero=bool(lo > 0 or hi < 0),
                   pre_mlp_top1_prob=float(cp.p_pre_top1[mask].mean()))
    return report


def _ppl_ratio_ci(ctx: Context, name: str, mask: np.ndarray):
    cp = ctx.l11
    n_seq = len(ctx.sequences)
    base = np.bincount(cp.seq_id[mask], weights=cp.nll["baseline"][mask], minlength=n_seq)
    abl = np.bincount(cp.seq_id[mask], weights=cp.nll[name][mask], minlength=n_seq)
    cnt = np.bincount(cp.seq_id[mask], minlength=n_seq).astype(np.float64)
    parts = np.c_[base, abl, cnt]

    def rel(v):
        return np.expm1((v[1] - v[0]) / v[2]) if v[2] > 0 else np.nan

    s = ctx.settings
    ci = bootstrap_statistic(parts, rel, s.resamples, s.seed)
    return float(np.exp(abl.sum() / cnt.sum())), ci


def run_tier_ablation(ctx: Context) -> ExperimentReport:
    """Perplexity with each exception-handler tier zeroed at the final layer."""
    cp = ctx.l11
    level = stats.consensus_level(cp.matrix, consensus=ctx.partition.consensus)
    report = ExperimentReport("tier_ablation", [
        Column("ablation"), Column("neurons"), Column("tokens"), Column("ppl"),
        Column("delta_pct", note="relative PPL change vs baseline on the same tokens"),
        Column("ci_lo_pct"), Column("ci_hi_pct"),
    ])
    sizes = {"core": len(ctx.partition.core), "differentiators": len(ctx.partition.differentiators),
             "specialists": len(ctx.partition.specialists), "all": len(ctx.partition.exception_handler)}
    pred = cp.predicted
    base_ppl = float(np.exp(cp.nll["baseline"][pred].mean()))
    report.add(ablation="baseline", neurons=0, tokens=int(pred.sum()), ppl=base_ppl)
    for name in ("core", "differentiators", "specialists", "all"):
        ppl, ci = _ppl_ratio_ci(ctx, name, pred)
        report.add(ablation=name, neurons=sizes[name], tokens=int(pred.sum()), ppl=ppl,
                   delta_pct=100 * ci.point, ci_lo_pct=100 * ci.lo, ci_hi_pct=100 * ci.hi)
    for label, sel in (("core@consensus<=4", level <= 4), ("core@consensus>=5", level >= 5)):
        mask = pred & sel
        if mask.sum() == 0 or len(np.unique(cp.seq_id[mask])) < 2:
            report.notes.append(f"{label}: too few tokens")
            continue
        ppl, ci = _ppl_ratio_ci(ctx, "core", mask)
        report.add(ablation=label, neurons=sizes["core"], tokens=int(mask.sum()), ppl=ppl,
                   delta_pct=100 * ci.point, ci_lo_pct=100 * ci.lo, ci_hi_pct=100 * ci.hi)
    return report


def run_consensus_reidentification(ctx: Context, min_rate: float = 0.75, min_ratio: float = 10.0,
                                   min_cosine: float = 0.4, min_class_count: int = 50) -> ExperimentReport:
    """Re-derive the consensus set from firing rate, token-class enrichment and output alignment."""
    from scipy import sparse

    cp = ctx.l11
    m = cp.matrix
    w_proj = ctx.weights.blocks[ctx.layer].w_proj.astype(np.float64)
    report = ExperimentReport("consensus_reidentification", [
        Column("neuron"), Column("rate"), Column("class_ratio", note="max/min fire rate across token classes"),
        Column("cosine_hi", note="cos(W_proj[:, n], mean MLP output at consensus >= 6)"),
        Column("canonical"), Column("recovered"),
    ])
    report.notes.append(f"token class = token id with >= {min_class_count} occurrences (interpretation)")
    report.config_snapshot = {"min_rate": min_rate, "min_ratio": min_ratio, "min_cosine": min_cosine,
                              "min_class_count": min_class_count}

    rates = m.rates()
    tokens = m.token_meta["token"].astype(np.int64)
    ids, inverse, counts = np.unique(tokens, return_inverse=True, return_counts=True)
    keep = counts >= min_class_count
    ratio = np.full(m.bits.shape[1], np.nan)
    if keep.sum() >= 2:
        cls = np.flatnonzero(keep)
        remap = -np.ones(len(ids), dtype=np.int64)
        remap[cls] = np.arange(len(cls))
        row_cls = remap[inverse]
        sel = row_cls >= 0
        onehot = sparse.csr_matrix((np.ones(sel.sum()), (row_cls[sel], np.flatnonzero(sel))),
                                   shape=(len(cls), m.n_tokens))
        class_fire = np.asarray(onehot @ m.bits.astype(np.float64))
        class_rate = class_fire / counts[cls][:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = class_rate.max(axis=0) / class_rate.min(axis=0)
    if cp.mean_mlp_out_hi is not None:
        mean_dir = cp.mean_mlp_out_hi
        cos = w_proj @ mean_dir / (np.linalg.norm(w_proj, axis=1) * np.linalg.norm(mean_dir))
    else:
        cos = np.full(m.bits.shape[1], np.nan)
        report.notes.append("no tokens at consensus >= 6; cosine criterion unsatisfiable")
    with np.errstate(invalid="ignore"):
        passed = (rates > min_rate) & (ratio > min_ratio) & (cos > min_cosine)
    recovered = set(np.flatnonzero(passed).tolist())
    canonical = set(ctx.partition.consensus)
    for n in sorted(recovered | canonical):
        report.add(neuron=n, rate=float(rates[n]), class_ratio=float(ratio[n]), cosine_hi=float(cos[n]),
                   canonical=n in canonical, recovered=n in recovered)
    report.notes.append(f"recovered {len(recovered & canonical)}/{len(canonical)} canonical; "
                        f"{len(recovered - canonical)} additional")
    return report


def run_consensus_geometry(ctx: Context) -> ExperimentReport:
    """Pairwise cosine between consensus output directions, and each one's alignment with N2123."""
    w = ctx.weights.blocks[ctx.layer].w_proj.astype(np.float64)
    idx = list(ctx.partition.consensus)
    unit = w[idx] / np.linalg.norm(w[idx], axis=1, keepdims=True)
    sim = unit @ unit.T
    exc = w[EXCEPTION_NEURON] / np.linalg.norm(w[EXCEPTION_NEURON])
    report = ExperimentReport("consensus_geometry", [Column("neuron"), Column("other"), Column("cosine")])
    for i, a in enumerate(idx):
        for j in range(i + 1, len(idx)):
            report.add(neuron=a, other=idx[j], cosine=float(sim[i, j]))
    mean_dir = unit.mean(axis=0)
    report.add(neuron=EXCEPTION_NEURON, other="consensus_mean",
               cosine=float(exc @ mean_dir / np.linalg.norm(mean_dir)))
    return report


def run_bos_attention(ctx: Context) -> ExperimentReport:
    cp = ctx.l11
    regime = exception_regime(ctx)
    report = ExperimentReport("bos_attention", [
        Column("head"), Column("subset"), Column("tokens"), Column("mean_bos_mass"),
    ])
    if np.isnan(cp.bos_mass).all():
        report.notes.append(f"model has no head {BOS_HEAD} at layer {ctx.layer}")
    # query position 0 can only attend to itself
    q = cp.matrix.token_meta["position"] > 0
    for subset, mask in (("all", q), ("exception", q & regime.mask), ("non_exception", q & ~regime.mask)):
        report.add(head=f"L{ctx.layer}H{BOS_HEAD}", subset=subset, tokens=int(mask.sum()),
                   mean_bos_mass=float(cp.bos_mass[mask].mean()) if mask.any() else float("nan"))
    return report

