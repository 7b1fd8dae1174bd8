"""Layer-by-layer top-1 accuracy under the logit lens and a trained tuned lens."""

from __future__ import annotations

import numpy as np

from ..lens import TunedLensProbes, boundary_names, lens_predictions, train_tuned_lens
from .context import Context
from .report import Column, ExperimentReport


def lens_arc(sequences, weights, probes: TunedLensProbes) -> ExperimentReport:
    names = boundary_names(weights.config)
    report = ExperimentReport("lens_arc", [
        Column("layer"), Column("logit_top1", unit="%"), Column("tuned_top1", unit="%"),
        Column("delta_pp"), Column("first_lock_in", unit="%", note="earliest boundary with tuned top-1 correct"),
    ])
    logit_hits = {n: 0 for n in names}
    tuned_hits = {n: 0 for n in names}
    first = np.zeros(len(names) + 1, dtype=np.int64)  # last slot: never
    total = 0
    for seq in sequences:
        seq = np.asarray(seq)
        logit_top1, tuned_top1 = lens_predictions(seq, weights, probes)
        truth = seq[1:]
        correct = np.stack([tuned_top1[n][:-1] == truth for n in names])  # boundaries x T-1
        for n in names:
            logit_hits[n] += int((logit_top1[n][:-1] == truth).sum())
            tuned_hits[n] += int((tuned_top1[n][:-1] == truth).sum())
        earliest = np.where(correct.any(axis=0), correct.argmax(axis=0), len(names))
        first += np.bincount(earliest, minlength=len(names) + 1)
        total += len(truth)
    if total == 0:
        raise ValueError("no predicted tokens")
    for i, n in enumerate(names):
        lt, tt = 100 * logit_hits[n] / total, 100 * tuned_hits[n] / total
        report.add(layer="Emb" if n == "emb" else f"L{n}", logit_top1=lt, tuned_top1=tt, delta_pp=tt - lt,
                   first_lock_in=100 * first[i] / total)
    report.add(layer="Never", first_lock_in=100 * first[-1] / total)
    report.config_snapshot = {"tokens": total}
    return report


def run_lens_arc(ctx: Context) -> ExperimentReport:
    if not ctx.lens_sequences:
        raise ValueError("tuned lens needs training sequences disjoint from the evaluation corpus")
    probes = train_tuned_lens(ctx.lens_sequences, ctx.weights, ctx.settings.lens)
    report = lens_arc(ctx.sequences, ctx.weights, probes)
    lc = ctx.settings.lens
    report.config_snapshot.update({"lens_sequences": min(len(ctx.lens_sequences), lc.n_sequences),
                                   "lens_learning_rate": lc.learning_rate, "lens_epochs": lc.epochs})
    return report
