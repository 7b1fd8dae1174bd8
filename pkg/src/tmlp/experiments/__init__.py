"""Experiment registry: each entry maps a Context to one or more ExperimentReports."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

from . import knowledge, language, lens_arc, routing, survey
from .context import Context, Settings, bundled
from .report import Column, ExperimentReport


@dataclass(frozen=True)
class Experiment:
    name: str
    run: Callable[[Context], "ExperimentReport | list[ExperimentReport]"]
    summary: str
    needs_vocab: bool = False


def _extension(ctx: Context):
    return knowledge.run_knowledge_suite(ctx, bundled("knowledge_extension.tsv"), name="knowledge_extension")


REGISTRY: dict[str, Experiment] = {e.name: e for e in [
    Experiment("reconstruct", routing.run_reconstruct, "tier sum vs direct MLP output"),
    Experiment("tier_stats", routing.run_tier_stats, "exception regime, per-neuron enrichment, tier summary"),
    Experiment("consensus_dp", routing.run_consensus_dp, "MLP effect on next-token probability by consensus"),
    Experiment("tier_ablation", routing.run_tier_ablation, "perplexity with each tier zeroed"),
    Experiment("consensus_reidentification", routing.run_consensus_reidentification,
               "re-derive the consensus neurons from firing statistics"),
    Experiment("consensus_geometry", routing.run_consensus_geometry, "output-direction cosines of consensus neurons"),
    Experiment("bos_attention", routing.run_bos_attention, "BOS attention of the dominant final-layer head"),
    Experiment("cross_layer_survey", survey.run_cross_layer_survey, "exception-handler structure at every layer"),
    Experiment("controls", survey.run_controls, "threshold sweep and random-init null model"),
    Experiment("knowledge_suite", knowledge.run_knowledge_suite, "progressive rank on factual prompts", True),
    Experiment("knowledge_extension", _extension, "progressive rank on the extended prompt set", True),
    Experiment("kn_replication", knowledge.run_kn_replication, "IG top-20 overlap and knockout", True),
    Experiment("transplant", knowledge.run_transplant, "IG activation transplant between prompts", True),
    Experiment("garden_path", language.run_garden_path, "surprisal at disambiguation in minimal pairs", True),
    Experiment("lens_arc", lens_arc.run_lens_arc, "logit and tuned lens top-1 accuracy by layer"),
]}


def run_experiment(name: str, ctx: Context) -> list[ExperimentReport]:
    """Run one registered experiment; every report gets the context snapshot and the runtime."""
    exp = REGISTRY[name]
    t0 = time.perf_counter()
    out = exp.run(ctx)
    reports = out if isinstance(out, list) else [out]
    elapsed = time.perf_counter() - t0
    for r in reports:
        r.config_snapshot = {**ctx.snapshot, "experiment": name, **r.config_snapshot}
        r.runtime_seconds = elapsed
    return reports


__all__ = ["REGISTRY", "Column", "Context", "Experiment", "ExperimentReport", "Settings", "run_experiment"]
