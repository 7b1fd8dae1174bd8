import dataclasses
import json

import numpy as np
import pytest

from conftest import FAST
from tmlp.experiments import REGISTRY, Context, run_experiment
from tmlp.experiments.knowledge import transplant
from tmlp.experiments.language import measure, run_garden_path
from tmlp.experiments.lens_arc import lens_arc
from tmlp.experiments.prompts import GardenPathPair, PairError, disambiguation_position, load_cloze, single_token
from tmlp.experiments.report import Column, ExperimentReport
from tmlp.experiments.routing import per_sequence_means, run_consensus_reidentification
from tmlp.experiments.survey import consensus_spread, random_init_structure, survey_slice
from tmlp.lens import TunedLensProbes
from tmlp.model import AblationSpec, forward, softmax
from tmlp.tokenizer import encode



def make_ctx(weights, vocab, sequences, **overrides):
    rng = np.random.default_rng(11)
    return Context(weights, sequences, dataclasses.replace(FAST, **overrides), vocab,
                   lens_sequences=[rng.integers(0, 50257, 24) for _ in range(2)], snapshot={"run": "test"})


@pytest.fixture(scope="module")
def ctx(tiny_weights, vocab, tiny_sequences):
    return make_ctx(tiny_weights, vocab, [s[:64] for s in tiny_sequences])


@pytest.fixture(scope="module")
def all_reports(ctx):
    return {name: run_experiment(name, ctx) for name in REGISTRY}


def test_every_experiment_produces_reports(all_reports):
    for name, reports in all_reports.items():
        assert reports, name
        for r in reports:
            assert r.config_snapshot["experiment"] == name
            assert r.config_snapshot["run"] == "test"
            json.loads(r.cells_json())


def test_reconstruct_tolerance(all_reports):
    row = all_reports["reconstruct"][0].rows[0]
    assert row["max_abs_diff"] < 6e-5 and row["min_cosine"] > 0.9999999


def test_deterministic_rerun(ctx, all_reports, tiny_weights, vocab, tiny_sequences):
    fresh = make_ctx(tiny_weights, vocab, [s[:64] for s in tiny_sequences])
    for name in ("tier_stats", "consensus_dp", "tier_ablation", "controls", "knowledge_suite", "lens_arc"):
        again = run_experiment(name, fresh)
        assert [r.cells_json() for r in again] == [r.cells_json() for r in all_reports[name]], name


def test_worker_count_does_not_change_results(tiny_weights, vocab, tiny_sequences, all_reports):
    threaded = make_ctx(tiny_weights, vocab, [s[:64] for s in tiny_sequences], workers=3)
    for name in ("consensus_dp", "tier_ablation"):
        got = [r.cells_json() for r in run_experiment(name, threaded)]
        want = [r.cells_json() for r in all_reports[name]]
        assert [json.loads(g)["rows"] for g in got] == [json.loads(w)["rows"] for w in want]


def test_lens_lock_in_sums_to_100(all_reports):
    report = all_reports["lens_arc"][0]
    assert report.column("layer")[0] == "Emb" and report.column("layer")[-1] == "Never"
    assert sum(report.column("first_lock_in")) == pytest.approx(100.0)


def test_identity_lens_arc_has_zero_delta(ctx):
    report = lens_arc(ctx.sequences[:2], ctx.weights, TunedLensProbes.identity(ctx.weights.config))
    assert all(d == 0 for d in report.column("delta_pp")[:-1])


def test_tier_ablation_baseline_matches_perplexity(ctx, all_reports):
    from tmlp.model import perplexity

    row = all_reports["tier_ablation"][0].row(ablation="baseline")
    assert row["ppl"] == pytest.approx(perplexity(ctx.sequences, ctx.weights), rel=1e-6)


def test_knowledge_categories_have_all_row(all_reports):
    cats = all_reports["knowledge_suite"][1]
    assert cats.rows[-1]["category"] == "all"
    assert cats.rows[-1]["n"] == 10


def test_transplant_onto_itself_changes_nothing(ctx, vocab):
    tokens = encode("The capital of France is", vocab)
    fact = single_token("Paris", vocab)
    _, before, after = transplant(tokens, tokens, fact, ctx)
    assert after == pytest.approx(before, rel=1e-6)


def test_zero_override_equals_knockout(ctx, vocab):
    tokens = encode("The Eiffel Tower is in", vocab)
    neurons = (3, 99, 2123)
    layer = ctx.layer
    a, _ = forward(tokens, ctx.weights, AblationSpec(override_neurons={layer: {n: 0.0 for n in neurons}},
                                                     override_position=len(tokens) - 1))
    b, _ = forward(tokens, ctx.weights, AblationSpec(zero_neurons={layer: neurons}))
    # the final layer cannot leak earlier positions into the last one
    np.testing.assert_array_equal(a[-1], b[-1])


def test_identical_garden_sentences_have_zero_delta(ctx):
    s = "After the dog struggled the vet took off the muzzle."
    pair = GardenPathPair(s, s, "took", "struggled", "struggled")
    report, tests = run_garden_path(ctx, pairs=[pair] * 5)
    assert report.column("delta_bits") == [0.0] * 5
    assert tests.row(test="pairs_trans_higher")["statistic"] == 0
    assert tests.row(test="wilcoxon_surprisal")["detail"].startswith("degenerate")


def test_measure_reads_the_predicting_position(ctx, vocab):
    s = "After the dog struggled the vet took off the muzzle."
    out = measure(s, "took", "struggled", ctx)
    ids, pos = disambiguation_position(s, "took", vocab, "struggled")
    assert vocab.token_to_bytes[ids[pos]] == b" took" and out["position"] == pos
    logits, _ = forward(ids, ctx.weights)
    p = softmax(logits[pos - 1].astype(np.float64))[ids[pos]]
    assert out["surprisal_bits"] == pytest.approx(-np.log2(p), rel=1e-5)
    assert 0 <= out["consensus"] <= 7


def test_garden_pair_validation(vocab):
    with pytest.raises(PairError):
        GardenPathPair("the cat sat", "the dog sat", "ran")
    with pytest.raises(PairError):
        disambiguation_position("took the vet", "took", vocab)


def test_bundled_prompt_sets(vocab):
    from tmlp.experiments.context import bundled
    from tmlp.experiments.prompts import load_garden_path_pairs, load_transplant_pairs

    table = load_cloze(bundled("knowledge_table5.tsv"))
    assert len(table) == 10 and all(single_token(p.target.strip(), vocab) for p in table)
    assert len(load_cloze(bundled("knowledge_extension.tsv"))) == 150
    assert len(load_cloze(bundled("kn_prompts.tsv"))) == 20
    assert len(load_transplant_pairs(bundled("transplant_pairs.tsv"))) == 5
    pairs = load_garden_path_pairs(bundled("garden_path_pairs.tsv"))
    assert len(pairs) == 15
    for p in pairs:
        disambiguation_position(p.intransitive, p.disambiguation, vocab, p.intransitive_verb)
        disambiguation_position(p.transitive, p.disambiguation, vocab, p.transitive_verb)


def test_unsatisfiable_reidentification_is_empty(ctx):
    report = run_consensus_reidentification(ctx, min_rate=1.01)
    assert not any(report.column("recovered"))


def test_consensus_spread_ignores_small_levels():
    level = np.r_[np.zeros(1000, int), np.ones(1000, int), np.full(5, 2)]
    regime = np.r_[np.zeros(1000, bool), np.ones(1000, bool), np.zeros(5, bool)]
    spread, rates = consensus_spread(regime, level)
    assert spread == 1.0 and rates.tolist() == [0.0, 1.0]
    spread, _ = consensus_spread(regime[:5], level[:5])
    assert np.isnan(spread)


def test_random_init_is_reproducible(tiny_weights, tiny_sequences, ctx):
    seqs = [s[:32] for s in tiny_sequences[:2]]
    args = (seqs, tiny_weights.config, 3, ctx.partition, 0.1, 1.0)
    np.testing.assert_equal(random_init_structure(*args), random_init_structure(*args))


def test_survey_slice():
    seqs = [np.arange(10), np.arange(10), np.arange(10)]
    assert [len(s) for s in survey_slice(seqs, 15)] == [10, 5]


def test_per_sequence_means():
    values = np.array([1.0, 2.0, 3.0, 4.0])
    mask = np.array([True, True, False, True])
    seq = np.array([0, 0, 1, 1])
    np.testing.assert_array_equal(per_sequence_means(values, mask, seq, 2), [[2, 1.5], [1, 4.0]])


def test_lens_arc_requires_training_data(tiny_weights, vocab, tiny_sequences):
    ctx = Context(tiny_weights, [tiny_sequences[0][:16]], FAST, vocab)
    with pytest.raises(ValueError, match="disjoint"):
        run_experiment("lens_arc", ctx)


def test_vocab_required(tiny_weights, tiny_sequences):
    ctx = Context(tiny_weights, [tiny_sequences[0][:16]], FAST)
    with pytest.raises(ValueError, match="vocabulary"):
        run_experiment("transplant", ctx)


def test_report_write_and_validation(tmp_path):
    r = ExperimentReport("demo", [Column("a"), Column("b", unit="%")])
    r.add(a=1, b=float("nan"))
    r.add(a=np.int64(2), b=[1, 2])
    with pytest.raises(KeyError):
        r.add(c=3)
    csv_path, json_path = r.write(tmp_path)
    assert csv_path.read_text() == "a,b\n1,nan\n2,1 2\n"
    data = json.loads(json_path.read_text())
    assert data["rows"] == [{"a": 1, "b": "nan"}, {"a": 2, "b": [1, 2]}]
    assert r.row(a=2)["b"] == [1, 2]
    with pytest.raises(KeyError):
        r.row(a=5)
