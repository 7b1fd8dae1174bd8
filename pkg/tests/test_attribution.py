import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tmlp.attribution import ig_attribution, ig_from_activations, target_prob, target_prob_and_grad, top_neurons
from tmlp.model import AblationSpec, TraceRequest, forward, softmax


@pytest.fixture(scope="module")
def state(tiny_weights, tiny_sequences):
    tokens = tiny_sequences[1][:24]
    _, tr = forward(tokens, tiny_weights, request=TraceRequest(resid_pre_mlp=frozenset({11}), mlp=frozenset({11})))
    return tokens, tr.resid_pre_mlp[11][-1], tr.mlp_post[11][-1]


def test_target_prob_matches_forward(tiny_weights, state):
    tokens, resid, h = state
    logits, _ = forward(tokens, tiny_weights)
    p = softmax(logits[-1].astype(np.float64))
    for target in (0, 11, 50256):
        assert target_prob(resid, h, target, tiny_weights)[0] == pytest.approx(p[target], rel=1e-4)


def test_target_prob_under_override_matches_forward(tiny_weights, state):
    # P(target) with h replaced agrees with the full model's override path
    tokens, resid, h = state
    h2 = h.copy()
    h2[[3, 70, 2000]] = [1.5, -0.1, 0.0]
    spec = AblationSpec(override_neurons={11: {3: 1.5, 70: -0.1, 2000: 0.0}}, override_position=len(tokens) - 1)
    logits, _ = forward(tokens, tiny_weights, spec)
    want = softmax(logits[-1].astype(np.float64))[42]
    assert target_prob(resid, h2, 42, tiny_weights)[0] == pytest.approx(want, rel=1e-4)


def test_gradient_matches_finite_differences(tiny_weights, state):
    _, resid, h = state
    h = h.astype(np.float64)
    target = 123
    _, g = target_prob_and_grad(resid, h, target, tiny_weights)
    g = g[0]
    eps = 1e-5
    for n in np.argsort(-np.abs(g))[:20]:
        up, down = h.copy(), h.copy()
        up[n] += eps
        down[n] -= eps
        fd = (target_prob(resid, up, target, tiny_weights)[0] - target_prob(resid, down, target, tiny_weights)[0]) / (2 * eps)
        assert fd == pytest.approx(g[n], rel=1e-2, abs=1e-12)


def test_ig_completeness(tiny_weights, state):
    # with many steps the attributions sum to P(h) - P(0)
    _, resid, h = state
    target = 7
    attr = ig_from_activations(resid, h, target, tiny_weights, steps=400)
    gap = target_prob(resid, h, target, tiny_weights)[0] - target_prob(resid, np.zeros_like(h), target, tiny_weights)[0]
    assert attr.sum() == pytest.approx(gap, rel=2e-2, abs=1e-9)


def test_coarse_and_fine_ig_agree_on_top_neurons(tiny_weights, state):
    _, resid, h = state
    fine = ig_from_activations(resid, h, 99, tiny_weights, steps=1000)
    coarse = ig_from_activations(resid, h, 99, tiny_weights, steps=20)
    overlap = len(set(top_neurons(fine, 20)) & set(top_neurons(coarse, 20)))
    assert overlap >= 15


def test_zero_activation_has_zero_attribution(tiny_weights, state):
    _, resid, h = state
    attr = ig_from_activations(resid, np.zeros_like(h), 5, tiny_weights, steps=10)
    assert np.all(attr == 0)


def test_ig_attribution_reads_the_final_position(tiny_weights, state):
    tokens, resid, h = state
    a = ig_attribution(tokens, 5, 11, 10, tiny_weights)
    b = ig_from_activations(resid, h, 5, tiny_weights, steps=10)
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_only_the_final_layer_is_supported(tiny_weights, state):
    tokens, resid, h = state
    with pytest.raises(ValueError):
        ig_attribution(tokens, 5, 10, 10, tiny_weights)
    with pytest.raises(ValueError):
        target_prob(resid, h, 5, tiny_weights, layer=3)
    with pytest.raises(ValueError):
        ig_attribution(tokens, 5, 11, 0, tiny_weights)


def test_top_neurons_ties_by_index():
    attr = np.array([0.5, 2.0, 0.5, 2.0, -1.0])
    assert top_neurons(attr, 3).tolist() == [1, 3, 0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.integers(1, 40))
def test_top_neurons_is_sorted_descending(values, k):
    attr = np.array(values)
    top = top_neurons(attr, k)
    assert len(top) == min(k, len(values))
    assert np.all(np.diff(attr[top]) <= 0)
