"""Integrated-gradients attribution for final-layer MLP neurons.

The gradient of P(target) with respect to the MLP hidden activation is taken
by hand through the only operations downstream of it in the last block:
W_proj, the residual addition, the final layernorm, the tied unembedding and
the softmax. The computation runs in float64 so that finite-difference
checks on single neurons are meaningful.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .model import ModelWeights, TraceRequest, forward


def _ln_forward(x, w, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / sigma
    return xhat * w + b, xhat, sigma


def _ln_backward(g_y, xhat, sigma, w):
    g = g_y * w
    return (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)) / sigma


@lru_cache(maxsize=1)
def _head64(weights: ModelWeights, layer: int):
    block = weights.blocks[layer]
    return (block.w_proj.astype(np.float64), block.b_proj.astype(np.float64),
            weights.lnf_w.astype(np.float64), weights.lnf_b.astype(np.float64),
            weights.wte.astype(np.float64))


def target_prob(resid_mid: np.ndarray, h: np.ndarray, target: int, weights: ModelWeights,
                layer: int | None = None) -> np.ndarray:
    """P(target) at one position for each row of ``h`` (S x d_mlp), float64."""
    return target_prob_and_grad(resid_mid, h, target, weights, layer, grad=False)[0]


def target_prob_and_grad(resid_mid, h, target, weights: ModelWeights, layer=None, grad=True):
    """P(target) and dP/dh for each row of ``h`` at a single position.

    ``resid_mid`` is the residual entering the MLP (768,), ``h`` a batch of
    hidden activations (S x d_mlp) fed through W_proj in place of the actual one.
    """
    cfg = weights.config
    layer = cfg.n_layer - 1 if layer is None else layer
    if layer != cfg.n_layer - 1:
        raise ValueError("the manual gradient path covers only the final MLP layer")
    w_proj, b_proj, lnf_w, lnf_b, wte = _head64(weights, layer)
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    out = np.asarray(resid_mid, dtype=np.float64) + h @ w_proj + b_proj
    z, xhat, sigma = _ln_forward(out, lnf_w, lnf_b, cfg.ln_eps)
    logits = z @ wte.T
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    pt = p[:, target]
    if not grad:
        return pt, None
    # dP_t/dlogits = P_t (onehot_t - p)
    g_logits = -pt[:, None] * p
    g_logits[:, target] += pt
    g_z = g_logits @ wte
    g_out = _ln_backward(g_z, xhat, sigma, lnf_w)
    return pt, g_out @ w_proj.T


def ig_from_activations(resid_mid, h, target: int, weights: ModelWeights, steps: int = 20,
                        layer: int | None = None) -> np.ndarray:
    """Riemann-sum integrated gradients from a zero baseline to ``h``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = np.asarray(h, dtype=np.float64)
    alphas = np.arange(1, steps + 1, dtype=np.float64) / steps
    grads = np.zeros_like(h)
    # chunk to bound the S x n_vocab logits buffer
    for chunk in np.array_split(alphas, max(1, int(np.ceil(steps / 25)))):
        _, g = target_prob_and_grad(resid_mid, chunk[:, None] * h[None, :], target, weights, layer)
        grads += g.sum(axis=0)
    return h * grads / steps


def ig_attribution(prompt_tokens, target_token: int, layer: int, steps: int, weights: ModelWeights,
                   position: int = -1) -> np.ndarray:
    """Per-neuron integrated-gradients attribution for P(target) at ``position``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if layer != weights.config.n_layer - 1:
        raise ValueError(f"no manual gradient path for layer {layer}; only the final layer is supported")
    _, trace = forward(prompt_tokens, weights,
                       request=TraceRequest(resid_pre_mlp=frozenset({layer}), mlp=frozenset({layer})))
    resid_mid = trace.resid_pre_mlp[layer][position]
    h = trace.mlp_post[layer][position]
    return ig_from_activations(resid_mid, h, target_token, weights, steps, layer)


def top_neurons(attributions: np.ndarray, k: int = 20) -> np.ndarray:
    """Indices of the k largest attributions, ties broken by ascending index."""
    order = np.lexsort((np.arange(len(attributions)), -attributions))
    return order[:k]
