"""Exact tier decomposition of the final MLP and progressive neuron accumulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelWeights, TraceRequest, forward, gelu, layer_norm

CORE = (2123, 2910, 740, 1611, 2044)
DIFFERENTIATORS = (2462, 2173, 1602, 1800, 2379, 1715, 611, 3066, 584, 2378)
SPECIALISTS = (2921, 2709, 971, 2679, 737)
CONSENSUS = (2, 2361, 2460, 2928, 1831, 1245, 2600)
EXCEPTION_NEURON = 2123
ROUTING_LAYER = 11

K_GRID = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 3072)


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class TierPartition:
    core: tuple[int, ...] = CORE
    differentiators: tuple[int, ...] = DIFFERENTIATORS
    specialists: tuple[int, ...] = SPECIALISTS
    d_mlp: int = 3072
    consensus: tuple[int, ...] = CONSENSUS

    def __post_init__(self):
        named = list(self.core) + list(self.differentiators) + list(self.specialists)
        if len(set(named)) != len(named):
            dup = sorted({n for n in named if named.count(n) > 1})
            raise PartitionError(f"neurons {dup} appear in more than one tier")
        bad = [n for n in named if not 0 <= n < self.d_mlp]
        if bad:
            raise PartitionError(f"neuron indices out of range: {bad}")

    @property
    def exception_handler(self) -> tuple[int, ...]:
        return self.core + self.differentiators + self.specialists

    @property
    def routing(self) -> tuple[int, ...]:
        """The 27 named neurons: exception handler plus consensus."""
        return self.exception_handler + self.consensus

    @property
    def residual(self) -> tuple[int, ...]:
        named = set(self.exception_handler)
        return tuple(n for n in range(self.d_mlp) if n not in named)

    def tiers(self) -> dict[str, tuple[int, ...]]:
        return {"core": self.core, "differentiators": self.differentiators,
                "specialists": self.specialists, "residual": self.residual}


def tier_output(h: np.ndarray, tier, weights: ModelWeights, include_bias: bool = False,
                layer: int = ROUTING_LAYER) -> np.ndarray:
    """W_proj restricted to ``tier`` applied to h (vector or rows); b_proj only if asked."""
    block = weights.blocks[layer]
    idx = np.asarray(sorted(tier), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= block.w_proj.shape[0]):
        raise PartitionError("tier index out of range")
    h = np.asarray(h, dtype=np.float32)
    out = h[..., idx] @ block.w_proj[idx] if idx.size else np.zeros(h.shape[:-1] + (block.w_proj.shape[1],), np.float32)
    if include_bias:
        out = out + block.b_proj
    return out


def tier_outputs(h, partition: TierPartition, weights: ModelWeights, layer: int = ROUTING_LAYER):
    """All four tier outputs; b_proj goes to the residual tier."""
    return {name: tier_output(h, idx, weights, include_bias=(name == "residual"), layer=layer)
            for name, idx in partition.tiers().items()}


def reconstruct_check(x: np.ndarray, partition: TierPartition, weights: ModelWeights,
                      layer: int = ROUTING_LAYER):
    """Compare the tier sum against the direct MLP output for residual(s) ``x``.

    Returns (max_abs_diff, cosine); per row when ``x`` is a matrix.
    """
    block = weights.blocks[layer]
    x = np.atleast_2d(np.asarray(x, dtype=np.float32))
    eps = weights.config.ln_eps
    h = gelu(layer_norm(x, block.ln2_w, block.ln2_b, eps) @ block.w_fc + block.b_fc)
    direct = h @ block.w_proj + block.b_proj
    total = sum(tier_outputs(h, partition, weights, layer).values())
    diff = np.abs(total - direct).max(axis=-1)
    d64, t64 = direct.astype(np.float64), total.astype(np.float64)
    cos = (d64 * t64).sum(-1) / (np.linalg.norm(d64, axis=-1) * np.linalg.norm(t64, axis=-1))
    if diff.shape[0] == 1:
        return float(diff[0]), float(cos[0])
    return diff, cos


def tier_norm_shares(h_rows: np.ndarray, partition: TierPartition, weights: ModelWeights,
                     layer: int = ROUTING_LAYER) -> dict[str, float]:
    """Mean over rows of ||tier output|| / sum of the four tier norms."""
    outs = tier_outputs(np.atleast_2d(h_rows), partition, weights, layer)
    norms = {k: np.linalg.norm(v.astype(np.float64), axis=-1) for k, v in outs.items()}
    total = sum(norms.values())
    return {k: float(np.mean(v / total)) for k, v in norms.items()}


def column_norms(weights: ModelWeights, layer: int = ROUTING_LAYER) -> np.ndarray:
    return np.linalg.norm(weights.blocks[layer].w_proj.astype(np.float64), axis=1)


def activation_order(h: np.ndarray, weights: ModelWeights, layer: int = ROUTING_LAYER,
                     norms: np.ndarray | None = None) -> np.ndarray:
    """Neurons by decreasing |h_n| * ||W_proj[:, n]||; ties keep ascending index."""
    norms = column_norms(weights, layer) if norms is None else norms
    score = np.abs(np.asarray(h, dtype=np.float64)) * norms
    return np.argsort(-score, kind="stable")


def token_rank(logits: np.ndarray, target: int) -> np.ndarray:
    """Rank of ``target`` (1 = argmax) per row; ties go to the lower token id."""
    logits = np.atleast_2d(logits)
    t = logits[:, target][:, None]
    ids = np.arange(logits.shape[-1])
    ahead = (logits > t) | ((logits == t) & (ids < target))
    return ahead.sum(axis=-1) + 1


def _final_position_state(prompt_tokens, weights: ModelWeights, layer: int):
    _, trace = forward(prompt_tokens, weights,
                       request=TraceRequest(resid_pre_mlp=frozenset({layer}), mlp=frozenset({layer})))
    return trace.resid_pre_mlp[layer][-1], trace.mlp_post[layer][-1], trace.logits[-1]


def _readout(resid_rows: np.ndarray, weights: ModelWeights, layer: int) -> np.ndarray:
    # residual after the MLP; any later blocks are skipped, so only meaningful for the last layer
    if layer != weights.config.n_layer - 1:
        raise ValueError("progressive readout is defined for the final layer only")
    z = layer_norm(resid_rows, weights.lnf_w, weights.lnf_b, weights.config.ln_eps)
    return z @ weights.wte.T


@dataclass(frozen=True)
class RankTrajectory:
    k_grid: tuple[int, ...]
    ranks: tuple[int, ...]
    pre_mlp_rank: int
    full_rank: int

    @property
    def best(self) -> int:
        return min(self.ranks)


def progressive_rank(prompt_tokens, target_token: int, mode: str, weights: ModelWeights,
                     k_grid=K_GRID, layer: int = ROUTING_LAYER) -> RankTrajectory:
    """Rank of the target at the final position as neurons are accumulated.

    context: neurons in activation order, each contributing h_n * W_proj[:, n].
    static: neurons by column norm alone, each contributing +1 * W_proj[:, n].
    b_proj is added only at k = d_mlp, where context mode reproduces the full model.
    """
    if mode not in ("static", "context"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(prompt_tokens) == 0:
        raise ValueError("empty prompt")
    block = weights.blocks[layer]
    d_mlp = block.w_proj.shape[0]
    resid_mid, h, full_logits = _final_position_state(prompt_tokens, weights, layer)
    norms = column_norms(weights, layer)
    if mode == "context":
        order = activation_order(h, weights, layer, norms)
        contrib = h[order, None] * block.w_proj[order]
    else:
        order = np.argsort(-norms, kind="stable")
        contrib = block.w_proj[order]
    cum = np.cumsum(contrib.astype(np.float64), axis=0)
    k_grid = tuple(k for k in k_grid if k <= d_mlp)
    rows = [resid_mid.astype(np.float64) + cum[k - 1] for k in k_grid]
    rows = np.stack(rows)
    if k_grid and k_grid[-1] == d_mlp:
        if mode == "context":
            # reuse the exact full-model summation order for the endpoint
            rows[-1] = resid_mid + h @ block.w_proj + block.b_proj
        else:
            rows[-1] += block.b_proj
    logits = _readout(rows.astype(np.float32), weights, layer)
    ranks = token_rank(logits, target_token)
    pre = token_rank(_readout(resid_mid[None], weights, layer), target_token)[0]
    full = token_rank(full_logits[None], target_token)[0]
    return RankTrajectory(k_grid, tuple(int(r) for r in ranks), int(pre), int(full))


STAGES = ("pre_mlp", "core", "differentiators", "specialists", "residual")


def progressive_prediction(prompt_tokens, weights: ModelWeights, partition: TierPartition | None = None,
                           layer: int = ROUTING_LAYER) -> dict[str, int]:
    """Top-1 token after adding each tier cumulatively (Core, Diff, Spec, Residual with bias)."""
    partition = partition or TierPartition()
    resid_mid, h, full_logits = _final_position_state(prompt_tokens, weights, layer)
    outs = tier_outputs(h, partition, weights, layer)
    acc = resid_mid.copy()
    rows = [acc]
    for name in ("core", "differentiators", "specialists"):
        acc = acc + outs[name]
        rows.append(acc)
    # the four tiers sum to the MLP output; use the model's own expression for the last stage
    block = weights.blocks[layer]
    rows.append(resid_mid + (h @ block.w_proj + block.b_proj))
    top = _readout(np.stack(rows), weights, layer).argmax(axis=-1)
    return dict(zip(STAGES, (int(t) for t in top)))
