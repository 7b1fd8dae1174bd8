"""Tuned-lens probes: one affine map per block boundary, read out through ln_f + unembedding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (ModelConfig, ModelWeights, TraceRequest, forward, layer_norm, log_softmax,
                    read_tensors, write_tensors)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def boundary_names(config: ModelConfig) -> list[str]:
    return ["emb"] + [str(i) for i in range(config.n_layer)]


def boundary_layer(name: str) -> int | None:
    return None if name == "emb" else int(name)


@dataclass(frozen=True)
class TunedLensConfig:
    learning_rate: float = 1e-4
    epochs: int = 2
    n_sequences: int = 100

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be finite and positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True, eq=False)
class TunedLensProbes:
    """Affine maps keyed by boundary name ("emb", "0", ..., "11")."""

    weight: dict[str, np.ndarray]
    bias: dict[str, np.ndarray]
    loss_history: dict[str, list[float]] = field(default_factory=dict)

    @classmethod
    def identity(cls, config: ModelConfig) -> "TunedLensProbes":
        d = config.d_model
        names = boundary_names(config)
        return cls({n: np.eye(d, dtype=np.float32) for n in names},
                   {n: np.zeros(d, np.float32) for n in names})

    def apply(self, name: str, resid: np.ndarray) -> np.ndarray:
        return resid @ self.weight[name] + self.bias[name]

    def logits(self, name: str, resid: np.ndarray, weights: ModelWeights) -> np.ndarray:
        z = layer_norm(self.apply(name, resid), weights.lnf_w, weights.lnf_b, weights.config.ln_eps)
        return z @ weights.wte.T

    def save(self, path: str | Path) -> None:
        tensors = {}
        for n in self.weight:
            tensors[f"probe.{n}.weight"] = self.weight[n]
            tensors[f"probe.{n}.bias"] = self.bias[n]
        write_tensors(path, tensors)

    @classmethod
    def load(cls, path: str | Path) -> "TunedLensProbes":
        tensors, _ = read_tensors(path)
        names = sorted({k.split(".")[1] for k in tensors}, key=lambda s: -1 if s == "emb" else int(s))
        return cls({n: tensors[f"probe.{n}.weight"] for n in names},
                   {n: tensors[f"probe.{n}.bias"] for n in names})


def _kl_step(resid, p_final, log_p_final, A, b, weights: ModelWeights):
    """Mean KL(final || probe) over rows and its gradient w.r.t. (A, b)."""
    eps = weights.config.ln_eps
    y = resid @ A + b
    mu = y.mean(axis=-1, keepdims=True)
    yc = y - mu
    sigma = np.sqrt((yc * yc).mean(axis=-1, keepdims=True) + np.float32(eps))
    yhat = yc / sigma
    z = yhat * weights.lnf_w + weights.lnf_b
    logits = z @ weights.wte.T
    log_q = log_softmax(logits)
    T = resid.shape[0]
    loss = float((p_final * (log_p_final - log_q)).sum(axis=-1).mean())
    # d KL / d logits = q - p
    g_logits = (np.exp(log_q) - p_final) / np.float32(T)
    g_z = g_logits @ weights.wte
    g = g_z * weights.lnf_w
    g_y = (g - g.mean(axis=-1, keepdims=True) - yhat * (g * yhat).mean(axis=-1, keepdims=True)) / sigma
    return loss, resid.T @ g_y, g_y.sum(axis=0)


def train_tuned_lens(sequences, weights: ModelWeights, config: TunedLensConfig | None = None,
                     init: TunedLensProbes | None = None) -> TunedLensProbes:
    """Fit every boundary probe by SGD on KL(final distribution || probe distribution).

    One step per sequence; ``sequences`` must be disjoint from evaluation data.
    """
    config = config or TunedLensConfig()
    cfg = weights.config
    names = boundary_names(cfg)
    start = init or TunedLensProbes.identity(cfg)
    A = {n: start.weight[n].copy() for n in names}
    b = {n: start.bias[n].copy() for n in names}
    history = {n: [] for n in names}
    seqs = list(sequences)[: config.n_sequences]
    if not seqs:
        raise ValueError("no training sequences")
    lr = np.float32(config.learning_rate)
    request = TraceRequest(embed=True, resid_post=frozenset(range(cfg.n_layer)))
    step = 0
    for epoch in range(config.epochs):
        epoch_loss = {n: 0.0 for n in names}
        for seq in seqs:
            logits, trace = forward(seq, weights, request=request)
            log_p = log_softmax(logits)
            p = np.exp(log_p)
            for n in names:
                resid = trace.boundary_residual(boundary_layer(n))
                loss, gA, gb = _kl_step(resid, p, log_p, A[n], b[n], weights)
                if not np.isfinite(loss) or not (np.all(np.isfinite(gA)) and np.all(np.isfinite(gb))):
                    raise TrainingError(f"tuned lens diverged at layer {n}, step {step}")
                A[n] -= lr * gA
                b[n] -= lr * gb
                # an overflowing probe can still report a finite loss once LN saturates
                if not (np.all(np.isfinite(A[n])) and np.all(np.isfinite(b[n]))):
                    raise TrainingError(f"tuned lens diverged at layer {n}, step {step}")
                epoch_loss[n] += loss
            step += 1
        for n in names:
            history[n].append(epoch_loss[n] / len(seqs))
        log.info("tuned lens epoch %d: mean KL %s", epoch,
                 {n: round(v[-1], 4) for n, v in history.items()})
    return TunedLensProbes(A, b, history)


def lens_predictions(tokens, weights: ModelWeights, probes: TunedLensProbes | None = None):
    """Top-1 token per boundary and position, for the logit lens and (optionally) the tuned lens.

    Returns (logit_top1, tuned_top1) as {boundary name: T-vector}; tuned is None without probes.
    """
    cfg = weights.config
    _, trace = forward(tokens, weights,
                       request=TraceRequest(embed=True, resid_post=frozenset(range(cfg.n_layer))))
    logit_top1, tuned_top1 = {}, ({} if probes is not None else None)
    for n in boundary_names(cfg):
        resid = trace.boundary_residual(boundary_layer(n))
        z = layer_norm(resid, weights.lnf_w, weights.lnf_b, cfg.ln_eps)
        logit_top1[n] = (z @ weights.wte.T).argmax(axis=-1)
        if probes is not None:
            tuned_top1[n] = probes.logits(n, resid, weights).argmax(axis=-1)
    return logit_top1, tuned_top1

