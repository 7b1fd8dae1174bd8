"""GPT-2 Small forward pass in float32 numpy, with tracing and MLP surgery hooks.

Weight matrices are stored in (in -> out) orientation, so a projection is
``x @ W + b``. In this layout the output direction written by MLP neuron ``n``
at layer ``l`` is the row ``blocks[l].w_proj[n]``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

log = logging.getLogger(__name__)

GELU_C = np.float32(np.sqrt(2.0 / np.pi))


class LoadError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int = 12
    n_head: int = 12
    d_model: int = 768
    d_mlp: int = 3072
    n_vocab: int = 50257
    n_ctx: int = 1024
    ln_eps: float = 1e-5

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_head


GPT2_SMALL = ModelConfig()


@dataclass(frozen=True, eq=False)
class Block:
    ln1_w: np.ndarray
    ln1_b: np.ndarray
    w_qkv: np.ndarray  # d_model x 3*d_model
    b_qkv: np.ndarray
    w_attn_out: np.ndarray  # d_model x d_model
    b_attn_out: np.ndarray
    ln2_w: np.ndarray
    ln2_b: np.ndarray
    w_fc: np.ndarray  # d_model x d_mlp
    b_fc: np.ndarray
    w_proj: np.ndarray  # d_mlp x d_model
    b_proj: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelWeights:
    config: ModelConfig
    wte: np.ndarray
    wpe: np.ndarray
    blocks: tuple[Block, ...]
    lnf_w: np.ndarray
    lnf_b: np.ndarray

    def __post_init__(self):
        for name, arr in self.named_tensors().items():
            shape = _expected_shapes(self.config)[name]
            if arr.shape != shape:
                raise LoadError(f"tensor {name}: shape {arr.shape}, expected {shape}")
            if arr.dtype != np.float32:
                raise LoadError(f"tensor {name}: dtype {arr.dtype}, expected float32")
            arr.setflags(write=False)

    @property
    def unembed(self) -> np.ndarray:
        # tied weights
        return self.wte

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {"wte.weight": self.wte, "wpe.weight": self.wpe}
        for i, b in enumerate(self.blocks):
            p = f"h.{i}."
            out.update({
                p + "ln_1.weight": b.ln1_w, p + "ln_1.bias": b.ln1_b,
                p + "attn.c_attn.weight": b.w_qkv, p + "attn.c_attn.bias": b.b_qkv,
                p + "attn.c_proj.weight": b.w_attn_out, p + "attn.c_proj.bias": b.b_attn_out,
                p + "ln_2.weight": b.ln2_w, p + "ln_2.bias": b.ln2_b,
                p + "mlp.c_fc.weight": b.w_fc, p + "mlp.c_fc.bias": b.b_fc,
                p + "mlp.c_proj.weight": b.w_proj, p + "mlp.c_proj.bias": b.b_proj,
            })
        out["ln_f.weight"] = self.lnf_w
        out["ln_f.bias"] = self.lnf_b
        return out

    def neuron_directions(self, layer: int) -> np.ndarray:
        """d_mlp x d_model matrix; row n is neuron n's output direction."""
        return self.blocks[layer].w_proj


_BLOCK_FIELDS = {
    "ln_1.weight": "ln1_w", "ln_1.bias": "ln1_b",
    "attn.c_attn.weight": "w_qkv", "attn.c_attn.bias": "b_qkv",
    "attn.c_proj.weight": "w_attn_out", "attn.c_proj.bias": "b_attn_out",
    "ln_2.weight": "ln2_w", "ln_2.bias": "ln2_b",
    "mlp.c_fc.weight": "w_fc", "mlp.c_fc.bias": "b_fc",
    "mlp.c_proj.weight": "w_proj", "mlp.c_proj.bias": "b_proj",
}

# causal-mask buffers and the tied output head carry no parameters of their own
_IGNORED = re.compile(r"^(?:(?:transformer|model)\.)?(?:h\.\d+\.attn\.(?:bias|masked_bias)|lm_head\.weight)$")


def _expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.d_model, cfg.d_mlp
    shapes = {"wte.weight": (cfg.n_vocab, d), "wpe.weight": (cfg.n_ctx, d)}
    per_block = {
        "ln_1.weight": (d,), "ln_1.bias": (d,),
        "attn.c_attn.weight": (d, 3 * d), "attn.c_attn.bias": (3 * d,),
        "attn.c_proj.weight": (d, d), "attn.c_proj.bias": (d,),
        "ln_2.weight": (d,), "ln_2.bias": (d,),
        "mlp.c_fc.weight": (d, m), "mlp.c_fc.bias": (m,),
        "mlp.c_proj.weight": (m, d), "mlp.c_proj.bias": (d,),
    }
    for i in range(cfg.n_layer):
        for k, s in per_block.items():
            shapes[f"h.{i}.{k}"] = s
    shapes["ln_f.weight"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


_DTYPES = {"F32": np.float32, "F16": np.float16, "F64": np.float64}


def _read_header(path: Path) -> dict:
    with open(path, "rb") as f:
        raw = f.read(8)
        if len(raw) != 8:
            raise LoadError(f"{path}: not a tensor container (truncated header)")
        (n,) = struct.unpack("<Q", raw)
        try:
            return json.loads(f.read(n))
        except json.JSONDecodeError as e:
            raise LoadError(f"{path}: corrupt header") from e


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read every tensor from a safetensors container as float32 numpy arrays."""
    from safetensors import safe_open

    path = Path(path)
    header = _read_header(path)
    metadata = header.pop("__metadata__", None) or {}
    for name, info in header.items():
        if info["dtype"] not in _DTYPES and not _IGNORED.match(name):
            raise LoadError(f"tensor {name}: unsupported dtype {info['dtype']}")
    out = {}
    with safe_open(str(path), framework="numpy") as f:
        for name, info in header.items():
            if info["dtype"] not in _DTYPES:
                continue
            out[name] = np.ascontiguousarray(f.get_tensor(name), dtype=np.float32)
    return out, metadata


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], metadata=None) -> None:
    from safetensors.numpy import save_file

    save_file({k: np.ascontiguousarray(v) for k, v in tensors.items()}, str(path), metadata=metadata)


def _canonical_name(name: str) -> str:
    for prefix in ("transformer.", "model."):
        if name.startswith(prefix):
            return name[len(prefix):]
    return name


def weights_from_tensors(tensors: Mapping[str, np.ndarray], config: ModelConfig = GPT2_SMALL) -> ModelWeights:
    expected = _expected_shapes(config)
    named = {}
    for raw_name, arr in tensors.items():
        name = _canonical_name(raw_name)
        if _IGNORED.match(raw_name):
            continue
        if name not in expected:
            raise LoadError(f"unexpected tensor {raw_name}")
        want = expected[name]
        if arr.shape != want and arr.ndim == 2 and arr.shape[::-1] == want:
            # plain linear layout (out x in); normalize to in -> out
            arr = np.ascontiguousarray(arr.T)
        if arr.shape != want:
            raise LoadError(f"tensor {raw_name}: shape {tuple(arr.shape)}, expected {want}")
        named[name] = np.asarray(arr, dtype=np.float32)
    missing = [n for n in expected if n not in named]
    if missing:
        raise LoadError(f"missing tensor {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))

    blocks = []
    for i in range(config.n_layer):
        blocks.append(Block(**{attr: named[f"h.{i}.{k}"] for k, attr in _BLOCK_FIELDS.items()}))
    return ModelWeights(
        config=config,
        wte=named["wte.weight"],
        wpe=named["wpe.weight"],
        blocks=tuple(blocks),
        lnf_w=named["ln_f.weight"],
        lnf_b=named["ln_f.bias"],
    )


def tensor_manifest_digest(weights: ModelWeights) -> str:
    h = hashlib.sha256()
    for name, arr in weights.named_tensors().items():
        h.update(f"{name}:{arr.shape}\n".encode())
    return h.hexdigest()[:16]


def load_weights(path: str | Path, config: ModelConfig | None = None) -> ModelWeights:
    """Load a GPT-2 checkpoint from a safetensors file.

    The config, if not given, is read from the container metadata and falls
    back to GPT-2 Small.
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"{path}: no such file")
    tensors, metadata = read_tensors(path)
    if config is None:
        config = ModelConfig(**json.loads(metadata["config"])) if "config" in metadata else GPT2_SMALL
    weights = weights_from_tensors(tensors, config)
    log.info("loaded %d tensors from %s (name/shape digest %s)",
             len(weights.named_tensors()), path, tensor_manifest_digest(weights))
    return weights


def save_weights(weights: ModelWeights, path: str | Path) -> None:
    cfg = weights.config
    meta = {"config": json.dumps(cfg.__dict__, sort_keys=True)}
    write_tensors(path, weights.named_tensors(), metadata=meta)


def random_init(seed: int, config: ModelConfig = GPT2_SMALL, std: float = 0.02) -> ModelWeights:
    """Untrained weights: N(0, std) matrices and embeddings, zero biases, unit LN scales."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _expected_shapes(config).items():
        if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name == "ln_f.weight":
            tensors[name] = np.ones(shape, np.float32)
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape, np.float32)
        else:
            tensors[name] = rng.standard_normal(shape, dtype=np.float32) * np.float32(std)
    return weights_from_tensors(tensors, config)


# ---------------------------------------------------------------------------
# primitives


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU, as in the released GPT-2."""
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(GELU_C * (x + np.float32(0.044715) * x ** 3)))


def layer_norm(x: np.ndarray, w: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + np.float32(eps)) * w + b


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# ablation and tracing


@dataclass(frozen=True)
class AblationSpec:
    """MLP interventions, keyed by layer.

    ``zero_mlp`` removes a layer's whole MLP contribution (h-term and b_proj).
    ``zero_neurons`` zeroes entries of h before W_proj; ``override_neurons``
    replaces entries of h with fixed values (at every position, or only at
    ``override_position`` when set). ``scale_h`` multiplies all of h.
    """

    zero_mlp: frozenset[int] = frozenset()
    zero_neurons: Mapping[int, tuple[int, ...]] = field(default_factory=dict)
    override_neurons: Mapping[int, Mapping[int, float]] = field(default_factory=dict)
    override_position: int | None = None
    scale_h: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "zero_mlp", frozenset(self.zero_mlp))
        for layer in self.scale_h:
            if layer in self.zero_mlp:
                raise ValueError(f"layer {layer}: zero_mlp and scale_h are mutually exclusive")
            if not 0.0 <= self.scale_h[layer] <= 1.0:
                raise ValueError(f"layer {layer}: scale_h must lie in [0, 1]")
        for layer, idx in self.zero_neurons.items():
            clash = set(idx) & set(self.override_neurons.get(layer, {}))
            if clash:
                raise ValueError(f"layer {layer}: neurons {sorted(clash)} both zeroed and overridden")

    @classmethod
    def none(cls) -> "AblationSpec":
        return cls()

    def is_empty(self) -> bool:
        return not (self.zero_mlp or self.zero_neurons or self.override_neurons or self.scale_h)

    def layers(self) -> set[int]:
        return set(self.zero_mlp) | set(self.zero_neurons) | set(self.override_neurons) | set(self.scale_h)

    def apply_to_h(self, layer: int, h: np.ndarray) -> np.ndarray:
        if layer not in self.zero_neurons and layer not in self.override_neurons and layer not in self.scale_h:
            return h
        h = h.copy()
        if layer in self.scale_h:
            h *= np.float32(self.scale_h[layer])
        idx = list(self.zero_neurons.get(layer, ()))
        if idx:
            h[:, idx] = 0.0
        over = self.override_neurons.get(layer)
        if over:
            cols = np.fromiter(over.keys(), dtype=np.int64)
            vals = np.fromiter(over.values(), dtype=np.float32)
            if self.override_position is None:
                h[:, cols] = vals
            else:
                h[self.override_position, cols] = vals
        return h


@dataclass(frozen=True)
class TraceRequest:
    embed: bool = False
    resid_pre_mlp: frozenset[int] = frozenset()
    resid_post: frozenset[int] = frozenset()
    mlp: frozenset[int] = frozenset()
    attention: frozenset[tuple[int, int]] = frozenset()

    @classmethod
    def everything(cls, config: ModelConfig = GPT2_SMALL) -> "TraceRequest":
        layers = frozenset(range(config.n_layer))
        return cls(True, layers, layers, layers,
                   frozenset((l, h) for l in layers for h in range(config.n_head)))


@dataclass
class Trace:
    embed: np.ndarray | None = None
    resid_pre_mlp: dict[int, np.ndarray] = field(default_factory=dict)
    resid_post: dict[int, np.ndarray] = field(default_factory=dict)
    mlp_pre: dict[int, np.ndarray] = field(default_factory=dict)  # x = W_fc.ln2(resid) + b_fc
    mlp_post: dict[int, np.ndarray] = field(default_factory=dict)  # h = GELU(x), before any ablation
    attention: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    logits: np.ndarray | None = None

    def boundary_residual(self, layer: int | None) -> np.ndarray:
        """Residual after block ``layer``; ``None`` is the embedding output."""
        if layer is None:
            if self.embed is None:
                raise KeyError("embedding residual was not traced")
            return self.embed
        try:
            return self.resid_post[layer]
        except KeyError:
            raise KeyError(f"residual after layer {layer} was not traced") from None


# ---------------------------------------------------------------------------
# forward


def attention(x: np.ndarray, block: Block, cfg: ModelConfig, keep_heads=()):
    """Causal multi-head self-attention on layer-normed input ``x``.

    Returns the block's attention output and {head: weights} for ``keep_heads``.
    """
    T = x.shape[0]
    nh, dh = cfg.n_head, cfg.d_head
    qkv = x @ block.w_qkv + block.b_qkv
    q, k, v = np.split(qkv, 3, axis=-1)
    q = q.reshape(T, nh, dh).transpose(1, 0, 2)
    k = k.reshape(T, nh, dh).transpose(1, 0, 2)
    v = v.reshape(T, nh, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.float32(np.sqrt(dh))
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores[:, mask] = -np.inf
    pattern = softmax(scores, axis=-1)
    z = (pattern @ v).transpose(1, 0, 2).reshape(T, cfg.d_model)
    out = z @ block.w_attn_out + block.b_attn_out
    return out, {h: pattern[h] for h in keep_heads}


def attention_per_head(x: np.ndarray, block: Block, cfg: ModelConfig) -> np.ndarray:
    """Each head's contribution to the attention output (n_head x T x d_model), bias excluded."""
    T = x.shape[0]
    nh, dh = cfg.n_head, cfg.d_head
    qkv = x @ block.w_qkv + block.b_qkv
    q, k, v = (a.reshape(T, nh, dh).transpose(1, 0, 2) for a in np.split(qkv, 3, axis=-1))
    scores = q @ k.transpose(0, 2, 1) / np.float32(np.sqrt(dh))
    scores[:, np.triu(np.ones((T, T), dtype=bool), k=1)] = -np.inf
    z = softmax(scores, axis=-1) @ v
    w_o = block.w_attn_out.reshape(nh, dh, cfg.d_model)
    return np.einsum("htd,hdo->hto", z, w_o)


def mlp_hidden(resid: np.ndarray, block: Block, eps: float) -> tuple[np.ndarray, np.ndarray]:
    x = layer_norm(resid, block.ln2_w, block.ln2_b, eps) @ block.w_fc + block.b_fc
    return x, gelu(x)


def mlp_out(h: np.ndarray, block: Block) -> np.ndarray:
    return h @ block.w_proj + block.b_proj


def _run_blocks(resid, weights, ablation, request, trace, start_layer, start_resid_mid=None):
    cfg = weights.config
    for layer in range(start_layer, cfg.n_layer):
        block = weights.blocks[layer]
        if layer == start_layer and start_resid_mid is not None:
            resid = start_resid_mid
        else:
            heads = [h for (l, h) in request.attention if l == layer]
            attn_out, patterns = attention(
                layer_norm(resid, block.ln1_w, block.ln1_b, cfg.ln_eps), block, cfg, heads)
            for h, p in patterns.items():
                trace.attention[(layer, h)] = p
            resid = resid + attn_out
        if layer in request.resid_pre_mlp:
            trace.resid_pre_mlp[layer] = resid
        if layer in ablation.zero_mlp:
            if layer in request.mlp:
                x, h = mlp_hidden(resid, block, cfg.ln_eps)
                trace.mlp_pre[layer], trace.mlp_post[layer] = x, h
        else:
            x, h = mlp_hidden(resid, block, cfg.ln_eps)
            if layer in request.mlp:
                trace.mlp_pre[layer], trace.mlp_post[layer] = x, h
            resid = resid + mlp_out(ablation.apply_to_h(layer, h), block)
        if layer in request.resid_post:
            trace.resid_post[layer] = resid
    return resid


def unembed(resid: np.ndarray, weights: ModelWeights) -> np.ndarray:
    z = layer_norm(resid, weights.lnf_w, weights.lnf_b, weights.config.ln_eps)
    return z @ weights.wte.T


def forward(tokens, weights: ModelWeights, ablation: AblationSpec | None = None,
            request: TraceRequest | None = None, compute_logits: bool = True) -> tuple[np.ndarray, Trace]:
    """Run the model on one token sequence; returns (T x n_vocab logits, Trace).

    With ``compute_logits=False`` the unembedding is skipped and logits are None.
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise ValueError("tokens must be a non-empty 1-d sequence")
    if len(tokens) > cfg.n_ctx:
        raise ValueError(f"sequence of {len(tokens)} tokens exceeds context length {cfg.n_ctx}")
    if tokens.min() < 0 or tokens.max() >= cfg.n_vocab:
        raise ValueError("token id out of range")
    ablation = ablation or AblationSpec()
    request = request or TraceRequest()
    trace = Trace()
    resid = weights.wte[tokens] + weights.wpe[: len(tokens)]
    if request.embed:
        trace.embed = resid
    resid = _run_blocks(resid, weights, ablation, request, trace, 0)
    logits = unembed(resid, weights) if compute_logits else None
    trace.logits = logits
    return logits, trace


def resume_from_mlp(resid_pre_mlp: np.ndarray, layer: int, weights: ModelWeights,
                    ablation: AblationSpec | None = None) -> np.ndarray:
    """Logits from a traced pre-MLP residual at ``layer`` onward.

    Equivalent to ``forward`` whenever the ablation touches only layers >= ``layer``.
    """
    ablation = ablation or AblationSpec()
    if any(l < layer for l in ablation.layers()):
        raise ValueError("ablation acts upstream of the resume point")
    resid = _run_blocks(None, weights, ablation, TraceRequest(), Trace(), layer, start_resid_mid=resid_pre_mlp)
    return unembed(resid, weights)


def token_nll(logits: np.ndarray, tokens) -> np.ndarray:
    """Negative log-probability (nats) of tokens[1:] under logits[:-1]."""
    tokens = np.asarray(tokens)
    lp = log_softmax(logits[:-1].astype(np.float64), axis=-1)
    return -lp[np.arange(len(tokens) - 1), tokens[1:]]


def sequence_nll(tokens, weights, ablation=None) -> np.ndarray:
    logits, _ = forward(tokens, weights, ablation)
    return token_nll(logits, tokens)


def perplexity(sequences, weights: ModelWeights, ablation: AblationSpec | None = None) -> float:
    if len(sequences) == 0:
        raise ValueError("empty corpus")
    total, count = 0.0, 0
    for seq in sequences:
        nll = sequence_nll(seq, weights, ablation)
        total += nll.sum()
        count += len(nll)
    if count == 0:
        raise ValueError("corpus has no predicted tokens")
    return float(np.exp(total / count))


def logit_lens(residual: np.ndarray, weights: ModelWeights) -> np.ndarray:
    """Next-token distribution read from a residual (row or rows) via ln_f + unembedding."""
    return softmax(unembed(residual, weights).astype(np.float64), axis=-1)


def lens_top1(residual: np.ndarray, weights: ModelWeights) -> np.ndarray:
    return unembed(residual, weights).argmax(axis=-1)


def bos_attention_mass(trace: Trace, layer: int, head: int) -> np.ndarray:
    try:
        pattern = trace.attention[(layer, head)]
    except KeyError:
        raise KeyError(f"attention for layer {layer} head {head} was not traced") from None
    return pattern[:, 0]
