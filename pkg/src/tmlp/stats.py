"""Statistics over neuron firing: co-firing, enrichment, bootstrap and paired tests."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import betainc, gammaln
from scipy.stats import rankdata

from .decomposition import CONSENSUS, EXCEPTION_NEURON
from .model import gelu

BONFERRONI_ALPHA = 0.05 / 3072


class DegenerateError(ValueError):
    pass


class BimodalityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# firing matrices

TOKEN_META_DTYPE = np.dtype([("sequence", "<i4"), ("position", "<i4"), ("token", "<i4")])
_MAGIC = b"TMLPFIRE"


@dataclass(frozen=True, eq=False)
class FiringMatrix:
    bits: np.ndarray  # tokens x neurons, bool
    theta: float
    token_meta: np.ndarray  # structured, TOKEN_META_DTYPE

    def __post_init__(self):
        if self.bits.dtype != np.bool_ or self.bits.ndim != 2:
            raise ValueError("bits must be a 2-d boolean array")
        if len(self.token_meta) != self.bits.shape[0]:
            raise ValueError("token_meta length must equal the row count")

    @property
    def n_tokens(self) -> int:
        return self.bits.shape[0]

    def rates(self, idx=None) -> np.ndarray:
        cols = self.bits if idx is None else self.bits[:, list(idx)]
        return cols.mean(axis=0)

    def save(self, path: str | Path) -> None:
        """Binary layout, little-endian throughout:

        magic ``TMLPFIRE`` | u64 token count | u32 neuron count | f64 theta |
        row-major bits packed 8 per byte (``bitorder="little"``), each row padded
        to a whole byte | token meta as 3 x i32 (sequence, position, token) per row.
        """
        n, m = self.bits.shape
        with open(path, "wb") as f:
            f.write(_MAGIC + struct.pack("<QId", n, m, self.theta))
            f.write(np.packbits(self.bits, axis=1, bitorder="little").tobytes())
            f.write(self.token_meta.astype(TOKEN_META_DTYPE).tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "FiringMatrix":
        raw = Path(path).read_bytes()
        if raw[:8] != _MAGIC:
            raise ValueError(f"{path}: not a firing matrix file")
        n, m, theta = struct.unpack_from("<QId", raw, 8)
        off = 8 + struct.calcsize("<QId")
        row_bytes = (m + 7) // 8
        packed = np.frombuffer(raw, np.uint8, n * row_bytes, off).reshape(n, row_bytes)
        bits = np.unpackbits(packed, axis=1, count=m, bitorder="little").astype(bool)
        meta = np.frombuffer(raw, TOKEN_META_DTYPE, n, off + n * row_bytes).copy()
        return cls(bits, theta, meta)


def firing_bits(h: np.ndarray, theta: float) -> np.ndarray:
    return np.abs(h) > theta


def build_firing_matrix(traces, layer: int, theta: float, tokens=None) -> FiringMatrix:
    """Stack |GELU(x)| > theta over the given traces (one per sequence)."""
    rows, metas = [], []
    for s, trace in enumerate(traces):
        if layer not in trace.mlp_pre:
            raise KeyError(f"trace {s} has no MLP pre-activations for layer {layer}")
        x = trace.mlp_pre[layer]
        rows.append(firing_bits(gelu(x), theta))
        meta = np.zeros(len(x), TOKEN_META_DTYPE)
        meta["sequence"] = s
        meta["position"] = np.arange(len(x))
        if tokens is not None:
            meta["token"] = tokens[s][: len(x)]
        metas.append(meta)
    return FiringMatrix(np.concatenate(rows), float(theta), np.concatenate(metas))


@dataclass(frozen=True, eq=False)
class ExceptionRegime:
    mask: np.ndarray
    threshold: float = 1.0

    @classmethod
    def from_activation(cls, h_exception: np.ndarray, threshold: float = 1.0) -> "ExceptionRegime":
        """Signed test on the exception neuron's GELU output (not its magnitude)."""
        return cls(np.asarray(h_exception) > threshold, threshold)

    @property
    def rate(self) -> float:
        return float(self.mask.mean())


# ---------------------------------------------------------------------------
# co-firing


def jaccard(matrix: FiringMatrix, n1: int, n2: int) -> float:
    a, b = matrix.bits[:, n1], matrix.bits[:, n2]
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def pairwise_jaccard(matrix, idx) -> np.ndarray:
    """Symmetric Jaccard matrix over columns ``idx``; pairs that never fire get 0."""
    bits = matrix.bits if isinstance(matrix, FiringMatrix) else matrix
    cols = bits[:, list(idx)].astype(np.float64)
    inter = cols.T @ cols
    counts = np.diag(inter)
    union = counts[:, None] + counts[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def max_offdiagonal(sim: np.ndarray) -> float:
    if sim.shape[0] < 2:
        return float("nan")
    return float(sim[~np.eye(sim.shape[0], dtype=bool)].max())


def min_offdiagonal(sim: np.ndarray) -> float:
    if sim.shape[0] < 2:
        return float("nan")
    return float(sim[~np.eye(sim.shape[0], dtype=bool)].min())


def conditional_fire_rates(matrix: FiringMatrix, regime: ExceptionRegime, idx) -> np.ndarray:
    mask = np.asarray(regime.mask, dtype=bool)
    if mask.shape[0] != matrix.n_tokens:
        raise ValueError("regime mask is not aligned with the firing matrix")
    if not mask.any():
        raise DegenerateError("conditional rate undefined: regime selects no tokens")
    return matrix.bits[mask][:, list(idx)].mean(axis=0)


def consensus_level(matrix: FiringMatrix, rows=None, consensus=CONSENSUS) -> np.ndarray:
    bits = matrix.bits[:, list(consensus)]
    if rows is not None:
        bits = bits[rows]
    return bits.sum(axis=-1)


# ---------------------------------------------------------------------------
# Fisher exact test


def _log_comb(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def hypergeom_log_sf(a: int, row1: int, col1: int, total: int) -> float:
    """log P(X >= a) for X ~ hypergeometric(total, successes=col1, draws=row1)."""
    lo = max(0, row1 + col1 - total)
    hi = min(row1, col1)
    if a <= lo:
        return 0.0
    if a > hi:
        return -math.inf
    x = np.arange(a, hi + 1, dtype=np.float64)
    log_terms = _log_comb(col1, x) + _log_comb(total - col1, row1 - x) - _log_comb(total, row1)
    m = log_terms.max()
    return float(min(0.0, m + np.log(np.exp(log_terms - m).sum())))


@dataclass(frozen=True)
class FisherResult:
    base_rate: float
    regime_rate: float
    enrichment: float  # nan when base rate is zero
    log10_p: float
    significant: bool

    @property
    def p(self) -> float:
        return 10.0 ** self.log10_p


def fisher_one_sided(table) -> float:
    """One-sided (greater) Fisher exact p for [[a, b], [c, d]], as log10."""
    (a, b), (c, d) = table
    lp = hypergeom_log_sf(int(a), int(a + b), int(a + c), int(a + b + c + d))
    return lp / math.log(10)


def fisher_enrichment(matrix: FiringMatrix, regime: ExceptionRegime, neuron: int,
                      alpha: float = BONFERRONI_ALPHA) -> FisherResult:
    """Enrichment of ``neuron`` firing inside the regime versus its overall rate."""
    fire = matrix.bits[:, neuron]
    mask = np.asarray(regime.mask, dtype=bool)
    return fisher_from_vectors(fire, mask, alpha)


def fisher_from_vectors(fire: np.ndarray, mask: np.ndarray, alpha: float = BONFERRONI_ALPHA) -> FisherResult:
    a = int(np.count_nonzero(fire & mask))
    b = int(np.count_nonzero(fire & ~mask))
    c = int(np.count_nonzero(~fire & mask))
    d = int(np.count_nonzero(~fire & ~mask))
    n = a + b + c + d
    base = (a + b) / n
    regime_rate = a / (a + c) if a + c else float("nan")
    enrichment = regime_rate / base if base > 0 else float("nan")
    log10_p = fisher_one_sided([[a, b], [c, d]])
    return FisherResult(base, regime_rate, enrichment, log10_p, log10_p < math.log10(alpha))


# ---------------------------------------------------------------------------
# bimodality


def bimodal_threshold(values, bin_width: float = 0.05, min_peak_fraction: float = 0.02,
                      max_valley_ratio: float = 0.5) -> float:
    """Centre of the least-populated bin between the two dominant histogram modes.

    Modes are local maxima of a 3-bin moving average at least
    ``min_peak_fraction`` of the tallest; a pair counts as separated only if the
    smoothed valley between them drops to ``max_valley_ratio`` of the lower mode.
    Tied minimum bins resolve to the middle one.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < 1000:
        raise BimodalityError(f"need at least 1000 samples, got {values.size}")
    lo, hi = values.min(), values.max()
    n_bins = max(1, int(math.ceil((hi - lo) / bin_width - 1e-9)))
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, lo + n_bins * bin_width))
    return histogram_threshold(counts, edges, min_peak_fraction, max_valley_ratio)


def histogram_threshold(counts, edges, min_peak_fraction: float = 0.02, max_valley_ratio: float = 0.5) -> float:
    """``bimodal_threshold`` on an already accumulated histogram."""
    counts = np.asarray(counts)
    centers = (edges[:-1] + edges[1:]) / 2
    smooth = np.convolve(np.pad(counts.astype(float), 1), np.ones(3) / 3, mode="valid")
    padded = np.pad(smooth, 1, constant_values=-1.0)
    peaks = [i for i in range(len(smooth))
             if padded[i + 1] >= padded[i] and padded[i + 1] > padded[i + 2]
             and smooth[i] >= min_peak_fraction * smooth.max()]
    peaks.sort(key=lambda i: (-smooth[i], i))
    for j, p1 in enumerate(peaks):
        for p2 in peaks[:j]:
            left, right = sorted((p1, p2))
            if right - left < 2:
                continue
            between = slice(left + 1, right)
            if smooth[between].min() > max_valley_ratio * min(smooth[p1], smooth[p2]):
                continue
            raw = counts[between]
            ties = np.flatnonzero(raw == raw.min()) + left + 1
            return float(centers[ties[(len(ties) - 1) // 2]])
    raise BimodalityError("no two separated modes found")


# ---------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lo: float
    hi: float
    resamples: int
    seed: int


def resample_counts(n: int, resamples: int, seed: int) -> np.ndarray:
    """resamples x n matrix of how often each sequence is drawn.

    All indices are drawn up front from one seeded stream, so the result does not
    depend on how downstream work is split.
    """
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(resamples, n))
    counts = np.zeros((resamples, n), dtype=np.int32)
    rows = np.repeat(np.arange(resamples), n)
    np.add.at(counts, (rows, idx.ravel()), 1)
    return counts


def bootstrap_ci(per_sequence, resamples: int = 10_000, seed: int = 42, confidence: float = 0.95) -> BootstrapCI:
    """Sequence-level percentile bootstrap of a weighted mean.

    ``per_sequence`` holds (weight, statistic) pairs, typically (token count,
    sequence mean), so each resample's statistic is the pooled token mean.
    """
    arr = np.asarray(per_sequence, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need at least two sequences")
    w, s = arr[:, 0], arr[:, 1]
    point = float((w * s).sum() / w.sum())
    counts = resample_counts(len(w), resamples, seed).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        stats = (counts @ (w * s)) / (counts @ w)
    stats = stats[np.isfinite(stats)]
    return _percentile_ci(point, stats, resamples, seed, confidence)


def bootstrap_statistic(per_sequence_parts: np.ndarray, statistic, resamples: int = 10_000,
                        seed: int = 42, confidence: float = 0.95) -> BootstrapCI:
    """Percentile bootstrap of ``statistic(summed_parts)`` over sequences.

    ``per_sequence_parts`` is n x k; each resample sums rows with multiplicity and
    applies ``statistic`` to the k-vector (e.g. ratios of pooled sums).
    """
    parts = np.asarray(per_sequence_parts, dtype=np.float64)
    if parts.shape[0] < 2:
        raise ValueError("need at least two sequences")
    point = float(statistic(parts.sum(axis=0)))
    counts = resample_counts(parts.shape[0], resamples, seed).astype(np.float64)
    sums = counts @ parts
    stats = np.array([statistic(row) for row in sums])
    return _percentile_ci(point, stats[np.isfinite(stats)], resamples, seed, confidence)


def _percentile_ci(point, stats, resamples, seed, confidence):
    tail = (1 - confidence) / 2 * 100
    lo, hi = np.percentile(stats, [tail, 100 - tail])
    return BootstrapCI(point, float(lo), float(hi), resamples, seed)


# ---------------------------------------------------------------------------
# paired tests


def _signed_ranks(diffs):
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    return d, rankdata(np.abs(d))


def wilcoxon_null_cdf(ranks, w: float) -> float:
    """P(W+ <= w) under the sign-flip null, by exact enumeration over doubled ranks."""
    doubled = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    total = int(doubled.sum())
    dist = np.zeros(total + 1, dtype=np.float64)
    dist[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist = (dist + shifted) / 2
    return float(dist[: int(math.floor(2 * w + 1e-9)) + 1].sum())


def wilcoxon_signed_rank(pairs, method: str = "auto") -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on (x, y) pairs; W is the smaller rank sum.

    Zero differences are dropped. Exact null distribution for n <= 20 (ties
    handled with average ranks), otherwise normal approximation with tie
    correction and no continuity correction.
    """
    pairs = np.asarray(pairs, dtype=np.float64)
    diffs = pairs[:, 0] - pairs[:, 1] if pairs.ndim == 2 else pairs
    d, ranks = _signed_ranks(diffs)
    n = len(d)
    if n == 0:
        raise DegenerateError("all differences are zero")
    if n < 5 and method == "auto":
        raise DegenerateError(f"need at least 5 non-zero differences, got {n}")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if method == "exact" or (method == "auto" and n <= 20):
        p = min(1.0, 2 * wilcoxon_null_cdf(ranks, w))
    else:
        mean = n * (n + 1) / 4
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - (tie_counts ** 3 - tie_counts).sum() / 48
        z = (w - mean) / math.sqrt(var)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2)))
    return w, p


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail P(|T| > |t|) via the regularized incomplete beta (error < 1e-12)."""
    return float(betainc(df / 2, 0.5, df / (df + t * t)))


def paired_t_test(pairs) -> tuple[float, int, float]:
    pairs = np.asarray(pairs, dtype=np.float64)
    d = pairs[:, 0] - pairs[:, 1]
    n = len(d)
    if n < 2:
        raise ValueError("need at least two pairs")
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateError("differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    return float(t), n - 1, student_t_sf2(t, n - 1)

