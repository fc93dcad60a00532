"""Per-filter backdoor suspiciousness scoring.

Four heuristics feed the combined score: the spectral norm of the BN-fused
filter, gradient saliency over the defense set, the average activation norm,
and the filter's activation correlation with its layer mates. The combined
score is sqrt(saliency / (correlation * activation)) * spectral; pruning
treats high values as suspicious.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import DTYPES, Tape, Tensor, backward, softmax_cross_entropy, zero_grads
from .network import ActivationTrace, NetworkParams, NetworkSpec, forward, fuse_conv_bn
from .poison import Dataset

EPS_DEFAULT = 1e-2

# Score variants: the combined formula with and without the square root, and
# each heuristic alone. Heuristics that sit in the denominator of the combined
# formula (activation, correlation) are inverted when used alone so that
# larger always means more suspicious.
VARIANTS = ("spectral", "saliency", "activation", "correlation", "nosqrt", "full")

CSV_COLUMNS = ("layer", "filter", "spectral", "saliency", "act_norm",
               "corr_raw", "corr_norm", "suspiciousness", "variant")


@dataclass
class FilterScore:
    layer_index: int
    filter_index: int
    spectral_norm: float
    saliency: float
    activation_norm: float
    correlation_raw: float
    correlation_normalized: float
    suspiciousness: float


@dataclass
class ScoreTable:
    scores: list
    variant: str
    defense_id: str
    eps: float

    def by_layer(self) -> dict:
        layers: dict = {}
        for fs in self.scores:
            layers.setdefault(fs.layer_index, []).append(fs)
        for group in layers.values():
            group.sort(key=lambda fs: fs.filter_index)
        return layers

    def layer_values(self, layer_index: int) -> np.ndarray:
        return np.array([fs.suspiciousness for fs in self.by_layer()[layer_index]])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for fs in self.scores:
                writer.writerow([
                    fs.layer_index, fs.filter_index,
                    repr(fs.spectral_norm), repr(fs.saliency), repr(fs.activation_norm),
                    repr(fs.correlation_raw), repr(fs.correlation_normalized),
                    repr(fs.suspiciousness), self.variant,
                ])

    @classmethod
    def from_csv(cls, path, defense_id: str = "", eps: float = EPS_DEFAULT) -> "ScoreTable":
        scores = []
        variant = "full"
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if tuple(header) != CSV_COLUMNS:
                raise ValueError(f"unexpected score CSV header: {header}")
            for row in reader:
                scores.append(FilterScore(
                    layer_index=int(row[0]), filter_index=int(row[1]),
                    spectral_norm=float(row[2]), saliency=float(row[3]),
                    activation_norm=float(row[4]), correlation_raw=float(row[5]),
                    correlation_normalized=float(row[6]), suspiciousness=float(row[7]),
                ))
                variant = row[8]
        return cls(scores, variant, defense_id, eps)


def spectral_norm(fused_filter, *, tol: float = 1e-6, max_iter: int = 500) -> float:
    """Largest singular value of a filter reshaped to channels x (kh * kw).

    Power iteration runs on the Gram matrix M^T M until the eigen residual
    falls below tol (relative); past max_iter it falls back to a dense
    decomposition.
    """
    arr = np.asarray(fused_filter.data if isinstance(fused_filter, Tensor) else fused_filter,
                     dtype=np.float64)
    if arr.ndim == 3:
        m = arr.reshape(arr.shape[0], -1)
    elif arr.ndim == 2:
        m = arr
    else:
        raise ValueError(f"expected a [Cin,Kh,Kw] filter or 2-d matrix, got {arr.ndim}-d")
    if not np.all(np.isfinite(m)):
        raise ValueError("filter weights must be finite")
    if m.size == 0:
        return 0.0
    gram = m.T @ m
    k = gram.shape[0]
    v = np.full(k, 1.0 / math.sqrt(k))
    for _ in range(max_iter):
        u = gram @ v
        norm_u = np.linalg.norm(u)
        if norm_u == 0.0:
            return 0.0
        v = u / norm_u
        lam = float(v @ (gram @ v))
        residual = np.linalg.norm(gram @ v - lam * v)
        if residual <= tol * max(lam, 1e-30):
            return math.sqrt(max(lam, 0.0))
    return float(np.linalg.svd(m, compute_uv=False)[0])


def filter_saliency_from_grads(per_sample_grads) -> float:
    """Sum over samples of the mean absolute gradient across a filter's weights."""
    return float(sum(np.mean(np.abs(np.asarray(g))) for g in per_sample_grads))


def saliency(spec: NetworkSpec, params: NetworkParams, defense_set: Dataset) -> list:
    """Per-filter gradient saliency, one array of length out_channels per layer.

    Each defense sample contributes the mean absolute loss gradient over the
    filter's raw conv weights, from its own single-sample backward pass with
    batch norm in infer mode.
    """
    if len(defense_set) == 0:
        raise ValueError("defense set must contain at least one sample")
    dt = DTYPES[params.precision]
    totals = [np.zeros(l.weight.data.shape[0], dtype=np.float64) for l in params.conv_layers]
    weights = [l.weight for l in params.conv_layers]
    for i in range(len(defense_set)):
        x = Tensor(defense_set.images[i:i + 1], dtype=dt)
        tape = Tape()
        logits, _, _ = forward(spec, params, x, mode="infer", tape=tape)
        loss = softmax_cross_entropy(logits, defense_set.labels[i:i + 1], tape=tape)
        backward(tape, loss)
        for layer_idx, w in enumerate(weights):
            totals[layer_idx] += np.abs(w.grad.astype(np.float64)).mean(axis=(1, 2, 3))
        zero_grads(params.trainables())
    return totals


def activation_norm(trace: ActivationTrace) -> list:
    """Average l2 norm of each filter's output map over the traced samples."""
    out = []
    for layer in range(len(trace.layer_maps)):
        norms = trace.per_sample_channel_norms(layer)  # [channels, samples]
        out.append(norms.mean(axis=1))
    return out


def pairwise_correlations(per_sample_norms: np.ndarray) -> np.ndarray:
    """Pearson correlations between filters' per-sample activation-norm vectors.

    Input is [filters, samples]; a zero-variance filter correlates 0 with every
    other filter, and the diagonal is 1 by definition.
    """
    v = np.asarray(per_sample_norms, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a [filters, samples] matrix, got {v.ndim}-d")
    if v.shape[1] < 2:
        raise ValueError("correlation needs at least two samples")
    centered = v - v.mean(axis=1, keepdims=True)
    sd = np.sqrt((centered ** 2).sum(axis=1))
    cov = centered @ centered.T
    denom = np.outer(sd, sd)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def correlation_scores(per_sample_norms: np.ndarray, eps: float = EPS_DEFAULT):
    """Per-filter mean off-diagonal correlation, then min-max mapped to [eps, 1].

    A single-filter layer gets the neutral value 1; so does a layer whose raw
    values are all equal (the min-max span is empty there).
    """
    v = np.asarray(per_sample_norms, dtype=np.float64)
    n_filters = v.shape[0]
    if n_filters == 1:
        return np.zeros(1), np.ones(1)
    corr = pairwise_correlations(v)
    off = corr.copy()
    np.fill_diagonal(off, 0.0)
    raw = off.sum(axis=1) / (n_filters - 1)
    span = raw.max() - raw.min()
    if span == 0.0:
        normalized = np.ones(n_filters)
    else:
        normalized = np.maximum((raw - raw.min()) / span, eps)
    return raw, normalized


def suspiciousness(saliency_value: float, correlation_normalized: float,
                   activation_norm_value: float, spectral_norm_value: float,
                   use_sqrt: bool = True, eps: float = EPS_DEFAULT) -> float:
    """Combined score: ratio of saliency to (correlation * activation), scaled
    by the spectral norm; the square root damps the ratio when use_sqrt is on."""
    for name, value in (("saliency", saliency_value),
                        ("correlation_normalized", correlation_normalized),
                        ("activation_norm", activation_norm_value),
                        ("spectral_norm", spectral_norm_value)):
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"{name} must be finite and non-negative, got {value}")
    if correlation_normalized < eps:
        raise ValueError(f"correlation_normalized must be >= eps ({eps}), got {correlation_normalized}")
    ratio = saliency_value / (correlation_normalized * max(activation_norm_value, eps))
    return (math.sqrt(ratio) if use_sqrt else ratio) * spectral_norm_value


def variant_score(fs: FilterScore, variant: str, eps: float = EPS_DEFAULT) -> float:
    """The suspiciousness value a given variant assigns to stored components."""
    if variant == "full":
        return suspiciousness(fs.saliency, fs.correlation_normalized,
                              fs.activation_norm, fs.spectral_norm, True, eps)
    if variant == "nosqrt":
        return suspiciousness(fs.saliency, fs.correlation_normalized,
                              fs.activation_norm, fs.spectral_norm, False, eps)
    if variant == "spectral":
        return fs.spectral_norm
    if variant == "saliency":
        return fs.saliency
    if variant == "activation":
        return 1.0 / max(fs.activation_norm, eps)
    if variant == "correlation":
        return 1.0 / fs.correlation_normalized
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def defense_set_id(defense_set: Dataset) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(defense_set.images).tobytes())
    digest.update(np.ascontiguousarray(defense_set.labels).tobytes())
    return digest.hexdigest()[:12]


def score_network(spec: NetworkSpec, params: NetworkParams, defense_set: Dataset,
                  variant: str = "full", eps: float = EPS_DEFAULT) -> ScoreTable:
    """Score every conv filter of the network on the defense set.

    All four heuristics are always computed and recorded; the variant only
    selects which combination fills the suspiciousness column.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if len(defense_set) < 2:
        raise ValueError("scoring needs at least two defense samples (correlation is undefined on one)")

    dt = DTYPES[params.precision]
    x = Tensor(defense_set.images, dtype=dt)
    _, trace, _ = forward(spec, params, x, capture=True, mode="infer")
    sal = saliency(spec, params, defense_set)
    act = activation_norm(trace)

    scores = []
    for layer_idx, layer in enumerate(params.conv_layers):
        fused = fuse_conv_bn(layer.weight, layer.bn.gamma, layer.bn.running_var, spec.bn_eps)
        norms = trace.per_sample_channel_norms(layer_idx)
        corr_raw, corr_norm = correlation_scores(norms, eps)
        for f_idx in range(layer.weight.data.shape[0]):
            fs = FilterScore(
                layer_index=layer_idx,
                filter_index=f_idx,
                spectral_norm=spectral_norm(fused[f_idx]),
                saliency=float(sal[layer_idx][f_idx]),
                activation_norm=float(act[layer_idx][f_idx]),
                correlation_raw=float(corr_raw[f_idx]),
                correlation_normalized=float(corr_norm[f_idx]),
                suspiciousness=0.0,
            )
            fs.suspiciousness = variant_score(fs, variant, eps)
            scores.append(fs)
    return ScoreTable(scores, variant, defense_set_id(defense_set), eps)
