"""Per-layer outlier pruning of suspicious filters.

A layer's threshold is mean + mu * std (population std) over its
suspiciousness scores; filters strictly above it get their batch-norm scale
and shift zeroed, which silences the channel and its recorded statistics in
one move. Conv weights stay untouched, so pruning is non-destructive and
reversible at the parameter level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkParams, NetworkSpec
from .scoring import EPS_DEFAULT, ScoreTable


@dataclass(frozen=True)
class PruneConfig:
    mu: float = 3.5
    eps: float = EPS_DEFAULT

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")


@dataclass
class LayerPruneStats:
    layer_index: int
    mean: float
    std: float
    threshold: float
    pruned: list

    def to_dict(self) -> dict:
        return {"layer": self.layer_index, "mean": self.mean, "std": self.std,
                "threshold": self.threshold, "pruned": list(self.pruned)}


@dataclass
class PruneReport:
    layers: list
    mu: float
    total_filters: int

    @property
    def total_pruned(self) -> int:
        return sum(len(l.pruned) for l in self.layers)

    def pruned_set(self) -> set:
        return {(l.layer_index, f) for l in self.layers for f in l.pruned}

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "total_filters": self.total_filters,
            "total_pruned": self.total_pruned,
            "layers": [l.to_dict() for l in self.layers],
        }

    def to_json(self, path, config: dict | None = None) -> None:
        doc = self.to_dict()
        if config is not None:
            doc["config"] = config
        with open(path, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")


def layer_threshold(scores, mu: float) -> float:
    """mean + mu * population std of one layer's suspiciousness scores."""
    values = np.asarray(scores, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot threshold an empty layer")
    return float(values.mean() + mu * values.std())


def prune(spec: NetworkSpec, params: NetworkParams, score_table: ScoreTable,
          config: PruneConfig):
    """Zero the BN gamma and beta of every filter strictly above its layer threshold.

    Returns a fresh parameter set and a report; the input params are left
    unmodified.
    """
    by_layer = score_table.by_layer()
    if sorted(by_layer) != list(range(len(params.conv_layers))):
        raise ValueError(
            f"score table covers layers {sorted(by_layer)} but the network has "
            f"{len(params.conv_layers)} conv layers")
    for layer_idx, layer in enumerate(params.conv_layers):
        if len(by_layer[layer_idx]) != layer.weight.data.shape[0]:
            raise ValueError(
                f"layer {layer_idx}: {len(by_layer[layer_idx])} scores for "
                f"{layer.weight.data.shape[0]} filters")

    new_params = params.copy()
    stats = []
    total_filters = 0
    for layer_idx, group in sorted(by_layer.items()):
        values = np.array([fs.suspiciousness for fs in group])
        total_filters += len(values)
        mean = float(values.mean())
        std = float(values.std())
        threshold = layer_threshold(values, config.mu)
        pruned = [fs.filter_index for fs, v in zip(group, values) if v > threshold]
        for f_idx in pruned:
            new_params.conv_layers[layer_idx].bn.gamma.data[f_idx] = 0.0
            new_params.conv_layers[layer_idx].bn.beta.data[f_idx] = 0.0
        stats.append(LayerPruneStats(layer_idx, mean, std, threshold, pruned))
    return new_params, PruneReport(stats, config.mu, total_filters)
