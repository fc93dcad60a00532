"""Clean accuracy, attack success rate, threshold sweeps, heuristic ablations,
and the Wilcoxon signed-rank test used to compare paired metric runs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import DTYPES, Tensor
from .network import NetworkParams, NetworkSpec, forward
from .poison import Dataset
from .pruning import PruneConfig, prune
from .scoring import EPS_DEFAULT, VARIANTS, ScoreTable, score_network

WILCOXON_EXACT_LIMIT = 20


@dataclass
class EvalResult:
    acc: float
    asr: float
    acc_correct: int
    acc_total: int
    asr_hits: int
    asr_total: int

    def to_dict(self) -> dict:
        return {"acc": self.acc, "asr": self.asr,
                "acc_correct": self.acc_correct, "acc_total": self.acc_total,
                "asr_hits": self.asr_hits, "asr_total": self.asr_total}


@dataclass
class SweepRow:
    mu: float
    acc: float
    asr: float
    pruned_count: int


@dataclass
class AblationRow:
    variant: str
    acc: float
    asr: float
    pruned_count: int


@dataclass
class WilcoxonResult:
    statistic: float
    n_effective: int
    p_value: float
    alternative: str
    method: str
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "n": self.n_effective,
                "p_value": self.p_value, "alternative": self.alternative,
                "method": self.method, "degenerate": self.degenerate}


def predict_logits(spec: NetworkSpec, params: NetworkParams, images: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    """Infer-mode logits for a [N,C,H,W] stack, computed in fixed-order batches."""
    dt = DTYPES[params.precision]
    chunks = []
    for start in range(0, len(images), batch_size):
        x = Tensor(images[start:start + batch_size], dtype=dt)
        logits, _, _ = forward(spec, params, x, mode="infer")
        chunks.append(logits.data)
    return np.concatenate(chunks) if chunks else np.empty((0, spec.num_classes))


def predict_labels(spec: NetworkSpec, params: NetworkParams, images: np.ndarray) -> np.ndarray:
    return predict_logits(spec, params, images).argmax(axis=1)


def accuracy(spec: NetworkSpec, params: NetworkParams, clean_test: Dataset) -> float:
    """Percentage of clean records whose argmax prediction matches the label."""
    if len(clean_test) == 0:
        raise ValueError("cannot measure accuracy on an empty set")
    predictions = predict_labels(spec, params, clean_test.images)
    return 100.0 * float((predictions == clean_test.labels).sum()) / len(clean_test)


def attack_success_rate(spec: NetworkSpec, params: NetworkParams,
                        asr_eval_set: Dataset, target_label: int) -> float:
    """Percentage of triggered records predicted as the target label.

    The eval set must already exclude records whose true label is the target;
    that exclusion is re-checked here.
    """
    if len(asr_eval_set) == 0:
        raise ValueError("cannot measure attack success on an empty set")
    if np.any(asr_eval_set.labels == target_label):
        raise ValueError("asr eval set contains records whose true label is the target")
    predictions = predict_labels(spec, params, asr_eval_set.images)
    return 100.0 * float((predictions == target_label).sum()) / len(asr_eval_set)


def evaluate(spec: NetworkSpec, params: NetworkParams, clean_test: Dataset,
             asr_eval_set: Dataset, target_label: int) -> EvalResult:
    acc_pred = predict_labels(spec, params, clean_test.images)
    asr_pred = predict_labels(spec, params, asr_eval_set.images)
    if np.any(asr_eval_set.labels == target_label):
        raise ValueError("asr eval set contains records whose true label is the target")
    acc_correct = int((acc_pred == clean_test.labels).sum())
    asr_hits = int((asr_pred == target_label).sum())
    return EvalResult(
        acc=100.0 * acc_correct / len(clean_test),
        asr=100.0 * asr_hits / len(asr_eval_set),
        acc_correct=acc_correct, acc_total=len(clean_test),
        asr_hits=asr_hits, asr_total=len(asr_eval_set),
    )


def sweep_mu(spec: NetworkSpec, params: NetworkParams, score_table: ScoreTable,
             mu_grid, clean_test: Dataset, asr_eval_set: Dataset,
             target_label: int) -> list:
    """Prune-and-evaluate once per mu, each from an untouched copy of params."""
    grid = list(mu_grid)
    if not grid:
        raise ValueError("mu grid must be non-empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("mu grid must be sorted ascending")
    rows = []
    for mu in grid:
        pruned_params, report = prune(spec, params, score_table, PruneConfig(mu=mu, eps=score_table.eps))
        result = evaluate(spec, pruned_params, clean_test, asr_eval_set, target_label)
        rows.append(SweepRow(mu=float(mu), acc=result.acc, asr=result.asr,
                             pruned_count=report.total_pruned))
    return rows


def default_mu_grid() -> list:
    return [round(0.5 * i, 1) for i in range(21)]  # 0.0 .. 10.0


def ablate(spec: NetworkSpec, params: NetworkParams, defense_set: Dataset,
           clean_test: Dataset, asr_eval_set: Dataset, target_label: int,
           mu: float, eps: float = EPS_DEFAULT) -> list:
    """Score, prune, and evaluate each variant independently from the same model."""
    rows = []
    for variant in VARIANTS:
        table = score_network(spec, params, defense_set, variant=variant, eps=eps)
        pruned_params, report = prune(spec, params, table, PruneConfig(mu=mu, eps=eps))
        result = evaluate(spec, pruned_params, clean_test, asr_eval_set, target_label)
        rows.append(AblationRow(variant=variant, acc=result.acc, asr=result.asr,
                                pruned_count=report.total_pruned))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mu", "acc", "asr", "pruned_count"])
        for r in rows:
            writer.writerow([repr(r.mu), repr(r.acc), repr(r.asr), r.pruned_count])


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "acc", "asr", "pruned_count"])
        for r in rows:
            writer.writerow([r.variant, repr(r.acc), repr(r.asr), r.pruned_count])


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, with tied values receiving their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_tail_probs(doubled_ranks, doubled_w: int):
    """P(W >= w) and P(W <= w) under the exact sign-flip null distribution.

    Counts subsets of the rank multiset by total (ranks doubled so ties'
    half-ranks stay integral); equivalent to enumerating all 2^n sign
    assignments.
    """
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    denom = float(2 ** len(doubled_ranks))
    p_ge = float(counts[doubled_w:].sum()) / denom
    p_le = float(counts[:doubled_w + 1].sum()) / denom
    return p_ge, p_le


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(a, b, alternative: str = "greater") -> WilcoxonResult:
    """Paired Wilcoxon signed-rank test of a against b.

    Zero differences are dropped; tied absolute differences share mid-ranks;
    the statistic is the sum of positive-difference ranks. The p-value is
    exact (full sign-flip distribution) for up to 20 effective pairs, else a
    tie-corrected normal approximation with continuity correction.
    """
    if alternative not in ("greater", "two-sided"):
        raise ValueError(f"alternative must be 'greater' or 'two-sided', got {alternative!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 1:
        raise ValueError("a and b must be equal-length 1-d sequences with at least one pair")
    d = a - b
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(statistic=0.0, n_effective=0, p_value=1.0,
                              alternative=alternative, method="exact", degenerate=True)
    ranks = _midranks(np.abs(d))
    w = float(ranks[d > 0].sum())

    if n <= WILCOXON_EXACT_LIMIT:
        doubled = [int(round(2.0 * r)) for r in ranks]
        p_ge, p_le = _exact_tail_probs(doubled, int(round(2.0 * w)))
        if alternative == "greater":
            p = p_ge
        else:
            p = min(1.0, 2.0 * min(p_ge, p_le))
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        sd = math.sqrt(float((ranks ** 2).sum()) / 4.0)
        if alternative == "greater":
            p = _normal_sf((w - mean - 0.5) / sd)
        else:
            p = min(1.0, 2.0 * _normal_sf((abs(w - mean) - 0.5) / sd))
        method = "normal approximation"
    return WilcoxonResult(statistic=w, n_effective=n, p_value=p,
                          alternative=alternative, method=method)


def write_wilcoxon_json(result: WilcoxonResult, path, config: dict | None = None) -> None:
    doc = result.to_dict()
    if config is not None:
        doc["config"] = config
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
