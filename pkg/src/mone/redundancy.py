"""Expert redundancy scores and per-layer prune-set selection.

Lower score means more redundant. ``mone`` multiplies the output-spread
score by the mean-routing-score score; ``var_only`` / ``freq_only`` keep one
factor; ``routing_score_rs`` ranks by total routing mass; ``random`` is a
seeded control.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError


class ScoreMethod(str, Enum):
    MONE = "mone"
    VAR_ONLY = "var_only"
    FREQ_ONLY = "freq_only"
    ROUTING_SCORE_RS = "routing_score_rs"
    RANDOM = "random"

    @classmethod
    def parse(cls, value):
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(
                f"unknown scoring method {value!r}; expected one of {[m.value for m in cls]}", field="method"
            ) from None


FREQ_NORMALIZATIONS = ("activations", "total_tokens")


@dataclass
class LayerScores:
    layer_index: int
    phi: np.ndarray
    method: ScoreMethod
    degenerate_mask: np.ndarray
    phi_var: np.ndarray
    phi_freq: np.ndarray


def phi_var(summary) -> float:
    """Euclidean norm of the per-coordinate unbiased standard deviation."""
    if summary.degenerate:
        return 0.0
    return float(np.linalg.norm(np.sqrt(summary.var_unbiased)))


def phi_freq(summary, total_tokens=None) -> float:
    """Mean routing score over the expert's activations.

    With ``total_tokens`` the routing mass is divided by the token count
    instead, so rarely selected experts score low.
    """
    if summary.n == 0:
        return 0.0
    if total_tokens is not None:
        return float(summary.score_sum / total_tokens)
    return float(summary.score_sum / summary.n)


def phi_fused(summary, total_tokens=None) -> float:
    return phi_var(summary) * phi_freq(summary, total_tokens)


def score_layer(summaries, method, *, layer_index=0, seed=0, freq_normalization="activations",
                total_tokens=None) -> LayerScores:
    method = ScoreMethod.parse(method) if not isinstance(method, ScoreMethod) else method
    if freq_normalization not in FREQ_NORMALIZATIONS:
        raise ConfigError(f"freq_normalization must be one of {FREQ_NORMALIZATIONS}", field="freq_normalization")
    norm_tokens = None
    if freq_normalization == "total_tokens":
        if not total_tokens:
            raise ConfigError("total_tokens is required for freq_normalization='total_tokens'", field="total_tokens")
        norm_tokens = total_tokens
    pv = np.array([phi_var(s) for s in summaries])
    pf = np.array([phi_freq(s, norm_tokens) for s in summaries])
    degenerate = np.array([s.degenerate for s in summaries], dtype=bool)
    if method is ScoreMethod.MONE:
        phi = pv * pf
    elif method is ScoreMethod.VAR_ONLY:
        phi = pv.copy()
    elif method is ScoreMethod.FREQ_ONLY:
        phi = pf.copy()
    elif method is ScoreMethod.ROUTING_SCORE_RS:
        phi = np.array([float(s.score_sum) for s in summaries])
    else:
        phi = np.random.default_rng([int(seed), int(layer_index)]).random(len(summaries))
    return LayerScores(layer_index, phi, method, degenerate, pv, pf)


def prune_count(ratio, n_experts) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"pruning ratio {ratio} outside [0, 1]", field="ratio")
    return min(n_experts, int(math.floor(ratio * n_experts + 0.5)))


def select_prune_set(scores: LayerScores, ratio) -> tuple:
    """The ``round(ratio * M)`` lowest-scoring experts, ties to the lower index.

    Returned in ascending index order.
    """
    phi = np.asarray(scores.phi)
    count = prune_count(ratio, phi.shape[0])
    order = np.lexsort((np.arange(phi.shape[0]), phi))
    return tuple(sorted(int(i) for i in order[:count]))


def export_scores_csv(all_scores, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "expert", "phi_var", "phi_freq", "phi", "method", "degenerate"])
        for ls in all_scores:
            for e in range(ls.phi.shape[0]):
                w.writerow([ls.layer_index, e, repr(float(ls.phi_var[e])), repr(float(ls.phi_freq[e])),
                            repr(float(ls.phi[e])), ls.method.value, int(bool(ls.degenerate_mask[e]))])
    return path
