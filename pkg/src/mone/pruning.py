"""Pruning plans, novice construction and the novice-substituted model.

A pruned expert is replaced by its calibration mean output. In ``drop`` mode
the replacement is the zero vector, so novice-vs-drop differs in one field.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import model_fingerprint
from .errors import CompatibilityError, ConfigError, FormatError
from .model import Block, MoEModel, MoNELayer
from .redundancy import LayerScores, ScoreMethod, score_layer, select_prune_set, prune_count

REPLACEMENT_MODES = ("novice", "drop")
PLAN_FORMAT_VERSION = 1

__all__ = [
    "LayerPlan", "PruningPlan", "MoNELayer", "build_plan", "apply_plan", "mone_forward",
    "param_counts", "expert_param_size", "REPLACEMENT_MODES",
]


@dataclass
class LayerPlan:
    prune_set: tuple
    novices: np.ndarray  # (|P|, d) float32, row j belongs to prune_set[j]
    scores: LayerScores

    def novice_table(self):
        return {e: self.novices[j] for j, e in enumerate(self.prune_set)}


@dataclass
class PruningPlan:
    layers: list
    method: ScoreMethod
    ratio: float
    mode: str
    calibration_fingerprint: str
    model_fingerprint: str
    seed: int = 0
    freq_normalization: str = "activations"
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        layers = []
        for li, lp in enumerate(self.layers):
            layers.append({
                "layer": li,
                "prune_set": list(lp.prune_set),
                "novices": base64.b64encode(np.ascontiguousarray(lp.novices, dtype="<f4").tobytes()).decode("ascii"),
                "phi": [float(v) for v in lp.scores.phi],
                "phi_var": [float(v) for v in lp.scores.phi_var],
                "phi_freq": [float(v) for v in lp.scores.phi_freq],
                "degenerate": [bool(v) for v in lp.scores.degenerate_mask],
            })
        return {
            "format_version": PLAN_FORMAT_VERSION,
            "method": self.method.value,
            "ratio": self.ratio,
            "mode": self.mode,
            "seed": self.seed,
            "freq_normalization": self.freq_normalization,
            "calibration_fingerprint": self.calibration_fingerprint,
            "model_fingerprint": self.model_fingerprint,
            "meta": self.meta,
            "layers": layers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, data) -> "PruningPlan":
        try:
            method = ScoreMethod.parse(data["method"])
            layers = []
            for entry in data["layers"]:
                ps = tuple(int(e) for e in entry["prune_set"])
                raw = base64.b64decode(entry["novices"])
                nov = np.frombuffer(raw, dtype="<f4").astype(np.float32)
                nov = nov.reshape(len(ps), -1) if ps else np.zeros((0, 0), np.float32)
                scores = LayerScores(int(entry["layer"]), np.array(entry["phi"]), method,
                                     np.array(entry["degenerate"], bool), np.array(entry["phi_var"]),
                                     np.array(entry["phi_freq"]))
                layers.append(LayerPlan(ps, nov, scores))
            return cls(layers, method, float(data["ratio"]), data["mode"], data["calibration_fingerprint"],
                       data["model_fingerprint"], int(data.get("seed", 0)),
                       data.get("freq_normalization", "activations"), data.get("meta", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid pruning plan: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PruningPlan":
        try:
            data = json.loads(Path(path).read_text())
        except ValueError as exc:
            raise FormatError(f"pruning plan is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def build_plan(calib, method, ratio, mode="novice", *, seed=0, freq_normalization="activations") -> PruningPlan:
    method = ScoreMethod.parse(method) if not isinstance(method, ScoreMethod) else method
    if mode not in REPLACEMENT_MODES:
        raise ConfigError(f"replacement mode must be one of {REPLACEMENT_MODES}, got {mode!r}", field="mode")
    prune_count(ratio, calib.config.n_experts)  # validates ratio
    d = calib.config.d_model
    layers = []
    for li in range(len(calib.layers)):
        summaries = calib.summaries(li)
        scores = score_layer(summaries, method, layer_index=li, seed=seed,
                             freq_normalization=freq_normalization, total_tokens=calib.total_tokens)
        ps = select_prune_set(scores, ratio)
        nov = np.zeros((len(ps), d), np.float32)
        if mode == "novice":
            for j, e in enumerate(ps):
                if summaries[e].n >= 1:
                    nov[j] = summaries[e].mean_output
        layers.append(LayerPlan(ps, nov, scores))
    return PruningPlan(layers, method, float(ratio), mode, calib.fingerprint(), calib.model_fingerprint,
                       seed, freq_normalization)


def apply_plan(model: MoEModel, plan: PruningPlan, *, renormalize_dropped=False) -> MoEModel:
    """Return a new model whose MoE layers drop pruned experts for novices.

    Routers and non-expert tensors are shared with the input unchanged.
    ``renormalize_dropped`` is only meaningful for drop-mode plans.
    """
    if model.is_pruned:
        raise CompatibilityError("model is already pruned")
    fp = model_fingerprint(model)
    if plan.model_fingerprint != fp:
        raise CompatibilityError(
            f"plan was built for model {plan.model_fingerprint[:12]}, got {fp[:12]}"
        )
    if len(plan.layers) != len(model.blocks):
        raise CompatibilityError(f"plan has {len(plan.layers)} layers, model has {len(model.blocks)}")
    if renormalize_dropped and plan.mode != "drop":
        raise ConfigError("renormalize_dropped requires a drop-mode plan", field="renormalize_dropped")
    blocks = []
    for blk, lp in zip(model.blocks, plan.layers):
        pruned = set(lp.prune_set)
        retained = {e: ex for e, ex in enumerate(blk.moe.experts) if e not in pruned}
        layer = MoNELayer(blk.moe.router, retained, lp.novice_table(), renormalize_dropped=renormalize_dropped)
        blocks.append(Block(blk.attn, layer))
    lineage = {"parent_model": fp, "plan": plan.fingerprint(), "calibration": plan.calibration_fingerprint}
    return MoEModel(model.config, model.embedding, blocks, model.lm_head, lineage)


def mone_forward(layer: MoNELayer, x, config):
    """Single-token output of a novice-substituted layer."""
    x = np.asarray(x, dtype=np.float64)
    y, _ = layer.forward(x[None, :], config.top_k, config.renormalize_gates)
    return y[0]


def expert_param_size(config) -> int:
    return 2 * config.d_model * config.d_expert


def param_counts(model: MoEModel, traces=None) -> dict:
    """Exact parameter counts, optionally with per-token activated expert params.

    ``traces`` is the per-layer trace list from ``model_forward(..., trace=True)``
    on this model. A slot served by an expert activates ``2*d_model*d_expert``
    expert parameters; a slot served by a novice activates none, only its
    ``d_model`` novice floats (a lookup). Per-token figures sum over layers.
    """
    cfg = model.config
    per_expert = expert_param_size(cfg)
    expert_params, novice_params = [], []
    for blk in model.blocks:
        if isinstance(blk.moe, MoNELayer):
            expert_params.append(len(blk.moe.retained) * per_expert)
            novice_params.append(len(blk.moe.novices) * cfg.d_model)
        else:
            expert_params.append(len(blk.moe.experts) * per_expert)
            novice_params.append(0)
    out = {
        "total_params": model.n_params(),
        "expert_params": int(sum(expert_params)),
        "novice_params": int(sum(novice_params)),
        "expert_params_per_layer": expert_params,
        "novice_params_per_layer": novice_params,
    }
    if traces is not None:
        n_tok = traces[0].indices.shape[0]
        hits = np.zeros(n_tok, np.int64)
        for tr in traces:
            hits += tr.novice_hits.sum(axis=1).astype(np.int64)
        served = cfg.n_layers * cfg.top_k - hits
        out["tokens"] = int(n_tok)
        out["novice_hits_per_token"] = hits
        out["activated_expert_params_per_token"] = served * per_expert
        out["activated_novice_params_per_token"] = hits * cfg.d_model
        out["activated_expert_params_total"] = int(served.sum()) * per_expert
        out["activated_novice_params_total"] = int(hits.sum()) * cfg.d_model
    return out
