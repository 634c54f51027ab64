"""Pruning quality and cost metrics, plus versioned JSON report emission."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .corpus import Corpus, batches
from .errors import CompatibilityError, ComparisonError, InputError, OutputError, ShapeError
from .model import MoNELayer, model_forward
from .pruning import param_counts

REPORT_SCHEMA_VERSION = 1


@dataclass
class DiscrepancyReport:
    layers: list  # per layer {"mean_l2", "max_l2", "sum_sq", "tokens"}
    logit_mean_l2: float
    perplexity_original: float
    perplexity_pruned: float
    corpus_fingerprint: str

    def to_dict(self):
        return asdict(self)


def _as_corpus(corpus):
    if not isinstance(corpus, Corpus):
        corpus = Corpus(list(corpus))
    if len(corpus) == 0:
        raise InputError("evaluation corpus is empty")
    return corpus


def layer_discrepancy(original_layer, pruned_layer, samples, config) -> dict:
    """L2 distance between the two layers' outputs on shared hidden states."""
    samples = np.asarray(samples, dtype=np.float64)
    if original_layer.d_model != pruned_layer.d_model or original_layer.n_experts != pruned_layer.n_experts:
        raise ShapeError("layers are not shape-compatible")
    y0, _ = original_layer.forward(samples, config.top_k, config.renormalize_gates)
    y1, _ = pruned_layer.forward(samples, config.top_k, config.renormalize_gates)
    dist = np.linalg.norm(y1 - y0, axis=1)
    return {
        "mean_l2": float(dist.mean()) if dist.size else 0.0,
        "max_l2": float(dist.max()) if dist.size else 0.0,
        "sum_sq": float(np.sum(dist * dist)),
        "tokens": int(dist.size),
        "per_token_l2": dist,
    }


def trace_inputs(model, corpus, batch_size=32):
    """Per-layer MoE inputs of ``model`` over ``corpus``, concatenated in order."""
    corpus = _as_corpus(corpus)
    per_layer = [[] for _ in model.blocks]
    for toks in batches(corpus, batch_size):
        _, traces = model_forward(model, toks, trace=True)
        for li, tr in enumerate(traces):
            per_layer[li].append(tr.inputs)
    return [np.concatenate(parts) for parts in per_layer]


def layer_discrepancies(original, pruned, corpus, batch_size=32):
    """Per-layer discrepancy on hidden states traced from the original model."""
    inputs = trace_inputs(original, corpus, batch_size)
    out = []
    for li, x in enumerate(inputs):
        stats = layer_discrepancy(original.blocks[li].moe, pruned.blocks[li].moe, x, original.config)
        stats.pop("per_token_l2")
        out.append(stats)
    return out


def _check_compatible(a, b):
    ca, cb = a.config, b.config
    for name in ("vocab_size", "d_model", "n_layers", "n_experts", "top_k"):
        if getattr(ca, name) != getattr(cb, name):
            raise CompatibilityError(f"models differ in {name}: {getattr(ca, name)} vs {getattr(cb, name)}")


def logit_discrepancy(original, pruned, corpus, batch_size=32) -> float:
    """Mean over all positions of the L2 norm of the logit difference."""
    corpus = _as_corpus(corpus)
    _check_compatible(original, pruned)
    if original is pruned:
        return 0.0
    total, count = 0.0, 0
    for toks in batches(corpus, batch_size):
        l0, _ = model_forward(original, toks)
        l1, _ = model_forward(pruned, toks)
        total += float(np.linalg.norm(l1 - l0, axis=-1).sum())
        count += toks.size
    return total / count


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def perplexity(model, corpus, batch_size=32) -> float:
    """exp of the mean next-token negative log-likelihood (natural log)."""
    corpus = _as_corpus(corpus)
    for s in corpus:
        if s.size < 2:
            raise InputError(f"perplexity needs sequences of length >= 2, got {s.size}")
    nll, count = 0.0, 0
    for toks in batches(corpus, batch_size):
        logits, _ = model_forward(model, toks)
        n, c = _nll(logits, toks)
        nll += n
        count += c
    return float(np.exp(nll / count))


def discrepancy_report(original, pruned, corpus, batch_size=32) -> DiscrepancyReport:
    corpus = _as_corpus(corpus)
    return DiscrepancyReport(
        layers=layer_discrepancies(original, pruned, corpus, batch_size),
        logit_mean_l2=logit_discrepancy(original, pruned, corpus, batch_size),
        perplexity_original=perplexity(original, corpus, batch_size),
        perplexity_pruned=perplexity(pruned, corpus, batch_size),
        corpus_fingerprint=corpus.fingerprint(),
    )


def prune_set_overlap(plan_a, plan_b) -> dict:
    """Per-layer ``|A & B| / |A|`` and its mean. Empty sets count as full overlap."""
    if len(plan_a.layers) != len(plan_b.layers):
        raise ComparisonError("plans have different layer counts")
    per_layer = []
    for la, lb in zip(plan_a.layers, plan_b.layers):
        a, b = set(la.prune_set), set(lb.prune_set)
        if len(a) != len(b):
            raise ComparisonError(f"prune sets differ in size ({len(a)} vs {len(b)})")
        per_layer.append(1.0 if not a else len(a & b) / len(a))
    return {"per_layer": per_layer, "mean": float(np.mean(per_layer))}


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------

def routing_trace(model, corpus, batch_size=32):
    """Concatenated per-layer traces plus each token's attention context length."""
    corpus = _as_corpus(corpus)
    parts, ctx = [], []
    for toks in batches(corpus, batch_size):
        _, traces = model_forward(model, toks, trace=True)
        parts.append(traces)
        ctx.append(np.tile(np.arange(1, toks.shape[1] + 1, dtype=np.int64), toks.shape[0]))
    merged = [_concat_traces([p[li] for p in parts]) for li in range(len(model.blocks))]
    return merged, np.concatenate(ctx)


def _dense_params(cfg):
    d = cfg.d_model
    per_layer = 4 * d * d + d * cfg.n_experts
    # one embedding row plus the full lm head
    return cfg.n_layers * per_layer + d + cfg.vocab_size * d


def expert_flops_per_token(cfg, traces):
    """Integer expert FLOPs for each traced token, summed over layers.

    A served slot costs the two expert matmuls, ``4*d_model*d_expert``; a
    novice slot costs no expert FLOPs.
    """
    per_slot = 4 * cfg.d_model * cfg.d_expert
    served = np.zeros(traces[0].indices.shape[0], np.int64)
    for tr in traces:
        served += tr.indices.shape[1] - tr.novice_hits.sum(axis=1).astype(np.int64)
    return served * per_slot


def _flops_total(cfg, traces, context):
    """2*rows*cols per matmul, d per novice lookup, attention identical before/after."""
    d, de = cfg.d_model, cfg.d_expert
    n_tok = context.shape[0]
    per_token_fixed = cfg.n_layers * (8 * d * d + 2 * d * cfg.n_experts) + 2 * d * cfg.vocab_size
    attn_ctx = cfg.n_layers * 4 * d * int(context.sum())
    expert = 0
    novice = 0
    for tr in traces:
        j = int(tr.novice_hits.sum())
        expert += (tr.indices.size - j) * 4 * d * de
        novice += j * d
    return n_tok * per_token_fixed + attn_ctx + expert + novice, expert


def cost_report(original, pruned, traces, context) -> dict:
    """Parameter, memory and FLOP accounting before and after pruning.

    ``traces``/``context`` come from :func:`routing_trace` on the pruned model.
    Unpruned cost does not depend on which experts a token selects, so the
    same trace with novice hits cleared gives the "before" side exactly.
    """
    cfg = original.config
    n_tok = int(context.shape[0])
    unpruned_traces = [tr._replace(novice_hits=np.zeros_like(tr.novice_hits)) for tr in traces]
    before_counts = param_counts(original, unpruned_traces)
    after_counts = param_counts(pruned, traces)
    dense = _dense_params(cfg)
    f_before, e_before = _flops_total(cfg, unpruned_traces, context)
    f_after, e_after = _flops_total(cfg, traces, context)

    def side(counts, flops, expert_flops):
        act_total = (int(counts["activated_expert_params_total"]) + int(counts["activated_novice_params_total"])
                     + dense * n_tok)
        return {
            "total_params": int(counts["total_params"]),
            "expert_params": int(counts["expert_params"]),
            "novice_params": int(counts["novice_params"]),
            "activated_params_total": act_total,
            "activated_params_per_token": act_total / n_tok,
            "flops_total": int(flops),
            "expert_flops_total": int(expert_flops),
            "flops_per_token": flops / n_tok,
            "memory_bytes": int(counts["total_params"]) * 4,
        }

    return {
        "tokens": n_tok,
        "before": side(before_counts, f_before, e_before),
        "after": side(after_counts, f_after, e_after),
        "novice_hit_rate": float(after_counts["novice_hits_per_token"].sum() / (n_tok * cfg.n_layers * cfg.top_k)),
    }


@dataclass
class OriginalReference:
    """Original-model quantities reused when scoring many pruned variants."""

    model: object
    corpus: Corpus
    batch_size: int
    logits: list  # per batch
    inputs: list  # per layer, N x d
    layer_outputs: list  # per layer, N x d
    perplexity: float


def reference(original, corpus, batch_size=32) -> OriginalReference:
    corpus = _as_corpus(corpus)
    logits, per_layer, nll, count = [], [[] for _ in original.blocks], 0.0, 0
    for toks in batches(corpus, batch_size):
        lg, traces = model_forward(original, toks, trace=True)
        logits.append(lg)
        for li, tr in enumerate(traces):
            per_layer[li].append(tr.inputs)
        n, c = _nll(lg, toks)
        nll += n
        count += c
    inputs = [np.concatenate(p) for p in per_layer]
    cfg = original.config
    outs = [blk.moe.forward(x, cfg.top_k, cfg.renormalize_gates)[0] for blk, x in zip(original.blocks, inputs)]
    return OriginalReference(original, corpus, batch_size, logits, inputs, outs, float(np.exp(nll / count)))


def _nll(logits, toks):
    if toks.shape[1] < 2:
        raise InputError(f"perplexity needs sequences of length >= 2, got {toks.shape[1]}")
    lp = _log_softmax(logits[:, :-1])
    return -float(np.take_along_axis(lp, toks[:, 1:, None], axis=-1).sum()), toks[:, 1:].size


def evaluate_pruned(ref: OriginalReference, pruned) -> dict:
    """Discrepancy, perplexity and cost of ``pruned`` against a cached reference.

    One traced forward of the pruned model serves the logit comparison, the
    perplexity and the routing trace for cost accounting.
    """
    original = ref.model
    _check_compatible(original, pruned)
    cfg = original.config
    total_l2, count, nll, nll_count = 0.0, 0, 0.0, 0
    parts, ctx = [], []
    for toks, l0 in zip(batches(ref.corpus, ref.batch_size), ref.logits):
        l1, traces = model_forward(pruned, toks, trace=True)
        total_l2 += float(np.linalg.norm(l1 - l0, axis=-1).sum())
        count += toks.size
        n, c = _nll(l1, toks)
        nll += n
        nll_count += c
        parts.append(traces)
        ctx.append(np.tile(np.arange(1, toks.shape[1] + 1, dtype=np.int64), toks.shape[0]))
    layers = []
    for li, (x, y0) in enumerate(zip(ref.inputs, ref.layer_outputs)):
        y1, _ = pruned.blocks[li].moe.forward(x, cfg.top_k, cfg.renormalize_gates)
        dist = np.linalg.norm(y1 - y0, axis=1)
        layers.append({"mean_l2": float(dist.mean()), "max_l2": float(dist.max()),
                       "sum_sq": float(np.sum(dist * dist)), "tokens": int(dist.size)})
    merged = [_concat_traces([p[li] for p in parts]) for li in range(len(pruned.blocks))]
    disc = DiscrepancyReport(layers, total_l2 / count, ref.perplexity, float(np.exp(nll / nll_count)),
                             ref.corpus.fingerprint())
    return {"discrepancy": disc.to_dict(), "cost": cost_report(original, pruned, merged, np.concatenate(ctx))}


def _concat_traces(trs):
    return type(trs[0])(*(np.concatenate([getattr(t, f) for t in trs]) for f in trs[0]._fields))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_COST_SIDE = {
    "type": "object",
    "required": ["total_params", "expert_params", "activated_params_per_token", "flops_per_token", "memory_bytes"],
    "properties": {k: _NUM for k in ("total_params", "expert_params", "activated_params_per_token",
                                     "flops_per_token", "memory_bytes")},
}
_METRICS = {
    "type": "object",
    "properties": {
        "logit_mean_l2": {"type": "number", "minimum": 0},
        "perplexity_original": {"type": "number", "minimum": 0},
        "perplexity_pruned": {"type": "number", "minimum": 0},
        "layers": {"type": "array", "items": {
            "type": "object",
            "required": ["mean_l2", "max_l2", "tokens"],
            "properties": {"mean_l2": {"type": "number", "minimum": 0}, "max_l2": {"type": "number", "minimum": 0},
                           "tokens": {"type": "integer", "minimum": 0}},
        }},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "kind", "config", "fingerprints"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "kind": {"enum": ["eval", "ablation_cell", "ablation_summary"]},
        "config": {"type": "object"},
        "fingerprints": {"type": "object", "additionalProperties": {"type": "string"}},
        "metric_note": {"type": "string"},
        "discrepancy": _METRICS,
        "cost": {"type": "object", "required": ["before", "after"],
                 "properties": {"before": _COST_SIDE, "after": _COST_SIDE}},
        "cells": {"type": "array", "items": {
            "type": "object",
            "required": ["method", "ratio", "mode", "status"],
            "properties": {
                "method": {"type": "string"}, "ratio": _NUM, "mode": {"enum": ["novice", "drop"]},
                "status": {"enum": ["ok", "error"]}, "metrics": {"type": "object"},
                "diff_to_mone": {"type": "object"}, "error": {"type": "string"},
            },
        }},
    },
}

PERPLEXITY_NOTE = ("perplexity on the synthetic corpus is a desk-scale stand-in for downstream task accuracy; "
                   "it is not equivalent to it")


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


def validate_report(doc):
    jsonschema.validate(doc, REPORT_SCHEMA)


def report_bytes(results) -> bytes:
    doc = to_jsonable({"schema_version": REPORT_SCHEMA_VERSION, **results})
    validate_report(doc)
    return (json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def emit_report(results, path):
    data = report_bytes(results)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OutputError(f"cannot write report to {path}: {exc}") from exc
    return path


def pruned_layer_indices(model):
    return [list(b.moe.pruned) if isinstance(b.moe, MoNELayer) else [] for b in model.blocks]
