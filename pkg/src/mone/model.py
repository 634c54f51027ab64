"""Toy MoE decoder LM: config, deterministic init, routing and forward passes.

Parameters are stored as float32; every forward pass promotes to float64.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import ConfigError, InputError, NumericInputError, ShapeError

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 4
    n_experts: int = 16
    top_k: int = 4
    d_expert: int = 128
    seed: int = 42
    renormalize_gates: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_experts", "top_k", "d_expert"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}", field=name)
        if self.top_k > self.n_experts:
            raise ConfigError(
                f"top_k ({self.top_k}) must not exceed n_experts ({self.n_experts})", field="top_k"
            )
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}", field="seed")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}", field=sorted(unknown)[0])
        return cls(**data)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


@dataclass
class Expert:
    w_up: np.ndarray  # d_model x d_expert
    w_down: np.ndarray  # d_expert x d_model

    def __call__(self, x):
        h = x @ self.w_up.astype(np.float64)
        return silu(h) @ self.w_down.astype(np.float64)


@dataclass
class Router:
    w_gate: np.ndarray  # d_model x n_experts

    def scores(self, x):
        return softmax(np.asarray(x, dtype=np.float64) @ self.w_gate.astype(np.float64))


class LayerTrace(NamedTuple):
    """Per-token routing record of one MoE layer over a flattened batch."""

    inputs: np.ndarray  # N x d
    indices: np.ndarray  # N x k, descending score
    gates: np.ndarray  # N x k, as applied
    outputs: np.ndarray  # N x k x d, raw expert (or novice) outputs before gating
    novice_hits: np.ndarray  # N x k bool, slot served by a novice


class Routing(NamedTuple):
    scores: np.ndarray
    indices: np.ndarray
    gates: np.ndarray


class _SparseLayer:
    """Shared top-k dispatch for the dense-expert and novice-substituted layers."""

    router: Router

    @property
    def n_experts(self):
        return self.router.w_gate.shape[1]

    @property
    def d_model(self):
        return self.router.w_gate.shape[0]

    def _slot_output(self, e, x):
        raise NotImplementedError

    def _is_novice(self, e):
        return False

    def _gates(self, indices, gates):
        return gates

    def forward(self, x, top_k, renormalize=False, trace=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_model:
            raise ShapeError(f"expected (N, {self.d_model}) input, got {x.shape}")
        scores = softmax(x @ self.router.w_gate.astype(np.float64))
        indices, gates = _kernels.topk_rows(scores, top_k)
        if renormalize:
            gates = gates / gates.sum(axis=1, keepdims=True)
        gates = self._gates(indices, gates)
        n_tok, d = x.shape
        y = np.zeros((n_tok, d))
        outputs = np.empty((n_tok, top_k, d)) if trace else None
        hits = np.zeros((n_tok, top_k), dtype=bool)
        for e in range(self.n_experts):
            tok, slot = np.nonzero(indices == e)
            if tok.size == 0:
                continue
            out = self._slot_output(e, x[tok])
            # an expert occupies at most one slot per token, so rows in tok are unique
            y[tok] += gates[tok, slot, None] * out
            if self._is_novice(e):
                hits[tok, slot] = True
            if trace:
                outputs[tok, slot] = out
        if not trace:
            return y, None
        return y, LayerTrace(x, indices, gates, outputs, hits)


@dataclass
class MoELayer(_SparseLayer):
    router: Router
    experts: list

    def _slot_output(self, e, x):
        return self.experts[e](x)


@dataclass
class MoNELayer(_SparseLayer):
    """MoE layer whose pruned experts are replaced by constant novice vectors.

    The router is unchanged and still scores all experts; a selected pruned
    slot contributes ``gate * novice`` with no matrix multiply.
    """

    router: Router
    retained: dict  # expert index -> Expert
    novices: dict  # expert index -> float32 d-vector
    renormalize_dropped: bool = False

    def __post_init__(self):
        keys_r, keys_n = set(self.retained), set(self.novices)
        if keys_r & keys_n or keys_r | keys_n != set(range(self.n_experts)):
            raise ShapeError("retained and novice indices must partition the expert range")

    @property
    def pruned(self):
        return tuple(sorted(self.novices))

    def _slot_output(self, e, x):
        if e in self.novices:
            return np.broadcast_to(self.novices[e].astype(np.float64), (x.shape[0], self.d_model))
        return self.retained[e](x)

    def _is_novice(self, e):
        return e in self.novices

    def _gates(self, indices, gates):
        if not self.renormalize_dropped or not self.novices:
            return gates
        # drop baseline only: zero pruned slots, rescale survivors to the selected mass
        pruned = np.isin(indices, self.pruned)
        kept = np.where(pruned, 0.0, gates)
        mass = kept.sum(axis=1, keepdims=True)
        scale = np.divide(gates.sum(axis=1, keepdims=True), mass, out=np.zeros_like(mass), where=mass > 0)
        return kept * scale


@dataclass
class Attention:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class Block:
    attn: Attention
    moe: _SparseLayer


@dataclass
class MoEModel:
    config: ModelConfig
    embedding: np.ndarray  # vocab x d
    blocks: list = field(default_factory=list)
    lm_head: np.ndarray = None  # d x vocab
    lineage: dict = field(default_factory=dict)  # fingerprints of the inputs a pruned model came from

    def tensors(self):
        """Ordered (name, array) manifest; this order is the checkpoint order."""
        out = [("embedding", self.embedding)]
        for li, blk in enumerate(self.blocks):
            p = f"blocks.{li}."
            for name in ("wq", "wk", "wv", "wo"):
                out.append((p + "attn." + name, getattr(blk.attn, name)))
            out.append((p + "moe.router", blk.moe.router.w_gate))
            if isinstance(blk.moe, MoNELayer):
                for e in sorted(blk.moe.retained):
                    out.append((f"{p}moe.experts.{e}.w_up", blk.moe.retained[e].w_up))
                    out.append((f"{p}moe.experts.{e}.w_down", blk.moe.retained[e].w_down))
                pruned = blk.moe.pruned
                nov = np.stack([blk.moe.novices[e] for e in pruned]) if pruned else np.zeros((0, self.config.d_model), np.float32)
                out.append((p + "moe.novices", nov))
            else:
                for e, ex in enumerate(blk.moe.experts):
                    out.append((f"{p}moe.experts.{e}.w_up", ex.w_up))
                    out.append((f"{p}moe.experts.{e}.w_down", ex.w_down))
        out.append(("lm_head", self.lm_head))
        return out

    @property
    def is_pruned(self):
        return any(isinstance(b.moe, MoNELayer) for b in self.blocks)

    def n_params(self):
        return sum(int(a.size) for _, a in self.tensors())


def silu(x):
    return x / (1.0 + np.exp(-x))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def rms_norm(x):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


def init_model(config: ModelConfig) -> MoEModel:
    """Seeded uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)], fan_in = rows.

    Draws follow checkpoint manifest order, so the same config always yields a
    bit-identical model.
    """
    if not isinstance(config, ModelConfig):
        config = ModelConfig.from_dict(dict(config))
    rng = np.random.default_rng(config.seed)
    d, de, M, V = config.d_model, config.d_expert, config.n_experts, config.vocab_size

    def draw(rows, cols):
        bound = 1.0 / np.sqrt(rows)
        return rng.uniform(-bound, bound, size=(rows, cols)).astype(np.float32)

    embedding = draw(V, d)
    blocks = []
    for _ in range(config.n_layers):
        attn = Attention(draw(d, d), draw(d, d), draw(d, d), draw(d, d))
        router = Router(draw(d, M))
        experts = [Expert(draw(d, de), draw(de, d)) for _ in range(M)]
        blocks.append(Block(attn, MoELayer(router, experts)))
    lm_head = draw(d, V)
    return MoEModel(config, embedding, blocks, lm_head)


def route(router: Router, x, k, renormalize=False) -> Routing:
    """Score all experts for one hidden state and select the top ``k``.

    Selection order is descending score; equal scores go to the lower index.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericInputError("router input contains non-finite values")
    if x.ndim != 1 or x.shape[0] != router.w_gate.shape[0]:
        raise ShapeError(f"expected ({router.w_gate.shape[0]},) input, got {x.shape}")
    scores = router.scores(x[None, :])
    idx, gates = _kernels.topk_rows(scores, k)
    gates = gates[0]
    if renormalize:
        gates = gates / gates.sum()
    return Routing(scores[0], idx[0], gates)


def moe_forward(layer, x, config: ModelConfig):
    """Single-token MoE output plus the per-selected-expert trace.

    The trace lists ``{"index", "gate", "expert_output"}`` in selection order;
    ``expert_output`` is the raw, ungated output.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a single d-vector, got shape {x.shape}")
    y, tr = layer.forward(x[None, :], config.top_k, config.renormalize_gates, trace=True)
    records = [
        {"index": int(tr.indices[0, j]), "gate": float(tr.gates[0, j]), "expert_output": tr.outputs[0, j]}
        for j in range(config.top_k)
    ]
    return y[0], records


def _attention(attn: Attention, h):
    a = rms_norm(h)
    q = a @ attn.wq.astype(np.float64)
    k = a @ attn.wk.astype(np.float64)
    v = a @ attn.wv.astype(np.float64)
    T = h.shape[1]
    s = (q @ k.transpose(0, 2, 1)) / np.sqrt(h.shape[2])
    s = np.where(np.tri(T, dtype=bool), s, -np.inf)
    p = softmax(s)
    return (p @ v) @ attn.wo.astype(np.float64)


def model_forward(model: MoEModel, tokens, trace=False):
    """Teacher-forced forward pass.

    ``tokens`` is a 1-D sequence or a 2-D batch of equal-length sequences.
    Returns ``(logits, traces)``; ``traces`` is a per-layer list of
    :class:`LayerTrace` over the flattened batch when ``trace`` is set, else
    ``None``. Tracing never changes the logits.
    """
    toks = np.asarray(tokens)
    single = toks.ndim == 1
    if single:
        toks = toks[None, :]
    if toks.ndim != 2 or toks.shape[1] < 1 or toks.shape[0] < 1:
        raise InputError(f"expected a non-empty token sequence, got shape {np.shape(tokens)}")
    if not np.issubdtype(toks.dtype, np.integer):
        raise InputError("token ids must be integers")
    V = model.config.vocab_size
    if toks.min() < 0 or toks.max() >= V:
        bad = toks[(toks < 0) | (toks >= V)].flat[0]
        raise InputError(f"token id {int(bad)} outside [0, {V})")
    B, T = toks.shape
    d = model.config.d_model
    h = model.embedding[toks].astype(np.float64)
    traces = [] if trace else None
    for blk in model.blocks:
        h = h + _attention(blk.attn, h)
        m = rms_norm(h).reshape(B * T, d)
        y, tr = blk.moe.forward(m, model.config.top_k, model.config.renormalize_gates, trace=trace)
        if trace:
            traces.append(tr)
        h = h + y.reshape(B, T, d)
    logits = rms_norm(h) @ model.lm_head.astype(np.float64)
    if single:
        logits = logits[0]
    return logits, traces
