"""Streaming per-expert statistics gathered from a calibration corpus.

For every (layer, expert) pair we keep the activation count, the sum of
routing scores over activations, and Welford running mean / squared-deviation
vectors of the raw (ungated) expert output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .checkpoint import model_fingerprint
from .corpus import Corpus, batches
from .errors import FormatError, InputError, NumericInputError, ShapeError
from .model import ModelConfig, model_forward

MAGIC = b"MONS"
VERSION = 1


@dataclass
class ExpertAccumulator:
    n: int = 0
    score_sum: float = 0.0
    mean: np.ndarray = None
    m2: np.ndarray = None

    @classmethod
    def empty(cls, d):
        return cls(0, 0.0, np.zeros(d), np.zeros(d))

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass
class ExpertSummary:
    n: int
    mean_output: np.ndarray
    var_unbiased: np.ndarray
    mean_score: float
    score_sum: float
    degenerate: bool


def observe(acc: ExpertAccumulator, output, score) -> ExpertAccumulator:
    """Return ``acc`` updated with one observation (Welford step)."""
    output = np.asarray(output, dtype=np.float64)
    if output.shape != acc.mean.shape:
        raise ShapeError(f"output shape {output.shape} != accumulator shape {acc.mean.shape}")
    if not np.all(np.isfinite(output)):
        raise NumericInputError("expert output contains non-finite values")
    if not 0.0 <= score <= 1.0:
        raise NumericInputError(f"routing score {score} outside [0, 1]")
    n = acc.n + 1
    delta = output - acc.mean
    mean = acc.mean + delta / n
    m2 = acc.m2 + delta * (output - mean)
    return ExpertAccumulator(n, acc.score_sum + float(score), mean, m2)


def merge(a: ExpertAccumulator, b: ExpertAccumulator) -> ExpertAccumulator:
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"cannot merge accumulators of dims {a.dim} and {b.dim}")
    if b.n == 0:
        return ExpertAccumulator(a.n, a.score_sum, a.mean.copy(), a.m2.copy())
    if a.n == 0:
        return ExpertAccumulator(b.n, b.score_sum, b.mean.copy(), b.m2.copy())
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.n / n)
    m2 = a.m2 + b.m2 + delta * delta * (a.n * b.n / n)
    return ExpertAccumulator(n, a.score_sum + b.score_sum, mean, m2)


def finalize(acc: ExpertAccumulator) -> ExpertSummary:
    d = acc.dim
    if acc.n >= 2:
        var = np.maximum(acc.m2, 0.0) / (acc.n - 1)
    else:
        var = np.zeros(d)
    mean = acc.mean.copy() if acc.n >= 1 else np.zeros(d)
    mean_score = acc.score_sum / acc.n if acc.n >= 1 else 0.0
    return ExpertSummary(acc.n, mean, var, mean_score, acc.score_sum, acc.n < 2)


@dataclass
class LayerStats:
    """Vectorized accumulators for the M experts of one layer."""

    n: np.ndarray  # (M,) int64
    score_sum: np.ndarray  # (M,)
    mean: np.ndarray  # (M, d)
    m2: np.ndarray  # (M, d)

    @classmethod
    def empty(cls, n_experts, d):
        return cls(np.zeros(n_experts, np.int64), np.zeros(n_experts), np.zeros((n_experts, d)), np.zeros((n_experts, d)))

    @property
    def n_experts(self):
        return self.n.shape[0]

    def observe_batch(self, experts, gates, outputs):
        _kernels.welford_scatter(self.n, self.score_sum, self.mean, self.m2, experts, gates, outputs)

    def accumulator(self, e) -> ExpertAccumulator:
        return ExpertAccumulator(int(self.n[e]), float(self.score_sum[e]), self.mean[e].copy(), self.m2[e].copy())

    def merged(self, other: "LayerStats") -> "LayerStats":
        accs = [merge(self.accumulator(e), other.accumulator(e)) for e in range(self.n_experts)]
        return LayerStats(
            np.array([a.n for a in accs], np.int64),
            np.array([a.score_sum for a in accs]),
            np.stack([a.mean for a in accs]),
            np.stack([a.m2 for a in accs]),
        )

    def summaries(self):
        return [finalize(self.accumulator(e)) for e in range(self.n_experts)]


@dataclass
class CalibrationRun:
    layers: list  # list[LayerStats]
    total_tokens: int
    config: ModelConfig
    corpus_fingerprint: str
    model_fingerprint: str
    meta: dict = field(default_factory=dict)

    def summaries(self, layer):
        return self.layers[layer].summaries()

    # serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "config": self.config.to_dict(),
            "corpus_fingerprint": self.corpus_fingerprint,
            "model_fingerprint": self.model_fingerprint,
            "total_tokens": int(self.total_tokens),
            "meta": self.meta,
            "n": [[int(v) for v in ls.n] for ls in self.layers],
            "score_sum": [[float(v) for v in ls.score_sum] for ls in self.layers],
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", VERSION, len(hb)), hb]
        for ls in self.layers:
            for e in range(ls.n_experts):
                parts.append(ls.mean[e].astype("<f8").tobytes())
                parts.append(ls.m2[e].astype("<f8").tobytes())
        return b"".join(parts)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CalibrationRun":
        if len(data) < 12 or data[:4] != MAGIC:
            raise FormatError("not a calibration file (bad magic)", offset=0)
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"unsupported calibration version {version}", offset=4)
        try:
            header = json.loads(data[12:12 + hlen].decode("utf-8"))
            config = ModelConfig.from_dict(header["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"invalid calibration header: {exc}", offset=12) from exc
        pos = 12 + hlen
        d, M = config.d_model, config.n_experts
        need = pos + config.n_layers * M * 2 * d * 8
        if len(data) != need:
            raise FormatError(f"expected {need} bytes, found {len(data)}", offset=min(len(data), need))
        blob = np.frombuffer(data, dtype="<f8", offset=pos).reshape(config.n_layers, M, 2, d)
        layers = [
            LayerStats(
                np.array(header["n"][li], np.int64),
                np.array(header["score_sum"][li], np.float64),
                blob[li, :, 0].astype(np.float64),
                blob[li, :, 1].astype(np.float64),
            )
            for li in range(config.n_layers)
        ]
        return cls(layers, header["total_tokens"], config, header["corpus_fingerprint"],
                   header["model_fingerprint"], header.get("meta", {}))

    @classmethod
    def load(cls, path) -> "CalibrationRun":
        return cls.from_bytes(Path(path).read_bytes())


def run_calibration(model, corpus, batch_size=32) -> CalibrationRun:
    """Accumulate expert statistics over every token of every sequence.

    Only the k selected experts per token are observed, with their raw output
    and routing score (the applied gate).
    """
    if not isinstance(corpus, Corpus):
        corpus = Corpus(list(corpus))
    if len(corpus) == 0 or corpus.n_tokens == 0:
        raise InputError("calibration corpus is empty")
    cfg = model.config
    k, d = cfg.top_k, cfg.d_model
    layers = [LayerStats.empty(cfg.n_experts, d) for _ in range(cfg.n_layers)]
    total = 0
    for toks in batches(corpus, batch_size):
        _, traces = model_forward(model, toks, trace=True)
        total += toks.size
        for ls, tr in zip(layers, traces):
            ls.observe_batch(tr.indices.reshape(-1), tr.gates.reshape(-1), tr.outputs.reshape(-1, d))
    return CalibrationRun(layers, total, cfg, corpus.fingerprint(), model_fingerprint(model))


def export_stats_csv(run: CalibrationRun, path):
    """Per-(layer, expert) frequency / spread table for heatmap plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "expert", "n", "freq", "mean_score", "sigma_norm"])
        for li in range(len(run.layers)):
            for e, s in enumerate(run.summaries(li)):
                sigma = float(np.linalg.norm(np.sqrt(s.var_unbiased)))
                w.writerow([li, e, s.n, repr(s.n / run.total_tokens if run.total_tokens else 0.0),
                            repr(float(s.mean_score)), repr(sigma)])
    return path
