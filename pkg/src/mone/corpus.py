"""Synthetic token corpora and the ``MONC`` corpus file format.

File layout: ``b"MONC"``, u32 LE version, u32 LE sequence count, then per
sequence a u32 LE length followed by that many u32 LE token ids.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError

MAGIC = b"MONC"
VERSION = 1
_U32 = np.dtype("<u4")

GENERATOR_KINDS = ("markov",)


@dataclass
class Corpus:
    sequences: list  # list of 1-D int64 arrays

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def n_tokens(self):
        return int(sum(s.size for s in self.sequences))

    def head(self, n) -> "Corpus":
        if n > len(self.sequences):
            raise InputError(f"requested {n} sequences but the corpus has {len(self.sequences)}")
        return Corpus(self.sequences[:n])

    def slice(self, start, stop) -> "Corpus":
        if stop > len(self.sequences) or start < 0 or start > stop:
            raise InputError(f"slice [{start}:{stop}] out of range for {len(self.sequences)} sequences")
        return Corpus(self.sequences[start:stop])

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.sequences))]
        for s in self.sequences:
            if s.size and (s.min() < 0 or s.max() >= 2**32):
                raise InputError("token ids must fit in u32")
            parts.append(struct.pack("<I", s.size))
            parts.append(s.astype(_U32).tobytes())
        return b"".join(parts)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Corpus":
        if len(data) < 12:
            raise FormatError("truncated corpus header", offset=len(data))
        if data[:4] != MAGIC:
            raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"unsupported corpus version {version}", offset=4)
        pos = 12
        seqs = []
        for _ in range(count):
            if pos + 4 > len(data):
                raise FormatError("truncated sequence length", offset=pos)
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + 4 * length > len(data):
                raise FormatError("truncated sequence body", offset=pos)
            seqs.append(np.frombuffer(data, dtype=_U32, count=length, offset=pos).astype(np.int64))
            pos += 4 * length
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes", offset=pos)
        return cls(seqs)

    @classmethod
    def load(cls, path) -> "Corpus":
        return cls.from_bytes(Path(path).read_bytes())


def batches(corpus, batch_size):
    """Yield 2-D arrays of equal-length sequences, preserving corpus order."""
    seqs = list(corpus)
    i = 0
    while i < len(seqs):
        j = i + 1
        length = seqs[i].size
        while j < len(seqs) and j - i < batch_size and seqs[j].size == length:
            j += 1
        yield np.stack(seqs[i:j])
        i = j


def markov_corpus(vocab_size, n_sequences, seq_len, seed, concentration=0.1) -> Corpus:
    """First-order Markov chain with a seeded Dirichlet transition matrix.

    Low ``concentration`` makes transitions peaky, so the stream has enough
    structure for perplexity to be informative.
    """
    if n_sequences < 1:
        raise ConfigError("n_sequences must be at least 1", field="n_sequences")
    if seq_len < 1:
        raise ConfigError("seq_len must be at least 1", field="seq_len")
    if vocab_size < 1:
        raise ConfigError("vocab_size must be at least 1", field="vocab_size")
    rng = np.random.default_rng(seed)
    trans = rng.dirichlet(np.full(vocab_size, concentration), size=vocab_size)
    cdf = np.cumsum(trans, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty((n_sequences, seq_len), dtype=np.int64)
    out[:, 0] = rng.integers(0, vocab_size, size=n_sequences)
    u = rng.random((n_sequences, seq_len))
    for t in range(1, seq_len):
        rows = cdf[out[:, t - 1]]
        out[:, t] = np.minimum((rows < u[:, t, None]).sum(axis=1), vocab_size - 1)
    return Corpus(list(out))


def generate(kind, vocab_size, n_sequences, seq_len, seed) -> Corpus:
    if kind != "markov":
        raise ConfigError(f"unknown generator kind {kind!r}; expected one of {GENERATOR_KINDS}", field="kind")
    return markov_corpus(vocab_size, n_sequences, seq_len, seed)
