import math

import numpy as np
import pytest

from mone.checkpoint import checkpoint_bytes
from mone.errors import ConfigError, InputError, NumericInputError, ShapeError
from mone.model import (Expert, MoELayer, ModelConfig, Router, init_model, model_forward, moe_forward, route,
                        silu)


def dense_oracle(layer, x, k):
    """Loop reference: full softmax, explicit sort, weighted sum of selected experts."""
    logits = [sum(x[r] * float(layer.router.w_gate[r, e]) for r in range(len(x))) for e in range(layer.n_experts)]
    mx = max(logits)
    ex = [math.exp(v - mx) for v in logits]
    tot = sum(ex)
    scores = [v / tot for v in ex]
    chosen = sorted(range(len(scores)), key=lambda e: (-scores[e], e))[:k]
    y = np.zeros(len(x))
    for e in chosen:
        w_up = layer.experts[e].w_up.astype(np.float64)
        w_down = layer.experts[e].w_down.astype(np.float64)
        h = np.array([sum(x[r] * w_up[r, c] for r in range(len(x))) for c in range(w_up.shape[1])])
        y += scores[e] * (silu(h) @ w_down)
    return y


class TestConfig:
    def test_top_k_exceeds_experts(self):
        with pytest.raises(ConfigError) as exc:
            ModelConfig(n_experts=8, top_k=9)
        assert exc.value.field == "top_k"

    @pytest.mark.parametrize("field", ["vocab_size", "d_model", "n_layers", "n_experts", "top_k", "d_expert"])
    def test_dimensions_positive(self, field):
        with pytest.raises(ConfigError):
            ModelConfig(**{field: 0})

    def test_fingerprint_is_hash_of_canonical_json(self):
        import hashlib
        import json

        cfg = ModelConfig(seed=7)
        expected = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()).hexdigest()
        assert cfg.fingerprint() == expected
        assert ModelConfig(seed=8).fingerprint() != expected


def test_init_deterministic():
    cfg = ModelConfig(vocab_size=32, d_model=8, n_layers=2, n_experts=4, top_k=2, d_expert=8, seed=7)
    assert checkpoint_bytes(init_model(cfg)) == checkpoint_bytes(init_model(cfg))
    other = ModelConfig(**{**cfg.to_dict(), "seed": 8})
    assert checkpoint_bytes(init_model(cfg)) != checkpoint_bytes(init_model(other))


def test_init_bounds(small_model):
    for name, arr in small_model.tensors():
        assert arr.dtype == np.float32
        bound = 1 / np.sqrt(arr.shape[0])
        assert np.abs(arr).max() <= bound, name


def test_param_count_hand_count():
    cfg = ModelConfig(vocab_size=256, d_model=64, n_layers=4, n_experts=16, top_k=4, d_expert=128, seed=42)
    # embedding + lm head, per layer: 4 attention mats + router + 16 experts x (up + down)
    hand = 256 * 64 + 64 * 256 + 4 * (4 * 64 * 64 + 64 * 16 + 16 * (64 * 128 + 128 * 64))
    assert hand == 1_150_976
    assert init_model(cfg).n_params() == hand


class TestRoute:
    def test_equal_logits_tie_break(self):
        r = Router(np.zeros((3, 4), np.float32))
        out = route(r, np.array([0.3, -1.0, 2.0]), 2)
        np.testing.assert_allclose(out.scores, [0.25] * 4, atol=1e-15)
        assert out.indices.tolist() == [0, 1]

    def test_softmax_arithmetic(self):
        r = Router(np.array([[0.0, math.log(2), 0.0, 0.0]], np.float32))
        out = route(r, np.array([1.0]), 1)
        np.testing.assert_allclose(out.scores, [0.2, 0.4, 0.2, 0.2], atol=1e-7)
        assert out.indices.tolist() == [1]

    def test_full_k_gates_sum_to_one(self, rng):
        r = Router(rng.normal(size=(5, 6)).astype(np.float32))
        out = route(r, rng.normal(size=5), 6)
        assert abs(out.gates.sum() - 1.0) < 1e-12

    def test_renormalize(self, rng):
        r = Router(rng.normal(size=(5, 6)).astype(np.float32))
        out = route(r, rng.normal(size=5), 2, renormalize=True)
        assert abs(out.gates.sum() - 1.0) < 1e-12

    def test_descending_order(self, rng):
        r = Router(rng.normal(size=(5, 8)).astype(np.float32))
        out = route(r, rng.normal(size=5), 4)
        assert np.all(np.diff(out.gates) <= 0)
        np.testing.assert_array_equal(out.gates, out.scores[out.indices])

    def test_non_finite(self):
        r = Router(np.zeros((2, 4), np.float32))
        with pytest.raises(NumericInputError):
            route(r, np.array([np.nan, 1.0]), 2)

    def test_scores_on_simplex(self, rng):
        r = Router(rng.normal(scale=20, size=(4, 7)).astype(np.float32))
        for _ in range(200):
            s = route(r, rng.normal(scale=10, size=4), 3).scores
            assert s.min() >= 0 and abs(s.sum() - 1) < 1e-6


def _layer(rng, d=4, m=4, de=6, scale=1.0):
    router = Router(rng.normal(size=(d, m)).astype(np.float32))
    experts = [Expert(rng.normal(scale=scale, size=(d, de)).astype(np.float32),
                      rng.normal(scale=scale, size=(de, d)).astype(np.float32)) for _ in range(m)]
    return MoELayer(router, experts)


class TestMoEForward:
    def test_single_expert_identity(self, rng):
        layer = _layer(rng)
        cfg = ModelConfig(vocab_size=2, d_model=4, n_layers=1, n_experts=4, top_k=1, d_expert=6, renormalize_gates=True)
        x = rng.normal(size=4)
        y, trace = moe_forward(layer, x, cfg)
        assert len(trace) == 1 and trace[0]["gate"] == 1.0
        np.testing.assert_array_equal(y, trace[0]["expert_output"])
        np.testing.assert_allclose(y, layer.experts[trace[0]["index"]](x[None])[0], rtol=1e-12)

    def test_dense_matches_oracle(self, rng):
        layer = _layer(rng)
        cfg = ModelConfig(vocab_size=2, d_model=4, n_layers=1, n_experts=4, top_k=4, d_expert=6)
        for _ in range(20):
            x = rng.normal(size=4)
            y, _ = moe_forward(layer, x, cfg)
            np.testing.assert_allclose(y, dense_oracle(layer, x, 4), atol=1e-6)

    def test_zero_experts_give_zero(self, rng):
        layer = _layer(rng, scale=0.0)
        cfg = ModelConfig(vocab_size=2, d_model=4, n_layers=1, n_experts=4, top_k=2, d_expert=6)
        y, _ = moe_forward(layer, rng.normal(size=4), cfg)
        assert not y.any()

    def test_shape_error(self, rng):
        layer = _layer(rng)
        cfg = ModelConfig(vocab_size=2, d_model=4, n_layers=1, n_experts=4, top_k=2, d_expert=6)
        with pytest.raises(ShapeError):
            moe_forward(layer, np.zeros(5), cfg)

    def test_batched_matches_brute_force_1000_inputs(self, rng):
        layer = _layer(rng, d=6, m=8, de=10)
        x = rng.normal(size=(1000, 6))
        y, _ = layer.forward(x, 3)
        w_gate = layer.router.w_gate.astype(np.float64)
        for i in range(1000):
            logits = x[i] @ w_gate
            p = np.exp(logits - logits.max())
            p /= p.sum()
            chosen = sorted(range(8), key=lambda e: (-p[e], e))[:3]
            ref = sum(p[e] * layer.experts[e](x[i:i + 1])[0] for e in chosen)
            np.testing.assert_allclose(y[i], ref, atol=1e-6)

    def test_permutation_consistency(self, rng):
        layer = _layer(rng, d=6, m=8, de=10)
        perm = rng.permutation(8)
        permuted = MoELayer(Router(layer.router.w_gate[:, perm]), [layer.experts[p] for p in perm])
        x = rng.normal(size=(200, 6))
        np.testing.assert_allclose(permuted.forward(x, 3)[0], layer.forward(x, 3)[0], atol=1e-6)


class TestModelForward:
    def test_deterministic(self, small_model, small_corpus):
        toks = small_corpus.sequences[0]
        a, _ = model_forward(small_model, toks)
        b, _ = model_forward(small_model, toks)
        assert a.tobytes() == b.tobytes()

    def test_tracing_does_not_change_logits(self, small_model, small_corpus):
        toks = np.stack(small_corpus.sequences[:3])
        a, _ = model_forward(small_model, toks)
        b, tr = model_forward(small_model, toks, trace=True)
        assert a.tobytes() == b.tobytes()
        assert len(tr) == small_model.config.n_layers
        assert tr[0].outputs.shape == (48, 2, 8)

    def test_causal_prefix(self, small_model, small_corpus):
        toks = small_corpus.sequences[0]
        full, _ = model_forward(small_model, toks)
        for t in (0, 5, 11):
            part, _ = model_forward(small_model, toks[:t + 1])
            np.testing.assert_allclose(part[t], full[t], rtol=0, atol=1e-12)

    def test_batch_equals_single(self, small_model, small_corpus):
        toks = np.stack(small_corpus.sequences[:4])
        batched, _ = model_forward(small_model, toks)
        for i in range(4):
            single, _ = model_forward(small_model, toks[i])
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_token_out_of_range(self, small_model):
        with pytest.raises(InputError):
            model_forward(small_model, [0, 1, small_model.config.vocab_size])

    def test_empty_sequence(self, small_model):
        with pytest.raises(InputError):
            model_forward(small_model, np.zeros(0, np.int64))
