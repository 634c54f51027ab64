import numpy as np
import pytest

from mone.calibration import CalibrationRun, LayerStats, run_calibration
from mone.checkpoint import checkpoint_bytes, checkpoint_from_bytes, model_fingerprint
from mone.errors import CompatibilityError, ConfigError, ShapeError
from mone.model import Expert, MoELayer, MoNELayer, ModelConfig, Router, init_model, model_forward, moe_forward
from mone.pruning import PruningPlan, apply_plan, build_plan, mone_forward, param_counts


@pytest.fixture
def small_calib(small_model, small_corpus):
    return run_calibration(small_model, small_corpus)


def test_ratio_zero_empty_plan(small_calib):
    plan = build_plan(small_calib, "mone", 0.0)
    assert all(lp.prune_set == () for lp in plan.layers)


def test_ratio_out_of_range(small_calib):
    with pytest.raises(ConfigError):
        build_plan(small_calib, "mone", 1.2)
    with pytest.raises(ConfigError):
        build_plan(small_calib, "mone", 0.5, mode="zero")


def test_constant_output_novice():
    cfg = ModelConfig(vocab_size=4, d_model=3, n_layers=1, n_experts=2, top_k=1, d_expert=2)
    v = np.array([0.5, -1.25, 3.0])
    ls = LayerStats(np.array([4, 9]), np.array([2.0, 4.5]), np.stack([v, [1.0, 1.0, 1.0]]),
                    np.stack([np.zeros(3), [5.0, 5.0, 5.0]]))
    calib = CalibrationRun([ls], 13, cfg, "corpus", "model")
    plan = build_plan(calib, "var_only", 0.5)
    assert plan.layers[0].prune_set == (0,)
    assert plan.layers[0].novices[0].tolist() == v.tolist()


def test_drop_mode_zero_novices(small_calib):
    plan = build_plan(small_calib, "mone", 0.5, mode="drop")
    assert all(not lp.novices.any() for lp in plan.layers)


def test_degenerate_pruned_expert_gets_zero_novice():
    cfg = ModelConfig(vocab_size=4, d_model=2, n_layers=1, n_experts=3, top_k=1, d_expert=2)
    ls = LayerStats(np.array([0, 5, 5]), np.array([0.0, 2.0, 2.5]), np.array([[0, 0], [1, 1], [2, 2]], float),
                    np.ones((3, 2)))
    plan = build_plan(CalibrationRun([ls], 10, cfg, "c", "m"), "mone", 0.34)
    assert plan.layers[0].prune_set == (0,) and not plan.layers[0].novices.any()


def test_empty_plan_is_identity(small_model, small_calib, small_corpus):
    pruned = apply_plan(small_model, build_plan(small_calib, "mone", 0.0))
    toks = np.stack(small_corpus.sequences)
    assert model_forward(pruned, toks)[0].tobytes() == model_forward(small_model, toks)[0].tobytes()


def test_apply_structure(small_model, small_calib):
    plan = build_plan(small_calib, "mone", 0.5)
    pruned = apply_plan(small_model, plan)
    names = {n for n, _ in pruned.tensors()}
    for li, (blk, lp) in enumerate(zip(pruned.blocks, plan.layers)):
        assert isinstance(blk.moe, MoNELayer)
        assert set(blk.moe.retained).isdisjoint(lp.prune_set)
        assert set(blk.moe.retained) | set(lp.prune_set) == set(range(8))
        assert blk.moe.router.w_gate.tobytes() == small_model.blocks[li].moe.router.w_gate.tobytes()
        for e in lp.prune_set:
            assert f"blocks.{li}.moe.experts.{e}.w_up" not in names
    assert pruned.embedding.tobytes() == small_model.embedding.tobytes()
    assert pruned.lm_head.tobytes() == small_model.lm_head.tobytes()


def test_parameter_delta(small_model, small_calib):
    plan = build_plan(small_calib, "mone", 0.5)
    before, after = param_counts(small_model), param_counts(apply_plan(small_model, plan))
    cfg = small_model.config
    for li, lp in enumerate(plan.layers):
        p = len(lp.prune_set)
        assert before["expert_params_per_layer"][li] - after["expert_params_per_layer"][li] == p * 2 * 8 * 16
        assert after["novice_params_per_layer"][li] == p * cfg.d_model
    assert after["total_params"] == before["total_params"] - 2 * (4 * 2 * 8 * 16) + 2 * 4 * 8


def test_main_fixture_expert_params_halved():
    model = init_model(ModelConfig(seed=42))
    # hand count: 2*64*128 per expert * 16 experts
    assert param_counts(model)["expert_params_per_layer"] == [262_144] * 4
    layers = [LayerStats.empty(16, 64) for _ in range(4)]
    for ls in layers:
        ls.n[:] = 10
        ls.score_sum[:] = np.arange(16) / 16
        ls.m2[:] = 1.0
    calib = CalibrationRun(layers, 40, model.config, "c", model_fingerprint(model))
    after = param_counts(apply_plan(model, build_plan(calib, "mone", 0.5)))
    assert after["expert_params_per_layer"] == [131_072] * 4
    assert after["novice_params_per_layer"] == [8 * 64] * 4


def test_fingerprint_mismatch(small_model, small_calib, small_config):
    other = init_model(ModelConfig(**{**small_config.to_dict(), "seed": 99}))
    with pytest.raises(CompatibilityError):
        apply_plan(other, build_plan(small_calib, "mone", 0.25))


def _toy_layer():
    rng = np.random.default_rng(0)
    router = Router(rng.normal(size=(3, 4)).astype(np.float32))
    experts = [Expert(rng.normal(size=(3, 5)).astype(np.float32), rng.normal(size=(5, 3)).astype(np.float32))
               for _ in range(4)]
    return MoELayer(router, experts)


def test_mone_forward_equation():
    layer = _toy_layer()
    cfg = ModelConfig(vocab_size=2, d_model=3, n_layers=1, n_experts=4, top_k=2, d_expert=5)
    x = np.array([0.3, -0.7, 1.1])
    _, trace = moe_forward(layer, x, cfg)
    (e1, g1), (e2, g2) = [(t["index"], t["gate"]) for t in trace]
    novice = np.array([2.0, -1.0, 0.5], np.float32)
    retained = {e: layer.experts[e] for e in range(4) if e != e2}
    mone = MoNELayer(layer.router, retained, {e2: novice})
    expected = g1 * layer.experts[e1](x[None])[0] + g2 * novice.astype(float)
    np.testing.assert_allclose(mone_forward(mone, x, cfg), expected, rtol=1e-12)


def test_mone_all_retained_matches_unpruned(rng):
    layer = _toy_layer()
    cfg = ModelConfig(vocab_size=2, d_model=3, n_layers=1, n_experts=4, top_k=2, d_expert=5)
    for _ in range(50):
        x = rng.normal(size=3)
        _, trace = moe_forward(layer, x, cfg)
        chosen = {t["index"] for t in trace}
        pruned = [e for e in range(4) if e not in chosen][:1]
        mone = MoNELayer(layer.router, {e: layer.experts[e] for e in range(4) if e not in pruned},
                         {e: np.ones(3, np.float32) for e in pruned})
        np.testing.assert_allclose(mone_forward(mone, x, cfg), moe_forward(layer, x, cfg)[0], atol=1e-6)


def test_all_pruned_constant_mix(rng):
    layer = _toy_layer()
    cfg = ModelConfig(vocab_size=2, d_model=3, n_layers=1, n_experts=4, top_k=2, d_expert=5)
    novices = {e: rng.normal(size=3).astype(np.float32) for e in range(4)}
    mone = MoNELayer(layer.router, {}, novices)
    x = rng.normal(size=3)
    _, trace = moe_forward(layer, x, cfg)
    expected = sum(t["gate"] * novices[t["index"]].astype(float) for t in trace)
    np.testing.assert_allclose(mone_forward(mone, x, cfg), expected, rtol=1e-12)


def test_partition_enforced():
    layer = _toy_layer()
    with pytest.raises(ShapeError):
        MoNELayer(layer.router, {0: layer.experts[0]}, {0: np.zeros(3, np.float32)})


def test_renormalize_dropped(small_model, small_calib, small_corpus):
    plan = build_plan(small_calib, "mone", 0.5, mode="drop")
    with pytest.raises(ConfigError):
        apply_plan(small_model, build_plan(small_calib, "mone", 0.5), renormalize_dropped=True)
    pruned = apply_plan(small_model, plan, renormalize_dropped=True)
    _, traces = model_forward(pruned, np.stack(small_corpus.sequences), trace=True)
    for tr in traces:
        kept = ~tr.novice_hits
        has_kept = kept.any(axis=1)
        assert not tr.gates[tr.novice_hits].any()
        assert (tr.gates[has_kept].sum(axis=1) > 0).all()


def test_activated_params(small_model, small_calib, small_corpus):
    cfg = small_model.config
    toks = np.stack(small_corpus.sequences)
    _, tr0 = model_forward(small_model, toks, trace=True)
    c0 = param_counts(small_model, tr0)
    # unpruned: k experts per layer, 2*d*de params each
    assert set(c0["activated_expert_params_per_token"].tolist()) == {cfg.n_layers * cfg.top_k * 2 * 8 * 16}
    pruned = apply_plan(small_model, build_plan(small_calib, "mone", 1.0))
    _, tr1 = model_forward(pruned, toks, trace=True)
    c1 = param_counts(pruned, tr1)
    assert not c1["activated_expert_params_per_token"].any()
    assert set(c1["activated_novice_params_per_token"].tolist()) == {cfg.n_layers * cfg.top_k * cfg.d_model}


def test_plan_json_roundtrip(tmp_path, small_calib):
    plan = build_plan(small_calib, "freq_only", 0.25, mode="novice")
    plan.save(tmp_path / "p.json")
    back = PruningPlan.load(tmp_path / "p.json")
    assert back.to_json() == plan.to_json()
    for a, b in zip(plan.layers, back.layers):
        assert a.prune_set == b.prune_set and a.novices.tobytes() == b.novices.tobytes()


def test_pruned_checkpoint_roundtrip(small_model, small_calib, small_corpus):
    pruned = apply_plan(small_model, build_plan(small_calib, "mone", 0.5))
    back = checkpoint_from_bytes(checkpoint_bytes(pruned))
    toks = np.stack(small_corpus.sequences)
    assert model_forward(back, toks)[0].tobytes() == model_forward(pruned, toks)[0].tobytes()
    assert back.lineage["parent_model"] == model_fingerprint(small_model)


def test_novice_is_calibration_mean(small_model, small_calib, small_corpus):
    plan = build_plan(small_calib, "mone", 0.5)
    _, traces = model_forward(small_model, np.stack(small_corpus.sequences), trace=True)
    for tr, lp in zip(traces, plan.layers):
        for j, e in enumerate(lp.prune_set):
            outs = tr.outputs[tr.indices == e]
            if outs.shape[0]:
                # float32 storage of the mean
                np.testing.assert_allclose(lp.novices[j], outs.mean(axis=0), rtol=1e-6, atol=1e-7)
                resid = np.linalg.norm((outs - lp.novices[j].astype(float)).sum(axis=0))
                assert resid <= 1e-4 * np.sqrt(outs.size)
