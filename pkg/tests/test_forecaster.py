import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevforecast import autodiff as ad
from bevforecast.forecaster import (
    ModelConfig,
    TrainConfig,
    argmax_position,
    build_model,
    construct_next_input,
    loss_table,
    precondition,
    predict_step,
    rollout,
    shape_table,
    topk_positions,
    train,
)
from bevforecast.forecaster.model import head_prior_logit
from bevforecast.forecaster.rollout import OTHERS, TARGET, prior_from_frame
from bevforecast.gridcore import GridSpec, SemanticGrid, argmax_cell, cell_to_metric, gaussian_blob
from bevforecast.synthgen import FAMILIES


def tiny(variant="infer-skip", **kw):
    base = dict(precondition_frames=5, bptt_window=4, dtype="float64")
    base.update(kw)
    return ModelConfig.micro(variant, 16, **base)


def test_default_shape_table():
    t = shape_table(ModelConfig())
    assert t["input"] == (5, 256, 256)
    assert t["bottleneck"] == (64, 32, 32)
    assert t["decoder"] == (8, 256, 256)
    assert t["head"] == (1, 256, 256)


@pytest.mark.parametrize("side", [64, 128, 256])
def test_shape_contract(side):
    cfg = ModelConfig.micro("infer-skip", side)
    t = shape_table(cfg)
    assert t["encoder"] == (cfg.lstm_filters, side // 16, side // 16)
    assert t["head"] == (1, side, side)
    assert t["decoder"] == (cfg.decoder_channels[-1], side, side)


def test_ladder_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_side=100)
    with pytest.raises(ValueError):
        ModelConfig(decoder_channels=(8,))
    with pytest.raises(ValueError):
        ModelConfig(variant="infer", skip_lstms=2)
    with pytest.raises(ValueError):
        ModelConfig(variant="lstm")


def test_build_is_deterministic():
    a, b = build_model(tiny(), 3), build_model(tiny(), 3)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = build_model(tiny(), 4)
    assert not np.array_equal(a.params["enc0.w"].data, c.params["enc0.w"].data)


def test_init_biases_and_head_prior():
    m = build_model(tiny(), 0)
    for k, p in m.params.items():
        if k.endswith(".b") and k != "head.b":
            assert not p.data.any()
    assert m.params["head.b"].data[0] == pytest.approx(head_prior_logit(m.cfg))
    off = build_model(tiny(head_prior=False), 0)
    assert not off.params["head.b"].data.any()


def test_variant_parameter_counts():
    skip, plain = build_model(tiny("infer-skip"), 0), build_model(tiny("infer"), 0)
    assert not any(k.startswith("skip") for k in plain.params)
    extra = sum(p.data.size for k, p in skip.params.items() if k.startswith("skip"))
    assert skip.parameter_count == plain.parameter_count + extra > plain.parameter_count


def test_zeroed_skip_lstms_reduce_to_identity_skips():
    skip = build_model(tiny("infer-skip"), 0)
    plain = build_model(tiny("infer"), 0)
    for k, p in plain.params.items():
        p.data = skip.params[k].data.copy()
    for k, p in skip.params.items():
        if k.startswith("skip"):
            p.data[:] = 0
    x = np.random.default_rng(0).random((2, 5, 16, 16))
    sa, sb = skip.initial_state(2), plain.initial_state(2)
    for _ in range(3):
        ha, sa = skip.step(x, sa)
        hb, sb = plain.step(x, sb)
        assert np.array_equal(ha.data, hb.data)


def test_precondition_state_and_determinism(micro_trajs):
    m = build_model(ModelConfig.micro("infer-skip", 64, precondition_frames=6), 0)
    frames = micro_trajs[0].frames[:6]
    s1, h1 = precondition(m, frames)
    s2, h2 = precondition(m, frames)
    assert s1["lstm"][0].shape == (1, 16, 4, 4)
    for k in s1:
        assert np.array_equal(s1[k][0].data, s2[k][0].data) and np.array_equal(s1[k][1].data, s2[k][1].data)
    assert np.array_equal(h1, h2)
    assert h1.shape == (1, 64, 64) and h1.min() >= 0 and h1.max() <= 1
    with pytest.raises(ValueError):
        precondition(m, [])


def test_precondition_window_covers_two_seconds():
    assert ModelConfig().precondition_frames / 10.0 == 2.0


def test_predict_step(micro_trajs):
    m = build_model(ModelConfig.micro("infer-skip", 64, precondition_frames=4), 1)
    t = micro_trajs[1]
    state, _ = precondition(m, t.frames[:4])
    h1, _ = predict_step(m, state, t.frames[4])
    h2, _ = predict_step(m, state, t.frames[4])
    assert h1.shape == (1, 64, 64) and np.array_equal(h1, h2)
    assert 0 <= h1.min() and h1.max() <= 1
    with pytest.raises(ValueError):
        predict_step(m, state, np.zeros((5, 32, 32)))


def test_construct_next_input(micro_trajs):
    t = micro_trajs[2]
    prev, nxt = t.frames[10], t.frames[11]
    heat = np.zeros((128, 128), np.float32)
    heat[100, 100] = 1.0
    f = construct_next_input(prev, SemanticGrid(prev.spec, heat), prior_from_frame(nxt), nxt.timestamp_s, nxt.ego_pose)
    c = argmax_cell(f.channels[TARGET])
    assert (c.row, c.col) == (100, 100)
    assert np.array_equal(f.channel("road").values, nxt.channel("road").values)
    assert np.array_equal(f.channel("lane").values, nxt.channel("lane").values)
    assert np.array_equal(f.channels[OTHERS], prev.channels[OTHERS])
    with pytest.raises(ValueError):
        construct_next_input(prev, SemanticGrid(prev.spec, heat), None)


def test_argmax_extraction():
    spec = GridSpec(64, 0.5)
    g = gaussian_blob(17, 41, 2.0, 64)
    assert argmax_position(SemanticGrid(spec, g)) == pytest.approx(cell_to_metric(argmax_cell(g), spec))
    x, z = argmax_position(SemanticGrid(spec, g))
    assert (x, z) == pytest.approx(((32 - 17 - 0.5) * 0.5, (41 + 0.5) * 0.5))


def test_topk_examples():
    spec = GridSpec(64, 0.5)
    g = gaussian_blob(10, 10, 2.0, 64)
    one = topk_positions(SemanticGrid(spec, g), 1)
    assert one.cells == [(10, 10)]
    ties = np.zeros((64, 64), np.float32)
    ties[30, 5] = ties[12, 40] = 0.8
    two = topk_positions(SemanticGrid(spec, ties), 2)
    assert two.cells == [(12, 40), (30, 5)] and not two.short
    bi = np.maximum(gaussian_blob(20, 20, 2.0, 64), 0.9 * gaussian_blob(20, 40, 2.0, 64))
    modes = topk_positions(SemanticGrid(spec, bi), 2)
    assert modes.cells == [(20, 20), (20, 40)]
    short = topk_positions(SemanticGrid(spec, ties), 5)
    assert short.short and len(short.cells) == 2
    with pytest.raises(ValueError):
        topk_positions(SemanticGrid(spec, ties), 0)


@given(st.integers(0, 2**31), st.integers(1, 6))
def test_topk_properties(seed, k):
    spec = GridSpec(32, 1.0)
    g = np.random.default_rng(seed).random((32, 32)).astype(np.float32)
    tk = topk_positions(SemanticGrid(spec, g), k)
    assert len(tk.cells) == k
    assert list(tk.scores) == sorted(tk.scores, reverse=True)
    assert tk.cells[0] == divmod(int(np.argmax(g)), 32)
    for i in range(k):
        for j in range(i):
            (a, b), (c, d) = tk.cells[i], tk.cells[j]
            assert (a - c) ** 2 + (b - d) ** 2 > 4


def test_rollout_contract(micro_trajs):
    m = build_model(ModelConfig.micro("infer-skip", 64, precondition_frames=8), 2)
    t = micro_trajs[3]
    empty = rollout(m, t, 0)
    assert empty.horizon == 0 and empty.heatmaps == []
    r = rollout(m, t, 6, k=3)
    assert r.horizon == 6 and len(r.heatmaps) == 6
    assert r.positions.shape == (6, 3, 2) and r.world.shape == (6, 3, 2)
    assert all((np.diff(s) <= 0).all() for s in r.scores)
    assert all(0 <= h.min() and h.max() <= 1 for h in r.heatmaps)
    assert np.allclose(r.offsets, np.arange(1, 7) * 0.1)
    assert np.array_equal(r.world, rollout(m, t, 6, k=3).world)
    with pytest.raises(ValueError):
        rollout(m, t, len(t) - 8 + 1)


def test_rollout_horizon_20_spans_two_seconds(micro_trajs):
    t = micro_trajs[0]
    m = build_model(ModelConfig.micro("infer", 64, precondition_frames=len(t) - 20), 0)
    assert rollout(m, t, 20).offsets[-1] == pytest.approx(2.0)


def _tiny_run(trajs, **kw):
    m = build_model(tiny(**{k: kw.pop(k) for k in list(kw) if k in ("lambda_safe", "loss_reduction")}), 0)
    cfg = TrainConfig(**{"epochs": 3, "teacher_forcing_epochs": 1, "max_pred_frames": 6, **kw})
    return train(m, trajs, cfg)


def test_training_is_bit_reproducible(micro_trajs):
    a = _tiny_run(micro_trajs[:2])
    b = _tiny_run(micro_trajs[:2])
    assert [r.train_loss for r in a.curve] == [r.train_loss for r in b.curve]
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)
    assert [r.teacher_forced for r in a.curve] == [True, False, False]


def test_loss_table(micro_trajs):
    res = _tiny_run(micro_trajs[:1])
    lines = loss_table(res.curve).splitlines()
    assert lines[0].split("\t") == ["epoch", "train_loss", "val_ade"]
    assert [int(ln.split("\t")[0]) for ln in lines[1:]] == [1, 2, 3]


def test_lambda_zero_obstacle_free_is_pure_reconstruction(micro_trajs):
    from bevforecast.forecaster.train import _window_loss

    r = np.random.default_rng(0)
    heats = [ad.Tensor(r.random((1, 1, 8, 8))) for _ in range(3)]
    gts = r.random((3, 1, 1, 8, 8))
    obst = np.ones((3, 1, 1, 8, 8))
    pure = np.mean([float(ad.mse_loss(h, g, "sample").data) for h, g in zip(heats, gts)])
    assert float(_window_loss(heats, gts, obst, 0.0).data) == pytest.approx(pure)
    assert float(_window_loss(heats, gts, np.zeros_like(obst), 0.3).data) == pytest.approx(pure)


def test_non_finite_loss_names_trajectory(micro_trajs):
    m = build_model(tiny(), 0)
    m.params["head.b"].data[:] = np.nan
    with pytest.raises(FloatingPointError, match=micro_trajs[0].id):
        train(m, micro_trajs[:1], TrainConfig(epochs=1, max_pred_frames=2))


def test_resume_matches_uninterrupted(micro_trajs):
    full = _tiny_run(micro_trajs[:2])
    m = build_model(tiny(), 0)
    cfg = TrainConfig(epochs=1, teacher_forcing_epochs=1, max_pred_frames=6)
    first = train(m, micro_trajs[:2], cfg)
    cfg2 = TrainConfig(epochs=2, teacher_forcing_epochs=1, max_pred_frames=6)
    rest = train(first.model, micro_trajs[:2], cfg2, start_epoch=1, opt=first.opt)
    assert [r.epoch for r in rest.curve] == [2, 3]
    assert [r.train_loss for r in first.curve + rest.curve] == [r.train_loss for r in full.curve]
