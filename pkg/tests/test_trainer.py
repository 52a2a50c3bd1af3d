"""Losses, schedule, optimizer, fit loop, metric pass, transfer."""
import numpy as np
import pytest

from gridcast import tensor as T
from gridcast.dataset import gen_mask
from gridcast.model import ModelConfig, TrafficModel
from gridcast.synthetic import synthetic_dataset
from gridcast.tensor import Parameter, Tensor
from gridcast.trainer import (AdamW, MetricReport, TrainConfig, ablate_tag,
                              ablation_grid, evaluate, fit, loss_imp,
                              loss_pred, lr_at, masked_mse, total_loss,
                              zero_shot)


def small_dataset(seed=0, n_days=8):
    return synthetic_dataset(n_nodes=4, n_channels=1, n_days=n_days,
                             steps_per_day=24, seed=seed)


def small_model(seed=0):
    cfg = ModelConfig(n_nodes=4, n_channels=1, context_len=12, horizon=4,
                      width=8, gru_hidden=6, embed_width=2, guide_hidden=4,
                      n_layers=2, n_heads=2, adapted_blocks=1, lora_rank=2,
                      intervals_per_day=24, scale_hidden=4, gate_hidden=4)
    return TrafficModel(cfg, seed=seed)


def quick_config(**overrides):
    base = dict(lr=1e-3, warmup_steps=2, total_steps=10, batch_size=8,
                patience=5, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


# ---- losses ---------------------------------------------------------------


def test_loss_pred_hand_example():
    pred = Tensor(np.array([0.0, 0.0]))
    got = loss_pred(pred, np.array([1.0, 3.0]), np.ones(2, dtype=bool))
    assert got.item() == 5.0  # (1 + 9) / 2


def test_loss_pred_ignores_flagged_targets():
    pred = Tensor(np.array([0.0, 0.0, 7.0]))
    usable = np.array([True, True, False])
    base = loss_pred(pred, np.array([1.0, 3.0, 0.0]), usable).item()
    moved = loss_pred(pred, np.array([1.0, 3.0, 999.0]), usable).item()
    assert base == moved == 5.0


def test_loss_imp_single_cell():
    pred = Tensor(np.array([[5.0, 2.0]]))
    target = np.array([[3.0, 2.0]])
    mask = np.array([[0.0, 1.0]])
    got = loss_imp(pred, target, mask, np.ones_like(mask, dtype=bool))
    assert got.item() == 4.0  # one hidden cell, residual 2


def test_loss_imp_empty_set_warns_and_returns_zero():
    pred = Tensor(np.array([1.0, 2.0]))
    with pytest.warns(RuntimeWarning, match="empty imputation"):
        got = loss_imp(pred, np.array([9.0, 9.0]), np.ones(2),
                       np.ones(2, dtype=bool))
    assert got.item() == 0.0


def test_loss_imp_bitwise_invariant_to_visible_cells():
    rng = np.random.default_rng(0)
    target = rng.normal(size=(3, 5))
    mask = (rng.random((3, 5)) > 0.5).astype(np.float64)
    usable = np.ones_like(mask, dtype=bool)
    pred = rng.normal(size=(3, 5))
    base = loss_imp(Tensor(pred), target, mask, usable).item()
    for _ in range(50):
        jittered = pred.copy()
        visible = np.argwhere(mask == 1.0)
        r, c = visible[rng.integers(len(visible))]
        jittered[r, c] += rng.normal() * 100
        assert loss_imp(Tensor(jittered), target, mask, usable).item() == base
    # moving any hidden cell must move the loss
    hidden = np.argwhere(mask == 0.0)
    r, c = hidden[0]
    jittered = pred.copy()
    jittered[r, c] += 1.0
    assert loss_imp(Tensor(jittered), target, mask, usable).item() != base


def test_loss_imp_excludes_interpolated_positions():
    pred = Tensor(np.array([4.0, 4.0]))
    target = np.array([0.0, 0.0])
    mask = np.zeros(2)
    usable = np.array([True, False])  # second cell was interpolation fill
    got = loss_imp(pred, target, mask, usable)
    assert got.item() == 16.0


def test_total_loss_mixing():
    lp, li = Tensor(np.array(2.0)), Tensor(np.array(4.0))
    assert total_loss(lp, li, 1.0).item() == 2.0
    assert total_loss(lp, li, 0.0).item() == 4.0
    assert total_loss(lp, li, 0.5).item() == 3.0


def test_total_loss_affine_in_alpha():
    rng = np.random.default_rng(1)
    lp = Tensor(np.array(rng.uniform(0, 5)))
    li = Tensor(np.array(rng.uniform(0, 5)))
    at_one = total_loss(lp, li, 1.0).item()
    at_zero = total_loss(lp, li, 0.0).item()
    for alpha in [0.0, 0.1, 0.25, 0.5, 0.9, 1.0]:
        want = alpha * at_one + (1 - alpha) * at_zero
        assert abs(total_loss(lp, li, alpha).item() - want) < 1e-6


def test_masked_mse_gradient_respects_weights():
    pred = Parameter(np.array([1.0, 2.0, 3.0]))
    loss = masked_mse(pred, np.zeros(3), np.array([1.0, 0.0, 1.0]))
    loss.backward()
    assert pred.grad[1] == 0.0
    np.testing.assert_allclose(pred.grad[[0, 2]], [2 * 1.0 / 2, 2 * 3.0 / 2])


# ---- schedule and optimizer ------------------------------------------------


def test_lr_schedule_endpoints():
    cfg = TrainConfig(lr=0.4, warmup_steps=10, total_steps=50)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(5, cfg) == pytest.approx(0.2)
    assert lr_at(10, cfg) == pytest.approx(0.4)   # ramp endpoint
    assert lr_at(30, cfg) == pytest.approx(0.2)   # cosine midpoint
    assert lr_at(50, cfg) == 0.0
    assert lr_at(700, cfg) == 0.0


def test_lr_schedule_monotone_after_warmup():
    cfg = TrainConfig(lr=1.0, warmup_steps=5, total_steps=40)
    values = [lr_at(s, cfg) for s in range(5, 41)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_train_config_validation():
    with pytest.raises(ValueError, match="alpha"):
        TrainConfig(alpha=1.5).validate()
    with pytest.raises(ValueError, match="warmup"):
        TrainConfig(warmup_steps=10, total_steps=10).validate()
    with pytest.raises(ValueError, match="mask rates"):
        TrainConfig(mask_low=0.9, mask_high=0.2).validate()


def test_adamw_single_step_hand_oracle():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.25])
    opt = AdamW([p], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01)
    opt.step(lr=0.1)
    g = np.array([0.5, -0.25])
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    want = np.array([1.0, -2.0]) - 0.1 * (
        m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p.data, want, rtol=1e-12)


def test_adamw_skips_frozen_and_gradless():
    frozen = Parameter(np.array([3.0]))
    frozen.freeze()
    idle = Parameter(np.array([4.0]))
    active = Parameter(np.array([5.0]))
    active.grad = np.array([1.0])
    opt = AdamW([frozen, idle, active])
    assert frozen not in opt.params
    opt.step(lr=0.5)
    assert idle.data[0] == 4.0
    assert active.data[0] != 5.0


def test_adamw_zero_lr_is_identity():
    p = Parameter(np.array([1.5, -0.5]))
    before = p.data.copy()
    opt = AdamW([p])
    for _ in range(3):
        p.grad = np.array([0.3, 0.7])
        opt.step(lr=0.0)
    np.testing.assert_array_equal(p.data, before)


def test_weight_decay_is_decoupled():
    """With zero gradient signal the decay shrinks weights toward zero
    regardless of the adaptive denominator."""
    p = Parameter(np.array([2.0]))
    p.grad = np.array([0.0])
    opt = AdamW([p], weight_decay=0.5)
    opt.step(lr=0.1)
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


# ---- fit -------------------------------------------------------------------


def test_fit_deterministic_trajectory():
    ds = small_dataset()
    losses = []
    for _ in range(2):
        model = small_model(seed=3)
        model.fit_adjacency(ds)
        state = fit(model, ds, quick_config(total_steps=10))
        losses.append([row["loss"] for row in state.step_rows])
    assert losses[0] == losses[1]
    assert len(losses[0]) == 10


def test_fit_respects_step_budget_and_history_shape():
    ds = small_dataset()
    model = small_model(seed=4)
    model.fit_adjacency(ds)
    state = fit(model, ds, quick_config(total_steps=7))
    assert state.steps_run == 7
    assert [r["step"] for r in state.step_rows] == list(range(7))
    assert state.epoch_rows[-1]["steps"] == 7
    assert all(np.isfinite(r["loss"]) for r in state.step_rows)


def test_fit_zero_lr_leaves_parameters_and_early_stops():
    ds = small_dataset()
    model = small_model(seed=5)
    model.fit_adjacency(ds)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    state = fit(model, ds, quick_config(lr=0.0, total_steps=400, patience=2))
    after = model.state_dict()
    for name in before:
        np.testing.assert_array_equal(before[name], after[name], err_msg=name)
    assert state.stopped_early
    assert state.steps_run < 400
    vals = [r["val_loss"] for r in state.epoch_rows]
    assert vals.count(vals[0]) == len(vals)  # identical weights, identical val


def test_fit_restores_best_validation_weights():
    ds = small_dataset()
    model = small_model(seed=6)
    model.fit_adjacency(ds)
    state = fit(model, ds, quick_config(total_steps=24, batch_size=16))
    best = state.epoch_rows[state.best_epoch]["val_loss"]
    assert best == state.best_val
    assert min(r["val_loss"] for r in state.epoch_rows) == best


def test_fit_aborts_on_non_finite_loss():
    ds = small_dataset()
    model = small_model(seed=7)
    model.fit_adjacency(ds)
    model.scaler.center.data[:] = np.nan
    with pytest.raises(RuntimeError, match="non-finite training loss at step 0"):
        fit(model, ds, quick_config())


def test_fit_keeps_frozen_parameters_bitwise():
    ds = small_dataset()
    model = small_model(seed=8)
    model.fit_adjacency(ds)
    frozen_before = {name: p.data.copy() for name, p in model.param_table.items()
                     if not p.trainable}
    fit(model, ds, quick_config(total_steps=6, lr=1e-2))
    for name, old in frozen_before.items():
        np.testing.assert_array_equal(old, model.param_table[name].data,
                                      err_msg=name)


# ---- evaluation -------------------------------------------------------------


class _StubModel:
    """Forward that returns the target shifted by a fixed offset."""

    def __init__(self, config, dataset, offset):
        self.config = config
        self._ds = dataset
        self._offset = offset

    def forward(self, x, starts, task, mask=None, ablate=frozenset(), **kw):
        ctx, hor = self.config.context_len, self.config.horizon
        if task == "predict":
            target = np.stack([self._ds.values[s + ctx:s + ctx + hor]
                               for s in starts])
        else:
            target = x
        out = Tensor(target + self._offset)
        return type("R", (), {"output": out})()

    def parameter_counts(self):
        return {"total": 0, "trainable": 0, "frozen": 0,
                "backbone_matrix_trainable": 0}


def test_evaluate_perfect_stub_scores_zero():
    ds = small_dataset()
    cfg = ModelConfig(n_nodes=4, n_channels=1, context_len=12, horizon=4,
                      width=8, gru_hidden=6, embed_width=2, guide_hidden=4,
                      n_layers=2, n_heads=2, adapted_blocks=1,
                      intervals_per_day=24)
    stub = _StubModel(cfg, ds, offset=0.0)
    rep = evaluate(stub, ds, "test", "predict")
    np.testing.assert_array_equal(rep.mae, 0.0)
    np.testing.assert_array_equal(rep.rmse, 0.0)


def test_evaluate_constant_offset_stub_hand_metrics():
    ds = small_dataset()
    cfg = ModelConfig(n_nodes=4, n_channels=1, context_len=12, horizon=4,
                      width=8, gru_hidden=6, embed_width=2, guide_hidden=4,
                      n_layers=2, n_heads=2, adapted_blocks=1,
                      intervals_per_day=24)
    stub = _StubModel(cfg, ds, offset=0.25)
    rep = evaluate(stub, ds, "test", "predict")
    # the stub emits float32, so the residuals carry f32 quantization
    np.testing.assert_allclose(rep.mae, 0.25, rtol=1e-6)
    np.testing.assert_allclose(rep.rmse, 0.25, rtol=1e-6)
    # denormalized scale stretches by the per-node medians
    assert rep.mae_raw[0] > 0
    assert rep.counts[0] > 0


def test_evaluate_rmse_dominates_mae_on_real_model():
    ds = small_dataset()
    model = small_model(seed=9)
    model.fit_adjacency(ds)
    for task in ("predict", "impute"):
        rep = evaluate(model, ds, "test", task)
        assert (rep.rmse >= rep.mae).all()
        assert (rep.mae >= 0).all()
        assert rep.n_windows > 0


def test_evaluate_deterministic():
    ds = small_dataset()
    model = small_model(seed=10)
    model.fit_adjacency(ds)
    a = evaluate(model, ds, "test", "impute", seed=5)
    b = evaluate(model, ds, "test", "impute", seed=5)
    np.testing.assert_array_equal(a.mae, b.mae)
    np.testing.assert_array_equal(a.rmse, b.rmse)
    assert a.counts.tolist() == b.counts.tolist()


def test_evaluate_unknown_task_and_empty_split():
    ds = small_dataset()
    model = small_model(seed=11)
    with pytest.raises(ValueError, match="unknown task"):
        evaluate(model, ds, "test", "classify")
    tiny = synthetic_dataset(n_nodes=4, n_channels=1, n_days=2,
                             steps_per_day=24, seed=0)
    with pytest.raises(ValueError, match="empty evaluation"):
        evaluate(model, tiny, "test", "predict")


# ---- transfer and ablation tags ---------------------------------------------


def test_zero_shot_matches_evaluate_on_source():
    ds = small_dataset()
    model = small_model(seed=12)
    model.fit_adjacency(ds)
    direct = evaluate(model, ds, "test", "predict")
    transferred = zero_shot(model, ds, task="predict")
    np.testing.assert_array_equal(direct.mae, transferred.mae)
    np.testing.assert_array_equal(direct.rmse, transferred.rmse)


def test_zero_shot_leaves_model_bitwise_unchanged():
    source = small_dataset(seed=1)
    target = small_dataset(seed=2)
    model = small_model(seed=13)
    model.fit_adjacency(source)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    zero_shot(model, target, task="impute")
    for name, old in before.items():
        np.testing.assert_array_equal(old, model.state_dict()[name],
                                      err_msg=name)


def test_zero_shot_rejects_node_mismatch():
    model = small_model(seed=14)
    other = synthetic_dataset(n_nodes=8, n_channels=1, n_days=8,
                              steps_per_day=24, seed=3)
    with pytest.raises(ValueError, match="4"):
        zero_shot(model, other)


def test_ablate_tag_mapping():
    assert ablate_tag("none") == frozenset()
    assert ablate_tag("full") == frozenset()
    assert ablate_tag("STE") == frozenset({"ste"})
    assert ablate_tag("gs") == frozenset({"gs"})
    with pytest.raises(ValueError, match="unknown ablation"):
        ablate_tag("lora")


def test_ablation_grid_rows():
    ds = small_dataset()
    cfg = small_model(seed=0).config
    rows = ablation_grid(ds, cfg, quick_config(total_steps=4),
                         seeds=[0], variants=("full", "ge"))
    assert [r["variant"] for r in rows] == ["full", "ge"]
    assert all(np.isfinite(r["mae"]) for r in rows)
