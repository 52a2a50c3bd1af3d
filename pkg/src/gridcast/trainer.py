"""Joint training, evaluation, and transfer.

Every optimization step draws two views of one mini-batch of windows: a
forecasting view (context in, future out) and a reconstruction view (the
same context with entries hidden by a fresh random mask).  The two mean
squared errors combine as alpha * pred + (1 - alpha) * imp.  Entries
that were filled by interpolation during preparation never count toward
any loss or metric; the reconstruction loss is further restricted to the
positions actively hidden by the mask.

The optimizer is AdamW with decoupled weight decay, driven by a linear
warmup into cosine decay.  Validation loss is recomputed each epoch with
a fixed generator so early stopping compares like with like, and the
best-validation weights are restored at the end.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn, tensor as T
from .dataset import GridDataset, gen_mask, window_starts
from .model import ABLATIONS, TrafficModel
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5            # forecasting share of the joint loss
    lr: float = 3e-4
    warmup_steps: int = 100
    total_steps: int = 1000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    patience: int = 5
    mask_low: float = 0.7
    mask_high: float = 0.8
    block_masks: bool = False
    train_stride: int = 1
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive")
        if not 0.0 <= self.mask_low <= self.mask_high <= 1.0:
            raise ValueError("mask rates must satisfy 0 <= low <= high <= 1")
        return self


# ---- losses -------------------------------------------------------------


def masked_mse(pred: Tensor, target: np.ndarray, weight: np.ndarray,
               what: str = "loss") -> Tensor:
    """Mean squared error over positions with weight 1; 0-weight entries
    cannot move the value even bitwise.  An all-zero weight set yields 0
    with a warning."""
    count = float(weight.sum())
    if count == 0.0:
        warnings.warn(f"empty {what} target set; loss is 0", RuntimeWarning)
        count = 1.0
    residual = T.sub(pred, np.asarray(target, dtype=pred.dtype))
    return T.div(T.sum_(T.mul(T.square(residual), weight)), count)


def loss_pred(pred: Tensor, target: np.ndarray, usable: np.ndarray) -> Tensor:
    """Forecast error over future entries that were actually observed
    (interpolation-filled targets are excluded)."""
    return masked_mse(pred, target, usable.astype(pred.dtype), "forecast")


def loss_imp(pred: Tensor, target: np.ndarray, mask: np.ndarray,
             usable: np.ndarray) -> Tensor:
    """Reconstruction error over hidden-and-observed positions only."""
    weight = (1.0 - mask) * usable
    return masked_mse(pred, target, weight.astype(pred.dtype), "imputation")


def total_loss(pred_term: Tensor, imp_term: Tensor, alpha: float) -> Tensor:
    return T.add(T.mul(pred_term, alpha), T.mul(imp_term, 1.0 - alpha))


# ---- schedule and optimizer ---------------------------------------------


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> lr over warmup, cosine decay to 0 at total_steps,
    0 beyond."""
    if step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    if step >= config.total_steps:
        return 0.0
    span = config.total_steps - config.warmup_steps
    progress = (step - config.warmup_steps) / span
    return config.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


class AdamW:
    """Decoupled weight decay; only trainable Parameters are ever touched."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2 = beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.first, self.second):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


# ---- batching helpers ---------------------------------------------------


def _slice_windows(arr: np.ndarray, starts: np.ndarray, length: int) -> np.ndarray:
    return np.stack([arr[s:s + length] for s in starts])


def _joint_losses(model: TrafficModel, dataset: GridDataset,
                  starts: np.ndarray, config: TrainConfig, mask: np.ndarray,
                  u_pred, u_imp, ablate: frozenset, train: bool,
                  rng: np.random.Generator | None):
    ctx, horizon = model.config.context_len, model.config.horizon
    x = _slice_windows(dataset.values, starts, ctx)
    usable_x = ~_slice_windows(dataset.interpolated, starts, ctx)
    y = _slice_windows(dataset.values, starts + ctx, horizon)
    usable_y = ~_slice_windows(dataset.interpolated, starts + ctx, horizon)

    pred_out = model.forward(x, starts, "predict", train=train, u=u_pred,
                             rng=rng, ablate=ablate).output
    lp = loss_pred(pred_out, y, usable_y)
    imp_out = model.forward(x, starts, "impute", mask=mask, train=train,
                            u=u_imp, rng=rng, ablate=ablate).output
    li = loss_imp(imp_out, x, mask, usable_x)
    return total_loss(lp, li, config.alpha), lp, li


def _validation_loss(model: TrafficModel, dataset: GridDataset,
                     starts: np.ndarray, config: TrainConfig,
                     ablate: frozenset) -> tuple[float, float, float]:
    """Deterministic joint loss over the validation windows: fixed masks,
    midpoint scale draw, identical every epoch."""
    rng = np.random.default_rng([config.seed, 104729])
    tot = lp_sum = li_sum = weight = 0.0
    with T.no_grad():
        for i in range(0, len(starts), config.batch_size):
            batch = starts[i:i + config.batch_size]
            shape = (len(batch), model.config.context_len,
                     model.config.n_nodes, model.config.n_channels)
            mask, _ = gen_mask(shape, config.mask_low, config.mask_high, rng,
                               config.block_masks)
            loss, lp, li = _joint_losses(model, dataset, batch, config, mask,
                                         None, None, ablate, False, None)
            tot += loss.item() * len(batch)
            lp_sum += lp.item() * len(batch)
            li_sum += li.item() * len(batch)
            weight += len(batch)
    return tot / weight, lp_sum / weight, li_sum / weight


# ---- fit ----------------------------------------------------------------


@dataclass
class TrainState:
    step_rows: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    best_val: float = np.inf
    best_epoch: int = -1
    steps_run: int = 0
    stopped_early: bool = False
    wall_time_s: float = 0.0


def fit(model: TrafficModel, dataset: GridDataset, config: TrainConfig,
        ablate: frozenset = frozenset(), log=None) -> TrainState:
    """Train until the step budget runs out or validation stalls for
    `patience` epochs; the best-validation weights are left on the model.
    A non-finite training loss aborts immediately."""
    config.validate()
    started = time.perf_counter()
    ctx, horizon = model.config.context_len, model.config.horizon
    train_starts = window_starts(dataset, "train", ctx, horizon,
                                 config.train_stride)
    val_starts = window_starts(dataset, "val", ctx, horizon,
                               max(horizon, 1))
    if len(train_starts) == 0:
        raise ValueError("training split yields no windows")
    if len(val_starts) == 0:
        raise ValueError("validation split yields no windows")

    rng = np.random.default_rng([config.seed, 13])
    optimizer = AdamW(model.param_table.values(), config.beta1, config.beta2,
                      config.adam_eps, config.weight_decay)
    state = TrainState()
    best_weights = None
    last_finite = None
    bad_epochs = 0
    step = 0
    epoch = 0

    while step < config.total_steps:
        order = rng.permutation(len(train_starts))
        for i in range(0, len(order), config.batch_size):
            if step >= config.total_steps:
                break
            batch = train_starts[order[i:i + config.batch_size]]
            shape = (len(batch), ctx, model.config.n_nodes,
                     model.config.n_channels)
            mask, _ = gen_mask(shape, config.mask_low, config.mask_high, rng,
                               config.block_masks)
            u_pred = rng.random((len(batch), 1))
            u_imp = rng.random((len(batch), 1))

            model.zero_grad()
            loss, lp, li = _joint_losses(model, dataset, batch, config, mask,
                                         u_pred, u_imp, ablate, True, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite training loss at step {step}; "
                    f"last finite loss {last_finite}")
            last_finite = value
            loss.backward()
            lr = lr_at(step, config)
            optimizer.step(lr)
            state.step_rows.append({
                "step": step, "epoch": epoch, "lr": lr, "loss": value,
                "loss_pred": lp.item(), "loss_imp": li.item()})
            step += 1

        val, val_pred, val_imp = _validation_loss(model, dataset, val_starts,
                                                  config, ablate)
        state.epoch_rows.append({
            "epoch": epoch, "steps": step, "val_loss": val,
            "val_pred": val_pred, "val_imp": val_imp})
        if log is not None:
            log(f"epoch {epoch}: step {step} val_loss {val:.6f}")
        if val < state.best_val:
            state.best_val = val
            state.best_epoch = epoch
            best_weights = model.state_dict()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                state.stopped_early = True
                break
        epoch += 1

    if best_weights is not None:
        model.load_state_dict(best_weights)
    state.steps_run = step
    state.wall_time_s = time.perf_counter() - started
    return state


# ---- evaluation ---------------------------------------------------------


class _Kahan:
    """Compensated accumulator; keeps sums stable across many small terms."""
    __slots__ = ("total", "comp")

    def __init__(self):
        self.total = 0.0
        self.comp = 0.0

    def add(self, value: float):
        y = value - self.comp
        t = self.total + y
        self.comp = (t - self.total) - y
        self.total = t


@dataclass
class MetricReport:
    task: str
    split: str
    mae: np.ndarray               # [C] normalized scale
    rmse: np.ndarray              # [C]
    mae_raw: np.ndarray           # [C] denormalized (input units)
    rmse_raw: np.ndarray          # [C]
    counts: np.ndarray            # [C] residuals measured per channel
    excluded_interp: int
    n_windows: int
    wall_time_s: float
    param_counts: dict

    @property
    def macro_mae(self) -> float:
        return float(self.mae.mean())

    @property
    def macro_rmse(self) -> float:
        return float(self.rmse.mean())


def evaluate(model: TrafficModel, dataset: GridDataset, split: str = "test",
             task: str = "predict", batch_size: int = 32, seed: int = 0,
             ablate: frozenset = frozenset(), stride: int | None = None,
             mask_low: float = 0.7, mask_high: float = 0.8) -> MetricReport:
    """Deterministic metric pass: midpoint scale draw, masks from a fresh
    seeded generator, residuals restricted to genuinely observed entries."""
    started = time.perf_counter()
    ctx, horizon = model.config.context_len, model.config.horizon
    n_ch = model.config.n_channels
    if task == "predict":
        out_len = horizon
        starts = window_starts(dataset, split, ctx, horizon,
                               stride or max(horizon, 1))
    elif task == "impute":
        out_len = ctx
        starts = window_starts(dataset, split, ctx, 0, stride or ctx)
    else:
        raise ValueError(f"unknown task {task!r}")
    if len(starts) == 0:
        raise ValueError(f"empty evaluation split {split!r}")

    rng = np.random.default_rng([seed, 271828])
    abs_acc = [_Kahan() for _ in range(n_ch)]
    sq_acc = [_Kahan() for _ in range(n_ch)]
    abs_raw = [_Kahan() for _ in range(n_ch)]
    sq_raw = [_Kahan() for _ in range(n_ch)]
    cnt = [_Kahan() for _ in range(n_ch)]
    excluded = 0

    with T.no_grad():
        for i in range(0, len(starts), batch_size):
            batch = starts[i:i + batch_size]
            x = _slice_windows(dataset.values, batch, ctx)
            usable_x = ~_slice_windows(dataset.interpolated, batch, ctx)
            if task == "predict":
                out = model.forward(x, batch, "predict", ablate=ablate).output
                target = _slice_windows(dataset.values, batch + ctx, horizon)
                usable = ~_slice_windows(dataset.interpolated, batch + ctx,
                                         horizon)
                weight = usable.astype(np.float64)
                excluded += int((~usable).sum())
            else:
                mask, _ = gen_mask(x.shape, mask_low, mask_high, rng)
                out = model.forward(x, batch, "impute", mask=mask,
                                    ablate=ablate).output
                target = x
                hidden = 1.0 - mask.astype(np.float64)
                weight = hidden * usable_x
                excluded += int(round((hidden * ~usable_x).sum()))

            residual = (out.data.astype(np.float64) - target) * weight
            scaled = residual * dataset.medians.astype(np.float64)
            for c in range(n_ch):
                r = residual[..., c]
                abs_acc[c].add(float(np.abs(r).sum()))
                sq_acc[c].add(float((r * r).sum()))
                rr = scaled[..., c]
                abs_raw[c].add(float(np.abs(rr).sum()))
                sq_raw[c].add(float((rr * rr).sum()))
                cnt[c].add(float(weight[..., c].sum()))

    counts = np.array([k.total for k in cnt])
    safe = np.maximum(counts, 1.0)
    mae = np.array([k.total for k in abs_acc]) / safe
    rmse = np.sqrt(np.array([k.total for k in sq_acc]) / safe)
    mae_raw = np.array([k.total for k in abs_raw]) / safe
    rmse_raw = np.sqrt(np.array([k.total for k in sq_raw]) / safe)
    return MetricReport(
        task=task, split=split, mae=mae, rmse=rmse, mae_raw=mae_raw,
        rmse_raw=rmse_raw, counts=counts, excluded_interp=excluded,
        n_windows=len(starts), wall_time_s=time.perf_counter() - started,
        param_counts=model.parameter_counts())


# ---- transfer and ablations ----------------------------------------------


def zero_shot(model: TrafficModel, target: GridDataset, task: str = "predict",
              split: str = "test", reuse_adjacency: bool = False,
              batch_size: int = 32, seed: int = 0) -> MetricReport:
    """Evaluate on an unseen grid without any parameter update.  The
    functional graph is rebuilt from the target's own training range
    unless `reuse_adjacency`; the model is left bitwise as it was."""
    if target.n_nodes != model.config.n_nodes:
        raise ValueError(
            f"target has {target.n_nodes} nodes but the model was built "
            f"for {model.config.n_nodes}")
    saved = model.bias_gen.adjacency.data.copy()
    try:
        if not reuse_adjacency:
            model.fit_adjacency(target)
        return evaluate(model, target, split=split, task=task,
                        batch_size=batch_size, seed=seed)
    finally:
        model.bias_gen.adjacency.data = saved


def ablate_tag(which: str) -> frozenset:
    """Map a switch name to the forward-time ablation set."""
    tag = which.lower()
    if tag in ("none", "full", ""):
        return frozenset()
    if tag not in ABLATIONS:
        raise ValueError(f"unknown ablation {which!r}; pick one of "
                         f"{', '.join(ABLATIONS)}")
    return frozenset({tag})


def ablation_grid(dataset: GridDataset, model_config, train_config: TrainConfig,
                  seeds, variants=("full", "ste", "gs", "ge"),
                  task: str = "predict", log=None) -> list[dict]:
    """Train each variant from scratch per seed and measure test error.
    One row per (variant, seed) with the macro MAE/RMSE."""
    rows = []
    for seed in seeds:
        for variant in variants:
            ablate = ablate_tag(variant)
            model = TrafficModel(model_config, seed=seed)
            model.fit_adjacency(dataset)
            state = fit(model, dataset, replace(train_config, seed=seed),
                        ablate=ablate)
            report = evaluate(model, dataset, "test", task, seed=seed,
                              ablate=ablate)
            rows.append({
                "variant": variant, "seed": seed,
                "mae": report.macro_mae, "rmse": report.macro_rmse,
                "steps": state.steps_run, "best_val": state.best_val})
            if log is not None:
                log(f"{variant} seed {seed}: test mae {report.macro_mae:.6f}")
    return rows
