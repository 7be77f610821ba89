"""Augmented Lagrangian training of the auction networks.

Each iteration alternates an inner misreport ascent (regret module)
with one adaptive-moment gradient step on the loss

    C = -(1/B) sum_l sum_i p_i
        + sum_i lambda_r_i rgt_i + (rho_r / 2) (sum_i rgt_i)^2
        + sum_j lambda_f_j unf_j + (rho_f / 2) (sum_j unf_j)^2

where rgt and unf are batch means and the misreports are treated as
constants.  The dual multipliers lambda grow by rho times the mean
violation every Q iterations; rho itself grows on an epoch schedule.
Both are therefore monotone nondecreasing over a run.

Everything is seeded through named RNG streams, so a (config, setting,
fairness) triple reproduces its history bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tape, backward
from .fairness import FairnessSpec, unfairness, unfairness_nodes
from .model import AuctionModel, utility_nodes
from .regret import optimize_misreports
from .valuations import SettingSpec, rng_stream, sample_profiles

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainResult",
    "TrainingAborted",
    "train",
    "train_step",
    "update_multipliers",
    "lagrangian_loss",
    "penalty_terms",
    "history_to_csv",
    "HISTORY_COLUMNS",
    "default_hidden_layers",
]

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    "epoch", "iter", "revenue_mean", "revenue_std", "regret_mean",
    "regret_max", "unfairness_mean", "unfairness_max", "lambda_r_mean",
    "lambda_f_mean", "rho_r", "rho_f",
]

# Hidden-layer count per (n, m) for the uniform-valuation sweep; the
# single-bidder settings use 2 and the feature settings (3x4) use 3.
LAYER_TABLE = {
    (1, 2): 2, (1, 3): 2, (1, 4): 2, (1, 5): 2, (1, 6): 2,
    (2, 2): 2, (2, 3): 2, (2, 4): 2, (2, 5): 3, (2, 6): 3,
    (3, 2): 2, (3, 3): 2, (3, 4): 3, (3, 5): 3, (3, 6): 3,
    (4, 2): 2, (4, 3): 3, (4, 4): 3, (4, 5): 4, (4, 6): 4,
    (5, 2): 3, (5, 3): 3, (5, 4): 4, (5, 5): 4, (5, 6): 5,
}


def default_hidden_layers(setting: SettingSpec) -> int:
    if setting.setting_id in ("A", "B"):
        return 2
    if setting.setting_id in ("D", "E", "F"):
        return 3
    return LAYER_TABLE.get((setting.n, setting.m), 3)


@dataclass
class TrainConfig:
    epochs: int
    train_samples: int
    batch_size: int = 128
    misreport_steps: int = 25
    misreport_rate: float = 0.1
    learning_rate: float = 1e-3
    q_regret: int = 100
    q_fairness: int = 100
    rho_every_epochs: int = 2
    rho_increment: float = 1.0
    lambda_regret_init: float = 5.0
    lambda_fairness_init: float = 5.0
    rho_regret_init: float = 1.0
    rho_fairness_init: float = 1.0
    hidden_layers: int | None = None  # None: per-setting default
    hidden_width: int = 100
    holdout_samples: int = 4096
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.train_samples < 1:
            raise ValueError("epochs must be >= 0 and train_samples >= 1")
        if self.batch_size < 1 or self.batch_size > self.train_samples:
            raise ValueError("batch_size must be in [1, train_samples]")
        if self.misreport_steps < 0:
            raise ValueError("misreport_steps must be >= 0")
        if self.misreport_rate <= 0:
            raise ValueError("misreport_rate must be > 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        for name in ("q_regret", "q_fairness", "rho_every_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("rho_increment", "lambda_regret_init",
                     "lambda_fairness_init", "rho_regret_init",
                     "rho_fairness_init"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.hidden_layers is not None and self.hidden_layers < 1:
            raise ValueError("hidden_layers must be >= 1")
        if self.hidden_width < 1 or self.holdout_samples < 1:
            raise ValueError("hidden_width and holdout_samples must be >= 1")


@dataclass
class AdamState:
    m1: list = field(default_factory=list)
    m2: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def like(cls, arrays):
        return cls(m1=[np.zeros_like(a) for a in arrays],
                   m2=[np.zeros_like(a) for a in arrays])


def adam_update(adam: AdamState, arrays, grads, lr,
                beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected step; returns new arrays (inputs untouched)."""
    adam.step += 1
    c1 = 1.0 - beta1 ** adam.step
    c2 = 1.0 - beta2 ** adam.step
    out = []
    for k, (a, g) in enumerate(zip(arrays, grads)):
        adam.m1[k] = beta1 * adam.m1[k] + (1.0 - beta1) * g
        adam.m2[k] = beta2 * adam.m2[k] + (1.0 - beta2) * g * g
        out.append(a - lr * (adam.m1[k] / c1) /
                   (np.sqrt(adam.m2[k] / c2) + eps))
    return out


@dataclass
class WindowAccumulator:
    """Mean violation since the last multiplier update."""
    regret_sum: np.ndarray
    fairness_sum: np.ndarray
    regret_count: int = 0
    fairness_count: int = 0

    @classmethod
    def zero(cls, n, m):
        return cls(np.zeros(n), np.zeros(m))


@dataclass
class TrainState:
    model: AuctionModel
    setting: SettingSpec
    config: TrainConfig
    lambda_regret: np.ndarray
    lambda_fairness: np.ndarray
    rho_regret: float
    rho_fairness: float
    adam: AdamState
    window: WindowAccumulator
    iteration: int = 0
    epoch: int = 0
    consecutive_rejects: int = 0
    rejected_steps: int = 0
    history: list = field(default_factory=list)
    holdout_history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, config: TrainConfig, setting: SettingSpec) -> "TrainState":
        config.validate()
        setting.validate()
        layers = config.hidden_layers or default_hidden_layers(setting)
        model = AuctionModel.init(
            setting.bidder_type, setting.n, setting.m, layers,
            rng_stream(config.seed, "weight-init"),
            hidden_width=config.hidden_width)
        arrays = [a for _, a in model.weight_arrays()]
        return cls(
            model=model, setting=setting, config=config,
            lambda_regret=np.full(setting.n, float(config.lambda_regret_init)),
            lambda_fairness=np.full(setting.m, float(config.lambda_fairness_init)),
            rho_regret=float(config.rho_regret_init),
            rho_fairness=float(config.rho_fairness_init),
            adam=AdamState.like(arrays),
            window=WindowAccumulator.zero(setting.n, setting.m))


class TrainingAborted(RuntimeError):
    """Raised after too many consecutive non-finite losses."""


def penalty_terms(rgt, unf, lam_r, lam_f, rho_r, rho_f) -> float:
    """Multiplier and quadratic penalties for given mean violations."""
    rgt = np.asarray(rgt, dtype=np.float64)
    unf = np.asarray(unf, dtype=np.float64)
    return float(np.dot(lam_r, rgt) + 0.5 * rho_r * rgt.sum() ** 2
                 + np.dot(lam_f, unf) + 0.5 * rho_f * unf.sum() ** 2)


def _loss_nodes(tape: Tape, model: AuctionModel, batch, misreports,
                fspec: FairnessSpec, lam_r, lam_f, rho_r, rho_f,
                weight_nodes):
    """Record the full loss; returns (loss node, aux nodes for metrics)."""
    b, n, m = batch.shape
    stacked = np.concatenate([batch, np.tile(batch, (n, 1, 1))], axis=0)
    view = stacked[b:].reshape(n, b, n, m)
    view[np.arange(n), :, np.arange(n), :] = misreports.transpose(1, 0, 2)
    values = np.tile(batch, (n + 1, 1, 1))

    bids = tape.constant(stacked)
    nodes = model.forward_nodes(tape, bids, weight_nodes=weight_nodes)
    util = utility_nodes(tape, nodes, tape.constant(values))

    pay_truth = tape.slice(nodes.payment, axis=0, start=0, stop=b)
    rev_samples = tape.sum(pay_truth, axis=1)
    revenue = tape.mean(rev_samples)
    loss = tape.scale(revenue, -1.0)

    util_truth = tape.slice(util, axis=0, start=0, stop=b)
    util_mis = tape.slice(util, axis=0, start=b, stop=(n + 1) * b)
    sel = np.zeros((n * b, n))
    sel.reshape(n, b, n)[np.arange(n), :, np.arange(n)] = 1.0
    gains = tape.sum(tape.mul(util_mis, tape.constant(sel)), axis=1)
    gains = tape.reshape(gains, (n, b))

    hinge_nodes = []
    rgt_nodes = []
    rgt_total = None
    for i in range(n):
        hinge = tape.relu(tape.sub(tape.index(gains, 0, i),
                                   tape.index(util_truth, 1, i)))
        hinge_nodes.append(hinge)
        rgt = tape.mean(hinge)
        rgt_nodes.append(rgt)
        loss = tape.add(loss, tape.scale(rgt, float(lam_r[i])))
        rgt_total = rgt if rgt_total is None else tape.add(rgt_total, rgt)
    loss = tape.add(loss, tape.scale(tape.mul(rgt_total, rgt_total),
                                     0.5 * rho_r))

    z_truth = tape.slice(nodes.z, axis=0, start=0, stop=b)
    unf_nodes = unfairness_nodes(tape, z_truth, fspec)
    unf_total = None
    for j, unf in enumerate(unf_nodes):
        loss = tape.add(loss, tape.scale(unf, float(lam_f[j])))
        unf_total = unf if unf_total is None else tape.add(unf_total, unf)
    loss = tape.add(loss, tape.scale(tape.mul(unf_total, unf_total),
                                     0.5 * rho_f))

    aux = {
        "revenue_samples": rev_samples,
        "hinges": hinge_nodes,
        "rgt": rgt_nodes,
        "unf": unf_nodes,
        "z_truth": z_truth,
    }
    return loss, aux


def lagrangian_loss(model: AuctionModel, batch, misreports,
                    fairness_spec: FairnessSpec, lam_r, lam_f,
                    rho_r: float, rho_f: float) -> float:
    """Scalar loss value for fixed weights and precomputed misreports."""
    tape = Tape()
    loss, _ = _loss_nodes(tape, model, np.asarray(batch, dtype=np.float64),
                          np.asarray(misreports, dtype=np.float64),
                          fairness_spec, np.asarray(lam_r),
                          np.asarray(lam_f), float(rho_r), float(rho_f),
                          weight_nodes=None)
    return float(tape.value(loss))


def train_step(state: TrainState, minibatch, fspec: FairnessSpec) -> TrainState:
    """One Algorithm-1 outer iteration; mutates and returns ``state``."""
    cfg = state.config
    batch = np.asarray(minibatch, dtype=np.float64)
    misreports = optimize_misreports(
        state.model, batch, state.setting, steps=cfg.misreport_steps,
        rate=cfg.misreport_rate, init="truthful")

    tape = Tape()
    weight_nodes = state.model.register_weights(tape, requires_grad=True)
    loss, aux = _loss_nodes(tape, state.model, batch, misreports, fspec,
                            state.lambda_regret, state.lambda_fairness,
                            state.rho_regret, state.rho_fairness,
                            weight_nodes)
    loss_value = float(tape.value(loss))
    if not np.isfinite(loss_value):
        state.rejected_steps += 1
        state.consecutive_rejects += 1
        logger.warning("iteration %d: non-finite loss %r, step rejected",
                       state.iteration + 1, loss_value)
        return state
    state.consecutive_rejects = 0

    grad_map = backward(tape, loss)
    arrays = [a for _, a in state.model.weight_arrays()]
    grads = [grad_map[nid] for nid in weight_nodes]
    state.model.replace_weights(
        adam_update(state.adam, arrays, grads, cfg.learning_rate))
    state.iteration += 1

    rev = tape.value(aux["revenue_samples"])
    hinges = np.stack([tape.value(h) for h in aux["hinges"]], axis=1)
    rgt = np.array([float(tape.value(r)) for r in aux["rgt"]])
    unf_mean = np.array([float(tape.value(u)) for u in aux["unf"]])
    unf_samples, _ = unfairness(tape.value(aux["z_truth"]), fspec)

    state.window.regret_sum += rgt
    state.window.fairness_sum += unf_mean
    state.window.regret_count += 1
    state.window.fairness_count += 1

    state.history.append({
        "epoch": state.epoch,
        "iter": state.iteration,
        "revenue_mean": float(rev.mean()),
        "revenue_std": float(rev.std()),
        "regret_mean": float(hinges.mean()),
        "regret_max": float(hinges.max()),
        "unfairness_mean": float(unf_samples.mean()),
        "unfairness_max": float(unf_samples.max()),
        "lambda_r_mean": float(state.lambda_regret.mean()),
        "lambda_f_mean": float(state.lambda_fairness.mean()),
        "rho_r": state.rho_regret,
        "rho_f": state.rho_fairness,
    })
    update_multipliers(state)
    return state


def update_multipliers(state: TrainState,
                       window: WindowAccumulator | None = None) -> TrainState:
    """Dual updates on schedule: lambda += rho * mean window violation."""
    cfg = state.config
    w = window if window is not None else state.window
    t = state.iteration
    if t and t % cfg.q_regret == 0 and w.regret_count:
        state.lambda_regret = state.lambda_regret + \
            state.rho_regret * (w.regret_sum / w.regret_count)
        w.regret_sum = np.zeros_like(w.regret_sum)
        w.regret_count = 0
    if t and t % cfg.q_fairness == 0 and w.fairness_count:
        state.lambda_fairness = state.lambda_fairness + \
            state.rho_fairness * (w.fairness_sum / w.fairness_count)
        w.fairness_sum = np.zeros_like(w.fairness_sum)
        w.fairness_count = 0
    return state


def holdout_snapshot(state: TrainState, holdout, train_sample,
                     fspec: FairnessSpec) -> dict:
    """Cheap per-epoch metrics: forward passes only, no misreport search."""
    def stats(profiles):
        rev_chunks, unf_chunks = [], []
        for lo in range(0, len(profiles), 2048):
            chunk = profiles[lo:lo + 2048]
            tape = Tape()
            nodes = state.model.forward_nodes(tape, tape.constant(chunk))
            rev_chunks.append(tape.value(nodes.payment).sum(axis=1))
            per_item, _ = unfairness(tape.value(nodes.z), fspec)
            unf_chunks.append(per_item)
        rev = np.concatenate(rev_chunks)
        unf = np.concatenate(unf_chunks)
        return float(rev.mean()), float(unf.mean())

    hold_rev, hold_unf = stats(holdout)
    _, train_unf = stats(train_sample)
    return {
        "epoch": state.epoch,
        "holdout_revenue": hold_rev,
        "holdout_unfairness": hold_unf,
        "train_unfairness": train_unf,
    }


@dataclass
class TrainResult:
    model: AuctionModel
    state: TrainState
    history: list
    holdout_history: list


def train(config: TrainConfig, setting: SettingSpec,
          fspec: FairnessSpec) -> TrainResult:
    """Full training loop; deterministic given (config, setting, fspec)."""
    config.validate()
    fspec.validate(setting.n, setting.m)
    state = TrainState.fresh(config, setting)
    data = sample_profiles(setting, config.train_samples,
                           rng_stream(config.seed, "train-data"))
    holdout = sample_profiles(setting, config.holdout_samples,
                              rng_stream(config.seed, "holdout-data"))
    train_probe = data[:config.holdout_samples]
    steps_per_epoch = config.train_samples // config.batch_size

    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        order = rng_stream(config.seed, "batch-order", epoch).permutation(
            config.train_samples)
        for k in range(steps_per_epoch):
            rows = order[k * config.batch_size:(k + 1) * config.batch_size]
            train_step(state, data[rows], fspec)
            if state.consecutive_rejects >= 100:
                raise TrainingAborted(
                    f"{state.consecutive_rejects} consecutive non-finite "
                    f"losses at epoch {epoch}")
        state.holdout_history.append(
            holdout_snapshot(state, holdout, train_probe, fspec))
        if epoch % config.rho_every_epochs == 0:
            state.rho_regret += config.rho_increment
            state.rho_fairness += config.rho_increment
        last = state.holdout_history[-1]
        logger.info(
            "epoch %d/%d: holdout revenue %.4f, unfairness %.5f, "
            "lambda_r %.2f, rho_r %.1f",
            epoch, config.epochs, last["holdout_revenue"],
            last["holdout_unfairness"], state.lambda_regret.mean(),
            state.rho_regret)

    return TrainResult(model=state.model, state=state,
                       history=state.history,
                       holdout_history=state.holdout_history)


def history_to_csv(history) -> str:
    """Render iteration history with the stable column set."""
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(_fmt(row[c]) for c in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))
