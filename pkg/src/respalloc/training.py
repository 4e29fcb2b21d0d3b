"""Bi-level allocation learning.

The outer problem regresses observed controls onto filter outputs: for each
sample the model produces an allocation gamma from the sample's context, the
safety-filter QP is solved at the sample's state, and the mismatch between
its optimum and the observed controls is scored (Huber by default). The
gradient chains d loss / d u*  .  d u* / d gamma  .  d gamma / d params,
with the middle factor coming from the QP's linearized KKT system.

Safety rows do not depend on gamma, so constraint assembly is hoisted out of
the training loop (``prepare_batch``).
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import InteractionSample, InteractionScene
from .filter_qp import FilterProblem, differentiate_filter, solve_filter
from .models import ConstantGamma

LOSS_METRICS = ("huber", "l2", "l1")


@dataclass
class TrainConfig:
    epochs: int = 3000
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"           # "adam" or "sgd"
    loss_metric: str = "huber"
    huber_delta: float = 1.0
    seed: int = 0
    probe_count: int = 16             # contexts tracked per epoch for neural models
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_metric not in LOSS_METRICS:
            raise ValueError(f"unknown loss metric {self.loss_metric!r}")


def residual_loss(residual, metric="huber", delta=1.0):
    """Elementwise loss summed over a residual vector, and its derivative."""
    r = np.asarray(residual, dtype=float)
    if metric == "l2":
        return float(np.sum(r ** 2)), 2.0 * r
    if metric == "l1":
        return float(np.sum(np.abs(r))), np.sign(r)
    if metric == "huber":
        a = np.abs(r)
        quad = a <= delta
        val = float(np.sum(np.where(quad, 0.5 * r ** 2, delta * (a - 0.5 * delta))))
        return val, np.where(quad, r, delta * np.sign(r))
    raise ValueError(f"unknown loss metric {metric!r}")


@dataclass
class PreparedBatch:
    """Constraint rows and stacked controls hoisted out of the inner loop."""

    contexts: np.ndarray        # (B, context_dim) model inputs
    constraints: list           # per-sample CbfLinearConstraint
    u_des: np.ndarray           # (B, m) stacked desired controls
    u_obs: np.ndarray           # (B, m) stacked observed controls
    lb: np.ndarray
    ub: np.ndarray
    beta1: float
    beta2: float

    def __len__(self):
        return len(self.constraints)

    def subset(self, idx):
        return PreparedBatch(
            contexts=self.contexts[idx], constraints=[self.constraints[i] for i in idx],
            u_des=self.u_des[idx], u_obs=self.u_obs[idx], lb=self.lb, ub=self.ub,
            beta1=self.beta1, beta2=self.beta2)


def prepare_batch(samples: Sequence[InteractionSample], scene: InteractionScene,
                  context_dim=None) -> PreparedBatch:
    """Assemble per-sample safety rows once; they do not depend on gamma."""
    if not samples:
        raise ValueError("empty batch")
    from .barriers import assemble_constraint

    contexts, cons, u_des, u_obs = [], [], [], []
    for s in samples:
        xs = scene.filter_state(s.x)
        contexts.append(xs)
        cons.append(assemble_constraint(scene.system, scene.barrier,
                                        scene.alpha_chain, xs))
        u_des.append(scene.desired_controls(s).ravel())
        u_obs.append(s.u.ravel())
    lb, ub = scene.system.control_bounds()
    ctx = np.asarray(contexts, dtype=float)
    if context_dim == 0:
        ctx = np.zeros((len(samples), 0))
    return PreparedBatch(contexts=ctx, constraints=cons,
                         u_des=np.asarray(u_des), u_obs=np.asarray(u_obs),
                         lb=lb, ub=ub, beta1=scene.beta1, beta2=scene.beta2)


def _solve_prepared(prep: PreparedBatch, gamma_rows):
    problems, solutions = [], []
    for i in range(len(prep)):
        problem = FilterProblem(
            constraint=prep.constraints[i], u_des=prep.u_des[i],
            gamma=gamma_rows[i], beta1=prep.beta1, beta2=prep.beta2,
            lb=prep.lb, ub=prep.ub)
        problems.append(problem)
        solutions.append(solve_filter(problem))
    return problems, solutions


def batch_loss(prep: PreparedBatch, model, config: TrainConfig) -> float:
    """Mean per-sample loss of filter outputs against observed controls."""
    gamma_rows = model.gamma_batch(prep.contexts)
    _, solutions = _solve_prepared(prep, gamma_rows)
    total = 0.0
    for i, sol in enumerate(solutions):
        val, _ = residual_loss(prep.u_obs[i] - sol.u, config.loss_metric,
                               config.huber_delta)
        total += val
    loss = total / len(prep)
    if math.isnan(loss):
        raise FloatingPointError("loss is NaN; check data and filter weights")
    return loss


def batch_loss_and_grad(prep: PreparedBatch, model, config: TrainConfig):
    """Loss plus its gradient in the model's flat parameters."""
    gamma_rows = model.gamma_batch(prep.contexts)
    problems, solutions = _solve_prepared(prep, gamma_rows)
    b = len(prep)
    total = 0.0
    dgamma = np.zeros((b, model.n_agents))
    for i, (problem, sol) in enumerate(zip(problems, solutions)):
        val, dval_du_resid = residual_loss(prep.u_obs[i] - sol.u,
                                           config.loss_metric, config.huber_delta)
        total += val
        dval_du = -dval_du_resid        # residual = u_obs - u*
        jac = differentiate_filter(problem, sol)
        dgamma[i] = dval_du @ jac.du_dgamma
    loss = total / b
    if math.isnan(loss):
        raise FloatingPointError("loss is NaN; check data and filter weights")
    grad = model.vjp_params_batch(prep.contexts, dgamma / b)
    return loss, grad


def loss(samples, model, scene: InteractionScene, config: Optional[TrainConfig] = None):
    """Spec-level entry point over raw samples."""
    config = config or TrainConfig()
    return batch_loss(prepare_batch(samples, scene, model.context_dim), model, config)


class Sgd:
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def step(self, params, grad):
        return params - self.learning_rate * grad


class Adam:
    """Moment-averaged steps with bias correction."""

    def __init__(self, learning_rate, beta_m=0.9, beta_v=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta_m = beta_m
        self.beta_v = beta_v
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta_m * self.m + (1 - self.beta_m) * grad
        self.v = self.beta_v * self.v + (1 - self.beta_v) * grad ** 2
        m_hat = self.m / (1 - self.beta_m ** self.t)
        v_hat = self.v / (1 - self.beta_v ** self.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return Sgd(config.learning_rate)
    return Adam(config.learning_rate)


def gradient_step(model, batch_prep: PreparedBatch, config: TrainConfig,
                  optimizer=None):
    """One mini-batch update in place; returns the pre-step loss."""
    optimizer = optimizer or make_optimizer(config)
    value, grad = batch_loss_and_grad(batch_prep, model, config)
    model.params = optimizer.step(model.params, grad)
    return value


@dataclass
class TrainReport:
    """Loss/estimate traces and the final parameters of one run."""

    losses: np.ndarray                 # (epochs_run,)
    step_ms: np.ndarray                # (epochs_run,) mean per gradient step
    final_params: np.ndarray
    config: dict
    gamma_trace: Optional[np.ndarray] = None   # (epochs_run, N) constant models
    probe_trace: Optional[np.ndarray] = None   # (epochs_run, P, N) neural models
    probe_contexts: Optional[np.ndarray] = None
    diverged: bool = False

    @property
    def epochs_run(self):
        return len(self.losses)

    def final_gamma(self):
        if self.gamma_trace is None:
            raise ValueError("no constant-gamma trace in this report")
        return self.gamma_trace[-1]

    def to_dict(self):
        doc = {"losses": [float(v) for v in self.losses],
               "step_ms": [float(v) for v in self.step_ms],
               "final_params": [float(v) for v in self.final_params],
               "config": self.config,
               "diverged": self.diverged}
        if self.gamma_trace is not None:
            doc["gamma_trace"] = [[float(v) for v in row] for row in self.gamma_trace]
        if self.probe_trace is not None:
            doc["probe_trace"] = np.asarray(self.probe_trace).tolist()
            doc["probe_contexts"] = np.asarray(self.probe_contexts).tolist()
        return doc

    def save_json(self, path):
        _atomic_write_text(path, json.dumps(self.to_dict()))

    def save_trace_csv(self, path):
        lines = []
        n = self.gamma_trace.shape[1] if self.gamma_trace is not None else 0
        cols = ["epoch", "loss", "wall_ms"] + [f"gamma{i + 1}" for i in range(n)]
        lines.append(",".join(cols))
        for e in range(self.epochs_run):
            row = [str(e), repr(float(self.losses[e])), repr(float(self.step_ms[e]))]
            if n:
                row += [repr(float(v)) for v in self.gamma_trace[e]]
            lines.append(",".join(row))
        _atomic_write_text(path, "\n".join(lines) + "\n")


def _atomic_write_text(path, text):
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fit(samples, model, scene: InteractionScene, config: TrainConfig) -> TrainReport:
    """Seed-deterministic mini-batch training over shuffled epochs.

    The last short batch of an epoch is kept. Aborts with a partial report
    if the loss exceeds the divergence limit.
    """
    prep = prepare_batch(samples, scene, model.context_dim)
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(config)
    n = len(prep)
    is_constant = isinstance(model, ConstantGamma)
    probe = None
    if not is_constant:
        take = min(config.probe_count, n)
        probe = prep.contexts[np.linspace(0, n - 1, take).astype(int)]

    losses, wall, gtrace, ptrace = [], [], [], []
    diverged = False
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss, steps, t0 = 0.0, 0, time.perf_counter()
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grad = batch_loss_and_grad(prep.subset(idx), model, config)
            model.params = optimizer.step(model.params, grad)
            epoch_loss += value * len(idx)
            steps += 1
        elapsed_ms = 1e3 * (time.perf_counter() - t0) / steps
        losses.append(epoch_loss / n)
        wall.append(elapsed_ms)
        if is_constant:
            gtrace.append(model.gamma())
        elif probe is not None:
            ptrace.append(model.gamma_batch(probe))
        if losses[-1] > config.divergence_limit:
            diverged = True
            break

    return TrainReport(
        losses=np.asarray(losses), step_ms=np.asarray(wall),
        final_params=model.params.copy(), config=_config_dict(config),
        gamma_trace=np.asarray(gtrace) if gtrace else None,
        probe_trace=np.asarray(ptrace) if ptrace else None,
        probe_contexts=probe, diverged=diverged)


def _config_dict(config: TrainConfig):
    return {k: getattr(config, k) for k in (
        "epochs", "batch_size", "learning_rate", "optimizer", "loss_metric",
        "huber_delta", "seed", "probe_count", "divergence_limit")}


def fit_windows(samples, scene: InteractionScene, config: TrainConfig,
                n_windows: int):
    """Fit a constant allocation per contiguous sample window.

    Used to track schedules that change over the course of a dataset.
    Returns an (n_windows, N) array of per-window estimates.
    """
    if n_windows <= 0:
        raise ValueError("n_windows must be positive")
    n = len(samples)
    bounds = np.linspace(0, n, n_windows + 1).astype(int)
    out = []
    for w in range(n_windows):
        chunk = samples[bounds[w]:bounds[w + 1]]
        model = ConstantGamma(scene.system.n_agents)
        fit(chunk, model, scene, config)
        out.append(model.gamma())
    return np.asarray(out)
