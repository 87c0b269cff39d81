"""Self-supervised model learning from babbled motor commands.

Two modes:

``labeled``
    One vehicle per epoch (round-robin), hidden state zeroed at epoch start,
    one-hot context supplied, truncated BPTT every ``bptt_every`` steps.
``emergent``
    One continuous stream; the vehicle silently changes every ``V`` steps and
    the context input is never supplied.  Instead it is inferred online by a
    short retrospective pass (depth ``R_c``, ``r_c`` Adam cycles at
    ``eta_c_train``) while the weights follow BPTT over the last ``R_w``
    steps.  All activities are reset every ``activity_reset_every`` steps.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels, netcore
from .netcore import CONTEXT, Architecture, NetworkParams, NetworkState, clamp_state
from .optim import AdamState, Schedule, adam_step, clamp_range, lr_at
from .simworld import (Babbler, MotorBabbling, VehicleKind, VehicleState, WorldConfig,
                       spawn, step_vehicle)

log = logging.getLogger(__name__)

N_KINDS = len(VehicleKind)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    mode: str = "labeled"
    epochs: int = 3000
    steps_per_epoch: int = 2000
    bptt_every: int = 50
    schedule: Schedule = field(default_factory=Schedule.paper)
    seed: int = 0
    # emergent mode
    vehicle_switch_period: int = 205
    random_switch: tuple[int, int] | None = None
    R_c: int = 2
    r_c: int = 5
    eta_c_train: float = 0.1
    eta_sigma_train: float = 0.0
    eta_w: float | None = None     # emergent default 1e-4; labeled follows the schedule
    R_w: int = 30
    weight_update_every: int = 1
    weight_context: str = "current"   # or "recorded": contexts the steps were run with
    activity_reset_every: int = 2000
    initial_context: float = 1.0 / 3.0

    def __post_init__(self):
        if self.mode not in ("labeled", "emergent"):
            raise ValueError(f"mode must be 'labeled' or 'emergent', got {self.mode!r}")
        for name in ("epochs", "steps_per_epoch", "bptt_every", "seed", "vehicle_switch_period",
                     "R_c", "r_c", "R_w", "weight_update_every", "activity_reset_every"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
        if self.steps_per_epoch < 1 or self.bptt_every < 1 or self.weight_update_every < 1:
            raise ValueError("steps_per_epoch, bptt_every and weight_update_every must be >= 1")
        if self.weight_context not in ("current", "recorded"):
            raise ValueError(f"weight_context must be 'current' or 'recorded', got "
                             f"{self.weight_context!r}")
        if isinstance(self.schedule, (list, tuple)):
            self.schedule = Schedule(tuple(tuple(s) for s in self.schedule))
        if self.random_switch is not None:
            self.random_switch = tuple(int(v) for v in self.random_switch)
        if self.mode == "labeled" and self.steps_per_epoch % self.bptt_every:
            raise ValueError("bptt_every must divide steps_per_epoch")
        if self.mode == "emergent":
            if self.eta_w is None:
                self.eta_w = 1e-4
            lo = self.random_switch[0] if self.random_switch else self.vehicle_switch_period
            if lo < self.R_c:
                raise ValueError("vehicle switch period must be >= R_c")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        kw.setdefault("epochs", 300)
        kw.setdefault("schedule", Schedule.desk())
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    epoch_loss: list[float]
    epoch_lr: list[float]
    seed: int
    mode: str
    wall_clock: float = 0.0
    params: NetworkParams | None = None
    # emergent mode: true kinds and inferred contexts over the final epoch
    last_kinds: np.ndarray | None = None
    last_contexts: np.ndarray | None = None

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss", "lr"])
            for e, (loss, lr) in enumerate(zip(self.epoch_loss, self.epoch_lr)):
                w.writerow([e, repr(loss), repr(lr)])


def make_context_input(mode: str, kind: VehicleKind | None = None,
                       inferred: np.ndarray | None = None) -> np.ndarray:
    if mode == "labeled":
        c = np.zeros(N_KINDS)
        c[int(kind)] = 1.0
        return c
    return np.asarray(inferred, dtype=np.float64).copy()


def _labeled_episode(kind, rng, cfg: TrainConfig, world: WorldConfig, babbler: Babbler):
    """Inputs (T, 9) and target deltas (T, 2) for one babbled epoch."""
    n = cfg.steps_per_epoch
    state = spawn(kind, rng)
    babble = MotorBabbling(rng, world, babbler)
    x = np.empty((n, netcore.CONTEXT.stop))
    deltas = np.empty((n, 2))
    context = make_context_input("labeled", kind)
    for t in range(n):
        motor = babble(kind, state)
        nxt = step_vehicle(kind, state, motor, world)
        x[t, netcore.SENSOR] = state.position
        x[t, netcore.MOTOR] = motor
        x[t, CONTEXT] = context
        deltas[t] = nxt.position - state.position
        state = nxt
    return x, deltas


def _check_finite(loss: float, epoch: int, report: TrainReport) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} in epoch {epoch}", report)


def train_model(arch: Architecture, cfg: TrainConfig, world: WorldConfig = WorldConfig(),
                babbler: Babbler = Babbler(), init: NetworkParams | None = None,
                fast: bool = True) -> tuple[NetworkParams, TrainReport]:
    """Train a fresh (or given) network; returns final params and the loss report.

    ``fast=False`` runs the emergent mode through the step-by-step reference
    path (identical results up to rounding, much slower).
    """
    params = netcore.init_weights(arch, cfg.seed) if init is None else init.copy()
    started = time.perf_counter()
    if cfg.mode == "labeled":
        params, report = _train_labeled(params, cfg, world, babbler)
    else:
        params, report = _train_emergent(params, cfg, world, babbler, fast)
    report.wall_clock = time.perf_counter() - started
    report.params = params
    return params, report


def _train_labeled(params, cfg, world, babbler):
    arch = params.arch
    rng = np.random.default_rng([cfg.seed, 1])
    report = TrainReport([], [], cfg.seed, cfg.mode)
    weights = params.flat()
    opt = AdamState.fresh(weights.shape)
    window = cfg.bptt_every
    for epoch in range(cfg.epochs):
        kind = VehicleKind(epoch % N_KINDS)
        lr = lr_at(cfg.schedule, epoch)
        x, deltas = _labeled_episode(kind, rng, cfg, world, babbler)
        state = NetworkState.zeros(arch)
        total = 0.0
        for start in range(0, cfg.steps_per_epoch, window):
            stop = start + window
            trace = netcore.unroll(params, state, x[start:stop])
            target = deltas[start:stop]
            total += netcore.trace_loss(trace, target)
            grads = netcore.bptt(trace, target)
            weights, opt = adam_step(weights, grads.weights.flat(), opt, lr)
            params = NetworkParams.from_flat(arch, weights)
            state = trace.final_state
        mean = total / cfg.steps_per_epoch
        report.epoch_loss.append(mean)
        report.epoch_lr.append(lr)
        _check_finite(mean, epoch, report)
        if epoch % 50 == 0:
            log.debug("epoch %d kind %s loss %.3e", epoch, kind.name, mean)
    return params, report


class VehicleSchedule:
    """Which vehicle is active at each step of a continuous stream.

    Every switch picks one of the *other* kinds uniformly at random, so each
    boundary is a real change of dynamics.
    """

    def __init__(self, rng: np.random.Generator, period: int,
                 random_period: tuple[int, int] | None = None,
                 first: VehicleKind | None = None):
        self.rng = rng
        self.period = period
        self.random_period = random_period
        self.kind = VehicleKind(rng.integers(N_KINDS)) if first is None else first
        self.remaining = self._draw_period()

    def _draw_period(self) -> int:
        if self.random_period:
            lo, hi = self.random_period
            return int(self.rng.integers(lo, hi + 1))
        return self.period

    def advance(self) -> bool:
        """Consume one step; returns True if the vehicle changed for the next step."""
        self.remaining -= 1
        if self.remaining > 0:
            return False
        others = [k for k in VehicleKind if k != self.kind]
        self.kind = others[int(self.rng.integers(len(others)))]
        self.remaining = self._draw_period()
        return True


def _emergent_data(rng, schedule: VehicleSchedule, vehicle: VehicleState, babble: MotorBabbling,
                   world: WorldConfig, n: int):
    """One stretch of the babbling stream: inputs (context blank), deltas, kinds."""
    x = np.zeros((n, netcore.CONTEXT.stop))
    deltas = np.empty((n, 2))
    kinds = np.empty(n, dtype=np.int64)
    for t in range(n):
        kind = schedule.kind
        motor = babble(kind, vehicle)
        nxt = step_vehicle(kind, vehicle, motor, world)
        x[t, netcore.SENSOR] = vehicle.position
        x[t, netcore.MOTOR] = motor
        deltas[t] = nxt.position - vehicle.position
        kinds[t] = kind
        # A switched-in vehicle appears where the old one was, at rest.
        vehicle = VehicleState(nxt.position.copy(), np.zeros(2)) if schedule.advance() else nxt
    return x, deltas, kinds, vehicle


def _train_emergent(params, cfg, world, babbler, fast=True):
    arch = params.arch
    rng = np.random.default_rng([cfg.seed, 2])
    report = TrainReport([], [], cfg.seed, cfg.mode)
    schedule = VehicleSchedule(rng, cfg.vehicle_switch_period, cfg.random_switch)
    vehicle = spawn(schedule.kind, rng)
    babble = MotorBabbling(rng, world, babbler)
    depth = max(cfg.R_c, cfg.R_w)
    if fast:
        stream = _FusedStream(params, cfg, depth)
    else:
        weights = params.flat()
        w_opt = AdamState.fresh(weights.shape)
        ctx = _ContextStream(arch, cfg, depth)
    step = 0
    for epoch in range(cfg.epochs):
        eta_w = cfg.eta_w
        x, deltas, kinds, vehicle = _emergent_data(rng, schedule, vehicle, babble, world,
                                                   cfg.steps_per_epoch)
        if fast:
            losses, contexts = stream.run(x, deltas, eta_w, step)
            params = stream.params
        else:
            losses = np.empty(len(x))
            contexts = np.empty((len(x), N_KINDS))
            for t in range(len(x)):
                if step % cfg.activity_reset_every == 0:
                    ctx.reset()
                losses[t] = ctx.observe(params, x[t, netcore.SENSOR], x[t, netcore.MOTOR],
                                        deltas[t])
                ctx.infer(params)
                contexts[t] = ctx.context
                step += 1
                if step % cfg.weight_update_every == 0:
                    g = ctx.weight_gradient(params, cfg.R_w, cfg.weight_context == "current")
                    if g is not None and eta_w > 0:
                        weights, w_opt = adam_step(weights, g, w_opt, eta_w)
                        params = NetworkParams.from_flat(arch, weights)
        step = (epoch + 1) * cfg.steps_per_epoch
        mean = float(np.mean(losses))
        report.epoch_loss.append(mean)
        report.epoch_lr.append(eta_w)
        report.last_kinds, report.last_contexts = kinds, contexts
        _check_finite(mean, epoch, report)
        if epoch % 20 == 0:
            log.debug("epoch %d loss %.3e context %s", epoch, mean, contexts[-1])
    return params, report


class _FusedStream:
    """Emergent-mode state carried between compiled stretches of the stream.

    Keeps the last ``depth`` rows of inputs, targets and entry states so the
    inference and weight windows can reach back over a stretch boundary.
    """

    def __init__(self, params: NetworkParams, cfg: TrainConfig, depth: int):
        arch = params.arch
        self.params = params.copy()
        self.cfg = cfg
        self.depth = depth
        h = arch.hidden_dim
        hc = h if arch.is_lstm else 0
        self.x_hist = np.zeros((depth, arch.input_dim))
        self.t_hist = np.zeros((depth, arch.output_dim))
        self.h_hist = np.zeros((depth + 1, h))
        self.c_hist = np.zeros((depth + 1, hc))
        self.since_reset = 0
        self.context = np.full(N_KINDS, cfg.initial_context)
        self.c_opt = AdamState.fresh(N_KINDS)
        self.s_opt = AdamState.fresh(h + hc)
        self.w_opt = AdamState.fresh(netcore.count_weights(arch))

    def run(self, x: np.ndarray, deltas: np.ndarray, eta_w: float, step0: int):
        cfg, arch, d = self.cfg, self.params.arch, self.depth
        n = len(x)
        xs = np.vstack([self.x_hist, x])
        ts = np.vstack([self.t_hist, deltas])
        hs = np.zeros((d + n + 1, self.h_hist.shape[1]))
        cs = np.zeros((d + n + 1, self.c_hist.shape[1]))
        hs[:d + 1], cs[:d + 1] = self.h_hist, self.c_hist
        contexts = np.empty((n, N_KINDS))
        c, s, w = self.c_opt, self.s_opt, self.w_opt
        losses, self.since_reset, c.step_count, s.step_count, w.step_count = \
            _kernels.emergent_stream(
                arch.is_lstm, *netcore.kernel_weights(self.params), xs, ts, hs, cs, d,
                self.since_reset, cfg.activity_reset_every, CONTEXT.start, CONTEXT.stop,
                self.context, cfg.initial_context, cfg.R_c, cfg.r_c, cfg.eta_c_train,
                c.first_moment, c.second_moment, c.step_count,
                cfg.eta_sigma_train, s.first_moment, s.second_moment, s.step_count,
                cfg.R_w, cfg.weight_update_every, eta_w,
                w.first_moment, w.second_moment, w.step_count,
                cfg.weight_context == "current", step0,
                w.beta1, w.beta2, w.epsilon, contexts)
        c.step_count, s.step_count, w.step_count = (int(c.step_count), int(s.step_count),
                                                    int(w.step_count))
        self.x_hist, self.t_hist = xs[-d:].copy(), ts[-d:].copy()
        self.h_hist, self.c_hist = hs[-d - 1:].copy(), cs[-d - 1:].copy()
        return losses, contexts


class _ContextStream:
    """Rolling buffers plus online context inference for emergent training.

    ``states[k]`` is the network state entering ``inputs[k]``; ``states`` has
    one more entry than ``inputs`` (the current state).
    """

    def __init__(self, arch: Architecture, cfg: TrainConfig, depth: int):
        self.arch = arch
        self.cfg = cfg
        self.depth = depth
        self.reset()

    def reset(self) -> None:
        self.inputs: deque[np.ndarray] = deque(maxlen=self.depth)
        self.targets: deque[np.ndarray] = deque(maxlen=self.depth)
        self.states: deque[NetworkState] = deque([NetworkState.zeros(self.arch)],
                                                 maxlen=self.depth + 1)
        self.context = np.full(N_KINDS, self.cfg.initial_context)
        self.c_opt = AdamState.fresh(N_KINDS)
        self.s_opt = AdamState.fresh(2 * self.arch.hidden_dim)

    def observe(self, params, position, motor, delta) -> float:
        x = np.concatenate([position, motor, self.context])
        trace = netcore.unroll(params, self.states[-1], x[None, :])
        self.inputs.append(x)
        self.targets.append(delta)
        self.states.append(trace.final_state)
        return netcore.trace_loss(trace, delta[None, :])

    def infer(self, params) -> None:
        n = min(self.cfg.R_c, len(self.inputs))
        if n < self.cfg.R_c or self.cfg.r_c == 0:
            return
        x = np.array(list(self.inputs)[-n:])
        target = np.array(list(self.targets)[-n:])
        start = self.states[-n - 1]
        for _ in range(self.cfg.r_c):
            x[:, CONTEXT] = self.context
            grads = netcore.bptt(netcore.unroll(params, start, x), target)
            self.context, self.c_opt = adam_step(self.context, grads.context.sum(axis=0),
                                                 self.c_opt, self.cfg.eta_c_train)
            self.context = clamp_range(self.context, 0.0, 1.0)
            if self.cfg.eta_sigma_train > 0:
                start = _adapt_state(self.arch, start, grads.initial_state, self,
                                     self.cfg.eta_sigma_train)
        x[:, CONTEXT] = self.context
        trace = netcore.unroll(params, start, x)
        # Refresh the tail so buffers stay consistent with the inferred context.
        base = len(self.inputs) - n
        for k in range(n):
            self.inputs[base + k] = x[k].copy()
        self.states[-n - 1] = start
        for k in range(n):
            self.states[len(self.states) - n + k] = trace.state_at(k)

    def weight_gradient(self, params, depth: int, current: bool) -> np.ndarray | None:
        if len(self.inputs) < depth:
            return None
        x = np.array(list(self.inputs)[-depth:])
        if current:
            x[:, CONTEXT] = self.context
        target = np.array(list(self.targets)[-depth:])
        trace = netcore.unroll(params, self.states[-depth - 1], x)
        return netcore.bptt(trace, target).weights.flat()


def _adapt_state(arch, state: NetworkState, grad: NetworkState, holder, lr) -> NetworkState:
    flat = np.concatenate([state.hidden, state.cell if arch.is_lstm else state.hidden * 0])
    g = np.concatenate([grad.hidden, grad.cell if arch.is_lstm else grad.hidden * 0])
    flat, holder.s_opt = adam_step(flat, g, holder.s_opt, lr)
    h = arch.hidden_dim
    return clamp_state(arch, NetworkState(flat[:h], flat[h:] if arch.is_lstm else None))
