"""The retrospective/prospective control loop.

Every control step

1. *looks back*: re-unrolls the last ``R`` recorded steps (observed
   positions, executed motors, the current context estimate substituted
   everywhere), and nudges the shared context vector and the hidden state
   that entered the window by Adam on the prediction-error gradient;
2. optionally adapts the weights over the last ``R_w`` steps;
3. *looks ahead*: imagines ``P`` steps driven by the planned motor sequence,
   feeding its own predicted positions back as sensor input, and nudges the
   plan toward the goal;
4. executes the first planned command, records the new frame, and shifts
   the plan one step left.

The loop state is mutated in place; functions return it for chaining.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels, netcore
from .netcore import (CONTEXT, MOTOR, SENSOR, Architecture, NetworkParams, NetworkState,
                      clamp_state)
from .optim import AdamState, adam_step, clamp_range
from .simworld import ARENA_HI, ARENA_LO, VehicleKind, VehicleState, WorldConfig, step_vehicle
from .trainer import N_KINDS


@dataclass
class RepriseConfig:
    R: int = 20
    r: int = 20
    eta_c: float = 0.01
    eta_sigma: float = 0.001
    P: int = 7
    p: int = 20
    eta_x: float = 0.01
    online_learning: bool = False
    R_w: int = 30
    eta_w: float = 1e-4
    initial_context: float = 1.0 / 3.0
    initial_action: float = 0.5

    def __post_init__(self):
        for name in ("R", "r", "P", "p", "R_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("eta_c", "eta_sigma", "eta_x", "eta_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RepriseConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown reprise config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class Frame:
    sensor: np.ndarray      # observed position s^t
    motor: np.ndarray       # executed command x^t
    context: np.ndarray     # context estimate used for the step
    prediction: np.ndarray  # predicted next position
    target: np.ndarray      # observed change in position s^{t+1} - s^t

    def input_vector(self, context: np.ndarray | None = None) -> np.ndarray:
        c = self.context if context is None else context
        return np.concatenate([self.sensor, self.motor, c])


@dataclass
class Goal:
    target: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if np.any(self.target < ARENA_LO) or np.any(self.target > ARENA_HI):
            raise ValueError(f"goal {self.target} lies outside the arena")


@dataclass
class ControlLoopState:
    """Buffers and optimiser states of one running control loop.

    ``states[k]`` is the network state entering ``frames[k]``; the last entry
    of ``states`` is the current state (one more than ``frames``).
    """

    arch: Architecture
    observation: np.ndarray
    context: np.ndarray
    actions: np.ndarray
    capacity: int
    frames: deque = field(default_factory=deque)
    states: deque = field(default_factory=deque)
    c_opt: AdamState | None = None
    s_opt: AdamState | None = None
    x_opt: AdamState | None = None
    w_opt: AdamState | None = None
    t: int = 0

    @property
    def state(self) -> NetworkState:
        return self.states[-1]

    def reset_action_optimizer(self) -> None:
        self.x_opt = AdamState.fresh(self.actions.shape)

    def reset_activity(self, cfg: "RepriseConfig") -> None:
        """Zero hidden activity and history; context back to the prior."""
        self.frames.clear()
        self.states.clear()
        self.states.append(NetworkState.zeros(self.arch))
        self.context = np.full(N_KINDS, cfg.initial_context)
        self.c_opt = AdamState.fresh(N_KINDS)
        self.s_opt = AdamState.fresh(_state_size(self.arch))


def _state_size(arch: Architecture) -> int:
    return arch.hidden_dim * (2 if arch.is_lstm else 1)


def _state_vector(state: NetworkState) -> np.ndarray:
    return state.hidden if state.cell is None else np.concatenate([state.hidden, state.cell])


def _state_from_vector(arch: Architecture, v: np.ndarray) -> NetworkState:
    h = arch.hidden_dim
    return NetworkState(v[:h].copy(), v[h:].copy() if arch.is_lstm else None)


def init_loop(arch: Architecture, observation, cfg: RepriseConfig,
              context=None) -> ControlLoopState:
    capacity = max(cfg.R, cfg.R_w if cfg.online_learning else 0) + 1
    loop = ControlLoopState(
        arch=arch,
        observation=np.asarray(observation, dtype=np.float64).copy(),
        context=np.full(N_KINDS, cfg.initial_context),
        actions=np.full((cfg.P, netcore.MOTOR_DIM), cfg.initial_action),
        capacity=capacity,
        frames=deque(maxlen=capacity),
        states=deque([NetworkState.zeros(arch)], maxlen=capacity + 1),
    )
    loop.reset_activity(cfg)
    if context is not None:
        loop.context = clamp_range(context, 0.0, 1.0)
    loop.reset_action_optimizer()
    loop.w_opt = AdamState.fresh(netcore.count_weights(arch))
    return loop


def _window(loop: ControlLoopState, n: int):
    frames = list(loop.frames)[-n:]
    x = np.array([f.input_vector() for f in frames])
    target = np.array([f.target for f in frames])
    return x, target


def retrospective_infer(loop: ControlLoopState, params: NetworkParams,
                        cfg: RepriseConfig, fast: bool = True) -> ControlLoopState:
    """Adapt the shared context and the window's entry state; refresh the buffer.

    ``fast`` runs the compiled loop; the reference path below computes the
    same updates step by step through :func:`netcore.bptt`.
    """
    R = cfg.R
    if len(loop.frames) < R or (cfg.eta_c == 0 and cfg.eta_sigma == 0):
        return loop
    arch = params.arch
    x, target = _window(loop, R)
    start = loop.states[-R - 1]
    if fast:
        start, hidden, cells = _retrospect_fused(loop, params, cfg, x, target, start)
        new_states = [NetworkState(hidden[k].copy(), cells[k].copy() if arch.is_lstm else None)
                      for k in range(R)]
    else:
        for _ in range(cfg.r):
            x[:, CONTEXT] = loop.context
            trace = netcore.unroll(params, start, x)
            grads = netcore.bptt(trace, target)
            if cfg.eta_c > 0:
                c, loop.c_opt = adam_step(loop.context, grads.context.sum(axis=0),
                                          loop.c_opt, cfg.eta_c)
                loop.context = clamp_range(c, 0.0, 1.0)
            if cfg.eta_sigma > 0:
                v, loop.s_opt = adam_step(_state_vector(start),
                                          _state_vector(grads.initial_state),
                                          loop.s_opt, cfg.eta_sigma)
                start = clamp_state(arch, _state_from_vector(arch, v))
        x[:, CONTEXT] = loop.context
        trace = netcore.unroll(params, start, x)
        new_states = [trace.state_at(k) for k in range(R)]
    n_states = len(loop.states)
    loop.states[n_states - R - 1] = start
    for k in range(R):
        loop.states[n_states - R + k] = new_states[k]
    return loop


def _retrospect_fused(loop, params, cfg, x, target, start):
    arch = params.arch
    h0 = start.hidden.copy()
    c0 = start.cell.copy() if arch.is_lstm else np.zeros(0)
    context = loop.context.copy()
    c_opt, s_opt = loop.c_opt.copy(), loop.s_opt.copy()
    c_t, s_t, hidden, cells = _kernels.retrospect(
        arch.is_lstm, *netcore.kernel_weights(params), h0, c0, x, target,
        CONTEXT.start, CONTEXT.stop, context, cfg.r,
        cfg.eta_c, c_opt.first_moment, c_opt.second_moment, c_opt.step_count,
        cfg.eta_sigma, s_opt.first_moment, s_opt.second_moment, s_opt.step_count,
        c_opt.beta1, c_opt.beta2, c_opt.epsilon)
    c_opt.step_count, s_opt.step_count = int(c_t), int(s_t)
    loop.context, loop.c_opt, loop.s_opt = context, c_opt, s_opt
    return NetworkState(h0, c0 if arch.is_lstm else None), hidden, cells


def online_weight_update(loop: ControlLoopState, params: NetworkParams,
                         cfg: RepriseConfig) -> NetworkParams:
    """One Adam step on all weights from BPTT over the last ``R_w`` frames."""
    if not cfg.online_learning or len(loop.frames) < cfg.R_w or cfg.eta_w == 0:
        return params
    x, target = _window(loop, cfg.R_w)
    x[:, CONTEXT] = loop.context
    trace = netcore.unroll(params, loop.states[-cfg.R_w - 1], x)
    grads = netcore.bptt(trace, target)
    flat, loop.w_opt = adam_step(params.flat(), grads.weights.flat(), loop.w_opt, cfg.eta_w)
    return NetworkParams.from_flat(params.arch, flat)


def imagine(loop: ControlLoopState, params: NetworkParams,
            actions: np.ndarray | None = None) -> netcore.UnrolledTrace:
    """Closed-loop rollout of the plan from the current state and observation."""
    actions = loop.actions if actions is None else actions
    x = np.empty((len(actions), params.arch.input_dim))
    x[:, SENSOR] = loop.observation
    x[:, MOTOR] = actions
    x[:, CONTEXT] = loop.context
    return netcore.unroll(params, loop.state, x, closed_loop=True)


def prospective_infer(loop: ControlLoopState, params: NetworkParams, goal: Goal,
                      cfg: RepriseConfig, fast: bool = True) -> np.ndarray:
    """Adam on the planned motor sequence toward ``goal``; returns the new plan."""
    goals = np.broadcast_to(goal.target, (len(loop.actions), 2))
    if fast:
        arch = params.arch
        x = np.empty((len(loop.actions), arch.input_dim))
        x[:, SENSOR] = loop.observation
        x[:, MOTOR] = loop.actions
        x[:, CONTEXT] = loop.context
        state = loop.state
        c0 = state.cell if arch.is_lstm else np.zeros(0)
        opt = loop.x_opt.copy()
        a_t = _kernels.prospect(
            arch.is_lstm, *netcore.kernel_weights(params), state.hidden.copy(), c0.copy(),
            x, np.ascontiguousarray(goals), MOTOR.start, MOTOR.stop, cfg.p, cfg.eta_x,
            opt.first_moment.reshape(-1), opt.second_moment.reshape(-1), opt.step_count,
            opt.beta1, opt.beta2, opt.epsilon)
        opt.step_count = int(a_t)
        loop.actions, loop.x_opt = x[:, MOTOR].copy(), opt
        return loop.actions
    for _ in range(cfg.p):
        grads = netcore.bptt(imagine(loop, params), goals)
        a, loop.x_opt = adam_step(loop.actions, grads.motor, loop.x_opt, cfg.eta_x)
        loop.actions = clamp_range(a, 0.0, 1.0)
    return loop.actions


@dataclass
class StepMetrics:
    t: int
    context: np.ndarray
    pred_error: float
    goal_distance: float
    motor: np.ndarray
    position: np.ndarray


def _shift(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a[1:], a[-1:]], axis=0)


def control_step(loop: ControlLoopState, params: NetworkParams, goal: Goal,
                 world: WorldConfig, kind: VehicleKind, true_state: VehicleState,
                 cfg: RepriseConfig, fast: bool = True):
    """Run one full inference/execution cycle.

    Returns ``(loop, params, new_true_state, metrics)``; ``kind`` and
    ``true_state`` only drive the simulator and never reach the network.
    """
    retrospective_infer(loop, params, cfg, fast)
    params = online_weight_update(loop, params, cfg)
    prospective_infer(loop, params, goal, cfg, fast)

    motor = loop.actions[0].copy()
    new_state = step_vehicle(kind, true_state, motor, world)
    x = np.concatenate([loop.observation, motor, loop.context])
    delta, next_net = netcore.forward_step(params, loop.state, x)
    observed = new_state.position - loop.observation
    loop.frames.append(Frame(loop.observation.copy(), motor, loop.context.copy(),
                             loop.observation + delta, observed))
    loop.states.append(next_net)
    loop.observation = new_state.position.copy()
    loop.actions = _shift(loop.actions)
    loop.x_opt = AdamState(_shift(loop.x_opt.first_moment), _shift(loop.x_opt.second_moment),
                           loop.x_opt.step_count, loop.x_opt.beta1, loop.x_opt.beta2,
                           loop.x_opt.epsilon)
    loop.t += 1
    metrics = StepMetrics(loop.t, loop.context.copy(), float(np.linalg.norm(delta - observed)),
                          float(np.linalg.norm(new_state.position - goal.target)),
                          motor, new_state.position.copy())
    return loop, params, new_state, metrics


TRACE_COLUMNS = ["t", "vehicle_true", "c0", "c1", "c2", "pred_error", "goal_distance",
                 "motor0", "motor1", "motor2", "motor3", "pos_x", "pos_y"]


def metrics_row(m: StepMetrics, kind: VehicleKind) -> list:
    return [m.t, VehicleKind(kind).name.lower(), *map(float, m.context), m.pred_error,
            m.goal_distance, *map(float, m.motor), *map(float, m.position)]


def write_trace_csv(path: str | Path, rows: list[list], extra_columns=()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*TRACE_COLUMNS, *extra_columns])
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
