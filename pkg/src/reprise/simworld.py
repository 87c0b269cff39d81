"""Point-mass vehicles in a bordered 3x2 arena, plus motor babbling.

Positions live in ``x in [-1.5, 1.5]``, ``y in [0, 2]``.  Each vehicle takes
a four-channel throttle in ``[0, 1]``:

* rocket  -- two thrusters tilted 45 degrees off vertical, gravity, inertia;
  channels 3 and 4 are ignored
* stepper -- four thrusters at 45/135 degrees that displace it directly,
  no inertia
* glider  -- the stepper's thrusters acting as forces, inertia, no friction
"""

from __future__ import annotations

import csv
import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

ARENA_LO = np.array([-1.5, 0.0])
ARENA_HI = np.array([1.5, 2.0])

_S45 = np.sin(np.pi / 4)
_C45 = np.cos(np.pi / 4)
# Unit thrust directions, one row per motor channel.
MOTOR_DIRECTIONS = np.array([
    [-_S45, _C45],
    [_S45, _C45],
    [-_S45, -_C45],
    [_S45, -_C45],
])


class VehicleKind(enum.IntEnum):
    ROCKET = 0
    STEPPER = 1
    GLIDER = 2

    @classmethod
    def parse(cls, value) -> "VehicleKind":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


@dataclass
class VehicleState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def copy(self) -> "VehicleState":
        return VehicleState(self.position.copy(), self.velocity.copy())


@dataclass(frozen=True)
class WorldConfig:
    dt: float = 0.05
    gravity: float = 9.81
    mass: float = 0.1
    thrust_gain: float = 1.0
    stepper_gain: float = 1.0

    def __post_init__(self):
        if self.dt <= 0 or self.mass <= 0:
            raise ValueError("dt and mass must be positive")

    def hover_throttle(self) -> float:
        """Per-motor rocket throttle that exactly cancels gravity."""
        return self.mass * self.gravity / (2.0 * _C45 * self.thrust_gain)

    def to_dict(self) -> dict:
        return asdict(self)


def spawn(kind: VehicleKind, rng: np.random.Generator) -> VehicleState:
    return VehicleState(rng.uniform(ARENA_LO, ARENA_HI), np.zeros(2))


def _block(position: np.ndarray, velocity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    clamped = np.clip(position, ARENA_LO, ARENA_HI)
    hit = (position < ARENA_LO) | (position > ARENA_HI)
    return clamped, np.where(hit, 0.0, velocity)


def step_vehicle(kind: VehicleKind, state: VehicleState, motor,
                 cfg: WorldConfig) -> VehicleState:
    motor = np.clip(np.asarray(motor, dtype=np.float64), 0.0, 1.0)
    if kind == VehicleKind.STEPPER:
        position = state.position + cfg.dt * cfg.stepper_gain * (motor @ MOTOR_DIRECTIONS)
        position, _ = _block(position, np.zeros(2))
        return VehicleState(position, np.zeros(2))
    if kind == VehicleKind.ROCKET:
        accel = cfg.thrust_gain * (motor[:2] @ MOTOR_DIRECTIONS[:2]) / cfg.mass
        accel = accel + np.array([0.0, -cfg.gravity])
    else:
        accel = cfg.thrust_gain * (motor @ MOTOR_DIRECTIONS) / cfg.mass
    velocity = state.velocity + cfg.dt * accel
    position = state.position + cfg.dt * velocity
    position, velocity = _block(position, velocity)
    return VehicleState(position, velocity)


@dataclass(frozen=True)
class Babbler:
    """Pseudo-random motor commands that roam the whole arena.

    A smoothed random walk over ``[0, 1]^4`` (new target with probability
    ``resample_prob``, low-pass factor ``smoothing``) perturbs a loose
    feedback command steering toward a random waypoint.  Waypoint, noise
    amplitude (up to ``max_noise``) and the common throttle level of the
    four-motor vehicles are redrawn together with probability
    ``waypoint_prob``.  The feedback keeps the rocket's summed thrust near
    hover and keeps the frictionless glider off the borders; the rocket's
    ignored channels just follow the walk so their irrelevance is visible
    over the full range.
    """

    resample_prob: float = 0.1
    smoothing: float = 0.2
    max_noise: float = 0.5
    waypoint_prob: float = 0.02
    kp: float = 4.0
    kd: float = 3.0
    stepper_kp: float = 2.0
    level_range: tuple[float, float] = (0.2, 0.8)

    def target(self, kind: VehicleKind, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(0.0, 1.0, 4)

    def steer(self, kind: VehicleKind, state: VehicleState, waypoint: np.ndarray,
              cfg: WorldConfig, level: float = 0.5) -> np.ndarray:
        """Throttle that (before clipping) moves ``state`` toward ``waypoint``."""
        if kind == VehicleKind.STEPPER:
            force = self.stepper_kp * (waypoint - state.position) / cfg.stepper_gain
        else:
            accel = self.kp * (waypoint - state.position) - self.kd * state.velocity
            force = cfg.mass * accel / cfg.thrust_gain
        if kind == VehicleKind.ROCKET:
            up = force[1] + cfg.mass * cfg.gravity / cfg.thrust_gain
            m1 = 0.5 * (-force[0] / _S45 + up / _C45)
            m2 = 0.5 * (force[0] / _S45 + up / _C45)
            return np.array([m1, m2, 0.5, 0.5])
        # sum_i d_i d_i^T = 2 I, so level + d_i.F / 2 yields net force F.
        return level + 0.5 * (MOTOR_DIRECTIONS @ force)

    def __call__(self, kind: VehicleKind, rng: np.random.Generator,
                 prev_walk: np.ndarray, walk_target: np.ndarray):
        """Advance the random walk; returns ``(walk, walk_target)``."""
        if rng.uniform() < self.resample_prob:
            walk_target = self.target(kind, rng)
        walk = prev_walk + self.smoothing * (walk_target - prev_walk)
        return np.clip(walk, 0.0, 1.0), walk_target

    def command(self, kind: VehicleKind, walk: np.ndarray, state: VehicleState | None,
                waypoint: np.ndarray | None, cfg: WorldConfig, noise: float = 0.35,
                level: float = 0.5) -> np.ndarray:
        if state is None or waypoint is None:
            return walk.copy()
        motor = self.steer(kind, state, waypoint, cfg, level) + 2.0 * noise * (walk - 0.5)
        if kind == VehicleKind.ROCKET:
            motor[2:] = walk[2:]
        return np.clip(motor, 0.0, 1.0)


class MotorBabbling:
    """Stateful babbling stream; one instance drives one data stream."""

    def __init__(self, rng: np.random.Generator, cfg: WorldConfig,
                 babbler: Babbler = Babbler()):
        self.rng = rng
        self.cfg = cfg
        self.babbler = babbler
        self.walk = rng.uniform(0.0, 1.0, 4)
        self.walk_target = self.walk.copy()
        self._new_segment()

    def _new_segment(self) -> None:
        self.waypoint = self.rng.uniform(ARENA_LO, ARENA_HI)
        self.noise = self.rng.uniform(0.0, self.babbler.max_noise)
        self.level = self.rng.uniform(*self.babbler.level_range)

    def __call__(self, kind: VehicleKind, state: VehicleState | None = None) -> np.ndarray:
        if self.rng.uniform() < self.babbler.waypoint_prob:
            self._new_segment()
        self.walk, self.walk_target = self.babbler(kind, self.rng, self.walk, self.walk_target)
        return self.babbler.command(kind, self.walk, state, self.waypoint, self.cfg,
                                    self.noise, self.level)


def babble_motors(kind: VehicleKind, rng: np.random.Generator, prev_motor,
                  babbler: Babbler = Babbler()) -> np.ndarray:
    """One state-free babbling step from ``prev_motor`` (fresh target each call)."""
    prev_motor = np.asarray(prev_motor, dtype=np.float64)
    walk, _ = babbler(kind, rng, prev_motor, babbler.target(kind, rng))
    return walk


def babble_episode(kind: VehicleKind, rng: np.random.Generator, n_steps: int,
                   cfg: WorldConfig, start: VehicleState | None = None,
                   babbler: Babbler = Babbler()):
    """Simulate ``n_steps`` babbled steps.

    Returns ``positions`` (n_steps + 1, 2), ``velocities`` (n_steps + 1, 2)
    and ``motors`` (n_steps, 4); ``motors[t]`` moves ``positions[t]`` to
    ``positions[t + 1]``.
    """
    state = spawn(kind, rng) if start is None else start.copy()
    stream = MotorBabbling(rng, cfg, babbler)
    positions = np.empty((n_steps + 1, 2))
    velocities = np.empty((n_steps + 1, 2))
    motors = np.empty((n_steps, 4))
    positions[0], velocities[0] = state.position, state.velocity
    for t in range(n_steps):
        motors[t] = stream(kind, state)
        state = step_vehicle(kind, state, motors[t], cfg)
        positions[t + 1], velocities[t + 1] = state.position, state.velocity
    return positions, velocities, motors


EPISODE_COLUMNS = ["t", "kind", "pos_x", "pos_y", "vel_x", "vel_y",
                   "motor0", "motor1", "motor2", "motor3"]


def write_episode_csv(path: str | Path, kinds, positions, velocities, motors) -> None:
    """Rows pair state ``t`` with the command applied at ``t`` (blank on the last row)."""
    kinds = np.broadcast_to(np.asarray(kinds, dtype=int), (len(positions),))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_COLUMNS)
        for t in range(len(positions)):
            m = [repr(float(v)) for v in motors[t]] if t < len(motors) else [""] * 4
            w.writerow([t, VehicleKind(int(kinds[t])).name.lower(),
                        *(repr(float(v)) for v in positions[t]),
                        *(repr(float(v)) for v in velocities[t]), *m])
