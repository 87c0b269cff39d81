"""Bias-free RNN and peephole-LSTM forward models with exact BPTT.

The network maps ``sensor || motor || context`` plus the previous hidden
state to a predicted change in position and the next hidden state.  There
are no bias terms anywhere; the readout is linear.  With 9 inputs and 2
outputs this reproduces the published weight counts exactly::

    RNN   i*h + h*h + h*o
    LSTM  4*i*h + 4*h*h + 3*h + h*o

All arithmetic is float64.  The heavy loops live in :mod:`reprise._kernels`.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels

SENSOR_DIM = 2
MOTOR_DIM = 4
CONTEXT_DIM = 3

# Input vector slices, fixed order sensor || motor || context.
SENSOR = slice(0, SENSOR_DIM)
MOTOR = slice(SENSOR_DIM, SENSOR_DIM + MOTOR_DIM)
CONTEXT = slice(SENSOR_DIM + MOTOR_DIM, SENSOR_DIM + MOTOR_DIM + CONTEXT_DIM)

CHECKPOINT_FORMAT = "reprise-checkpoint/1"


class ContractError(ValueError):
    """Raised when arrays handed to the network have the wrong shape."""


class CellKind(str, enum.Enum):
    RNN = "RNN"
    LSTM = "LSTM"


@dataclass(frozen=True)
class Architecture:
    kind: CellKind
    hidden_dim: int
    input_dim: int = SENSOR_DIM + MOTOR_DIM + CONTEXT_DIM
    output_dim: int = SENSOR_DIM

    def __post_init__(self):
        object.__setattr__(self, "kind", CellKind(self.kind))
        if self.hidden_dim < 1:
            raise ContractError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.input_dim < self.output_dim:
            raise ContractError("input_dim must include the sensor slots")

    @property
    def is_lstm(self) -> bool:
        return self.kind is CellKind.LSTM

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in canonical (serialisation) order."""
        i, h, o = self.input_dim, self.hidden_dim, self.output_dim
        if self.is_lstm:
            return {"input": (4, i, h), "recurrent": (4, h, h),
                    "peephole": (3, h), "readout": (h, o)}
        return {"input": (i, h), "recurrent": (h, h), "readout": (h, o)}

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "hidden_dim": self.hidden_dim,
                "input_dim": self.input_dim, "output_dim": self.output_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(CellKind(d["kind"]), int(d["hidden_dim"]),
                   int(d.get("input_dim", 9)), int(d.get("output_dim", 2)))


def count_weights(arch: Architecture) -> int:
    i, h, o = arch.input_dim, arch.hidden_dim, arch.output_dim
    if arch.is_lstm:
        return 4 * i * h + 4 * h * h + 3 * h + h * o
    return i * h + h * h + h * o


@dataclass
class NetworkParams:
    """Trainable weights.

    LSTM gate order for ``input``/``recurrent`` is block input, input gate,
    forget gate, output gate; ``peephole`` rows are cell -> input, forget,
    output gate.  RNNs carry an empty ``peephole`` array.
    """

    arch: Architecture
    input: np.ndarray
    recurrent: np.ndarray
    readout: np.ndarray
    peephole: np.ndarray = field(default_factory=lambda: np.zeros((0,)))

    def __post_init__(self):
        shapes = self.arch.shapes()
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        if not self.arch.is_lstm:
            self.peephole = np.zeros((0,))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.arch.shapes()]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, arch: Architecture, flat: np.ndarray) -> "NetworkParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != count_weights(arch):
            raise ContractError(f"expected {count_weights(arch)} weights, got {flat.size}")
        parts, pos = {}, 0
        for name, shape in arch.shapes().items():
            n = int(np.prod(shape))
            parts[name] = flat[pos:pos + n].reshape(shape).copy()
            pos += n
        return cls(arch, **parts)

    @classmethod
    def zeros(cls, arch: Architecture) -> "NetworkParams":
        return cls.from_flat(arch, np.zeros(count_weights(arch)))

    def copy(self) -> "NetworkParams":
        return NetworkParams.from_flat(self.arch, self.flat())


def kernel_weights(params: NetworkParams):
    """``(w_in, w_rec, peep, w_out)`` in the gate-stacked kernel layout.

    The arrays are views on ``params``, so in-place kernel updates land in
    the parameters themselves.
    """
    arch = params.arch
    if arch.is_lstm:
        return params.input, params.recurrent, params.peephole, params.readout
    i, h = arch.input_dim, arch.hidden_dim
    return (params.input.reshape(1, i, h), params.recurrent.reshape(1, h, h),
            np.zeros((0, h)), params.readout)


def init_weights(arch: Architecture, seed: int, std: float = 0.1) -> NetworkParams:
    rng = np.random.default_rng(seed)
    return NetworkParams.from_flat(arch, rng.normal(0.0, std, count_weights(arch)))


@dataclass
class NetworkState:
    """Hidden activations (and LSTM cell states) between two steps."""

    hidden: np.ndarray
    cell: np.ndarray | None = None

    @classmethod
    def zeros(cls, arch: Architecture) -> "NetworkState":
        h = np.zeros(arch.hidden_dim)
        return cls(h, np.zeros(arch.hidden_dim) if arch.is_lstm else None)

    def copy(self) -> "NetworkState":
        return NetworkState(self.hidden.copy(), None if self.cell is None else self.cell.copy())

    def _check(self, arch: Architecture) -> None:
        if self.hidden.shape != (arch.hidden_dim,):
            raise ContractError(f"hidden state has shape {self.hidden.shape}, "
                                f"expected ({arch.hidden_dim},)")
        if arch.is_lstm and (self.cell is None or self.cell.shape != (arch.hidden_dim,)):
            raise ContractError("LSTM state needs a cell vector of hidden_dim entries")


def clamp_state(arch: Architecture, state: NetworkState) -> NetworkState:
    """Keep hidden outputs inside the tanh range; LSTM cells are unbounded."""
    return NetworkState(np.clip(state.hidden, -1.0, 1.0),
                        None if state.cell is None else state.cell.copy())


@dataclass
class StepInput:
    sensor: np.ndarray
    motor: np.ndarray
    context: np.ndarray

    def __post_init__(self):
        self.sensor = np.asarray(self.sensor, dtype=np.float64)
        self.motor = np.clip(np.asarray(self.motor, dtype=np.float64), 0.0, 1.0)
        self.context = np.clip(np.asarray(self.context, dtype=np.float64), 0.0, 1.0)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.sensor, self.motor, self.context])


def _as_input_matrix(arch: Architecture, inputs) -> np.ndarray:
    if isinstance(inputs, StepInput):
        inputs = [inputs]
    if isinstance(inputs, np.ndarray):
        x = np.array(inputs, dtype=np.float64, ndmin=2)
    else:
        x = np.array([i.vector() if isinstance(i, StepInput) else i for i in inputs],
                     dtype=np.float64, ndmin=2)
    if x.shape[0] == 0:
        raise ContractError("need at least one input step")
    if x.shape[1] != arch.input_dim:
        raise ContractError(f"input vectors have {x.shape[1]} entries, "
                            f"architecture expects {arch.input_dim}")
    return np.ascontiguousarray(x)


@dataclass
class UnrolledTrace:
    """Everything recorded by :func:`unroll`; indexed by step along axis 0.

    ``gates`` holds the LSTM activations (block input, input, forget, output
    gate) and is empty for RNNs.  ``outputs`` are the raw readouts (predicted
    position deltas).  In closed-loop traces ``inputs[k, :2]`` for ``k > 0``
    are the network's own predicted positions.
    """

    params: NetworkParams
    initial_state: NetworkState
    inputs: np.ndarray
    hidden: np.ndarray
    cells: np.ndarray
    gates: np.ndarray
    outputs: np.ndarray
    closed_loop: bool = False

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def state_at(self, k: int) -> NetworkState:
        """State after step ``k``."""
        return NetworkState(self.hidden[k].copy(),
                            self.cells[k].copy() if self.params.arch.is_lstm else None)

    @property
    def final_state(self) -> NetworkState:
        return self.state_at(len(self) - 1)

    @property
    def positions(self) -> np.ndarray:
        """Predicted next positions ``sensor_k + delta_k``."""
        return self.inputs[:, SENSOR] + self.outputs


def unroll(params: NetworkParams, initial_state: NetworkState, inputs,
           closed_loop: bool = False) -> UnrolledTrace:
    arch = params.arch
    initial_state._check(arch)
    x = _as_input_matrix(arch, inputs).copy()
    h0 = np.ascontiguousarray(initial_state.hidden, dtype=np.float64)
    if arch.is_lstm:
        c0 = np.ascontiguousarray(initial_state.cell, dtype=np.float64)
        gates, cells, hidden, y = _kernels.lstm_forward(
            params.input, params.recurrent, params.peephole, params.readout,
            h0, c0, x, closed_loop)
    else:
        hidden, y = _kernels.rnn_forward(params.input, params.recurrent,
                                         params.readout, h0, x, closed_loop)
        gates = np.zeros((x.shape[0], 0, arch.hidden_dim))
        cells = np.zeros((x.shape[0], 0))
    return UnrolledTrace(params, initial_state.copy(), x, hidden, cells, gates, y,
                         closed_loop)


def forward_step(params: NetworkParams, state: NetworkState,
                 inp) -> tuple[np.ndarray, NetworkState]:
    trace = unroll(params, state, [inp.vector() if isinstance(inp, StepInput) else inp])
    return trace.outputs[0].copy(), trace.final_state


def sequence_loss(predictions, targets) -> float:
    """Sum over steps and components of half the squared residual."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"predictions {p.shape} and targets {t.shape} differ")
    return 0.5 * float(np.sum((p - t) ** 2))


def trace_loss(trace: UnrolledTrace, targets) -> float:
    """Loss of a trace: deltas vs. target deltas, or positions vs. goals if closed loop."""
    return sequence_loss(trace.positions if trace.closed_loop else trace.outputs, targets)


@dataclass
class Gradients:
    weights: NetworkParams
    inputs: np.ndarray
    initial_state: NetworkState

    @property
    def context(self) -> np.ndarray:
        return self.inputs[:, CONTEXT]

    @property
    def motor(self) -> np.ndarray:
        return self.inputs[:, MOTOR]


def bptt(trace: UnrolledTrace, targets) -> Gradients:
    """Exact gradients of :func:`trace_loss` for the unrolled graph.

    Open-loop traces compare predicted deltas with target deltas; closed-loop
    traces compare predicted positions with target positions and also
    differentiate through the fed-back sensor inputs.
    """
    params, arch = trace.params, trace.params.arch
    targets = np.asarray(targets, dtype=np.float64)
    pred = trace.positions if trace.closed_loop else trace.outputs
    if targets.shape != pred.shape:
        raise ContractError(f"targets {targets.shape} not aligned with trace {pred.shape}")
    d_out = np.ascontiguousarray(pred - targets)
    h0 = np.ascontiguousarray(trace.initial_state.hidden, dtype=np.float64)
    if arch.is_lstm:
        c0 = np.ascontiguousarray(trace.initial_state.cell, dtype=np.float64)
        g_in, g_rec, g_peep, g_out, g_x, g_h0, g_c0 = _kernels.lstm_backward(
            params.input, params.recurrent, params.peephole, params.readout,
            h0, c0, trace.inputs, trace.gates, trace.cells, trace.hidden,
            d_out, trace.closed_loop)
        weights = NetworkParams(arch, g_in, g_rec, g_out, g_peep)
        state = NetworkState(g_h0, g_c0)
    else:
        g_in, g_rec, g_out, g_x, g_h0 = _kernels.rnn_backward(
            params.input, params.recurrent, params.readout, h0, trace.inputs,
            trace.hidden, d_out, trace.closed_loop)
        weights = NetworkParams(arch, g_in, g_rec, g_out)
        state = NetworkState(g_h0, None)
    return Gradients(weights, g_x, state)


# -- checkpoints -------------------------------------------------------------

def params_to_dict(params: NetworkParams, seed: int | None = None, **extra) -> dict:
    """JSON-ready checkpoint; weights stored as IEEE-754 hex strings."""
    return {
        "format": CHECKPOINT_FORMAT,
        "architecture": params.arch.to_dict(),
        "seed": seed,
        "order": list(params.arch.shapes()),
        "weights": {name: [float(v).hex() for v in arr.ravel()]
                    for name, arr in zip(params.arch.shapes(), params.arrays())},
        **extra,
    }


def params_from_dict(d: dict) -> NetworkParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"unknown checkpoint format {d.get('format')!r}")
    arch = Architecture.from_dict(d["architecture"])
    parts = {}
    for name, shape in arch.shapes().items():
        values = d["weights"].get(name)
        if values is None or len(values) != int(np.prod(shape)):
            raise ContractError(f"checkpoint weights {name!r} do not match {arch}")
        parts[name] = np.array([float.fromhex(v) for v in values]).reshape(shape)
    return NetworkParams(arch, **parts)


def save_checkpoint(path: str | Path, params: NetworkParams, seed: int | None = None,
                    **extra) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params, seed, **extra), indent=1))


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, dict]:
    d = json.loads(Path(path).read_text())
    return params_from_dict(d), d
