"""Goal-reaching evaluations and analyses of the inferred context codes.

One evaluation run drives a single continuous control loop through
``n_goals`` successive goals of ``G`` steps each.  The active vehicle
changes every ``V`` steps (by default together with the goal) to one of the
other two kinds; it keeps its position and starts at rest.  Goals, vehicle
succession and the start position depend only on the eval seed, so every
grid cell and every network sees the same episode.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import control
from .control import Goal, RepriseConfig
from .netcore import NetworkParams
from .simworld import ARENA_HI, ARENA_LO, VehicleKind, VehicleState, WorldConfig
from .trainer import N_KINDS

KIND_NAMES = [k.name.lower() for k in VehicleKind]


@dataclass(frozen=True)
class GridCell:
    eta_c: float
    eta_sigma: float
    context_set: bool = False

    def label(self) -> str:
        return f"{'cset' if self.context_set else 'infer'}_c{self.eta_c:g}_s{self.eta_sigma:g}"

    def reprise_config(self, base: RepriseConfig) -> RepriseConfig:
        d = base.to_dict()
        d.update(eta_c=0.0 if self.context_set else self.eta_c, eta_sigma=self.eta_sigma)
        return RepriseConfig.from_dict(d)


@dataclass
class EvalConfig:
    n_goals: int = 50
    steps_per_goal: int = 150
    vehicle_switch: int | None = None   # None: switch together with the goal
    goal_lo: tuple[float, float] = (-0.75, 0.25)
    goal_hi: tuple[float, float] = (0.75, 1.75)
    seed: int = 0
    grid: list[GridCell] = field(default_factory=lambda: [GridCell(0.01, 0.001)])

    def __post_init__(self):
        self.grid = [c if isinstance(c, GridCell) else GridCell(**c) for c in self.grid]
        self.goal_lo, self.goal_hi = tuple(self.goal_lo), tuple(self.goal_hi)
        if self.n_goals < 1 or self.steps_per_goal < 1:
            raise ValueError("n_goals and steps_per_goal must be >= 1")
        if self.vehicle_switch is not None and self.vehicle_switch < 1:
            raise ValueError("vehicle_switch must be >= 1")
        if np.any(np.array(self.goal_lo) < ARENA_LO) or np.any(np.array(self.goal_hi) > ARENA_HI):
            raise ValueError("goal box must lie inside the arena")
        for c in self.grid:
            if c.eta_c < 0 or c.eta_sigma < 0:
                raise ValueError(f"grid rates must be >= 0: {c}")

    @property
    def switch_period(self) -> int:
        return self.steps_per_goal if self.vehicle_switch is None else self.vehicle_switch

    @property
    def total_steps(self) -> int:
        return self.n_goals * self.steps_per_goal

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = [asdict(c) for c in self.grid]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown eval config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class EvalEpisode:
    goals: np.ndarray        # (n_goals, 2)
    kinds: np.ndarray        # (total_steps,) active vehicle per step
    start: np.ndarray        # initial position


def eval_episode(cfg: EvalConfig) -> EvalEpisode:
    rng = np.random.default_rng([cfg.seed, 3])
    goals = rng.uniform(cfg.goal_lo, cfg.goal_hi, size=(cfg.n_goals, 2))
    start = rng.uniform(ARENA_LO, ARENA_HI)
    kinds = np.empty(cfg.total_steps, dtype=np.int64)
    kind = int(rng.integers(N_KINDS))
    for t in range(cfg.total_steps):
        if t and t % cfg.switch_period == 0:
            kind = (kind + 1 + int(rng.integers(N_KINDS - 1))) % N_KINDS
        kinds[t] = kind
    return EvalEpisode(goals, kinds, start)


@dataclass
class GoalRecord:
    network: int
    cell: GridCell
    goal: int
    vehicle: int            # vehicle active at the goal's last step
    final_dist: float
    mean_dist: float
    min_step: int           # step within the goal with the smallest distance
    min_context: np.ndarray

    @property
    def diverged(self) -> bool:
        return not math.isfinite(self.final_dist)


@dataclass
class RunResult:
    network: int
    cell: GridCell
    records: list[GoalRecord]
    rows: list[list]         # per-step rows in the control trace schema


def run_eval(params: NetworkParams, cell: GridCell, cfg: EvalConfig,
             base: RepriseConfig = RepriseConfig(), world: WorldConfig = WorldConfig(),
             network: int = 0, episode: EvalEpisode | None = None) -> RunResult:
    """Drive one control loop through the whole eval episode."""
    episode = eval_episode(cfg) if episode is None else episode
    rcfg = cell.reprise_config(base)
    G = cfg.steps_per_goal
    kind = VehicleKind(int(episode.kinds[0]))
    state = VehicleState(episode.start.copy(), np.zeros(2))
    loop = control.init_loop(params.arch, state.position, rcfg)
    records, rows = [], []
    diverged = False
    for g in range(cfg.n_goals):
        goal = Goal(episode.goals[g])
        loop.reset_action_optimizer()
        dists = np.full(G, np.nan)
        contexts = np.full((G, N_KINDS), np.nan)
        for s in range(G):
            t = g * G + s
            new_kind = VehicleKind(int(episode.kinds[t]))
            if new_kind != kind:
                kind = new_kind
                state = VehicleState(state.position.copy(), np.zeros(2))
            if cell.context_set:
                loop.context = np.eye(N_KINDS)[int(kind)]
            if not diverged:
                try:
                    loop, params, state, m = control.control_step(
                        loop, params, goal, world, kind, state, rcfg)
                    diverged = not np.all(np.isfinite(m.context)) or not math.isfinite(m.pred_error)
                except FloatingPointError:
                    diverged = True
            if diverged:
                m = control.StepMetrics(t + 1, np.full(N_KINDS, np.nan), math.nan, math.nan,
                                        np.full(4, np.nan), np.full(2, np.nan))
            dists[s] = m.goal_distance
            contexts[s] = m.context
            rows.append(control.metrics_row(m, kind))
        min_step = int(np.nanargmin(dists)) if np.any(np.isfinite(dists)) else 0
        records.append(GoalRecord(network, cell, g, int(kind), float(dists[-1]),
                                  float(np.mean(dists)), min_step, contexts[min_step].copy()))
    return RunResult(network, cell, records, rows)


def _run_task(args):
    return run_eval(*args)


@dataclass
class EvalReport:
    config: EvalConfig
    results: list[RunResult]

    @property
    def records(self) -> list[GoalRecord]:
        return [r for res in self.results for r in res.records]

    def cell_records(self, cell: GridCell, vehicle: int | None = None) -> list[GoalRecord]:
        return [r for r in self.records
                if r.cell == cell and (vehicle is None or r.vehicle == vehicle)]

    def mean_final(self, cell: GridCell, vehicle: int | None = None) -> float:
        recs = self.cell_records(cell, vehicle)
        return float(np.mean([r.final_dist for r in recs])) if recs else math.nan

    def mean_accumulated(self, cell: GridCell, vehicle: int | None = None) -> float:
        recs = self.cell_records(cell, vehicle)
        return float(np.mean([r.mean_dist for r in recs])) if recs else math.nan

    def table(self) -> list[dict]:
        """Grid aggregates (means over networks x goals), overall and per vehicle."""
        out = []
        for cell in self.config.grid:
            for vehicle in [None, *range(N_KINDS)]:
                recs = self.cell_records(cell, vehicle)
                out.append({
                    "rate_c": cell.eta_c, "rate_sigma": cell.eta_sigma,
                    "context_set": int(cell.context_set),
                    "vehicle": "all" if vehicle is None else KIND_NAMES[vehicle],
                    "n": len(recs),
                    "mean_final_dist": self.mean_final(cell, vehicle),
                    "mean_acc_dist": self.mean_accumulated(cell, vehicle),
                    "diverged": int(any(r.diverged for r in recs)),
                })
        return out

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        (out / "traces").mkdir(parents=True, exist_ok=True)
        paths = [out / "table.csv", out / "goals.csv"]
        _write_dicts(paths[0], self.table())
        _write_dicts(paths[1], [{
            "network": r.network, "cell": r.cell.label(), "rate_c": r.cell.eta_c,
            "rate_sigma": r.cell.eta_sigma, "context_set": int(r.cell.context_set),
            "goal": r.goal, "vehicle": KIND_NAMES[r.vehicle],
            "final_dist": r.final_dist, "mean_dist": r.mean_dist, "min_step": r.min_step,
            **{f"min_c{k}": float(r.min_context[k]) for k in range(N_KINDS)},
        } for r in self.records])
        for res in self.results:
            p = out / "traces" / f"net{res.network}_{res.cell.label()}.csv"
            control.write_trace_csv(p, res.rows)
            paths.append(p)
        return paths


def eval_goal_reaching(params_set: Sequence[NetworkParams], cfg: EvalConfig,
                       base: RepriseConfig = RepriseConfig(),
                       world: WorldConfig = WorldConfig(), jobs: int = 1) -> EvalReport:
    """Evaluate every network on every grid cell of ``cfg``."""
    if not params_set:
        raise ValueError("no trained networks given")
    for i, p in enumerate(params_set):
        if p is None:
            raise ValueError(f"network {i} has no parameters (missing checkpoint?)")
    episode = eval_episode(cfg)
    tasks = [(p, cell, cfg, base, world, n, episode)
             for n, p in enumerate(params_set) for cell in cfg.grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    return EvalReport(cfg, results)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _write_dicts(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.writer(fh)
        w.writerow(list(rows[0]))
        for row in rows:
            w.writerow([_fmt(v) for v in row.values()])


# -- analyses ------------------------------------------------------------------

@dataclass
class ClusterReport:
    centroids: dict[int, np.ndarray]
    counts: dict[int, int]
    distances: dict[tuple[int, int], float]
    missing: list[int]

    def largest_pair(self) -> tuple[int, int] | None:
        if not self.distances:
            return None
        return max(self.distances, key=lambda k: self.distances[k])

    def rows(self) -> list[dict]:
        out = []
        for v in range(N_KINDS):
            c = self.centroids.get(v)
            row = {"vehicle": KIND_NAMES[v], "n": self.counts.get(v, 0),
                   "missing": int(c is None)}
            for k in range(N_KINDS):
                row[f"centroid_c{k}"] = math.nan if c is None else float(c[k])
            for u in range(N_KINDS):
                key = (min(u, v), max(u, v))
                row[f"dist_{KIND_NAMES[u]}"] = (0.0 if u == v and c is not None
                                                else self.distances.get(key, math.nan))
            out.append(row)
        return out


def cluster_contexts(vehicles: Iterable[int], contexts: Iterable) -> ClusterReport:
    """Per-vehicle centroids of context vectors and their pairwise distances."""
    vehicles = np.asarray(list(vehicles), dtype=int)
    contexts = np.asarray(list(contexts), dtype=np.float64).reshape(len(vehicles), N_KINDS)
    ok = np.all(np.isfinite(contexts), axis=1)
    centroids, counts = {}, {}
    for v in range(N_KINDS):
        sel = ok & (vehicles == v)
        counts[v] = int(sel.sum())
        if counts[v]:
            centroids[v] = contexts[sel].mean(axis=0)
    distances = {(u, v): float(np.linalg.norm(centroids[u] - centroids[v]))
                 for u, v in itertools.combinations(range(N_KINDS), 2)
                 if u in centroids and v in centroids}
    return ClusterReport(centroids, counts, distances,
                         [v for v in range(N_KINDS) if v not in centroids])


def boundary_signals(pred_error: Sequence[float], w: int = 10, k: float = 3.0) -> list[int]:
    """Steps whose error exceeds mean + k * std of the trailing ``w`` steps."""
    e = np.asarray(pred_error, dtype=np.float64)
    if len(e) <= w:
        return []
    flags = []
    for t in range(w, len(e)):
        window = e[t - w:t]
        if e[t] > window.mean() + k * window.std():
            flags.append(t)
    return flags


def switch_steps(kinds: Sequence[int]) -> list[int]:
    """Indices ``t`` where the vehicle at ``t`` differs from the one at ``t - 1``."""
    kinds = np.asarray(kinds)
    return [int(t) for t in np.flatnonzero(kinds[1:] != kinds[:-1]) + 1]


def boundary_hit_rate(kinds: Sequence[int], flags: Sequence[int], within: int = 5) -> float:
    """Fraction of vehicle switches with a flag in ``[switch, switch + within]``."""
    switches = switch_steps(kinds)
    if not switches:
        return math.nan
    flags = np.asarray(flags)
    hits = sum(bool(np.any((flags >= s) & (flags <= s + within))) for s in switches)
    return hits / len(switches)


def context_accuracy(kinds: Sequence[int], contexts, exclude: int = 20,
                     mapping: Sequence[int] | None = None) -> dict:
    """Fraction of steps whose argmax context names the true vehicle.

    Ties go to the lowest index.  The first ``exclude`` steps after every
    vehicle switch are skipped.  ``mapping[j]`` is the vehicle that context
    unit ``j`` stands for (identity by default).  Returns the accuracy per
    vehicle index (NaN if that vehicle never appears) and over all steps
    under the key ``"all"``.
    """
    kinds = np.asarray(kinds, dtype=int)
    contexts = np.asarray(contexts, dtype=np.float64)
    mapping = np.arange(N_KINDS) if mapping is None else np.asarray(mapping, dtype=int)
    keep = np.ones(len(kinds), dtype=bool)
    for s in switch_steps(kinds):
        keep[s:s + exclude] = False
    keep &= np.all(np.isfinite(contexts), axis=1)
    guess = mapping[np.argmax(contexts, axis=1)]
    out = {}
    for v in range(N_KINDS):
        sel = keep & (kinds == v)
        out[v] = float(np.mean(guess[sel] == v)) if sel.any() else math.nan
    out["all"] = float(np.mean(guess[keep] == kinds[keep])) if keep.any() else math.nan
    return out


def best_mapping(kinds: Sequence[int], contexts, exclude: int = 20) -> tuple[int, ...]:
    """Assignment of context units to vehicles maximising the worst per-vehicle accuracy.

    Emergent codes have no predefined unit order; ties in the worst accuracy
    are broken by the overall accuracy, then lexicographically.
    """
    best, best_key = None, None
    for perm in itertools.permutations(range(N_KINDS)):
        acc = context_accuracy(kinds, contexts, exclude, perm)
        per = [acc[v] for v in range(N_KINDS) if not math.isnan(acc[v])]
        key = (min(per) if per else -1.0, acc["all"])
        if best_key is None or key > best_key:
            best, best_key = perm, key
    return best


def read_trace_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Columns of a control trace CSV; ``vehicle_true`` becomes kind indices."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        return {}
    out = {}
    for name in rows[0]:
        if name == "vehicle_true":
            out[name] = np.array([KIND_NAMES.index(r[name]) for r in rows])
        else:
            out[name] = np.array([float(r[name]) for r in rows])
    return out
