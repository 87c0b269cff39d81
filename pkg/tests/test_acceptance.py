"""Acceptance criteria 1-11.

Every criterion prints one ``CRITERION n PASS|FAIL`` line (also collected
into the terminal summary).  Trained models are shared through module
fixtures; set ``REPRISE_ACCEPTANCE_CACHE`` to a directory to keep
checkpoints between sessions (they are retrained when absent).

Runtime on one CPU core: about an hour, most of it the ten emergent runs.
"""

import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from reprise import experiments as ex
from reprise import netcore, trainer
from reprise.cli import main
from reprise.control import RepriseConfig
from reprise.netcore import Architecture, NetworkState, count_weights
from reprise.simworld import VehicleKind, VehicleState, WorldConfig, step_vehicle

from conftest import ACCEPTANCE, random_inputs, random_params, random_state
from fdcheck import analytic, fd_inputs, fd_state, fd_weights, rel_err

pytestmark = pytest.mark.acceptance

LABELED_SEEDS = range(5)
EMERGENT_SEEDS = range(10)
# Emergent eval: 100 goals, G = V = 150; inference settings of the control loop.
EMERGENT_BASE = RepriseConfig()
EMERGENT_GOALS = 100


def record(n: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {n:2d} {'PASS' if passed else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert passed, line


# -- model cache ------------------------------------------------------------------

def _cache_dir(tmp_path_factory) -> Path:
    env = os.environ.get("REPRISE_ACCEPTANCE_CACHE")
    if env:
        p = Path(env)
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp("models")


def _train_cached(cache: Path, name: str, arch: Architecture, cfg: trainer.TrainConfig):
    """Train once per config; returns (params, per-epoch losses, extra arrays)."""
    ckpt, extra = cache / f"{name}.json", cache / f"{name}.npz"
    if ckpt.is_file() and extra.is_file():
        params, meta = netcore.load_checkpoint(ckpt)
        if meta.get("train_config") == cfg.to_dict() and params.arch == arch:
            d = np.load(extra)
            return params, d["loss"], dict(d)
    params, rep = trainer.train_model(arch, cfg)
    netcore.save_checkpoint(ckpt, params, cfg.seed, train_config=cfg.to_dict())
    arrays = {"loss": np.array(rep.epoch_loss)}
    if rep.last_kinds is not None:
        arrays.update(kinds=rep.last_kinds, contexts=rep.last_contexts)
    np.savez(extra, **arrays)
    return params, arrays["loss"], arrays


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return _cache_dir(tmp_path_factory)


@pytest.fixture(scope="module")
def labeled_models(cache):
    out = {}
    for kind, h in (("LSTM", 16), ("RNN", 36)):
        for s in LABELED_SEEDS:
            cfg = trainer.TrainConfig.desk(seed=s)
            out[kind, s] = _train_cached(cache, f"labeled_{kind}{h}_s{s}", Architecture(kind, h), cfg)
    return out


@pytest.fixture(scope="module")
def emergent_models(cache):
    return [_train_cached(cache, f"emergent_LSTM16_s{s}", Architecture("LSTM", 16),
                          trainer.TrainConfig.desk(mode="emergent", seed=s))
            for s in EMERGENT_SEEDS]


# -- 1-3: structural anchors -------------------------------------------------------

def test_criterion_01_weight_counts():
    want = {("RNN", 27): 1026, ("RNN", 36): 1692, ("RNN", 54): 3510,
            ("LSTM", 8): 584, ("LSTM", 16): 1680, ("LSTM", 24): 3288}
    got = {k: count_weights(Architecture(*k)) for k in want}
    record(1, got == want, " ".join(f"{k}{h}={got[k, h]}" for k, h in want))


def test_criterion_02_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    worst, n = 0.0, 0
    for f in range(24):
        kind = ("RNN", "LSTM")[f % 2]
        closed = f % 4 >= 2
        h, horizon = int(rng.integers(1, 9)), int(rng.integers(1, 11))
        p = random_params(kind, h, seed=100 + f)
        s = random_state(p.arch, rng)
        x = random_inputs(p.arch, rng, horizon)
        if closed:
            targets = x[0, :2] + rng.normal(0, 0.1, (horizon, 2))
        else:
            targets = rng.normal(0, 0.05, (horizon, 2))
        gw, gx, gs = analytic(p, s, x, targets, closed)
        fx = fd_inputs(p, s, x, targets, closed)
        if closed:  # fed-back sensor slots are not free inputs
            free = np.ones_like(x, dtype=bool)
            free[1:, :2] = False
            gx, fx = gx[free], fx[free]
        err = max(rel_err(gw, fd_weights(p, s, x, targets, closed)), rel_err(gx, fx),
                  rel_err(gs, fd_state(p, s, x, targets, closed)))
        worst, n = max(worst, err), n + 1
    record(2, worst < 1e-5, f"{n} fixtures (h<=8, horizon<=10), worst relative error {worst:.2e}")


def test_criterion_03_physics_oracles():
    w = WorldConfig()
    hov = w.hover_throttle()
    s = step_vehicle(VehicleKind.ROCKET, VehicleState(np.array([0.0, 1.0])),
                     np.array([hov, hov, 0.0, 0.0]), w)
    a_y = s.velocity[1] / w.dt
    p0 = np.array([0.3, 0.8])
    disp = max(np.max(np.abs(step_vehicle(VehicleKind.STEPPER, VehicleState(p0), np.full(4, m),
                                          w).position - p0)) for m in np.linspace(0, 1, 11))
    g = VehicleState(np.array([-0.5, 1.0]), np.array([0.13, -0.07]))
    v0 = g.velocity.copy()
    for _ in range(10):
        g = step_vehicle(VehicleKind.GLIDER, g, np.zeros(4), w)
    dv = float(np.max(np.abs(g.velocity - v0)))
    ok = abs(hov - 0.69367) < 5e-6 and abs(a_y) < 1e-9 and disp == 0.0 and dv == 0.0
    record(3, ok, f"hover {hov:.5f} |a_y|={abs(a_y):.1e}; stepper displacement {disp:.1e}; "
                  f"glider dv {dv:.1e}")


# -- 4: learning trend ----------------------------------------------------------------

def test_criterion_04_lstm_beats_rnn(labeled_models):
    wins, parts = 0, []
    for s in LABELED_SEEDS:
        lstm, rnn = labeled_models["LSTM", s][1][-1], labeled_models["RNN", s][1][-1]
        wins += lstm < rnn
        parts.append(f"s{s} {lstm:.2e}<{rnn:.2e}" if lstm < rnn else f"s{s} {lstm:.2e}>={rnn:.2e}")
    record(4, wins >= 4, f"LSTM-16 below RNN-36 in {wins}/5 seeds ({'; '.join(parts)})")


# -- 5-7: goal reaching with the labeled model ---------------------------------------

CSET = ex.GridCell(0.0, 0.001, context_set=True)
BEST = ex.GridCell(0.01, 0.001)
SLOW = ex.GridCell(1e-4, 0.0)
FAST_SIGMA = ex.GridCell(0.01, 0.1)


@pytest.fixture(scope="module")
def labeled_eval(labeled_models):
    params = [labeled_models["LSTM", s][0] for s in LABELED_SEEDS]
    cfg = ex.EvalConfig(n_goals=50, steps_per_goal=150, grid=[CSET, BEST, SLOW, FAST_SIGMA])
    return ex.eval_goal_reaching(params, cfg)


def test_criterion_05_goal_reaching_context_set(labeled_eval):
    d = labeled_eval.mean_final(CSET)
    per = ", ".join(f"{n} {labeled_eval.mean_final(CSET, v):.4f}"
                    for v, n in enumerate(ex.KIND_NAMES))
    record(5, d <= 0.02, f"c set, eta_sigma=.001: mean final distance {d:.4f} <= 0.02 ({per})")


def test_criterion_06_inference_competitive(labeled_eval):
    d_set, d_inf = labeled_eval.mean_final(CSET), labeled_eval.mean_final(BEST)
    record(6, d_inf <= 2 * d_set,
           f"eta_c=.01, eta_sigma=.001: {d_inf:.4f} <= 2 x c set {d_set:.4f}")


def test_criterion_07_rate_grid_u_shape(labeled_eval):
    cells = [BEST, SLOW, FAST_SIGMA]
    best = min(labeled_eval.mean_final(c) for c in cells)
    slow, fast = labeled_eval.mean_final(SLOW), labeled_eval.mean_final(FAST_SIGMA)
    ok = slow >= 2 * best and fast >= 2 * best
    record(7, ok, f"best {best:.4f}; eta_c=1e-4/eta_sigma=0 {slow:.4f} ({slow / best:.1f}x); "
                  f"eta_sigma=.1 {fast:.4f} ({fast / best:.1f}x); need >= 2x")


# -- 8-10: emergent codes --------------------------------------------------------------

INFER = ex.GridCell(0.1, 0.001)
NO_INFER = ex.GridCell(0.0, 0.001)


@pytest.fixture(scope="module")
def emergent_eval(emergent_models):
    cfg = ex.EvalConfig(n_goals=EMERGENT_GOALS, steps_per_goal=150, grid=[INFER, NO_INFER])
    return ex.eval_goal_reaching([m[0] for m in emergent_models], cfg, EMERGENT_BASE)


def _trace_arrays(res):
    kinds = np.array([ex.KIND_NAMES.index(r[1]) for r in res.rows])
    return kinds, np.array([r[2:5] for r in res.rows], dtype=float), \
        np.array([r[5] for r in res.rows], dtype=float)


def test_criterion_08_emergent_separation(emergent_eval):
    hits, mins, per_net = 0, [], []
    correct = np.zeros(3)
    total = np.zeros(3)
    for res in emergent_eval.results:
        if res.cell != INFER:
            continue
        recs = res.records
        rep = ex.cluster_contexts([r.vehicle for r in recs], [r.min_context for r in recs])
        rg = (int(VehicleKind.ROCKET), int(VehicleKind.GLIDER))
        hits += rep.largest_pair() == rg
        kinds, ctx, _ = _trace_arrays(res)
        m = ex.best_mapping(kinds, ctx, EMERGENT_BASE.R)
        acc = ex.context_accuracy(kinds, ctx, EMERGENT_BASE.R, m)
        per_net.append(min(acc[v] for v in range(3)))
        for v in range(3):
            n = _counted(kinds, ctx, v, EMERGENT_BASE.R)
            correct[v] += acc[v] * n
            total[v] += n
    pooled = correct / total
    ok = bool(np.all(pooled > 1 / 3)) and hits >= 6
    record(8, ok, f"pooled accuracy {', '.join(f'{n} {a:.3f}' for n, a in zip(ex.KIND_NAMES, pooled))}"
                  f" (need > 1/3 each); rocket-glider largest in {hits}/10 (need >= 6); "
                  f"networks with every vehicle > 1/3: {sum(a > 1 / 3 for a in per_net)}/10")


def _counted(kinds, ctx, v, exclude):
    keep = np.ones(len(kinds), dtype=bool)
    for s in ex.switch_steps(kinds):
        keep[s:s + exclude] = False
    keep &= np.all(np.isfinite(ctx), axis=1)
    return int(np.sum(keep & (kinds == v)))


def test_criterion_09_emergent_inference_helps(emergent_eval):
    d_on, d_off = emergent_eval.mean_final(INFER), emergent_eval.mean_final(NO_INFER)
    ratio = d_off / d_on if d_on > 0 else math.inf
    record(9, ratio >= 3, f"eta_c=.1 {d_on:.4f} vs eta_c=0 {d_off:.4f}: {ratio:.2f}x (need >= 3x)")


def test_criterion_10_event_boundaries(emergent_models):
    cfg = ex.EvalConfig(n_goals=EMERGENT_GOALS, steps_per_goal=150, vehicle_switch=100,
                        grid=[INFER])
    rep = ex.eval_goal_reaching([m[0] for m in emergent_models], cfg, EMERGENT_BASE)
    hits = switches = 0
    for res in rep.results:
        kinds, _, err = _trace_arrays(res)
        flags = ex.boundary_signals(err, 10, 3.0)
        n = len(ex.switch_steps(kinds))
        hits += round(ex.boundary_hit_rate(kinds, flags, 5) * n)
        switches += n
    rate = hits / switches
    record(10, rate >= 0.7, f"V=100, G=150: {hits}/{switches} switches flagged within 5 steps "
                            f"({rate:.1%}, need >= 70%)")


# -- 11: reproducibility ------------------------------------------------------------

def test_criterion_11_reproducibility(tmp_path):
    cfgs = {
        "labeled": {"architecture": {"kind": "LSTM", "hidden_dim": 16}, "seed": 7,
                    "train": {"epochs": 6}},
        "emergent": {"architecture": {"kind": "LSTM", "hidden_dim": 8}, "seed": 7,
                     "train": {"mode": "emergent", "epochs": 3}},
    }
    same = []
    for name, cfg in cfgs.items():
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(cfg))
        for run in ("a", "b"):
            assert main(["train", "--config", str(path), "--out", str(tmp_path / name / run)]) == 0
        same.append(all((tmp_path / name / "a" / f).read_bytes()
                        == (tmp_path / name / "b" / f).read_bytes()
                        for f in ("loss_seed7.csv", "checkpoint_seed7.json")))
    ctrl = tmp_path / "control.json"
    ctrl.write_text(json.dumps({"eval": {"n_goals": 4, "grid": [
        {"eta_c": 0.01, "eta_sigma": 0.001}, {"eta_c": 0.0, "eta_sigma": 0.001, "context_set": True}]}}))
    ckpt = str(tmp_path / "labeled" / "a" / "checkpoint_seed7.json")
    for run in ("a", "b"):
        assert main(["control", "--checkpoint", ckpt, "--config", str(ctrl), "--out",
                     str(tmp_path / "eval" / run)]) == 0
    a_files = sorted(p.relative_to(tmp_path / "eval" / "a")
                     for p in (tmp_path / "eval" / "a").rglob("*.csv"))
    same.append(len(a_files) == 4 and all(
        (tmp_path / "eval" / "a" / f).read_bytes() == (tmp_path / "eval" / "b" / f).read_bytes()
        for f in a_files))
    record(11, all(same), f"byte-identical: labeled loss {same[0]}, emergent loss {same[1]}, "
                          f"{len(a_files)} eval CSVs {same[2]}")
