"""``reprise`` command line: train, control, analyze.

Every command writes a ``manifest.json`` into its output directory holding
the full resolved config, the seed(s), a build id, the output paths and
timestamps.  Passing that manifest back as ``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import netcore, trainer
from .control import RepriseConfig
from .netcore import Architecture, ContractError
from .simworld import WorldConfig

log = logging.getLogger("reprise")

MANIFEST = "manifest.json"


class CliError(Exception):
    """User-facing failure; printed without a traceback, exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    build: str
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST
        path.write_text(json.dumps(self.__dict__, indent=1))
        return path


def build_id() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                           text=True, cwd=Path(__file__).parent, timeout=5)
        if r.returncode == 0 and r.stdout.strip():
            return "git:" + r.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return "artifact " + metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_config(path: str | Path | None) -> dict:
    """Read a JSON config; a manifest yields the config snapshot it holds."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"config {p} is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise CliError(f"config {p} must hold a JSON object")
    if "command" in d and "config" in d:
        d = d["config"]
    return d


def _section(cfg: dict, name: str, builder):
    try:
        return builder(cfg.get(name, {}))
    except (TypeError, ValueError, KeyError) as e:
        raise CliError(f"invalid '{name}' config: {e}") from None


def _check_keys(cfg: dict, allowed: set[str]) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise CliError(f"unknown config field(s): {sorted(unknown)}")


# -- train ---------------------------------------------------------------------

TRAIN_KEYS = {"architecture", "train", "world", "seed", "seeds", "profile"}


def resolve_train_config(cfg: dict, seed: int | None = None,
                         profile: str | None = None) -> dict:
    """Fill in profile defaults; returns the JSON-ready resolved config."""
    _check_keys(cfg, TRAIN_KEYS)
    profile = profile or cfg.get("profile", "desk")
    if profile not in ("desk", "paper"):
        raise CliError(f"unknown profile {profile!r}")
    if seed is not None:
        seeds = [seed]
    elif "seeds" in cfg:
        seeds = [int(s) for s in cfg["seeds"]]
    elif "seed" in cfg:
        seeds = [int(cfg["seed"])]
    else:
        raise CliError("config field 'seed' is required (or pass --seed)")
    if "architecture" not in cfg:
        raise CliError("config field 'architecture' is required")
    arch = _section(cfg, "architecture", Architecture.from_dict)
    train = dict(cfg.get("train", {}))
    train.pop("seed", None)
    factory = trainer.TrainConfig.desk if profile == "desk" else trainer.TrainConfig
    tcfg = _section({"train": train}, "train", lambda d: factory(**_known(d, trainer.TrainConfig)))
    world = _section(cfg, "world", lambda d: WorldConfig(**d))
    resolved_train = tcfg.to_dict()
    resolved_train.pop("seed")
    return {"architecture": arch.to_dict(), "train": resolved_train, "world": world.to_dict(),
            "seeds": seeds, "profile": profile}


def _known(d: dict, cls) -> dict:
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown field(s): {sorted(unknown)}")
    return d


def _train_one(args):
    resolved, seed, out_dir = args
    arch = Architecture.from_dict(resolved["architecture"])
    tcfg = trainer.TrainConfig.from_dict({**resolved["train"], "seed": seed})
    world = WorldConfig(**resolved["world"])
    ckpt = out_dir / f"checkpoint_seed{seed}.json"
    loss = out_dir / f"loss_seed{seed}.csv"
    try:
        params, report = trainer.train_model(arch, tcfg, world)
    except trainer.TrainingDiverged as e:
        e.report.write_csv(loss)
        return seed, None, str(e), [str(loss)]
    report.write_csv(loss)
    netcore.save_checkpoint(ckpt, params, seed, train_config=tcfg.to_dict(),
                            world=world.to_dict())
    return seed, report.epoch_loss[-1] if report.epoch_loss else None, None, [str(ckpt), str(loss)]


def cmd_train(config_path, out_dir, seed: int | None = None, profile: str | None = None,
              jobs: int = 1) -> int:
    started = _now()
    resolved = resolve_train_config(load_config(config_path), seed, profile)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(resolved, s, out) for s in resolved["seeds"]]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_one, tasks))
    else:
        results = [_train_one(t) for t in tasks]
    manifest = RunManifest("train", resolved, resolved["seeds"], build_id(), started=started)
    status = 0
    for s, final, err, paths in results:
        manifest.outputs.extend(paths)
        if err:
            print(f"seed {s}: training diverged: {err}", file=sys.stderr)
            status = 1
        else:
            print(f"seed {s}: final epoch loss {final:.6g}")
    manifest.finished = _now()
    manifest.write(out)
    return status


# -- control -------------------------------------------------------------------

CONTROL_KEYS = {"eval", "reprise", "world", "architecture", "rate_grid", "checkpoints"}


def resolve_control_config(cfg: dict, checkpoints: list[str], grid: bool = False,
                           seed: int | None = None) -> dict:
    _check_keys(cfg, CONTROL_KEYS)
    eval_d = dict(cfg.get("eval", {}))
    if seed is not None:
        eval_d["seed"] = seed
    if grid:
        rg = cfg.get("rate_grid")
        if not rg:
            raise CliError("--grid needs a 'rate_grid' {eta_c: [...], eta_sigma: [...]} config")
        cells = list(eval_d.get("grid", []))
        for c in rg.get("eta_c", []):
            for s in rg.get("eta_sigma", []):
                cells.append({"eta_c": c, "eta_sigma": s, "context_set": False})
        for s in rg.get("context_set_sigma", []):
            cells.append({"eta_c": 0.0, "eta_sigma": s, "context_set": True})
        eval_d["grid"] = cells
    ecfg = _section({"eval": eval_d}, "eval", ex.EvalConfig.from_dict)
    rcfg = _section(cfg, "reprise", RepriseConfig.from_dict)
    world = _section(cfg, "world", lambda d: WorldConfig(**d))
    ckpts = list(checkpoints) or list(cfg.get("checkpoints", []))
    if not ckpts:
        raise CliError("no checkpoint given")
    return {"eval": ecfg.to_dict(), "reprise": rcfg.to_dict(), "world": world.to_dict(),
            "architecture": cfg.get("architecture"), "checkpoints": ckpts}


def _load_params(path: str, expected: dict | None) -> netcore.NetworkParams:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"checkpoint not found: {p}")
    try:
        params, _ = netcore.load_checkpoint(p)
    except (ContractError, KeyError, ValueError) as e:
        raise CliError(f"checkpoint {p} is unusable: {e}") from None
    if expected is not None:
        want = Architecture.from_dict(expected)
        if want != params.arch:
            raise CliError(f"checkpoint {p} has architecture {params.arch.to_dict()}, "
                           f"config expects {want.to_dict()} (dimension mismatch)")
    return params


def cmd_control(checkpoints, config_path, out_dir, grid: bool = False, jobs: int = 1,
                seed: int | None = None) -> int:
    started = _now()
    resolved = resolve_control_config(load_config(config_path), list(checkpoints or []),
                                      grid, seed)
    params = [_load_params(c, resolved["architecture"]) for c in resolved["checkpoints"]]
    ecfg = ex.EvalConfig.from_dict(resolved["eval"])
    report = ex.eval_goal_reaching(params, ecfg, RepriseConfig.from_dict(resolved["reprise"]),
                                   WorldConfig(**resolved["world"]), jobs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = report.write(out)
    manifest = RunManifest("control", resolved, [ecfg.seed], build_id(),
                           [str(p) for p in paths], started, _now())
    manifest.write(out)
    for row in report.table():
        if row["vehicle"] == "all":
            print(f"{ex.GridCell(row['rate_c'], row['rate_sigma'], bool(row['context_set'])).label()}"
                  f": final {row['mean_final_dist']:.4f} accumulated {row['mean_acc_dist']:.4f}")
    return 0


# -- analyze -------------------------------------------------------------------

def _trace_files(trace_dir: Path) -> list[Path]:
    sub = trace_dir / "traces"
    files = sorted((sub if sub.is_dir() else trace_dir).glob("*.csv"))
    return [f for f in files if f.name not in ("table.csv", "goals.csv")]


def _goal_contexts(trace_dir: Path) -> dict[tuple[str, str], tuple[list, list]]:
    """(network, cell) -> (vehicles, min-distance contexts) from ``goals.csv``."""
    path = trace_dir / "goals.csv"
    out: dict = {}
    if not path.is_file():
        return out
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            key = (f"net{r['network']}", r["cell"])
            v, c = out.setdefault(key, ([], []))
            v.append(ex.KIND_NAMES.index(r["vehicle"]))
            c.append([float(r[f"min_c{k}"]) for k in range(3)])
    return out


def cmd_analyze(trace_dir, out_dir, w: int = 10, k: float = 3.0, exclude: int = 20,
                within: int = 5, mapping: str = "identity") -> int:
    started = _now()
    src = Path(trace_dir)
    files = _trace_files(src) if src.is_dir() else []
    if not files:
        raise CliError(f"no trace CSVs found in {src}")
    goal_ctx = _goal_contexts(src)
    clusters, boundaries, accuracy = [], [], []
    for f in files:
        net, _, cell = f.stem.partition("_")
        tr = ex.read_trace_csv(f)
        if not tr:
            continue
        kinds = tr["vehicle_true"]
        contexts = np.column_stack([tr["c0"], tr["c1"], tr["c2"]])
        if (net, cell) in goal_ctx:
            vehicles, ctx = goal_ctx[(net, cell)]
        else:
            vehicles, ctx = kinds, contexts
        rep = ex.cluster_contexts(vehicles, ctx)
        clusters += [{"network": net, "cell": cell, **row} for row in rep.rows()]
        flags = ex.boundary_signals(tr["pred_error"], w, k)
        switches = set(ex.switch_steps(kinds))
        boundaries += [{"network": net, "cell": cell, "t": int(tr["t"][i]), "step_index": i,
                        "pred_error": float(tr["pred_error"][i]),
                        "near_switch": int(any(s <= i <= s + within for s in switches))}
                       for i in flags]
        perm = (ex.best_mapping(kinds, contexts, exclude) if mapping == "best"
                else tuple(range(3)))
        acc = ex.context_accuracy(kinds, contexts, exclude, perm)
        hit = ex.boundary_hit_rate(kinds, flags, within)
        for v in [*range(3), "all"]:
            accuracy.append({"network": net, "cell": cell,
                             "vehicle": v if v == "all" else ex.KIND_NAMES[v],
                             "accuracy": acc[v], "mapping": "".join(map(str, perm)),
                             "switch_hit_rate": hit})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "clusters.csv", out / "boundaries.csv", out / "accuracy.csv"]
    boundary_cols = ["network", "cell", "t", "step_index", "pred_error", "near_switch"]
    for p, rows, cols in zip(paths, (clusters, boundaries, accuracy), (None, boundary_cols, None)):
        _write_rows(p, rows, cols)
    config = {"trace_dir": str(src), "w": w, "k": k, "exclude": exclude, "within": within,
              "mapping": mapping}
    RunManifest("analyze", config, [], build_id(), [str(p) for p in paths], started,
                _now()).write(out)
    missing = sum(r["missing"] for r in clusters)
    print(f"{len(files)} trace file(s); {len(boundaries)} boundary flag(s); "
          f"{missing} missing cluster group(s)")
    return 0


def _write_rows(path: Path, rows: list[dict], columns=None) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        cols = columns or (list(rows[0]) if rows else [])
        if cols:
            wr.writerow(cols)
        for r in rows:
            wr.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reprise", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train forward models from babbled data")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--profile", choices=["desk", "paper"])
    t.add_argument("--jobs", type=int, default=1)

    c = sub.add_parser("control", help="goal-reaching evaluation of trained checkpoints")
    c.add_argument("--checkpoint", nargs="*", default=[])
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.add_argument("--grid", action="store_true", help="sweep the config's rate_grid")
    c.add_argument("--seed", type=int, help="override the eval seed")
    c.add_argument("--jobs", type=int, default=1)

    a = sub.add_parser("analyze", help="cluster, boundary and accuracy analyses of traces")
    a.add_argument("--traces", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--window", type=int, default=10)
    a.add_argument("--k", type=float, default=3.0)
    a.add_argument("--exclude", type=int, default=20)
    a.add_argument("--within", type=int, default=5)
    a.add_argument("--mapping", choices=["identity", "best"], default="identity")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.seed, args.profile, args.jobs)
        if args.command == "control":
            return cmd_control(args.checkpoint, args.config, args.out, args.grid, args.jobs,
                               args.seed)
        return cmd_analyze(args.traces, args.out, args.window, args.k, args.exclude,
                           args.within, args.mapping)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
