"""Offline/online workflow stages with persisted, digest-tracked artifacts.

Every stage reads and writes plain files in one output directory and records
what it wrote in ``manifest.json``. Artifact contents depend only on configs
and seeds; timestamps and timings live in the manifest and the bench report.
"""

from __future__ import annotations

import csv
import datetime as _dt
import functools
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, config_digests, to_jsonable
from .errors import NumericError, SchemaError, ValidationError
from .estimator import (
    EstimationResult,
    ObjectiveConfig,
    bfgs,
    fe_surface,
    gradient_descent,
    surrogate_surface,
)
from .fem import ParameterBox, ParameterPoint, save_snapshot, solve_forward
from .mesh import DomainSpec, build_mesh, save_mesh
from .network import (
    Dataset,
    FoldedEvaluator,
    fit_normalization,
    init_network,
    load_network,
    predict,
    save_network,
    train,
)
from .observation import N_OBS, OBSERVATION_GROUPS, observation_labels, observe
from .parallel import parallel_map

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
TRAIN_FILE = "train.csv"
VAL_FILE = "val.csv"
NETWORK_FILE = "network.json"
HISTORY_FILE = "history.csv"
MAX_FAILURE_FRACTION = 0.05


def _fmt(x: float) -> str:
    return "%.17g" % x


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(to_jsonable(doc), indent=1, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    """Record of produced files, their digests and the configs behind them."""

    out_dir: Path
    files: dict[str, str] = field(default_factory=dict)
    runs: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, out_dir) -> "RunManifest":
        out_dir = Path(out_dir)
        path = out_dir / MANIFEST
        if not path.exists():
            return cls(out_dir)
        try:
            doc = json.loads(path.read_text())
            return cls(out_dir, dict(doc["files"]), list(doc["runs"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SchemaError(f"corrupt manifest {path}: {exc}") from exc

    def record(self, command: str, cfg: RunConfig, paths, started: float, finished: float, **extra) -> None:
        rel = []
        for p in paths:
            name = Path(p).relative_to(self.out_dir).as_posix()
            self.files[name] = sha256_file(p)
            rel.append(name)
        self.runs.append({
            "command": command,
            "tool_version": __version__,
            "config_digests": config_digests(cfg),
            "seeds": {"sweep": cfg.sweep.seed, "training": cfg.training.rng_seed, "init": cfg.init_seed},
            "started": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
            "finished": _dt.datetime.fromtimestamp(finished, _dt.timezone.utc).isoformat(),
            "wall_time_s": finished - started,
            "files": rel,
            **extra,
        })
        _write_json(self.out_dir / MANIFEST, {"tool": "elastid", "files": self.files, "runs": self.runs})

    def verify(self) -> list[str]:
        """Names of listed files that are missing or whose digest changed."""
        bad = []
        for name, digest in sorted(self.files.items()):
            p = self.out_dir / name
            if not p.exists() or sha256_file(p) != digest:
                bad.append(name)
        return bad


# ---------------------------------------------------------------- datasets


@functools.lru_cache(maxsize=4)
def _mesh(domain: DomainSpec):
    return build_mesh(domain)


def solve_observation(task) -> tuple[np.ndarray | None, str]:
    """One independent FE solve and observation; ``(None, reason)`` on failure."""
    p, domain, fe, obs = task
    try:
        sol = solve_forward(ParameterPoint(*p), fe, _mesh(domain), store_all=False)
        y = observe(sol, obs)
    except NumericError as exc:
        return None, str(exc)
    if not np.all(np.isfinite(y)):
        return None, "non-finite observation"
    return y, ""


def sweep_points(sweep) -> tuple[np.ndarray, np.ndarray]:
    """Grid training inputs (E-major, endpoints included) and seeded random validation inputs."""
    box = sweep.box
    Es = np.linspace(box.E_min, box.E_max, sweep.n_E)
    nus = np.linspace(box.nu_min, box.nu_max, sweep.n_nu)
    grid = np.array([(E, nu) for E in Es for nu in nus])
    rng = np.random.default_rng(sweep.seed)
    val = box.lower + rng.random((sweep.n_val, 2)) * (box.upper - box.lower)
    return grid, val


def dataset_header() -> list[str]:
    return ["E", "nu"] + observation_labels()


def write_dataset(path, inputs, outputs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset_header())
        for p, y in zip(inputs, outputs):
            w.writerow([_fmt(v) for v in p] + [_fmt(v) for v in y])


def read_dataset(path, box: ParameterBox | None = None) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != dataset_header():
        raise SchemaError(f"{path}: unexpected dataset header")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, 2 + N_OBS)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    ds = Dataset(data[:, :2], data[:, 2:], meta)
    if box is not None:
        outside = [i for i, p in enumerate(ds.inputs) if not box.contains(p)]
        if outside:
            raise SchemaError(f"{path}: row {outside[0] + 1} lies outside the parameter box")
    return ds


def generate(cfg: RunConfig, out_dir, jobs: int = 1) -> dict:
    """FE data generation over the sweep grid and the random validation set."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    obs = cfg.obs()
    grid, val = sweep_points(cfg.sweep)
    splits = {"train": grid, "val": val}
    tasks = [(tuple(map(float, p)), cfg.domain, cfg.fe, obs) for p in np.vstack([grid, val])]
    results = parallel_map(solve_observation, tasks, jobs)
    failed = [(t[0], msg) for t, (y, msg) in zip(tasks, results) if y is None]
    for p, msg in failed:
        log.warning("FE solve failed at E=%.17g nu=%.17g: %s", p[0], p[1], msg)
    if len(failed) > MAX_FAILURE_FRACTION * len(tasks):
        raise NumericError(f"{len(failed)} of {len(tasks)} FE solves failed")
    written = []
    offset = 0
    summary = {}
    for name, fname in (("train", TRAIN_FILE), ("val", VAL_FILE)):
        P = splits[name]
        part = results[offset : offset + len(P)]
        offset += len(P)
        keep = [i for i, (y, _) in enumerate(part) if y is not None]
        Y = np.array([part[i][0] for i in keep]).reshape(-1, N_OBS)
        path = out_dir / fname
        write_dataset(path, P[keep], Y)
        meta = {
            "split": name,
            "rows": len(keep),
            "mesh": cfg.domain,
            "fe": cfg.fe,
            "observation": obs,
            "sweep": cfg.sweep,
            "generator_seed": cfg.sweep.seed,
            "failed": [{"E": p[0], "nu": p[1], "reason": part[i][1]}
                       for i, p in enumerate(P.tolist()) if part[i][0] is None],
        }
        meta_path = path.with_suffix(".meta.json")
        _write_json(meta_path, meta)
        written += [path, meta_path]
        summary[name] = len(keep)
    RunManifest.load(out_dir).record("generate", cfg, written, started, time.time(), jobs=jobs)
    summary["failed"] = len(failed)
    return summary


# ---------------------------------------------------------------- training


def train_surrogate(cfg: RunConfig, out_dir, data_dir=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = Path(data_dir) if data_dir is not None else out_dir
    started = time.time()
    box = cfg.sweep.box
    train_set = read_dataset(data_dir / TRAIN_FILE, box)
    val_set = read_dataset(data_dir / VAL_FILE, box)
    if len(val_set) == 0:
        raise ValidationError("validation set is empty")
    net = init_network(cfg.layout, cfg.init_seed)
    net.norm = fit_normalization(train_set, output_groups=OBSERVATION_GROUPS,
                                 output_names=observation_labels())
    net, history = train(net, train_set, val_set, cfg.training)
    net_path, hist_path = out_dir / NETWORK_FILE, out_dir / HISTORY_FILE
    save_network(net, net_path)
    history.write_csv(hist_path)
    RunManifest.load(out_dir).record("train", cfg, [net_path, hist_path], started, time.time())
    return net, history


# ---------------------------------------------------------------- estimation


def read_observation(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Observation vector from a CSV with labelled columns; the first data row is used.

    Optional ``E`` and ``nu`` columns are taken as the known truth.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SchemaError(f"{path}: no observation row")
    row = rows[0]
    labels = observation_labels()
    missing = [l for l in labels if l not in row]
    if missing:
        raise SchemaError(f"{path}: missing observation column {missing[0]!r}")
    try:
        u = np.array([float(row[l]) for l in labels])
        truth = np.array([float(row["E"]), float(row["nu"])]) if "E" in row and "nu" in row else None
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return u, truth


def write_observation(path, u_obs, truth=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = (["E", "nu"] if truth is not None else []) + observation_labels()
        w.writerow(head)
        w.writerow(([_fmt(v) for v in truth] if truth is not None else []) + [_fmt(v) for v in u_obs])


def synthetic_observation(cfg: RunConfig, truth) -> np.ndarray:
    """Observation produced by one FE solve at ``truth``."""
    y, msg = solve_observation((tuple(map(float, truth)), cfg.domain, cfg.fe, cfg.obs()))
    if y is None:
        raise NumericError(f"FE solve at the true parameters failed: {msg}")
    return y


METHODS = {"grad": gradient_descent, "bfgs": bfgs}


def estimate(cfg: RunConfig, out_dir, method: str, u_obs, truth=None, p0=None, network_path=None):
    """Run one estimator and persist its trace and summary.

    Returns:
        ``(EstimationResult, summary dict)``; the summary excludes wall time so
        that it is reproducible byte for byte (timing goes to the manifest).
    """
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = load_network(network_path or out_dir / NETWORK_FILE)
    box = cfg.estimator.box
    started = time.time()
    res: EstimationResult = METHODS[method](net, ObjectiveConfig.for_box(u_obs, box), cfg.estimator, p0)
    finished = time.time()
    summary = {
        "method": method,
        "status": res.status,
        "iterations": res.n_iter,
        "E": float(res.p_star[0]),
        "nu": float(res.p_star[1]),
        "objective": res.trace[-1].objective,
        "grad_norm": res.trace[-1].grad_norm,
        "grad_norm_initial": res.trace[0].grad_norm,
        "start": [float(x) for x in res.trace[0].p],
        "left_box": not all(r.in_box for r in res.trace),
    }
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        rel = np.abs(res.p_star - truth) / np.abs(truth)
        summary.update(truth=[float(x) for x in truth], rel_error_E=float(rel[0]), rel_error_nu=float(rel[1]))
    trace_path = out_dir / f"trace_{method}.csv"
    summary_path = out_dir / f"estimate_{method}.json"
    obs_path = out_dir / f"u_obs_{method}.csv"
    res.write_trace(trace_path)
    _write_json(summary_path, summary)
    write_observation(obs_path, u_obs, truth)
    RunManifest.load(out_dir).record(f"estimate --method {method}", cfg, [trace_path, summary_path, obs_path],
                                     started, finished)
    summary["wall_time_s"] = finished - started
    return res, summary


# ---------------------------------------------------------------- surfaces


def surfaces(cfg: RunConfig, out_dir, u_obs, which: str = "both", n_E: int = 10, n_nu: int = 10,
             jobs: int = 1, network_path=None) -> dict:
    if which not in ("N", "h", "both"):
        raise ValidationError(f"unknown surface kind {which!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    box = cfg.estimator.box
    out, written = {}, []
    if which in ("N", "both"):
        net = load_network(network_path or out_dir / NETWORK_FILE)
        out["N"] = surrogate_surface(net, u_obs, box, n_E, n_nu)
    if which in ("h", "both"):
        out["h"] = fe_surface(_mesh(cfg.domain), cfg.fe, cfg.obs(), u_obs, box, n_E, n_nu, jobs)
    for kind, surf in out.items():
        path = out_dir / f"surface_{kind}.csv"
        surf.write_csv(path)
        written.append(path)
    RunManifest.load(out_dir).record("surface", cfg, written, started, time.time(), jobs=jobs)
    return out


# ---------------------------------------------------------------- mesh and bench


def write_mesh(cfg: RunConfig, out_dir, name: str = "mesh.txt") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    path = out_dir / name
    save_mesh(build_mesh(cfg.domain), path)
    RunManifest.load(out_dir).record("mesh", cfg, [path], started, time.time())
    return path


def solve(cfg: RunConfig, out_dir, p, all_steps: bool = False) -> list[Path]:
    """One forward solve; writes the snapshots at ``T/2`` and ``T`` (or every step)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    point = ParameterPoint(*map(float, p))
    mesh = _mesh(cfg.domain)
    sol = solve_forward(point, cfg.fe, mesh, store_all=all_steps)
    written = []
    for k in sorted(sol.snapshots):
        path = out_dir / f"snapshot_{k:04d}.txt"
        save_snapshot(sol.snapshots[k], point, mesh, path)
        written.append(path)
    RunManifest.load(out_dir).record("solve", cfg, written, started, time.time())
    return written


def bench(cfg: RunConfig, out_dir, n_calls: int = 100_000, n_fe: int = 3, chunk: int = 1000,
          network_path=None) -> dict:
    """Mean and spread of single-point surrogate evaluations against FE solves.

    The FE time is that of ``solve_forward`` plus observation with the
    parameter-independent operators already assembled (the cheaper, and so
    conservative, figure); a cold first solve is reported separately.
    """
    if n_calls < 1 or n_fe < 1:
        raise ValidationError("bench needs at least one call of each kind")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    net = load_network(network_path or out_dir / NETWORK_FILE)
    box = cfg.estimator.box
    rng = np.random.default_rng(cfg.sweep.seed)
    P = box.lower + rng.random((min(n_calls, 1000), 2)) * (box.upper - box.lower)
    ev = FoldedEvaluator(net)
    err = np.max(np.abs(ev(P[0]) - predict(net, P[0])) / (np.abs(predict(net, P[0])) + 1e-300))
    ev(P[0])
    per_call = []
    done = 0
    while done < n_calls:
        m = min(chunk, n_calls - done)
        t0 = time.perf_counter()
        for i in range(m):
            ev(P[(done + i) % len(P)])
        per_call.append((time.perf_counter() - t0) / m)
        done += m
    per_call = np.array(per_call)
    t0 = time.perf_counter()
    predict(net, np.resize(P, (n_calls, 2)))
    batched = (time.perf_counter() - t0) / n_calls

    obs = cfg.obs()
    _mesh.cache_clear()
    fe_times = []
    for k in range(n_fe + 1):
        p = P[k % len(P)]
        t0 = time.perf_counter()
        y, msg = solve_observation((tuple(map(float, p)), cfg.domain, cfg.fe, obs))
        fe_times.append(time.perf_counter() - t0)
        if y is None:
            raise NumericError(f"FE solve failed during bench: {msg}")
    cold, warm = fe_times[0], np.array(fe_times[1:])
    report = {
        "surrogate_calls": int(n_calls),
        "surrogate_mean_s": float(per_call.mean()),
        "surrogate_std_s": float(per_call.std()),
        "surrogate_batched_mean_s": float(batched),
        "folded_max_rel_deviation": float(err),
        "fe_solves": int(n_fe),
        "fe_mean_s": float(warm.mean()),
        "fe_std_s": float(warm.std()),
        "fe_cold_s": float(cold),
        "ratio": float(warm.mean() / per_call.mean()),
        "ratio_batched": float(warm.mean() / batched),
        "mesh_vertices": _mesh(cfg.domain).n_vertices,
        "n_steps": cfg.fe.n_steps,
    }
    path = out_dir / "bench.json"
    _write_json(path, report)
    RunManifest.load(out_dir).record("bench", cfg, [path], started, time.time())
    return report
