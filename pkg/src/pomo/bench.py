"""Evaluation harness: result rows, run manifests, evaluation and solver sweeps, reports.

CSV layout of an ``eval`` / ``solve`` output directory (schema version 1):

``results.csv``
    one :class:`ResultRow` per method, without wall time, so reruns with the
    same seed are byte-identical
``timing.csv``
    ``method, wall_seconds, threads``; joined back by ``report``
``per_instance.csv``
    ``instance_id, mode, best_score, n_candidates``
``per_instance_timing.csv``
    ``instance_id, mode, millis`` (batch wall time spread evenly over its instances)
``manifest.json``
    the :class:`RunManifest` every row points to via ``manifest_id``

Scores are in natural units: tour length for routing (lower is better), total
value for knapsack (higher is better).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from pomo.env import format_trajectory, problem_from_instances
from pomo.errors import ConfigError, UnsupportedProblemError
from pomo.infer import batch_augmented, batch_multi_greedy, batch_sampling, batch_single
from pomo.instances import Dataset, dataset_to_bytes
from pomo.model import AttentionPolicy
from pomo.oracle import EXACT, SOLVER_KINDS, SOLVERS

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RESULT_COLUMNS = (
    "schema", "method", "kind", "size", "n_instances", "mean_score", "seed",
    "dataset_sha256", "manifest_id",
)
TIMING_COLUMNS = ("method", "wall_seconds", "threads")
INSTANCE_COLUMNS = ("instance_id", "mode", "best_score", "n_candidates")
REPORT_COLUMNS = (
    "method", "kind", "size", "n_instances", "mean_score", "gap", "gap_unit", "oracle",
    "wall_seconds", "seed", "dataset_sha256", "manifest_id",
)

DEFAULT_SOLVERS = {
    "tsp": ("held_karp", "farthest_insertion"),
    "cvrp": ("cvrp_reference",),
    "kp": ("kp_exact", "kp_greedy"),
}


@dataclass
class ResultRow:
    method: str
    kind: str
    size: int
    n_instances: int
    mean_score: float
    seed: int
    dataset_sha256: str
    manifest_id: str
    wall_seconds: float | None = None
    gap: float | None = None  # filled in by the report only
    gap_unit: str = ""
    oracle: str = ""

    def result_record(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "method": self.method,
            "kind": self.kind,
            "size": self.size,
            "n_instances": self.n_instances,
            "mean_score": _fmt(self.mean_score),
            "seed": self.seed,
            "dataset_sha256": self.dataset_sha256,
            "manifest_id": self.manifest_id,
        }

    def report_record(self) -> dict:
        rec = {k: getattr(self, k) for k in REPORT_COLUMNS}
        rec["mean_score"] = _fmt(self.mean_score)
        rec["gap"] = "" if self.gap is None else _fmt(self.gap)
        rec["wall_seconds"] = "" if self.wall_seconds is None else f"{self.wall_seconds:.3f}"
        return rec


@dataclass
class RunManifest:
    command: str
    config: dict
    revision: str
    datasets: dict  # path -> sha256
    checkpoint: str | None
    environment: dict
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @property
    def manifest_id(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(self.to_json())
        return path


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# provenance

def dataset_sha256(ds: Dataset) -> str:
    """Hash of the canonical binary encoding; the on-disk format does not matter."""
    return hashlib.sha256(dataset_to_bytes(ds)).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def source_revision() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=here, capture_output=True, text=True, timeout=10
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def environment(threads: int) -> dict:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "threads": threads,
    }


def set_threads(threads: int) -> None:
    if threads < 1:
        raise ConfigError(f"--threads must be at least 1, got {threads}")
    torch.set_num_threads(threads)


def dataset_size(ds: Dataset) -> int:
    return ds.instances[0].size if len(ds) else 0


# --------------------------------------------------------------------------
# evaluation

@dataclass
class ModeOutcome:
    mode: str
    scores: np.ndarray  # natural units, one per instance
    n_candidates: np.ndarray
    actions: list
    returns: np.ndarray  # internal returns (negated length for routing)
    seconds: float
    millis: np.ndarray | None = None


def parse_mode(mode: str) -> tuple:
    """``"sample:16"`` -> ("sample", 16); the other modes take no argument."""
    name, _, arg = mode.partition(":")
    if name in ("single", "multi", "aug8"):
        if arg:
            raise ConfigError(f"mode {name!r} takes no argument")
        return name, None
    if name == "sample":
        try:
            k = int(arg)
        except ValueError:
            raise ConfigError(f"sample mode needs a count, e.g. sample:16, got {mode!r}") from None
        if k < 1:
            raise ConfigError("sample count must be positive")
        return name, k
    raise ConfigError(f"unknown inference mode {mode!r}")


def _batch_seed(seed: int, mode: str, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{mode}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def _to_score(kind: str, returns: np.ndarray) -> np.ndarray:
    return returns.copy() if kind == "kp" else -returns


def evaluate_mode(policy: AttentionPolicy, ds: Dataset, mode: str, seed: int, batch_size: int = 256) -> ModeOutcome:
    name, k = parse_mode(mode)
    if name == "aug8" and ds.kind == "kp":
        raise UnsupportedProblemError("aug8 is not defined for knapsack")
    policy.eval()
    t0 = time.perf_counter()
    returns, n_cand, actions, millis = [], [], [], []
    for bi, lo in enumerate(range(0, len(ds), batch_size)):
        tb = time.perf_counter()
        problem = problem_from_instances(ds.instances[lo : lo + batch_size])
        gen = torch.Generator().manual_seed(_batch_seed(seed, mode, bi))
        if name == "single":
            out, _ = batch_single(policy, problem, gen)
        elif name == "multi":
            out = batch_multi_greedy(policy, problem)
        elif name == "aug8":
            out = batch_augmented(policy, problem)
        else:
            out = batch_sampling(policy, problem, k, gen)
        returns.append(np.asarray(out.best_returns, dtype=np.float64))
        n_cand.extend([out.n_candidates] * problem.batch_size)
        actions.extend(out.best_actions)
        millis.extend([1000.0 * (time.perf_counter() - tb) / problem.batch_size] * problem.batch_size)
    ret = np.concatenate(returns) if returns else np.zeros(0)
    return ModeOutcome(mode, _to_score(ds.kind, ret), np.array(n_cand, dtype=np.int64), actions, ret,
                       time.perf_counter() - t0, np.array(millis))


def default_label(policy: AttentionPolicy) -> str:
    return "am" if policy.is_start_token else "pomo"


def run_eval(
    policy: AttentionPolicy,
    ds: Dataset,
    modes,
    out_dir,
    *,
    seed: int,
    threads: int = 1,
    batch_size: int = 256,
    label: str | None = None,
    dataset_path: str = "",
    checkpoint: str | None = None,
    dump_trajectories: bool = False,
) -> list:
    """Evaluate ``policy`` in every requested mode and write the output directory."""
    modes = list(modes)
    for mode in modes:
        parse_mode(mode)
    label = label or default_label(policy)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sha = dataset_sha256(ds)
    manifest = RunManifest(
        command="eval",
        config={"modes": modes, "seed": seed, "batch_size": batch_size, "label": label,
                "model": asdict(policy.config)},
        revision=source_revision(),
        datasets={dataset_path: sha},
        checkpoint=checkpoint,
        environment=environment(threads),
        extra={"checkpoint_sha256": file_sha256(checkpoint) if checkpoint else None},
    )
    mid = manifest.manifest_id
    rows, outcomes = [], []
    for mode in modes:
        if ds.kind == "kp" and parse_mode(mode)[0] == "aug8":
            log.warning("skipping aug8 on a knapsack dataset: augmentation applies to routing problems only")
            continue
        res = evaluate_mode(policy, ds, mode, seed, batch_size)
        outcomes.append(res)
        mean = float(res.scores.mean()) if len(res.scores) else float("nan")
        rows.append(ResultRow(f"{label}:{mode}", ds.kind, dataset_size(ds), len(ds), mean, seed, sha, mid,
                              wall_seconds=res.seconds))
        log.info("%s:%s  mean %.6f  %.2fs", label, mode, mean, res.seconds)
    manifest.write(out)
    write_results(out, rows, threads)
    write_per_instance(out, outcomes)
    if dump_trajectories:
        for res in outcomes:
            path = out / f"trajectories_{res.mode.replace(':', '_')}.txt"
            with open(path, "w") as fh:
                for i, (acts, r) in enumerate(zip(res.actions, res.returns)):
                    fh.write(format_trajectory(i, acts, float(r)) + "\n")
    return rows


# --------------------------------------------------------------------------
# oracle / heuristic sweeps

def _solve_one(args) -> tuple:
    name, inst = args
    res = SOLVERS[name](inst)
    return res.score, res.optimal


def run_solvers(
    ds: Dataset,
    solvers,
    out_dir,
    *,
    seed: int,
    threads: int = 1,
    dataset_path: str = "",
) -> list:
    solvers = list(solvers) if solvers else list(DEFAULT_SOLVERS[ds.kind])
    for name in solvers:
        if name not in SOLVERS:
            raise ConfigError(f"unknown solver {name!r}; choose from {sorted(SOLVERS)}")
        if SOLVER_KINDS[name] != ds.kind:
            raise ConfigError(f"solver {name!r} handles {SOLVER_KINDS[name]}, dataset holds {ds.kind}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sha = dataset_sha256(ds)
    manifest = RunManifest(
        command="solve",
        config={"solvers": solvers, "seed": seed},
        revision=source_revision(),
        datasets={dataset_path: sha},
        checkpoint=None,
        environment=environment(threads),
    )
    mid = manifest.manifest_id
    rows, outcomes = [], []
    for name in solvers:
        t0 = time.perf_counter()
        jobs = [(name, inst) for inst in ds.instances]
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(_solve_one, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
        else:
            results = [_solve_one(j) for j in jobs]
        seconds = time.perf_counter() - t0
        scores = np.array([r[0] for r in results], dtype=np.float64)
        millis = np.full(len(scores), 1000.0 * seconds / max(1, len(scores)))
        outcomes.append(ModeOutcome(name, scores, np.ones(len(scores), dtype=np.int64), [], scores, seconds, millis))
        mean = float(scores.mean()) if len(scores) else float("nan")
        rows.append(ResultRow(name, ds.kind, dataset_size(ds), len(ds), mean, seed, sha, mid, wall_seconds=seconds))
        log.info("%s  mean %.6f  %.2fs", name, mean, seconds)
    manifest.write(out)
    write_results(out, rows, threads)
    write_per_instance(out, outcomes)
    return rows


# --------------------------------------------------------------------------
# CSV I/O

def write_results(out_dir, rows: list, threads: int) -> None:
    out = Path(out_dir)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row.result_record())
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TIMING_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({"method": row.method, "wall_seconds": f"{row.wall_seconds:.6f}", "threads": threads})


def write_per_instance(out_dir, outcomes: list) -> None:
    out = Path(out_dir)
    with open(out / "per_instance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INSTANCE_COLUMNS)
        for res in outcomes:
            for i, (s, c) in enumerate(zip(res.scores, res.n_candidates)):
                w.writerow([i, res.mode, _fmt(s), int(c)])
    with open(out / "per_instance_timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("instance_id", "mode", "millis"))
        for res in outcomes:
            for i, ms in enumerate(res.millis if res.millis is not None else []):
                w.writerow([i, res.mode, f"{ms:.4f}"])


def read_results(path) -> list:
    """Rows of a ``results.csv``; wall times come from the sibling ``timing.csv`` if present."""
    path = Path(path)
    if path.is_dir():
        path = path / "results.csv"
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or ())
        if reader.fieldnames is None:
            return []
        if missing:
            raise ConfigError(f"{path} lacks result columns {sorted(missing)}")
        raw = list(reader)
    timing = {}
    tpath = path.with_name("timing.csv")
    if tpath.exists():
        with open(tpath, newline="") as fh:
            timing = {r["method"]: float(r["wall_seconds"]) for r in csv.DictReader(fh)}
    rows = []
    for r in raw:
        if int(r["schema"]) != SCHEMA_VERSION:
            raise ConfigError(f"{path}: unsupported result schema {r['schema']}")
        rows.append(
            ResultRow(
                method=r["method"],
                kind=r["kind"],
                size=int(r["size"]),
                n_instances=int(r["n_instances"]),
                mean_score=float(r["mean_score"]),
                seed=int(r["seed"]),
                dataset_sha256=r["dataset_sha256"],
                manifest_id=r["manifest_id"],
                wall_seconds=timing.get(r["method"]),
            )
        )
    return rows


# --------------------------------------------------------------------------
# report

def gap(method_mean: float, oracle_mean: float, kind: str) -> tuple:
    """``(value, unit)``: percent for routing, absolute shortfall for knapsack."""
    if kind == "kp":
        return oracle_mean - method_mean, "abs"
    return 100.0 * (method_mean - oracle_mean) / oracle_mean, "%"


def _pick_oracle(rows: list, oracle: str | None):
    if oracle is not None:
        named = [r for r in rows if r.method == oracle]
        return named[0] if named else None
    exact = [r for r in rows if r.method in EXACT]
    return exact[0] if exact else None


def build_report(rows: list, oracle: str | None = None) -> list:
    """Attach gaps; a gap is only computed against an oracle run on the same dataset."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r.dataset_sha256, []).append(r)
    out = []
    for sha, group in groups.items():
        ref = _pick_oracle(group, oracle)
        for r in group:
            r = ResultRow(**asdict(r))
            if ref is not None and math.isfinite(ref.mean_score) and r.n_instances == ref.n_instances:
                r.gap, r.gap_unit = gap(r.mean_score, ref.mean_score, r.kind)
                r.oracle = ref.method
            out.append(r)
    return out


def format_table(rows: list) -> str:
    header = ("method", "kind", "size", "n", "score", "gap", "time[s]", "dataset")
    lines = [header]
    for r in rows:
        if r.gap is None:
            g = ""
        elif r.gap_unit == "%":
            g = f"{r.gap:.2f}%"
        else:
            g = f"{r.gap:.3f}"
        t = "" if r.wall_seconds is None else f"{r.wall_seconds:.1f}"
        lines.append((r.method, r.kind, str(r.size), str(r.n_instances), f"{r.mean_score:.4f}", g, t,
                      r.dataset_sha256[:10]))
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    text = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines]
    text.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(text) + "\n"


def run_report(paths, out_dir=None, oracle: str | None = None, figure: bool = True) -> tuple:
    """Merge result CSVs; returns ``(rows, table_text)`` and writes files when ``out_dir`` is set."""
    rows = []
    for p in paths:
        rows.extend(read_results(p))
    rows = build_report(rows, oracle)
    table = format_table(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow(r.report_record())
        if figure and rows:
            from pomo.plots import plot_report

            plot_report(rows, out / "report.png")
    return rows, table


def log_to_stderr(level=logging.INFO) -> None:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("pomo").setLevel(level)
