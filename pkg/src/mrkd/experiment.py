"""Experiment spec files, result layout, sweeps and report tables.

Results for one experiment live in ``<out>/runs/<hash>/`` where ``hash`` is
derived from the normalised spec, so rerunning a spec lands in the same
place and sweeps can skip cells that already finished.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .data import DatasetSplit, gen_gaussian_mixture, load_cifar_dir, load_dataset, load_idx
from .losses import METHODS, LossConfig
from .snapshots import SnapshotConfig
from .trainer import TrainConfig, steps_per_epoch, train_protocol

SCHEMA_VERSION = 1
DEFAULT_RUNS = 4

TRAIN_KEYS = {"epochs", "batch_size", "lr_max", "lr_min", "momentum", "weight_decay", "seed",
              "hidden", "checkpoint_every"}
DATASET_KEYS = {
    "gaussian_mixture": {"classes", "dims", "n_train", "n_test", "separation", "seed"},
    "cifar": {"variant", "root", "augment"},
    "idx": {"train_images", "train_labels", "test_images", "test_labels", "classes"},
    "container": {"path"},
}
# sweep axis -> (section, key)
AXES = {
    "alpha": ("loss", "alpha"),
    "tau": ("loss", "tau"),
    "gamma": ("loss", "gamma"),
    "method": ("loss", "method"),
    "kappa": ("snapshot", "kappa_epochs"),
    "n": ("snapshot", "n"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr_max": ("train", "lr_max"),
    "weight_decay": ("train", "weight_decay"),
    "seed": ("train", "seed"),
}
METHOD_ORDER = ("Baseline", "LSR", "KD", "LsrKD", "LsrKD-TC", "MrKD1", "MrKD1-TC", "MrKD3", "MrKD3-TC",
                "MrKD5", "MrKD5-TC")


class SpecError(ValueError):
    """A spec file failed validation; the message names the offending field."""


# --- spec parsing ----------------------------------------------------------

def _require_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise SpecError(f"{where}: expected an object")
    unknown = set(section) - allowed
    if unknown:
        raise SpecError(f"{where}.{sorted(unknown)[0]}: unknown field")


def normalize_spec(raw: dict) -> dict:
    """Validate ``raw`` and return a copy with every default filled in."""
    if not isinstance(raw, dict):
        raise SpecError("spec: expected a JSON object")
    _require_keys(raw, {"schema", "name", "dataset", "train", "loss", "snapshot", "runs"}, "spec")
    if raw.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise SpecError(f"schema: unsupported version {raw.get('schema')!r}")
    spec = {"schema": SCHEMA_VERSION}
    if "name" in raw:
        spec["name"] = str(raw["name"])

    ds = raw.get("dataset")
    if not isinstance(ds, dict) or ds.get("kind") not in DATASET_KEYS:
        raise SpecError(f"dataset.kind: expected one of {sorted(DATASET_KEYS)}")
    _require_keys(ds, DATASET_KEYS[ds["kind"]] | {"kind", "name"}, "dataset")
    spec["dataset"] = dict(ds)

    train = dict(raw.get("train", {}))
    _require_keys(train, TRAIN_KEYS, "train")
    defaults = TrainConfig()
    merged = {k: getattr(defaults, k) for k in TRAIN_KEYS}
    merged.update(train)
    merged["hidden"] = list(merged["hidden"])
    spec["train"] = merged

    loss = raw.get("loss")
    if not isinstance(loss, dict) or "method" not in loss:
        raise SpecError("loss.method: missing")
    _require_keys(loss, {"method", "alpha", "tau", "gamma"}, "loss")
    if loss["method"] not in METHODS:
        raise SpecError(f"loss.method: unknown loss method {loss['method']!r}; expected one of {METHODS}")
    base = LossConfig.defaults(loss["method"], gamma=loss.get("gamma"))
    spec["loss"] = {"method": base.method, "alpha": loss.get("alpha", base.alpha),
                    "tau": loss.get("tau", base.tau), "gamma": loss.get("gamma")}

    snap = raw.get("snapshot")
    if snap is not None:
        _require_keys(snap, {"n", "kappa_epochs"}, "snapshot")
        if "kappa_epochs" not in snap:
            raise SpecError("snapshot.kappa_epochs: missing")
        snap = {"n": snap.get("n", 1), "kappa_epochs": snap["kappa_epochs"]}
    spec["snapshot"] = snap

    runs = raw.get("runs", DEFAULT_RUNS)
    if not isinstance(runs, int) or runs < 1:
        raise SpecError(f"runs: must be a positive integer, got {runs!r}")
    spec["runs"] = runs
    build_train_config(spec)  # cross-field validation
    return spec


def build_train_config(spec: dict) -> TrainConfig:
    try:
        loss = LossConfig(**spec["loss"])
    except ValueError as exc:
        raise SpecError(f"loss.{exc}") from exc
    snapshot = None
    if spec["snapshot"] is not None:
        try:
            snapshot = SnapshotConfig(kappa_epochs=float(spec["snapshot"]["kappa_epochs"]),
                                      n=int(spec["snapshot"]["n"]))
        except ValueError as exc:
            raise SpecError(f"snapshot.{exc}") from exc
    t = dict(spec["train"])
    t["hidden"] = tuple(t["hidden"])
    try:
        return TrainConfig(loss=loss, snapshot=snapshot, **t)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        raise SpecError(msg if msg.startswith("snapshot") else f"train.{msg}") from exc


def load_spec(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec: not valid JSON ({exc})") from exc
    return normalize_spec(raw)


def spec_hash(spec: dict) -> str:
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _data_path(p) -> Path:
    p = Path(p)
    if p.is_absolute():
        return p
    return Path(os.environ.get("MRKD_DATA_DIR", ".")) / p


def build_dataset(ds: dict) -> DatasetSplit:
    kind = ds["kind"]
    if kind == "gaussian_mixture":
        return gen_gaussian_mixture(int(ds["classes"]), int(ds["dims"]), int(ds["n_train"]),
                                    int(ds["n_test"]), float(ds["separation"]), int(ds.get("seed", 0)))
    if kind == "cifar":
        return load_cifar_dir(_data_path(ds["root"]), int(ds.get("variant", 10)), bool(ds.get("augment", True)))
    if kind == "idx":
        x_tr, y_tr = load_idx(_data_path(ds["train_images"]), _data_path(ds["train_labels"]))
        x_te, y_te = load_idx(_data_path(ds["test_images"]), _data_path(ds["test_labels"]))
        return DatasetSplit(x_tr, y_tr, x_te, y_te, int(ds.get("classes", 10)))
    return load_dataset(_data_path(ds["path"]))


def task_name(spec: dict) -> str:
    ds = spec["dataset"]
    if "name" in ds:
        return str(ds["name"])
    if ds["kind"] == "gaussian_mixture":
        return f"gmm-M{ds['classes']}-D{ds['dims']}-s{float(ds['separation']):g}"
    if ds["kind"] == "cifar":
        return f"cifar{ds.get('variant', 10)}"
    if ds["kind"] == "idx":
        return Path(ds["train_images"]).stem
    return Path(ds["path"]).stem


def method_label(spec: dict) -> str:
    method = spec["loss"]["method"]
    if method == "CE":
        return "Baseline"
    if method in ("MrKD", "MrKD-TC"):
        return f"MrKD{spec['snapshot']['n']}" + ("-TC" if method == "MrKD-TC" else "")
    return method


# --- writing results -------------------------------------------------------

def write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass
class ExperimentResult:
    directory: Path
    aggregate: dict
    summary_line: str


def run_experiment(spec: dict, out, data: DatasetSplit | None = None) -> ExperimentResult:
    """Train every run of ``spec`` and write CSVs, checkpoints and ``aggregate.json``."""
    cfg = build_train_config(spec)
    if data is None:
        data = build_dataset(spec["dataset"])
    key = spec_hash(spec)
    run_dir = Path(out) / "runs" / key
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()

    agg = train_protocol(data, cfg, runs=spec["runs"])
    for k, run in enumerate(agg.run_metrics):
        write_atomic(run_dir / f"run{k}.csv", run.to_csv())
        write_atomic(run_dir / f"run{k}.params", run.params.to_bytes())

    spe = steps_per_epoch(data.x_train.shape[0], cfg.batch_size)
    snapshot = None
    if spec["snapshot"] is not None:
        snap_cfg = SnapshotConfig(float(spec["snapshot"]["kappa_epochs"]), int(spec["snapshot"]["n"]), spe)
        snapshot = {"n": snap_cfg.n, "kappa_epochs": snap_cfg.kappa_epochs, "kappa_steps": snap_cfg.kappa_steps}
    record = {
        "hash": key,
        "method": method_label(spec),
        "task": task_name(spec),
        "config": spec,
        "mean": agg.mean,
        "std": agg.std,
        "runs": agg.runs,
        "degenerate": agg.degenerate,
        "snapshot": snapshot,
        "steps_per_epoch": spe,
        "run_entries": [
            {"run": k, "seed": r.seed, "final_test_error": r.final_test_error,
             "final_train_error": r.final_train_error, "shifts": r.shifts}
            for k, r in enumerate(agg.run_metrics)
        ],
    }
    write_atomic(run_dir / "spec.json", _dumps(spec))
    write_atomic(run_dir / "meta.json", _dumps({
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "wall_seconds": time.perf_counter() - t0,
        "run_wall_seconds": [r.wall_seconds for r in agg.run_metrics],
    }))
    # aggregate.json goes last: its presence marks the cell complete
    write_atomic(run_dir / "aggregate.json", _dumps(record))
    flag = " [single run]" if agg.degenerate else ""
    line = f"{record['method']} on {record['task']}: {agg.format()}{flag}"
    return ExperimentResult(run_dir, record, line)


# --- sweeps ----------------------------------------------------------------

def _set_axis(spec: dict, axis: str, value) -> dict:
    section, key = AXES[axis]
    cell = copy.deepcopy(spec)
    if section == "snapshot":
        if cell["snapshot"] is None:
            raise SpecError(f"axes.{axis}: base spec has no snapshot section")
        cell["snapshot"][key] = value
    else:
        cell[section][key] = value
    return cell


def load_sweep(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"sweep: not valid JSON ({exc})") from exc
    _require_keys(raw, {"schema", "base", "axes", "mode"}, "sweep")
    axes = raw.get("axes", {}) or {}
    if not isinstance(axes, dict):
        raise SpecError("axes: expected an object of name -> value list")
    for name, values in axes.items():
        if name not in AXES:
            raise SpecError(f"axes.{name}: unknown axis; expected one of {sorted(AXES)}")
        if not isinstance(values, list) or not values:
            raise SpecError(f"axes.{name}: expected a non-empty list")
    mode = raw.get("mode", "control")
    if mode not in ("control", "grid"):
        raise SpecError(f"mode: expected 'control' or 'grid', got {mode!r}")
    return {"base": raw.get("base"), "axes": axes, "mode": mode}


def sweep_cells(base: dict, axes: dict, grid: bool = False) -> list[dict]:
    """Expand a sweep into normalised cell specs, deduplicated by hash.

    The default varies one axis at a time around ``base``; ``grid`` takes
    the full cartesian product.
    """
    base = normalize_spec(base)
    if not axes:
        return [base]
    raw_cells = []
    if grid:
        names = list(axes)
        for combo in itertools.product(*(axes[n] for n in names)):
            cell = base
            for name, value in zip(names, combo):
                cell = _set_axis(cell, name, value)
            raw_cells.append(cell)
    else:
        for name, values in axes.items():
            raw_cells.extend(_set_axis(base, name, v) for v in values)
    cells, seen = [], set()
    for cell in raw_cells:
        try:
            cell = normalize_spec(cell)
        except SpecError as exc:
            raise SpecError(f"sweep cell invalid: {exc}") from exc
        h = spec_hash(cell)
        if h not in seen:
            seen.add(h)
            cells.append(cell)
    return cells


def _run_cell(args) -> dict:
    spec, out = args
    return run_experiment(spec, out).aggregate


def run_sweep(base: dict, axes: dict, out, grid: bool = False, parallel: int = 1, log=print) -> list[dict]:
    cells = sweep_cells(base, axes, grid)
    out = Path(out)
    log(f"sweep: {len(cells)} cells")
    pending = [c for c in cells if not (out / "runs" / spec_hash(c) / "aggregate.json").exists()]
    if len(pending) < len(cells):
        log(f"sweep: {len(cells) - len(pending)} cells already complete, {len(pending)} to run")
    if parallel > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for agg in pool.map(_run_cell, [(c, out) for c in pending]):
                log(f"  done {agg['hash']} {agg['method']}: {agg['mean']:.2f} (±{agg['std']:.2f})")
    else:
        for c in pending:
            agg = _run_cell((c, out))
            log(f"  done {agg['hash']} {agg['method']}: {agg['mean']:.2f} (±{agg['std']:.2f})")

    aggregates = [json.loads((out / "runs" / spec_hash(c) / "aggregate.json").read_text()) for c in cells]
    write_atomic(out / "summary.csv", summary_csv(aggregates, list(axes)))
    return aggregates


def _axis_value(spec: dict, axis: str):
    section, key = AXES[axis]
    sec = spec.get(section)
    return None if sec is None else sec.get(key)


def summary_csv(aggregates: list[dict], axes: list[str]) -> str:
    rows = sorted(aggregates, key=lambda a: (a["mean"], a["hash"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "method", "task", *axes, "mean", "std", "runs"])
    for a in rows:
        w.writerow([a["hash"], a["method"], a["task"], *(_axis_value(a["config"], x) for x in axes),
                    repr(a["mean"]), repr(a["std"]), a["runs"]])
    return buf.getvalue()


# --- report ----------------------------------------------------------------

def collect_aggregates(results_dir) -> list[dict]:
    paths = sorted(Path(results_dir).rglob("aggregate.json"))
    return [json.loads(p.read_text()) for p in paths]


def build_report(aggregates: list[dict]) -> tuple[str, str]:
    """Markdown and CSV tables: one row per task, one column per method.

    When several results share a (task, method) pair the one with the lowest
    mean is shown.  The lowest mean in each row is bolded; entries without a
    standard deviation are kept and the row is flagged.
    """
    if not aggregates:
        raise ValueError("no aggregate.json files found")
    best: dict[tuple[str, str], dict] = {}
    for a in aggregates:
        k = (a["task"], a["method"])
        if k not in best or a["mean"] < best[k]["mean"]:
            best[k] = a
    tasks = sorted({t for t, _ in best})
    present = {m for _, m in best}
    methods = [m for m in METHOD_ORDER if m in present] + sorted(present - set(METHOD_ORDER))

    md = ["| Task | " + " | ".join(methods) + " | Flags |",
          "|---|" + "---|" * len(methods) + "---|"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "method", "mean", "std", "best", "flag"])
    for task in tasks:
        row = {m: best[(task, m)] for m in methods if (task, m) in best}
        lowest = min(a["mean"] for a in row.values())
        cells, flags = [], []
        for m in methods:
            a = row.get(m)
            if a is None:
                cells.append("")
                continue
            mean = f"{a['mean']:.2f}"
            if a["mean"] == lowest:
                mean = f"**{mean}**"
            std = a.get("std")
            if std is None:
                flags.append(f"missing std: {m}")
                cells.append(f"{mean} (±?)")
            else:
                cells.append(f"{mean} (±{std:.2f})")
            w.writerow([task, m, repr(a["mean"]), "" if std is None else repr(std),
                        int(a["mean"] == lowest), "missing std" if std is None else ""])
        md.append(f"| {task} | " + " | ".join(cells) + f" | {'; '.join(flags)} |")
    return "\n".join(md) + "\n", buf.getvalue()


def write_report(results_dir) -> tuple[Path, Path]:
    results_dir = Path(results_dir)
    md, table = build_report(collect_aggregates(results_dir))
    write_atomic(results_dir / "report.md", md)
    write_atomic(results_dir / "report.csv", table)
    return results_dir / "report.md", results_dir / "report.csv"


__all__ = [
    "SpecError", "normalize_spec", "load_spec", "spec_hash", "build_dataset", "build_train_config",
    "run_experiment", "load_sweep", "sweep_cells", "run_sweep", "build_report", "write_report",
]
