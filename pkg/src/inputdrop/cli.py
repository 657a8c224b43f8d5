"""Command line runner: ``inputdrop run | report | plot | generate``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__, metrics
from .experiments import (
    ENSEMBLE_BASELINE,
    BackboneSettings,
    ConfigError,
    DehazeSettings,
    ExperimentConfig,
    Method,
    OptimizerSettings,
    Task,
    TrainedRun,
    comparison_table,
    primary_metric,
    run_method_matrix,
)
from .modality import DropoutMode, DropoutPolicy
from .seeding import derive_seed
from .stats import RunResult, aggregate_runs, wmw_test
from .synthdata import (
    SynthClassTaskSpec,
    SynthDehazeTaskSpec,
    generate_classification_dataset,
    generate_dehaze_dataset,
    load_classification_dataset,
    load_dehaze_dataset,
    save_classification_dataset,
    save_dehaze_dataset,
)

log = logging.getLogger("inputdrop")

SCHEMA_VERSION = 1
OUT_ENV = "INPUTDROP_OUT"
RESULTS_FILE = "results.jsonl"
ERRORS_FILE = "errors.jsonl"
SUMMARY_FILE = "summary.csv"
MANIFEST_FILE = "manifest.json"
CURVES_FILE = "curves.jsonl"
SEED_STREAMS = ("init", "minibatch", "input_dropout", "moddrop")
RECORD_KEYS = ("experiment", "method", "seed", "metrics", "config_hash", "timestamp")


class CliError(Exception):
    """User-facing failure; the message is printed and the exit code is 2."""


# ---------------------------------------------------------------------------
# result records


def render_record(result: RunResult, timestamp: str) -> str:
    rec = {
        "experiment": result.experiment,
        "method": result.method,
        "seed": result.seed,
        "metrics": {k: float(v) for k, v in sorted(result.metrics.items())},
        "config_hash": result.config_hash,
        "timestamp": timestamp,
    }
    return json.dumps(rec, sort_keys=True, allow_nan=False)


def parse_record(line: str) -> tuple[RunResult, str]:
    rec = json.loads(line)
    missing = [k for k in RECORD_KEYS if k not in rec]
    if missing:
        raise ValueError(f"result record lacks {missing}")
    result = RunResult(rec["experiment"], int(rec["seed"]), dict(rec["metrics"]), rec["config_hash"], rec["method"])
    return result, rec["timestamp"]


def read_results(path: Path) -> list[RunResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse_record(line)[0])
            except (ValueError, KeyError, TypeError) as exc:
                raise CliError(f"{path}:{lineno}: bad result record ({exc})") from exc
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def summary_rows(results: Sequence[RunResult], expected_seeds: Sequence[int] | None = None) -> list[dict]:
    """One row per (experiment, method, metric), sorted; floats as repr."""
    groups: dict[tuple[str, str], list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.experiment, r.method), []).append(r)
    rows = []
    for (exp, method), rs in sorted(groups.items()):
        for metric in sorted({m for r in rs for m in r.metrics}):
            agg = aggregate_runs([r for r in rs if metric in r.metrics], metric)
            gaps = sorted(set(expected_seeds) - set(agg.seeds)) if expected_seeds is not None else []
            rows.append(
                {
                    "experiment": exp,
                    "method": method,
                    "metric": metric,
                    "n": agg.n,
                    "mean": _fmt(agg.mean),
                    "std": _fmt(agg.std),
                    "seeds": " ".join(str(s) for s in agg.seeds),
                    "missing_seeds": " ".join(str(s) for s in gaps),
                }
            )
    return rows


SUMMARY_COLUMNS = ("experiment", "method", "metric", "n", "mean", "std", "seeds", "missing_seeds")


def render_summary(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def read_summary(path: Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: (int(v) if k == "n" else v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# config files


def _line_index(text: str) -> dict[tuple, int]:
    """Map key paths of a YAML document to 1-based line numbers."""
    index: dict[tuple, int] = {}

    def walk(node, path):
        index[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                walk(v, path + (k.value,))
                index[path + (k.value,)] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return index


class ConfigFileError(CliError):
    def __init__(self, path, field: str, message: str, line: int | None):
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {field}: {message}" if field else f"{where}: {message}")
        self.field, self.line = field, line


@dataclass
class RunPlan:
    experiment: str
    task: Task
    configs: list[ExperimentConfig]
    seeds: list[int]
    master_seed: int
    alpha: float
    dataset_path: Path | None
    config_sha256: str


_TOP_KEYS = {
    "schema_version", "experiment", "task", "methods", "seeds", "master_seed", "alpha",
    "dataset", "backbone", "optimizer", "dropout", "dehaze", "eval_batch_size",
}


def _build(cls, raw: dict | None, prefix: str):
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("must be a mapping", prefix)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", f"{prefix}.{unknown[0]}")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), prefix) from exc


def parse_config(text: str, path: str | Path = "<config>", base_dir: Path | None = None) -> RunPlan:
    """Validate a YAML run config; errors carry the offending field and line."""
    try:
        raw = yaml.safe_load(text)
        lines = _line_index(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigFileError(path, "", f"YAML syntax error: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None)
    if not isinstance(raw, dict):
        raise ConfigFileError(path, "", "top level must be a mapping", 1)

    def fail(field: str, msg: str):
        keys = tuple(int(k) if k.isdigit() else k for k in field.split(".")) if field else ()
        line = None
        while keys and line is None:
            line = lines.get(keys)
            keys = keys[:-1]
        raise ConfigFileError(path, field, msg, line)

    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        fail(unknown[0], "unknown key")
    if raw.get("schema_version") != SCHEMA_VERSION:
        fail("schema_version", f"must be {SCHEMA_VERSION}")
    try:
        task = Task(raw.get("task", "classification"))
    except ValueError:
        fail("task", f"must be one of {[t.value for t in Task]}")
    experiment = raw.get("experiment")
    if not isinstance(experiment, str) or not experiment:
        fail("experiment", "must be a non-empty string")

    methods = raw.get("methods")
    if not isinstance(methods, list) or not methods:
        fail("methods", "must be a non-empty list")
    parsed_methods = []
    for i, m in enumerate(methods):
        try:
            parsed_methods.append(Method(m))
        except ValueError:
            fail(f"methods.{i}", f"unknown method {m!r}; choose from {[x.value for x in Method]}")
    if len(set(parsed_methods)) != len(parsed_methods):
        fail("methods", "duplicate method")

    seeds = raw.get("seeds", 5)
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        if seeds <= 0:
            fail("seeds", "must be positive")
        seeds = list(range(seeds))
    elif not (isinstance(seeds, list) and seeds and all(isinstance(s, int) and s >= 0 for s in seeds)):
        fail("seeds", "must be a positive count or a list of non-negative run indices")
    if len(set(seeds)) != len(seeds):
        fail("seeds", "duplicate run index")

    master = raw.get("master_seed", 0)
    if not isinstance(master, int) or master < 0:
        fail("master_seed", "must be a non-negative integer")
    alpha = raw.get("alpha", 0.05)
    if not isinstance(alpha, (int, float)) or not 0 < alpha < 1:
        fail("alpha", "must lie in (0, 1)")

    ds = raw.get("dataset") or {}
    if not isinstance(ds, dict):
        fail("dataset", "must be a mapping")
    dataset_path = None
    spec_cls = SynthClassTaskSpec if task is Task.CLASSIFICATION else SynthDehazeTaskSpec
    if "path" in ds:
        extra = sorted(set(ds) - {"path"})
        if extra:
            fail(f"dataset.{extra[0]}", "not allowed next to dataset.path")
        dataset_path = Path(ds["path"])
        if base_dir is not None and not dataset_path.is_absolute():
            dataset_path = base_dir / dataset_path
        dataset = None
    else:
        try:
            dataset = _build(spec_cls, ds, "dataset")
        except ConfigError as exc:
            fail(exc.field or "dataset", str(exc).split(": ", 1)[-1])

    try:
        backbone = _build(BackboneSettings, raw.get("backbone"), "backbone")
        optimizer = _build(OptimizerSettings, raw.get("optimizer"), "optimizer")
        dehaze = _build(DehazeSettings, raw.get("dehaze"), "dehaze")
    except ConfigError as exc:
        fail(exc.field or "", str(exc).split(": ", 1)[-1])

    drop = raw.get("dropout") or {}
    if not isinstance(drop, dict) or set(drop) - {"p_drop"}:
        fail("dropout", "only dropout.p_drop may be set; the mode follows the method")
    eval_bs = raw.get("eval_batch_size", 256)

    plan_configs = []
    for i, method in enumerate(parsed_methods):
        try:
            mode = DropoutMode.BOTH if method is Method.INPUT_DROPOUT_BOTH else DropoutMode.ADDIT
            policy = DropoutPolicy(mode, drop.get("p_drop"))
            plan_configs.append(
                ExperimentConfig(
                    experiment, task, method, dataset or spec_cls(), backbone, policy, optimizer, dehaze, eval_bs
                )
            )
        except ConfigError as exc:
            fail(f"methods.{i}" if exc.field == "method" else (exc.field or "methods"), str(exc).split(": ", 1)[-1])
        except ValueError as exc:
            fail("dropout.p_drop", str(exc))
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return RunPlan(experiment, task, plan_configs, seeds, master, float(alpha), dataset_path, digest)


def load_config(path: str | Path) -> RunPlan:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path, path.parent)


def _load_dataset(plan: RunPlan):
    if plan.dataset_path is None:
        return None
    if not plan.dataset_path.exists():
        raise CliError(f"dataset not found: {plan.dataset_path}")
    loader = load_classification_dataset if plan.task is Task.CLASSIFICATION else load_dehaze_dataset
    try:
        data, spec = loader(plan.dataset_path)
    except (ValueError, KeyError) as exc:
        raise CliError(f"cannot read dataset {plan.dataset_path}: {exc}") from exc
    plan.configs = [_with_dataset(c, spec) for c in plan.configs]
    return data


def _with_dataset(cfg: ExperimentConfig, spec) -> ExperimentConfig:
    return ExperimentConfig(
        cfg.experiment, cfg.task, cfg.method, spec, cfg.backbone, cfg.dropout, cfg.optimizer, cfg.dehaze,
        cfg.eval_batch_size,
    )


# ---------------------------------------------------------------------------
# verbs


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def build_manifest(plan: RunPlan, out: Path) -> dict:
    return {
        "tool_version": __version__,
        "experiment": plan.experiment,
        "master_seed": plan.master_seed,
        "config_sha256": plan.config_sha256,
        "methods": [c.method.value for c in plan.configs],
        "config_hashes": {c.method.value: c.config_hash for c in plan.configs},
        "derived_seeds": {
            str(i): {s: str(derive_seed(plan.master_seed, i, s)) for s in SEED_STREAMS} for i in plan.seeds
        },
        "artifacts": {
            "results": RESULTS_FILE,
            "summary": SUMMARY_FILE,
            "curves": CURVES_FILE,
            "errors": ERRORS_FILE,
        },
    }


def cmd_run(args) -> int:
    plan = load_config(args.config)
    if args.seed is not None:
        plan.master_seed = args.seed
    if args.alpha is not None:
        plan.alpha = args.alpha
    out = _out_dir(args.out)
    data = _load_dataset(plan)
    out.mkdir(parents=True, exist_ok=True)
    tmp_dir = out / ".runs"
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    tmp_dir.mkdir()

    def on_run(run: TrainedRun):
        r = run.result
        payload = {"record": render_record(r, _now()), "curve": run.curve}
        (tmp_dir / f"{r.method}__{r.seed}.json").write_text(json.dumps(payload), encoding="utf-8")
        log.info("finished %s seed %d: %s", r.method, r.seed, r.metrics)

    matrix = run_method_matrix(
        plan.configs, plan.seeds, plan.master_seed, plan.alpha, on_run=on_run, data=data, jobs=args.jobs
    )
    # merge per-run files in a fixed order; ensembles are computed here
    lines, curves = [], []
    stamp = _now()
    for method in sorted(matrix.runs):
        for r in sorted(matrix.runs[method], key=lambda r: r.seed):
            part = tmp_dir / f"{method}__{r.seed}.json"
            if part.exists():
                payload = json.loads(part.read_text(encoding="utf-8"))
                lines.append(payload["record"])
                curves.append(json.dumps({"method": method, "seed": r.seed, "curve": payload["curve"]}, sort_keys=True))
            else:
                lines.append(render_record(r, stamp))
    _write_atomic(out / RESULTS_FILE, "".join(line + "\n" for line in lines))
    _write_atomic(out / CURVES_FILE, "".join(c + "\n" for c in curves))
    _write_atomic(out / ERRORS_FILE, "".join(json.dumps(e, sort_keys=True) + "\n" for e in matrix.errors))
    all_results = [r for rs in matrix.runs.values() for r in rs]
    _write_atomic(out / SUMMARY_FILE, render_summary(summary_rows(all_results, plan.seeds)))
    _write_atomic(out / MANIFEST_FILE, json.dumps(build_manifest(plan, out), indent=2, sort_keys=True) + "\n")
    shutil.rmtree(tmp_dir)
    print(render_comparisons(all_results, plan.alpha, plan.task))
    if matrix.errors:
        for e in matrix.errors:
            print(f"run failed: {e['method']} seed {e['seed']}: {e['error']}", file=sys.stderr)
        return 1
    return 0


def _infer_task(results: Sequence[RunResult]) -> Task:
    return Task.CLASSIFICATION if any("accuracy" in r.metrics for r in results) else Task.DEHAZING


def format_gain(baseline: float, treated: float, lower_is_better: bool = False) -> str:
    """Relative gain rounded to one decimal, e.g. ``+33.3%``."""
    return f"{metrics.relative_gain(baseline, treated, lower_is_better):+.1f}%"


def render_comparisons(results: Sequence[RunResult], alpha: float, task: Task | None = None) -> str:
    task = task or _infer_task(results)
    metric = primary_metric(task)
    lines = []
    for exp in sorted({r.experiment for r in results}):
        runs: dict[str, list[RunResult]] = {}
        for r in results:
            if r.experiment == exp:
                runs.setdefault(r.method, []).append(r)
        lines.append(f"experiment {exp}  metric {metric}  alpha {alpha:g}  (* = significant, exact two-sided WMW)")
        lines.append(f"{'method':40s} {'n':>3s} {'mean':>9s} {'std':>9s}")
        for method in sorted(runs):
            agg = aggregate_runs(runs[method], metric)
            lines.append(f"{method:40s} {agg.n:3d} {agg.mean:9.4f} {agg.std:9.4f}")
        table = comparison_table(runs, task, alpha)
        if table:
            lines.append(f"{'treated vs baseline':60s} {'gain':>8s} {'p':>8s}")
            for name, c in sorted(table.items()):
                mark = "*" if c.significant else " "
                ref = ENSEMBLE_BASELINE if name.startswith("ensemble:") else Method.RGB_ONLY.value
                gain = format_gain(c.baseline.mean, c.treated.mean, c.lower_is_better)
                lines.append(f"{name + ' vs ' + ref:60s} {gain:>8s} {c.wmw.p_value:8.4f} {mark}")
        lines.append("")
    return "\n".join(lines)


# tracking and detection reports -------------------------------------------

OCCLUSION_BUCKETS = {"0-30": (0, 30), "45-75": (45, 75)}


def _jsonl(path: Path) -> list[dict]:
    if not path.exists():
        raise CliError(f"file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise CliError(f"{path}:{lineno}: {exc.msg}") from exc
    if not rows:
        raise CliError(f"{path}: no records")
    return rows


def tracking_table(rows: Sequence[dict], baseline: str = "rgb_only") -> dict:
    """Per-method mean translation/rotation error by occlusion level.

    Each row: method, run, occlusion (percent), R_pred, t_pred, R_gt, t_gt.
    Errors are averaged over frames within a run, then over runs.
    """
    per: dict[tuple[str, int, int], list[tuple[float, float]]] = {}
    for i, row in enumerate(rows):
        try:
            pred = metrics.Pose(np.asarray(row["R_pred"], float), np.asarray(row["t_pred"], float))
            gt = metrics.Pose(np.asarray(row["R_gt"], float), np.asarray(row["t_gt"], float))
            key = (row["method"], int(row.get("run", 0)), int(row["occlusion"]))
        except (KeyError, ValueError, metrics.PoseError) as exc:
            raise CliError(f"tracking record {i + 1}: {exc}") from exc
        t_err = metrics.translation_error(pred.t, gt.t)
        r_err = math.degrees(metrics.rotation_distance(pred.R, gt.R))
        per.setdefault(key, []).append((t_err, r_err))
    table: dict[str, dict] = {}
    for (method, run, occ), errs in per.items():
        e = np.asarray(errs)
        cell = table.setdefault(method, {}).setdefault(occ, {"translation": [], "rotation": []})
        cell["translation"].append(float(e[:, 0].mean()))
        cell["rotation"].append(float(e[:, 1].mean()))
    out = {}
    for method, levels in table.items():
        out[method] = {
            occ: {k: float(np.mean(v)) for k, v in cell.items()} for occ, cell in sorted(levels.items())
        }
        for name, (lo, hi) in OCCLUSION_BUCKETS.items():
            sel = [v for occ, v in out[method].items() if isinstance(occ, int) and lo <= occ <= hi]
            if sel:
                out[method][name] = {
                    k: float(np.mean([v[k] for v in sel])) for k in ("translation", "rotation")
                }
    return out


def render_tracking(table: dict, baseline: str = "rgb_only") -> str:
    cols = sorted({k for m in table.values() for k in m if isinstance(k, int)}) + list(OCCLUSION_BUCKETS)
    lines = ["tracking error (translation mm / rotation deg) by occlusion %"]
    lines.append(f"{'method':24s} " + " ".join(f"{str(c):>15s}" for c in cols))
    for method in sorted(table):
        cells = []
        for c in cols:
            v = table[method].get(c)
            cells.append(f"{v['translation']:7.2f}/{v['rotation']:7.2f}" if v else f"{'-':>15s}")
        lines.append(f"{method:24s} " + " ".join(cells))
    if baseline in table:
        for method in sorted(m for m in table if m != baseline):
            cells = []
            for c in cols:
                b, t = table[baseline].get(c), table[method].get(c)
                if b and t:
                    cells.append(
                        f"{format_gain(b['translation'], t['translation'], True):>7s}/"
                        f"{format_gain(b['rotation'], t['rotation'], True):>7s}"
                    )
                else:
                    cells.append(f"{'-':>15s}")
            lines.append(f"{'gain ' + method:24s} " + " ".join(cells))
    return "\n".join(lines)


def detection_table(rows: Sequence[dict], iou_threshold: float = 0.5) -> dict[str, list[float]]:
    """mAP per (method, run) from rows of kind ``gt`` or ``det``."""
    grouped: dict[tuple[str, int], tuple[list, list]] = {}
    for i, row in enumerate(rows):
        try:
            key = (row["method"], int(row.get("run", 0)))
            box = metrics.DetectionBox(
                int(row["class_id"]), *map(float, row["box"]), confidence=row.get("confidence"),
                image_id=str(row.get("image_id", "")),
            )
            kind = row["kind"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"detection record {i + 1}: {exc}") from exc
        dets, gts = grouped.setdefault(key, ([], []))
        if kind == "gt":
            gts.append(box)
        elif kind == "det":
            dets.append(box)
        else:
            raise CliError(f"detection record {i + 1}: kind must be 'gt' or 'det'")
    out: dict[str, list[float]] = {}
    for (method, run), (dets, gts) in sorted(grouped.items()):
        out.setdefault(method, []).append(metrics.map_at_iou(dets, gts, iou_threshold))
    return out


def render_detection(table: dict[str, list[float]], alpha: float, baseline: str = "rgb_only") -> str:
    lines = [f"detection mAP@0.5 (mean over runs; * = significant at alpha {alpha:g})"]
    for method in sorted(table):
        lines.append(f"{method:24s} {np.mean(table[method]):.4f}  n={len(table[method])}")
    if baseline in table:
        b = table[baseline]
        for method in sorted(m for m in table if m != baseline):
            t = table[method]
            gain = format_gain(float(np.mean(b)), float(np.mean(t)))
            if len(b) > 1 and len(t) > 1:
                rep = wmw_test(t, b, alpha)
                lines.append(f"gain {method:19s} {gain}  p={rep.p_value:.4f}{' *' if rep.significant else ''}")
            else:
                lines.append(f"gain {method:19s} {gain}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    alpha = 0.05 if args.alpha is None else args.alpha
    printed = False
    if args.tracking:
        print(render_tracking(tracking_table(_jsonl(Path(args.tracking)))))
        printed = True
    if args.detection:
        print(render_detection(detection_table(_jsonl(Path(args.detection))), alpha))
        printed = True
    if args.results or not printed:
        results_dir = Path(args.results or _out_dir(args.out))
        path = results_dir / RESULTS_FILE
        if not path.exists():
            raise CliError(f"no results found in {results_dir}")
        results = read_results(path)
        if not results:
            raise CliError(f"no results found in {results_dir}")
        print(render_comparisons(results, alpha))
    return 0


def plot_names(results: Sequence[RunResult]) -> list[str]:
    exps = sorted({r.experiment for r in results})
    return [f"{_slug(e)}_{kind}.png" for e in exps for kind in ("bars", "curves")]


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in s)


def cmd_plot(args) -> int:
    results_dir = Path(args.results or _out_dir(args.out))
    path = results_dir / RESULTS_FILE
    results = read_results(path) if path.exists() else []
    if not results:
        log.warning("no results in %s; nothing plotted", results_dir)
        print(f"warning: no results in {results_dir}; nothing plotted", file=sys.stderr)
        return 0
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dest = Path(args.plot_dir) if args.plot_dir else results_dir / "plots"
    try:
        dest.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot write plots to {dest}: {exc}") from exc
    if not os.access(dest, os.W_OK):
        raise CliError(f"cannot write plots to {dest}")
    curves_path = results_dir / CURVES_FILE
    curves = _jsonl(curves_path) if curves_path.exists() and curves_path.stat().st_size else []
    task = _infer_task(results)
    metric = primary_metric(task)
    written = []
    for exp in sorted({r.experiment for r in results}):
        runs: dict[str, list[RunResult]] = {}
        for r in results:
            if r.experiment == exp and metric in r.metrics:
                runs.setdefault(r.method, []).append(r)
        names = sorted(runs)
        fig, ax = plt.subplots(figsize=(8, 4))
        aggs = [aggregate_runs(runs[n], metric) for n in names]
        ax.bar(range(len(names)), [a.mean for a in aggs], yerr=[a.std for a in aggs], capsize=3)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel(metric)
        ax.set_title(exp)
        fig.tight_layout()
        target = dest / f"{_slug(exp)}_bars.png"
        fig.savefig(target, dpi=100)
        plt.close(fig)
        written.append(target)

        fig, ax = plt.subplots(figsize=(6, 4))
        for c in curves:
            pts = np.asarray(c["curve"], float)
            if len(pts):
                ax.plot(pts[:, 0], pts[:, 1], lw=0.8, label=f"{c['method']}/{c['seed']}")
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        if curves:
            ax.legend(fontsize=5, ncol=2)
        fig.tight_layout()
        target = dest / f"{_slug(exp)}_curves.png"
        fig.savefig(target, dpi=100)
        plt.close(fig)
        written.append(target)
    for t in written:
        print(t)
    return 0


def cmd_generate(args) -> int:
    """Write a synthetic dataset container from a YAML dataset spec."""
    raw = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    raw = raw or {}
    kind = raw.pop("task", "classification")
    if kind == "classification":
        spec = _build(SynthClassTaskSpec, raw, "dataset")
        path = save_classification_dataset(generate_classification_dataset(spec), spec, args.dest)
    elif kind == "dehazing":
        spec = _build(SynthDehazeTaskSpec, raw, "dataset")
        path = save_dehaze_dataset(generate_dehaze_dataset(spec), spec, args.dest)
    else:
        raise CliError(f"unknown dataset task {kind!r}")
    print(path)
    return 0


def _out_dir(value: str | None) -> Path:
    if value:
        return Path(value)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path("runs")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inputdrop", description="Input Dropout experiment runner")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="train the configured method matrix")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    run.add_argument("--seed", type=int, help="master seed (overrides the config)")
    run.add_argument("--alpha", type=float)
    run.add_argument("--jobs", type=int, default=1)
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="comparison tables from stored results")
    rep.add_argument("results", nargs="?", help="results directory")
    rep.add_argument("--out", help="alias for the results directory")
    rep.add_argument("--alpha", type=float)
    rep.add_argument("--tracking", help="per-frame pose JSONL")
    rep.add_argument("--detection", help="detection boxes JSONL")
    rep.set_defaults(func=cmd_report)

    plot = sub.add_parser("plot", help="bar and training-curve images")
    plot.add_argument("results", nargs="?")
    plot.add_argument("--out", help="alias for the results directory")
    plot.add_argument("--plot-dir", help="destination directory (default <results>/plots)")
    plot.set_defaults(func=cmd_plot)

    gen = sub.add_parser("generate", help="write a synthetic dataset container")
    gen.add_argument("dest")
    gen.add_argument("--config", help="YAML dataset spec (task: classification|dehazing plus spec fields)")
    gen.set_defaults(func=cmd_generate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "alpha", None) is not None and not 0 < args.alpha < 1:
        print("error: --alpha must lie in (0, 1)", file=sys.stderr)
        return 2
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
