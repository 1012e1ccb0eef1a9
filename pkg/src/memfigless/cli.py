"""Command-line driver: profile, train, run, baseline, report.

Every option can also be set through an environment variable named
``MEMFIGLESS_`` plus the upper-cased flag, for example
``MEMFIGLESS_DEADLINE_MS``.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional

import click

from .domain import SLOConstraints, derive_default_constraints
from .errors import MemfiglessError, ModelMissing, SchemaError
from .forest import dataset_arrays, load_model, save_model, train
from .manager import ManagerConfig
from .profiler import (
    Dataset,
    ProfilePlan,
    default_plan,
    payload_bounds,
    run_profile,
    sample_payload_stream,
    summarize,
)
from .runner import MEMFIGLESS, STRATEGIES, RunLog, report_tables, run_strategy, to_csv, to_text, totals
from .sim import SimBackend, load_models, preset_models

DEFAULT_SLACK = 1.5


class CliError(click.ClickException):
    exit_code = 2


def opt(*decls, **kw):
    """click.option with the MEMFIGLESS_<FLAG> environment variable attached."""
    long = next(d for d in decls if d.startswith("--"))
    kw.setdefault("envvar", "MEMFIGLESS_" + long[2:].replace("-", "_").upper())
    kw.setdefault("show_envvar", True)
    return click.option(*decls, **kw)


def _existing(**kw):
    return click.Path(exists=True, dir_okay=False, path_type=Path, **kw)


def _models(models_file: Optional[Path]) -> dict:
    return load_models(models_file) if models_file else preset_models()


def _function_model(name: str, models_file: Optional[Path]):
    models = _models(models_file)
    if name not in models:
        raise CliError(f"unknown function model {name!r}; available: {', '.join(sorted(models))}")
    return models[name]


def _load_forest(path: Path):
    forest = load_model(path)
    if "function" not in forest.metadata:
        raise ModelMissing(f"{path}: model carries no function metadata; retrain it with 'memfigless train'")
    return forest


def _constraints(base: Optional[dict], deadline, budget, w_cost, w_time) -> SLOConstraints:
    d = dict(base or {})
    if deadline is not None:
        d["deadline_ms"] = deadline
    if budget is not None:
        d["budget_usd"] = budget
    if w_cost is not None and w_time is None:
        w_time = 1.0 - w_cost
    if w_time is not None and w_cost is None:
        w_cost = 1.0 - w_time
    if w_cost is not None:
        d["w_cost"], d["w_time"] = w_cost, w_time
    d.setdefault("w_cost", 0.5)
    d.setdefault("w_time", 0.5)
    if "deadline_ms" not in d or "budget_usd" not in d:
        raise CliError("deadline and budget are needed: pass --model or --deadline-ms and --budget-usd")
    return SLOConstraints.from_dict(d)


def _read_stream(path: Path) -> list:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("payloads")
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a list of payloads or {{'payloads': [...]}}")
    return data


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _guard(fn):
    """Turn library and file errors into exit code 2 with a one-line message."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (MemfiglessError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            if isinstance(exc, click.ClickException):
                raise
            raise CliError(f"{type(exc).__name__}: {exc}") from exc

    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress to stderr (-vv for debug).")
def main(verbose: int) -> None:
    """Memory right-sizing for serverless functions on a simulated backend."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


@main.command("plan")
@opt("--preset", required=True, help="Function model name.")
@opt("--models", "models_file", type=_existing(), help="JSON file of function models instead of presets.")
@opt("--seed", type=int, default=0, show_default=True)
@opt("--iterations", type=int, default=3, show_default=True)
@opt("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@_guard
def cmd_plan(preset, models_file, seed, iterations, out):
    """Write the default profiling plan for a function."""
    model = _function_model(preset, models_file)
    plan = default_plan(model.name, model.payload_dims, seed=seed, iterations=iterations)
    plan.save(out)
    click.echo(f"plan for {model.name}: {len(plan.payload_grid)} payloads x "
               f"{len(plan.memory_grid)} memories x {plan.iterations} iterations -> {out}")


@main.command("profile")
@opt("--plan", "plan_file", type=_existing(), help="Profiling plan JSON (default grid when omitted).")
@opt("--preset", help="Function model to simulate (defaults to the plan's function).")
@opt("--models", "models_file", type=_existing(), help="JSON file of function models instead of presets.")
@opt("--seed", type=int, help="Backend seed (defaults to the plan's seed).")
@opt("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Dataset file to write.")
@_guard
def cmd_profile(plan_file, preset, models_file, seed, out):
    """Sweep payloads x memories on the simulator and save every record."""
    if plan_file is None and preset is None:
        raise CliError("pass --plan or --preset")
    if plan_file is not None:
        plan = ProfilePlan.load(plan_file)
        model = _function_model(preset or plan.function, models_file)
        if model.name != plan.function:
            raise CliError(f"plan profiles {plan.function!r} but --preset is {model.name!r}")
    else:
        model = _function_model(preset, models_file)
        plan = default_plan(model.name, model.payload_dims, seed=0 if seed is None else seed)
    backend = SimBackend([model], seed=plan.seed if seed is None else seed)
    dataset = run_profile(plan, backend)
    dataset.save(out)
    click.echo(summarize(dataset).table())
    click.echo(f"wrote {len(dataset)} records to {out}")


@main.command("train")
@opt("--dataset", type=_existing(), required=True)
@opt("--grid", "grid_file", type=_existing(), help="Hyperparameter grid JSON (default grid when omitted).")
@opt("--seed", type=int, default=0, show_default=True)
@opt("--k-folds", type=int, default=5, show_default=True)
@opt("--slack", type=float, default=DEFAULT_SLACK, show_default=True,
     help="Default deadline and budget are this multiple of the profiled means.")
@opt("--w-cost", type=float, help="Default cost weight stored with the model.")
@opt("--w-time", type=float, help="Default time weight stored with the model.")
@opt("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Model file to write.")
@_guard
def cmd_train(dataset, grid_file, seed, k_folds, slack, w_cost, w_time, out):
    """Tune and fit the forest on a profiling dataset."""
    data = Dataset.load(dataset)
    if not data.records:
        raise CliError(f"EmptyDataset: {dataset} holds no records")
    grid = None
    if grid_file is not None:
        with open(grid_file, encoding="utf-8") as fh:
            grid = json.load(fh)
    w_cost = 0.5 if w_cost is None and w_time is None else w_cost
    w_cost = 1.0 - w_time if w_cost is None else w_cost
    constraints = derive_default_constraints(data.records, slack, (w_cost, 1.0 - w_cost))
    X, Y = dataset_arrays(data.records)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # surfaced below from the report
        forest, report = train(X, Y, grid, k_folds, seed)
    for w in report.warnings:
        click.echo(f"warning: {w}", err=True)
    forest.metadata = {
        "function": data.function,
        "payload_dims": data.payload_dims,
        "payload_bounds": payload_bounds([r.payload for r in data.records]),
        "constraints": constraints.to_dict(),
        "slack": slack,
        "dataset_provenance": data.provenance,
        "train_report": report.to_dict(),
    }
    save_model(forest, out)
    click.echo(f"hyperparams  {report.hyperparams.to_dict()}")
    click.echo(report.table())
    click.echo(f"default constraints  deadline {constraints.deadline_ms:.1f} ms  "
               f"budget {constraints.budget_usd:.4e} USD")
    click.echo(f"wrote model to {out}")


@main.command("stream")
@opt("--model", "model_file", type=_existing(), required=True, help="Model whose payload bounds to sample.")
@opt("--count", type=int, default=50, show_default=True)
@opt("--seed", type=int, default=0, show_default=True)
@opt("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@_guard
def cmd_stream(model_file, count, seed, out):
    """Draw a payload stream uniformly inside the profiled bounds."""
    forest = _load_forest(model_file)
    payloads = sample_payload_stream(forest.metadata["payload_bounds"], count, seed)
    _write_text(out, json.dumps({"function": forest.metadata["function"],
                                 "payloads": [list(p) for p in payloads]}) + "\n")
    click.echo(f"wrote {count} payloads to {out}")


def _execute(strategy, model_file, preset, models_file, stream, seed, deadline_ms, budget_usd,
             w_cost, w_time, mem_step, tau, monitoring_window, retrain_window, retrain, out):
    forest = _load_forest(model_file) if model_file is not None else None
    meta = forest.metadata if forest is not None else {}
    name = preset or meta.get("function")
    if name is None:
        raise CliError("pass --preset or a --model that names its function")
    fmodel = _function_model(name, models_file)
    constraints = _constraints(meta.get("constraints"), deadline_ms, budget_usd, w_cost, w_time)
    config = None
    if strategy == MEMFIGLESS:
        if forest is None:
            raise ModelMissing("the memfigless strategy needs --model")
        config = ManagerConfig(
            constraints=constraints,
            payload_bounds=meta["payload_bounds"],
            monitoring_window=monitoring_window,
            retrain_window=retrain_window,
            success_threshold=tau,
            mem_step=mem_step,
            seed=seed,
            retrain=retrain,
        )
    log = run_strategy(strategy, fmodel, _read_stream(stream), constraints, seed, forest, config, mem_step)
    log.save(out)
    click.echo(f"strategy {strategy}  function {fmodel.name}")
    click.echo(totals(log).text())
    click.echo(f"wrote log to {out}")


def _run_options(fn):
    for decorator in reversed([
        opt("--model", "model_file", type=_existing(), help="Trained model file."),
        opt("--preset", help="Function model to simulate (defaults to the model's function)."),
        opt("--models", "models_file", type=_existing(), help="JSON file of function models instead of presets."),
        opt("--stream", type=_existing(), required=True, help="Payload stream JSON."),
        opt("--seed", type=int, default=0, show_default=True),
        opt("--deadline-ms", type=float, help="Override the model's deadline."),
        opt("--budget-usd", type=float, help="Override the model's budget."),
        opt("--w-cost", type=float, help="Cost weight (time weight is the complement)."),
        opt("--w-time", type=float, help="Time weight (cost weight is the complement)."),
        opt("--mem-step", type=click.IntRange(min=1), default=1, show_default=True),
        opt("--tau", type=click.FloatRange(0, 1), default=0.5, show_default=True,
            help="Success probability threshold."),
        opt("--monitoring-window", type=click.IntRange(min=1), default=200, show_default=True),
        opt("--retrain-window", type=click.IntRange(min=1), default=1000, show_default=True),
        opt("--retrain/--no-retrain", default=True, show_default=True),
        opt("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Run log to write."),
    ]):
        fn = decorator(fn)
    return fn


@main.command("run")
@_run_options
@_guard
def cmd_run(**kw):
    """Serve a payload stream through the resource manager."""
    if kw["model_file"] is None:
        raise CliError("ModelMissing: run needs --model")
    _execute(MEMFIGLESS, **kw)


@main.command("baseline")
@opt("--strategy", type=click.Choice(STRATEGIES), required=True)
@_run_options
@_guard
def cmd_baseline(strategy, **kw):
    """Serve a payload stream with a fixed or reference strategy."""
    _execute(strategy, **kw)


@main.command("report")
@click.argument("logs", nargs=-1, required=True, type=_existing())
@opt("--out", type=click.Path(file_okay=False, path_type=Path),
     help="Directory for summary.csv, detail.csv and report.txt.")
@_guard
def cmd_report(logs, out):
    """Compare run logs that served the same payload stream."""
    summary, detail = report_tables([RunLog.load(p) for p in logs])
    text = "summary\n" + to_text(summary) + "\n\ndetail\n" + to_text(detail) + "\n"
    click.echo(text, nl=False)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "summary.csv", to_csv(summary))
        _write_text(out / "detail.csv", to_csv(detail))
        _write_text(out / "report.txt", text)


if __name__ == "__main__":
    main()
