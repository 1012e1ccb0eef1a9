"""Stream execution for each strategy, run logs and comparison reports.

A run log is JSON lines: a header object, then one entry per payload. The
entry carries the chosen memory, the full invocation record and whether a
warm, noise-free run at that memory would have met the deadline. Logs hold
no wall-clock data, so equal inputs give equal bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .domain import MEM_MAX, MEM_MIN, SLOConstraints, as_payload
from .errors import SchemaError
from .forest import Forest
from .manager import ManagerConfig, ResourceManager
from .sim import FunctionModel, SimBackend, meets_slo_noise_free, optimal_config_oracle

LOG_FORMAT = "memfigless-log/1"
STATIC_MAX = "static-max"
STATIC_DEFAULT = "static-default"
ORACLE = "exhaustive-oracle"
MEMFIGLESS = "memfigless"
STRATEGIES = (STATIC_MAX, STATIC_DEFAULT, ORACLE, MEMFIGLESS)


@dataclass
class RunLog:
    header: dict
    entries: list

    @property
    def strategy(self) -> str:
        return self.header["strategy"]

    @property
    def payloads(self) -> list:
        return [tuple(e["payload"]) for e in self.entries]

    def dumps(self) -> str:
        lines = [json.dumps(self.header, sort_keys=True)]
        lines += [json.dumps(e, sort_keys=True) for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "RunLog":
        with open(path, encoding="utf-8") as fh:
            lines = [line for line in fh if line.strip()]
        if not lines:
            raise SchemaError(f"{path}: empty log")
        header = json.loads(lines[0])
        if header.get("format") != LOG_FORMAT:
            raise SchemaError(f"{path}: not a run log (format={header.get('format')!r})")
        return cls(header, [json.loads(line) for line in lines[1:]])


@dataclass(frozen=True)
class Totals:
    invocations: int
    cumulative_memory_mb: int
    cumulative_cost_usd: float
    slo_noise_free_rate: float
    slo_observed_rate: float
    fallback_rate: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def text(self) -> str:
        return "\n".join([
            f"invocations            {self.invocations}",
            f"cumulative memory MB   {self.cumulative_memory_mb}",
            f"cumulative cost USD    {self.cumulative_cost_usd:.8e}",
            f"SLO met (noise-free)   {100 * self.slo_noise_free_rate:.1f}%",
            f"SLO met (observed)     {100 * self.slo_observed_rate:.1f}%",
            f"fallback rate          {100 * self.fallback_rate:.1f}%",
        ])


def totals(log: RunLog) -> Totals:
    n = len(log.entries)
    if n == 0:
        return Totals(0, 0, 0.0, 0.0, 0.0, 0.0)
    return Totals(
        invocations=n,
        cumulative_memory_mb=sum(int(e["memory"]) for e in log.entries),
        cumulative_cost_usd=math.fsum(e["record"]["cost_usd"] for e in log.entries if e["record"]),
        slo_noise_free_rate=sum(bool(e["slo_noise_free"]) for e in log.entries) / n,
        slo_observed_rate=sum(bool(e["slo_observed"]) for e in log.entries) / n,
        fallback_rate=sum(bool(e["fallback"]) for e in log.entries) / n,
    )


def _entry(index, payload, memory, fallback, record, model, constraints, selection=None,
           placement=None, error="") -> dict:
    observed = (record is not None and record.succeeded
                and record.billed_duration <= constraints.deadline_ms)
    return {
        "index": index,
        "payload": list(payload),
        "memory": int(memory),
        "fallback": bool(fallback),
        "placement": placement,
        "slo_noise_free": meets_slo_noise_free(model, payload, memory, constraints.deadline_ms),
        "slo_observed": bool(observed),
        "record": None if record is None else record.to_dict(),
        "selection": selection,
        "error": error,
    }


def run_strategy(
    strategy: str,
    model: FunctionModel,
    payloads: Sequence,
    constraints: SLOConstraints,
    seed: int = 0,
    forest: Optional[Forest] = None,
    config: Optional[ManagerConfig] = None,
    mem_step: int = 1,
) -> RunLog:
    """Feed ``payloads`` to a fresh simulated backend under one strategy."""
    if strategy not in STRATEGIES:
        raise SchemaError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    payloads = [as_payload(p) for p in payloads]
    backend = SimBackend([model], seed=seed)
    header = {
        "format": LOG_FORMAT,
        "strategy": strategy,
        "function": model.name,
        "seed": seed,
        "constraints": constraints.to_dict(),
        "mem_step": mem_step,
    }
    entries = []
    if strategy == MEMFIGLESS:
        if forest is None or config is None:
            raise SchemaError("the memfigless strategy needs a model and a manager config")
        manager = ResourceManager(model.name, forest, backend, config)
        for i, p in enumerate(payloads):
            res = manager.handle_invocation(p)
            sel = None if res.selection is None else res.selection.to_dict()
            entries.append(_entry(i, p, res.memory, res.fallback, res.record, model, constraints,
                                  sel, res.placement, res.error))
        header["retrains"] = [ev.to_dict() for ev in manager.retrains]
        return RunLog(header, entries)

    for i, p in enumerate(payloads):
        fallback = False
        if strategy == STATIC_MAX:
            memory = MEM_MAX
        elif strategy == STATIC_DEFAULT:
            memory = MEM_MIN
        else:
            memory = optimal_config_oracle(model, p, constraints, mem_step)
            if memory is None:
                memory, fallback = MEM_MAX, True
        record = backend.invoke(model.name, p, memory)
        entries.append(_entry(i, p, memory, fallback, record, model, constraints))
    return RunLog(header, entries)


# --- reports ----------------------------------------------------------------


def _labels(logs: Sequence[RunLog]) -> list:
    seen: dict = {}
    out = []
    for log in logs:
        k = seen.get(log.strategy, 0) + 1
        seen[log.strategy] = k
        out.append(log.strategy if k == 1 else f"{log.strategy}#{k}")
    return out


def check_same_stream(logs: Sequence[RunLog]) -> None:
    """Raise SchemaError unless every log covers the same function and payloads."""
    if not logs:
        raise SchemaError("no logs to report on")
    ref = logs[0]
    for log in logs[1:]:
        if log.header.get("function") != ref.header.get("function"):
            raise SchemaError("logs are for different functions")
        if log.payloads != ref.payloads:
            raise SchemaError(f"payload stream of {log.strategy} differs from {ref.strategy}")


def savings(a: float, b: float) -> Optional[float]:
    """Percent saved by ``a`` relative to ``b``; None when ``b`` is zero."""
    if b == 0:
        return None
    return 100.0 * (1.0 - a / b)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_tables(logs: Sequence[RunLog]) -> tuple:
    """Summary and per-payload detail as lists of rows (first row is the header)."""
    check_same_stream(logs)
    labels = _labels(logs)
    tots = [totals(log) for log in logs]
    head = ["strategy", "invocations", "cumulative_memory_mb", "cumulative_cost_usd",
            "slo_noise_free_pct", "slo_observed_pct", "fallback_pct"]
    head += [f"memory_savings_vs_{b}_pct" for b in labels]
    head += [f"cost_savings_vs_{b}_pct" for b in labels]
    summary = [head]
    for i, (label, t) in enumerate(zip(labels, tots)):
        row = [label, t.invocations, t.cumulative_memory_mb, t.cumulative_cost_usd,
               100 * t.slo_noise_free_rate, 100 * t.slo_observed_rate, 100 * t.fallback_rate]
        row += [None if i == j else savings(t.cumulative_memory_mb, o.cumulative_memory_mb)
                for j, o in enumerate(tots)]
        row += [None if i == j else savings(t.cumulative_cost_usd, o.cumulative_cost_usd)
                for j, o in enumerate(tots)]
        summary.append(row)
    detail = [["index", "payload"] + [f"{b}_memory_mb" for b in labels]
              + [f"{b}_slo_noise_free" for b in labels]]
    for k, entry in enumerate(logs[0].entries):
        row = [k, ";".join(repr(v) for v in entry["payload"])]
        row += [log.entries[k]["memory"] for log in logs]
        row += [log.entries[k]["slo_noise_free"] for log in logs]
        detail.append(row)
    return summary, detail


def to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def to_text(rows) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.6g}" if abs(v) < 1e-3 and v != 0 else f"{v:.2f}"
        return "" if v is None else str(v)

    cells = [[cell(v) for v in row] for row in rows]
    widths = [max(len(r[c]) for r in cells) for c in range(len(cells[0]))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)).rstrip() for r in cells)
