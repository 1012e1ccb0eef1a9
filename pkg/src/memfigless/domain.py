"""Core records, billing and SLO types.

Everything here is immutable once constructed. Records persist as one JSON
object per line; a CSV export exists for report tooling.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, fields
from typing import Iterable, Mapping, NamedTuple, Sequence

from .errors import EmptyDataset, SchemaError

MEM_MIN = 128
MEM_MAX = 3008

Payload = tuple  # tuple[float, ...]; one entry per payload dimension


class FunctionError(str, enum.Enum):
    NONE = "none"
    OOM = "oom"
    TIMEOUT = "timeout"


def as_payload(values) -> tuple:
    """Normalize a scalar or sequence into a payload tuple of floats."""
    if isinstance(values, (int, float)):
        values = (values,)
    payload = tuple(float(v) for v in values)
    if not payload:
        raise SchemaError("payload must have at least one component")
    for v in payload:
        if not math.isfinite(v) or v < 0:
            raise SchemaError(f"payload components must be finite and >= 0, got {v!r}")
    return payload


@dataclass(frozen=True)
class CostModel:
    """Per-GB-second price plus a flat per-invocation charge (USD)."""

    price_per_gb_s: float = 0.0000166667
    beta: float = 0.0000002

    def __post_init__(self):
        if self.price_per_gb_s < 0 or self.beta < 0:
            raise SchemaError("prices must be non-negative")


class Charge(NamedTuple):
    cost_usd: float
    billed_gb_s: float


def billed_gb_seconds(billed_duration: float, memory: float) -> float:
    return (billed_duration / 1000.0) * (memory / 1024.0)


def compute_cost(billed_duration: float, memory: float, model: CostModel = CostModel()) -> Charge:
    """Cost of one invocation: GB-seconds times unit price, plus the flat charge.

    ``billed_duration`` is in milliseconds and ``memory`` in MB. The GB-s
    intermediate is returned alongside the cost.
    """
    if billed_duration < 0:
        raise ValueError("billed_duration must be >= 0")
    gb_s = billed_gb_seconds(billed_duration, memory)
    return Charge(gb_s * model.price_per_gb_s + model.beta, gb_s)


def billed_ms(duration_ms: float) -> int:
    """Round a raw duration up to whole milliseconds."""
    return int(math.ceil(duration_ms))


@dataclass(frozen=True)
class SLOConstraints:
    """Deadline D (ms), run-time budget B (USD) and objective weights."""

    deadline_ms: float
    budget_usd: float
    w_cost: float = 0.5
    w_time: float = 0.5

    def __post_init__(self):
        # 0 is accepted: it is a legitimate "reject everything" request.
        if not (self.deadline_ms >= 0) or not (self.budget_usd >= 0):
            raise SchemaError("deadline and budget must be non-negative")
        if self.w_cost < 0 or self.w_time < 0:
            raise SchemaError("weights must be non-negative")
        if abs(self.w_cost + self.w_time - 1.0) > 1e-9:
            raise SchemaError(f"weights must sum to 1, got {self.w_cost} + {self.w_time}")

    @property
    def weights(self) -> tuple:
        return (self.w_cost, self.w_time)

    def to_dict(self) -> dict:
        return {
            "deadline_ms": self.deadline_ms,
            "budget_usd": self.budget_usd,
            "w_cost": self.w_cost,
            "w_time": self.w_time,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SLOConstraints":
        return cls(float(d["deadline_ms"]), float(d["budget_usd"]),
                   float(d.get("w_cost", 0.5)), float(d.get("w_time", 0.5)))


@dataclass(frozen=True)
class InvocationRecord:
    request_id: str
    payload: tuple
    memory_size: int
    memory_used: float
    memory_utilisation: float
    billed_duration: int
    billed_gb_s: float
    cost_usd: float
    cold_start: bool
    init_duration: float
    function_error: FunctionError
    timestamp: int

    @property
    def succeeded(self) -> bool:
        return self.function_error is FunctionError.NONE

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["payload"] = list(self.payload)
        d["function_error"] = self.function_error.value
        return d


RECORD_FIELDS = tuple(f.name for f in fields(InvocationRecord))


def _require_int(raw, name):
    v = raw[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise SchemaError(f"{name} must be an integer, got {v!r}")
    return int(v)


def _require_float(raw, name):
    v = raw[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SchemaError(f"{name} must be a finite number, got {v!r}")
    return float(v)


def validate_record(raw: Mapping) -> InvocationRecord:
    """Build an :class:`InvocationRecord` from a mapping, enforcing invariants.

    ``memory_utilisation`` and ``billed_gb_s`` are recomputed from
    ``memory_used``, ``memory_size`` and ``billed_duration``; whatever the
    mapping carries for them is ignored.
    """
    unknown = set(raw) - set(RECORD_FIELDS)
    if unknown:
        raise SchemaError(f"unknown fields: {sorted(unknown)}")
    required = set(RECORD_FIELDS) - {"memory_utilisation", "billed_gb_s"}
    missing = sorted(required - set(raw))
    if missing:
        raise SchemaError(f"missing fields: {missing}")

    request_id = raw["request_id"]
    if not isinstance(request_id, str) or not request_id:
        raise SchemaError("request_id must be a non-empty string")
    payload = as_payload(raw["payload"])

    memory_size = _require_int(raw, "memory_size")
    if not MEM_MIN <= memory_size <= MEM_MAX:
        raise SchemaError(f"memory_size {memory_size} outside [{MEM_MIN}, {MEM_MAX}]")
    try:
        error = FunctionError(raw["function_error"])
    except ValueError:
        raise SchemaError(f"function_error must be one of none/oom/timeout, got {raw['function_error']!r}")

    memory_used = _require_float(raw, "memory_used")
    if memory_used < 0:
        raise SchemaError("memory_used must be >= 0")
    utilisation = memory_used / memory_size
    if utilisation > 1.0 and error is not FunctionError.OOM:
        raise SchemaError(f"memory_utilisation {utilisation:.4f} > 1 without an oom error")

    billed_duration = _require_int(raw, "billed_duration")
    if billed_duration < 0:
        raise SchemaError("billed_duration must be >= 0")
    cost_usd = _require_float(raw, "cost_usd")
    if cost_usd < 0:
        raise SchemaError("cost_usd must be >= 0")

    cold_start = raw["cold_start"]
    if not isinstance(cold_start, bool):
        raise SchemaError("cold_start must be a boolean")
    init_duration = _require_float(raw, "init_duration")
    if init_duration < 0 or (init_duration > 0) != cold_start:
        raise SchemaError("init_duration must be > 0 exactly when cold_start is true")

    timestamp = _require_int(raw, "timestamp")
    if timestamp < 0:
        raise SchemaError("timestamp must be >= 0")

    return InvocationRecord(
        request_id=request_id,
        payload=payload,
        memory_size=memory_size,
        memory_used=memory_used,
        memory_utilisation=utilisation,
        billed_duration=billed_duration,
        billed_gb_s=billed_gb_seconds(billed_duration, memory_size),
        cost_usd=cost_usd,
        cold_start=cold_start,
        init_duration=init_duration,
        function_error=error,
        timestamp=timestamp,
    )


def dumps_record(record: InvocationRecord) -> str:
    return json.dumps(record.to_dict(), ensure_ascii=False)


def loads_record(line: str) -> InvocationRecord:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed record line: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError("record line must hold a JSON object")
    return validate_record(raw)


def write_records(path, records: Iterable[InvocationRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")


def read_records(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [loads_record(line) for line in fh if line.strip()]


def export_csv(path, records: Iterable[InvocationRecord]) -> None:
    """Tabular export; payload components are joined with ';'."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for rec in records:
            row = rec.to_dict()
            row["payload"] = ";".join(repr(v) for v in rec.payload)
            writer.writerow([row[name] for name in RECORD_FIELDS])


def derive_default_constraints(
    records: Sequence[InvocationRecord],
    slack: float = 1.0,
    weights: tuple = (0.5, 0.5),
) -> SLOConstraints:
    """Deadline and budget from the mean duration and cost of successful runs.

    Raises:
        EmptyDataset: no successful record is present.
    """
    ok = [r for r in records if r.succeeded]
    if not ok:
        raise EmptyDataset("no successful records to derive constraints from")
    mean_duration = math.fsum(r.billed_duration for r in ok) / len(ok)
    mean_cost = math.fsum(r.cost_usd for r in ok) / len(ok)
    return SLOConstraints(
        deadline_ms=slack * mean_duration,
        budget_usd=slack * mean_cost,
        w_cost=weights[0],
        w_time=weights[1],
    )
