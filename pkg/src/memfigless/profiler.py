"""Offline profiling: sweep payloads x memory sizes and keep every record."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .domain import (
    MEM_MAX,
    MEM_MIN,
    FunctionError,
    as_payload,
    dumps_record,
    loads_record,
)
from .errors import DimensionMismatch, EmptyDataset, EmptyGrid, SchemaError

DATASET_FORMAT = "memfigless-dataset/1"


def _range_values(lo: float, hi: float, step: float) -> list:
    if step <= 0:
        raise SchemaError("grid step must be > 0")
    if lo > hi:
        raise SchemaError(f"grid min {lo} exceeds max {hi}")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [lo + i * step for i in range(count)]


def expand_payload_grid(grid) -> list:
    """Turn a payload grid description into a list of payload tuples.

    Accepts either an explicit list of payloads (scalars or sequences) or a
    list of per-dimension ``{"min", "max", "step"}`` ranges, whose Cartesian
    product is taken. A single range mapping is treated as one dimension.
    """
    if isinstance(grid, Mapping):
        grid = [grid]
    grid = list(grid)
    if not grid:
        raise EmptyGrid("payload grid is empty")
    if all(isinstance(d, Mapping) for d in grid):
        axes = [_range_values(float(d["min"]), float(d["max"]), float(d["step"])) for d in grid]
        return [tuple(p) for p in itertools.product(*axes)]
    return [as_payload(p) for p in grid]


@dataclass(frozen=True)
class ProfilePlan:
    function: str
    payload_grid: tuple
    memory_min: int = MEM_MIN
    memory_max: int = MEM_MAX
    memory_step: int = 128
    iterations: int = 3
    seed: int = 0

    def __post_init__(self):
        grid = tuple(as_payload(p) for p in self.payload_grid)
        if not grid:
            raise EmptyGrid("payload grid is empty")
        if len({len(p) for p in grid}) != 1:
            raise SchemaError("all payloads in a plan must share one dimension")
        object.__setattr__(self, "payload_grid", grid)
        if self.memory_step <= 0 or self.memory_min > self.memory_max:
            raise SchemaError("memory grid needs min <= max and step > 0")
        if self.memory_min < MEM_MIN or self.memory_max > MEM_MAX:
            raise SchemaError(f"memory grid must stay within [{MEM_MIN}, {MEM_MAX}]")
        if self.iterations < 1:
            raise SchemaError("iterations must be >= 1")

    @property
    def memory_grid(self) -> list:
        return list(range(self.memory_min, self.memory_max + 1, self.memory_step))

    @property
    def payload_dims(self) -> int:
        return len(self.payload_grid[0])

    def to_dict(self) -> dict:
        return {
            "function": self.function,
            "payload_grid": [list(p) for p in self.payload_grid],
            "memory_grid": {"min": self.memory_min, "max": self.memory_max, "step": self.memory_step},
            "iterations": self.iterations,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProfilePlan":
        allowed = {"function", "payload_grid", "memory_grid", "iterations", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise SchemaError(f"unknown plan fields: {sorted(unknown)}")
        if "function" not in d or "payload_grid" not in d:
            raise SchemaError("plan needs 'function' and 'payload_grid'")
        mem = d.get("memory_grid", {})
        return cls(
            function=d["function"],
            payload_grid=tuple(expand_payload_grid(d["payload_grid"])),
            memory_min=int(mem.get("min", MEM_MIN)),
            memory_max=int(mem.get("max", MEM_MAX)),
            memory_step=int(mem.get("step", 128)),
            iterations=int(d.get("iterations", 3)),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "ProfilePlan":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def default_payload_grid(payload_dims: int) -> list:
    """50 payloads spanning [10, 10000] regardless of dimension.

    One dimension uses min 10, step 200. Two dimensions use a 10 x 5 product
    so the record count matches the one-dimensional case.
    """
    if payload_dims == 1:
        return [{"min": 10, "max": 10000, "step": 200}]
    if payload_dims == 2:
        return [{"min": 10, "max": 10000, "step": 1110}, {"min": 10, "max": 10000, "step": 2497.5}]
    raise SchemaError("no default payload grid for more than two dimensions")


def default_plan(function: str, payload_dims: int, seed: int = 0, iterations: int = 3) -> ProfilePlan:
    return ProfilePlan(
        function=function,
        payload_grid=tuple(expand_payload_grid(default_payload_grid(payload_dims))),
        iterations=iterations,
        seed=seed,
    )


def expand_plan(plan: ProfilePlan) -> list:
    """(payload, memory) cells in payload-major order, each repeated in place."""
    mems = plan.memory_grid
    if not mems or not plan.payload_grid:
        raise EmptyGrid("plan expands to no cells")
    return [
        (payload, memory)
        for payload in plan.payload_grid
        for memory in mems
        for _ in range(plan.iterations)
    ]


@dataclass
class Dataset:
    function: str
    records: list
    provenance: str = ""
    plan: Optional[dict] = None

    def __len__(self):
        return len(self.records)

    @property
    def payload_dims(self) -> int:
        return len(self.records[0].payload) if self.records else 0

    def save(self, path) -> None:
        header = {"format": DATASET_FORMAT, "function": self.function,
                  "provenance": self.provenance, "plan": self.plan}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, sort_keys=True))
            fh.write("\n")
            for rec in self.records:
                fh.write(dumps_record(rec))
                fh.write("\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, encoding="utf-8") as fh:
            lines = [line for line in fh if line.strip()]
        if not lines:
            raise SchemaError(f"{path}: empty dataset file")
        header = json.loads(lines[0])
        if header.get("format") != DATASET_FORMAT:
            raise SchemaError(f"{path}: not a dataset file (format={header.get('format')!r})")
        records = [loads_record(line) for line in lines[1:]]
        if len({len(r.payload) for r in records}) > 1:
            raise SchemaError(f"{path}: records disagree on payload dimension")
        return cls(header["function"], records, header.get("provenance", ""), header.get("plan"))


def run_profile(plan: ProfilePlan, backend) -> Dataset:
    """Invoke every cell of the plan against ``backend`` and collect records.

    Failed runs (OOM, timeout) stay in the dataset; they are the negative
    examples for the success output.
    """
    model = backend.model(plan.function)
    if model.payload_dims != plan.payload_dims:
        raise DimensionMismatch(
            f"plan payloads have {plan.payload_dims} component(s), {model.name} expects {model.payload_dims}"
        )
    records = [backend.invoke(plan.function, payload, memory) for payload, memory in expand_plan(plan)]
    return Dataset(plan.function, records, plan.digest(), plan.to_dict())


@dataclass(frozen=True)
class ProfileSummary:
    function: str
    n_records: int
    n_success: int
    duration_mean: float
    duration_min: float
    duration_max: float
    cost_mean: float
    cost_min: float
    cost_max: float
    oom_rate: dict = field(default_factory=dict)  # memory -> fraction of OOM records

    def table(self) -> str:
        lines = [
            f"function        {self.function}",
            f"records         {self.n_records} ({self.n_success} successful)",
            f"duration ms     mean {self.duration_mean:.1f}  min {self.duration_min:.0f}  max {self.duration_max:.0f}",
            f"cost USD        mean {self.cost_mean:.3e}  min {self.cost_min:.3e}  max {self.cost_max:.3e}",
            "memory MB  oom rate",
        ]
        lines += [f"{m:>9}  {r:.3f}" for m, r in sorted(self.oom_rate.items())]
        return "\n".join(lines)


def summarize(dataset: Dataset) -> ProfileSummary:
    """Duration and cost statistics over successful records, OOM rate per memory."""
    ok = [r for r in dataset.records if r.succeeded]
    if not ok:
        raise EmptyDataset(f"{dataset.function}: no successful records")
    durations = np.array([r.billed_duration for r in ok], dtype=float)
    costs = np.array([r.cost_usd for r in ok], dtype=float)
    per_mem: dict = {}
    for r in dataset.records:
        total, oom = per_mem.get(r.memory_size, (0, 0))
        per_mem[r.memory_size] = (total + 1, oom + (r.function_error is FunctionError.OOM))
    return ProfileSummary(
        function=dataset.function,
        n_records=len(dataset.records),
        n_success=len(ok),
        duration_mean=math.fsum(durations) / len(ok),
        duration_min=float(durations.min()),
        duration_max=float(durations.max()),
        cost_mean=math.fsum(costs) / len(ok),
        cost_min=float(costs.min()),
        cost_max=float(costs.max()),
        oom_rate={m: oom / total for m, (total, oom) in sorted(per_mem.items())},
    )


def payload_bounds(payloads: Sequence) -> list:
    """Per-dimension (min, max) over a collection of payloads."""
    arr = np.asarray([list(p) for p in payloads], dtype=float)
    return [(float(lo), float(hi)) for lo, hi in zip(arr.min(axis=0), arr.max(axis=0))]


def sample_payload_stream(bounds: Sequence, count: int, seed: int = 0) -> list:
    """Uniform random payloads inside per-dimension bounds, rounded to integers."""
    rng = np.random.default_rng([seed, 0x5EED])
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    draws = np.round(rng.uniform(lo, hi, size=(count, len(bounds))))
    return [tuple(float(v) for v in row) for row in draws]
