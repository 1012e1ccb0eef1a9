"""Deterministic FaaS backend driven by parametric performance curves.

A :class:`FunctionModel` gives the noise-free truth for one function: the
memory floor below which it runs out of memory, and an execution time that
grows with the payload and shrinks with memory until a speedup cap. The
:class:`SimBackend` wraps those curves with lognormal noise, cold starts and
billing so it can stand in for a real provider.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Mapping, Optional

import numpy as np

from .domain import (
    MEM_MAX,
    MEM_MIN,
    CostModel,
    FunctionError,
    InvocationRecord,
    SLOConstraints,
    as_payload,
    billed_ms,
    compute_cost,
)
from .errors import DimensionMismatch, MemoryOutOfRange, SchemaError, UnknownFunction

OOM_ABORT_MS = 10
DEFAULT_KEEP_ALIVE = 100


@dataclass(frozen=True)
class FunctionModel:
    name: str
    payload_dims: int
    mem_base: float
    mem_per_unit: float
    mem_exp: float
    work_base: float
    work_exp: float
    ref_memory: float = 1769.0
    max_speedup: float = 1.7
    noise_sigma: float = 0.05
    cold_start_ms: tuple = (250.0, 50.0)
    timeout_ms: float = 900_000.0

    def __post_init__(self):
        if self.payload_dims < 1:
            raise SchemaError("payload_dims must be >= 1")
        if self.mem_base < 0 or self.mem_per_unit < 0:
            raise SchemaError("memory curve coefficients must be >= 0")
        if self.work_base <= 0 or self.mem_exp <= 0 or self.work_exp <= 0:
            raise SchemaError("work_base and exponents must be > 0")
        if self.ref_memory <= 0 or self.max_speedup < 1:
            raise SchemaError("ref_memory must be > 0 and max_speedup >= 1")
        if self.noise_sigma < 0:
            raise SchemaError("noise_sigma must be >= 0")
        mean, jitter = self.cold_start_ms
        if not 0 <= jitter < mean:
            raise SchemaError("cold start jitter must be in [0, mean)")
        if self.timeout_ms <= 0:
            raise SchemaError("timeout_ms must be > 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "FunctionModel":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown FunctionModel fields: {sorted(unknown)}")
        d = dict(d)
        if "cold_start_ms" in d:
            d["cold_start_ms"] = tuple(float(v) for v in d["cold_start_ms"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cold_start_ms"] = list(self.cold_start_ms)
        return d


def _check_dims(model: FunctionModel, payload) -> tuple:
    payload = as_payload(payload)
    if len(payload) != model.payload_dims:
        raise DimensionMismatch(
            f"{model.name} expects {model.payload_dims} payload component(s), got {len(payload)}"
        )
    return payload


def payload_magnitude(payload) -> float:
    """Geometric mean of the payload components."""
    if len(payload) == 1:
        return float(payload[0])
    if any(v == 0 for v in payload):
        return 0.0
    return math.exp(math.fsum(math.log(v) for v in payload) / len(payload))


def required_memory(model: FunctionModel, payload) -> float:
    """Smallest memory (MB) the function can run in for this payload."""
    payload = _check_dims(model, payload)
    return model.mem_base + model.mem_per_unit * payload_magnitude(payload) ** model.mem_exp


def work(model: FunctionModel, payload) -> float:
    """Execution time in ms at ``ref_memory``."""
    payload = _check_dims(model, payload)
    return model.work_base * payload_magnitude(payload) ** model.work_exp


def speedup(model: FunctionModel, memory: float) -> float:
    return min(memory / model.ref_memory, model.max_speedup)


def ground_truth_duration(model: FunctionModel, payload, memory: float) -> float:
    """Noise-free warm execution time in ms.

    Linear in memory up to ``ref_memory * max_speedup``, flat beyond. The
    memory floor is not checked here.
    """
    return work(model, payload) / speedup(model, memory)


class InstancePool:
    """Warm instances per memory size, expiring after ``keep_alive`` ticks."""

    def __init__(self, keep_alive: int = DEFAULT_KEEP_ALIVE):
        if keep_alive < 0:
            raise ValueError("keep_alive must be >= 0")
        self.keep_alive = keep_alive
        self._idle: dict = {}  # memory -> list of last-used ticks

    def expire(self, now: int) -> None:
        for mem in list(self._idle):
            alive = [t for t in self._idle[mem] if now - t <= self.keep_alive]
            if alive:
                self._idle[mem] = alive
            else:
                del self._idle[mem]

    def has_warm(self, memory: int, now: Optional[int] = None) -> bool:
        if now is not None:
            self.expire(now)
        return bool(self._idle.get(memory))

    def acquire(self, memory: int, now: int) -> bool:
        """Take a warm instance if one exists; returns True when warm."""
        self.expire(now)
        idle = self._idle.get(memory)
        if not idle:
            return False
        idle.pop()
        if not idle:
            del self._idle[memory]
        return True

    def release(self, memory: int, now: int) -> None:
        self._idle.setdefault(memory, []).append(now)

    def counts(self) -> dict:
        return {m: len(v) for m, v in sorted(self._idle.items())}


def invoke(
    model: FunctionModel,
    payload,
    memory: int,
    pool: InstancePool,
    rng_seed: int,
    counter: int,
    cost_model: CostModel = CostModel(),
    request_id: Optional[str] = None,
) -> InvocationRecord:
    """Execute one simulated invocation and return its record.

    Randomness (duration noise, init time) comes from a generator keyed by
    ``(rng_seed, counter)`` so a replay of the same call sequence is exact.
    Only successful runs leave a warm instance behind.
    """
    payload = _check_dims(model, payload)
    if isinstance(memory, bool) or int(memory) != memory:
        raise MemoryOutOfRange(f"memory must be a whole number of MB, got {memory!r}")
    memory = int(memory)
    if not MEM_MIN <= memory <= MEM_MAX:
        raise MemoryOutOfRange(f"memory {memory} outside [{MEM_MIN}, {MEM_MAX}]")

    rng = np.random.default_rng([rng_seed, counter])
    noise = float(rng.lognormal(0.0, model.noise_sigma)) if model.noise_sigma > 0 else 1.0
    init_mean, init_jitter = model.cold_start_ms
    init_draw = float(rng.uniform(init_mean - init_jitter, init_mean + init_jitter))

    warm = pool.acquire(memory, counter)
    init_duration = 0.0 if warm else init_draw
    need = required_memory(model, payload)

    if memory < need:
        error = FunctionError.OOM
        billed = OOM_ABORT_MS
        used = float(memory)
    else:
        duration = ground_truth_duration(model, payload, memory) * noise
        used = need
        if duration > model.timeout_ms:
            error = FunctionError.TIMEOUT
            duration = model.timeout_ms
        else:
            error = FunctionError.NONE
            pool.release(memory, counter)
        billed = billed_ms(duration + init_duration)

    cost, gb_s = compute_cost(billed, memory, cost_model)
    return InvocationRecord(
        request_id=request_id or f"{model.name}-{counter:08d}",
        payload=payload,
        memory_size=memory,
        memory_used=used,
        memory_utilisation=used / memory,
        billed_duration=billed,
        billed_gb_s=gb_s,
        cost_usd=cost,
        cold_start=not warm,
        init_duration=init_duration,
        function_error=error,
        timestamp=counter,
    )


class SimBackend:
    """Serialized simulated provider hosting several function models.

    Every invocation passes through one lock and takes the next tick of a
    global counter, which doubles as the record timestamp and the noise key.
    """

    def __init__(self, models, seed: int = 0, keep_alive: int = DEFAULT_KEEP_ALIVE,
                 cost_model: CostModel = CostModel()):
        if isinstance(models, FunctionModel):
            models = [models]
        if isinstance(models, Mapping):
            models = list(models.values())
        self.models = {m.name: m for m in models}
        self.seed = seed
        self.cost_model = cost_model
        self.keep_alive = keep_alive
        self._pools = {name: InstancePool(keep_alive) for name in self.models}
        self._counter = 0
        self._lock = threading.Lock()

    def model(self, function: str) -> FunctionModel:
        try:
            return self.models[function]
        except KeyError:
            raise UnknownFunction(f"no function named {function!r}") from None

    def has_warm(self, function: str, memory: int) -> bool:
        with self._lock:
            return self._pools[self.model(function).name].has_warm(memory, self._counter)

    def invoke(self, function: str, payload, memory: int) -> InvocationRecord:
        model = self.model(function)
        with self._lock:
            record = invoke(model, payload, memory, self._pools[function], self.seed,
                            self._counter, self.cost_model)
            self._counter += 1
        return record


def optimal_config_oracle(
    model: FunctionModel,
    payload,
    constraints: SLOConstraints,
    memory_step: int = 1,
    mem_min: int = MEM_MIN,
    mem_max: int = MEM_MAX,
    cost_model: CostModel = CostModel(),
) -> Optional[int]:
    """Lowest grid memory whose noise-free warm run meets D, B and succeeds.

    Returns None when no memory on the grid qualifies.
    """
    payload = _check_dims(model, payload)
    need = required_memory(model, payload)
    for memory in range(mem_min, mem_max + 1, memory_step):
        if memory < need:
            continue
        duration = ground_truth_duration(model, payload, memory)
        if duration > model.timeout_ms or duration > constraints.deadline_ms:
            continue
        if compute_cost(billed_ms(duration), memory, cost_model).cost_usd > constraints.budget_usd:
            continue
        return memory
    return None


def meets_slo_noise_free(model: FunctionModel, payload, memory: int, deadline_ms: float) -> bool:
    """True when a warm, noise-free run at ``memory`` succeeds within the deadline."""
    if memory < required_memory(model, payload):
        return False
    duration = ground_truth_duration(model, payload, memory)
    return duration <= model.timeout_ms and duration <= deadline_ms


def load_models(path) -> dict:
    """Read FunctionModels from a JSON file holding a list of objects."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    return {m.name: m for m in (FunctionModel.from_dict(d) for d in data)}


def preset_models() -> dict:
    text = resources.files(__package__).joinpath("presets.json").read_text(encoding="utf-8")
    return {m.name: m for m in (FunctionModel.from_dict(d) for d in json.loads(text))}


def preset(name: str) -> FunctionModel:
    models = preset_models()
    try:
        return models[name]
    except KeyError:
        raise UnknownFunction(f"unknown preset {name!r}; choose from {sorted(models)}") from None
