"""Online resource manager: predict, pick a memory, invoke, log, retrain.

One :class:`ResourceManager` serves one function. Each request is checked
against the payload range seen during profiling. In-range payloads go
through the optimizer, and everything else takes a fallback memory. The
chosen memory is invoked on the backend and the record is appended to a
:class:`MetricsStore`. After every ``monitoring_window`` new records the
forest is refitted on the most recent ``retrain_window`` records and
swapped in.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .domain import MEM_MAX, MEM_MIN, CostModel, InvocationRecord, SLOConstraints, as_payload
from .errors import DimensionMismatch, EmptyDataset, MemfiglessError, ModelMissing, SchemaError
from .forest import OUTPUT_NAMES, Forest, dataset_arrays, fit_forest, score, train
from .optimizer import DEFAULT_EPS_Z, DEFAULT_TAU, SelectionResult, enumerate_candidates, select_configuration

logger = logging.getLogger(__name__)

IN_RANGE = "in-range"
ABOVE = "above"
BELOW = "below"


@dataclass(frozen=True)
class ManagerConfig:
    constraints: SLOConstraints
    payload_bounds: tuple  # ((lo, hi), ...) per payload dimension
    monitoring_window: int = 200
    retrain_window: int = 1000
    fallback_memory: int = MEM_MAX
    success_threshold: float = DEFAULT_TAU
    eps: float = DEFAULT_EPS_Z
    mem_min: int = MEM_MIN
    mem_max: int = MEM_MAX
    mem_step: int = 1
    seed: int = 0
    retrain: bool = True
    retune: bool = False  # full grid search on retrain instead of reusing hyperparams
    cost_model: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.payload_bounds)
        if not bounds:
            raise SchemaError("payload bounds need at least one dimension")
        if any(lo > hi for lo, hi in bounds):
            raise SchemaError("payload bound min exceeds max")
        object.__setattr__(self, "payload_bounds", bounds)
        if self.monitoring_window < 1 or self.retrain_window < 1:
            raise SchemaError("monitoring and retrain windows must be >= 1")
        if not MEM_MIN <= self.fallback_memory <= MEM_MAX:
            raise SchemaError(f"fallback memory must be within [{MEM_MIN}, {MEM_MAX}]")
        if not 0.0 <= self.success_threshold <= 1.0:
            raise SchemaError("success threshold must be in [0, 1]")


class MetricsStore:
    """Append-only invocation log with recency queries."""

    def __init__(self, records: Sequence[InvocationRecord] = ()):
        self._records: list = []
        self._lock = threading.Lock()
        for r in records:
            self.append(r)

    def append(self, record: InvocationRecord) -> None:
        with self._lock:
            if self._records and record.timestamp < self._records[-1].timestamp:
                raise ValueError("records must arrive with non-decreasing timestamps")
            self._records.append(record)

    def window(self, size: int) -> list:
        """The last ``size`` records, oldest first."""
        if size < 1:
            raise ValueError("window size must be >= 1")
        with self._lock:
            return list(self._records[-size:])

    @property
    def records(self) -> list:
        with self._lock:
            return list(self._records)

    def __len__(self):
        with self._lock:
            return len(self._records)


def classify_payload(payload, bounds) -> str:
    """``above`` if any component exceeds its max, else ``below`` if any is under its min.

    Bounds are closed, so a payload sitting exactly on a bound is in range.
    """
    payload = as_payload(payload)
    if len(payload) != len(bounds):
        raise DimensionMismatch(f"payload has {len(payload)} component(s), bounds have {len(bounds)}")
    if any(v > hi for v, (_, hi) in zip(payload, bounds)):
        return ABOVE
    if any(v < lo for v, (lo, _) in zip(payload, bounds)):
        return BELOW
    return IN_RANGE


def fallback_config(payload, bounds, choose: Callable, fallback_memory: int = MEM_MAX) -> int:
    """Memory for a payload outside the profiled range.

    Above the range the function gets ``fallback_memory``. Below it, a
    configuration good for the smallest profiled payload is reused, so
    ``choose`` is called on that payload. It returns a memory, or None when
    nothing is feasible, in which case ``fallback_memory`` is used too.
    """
    where = classify_payload(payload, bounds)
    if where == ABOVE:
        return fallback_memory
    if where == BELOW:
        mem = choose(tuple(lo for lo, _ in bounds))
        return fallback_memory if mem is None else int(mem)
    raise ValueError("in-range payloads are handled by the optimizer, not the fallback")


def derive_retrain_seed(base_seed: int, retrain_count: int) -> int:
    return int(np.random.default_rng([base_seed, 0x7E7A, retrain_count]).integers(2**31 - 1))


@dataclass
class RetrainEvent:
    index: int
    n_records: int
    seed: int
    r2_before: dict  # old model scored on the retraining window
    ok: bool
    error: str = ""

    def to_dict(self) -> dict:
        return {"index": self.index, "n_records": self.n_records, "seed": self.seed,
                "r2_before": self.r2_before, "ok": self.ok, "error": self.error}


@dataclass
class ExecutionResult:
    record: Optional[InvocationRecord]
    selection: Optional[SelectionResult]
    fallback: bool
    memory: int
    placement: str  # in-range, above or below
    warm_available: bool
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "memory": self.memory,
            "fallback": self.fallback,
            "placement": self.placement,
            "warm_available": self.warm_available,
            "error": self.error,
            "record": None if self.record is None else self.record.to_dict(),
            "selection": None if self.selection is None else self.selection.to_dict(),
        }


def window_r2(forest: Forest, records) -> dict:
    """Per-output R2 of ``forest`` on ``records``; None where undefined."""
    X, Y = dataset_arrays(records)
    if len(records) < 2:
        return {name: None for name in OUTPUT_NAMES}
    return {name: s.r2 for name, s in zip(OUTPUT_NAMES, score(forest.predict(X), Y))}


def retrain_forest(records, current: Forest, seed: int, retune: bool = False) -> Forest:
    """Refit on ``records`` with the current hyperparameters (or a fresh search)."""
    if not records:
        raise EmptyDataset("no records to retrain on")
    X, Y = dataset_arrays(records)
    if retune:
        forest, _ = train(X, Y, seed=seed)
    else:
        forest = fit_forest(X, Y, current.hyperparams, seed)
    forest.output_names = current.output_names
    forest.metadata = dict(current.metadata)
    return forest


class ResourceManager:
    """Serves one function on a backend with a trained forest.

    ``handle_invocation`` is serialized. A retrain replaces the forest
    reference in one assignment under the model lock, and each request reads
    that reference once, so no request sees a half-updated model.
    """

    def __init__(self, function: str, forest: Optional[Forest], backend, config: ManagerConfig,
                 store: Optional[MetricsStore] = None):
        self.function = function
        self.backend = backend
        self.config = config
        self.store = store if store is not None else MetricsStore()
        self._forest = forest
        self._request_lock = threading.Lock()
        self._model_lock = threading.Lock()
        self._since_retrain = 0
        self.retrains: list = []

    @property
    def forest(self) -> Optional[Forest]:
        with self._model_lock:
            return self._forest

    def swap_model(self, forest: Forest) -> None:
        with self._model_lock:
            self._forest = forest

    def select(self, forest: Forest, payload) -> SelectionResult:
        cfg = self.config
        candidates = enumerate_candidates(forest, payload, cfg.mem_min, cfg.mem_max, cfg.mem_step,
                                          cfg.cost_model)
        return select_configuration(candidates, cfg.constraints, tau=cfg.success_threshold, eps=cfg.eps)

    def choose_memory(self, forest: Forest, payload) -> tuple:
        """``(memory, selection, fallback, placement)`` without invoking anything."""
        cfg = self.config
        placement = classify_payload(payload, cfg.payload_bounds)
        if placement == IN_RANGE:
            selection = self.select(forest, payload)
            if selection.chosen is not None:
                return selection.chosen.memory, selection, False, placement
            return cfg.fallback_memory, selection, True, placement

        def choose(p):
            chosen = self.select(forest, p).chosen
            return None if chosen is None else chosen.memory

        return fallback_config(payload, cfg.payload_bounds, choose, cfg.fallback_memory), None, True, placement

    def handle_invocation(self, payload) -> ExecutionResult:
        payload = as_payload(payload)
        with self._request_lock:
            forest = self.forest
            if forest is None:
                raise ModelMissing(f"no trained model for {self.function!r}")
            memory, selection, fallback, placement = self.choose_memory(forest, payload)
            warm = bool(self.backend.has_warm(self.function, memory))
            try:
                record = self.backend.invoke(self.function, payload, memory)
            except MemfiglessError as exc:
                logger.error("invocation of %s at %d MB failed: %s", self.function, memory, exc)
                return ExecutionResult(None, selection, fallback, memory, placement, warm, str(exc))
            self.store.append(record)
            self._since_retrain += 1
            self.maybe_retrain()
            return ExecutionResult(record, selection, fallback, memory, placement, warm)

    def maybe_retrain(self) -> Optional[Forest]:
        """Refit once ``monitoring_window`` records have arrived since the last refit.

        Returns the new forest, or None when nothing happened or the refit
        failed. A failure is logged and the old model stays active.
        """
        cfg = self.config
        if not cfg.retrain or self._since_retrain < cfg.monitoring_window:
            return None
        self._since_retrain = 0
        current = self.forest
        window = self.store.window(cfg.retrain_window)
        index = len(self.retrains)
        seed = derive_retrain_seed(cfg.seed, index)
        try:
            r2 = window_r2(current, window)
            new = retrain_forest(window, current, seed, cfg.retune)
        except (MemfiglessError, ValueError) as exc:
            logger.warning("retrain %d of %s failed, keeping the old model: %s", index, self.function, exc)
            self.retrains.append(RetrainEvent(index, len(window), seed, {}, False, str(exc)))
            return None
        self.swap_model(new)
        self.retrains.append(RetrainEvent(index, len(window), seed, r2, True))
        logger.info("retrain %d of %s on %d records", index, self.function, len(window))
        return new
