"""Online selection of a memory size from forest predictions.

The pipeline is: predict every candidate memory, drop the ones that break
the deadline, budget or success constraints, keep the Pareto front over
(cost, duration), score the front with a weighted sum of min-max normalized
objectives and take the lowest memory among the best-scoring members.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import MEM_MAX, MEM_MIN, CostModel, SLOConstraints, compute_cost, billed_gb_seconds
from .forest import Forest, record_features

DEADLINE = "deadline"
BUDGET = "budget"
SUCCESS = "success"
CONSTRAINT_NAMES = (DEADLINE, BUDGET, SUCCESS)

DEFAULT_TAU = 0.5
DEFAULT_EPS_Z = 1e-9


@dataclass(frozen=True)
class Candidate:
    memory: int
    predicted_duration_ms: float
    predicted_cost_usd: float
    predicted_success: float
    predicted_memory_used: float = 0.0

    @property
    def objectives(self) -> tuple:
        """(cost, duration), both minimized."""
        return (self.predicted_cost_usd, self.predicted_duration_ms)

    def to_dict(self) -> dict:
        return {
            "memory": self.memory,
            "predicted_duration_ms": self.predicted_duration_ms,
            "predicted_cost_usd": self.predicted_cost_usd,
            "predicted_success": self.predicted_success,
            "predicted_memory_used": self.predicted_memory_used,
        }


def make_candidate(memory: int, duration: float, success: float, memory_used: float = 0.0,
                   cost_model: CostModel = CostModel()) -> Candidate:
    cost = compute_cost(duration, memory, cost_model).cost_usd
    return Candidate(int(memory), float(duration), cost, float(success), float(memory_used))


def memory_grid(mem_min: int = MEM_MIN, mem_max: int = MEM_MAX, step: int = 1) -> np.ndarray:
    if step < 1:
        raise ValueError("memory step must be >= 1")
    if mem_min > mem_max:
        raise ValueError("mem_min must not exceed mem_max")
    return np.arange(mem_min, mem_max + 1, step)


def enumerate_candidates(forest: Forest, payload, mem_min: int = MEM_MIN, mem_max: int = MEM_MAX,
                         step_mb: int = 1, cost_model: CostModel = CostModel()) -> list:
    """One candidate per grid memory, ordered by memory."""
    mems = memory_grid(mem_min, mem_max, step_mb)
    X = np.array([record_features(m, payload) for m in mems], dtype=float)
    pred = forest.predict(X)
    duration = np.maximum(pred[:, 0], 0.0)
    cost = billed_gb_seconds(duration, mems.astype(float)) * cost_model.price_per_gb_s + cost_model.beta
    return [
        Candidate(int(m), float(d), float(c), float(s), float(u))
        for m, d, c, s, u in zip(mems, duration, cost, pred[:, 2], pred[:, 1])
    ]


def violations(c: Candidate, constraints: SLOConstraints, tau: float = DEFAULT_TAU) -> tuple:
    """Names of the constraints this candidate breaks (empty when feasible)."""
    out = []
    if not c.predicted_duration_ms <= constraints.deadline_ms:
        out.append(DEADLINE)
    if not c.predicted_cost_usd <= constraints.budget_usd:
        out.append(BUDGET)
    if not c.predicted_success >= tau:
        out.append(SUCCESS)
    return tuple(out)


@dataclass
class FilterOutcome:
    feasible: list
    rejected: list  # (candidate, violated constraint names)
    counts: dict


def filter_feasible(candidates: Sequence[Candidate], constraints: SLOConstraints,
                    tau: float = DEFAULT_TAU) -> FilterOutcome:
    """Split candidates into feasible and rejected, preserving order.

    ``counts`` tallies rejections per constraint; a candidate breaking two
    constraints counts under both.
    """
    feasible, rejected = [], []
    counts = dict.fromkeys(CONSTRAINT_NAMES, 0)
    for c in candidates:
        bad = violations(c, constraints, tau)
        if bad:
            rejected.append((c, bad))
            for name in bad:
                counts[name] += 1
        else:
            feasible.append(c)
    return FilterOutcome(feasible, rejected, counts)


def _front_key(c: Candidate):
    return (c.predicted_cost_usd, c.predicted_duration_ms, c.memory)


def pareto_front(candidates: Sequence[Candidate]) -> list:
    """Non-dominated candidates under (cost, duration) minimization.

    Sort by cost then duration and sweep, keeping a candidate when it is
    faster than everything cheaper, or when it repeats the objectives of the
    last kept point. Output is in sweep order.
    """
    front = []
    best_duration = np.inf
    for c in sorted(candidates, key=_front_key):
        if c.predicted_duration_ms < best_duration:
            front.append(c)
            best_duration = c.predicted_duration_ms
        elif front and c.objectives == front[-1].objectives:
            front.append(c)
    return front


def dominates(u: Candidate, v: Candidate) -> bool:
    return (u.predicted_cost_usd <= v.predicted_cost_usd
            and u.predicted_duration_ms <= v.predicted_duration_ms
            and u.objectives != v.objectives)


def scalarize(front: Sequence[Candidate], weights: tuple) -> list:
    """Weighted sum of min-max normalized cost and duration for each member."""
    w_cost, w_time = weights
    if not front:
        return []

    def normalized(values):
        values = np.asarray(values, dtype=float)
        lo, hi = values.min(), values.max()
        if hi == lo:
            return np.zeros_like(values)
        return (values - lo) / (hi - lo)

    cost = normalized([c.predicted_cost_usd for c in front])
    time = normalized([c.predicted_duration_ms for c in front])
    return [float(z) for z in w_cost * cost + w_time * time]


@dataclass
class SelectionResult:
    chosen: Optional[Candidate]
    pareto_front: list
    scores: list
    n_candidates: int
    feasible_count: int
    rejections: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.chosen is not None

    def to_dict(self, include_front: bool = False) -> dict:
        d = {
            "chosen": None if self.chosen is None else self.chosen.to_dict(),
            "n_candidates": self.n_candidates,
            "feasible_count": self.feasible_count,
            "front_size": len(self.pareto_front),
            "rejections": dict(self.rejections),
        }
        if include_front:
            d["pareto_front"] = [dict(c.to_dict(), z=z) for c, z in zip(self.pareto_front, self.scores)]
        return d


def select_configuration(candidates: Sequence[Candidate], constraints: SLOConstraints,
                         weights: Optional[tuple] = None, tau: float = DEFAULT_TAU,
                         eps: float = DEFAULT_EPS_Z) -> SelectionResult:
    """Pick the memory to invoke; ``chosen`` is None when nothing is feasible.

    Weights default to the ones carried by ``constraints``.
    """
    weights = constraints.weights if weights is None else weights
    outcome = filter_feasible(candidates, constraints, tau)
    front = pareto_front(outcome.feasible)
    z = scalarize(front, weights)
    chosen = None
    if front:
        z_min = min(z)
        chosen = min((c for c, zi in zip(front, z) if zi <= z_min + eps), key=lambda c: c.memory)
    return SelectionResult(chosen, front, z, len(candidates), len(outcome.feasible), outcome.counts)
