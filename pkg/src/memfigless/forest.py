"""Multi-output random forest regression written from scratch.

Features are ``[memory_mb, payload_1, ..., payload_k]`` and targets are
``[billed_duration, memory_used, success]``. Trees are greedy CART with a
multi-output criterion: the summed squared error of every output after
standardizing it by its global training spread, so the millisecond-scale
duration does not drown out the 0/1 success column.

Each tree draws its bootstrap sample from a generator keyed by
``(seed, tree_index)``. A forest of 50 trees is therefore exactly the first
50 trees of a 200-tree forest with the same seed, a fact the grid search
uses to avoid refitting.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import struct
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _cart
from .errors import (
    CorruptModel,
    DegenerateVariance,
    DimensionMismatch,
    EmptyGrid,
    EmptySamples,
    TooFewSamples,
    VersionMismatch,
)

logger = logging.getLogger(__name__)

OUTPUT_NAMES = ("billed_duration", "memory_used", "success")
MODEL_MAGIC = b"MFLFOREST\n"
MODEL_VERSION = 1

DEFAULT_GRID = {
    "n_estimators": [50, 100, 200],
    "max_depth": [8, 16, None],
    "min_samples_split": [2, 8],
    "min_samples_leaf": [1, 4],
}


@dataclass(frozen=True)
class Hyperparams:
    n_estimators: int = 100
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_features: Optional[int] = None  # None means every feature
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be >= 1 or None")

    def to_dict(self) -> dict:
        return asdict(self)


# --- dataset plumbing -------------------------------------------------------


def record_features(memory: float, payload) -> list:
    return [float(memory), *map(float, payload)]


def dataset_arrays(records) -> tuple:
    """Feature and target matrices for a list of invocation records."""
    if not records:
        raise EmptySamples("no records")
    X = np.array([record_features(r.memory_size, r.payload) for r in records], dtype=float)
    Y = np.array(
        [[r.billed_duration, r.memory_used, 1.0 if r.succeeded else 0.0] for r in records],
        dtype=float,
    )
    return X, Y


def _as_2d(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be 1- or 2-dimensional")
    return np.ascontiguousarray(a)


class _Prepared:
    """Training arrays in canonical row order with per-feature value ranks."""

    def __init__(self, X, Y):
        X = _as_2d(X, "X")
        Y = _as_2d(Y, "Y")
        if X.shape[0] == 0:
            raise EmptySamples("cannot fit on zero samples")
        if X.shape[0] != Y.shape[0]:
            raise DimensionMismatch("X and Y disagree on sample count")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("features and targets must be finite")
        # Row order must not influence the fit (summation order included).
        keys = np.concatenate([X, Y], axis=1)
        order = np.lexsort(keys.T[::-1])
        self.X = np.ascontiguousarray(X[order])
        self.Y = np.ascontiguousarray(Y[order])
        n, k = self.X.shape
        uniqs = [np.unique(self.X[:, f]) for f in range(k)]
        width = max(len(u) for u in uniqs)
        self.uniq = np.zeros((k, width))
        self.codes = np.empty((n, k), np.int64)
        for f, u in enumerate(uniqs):
            self.uniq[f, : len(u)] = u
            self.codes[:, f] = np.searchsorted(u, self.X[:, f])
        mean = self.Y.mean(axis=0)
        std = self.Y.std(axis=0)
        scale = np.where(std > 0, std, 1.0)
        self.Z = np.ascontiguousarray(np.where(std > 0, (self.Y - mean) / scale, 0.0))


# --- trees and forests ------------------------------------------------------


@dataclass
class RegressionTree:
    """One CART tree in flat-array form (node 0 is the root)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    n_samples: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature == _cart.LEAF

    @property
    def n_leaves(self) -> int:
        return int(self.is_leaf.sum())

    @property
    def bias(self) -> np.ndarray:
        """Mean target over the tree's training sample (root value)."""
        return self.value[0]

    def apply(self, X) -> np.ndarray:
        X = _as_2d(X, "X")
        roots = np.zeros(1, np.int64)
        return _cart.apply(roots, self.feature, self.threshold, self.left, self.right,
                           self.depth, X, -1)[:, 0]

    def predict(self, X) -> np.ndarray:
        X = _as_2d(X, "X")
        roots = np.zeros(1, np.int64)
        return _cart.predict(roots, self.feature, self.threshold, self.left, self.right,
                             self.depth, self.value, X, 1, -1)


def fit_tree(X, Y, params: Hyperparams = Hyperparams(bootstrap=False), rng=None,
             sample_weight=None) -> RegressionTree:
    """Grow a single CART tree on ``(X, Y)``.

    ``params.bootstrap`` and ``n_estimators`` are ignored here; pass
    ``sample_weight`` (integer multiplicities) to train on a resample.
    """
    data = _Prepared(X, Y)
    if sample_weight is None:
        w = np.ones(len(data.X))
    else:
        # weights follow the caller's row order; map into canonical order
        raw = _as_2d(X, "X")
        keys = np.concatenate([raw, _as_2d(Y, "Y")], axis=1)
        w = np.asarray(sample_weight, dtype=float)[np.lexsort(keys.T[::-1])]
    rng = np.random.default_rng(rng)
    return _grow(data, w, params, int(rng.integers(0, 2**31 - 1)))


def _grow(data: _Prepared, w: np.ndarray, params: Hyperparams, feat_seed: int) -> RegressionTree:
    samples = np.flatnonzero(w > 0).astype(np.int64)
    if len(samples) == 0:
        raise EmptySamples("no samples with positive weight")
    k = data.X.shape[1]
    max_features = k if params.max_features is None else min(params.max_features, k)
    out = _cart.build_tree(
        data.codes, data.uniq, data.Z, data.Y, np.ascontiguousarray(w, dtype=float), samples,
        -1 if params.max_depth is None else params.max_depth,
        float(params.min_samples_split), float(params.min_samples_leaf),
        max_features, feat_seed,
    )
    return RegressionTree(*out)


def _tree_inputs(n: int, params: Hyperparams, seed: int, index: int) -> tuple:
    rng = np.random.default_rng([seed, index])
    if params.bootstrap:
        w = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)
    else:
        w = np.ones(n)
    return w, int(rng.integers(0, 2**31 - 1))


@dataclass
class Forest:
    """Bagged regression trees stored as concatenated node arrays."""

    roots: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    n_samples: np.ndarray
    value: np.ndarray
    n_features: int
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0
    output_names: tuple = OUTPUT_NAMES
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_trees(cls, trees: Sequence[RegressionTree], n_features: int, **kw) -> "Forest":
        if not trees:
            raise EmptySamples("a forest needs at least one tree")
        sizes = np.array([t.n_nodes for t in trees])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)

        def shift(arr, off):
            return np.where(arr == _cart.LEAF, _cart.LEAF, arr + off).astype(np.int32)

        return cls(
            roots=offsets,
            feature=np.concatenate([t.feature for t in trees]).astype(np.int32),
            threshold=np.concatenate([t.threshold for t in trees]),
            left=np.concatenate([shift(t.left, o) for t, o in zip(trees, offsets)]),
            right=np.concatenate([shift(t.right, o) for t, o in zip(trees, offsets)]),
            depth=np.concatenate([t.depth for t in trees]).astype(np.int32),
            n_samples=np.concatenate([t.n_samples for t in trees]),
            value=np.ascontiguousarray(np.concatenate([t.value for t in trees])),
            n_features=n_features,
            **kw,
        )

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    @property
    def n_outputs(self) -> int:
        return self.value.shape[1]

    def tree(self, s: int) -> RegressionTree:
        lo = int(self.roots[s])
        hi = int(self.roots[s + 1]) if s + 1 < self.n_trees else len(self.feature)

        def unshift(arr):
            return np.where(arr == _cart.LEAF, _cart.LEAF, arr - lo).astype(np.int32)

        return RegressionTree(
            self.feature[lo:hi].copy(), self.threshold[lo:hi].copy(),
            unshift(self.left[lo:hi]), unshift(self.right[lo:hi]),
            self.depth[lo:hi].copy(), self.n_samples[lo:hi].copy(), self.value[lo:hi].copy(),
        )

    @property
    def trees(self) -> list:
        return [self.tree(s) for s in range(self.n_trees)]

    @property
    def biases(self) -> np.ndarray:
        """Root value of every tree, shape (trees, outputs)."""
        return self.value[self.roots]

    def _check_X(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        return np.ascontiguousarray(X)

    def predict(self, X, n_trees: Optional[int] = None, max_depth: Optional[int] = None) -> np.ndarray:
        """Tree-averaged prediction, shape (rows, outputs).

        ``n_trees`` restricts the average to the leading trees and
        ``max_depth`` stops each descent early; together they reproduce a
        smaller or shallower forest fitted with the same seed.
        """
        X = self._check_X(X)
        n_trees = self.n_trees if n_trees is None else n_trees
        if not 1 <= n_trees <= self.n_trees:
            raise ValueError(f"n_trees must be in [1, {self.n_trees}]")
        return _cart.predict(self.roots, self.feature, self.threshold, self.left, self.right,
                             self.depth, self.value, X, n_trees,
                             -1 if max_depth is None else max_depth)

    def predict_with_contributions(self, X) -> tuple:
        """Return ``(bias, contributions, prediction)``.

        ``bias`` has shape (rows, outputs), ``contributions`` (rows,
        features, outputs). ``bias + contributions.sum(axis=1)`` equals the
        prediction up to rounding.
        """
        X = self._check_X(X)
        return _cart.contributions(self.roots, self.feature, self.threshold, self.left,
                                   self.right, self.value, X, self.n_features)

    def apply(self, X) -> np.ndarray:
        X = self._check_X(X)
        return _cart.apply(self.roots, self.feature, self.threshold, self.left, self.right,
                           self.depth, X, -1)

    # persistence ------------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "n_trees": self.n_trees,
            "n_nodes": len(self.feature),
            "n_features": self.n_features,
            "n_outputs": self.n_outputs,
            "hyperparams": self.hyperparams.to_dict(),
            "seed": self.seed,
            "output_names": list(self.output_names),
            "metadata": self.metadata,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [
            MODEL_MAGIC,
            struct.pack("<HI", MODEL_VERSION, len(head)),
            head,
            self.roots.astype("<i8").tobytes(),
            self.feature.astype("<i4").tobytes(),
            self.threshold.astype("<f8").tobytes(),
            self.left.astype("<i4").tobytes(),
            self.right.astype("<i4").tobytes(),
            self.depth.astype("<i4").tobytes(),
            self.n_samples.astype("<f8").tobytes(),
            self.value.astype("<f8").tobytes(),
        ]
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Forest":
        m = len(MODEL_MAGIC)
        if len(blob) < m + 10 or blob[:m] != MODEL_MAGIC:
            raise CorruptModel("not a forest model file")
        version, head_len = struct.unpack_from("<HI", blob, m)
        if version != MODEL_VERSION:
            raise VersionMismatch(f"model version {version}, this build reads {MODEL_VERSION}")
        if len(blob) < m + 6 + head_len + 4:
            raise CorruptModel("model file truncated")
        body, crc = blob[:-4], struct.unpack("<I", blob[-4:])[0]
        if zlib.crc32(body) != crc:
            raise CorruptModel("model checksum mismatch")
        try:
            header = json.loads(blob[m + 6 : m + 6 + head_len].decode("utf-8"))
            pos = m + 6 + head_len
            n_nodes, n_out = header["n_nodes"], header["n_outputs"]

            def take(dtype, count):
                nonlocal pos
                arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).copy()
                pos += arr.nbytes
                return arr

            roots = take("<i8", header["n_trees"])
            arrays = dict(
                feature=take("<i4", n_nodes),
                threshold=take("<f8", n_nodes),
                left=take("<i4", n_nodes),
                right=take("<i4", n_nodes),
                depth=take("<i4", n_nodes),
                n_samples=take("<f8", n_nodes),
                value=take("<f8", n_nodes * n_out).reshape(n_nodes, n_out),
            )
            if pos != len(body):
                raise CorruptModel("model file has trailing or missing bytes")
        except (KeyError, ValueError, UnicodeDecodeError) as exc:
            raise CorruptModel(f"unreadable model: {exc}") from exc
        return cls(
            roots=roots.astype(np.int64),
            n_features=header["n_features"],
            hyperparams=Hyperparams(**header["hyperparams"]),
            seed=header["seed"],
            output_names=tuple(header["output_names"]),
            metadata=header["metadata"],
            **{k: v.astype(np.int32) if v.dtype.kind == "i" else v for k, v in arrays.items()},
        )


def save_model(forest: Forest, path) -> None:
    with open(path, "wb") as fh:
        fh.write(forest.to_bytes())


def load_model(path) -> Forest:
    with open(path, "rb") as fh:
        return Forest.from_bytes(fh.read())


def _fit_prepared(data: _Prepared, params: Hyperparams, seed: int, n_jobs: int = 1) -> Forest:
    n = len(data.X)

    def one(s):
        w, feat_seed = _tree_inputs(n, params, seed, s)
        return _grow(data, w, params, feat_seed)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            trees = list(pool.map(one, range(params.n_estimators)))
    else:
        trees = [one(s) for s in range(params.n_estimators)]
    return Forest.from_trees(trees, data.X.shape[1], hyperparams=params, seed=seed)


def fit_forest(X, Y, params: Hyperparams = Hyperparams(), seed: int = 0, n_jobs: int = 1) -> Forest:
    """Train ``params.n_estimators`` trees; the result depends only on the data and seed."""
    return _fit_prepared(_Prepared(X, Y), params, seed, n_jobs)


# --- scoring ---------------------------------------------------------------


def r2_score(pred, actual) -> float:
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateVariance("actual values have zero variance")
    return 1.0 - float(np.sum((actual - pred) ** 2)) / ss_tot


def mean_absolute_error(pred, actual) -> float:
    return float(np.mean(np.abs(np.asarray(pred, float) - np.asarray(actual, float))))


@dataclass(frozen=True)
class OutputScore:
    r2: Optional[float]  # None when the actual values are constant
    mae: float


def score(predictions, actuals) -> list:
    """Per-output R² and MAE for matching (rows, outputs) arrays."""
    P = _as_2d(predictions, "predictions")
    A = _as_2d(actuals, "actuals")
    if P.shape != A.shape:
        raise DimensionMismatch("predictions and actuals differ in shape")
    if P.shape[0] < 2:
        raise TooFewSamples("scoring needs at least two rows")
    out = []
    for o in range(P.shape[1]):
        try:
            r2 = r2_score(P[:, o], A[:, o])
        except DegenerateVariance:
            r2 = None
        out.append(OutputScore(r2, mean_absolute_error(P[:, o], A[:, o])))
    return out


# --- tuning ----------------------------------------------------------------

_GRID_KEYS = ("n_estimators", "max_depth", "min_samples_split", "min_samples_leaf",
              "max_features", "bootstrap")


def expand_grid(grid: dict) -> list:
    """All Hyperparams combinations, in a fixed key order."""
    unknown = set(grid) - set(_GRID_KEYS)
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    defaults = Hyperparams()
    axes = []
    for key in _GRID_KEYS:
        values = list(grid.get(key, [getattr(defaults, key)]))
        if not values:
            raise EmptyGrid(f"grid axis {key!r} is empty")
        axes.append(values)
    return [Hyperparams(**dict(zip(_GRID_KEYS, combo))) for combo in itertools.product(*axes)]


def kfold_indices(n: int, k: int, seed: int) -> list:
    if k < 2:
        raise ValueError("k_folds must be >= 2")
    if n < k:
        raise TooFewSamples(f"{n} samples cannot fill {k} folds")
    perm = np.random.default_rng([seed, 0xF01D]).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def _normalized_mae(pred, actual, scale) -> float:
    return float(np.mean(np.mean(np.abs(pred - actual), axis=0) / scale))


@dataclass(frozen=True)
class SearchEntry:
    params: Hyperparams
    score: float
    fold_scores: tuple


@dataclass
class SearchResult:
    best: Hyperparams
    forest: Forest
    entries: list


def _depth_key(d):
    return math.inf if d is None else d


def _cv_scores(X, Y, points, folds, seed, shortcut=True) -> dict:
    """Mean-over-outputs normalized MAE per grid point per fold.

    With ``shortcut`` on, grid points differing only in tree count and depth
    share one fit per fold: the widest, deepest forest is grown once and the
    others are read off it by truncation. Feature subsampling disables the
    shortcut because depth limits would change the draw sequence.
    """
    std = Y.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    n_feat = X.shape[1]
    scores = {i: [] for i in range(len(points))}
    groups: dict = {}
    for i, p in enumerate(points):
        exact = p.max_features is None or p.max_features >= n_feat
        key = (p.min_samples_split, p.min_samples_leaf, p.max_features, p.bootstrap)
        if shortcut and exact:
            groups.setdefault(key, []).append(i)
        else:
            groups[("solo", i)] = [i]
    for members in groups.values():
        params = [points[i] for i in members]
        widest = max(p.n_estimators for p in params)
        depths = [p.max_depth for p in params]
        deepest = None if any(d is None for d in depths) else max(depths)
        fit_params = Hyperparams(widest, deepest, params[0].min_samples_split,
                                 params[0].min_samples_leaf, params[0].max_features,
                                 params[0].bootstrap)
        for f, val_idx in enumerate(folds):
            train_idx = np.setdiff1d(np.arange(len(X)), val_idx)
            forest = _fit_prepared(_Prepared(X[train_idx], Y[train_idx]), fit_params, seed)
            for i, p in zip(members, params):
                pred = forest.predict(X[val_idx], n_trees=p.n_estimators, max_depth=p.max_depth)
                scores[i].append(_normalized_mae(pred, Y[val_idx], scale))
    return scores


def grid_search(X, Y, grid: Optional[dict] = None, k_folds: int = 5, seed: int = 0,
                shortcut: bool = True) -> SearchResult:
    """K-fold tuning over a hyperparameter grid, then a refit on all rows.

    The score of a grid point is the fold average of the mean over outputs of
    MAE divided by that output's standard deviation. Lowest score wins; exact
    ties go to fewer trees, then shallower trees, then grid order.
    """
    X = _as_2d(X, "X")
    Y = _as_2d(Y, "Y")
    points = expand_grid(DEFAULT_GRID if grid is None else grid)
    if not points:
        raise EmptyGrid("grid is empty")
    folds = kfold_indices(len(X), k_folds, seed)
    scores = _cv_scores(X, Y, points, folds, seed, shortcut)
    entries = [SearchEntry(p, float(np.mean(scores[i])), tuple(scores[i]))
               for i, p in enumerate(points)]
    best_i = min(range(len(points)),
                 key=lambda i: (entries[i].score, points[i].n_estimators,
                                _depth_key(points[i].max_depth), i))
    best = points[best_i]
    logger.info("grid search picked %s (score %.5f)", best, entries[best_i].score)
    return SearchResult(best, fit_forest(X, Y, best, seed), entries)


@dataclass
class TrainReport:
    hyperparams: Hyperparams
    r2: dict
    mae: dict
    n_train: int
    n_holdout: int
    fold_scores: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "hyperparams": self.hyperparams.to_dict(),
            "r2": self.r2,
            "mae": self.mae,
            "n_train": self.n_train,
            "n_holdout": self.n_holdout,
            "fold_scores": self.fold_scores,
            "warnings": self.warnings,
        }

    def table(self) -> str:
        lines = [f"{'output':<16} {'R2':>8} {'MAE':>12}"]
        for name in self.mae:
            r2 = self.r2.get(name)
            r2s = "n/a" if r2 is None else f"{r2:.4f}"
            lines.append(f"{name:<16} {r2s:>8} {self.mae[name]:>12.4f}")
        return "\n".join(lines)


MIN_TUNABLE_ROWS = 10


def train(X, Y, grid: Optional[dict] = None, k_folds: int = 5, seed: int = 0,
          holdout: float = 0.2, output_names=OUTPUT_NAMES) -> tuple:
    """Hold out a test split, tune on the rest, and score the tuned forest.

    Returns ``(forest, report)``. Tiny datasets skip tuning and scoring and
    fit the first grid point on every row, with a warning.
    """
    X = _as_2d(X, "X")
    Y = _as_2d(Y, "Y")
    n = len(X)
    if n == 0:
        raise EmptySamples("no training rows")
    names = list(output_names)[: Y.shape[1]]
    if n < MIN_TUNABLE_ROWS:
        msg = f"only {n} row(s): skipping tuning and held-out scoring"
        warnings.warn(msg, stacklevel=2)
        params = expand_grid(DEFAULT_GRID if grid is None else grid)[0]
        forest = fit_forest(X, Y, params, seed)
        forest.output_names = tuple(names)
        return forest, TrainReport(params, {}, {}, n, 0, [], [msg])

    perm = np.random.default_rng([seed, 0x401D]).permutation(n)
    n_hold = max(1, int(round(holdout * n)))
    hold, fit_idx = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    result = grid_search(X[fit_idx], Y[fit_idx], grid, k_folds, seed)
    forest = result.forest
    forest.output_names = tuple(names)
    pred = forest.predict(X[hold])
    scores = score(pred, Y[hold]) if n_hold >= 2 else []
    report = TrainReport(
        hyperparams=result.best,
        r2={name: s.r2 for name, s in zip(names, scores)},
        mae={name: s.mae for name, s in zip(names, scores)},
        n_train=len(fit_idx),
        n_holdout=n_hold,
        fold_scores=[{"params": e.params.to_dict(), "score": e.score, "folds": list(e.fold_scores)}
                     for e in result.entries],
    )
    return forest, report
