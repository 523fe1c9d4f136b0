"""Trace-point selection as budgeted weighted set cover.

Blocks are covered by the functions they call; picking a function to trace
covers every block calling it and costs its execution frequency.  The
objective rewards coverage first and total weight second, under a hard
weight budget.  :func:`mmas_select` is the Max-Min Ant System heuristic and
:func:`brute_force_select` the exact oracle for small instances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAX_BRUTE_FORCE = 24


class SelectorError(ValueError):
    pass


@dataclass
class CoverageInstance:
    h: np.ndarray
    w: np.ndarray
    w_ub: float
    function_ids: tuple = ()
    block_ids: tuple = ()

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).reshape(-1)
        self.h = np.asarray(self.h, dtype=np.uint8)
        if self.h.ndim != 2:
            self.h = self.h.reshape(-1, self.m)
        if not self.function_ids:
            self.function_ids = tuple(f"f{j + 1}" for j in range(self.m))
        if not self.block_ids:
            self.block_ids = tuple(f"b{i + 1}" for i in range(self.n))
        if self.h.size and self.h.max() > 1:
            raise SelectorError("coverage matrix must be binary")
        if (self.w < 0).any():
            raise SelectorError("weights must be non-negative")
        if self.w_ub < 0:
            raise SelectorError("w_ub must be non-negative")
        if len(self.function_ids) != self.m or len(self.block_ids) != self.n:
            raise SelectorError("id lists do not match the coverage matrix")

    @property
    def n(self) -> int:
        return self.h.shape[0]

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @classmethod
    def from_sets(cls, n: int, covers: list, weights: list, w_ub: float, ids=None) -> "CoverageInstance":
        h = np.zeros((n, len(covers)), dtype=np.uint8)
        for j, blocks in enumerate(covers):
            for i in blocks:
                h[i, j] = 1
        return cls(h, np.asarray(weights, dtype=float), float(w_ub), tuple(ids or ()))

    def with_budget_fraction(self, p: float) -> "CoverageInstance":
        if not 0 < p <= 1:
            raise SelectorError("budget fraction must lie in (0, 1]")
        return CoverageInstance(self.h, self.w, float(p * self.w.sum()), self.function_ids, self.block_ids)

    def to_dict(self) -> dict:
        return {
            "blocks": self.n,
            "functions": [
                {"id": fid, "covers": [int(i) for i in np.flatnonzero(self.h[:, j])], "weight": float(self.w[j])}
                for j, fid in enumerate(self.function_ids)
            ],
            "w_ub": self.w_ub,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoverageInstance":
        fns = d["functions"]
        n = int(d["blocks"])
        for f in fns:
            bad = [i for i in f["covers"] if not 0 <= i < n]
            if bad:
                raise SelectorError(f"function {f['id']!r} covers out-of-range blocks {bad}")
        return cls.from_sets(n, [f["covers"] for f in fns], [f["weight"] for f in fns], float(d["w_ub"]),
                             [f["id"] for f in fns])

    @classmethod
    def load(cls, path) -> "CoverageInstance":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SelectionSolution:
    x: np.ndarray
    fitness: float
    coverage_fraction: float
    total_weight: float
    function_ids: tuple = ()

    @property
    def selected(self) -> list:
        return [fid for fid, xj in zip(self.function_ids, self.x) if xj]

    def to_dict(self) -> dict:
        return {
            "selected": self.selected,
            "fitness": self.fitness,
            "coverage": self.coverage_fraction,
            "weight": self.total_weight,
        }


@dataclass(frozen=True)
class MmasParams:
    n_ant: int = 20
    n_run: int = 200
    alpha: float = 1.0
    beta: float = 2.0
    rho: float = 0.1
    tau_ini: float = 1.0
    l: float = 50.0
    q: float = 1.0
    eta_max: float = 10.0
    rng_seed: int = 0
    prune: bool = True

    def __post_init__(self):
        if self.n_ant < 1 or self.n_run < 1:
            raise SelectorError("n_ant and n_run must be positive")
        if not 0 < self.rho < 1:
            raise SelectorError("rho must lie in (0, 1)")
        if self.tau_ini <= 0 or self.q <= 0:
            raise SelectorError("tau_ini and Q must be positive")
        if self.l <= 1 or self.eta_max <= 1:
            raise SelectorError("l and eta_max must exceed 1")

    @property
    def tau_max(self) -> float:
        return self.tau_ini

    @property
    def tau_min(self) -> float:
        return self.tau_ini / self.l


@dataclass
class MmasState:
    tau: np.ndarray
    allowed: np.ndarray = None
    x_best: np.ndarray = None
    x_ib: np.ndarray = None
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Objective


def _as_x(instance: CoverageInstance, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint8).reshape(-1)
    if x.shape[0] != instance.m:
        raise SelectorError(f"selection has length {x.shape[0]}, instance has {instance.m} functions")
    return x


def coverage_counts(instance: CoverageInstance, x) -> tuple:
    """Per-block cover counts ``c`` and covered indicators ``a``."""
    x = _as_x(instance, x)
    c = instance.h.astype(np.int64) @ x.astype(np.int64)
    return c, (c >= 1).astype(np.uint8)


def fitness(instance: CoverageInstance, x) -> float:
    """Weighted objective; smaller is better.

    ``delta1 = n/(n+1)`` scales the uncovered fraction and ``delta2 = 1/(n+1)``
    the used share of the budget, so one extra covered block always beats any
    weight saving.
    """
    if instance.w_ub <= 0:
        raise SelectorError("fitness is undefined for w_ub = 0")
    x = _as_x(instance, x)
    n = instance.n
    d1, d2 = n / (n + 1), 1 / (n + 1)
    uncovered = 1.0 - (coverage_counts(instance, x)[1].sum() / n if n else 0.0)
    return float(d1 * uncovered + d2 * float(x @ instance.w) / instance.w_ub)


def solution(instance: CoverageInstance, x) -> SelectionSolution:
    x = _as_x(instance, x)
    a = coverage_counts(instance, x)[1]
    return SelectionSolution(
        x=x,
        fitness=fitness(instance, x),
        coverage_fraction=float(a.sum() / instance.n) if instance.n else 0.0,
        total_weight=float(x @ instance.w),
        function_ids=instance.function_ids,
    )


# ---------------------------------------------------------------------------
# Max-Min Ant System


def heuristic(instance: CoverageInstance, params: MmasParams) -> np.ndarray:
    w = instance.w
    eta = np.full(instance.m, params.eta_max)
    nz = w != 0
    eta[nz] = 1.0 / w[nz]
    return eta


def transition_probabilities(state: MmasState, params: MmasParams, instance: CoverageInstance,
                             allowed=None) -> np.ndarray:
    allowed = state.allowed if allowed is None else allowed
    allowed = np.asarray(allowed, dtype=bool)
    if not allowed.any():
        raise SelectorError("no function left to choose from")
    attract = state.tau**params.alpha * heuristic(instance, params) ** params.beta
    attract = np.where(allowed, attract, 0.0)
    return attract / attract.sum()


def pheromone_update(state: MmasState, params: MmasParams, instance: CoverageInstance, x_best) -> np.ndarray:
    """Evaporate, deposit on the reference solution, clamp to [tau_min, tau_max]."""
    x_best = _as_x(instance, x_best).astype(bool)
    f_best = fitness(instance, x_best)
    tau = (1.0 - params.rho) * state.tau
    if f_best == 0:
        tau = np.where(x_best, params.tau_max, tau)
    else:
        delta = params.q / (params.n_ant * f_best * state.tau)
        tau = tau + np.where(x_best, delta, 0.0)
    state.tau = np.clip(tau, params.tau_min, params.tau_max)
    return state.tau


def _prune(instance: CoverageInstance, x: np.ndarray, ties: np.ndarray) -> np.ndarray:
    """Drop selected functions whose blocks stay covered without them.

    Heaviest first; ``ties`` orders equal weights.
    """
    x = x.copy()
    c = instance.h.astype(np.int64) @ x.astype(np.int64)
    sel = np.flatnonzero(x)
    order = sel[np.lexsort((ties[sel], -instance.w[sel]))]
    for j in order:
        if instance.w[j] == 0:
            continue
        col = instance.h[:, j].astype(bool)
        if (c[col] >= 2).all():
            x[j] = 0
            c[col] -= 1
    return x


def construct(state: MmasState, params: MmasParams, instance: CoverageInstance, rng) -> np.ndarray:
    """One ant's literal roulette-wheel walk until the budget is reached.

    Reference form of :func:`colony`; both draw selections from the same
    distribution.
    """
    allowed = np.ones(instance.m, dtype=bool)
    w_total = 0.0
    attract = state.tau**params.alpha * heuristic(instance, params) ** params.beta
    while w_total < instance.w_ub and allowed.any():
        p = np.where(allowed, attract, 0.0)
        cum = np.cumsum(p)
        j = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        j = min(j, instance.m - 1)
        while not allowed[j]:  # guards the cum[-1] edge
            j -= 1
        w_total += instance.w[j]
        if w_total <= instance.w_ub:
            allowed[j] = False
    state.allowed = allowed
    x = (~allowed).astype(np.uint8)
    if params.prune:
        x = _prune(instance, x, rng.random(instance.m))
    return x


def colony(state: MmasState, params: MmasParams, instance: CoverageInstance, rng) -> np.ndarray:
    """All ants of one iteration at once; row ``h`` is ant ``h``'s selection.

    Sequential roulette draws without replacement have the same law as
    sorting exponential keys ``log(u) / p``, which lets the whole colony be
    built with array operations.  An ant keeps drawing while its running
    weight is below the budget; a draw that overshoots is not selected.
    """
    attract = state.tau**params.alpha * heuristic(instance, params) ** params.beta
    u = rng.random((params.n_ant, instance.m))
    ties = rng.random((params.n_ant, instance.m))
    order = np.argsort(-(np.log(u) / attract), axis=1, kind="stable")
    cum = np.cumsum(instance.w[order], axis=1)
    before = np.concatenate([np.zeros((params.n_ant, 1)), cum[:, :-1]], axis=1)
    take = (before < instance.w_ub) & (cum <= instance.w_ub)
    X = np.zeros((params.n_ant, instance.m), dtype=np.uint8)
    np.put_along_axis(X, order, take.astype(np.uint8), axis=1)
    if params.prune:
        h = instance.h.astype(np.int64)
        C = X.astype(np.int64) @ h.T
        for a in range(params.n_ant):
            sel = np.flatnonzero(X[a])
            if sel.size and ((C[a][:, None] >= 2) | (h[:, sel] == 0)).all(axis=0).any():
                X[a] = _prune(instance, X[a], ties[a])
    return X


def _fitness_rows(instance: CoverageInstance, X: np.ndarray) -> np.ndarray:
    n = instance.n
    d1, d2 = n / (n + 1), 1 / (n + 1)
    covered = ((X.astype(np.int64) @ instance.h.T.astype(np.int64)) >= 1).sum(axis=1)
    uncovered = 1.0 - covered / n if n else np.ones(X.shape[0])
    return d1 * uncovered + d2 * (X @ instance.w) / instance.w_ub


def mmas_select(instance: CoverageInstance, params: Optional[MmasParams] = None) -> SelectionSolution:
    """Max-Min Ant System search; returns the global best selection.

    Iteration ``t`` draws from the substream ``(seed, t)``, one row per ant in
    index order.  The iteration best deposits pheromone.  With
    ``params.prune`` each ant drops redundant functions from its walk before
    evaluation.
    """
    params = params or MmasParams()
    fitness(instance, np.zeros(instance.m))  # surfaces w_ub = 0 early
    state = MmasState(tau=np.full(instance.m, params.tau_ini, dtype=float))
    state.x_best = np.zeros(instance.m, dtype=np.uint8)
    f_best = fitness(instance, state.x_best)
    for t in range(params.n_run):
        state.x_ib = np.zeros(instance.m, dtype=np.uint8)
        f_ib = fitness(instance, state.x_ib)
        X = colony(state, params, instance, np.random.default_rng([params.rng_seed, t]))
        F = _fitness_rows(instance, X)
        a = int(np.argmin(F))  # first ant wins ties, as in a serial sweep
        if F[a] < f_ib:
            state.x_ib, f_ib = X[a].copy(), fitness(instance, X[a])
        pheromone_update(state, params, instance, state.x_ib)
        if f_ib < f_best:
            state.x_best, f_best = state.x_ib, f_ib
        state.history.append(f_best)
    return solution(instance, state.x_best)


# ---------------------------------------------------------------------------
# Exact oracle


def brute_force_select(instance: CoverageInstance) -> SelectionSolution:
    """Exhaustive optimum; ties go to lower weight, then the smaller x tuple."""
    m = instance.m
    if m > MAX_BRUTE_FORCE:
        raise SelectorError(f"brute force limited to {MAX_BRUTE_FORCE} functions, got {m}")
    if instance.w_ub <= 0:
        raise SelectorError("fitness is undefined for w_ub = 0")
    if m == 0:
        return solution(instance, np.zeros(0, dtype=np.uint8))
    n = instance.n
    d1, d2 = n / (n + 1), 1 / (n + 1)
    h = instance.h.astype(np.int64)
    bits = 1 << np.arange(m - 1, -1, -1, dtype=np.int64)  # x[0] is the most significant bit
    best = None
    chunk = 1 << 16
    for start in range(0, 1 << m, chunk):
        masks = np.arange(start, min(start + chunk, 1 << m), dtype=np.int64)
        X = ((masks[:, None] & bits[None, :]) != 0).astype(np.int64)
        weight = X @ instance.w
        feasible = weight <= instance.w_ub
        if not feasible.any():
            continue
        X, weight, masks = X[feasible], weight[feasible], masks[feasible]
        covered = ((X @ h.T) >= 1).sum(axis=1)
        uncovered = 1.0 - covered / n if n else np.ones(len(X))
        F = d1 * uncovered + d2 * weight / instance.w_ub
        # lexsort: last key is primary; increasing mask = lexicographic x
        k = np.lexsort((masks, weight, F))[0]
        cand = (F[k], weight[k], masks[k])
        if best is None or cand < best:
            best = cand
    x = ((best[2] & bits) != 0).astype(np.uint8)
    return solution(instance, x)
