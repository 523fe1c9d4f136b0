"""Comparison methods: Gaussian-influence matching over the FDDB, full-tracking
edit-distance detection and an idealized error-log oracle."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from afetm._ted import prepare, ted_prepared
from afetm.calltree import CallNode, TracePlan, masked, normalize, preorder, tree_edit_distance
from afetm.diagnoser import Diagnosis, rank
from afetm.injector import NORMAL


class BaselineError(ValueError):
    pass


def influence(delta: float, sigma: float) -> float:
    """exp(-delta^2 / (2 sigma^2))."""
    if sigma <= 0:
        raise BaselineError("sigma must be > 0")
    return math.exp(-(delta * delta) / (2.0 * sigma * sigma))


def gaussian_influence(t_r, t_db, sigma: float) -> float:
    """Gaussian influence of a database tree on a runtime tree."""
    if sigma <= 0:
        raise BaselineError("sigma must be > 0")
    return influence(tree_edit_distance(t_r, t_db), sigma)


class GaussianIndex:
    """Labelled masked trees plus the spread of their pairwise distances.

    ``sigma`` is the standard deviation of all pairwise tree edit distances.
    Above ``max_pairs`` pairs a seeded sample is used instead.
    """

    def __init__(self, db: Sequence, sigma: Optional[float] = None, max_pairs: int = 50_000, seed: int = 0):
        self.db = [(label, list(trees)) for label, trees in db if trees]
        if not self.db:
            raise BaselineError("empty Gaussian index")
        self.labels = [label for label, _ in self.db]
        self._vocab: dict = {}
        self._prepared = [[prepare(t, self._vocab) for t in trees] for _, trees in self.db]
        self.sigma = self._spread(max_pairs, seed) if sigma is None else float(sigma)
        if self.sigma <= 0:
            warnings.warn("all indexed trees are identical; using sigma = 1", RuntimeWarning, stacklevel=2)
            self.sigma = 1.0

    def _spread(self, max_pairs: int, seed: int) -> float:
        flat = [p for group in self._prepared for p in group]
        n = len(flat)
        total = n * (n - 1) // 2
        if total == 0:
            return 0.0
        if total <= max_pairs:
            pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        else:
            rng = np.random.default_rng(seed)
            i = rng.integers(0, n, size=max_pairs)
            j = rng.integers(0, n - 1, size=max_pairs)
            j = j + (j >= i)
            pairs = zip(i.tolist(), j.tolist())
        d = [ted_prepared(flat[i], flat[j]) for i, j in pairs]
        return float(np.std(d))

    @classmethod
    def from_fddb(cls, fddb, plan: TracePlan, **kw) -> "GaussianIndex":
        db = [(NORMAL, _masked_all(fddb.normal_fcts, plan))]
        db += [(r.label, _masked_all(r.fcts, plan)) for r in fddb.records]
        return cls(db, **kw)

    def __len__(self) -> int:
        return sum(len(g) for g in self._prepared)

    def distances(self, afct) -> list:
        q = prepare(afct, self._vocab)
        return [[ted_prepared(q, p) for p in group] for group in self._prepared]


def _masked_all(fcts, plan) -> list:
    out, seen = [], set()
    for f in fcts:
        t = masked(f, plan)
        if t is None:
            continue
        key = repr(_shape(t))
        if key not in seen:
            seen.add(key)
            out.append(t)
    return out


def _shape(t: CallNode):
    return (t.fn, t.placeholder, tuple(_shape(c) for c in t.children))


def afct_gdc_diagnose(afct, index: GaussianIndex) -> Diagnosis:
    """Rank labels by their best Gaussian influence on the AFCT.

    An error is declared when the best fault label beats the best normal tree.
    """
    if index is None or not index.db:
        raise BaselineError("empty Gaussian index")
    if afct is None or (isinstance(afct, list) and not afct):
        raise BaselineError("empty AFCT")
    best = np.array([max(influence(d, index.sigma) for d in group) for group in index.distances(afct)])
    diag = rank(index.labels, best)
    is_normal = np.array([lab == NORMAL for lab in index.labels])
    normal_best = best[is_normal].max() if is_normal.any() else -1.0
    fault_best = best[~is_normal].max() if (~is_normal).any() else -1.0
    diag.decision = bool(fault_best > normal_best)
    return diag


def fct_edc_detect(fct_run: CallNode, normal_fcts: Sequence, threshold: float = 0) -> tuple:
    """Full-tracking detection: (error, located function or None).

    The run is compared with its nearest normal tree; the located function is
    the first preorder position where the two sequences diverge.
    """
    normal_fcts = list(normal_fcts)
    if not normal_fcts:
        raise BaselineError("no normal FCTs to compare against")
    vocab: dict = {}
    q = prepare(fct_run, vocab)
    dists = [ted_prepared(q, prepare(t, vocab)) for t in normal_fcts]
    k = int(np.argmin(dists))
    if not dists[k] > threshold:
        return False, None
    run_seq, ref_seq = preorder(fct_run), preorder(normal_fcts[k])
    pos = next((i for i, (a, b) in enumerate(zip(run_seq, ref_seq)) if a != b), min(len(run_seq), len(ref_seq)))
    if pos < len(run_seq):
        return True, run_seq[pos]
    return True, ref_seq[pos] if pos < len(ref_seq) else None


@dataclass
class LogModel:
    loggers: tuple
    # label -> whether some faulted FCT of that label reaches a logger after the fault site
    reachable: dict

    @classmethod
    def from_fddb(cls, program, fddb) -> "LogModel":
        loggers = tuple(program.loggers)
        if not loggers:
            raise BaselineError("the program model declares no logger functions")
        reach = {}
        for r in fddb.records:
            reach[r.label] = any(_log_after(normalize(t), r.function, loggers) is not None for t in r.fcts)
        return cls(loggers, reach)


def _log_after(tree: CallNode, target: str, loggers) -> Optional[int]:
    seq = preorder(tree)
    if target not in seq:
        return None
    start = seq.index(target)
    return next((i - start for i in range(start + 1, len(seq)) if seq[i] in loggers), None)


def log_oracle_diagnose(faulted_fct: CallNode, log_model: LogModel, target: str) -> tuple:
    """(detected, fld): a logger call after the fault site counts as detection;
    fld is its preorder distance from the faulty function."""
    fld = _log_after(normalize(faulted_fct), target, log_model.loggers)
    return fld is not None, fld
