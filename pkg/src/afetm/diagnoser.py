"""Graph-convolutional fault diagnosis over (approximate) call trees.

Each tree becomes an undirected graph with self-loops.  A node's input
features are a one-hot function id (plus an out-of-vocabulary slot) and a
placeholder flag.  Three propagation layers

    H' = ReLU(D^-1/2 (A + I) D^-1/2 H W)

are followed by mean pooling, one dense layer and a softmax over the
``function:kind`` labels plus ``normal``.  Gradients are written out by hand;
training is full-batch descent on the cross-entropy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from afetm.calltree import CallNode, TracePlan, canonical_form, forest_key, masked
from afetm.injector import NORMAL, label_function

log = logging.getLogger(__name__)

FORMAT = "afetm-gcn"
VERSION = 1


class DiagnoserError(ValueError):
    pass


@dataclass
class GraphBatch:
    h0: np.ndarray  # (N, F0)
    edges: np.ndarray  # (E, 2) undirected parent-child pairs
    edge_weight: np.ndarray  # (E,)
    graph_ids: np.ndarray  # (N,)
    n_graphs: int = 1
    _norm: Optional[sp.csr_matrix] = field(default=None, repr=False)
    _m0: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.h0.shape[0]

    @property
    def a_tilde(self) -> sp.csr_matrix:
        n = self.n_nodes
        i, j = self.edges[:, 0], self.edges[:, 1]
        a = sp.coo_matrix((np.r_[self.edge_weight, self.edge_weight], (np.r_[i, j], np.r_[j, i])), shape=(n, n))
        return (a + sp.identity(n, format="coo")).tocsr()

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.a_tilde.sum(axis=1)).ravel()

    @property
    def norm_adj(self) -> sp.csr_matrix:
        if self._norm is None:
            d = self.degree
            s = sp.diags(1.0 / np.sqrt(d))
            self._norm = (s @ self.a_tilde @ s).tocsr()
        return self._norm

    @property
    def propagated_input(self) -> np.ndarray:
        """Normalized adjacency times the input features (constant per batch)."""
        if self._m0 is None:
            self._m0 = self.norm_adj @ self.h0
        return self._m0

    def pool_matrix(self) -> sp.csr_matrix:
        counts = np.bincount(self.graph_ids, minlength=self.n_graphs).astype(float)
        if np.any(counts == 0):
            raise DiagnoserError("batch contains a graph with no nodes")
        vals = 1.0 / counts[self.graph_ids]
        return sp.csr_matrix((vals, (self.graph_ids, np.arange(self.n_nodes))), shape=(self.n_graphs, self.n_nodes))


def feature_width(catalog: Sequence[str]) -> int:
    return len(catalog) + 2


def embed_tree(tree, catalog: Sequence[str]) -> GraphBatch:
    """Graph embedding of a tree or forest (one graph either way)."""
    roots = [tree] if isinstance(tree, CallNode) else [t for t in (tree or ()) if t is not None]
    if not roots:
        raise DiagnoserError("cannot embed an empty tree")
    index = {fn: i for i, fn in enumerate(catalog)}
    oov = len(catalog)
    rows, flags, edges = [], [], []
    for root in roots:
        stack = [(root, -1)]
        while stack:
            node, parent = stack.pop()
            me = len(rows)
            rows.append(index.get(node.fn, oov))
            flags.append(1.0 if node.placeholder or node.color == "blue" else 0.0)
            if parent >= 0:
                edges.append((parent, me))
            stack.extend((c, me) for c in reversed(node.children))
    n = len(rows)
    h0 = np.zeros((n, feature_width(catalog)))
    h0[np.arange(n), rows] = 1.0
    h0[:, -1] = flags
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return GraphBatch(h0, e, np.ones(len(e)), np.zeros(n, dtype=np.int64), 1)


def batch_graphs(graphs: Sequence[GraphBatch]) -> GraphBatch:
    if not graphs:
        raise DiagnoserError("empty batch")
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    return GraphBatch(
        np.vstack([g.h0 for g in graphs]),
        np.vstack([g.edges + o for g, o in zip(graphs, offsets)]).astype(np.int64),
        np.concatenate([g.edge_weight for g in graphs]),
        np.concatenate([np.full(g.n_nodes, k, dtype=np.int64) for k, g in enumerate(graphs)]),
        len(graphs),
    )


def gcn_layer(H: np.ndarray, batch: GraphBatch, W: np.ndarray, activate: bool = True) -> np.ndarray:
    """Matrix-form propagation."""
    if H.shape[0] != batch.n_nodes or H.shape[1] != W.shape[0]:
        raise DiagnoserError(f"shape mismatch: H {H.shape}, W {W.shape}, {batch.n_nodes} nodes")
    out = batch.norm_adj @ (H @ W)
    return np.maximum(out, 0.0) if activate else out


def gcn_layer_nodewise(H: np.ndarray, batch: GraphBatch, W: np.ndarray, activate: bool = True) -> np.ndarray:
    """Node-wise propagation: h_i' = sum over j in N(i) + {i} of e_ji / sqrt(d_i d_j) h_j W."""
    if H.shape[0] != batch.n_nodes or H.shape[1] != W.shape[0]:
        raise DiagnoserError(f"shape mismatch: H {H.shape}, W {W.shape}, {batch.n_nodes} nodes")
    n = batch.n_nodes
    nbrs = [[(i, 1.0)] for i in range(n)]
    for (a, b), w in zip(batch.edges, batch.edge_weight):
        nbrs[a].append((b, w))
        nbrs[b].append((a, w))
    d = [sum(w for _, w in nb) for nb in nbrs]
    out = np.zeros((n, W.shape[1]))
    for i in range(n):
        acc = np.zeros(H.shape[1])
        for j, w in nbrs[i]:
            acc += w / np.sqrt(d[i] * d[j]) * H[j]
        out[i] = acc @ W
    return np.maximum(out, 0.0) if activate else out


# ---------------------------------------------------------------------------
# Model


@dataclass
class GcnModel:
    catalog: list
    labels: list
    weights: list  # per-layer W
    w_out: np.ndarray
    b_out: np.ndarray
    final_loss: float = float("nan")
    epochs_run: int = 0

    @property
    def layers(self) -> int:
        return len(self.weights)

    def params(self) -> list:
        return [*self.weights, self.w_out, self.b_out]

    def set_params(self, params: list) -> None:
        self.weights = list(params[:-2])
        self.w_out, self.b_out = params[-2], params[-1]

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "catalog": list(self.catalog),
            "labels": list(self.labels),
            "shapes": [list(w.shape) for w in self.params()],
            "weights": [w.ravel().tolist() for w in self.params()],
            "final_loss": self.final_loss,
            "epochs_run": self.epochs_run,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GcnModel":
        if d.get("format") != FORMAT:
            raise DiagnoserError("not a GCN model file")
        if d.get("version") != VERSION:
            raise DiagnoserError(f"unsupported model version {d.get('version')}")
        params = [np.asarray(w, dtype=float).reshape(s) for w, s in zip(d["weights"], d["shapes"])]
        m = cls(d["catalog"], d["labels"], params[:-2], params[-2], params[-1], d.get("final_loss", float("nan")),
                d.get("epochs_run", 0))
        _check_shapes(m)
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path) -> "GcnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_shapes(m: GcnModel) -> None:
    dim = feature_width(m.catalog)
    for w in m.weights:
        if w.shape[0] != dim:
            raise DiagnoserError(f"layer dimensions do not chain ({w.shape[0]} != {dim})")
        dim = w.shape[1]
    if m.w_out.shape != (dim, len(m.labels)) or m.b_out.shape != (len(m.labels),):
        raise DiagnoserError("readout shape does not match the label table")


def init_model(catalog, labels, layers: int = 3, hidden: int = 64, seed: int = 0) -> GcnModel:
    """Glorot-uniform layer weights, zero readout bias."""
    rng = np.random.default_rng(seed)
    dims = [feature_width(catalog)] + [hidden] * layers
    ws = []
    for a, b in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (a + b))
        ws.append(rng.uniform(-lim, lim, size=(a, b)))
    lim = np.sqrt(6.0 / (hidden + len(labels)))
    w_out = rng.uniform(-lim, lim, size=(dims[-1], len(labels)))
    return GcnModel(list(catalog), list(labels), ws, w_out, np.zeros(len(labels)))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_batch(batch: GraphBatch, model: GcnModel):
    """Probabilities (G x C) and the cache needed for backprop."""
    if batch.n_nodes == 0:
        raise DiagnoserError("empty batch")
    A = batch.norm_adj
    S = batch.pool_matrix()
    H = batch.h0
    ms, zs = [], []
    for l, W in enumerate(model.weights):
        M = batch.propagated_input if l == 0 else A @ H
        Z = M @ W
        ms.append(M)
        zs.append(Z)
        H = np.maximum(Z, 0.0)
    pooled = S @ H
    probs = _softmax(pooled @ model.w_out + model.b_out)
    return probs, (A, S, ms, zs, pooled)


def _targets(y: np.ndarray, g: int, c: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(float)
    t = np.zeros((g, c))
    t[np.arange(g), y] = 1.0
    return t


def loss_and_grads(model: GcnModel, batch: GraphBatch, y: np.ndarray):
    """Cross-entropy and its gradient for every parameter.

    ``y`` holds one label index per graph, or a (G, C) count matrix when one
    tree stands for several labelled samples; the loss is the mean over
    samples either way.
    """
    probs, (A, S, ms, zs, pooled) = forward_batch(batch, model)
    T = _targets(y, batch.n_graphs, len(model.labels))
    total = T.sum()
    loss = -np.sum(T * np.log(np.maximum(probs, 1e-300))) / total
    d_logits = (probs * T.sum(axis=1, keepdims=True) - T) / total
    d_wout = pooled.T @ d_logits
    d_b = d_logits.sum(axis=0)
    dH = S.T @ (d_logits @ model.w_out.T)
    d_ws = [None] * model.layers
    for l in range(model.layers - 1, -1, -1):
        dZ = dH * (zs[l] > 0)
        d_ws[l] = ms[l].T @ dZ
        if l:
            dH = A.T @ (dZ @ model.weights[l].T)
    return loss, [*d_ws, d_wout, d_b]


# ---------------------------------------------------------------------------
# Diagnosis


@dataclass
class Diagnosis:
    ranked: list  # [(label, score)], best first
    # explicit error decision; None means "top-1 is not normal"
    decision: Optional[bool] = None

    @property
    def top1(self) -> str:
        return self.ranked[0][0]

    def topk(self, k: int = 3) -> list:
        return self.ranked[:k]

    @property
    def detected(self) -> bool:
        return self.top1 != NORMAL if self.decision is None else self.decision

    @property
    def located(self) -> Optional[str]:
        if not self.detected:
            return None
        return next(label_function(lab) for lab, _ in self.ranked if lab != NORMAL)

    def located_k(self, k: int = 3) -> list:
        """Distinct functions of the best-ranked fault labels."""
        out = []
        for lab, _ in self.ranked:
            fn = label_function(lab)
            if fn is not None and fn not in out:
                out.append(fn)
            if len(out) == k:
                break
        return out

    def to_dict(self, k: Optional[int] = None) -> dict:
        rows = self.ranked if k is None else self.ranked[:k]
        return {
            "top1": self.top1,
            "detected": self.detected,
            "located": self.located,
            "ranked": [{"label": lab, "score": p} for lab, p in rows],
        }


def rank(labels: Sequence[str], scores: np.ndarray) -> Diagnosis:
    """Best score first; equal scores fall back to label order."""
    order = sorted(range(len(labels)), key=lambda i: (-scores[i], labels[i]))
    return Diagnosis([(labels[i], float(scores[i])) for i in order])


def forward(batch: GraphBatch, model: GcnModel) -> Diagnosis:
    if batch.n_graphs != 1:
        raise DiagnoserError("forward() ranks a single graph; use forward_batch for batches")
    probs, _ = forward_batch(batch, model)
    return rank(model.labels, probs[0])


def diagnose(afct, model: GcnModel) -> Diagnosis:
    """Diagnose one AFCT (a tree or the forest returned by build_afct)."""
    return forward(embed_tree(afct, model.catalog), model)


def diagnose_many(afcts: Sequence, model: GcnModel) -> list:
    probs, _ = forward_batch(batch_graphs([embed_tree(t, model.catalog) for t in afcts]), model)
    return [rank(model.labels, p) for p in probs]


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    layers: int = 3
    hidden: int = 64
    lr: float = 0.05
    epochs: int = 500
    tol: float = 1e-3
    seed: int = 0
    optimizer: str = "gd"  # gd | adam

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DiagnoserError(f"unknown training option(s) {sorted(unknown)}")
        return cls(**d)


def training_set(fddb, plan: TracePlan) -> tuple:
    """Distinct masked trees with per-label sample counts.

    Returns ``(trees, labels, counts)``; ``counts[g, k]`` is how many FDDB
    trees of label ``k`` mask to tree ``g``.
    """
    labels = [NORMAL] + list(fddb.labels)
    index, trees, rows = {}, [], []
    groups = [(0, fddb.normal_fcts)] + [(k + 1, r.fcts) for k, r in enumerate(fddb.records)]
    for k, fcts in groups:
        for fct in fcts:
            t = masked(fct, plan)
            if t is None:
                continue
            key = canonical_form(t)
            if key not in index:
                index[key] = len(trees)
                trees.append(t)
                rows.append({})
            g = index[key]
            rows[g][k] = rows[g].get(k, 0) + 1
    if not trees:
        raise DiagnoserError("every training tree masks to nothing; raise the trace budget")
    counts = np.zeros((len(trees), len(labels)))
    for g, row in enumerate(rows):
        for k, c in row.items():
            counts[g, k] = c
    return trees, labels, counts


def catalog_of(fddb) -> list:
    seen = {}
    for fct in list(fddb.normal_fcts) + [t for r in fddb.records for t in r.fcts]:
        for n in fct.iter():
            seen.setdefault(n.fn, None)
    return sorted(seen)


def fit(model: GcnModel, batch: GraphBatch, y: np.ndarray, cfg: TrainConfig) -> GcnModel:
    params = model.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    loss = float("nan")
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        loss, grads = loss_and_grads(model, batch, y)
        if loss < cfg.tol:
            epoch -= 1
            break
        if cfg.optimizer == "adam":
            b1, b2 = 0.9, 0.999
            new = []
            for p, g, a, b in zip(params, grads, m1, m2):
                a *= b1
                a += (1 - b1) * g
                b *= b2
                b += (1 - b2) * g * g
                step = a / (1 - b1**epoch) / (np.sqrt(b / (1 - b2**epoch)) + 1e-8)
                new.append(p - cfg.lr * step)
            params = new
        elif cfg.optimizer == "gd":
            params = [p - cfg.lr * g for p, g in zip(params, grads)]
        else:
            raise DiagnoserError(f"unknown optimizer {cfg.optimizer!r}")
        model.set_params(params)
    else:
        loss, _ = loss_and_grads(model, batch, y)
    model.final_loss = float(loss)
    model.epochs_run = epoch
    log.info("trained %d epochs, loss %.4g", epoch, loss)
    return model


def train(fddb, plan: TracePlan, cfg: Optional[TrainConfig] = None) -> GcnModel:
    """Fit a model on the red-masked FDDB trees under ``plan``."""
    cfg = cfg or TrainConfig()
    trees, labels, counts = training_set(fddb, plan)
    catalog = catalog_of(fddb)
    model = init_model(catalog, labels, cfg.layers, cfg.hidden, cfg.seed)
    batch = batch_graphs([embed_tree(t, catalog) for t in trees])
    return fit(model, batch, counts, cfg)


def accuracy(model: GcnModel, trees: Sequence, y: np.ndarray) -> float:
    """Fraction of trees whose top-1 label is a correct one (any label with a
    nonzero count when ``y`` is a count matrix)."""
    probs, _ = forward_batch(batch_graphs([embed_tree(t, model.catalog) for t in trees]), model)
    T = _targets(y, len(trees), len(model.labels))
    return float(np.mean(T[np.arange(len(trees)), np.argmax(probs, axis=1)] > 0))


def tree_key(afct) -> bytes:
    return canonical_form(afct) if isinstance(afct, CallNode) else forest_key(afct)
