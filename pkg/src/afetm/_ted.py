"""Zhang-Shasha ordered tree edit distance with unit costs, numba-compiled.

Forests are handled by hanging them under a shared virtual root, which
leaves the distance unchanged.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from afetm.calltree import CallNode

_VIRTUAL = "\x00forest"


class Prepared:
    """Postorder arrays of one tree: labels, leftmost leaves, keyroots."""

    __slots__ = ("labels", "lml", "keyroots", "n")

    def __init__(self, labels, lml, keyroots):
        self.labels = labels
        self.lml = lml
        self.keyroots = keyroots
        self.n = len(labels)


def prepare(tree, vocab: dict) -> Prepared:
    if isinstance(tree, (list, tuple)):
        tree = CallNode(_VIRTUAL, list(tree))
    labels, lml = [], []
    if tree is not None:
        # iterative postorder; call chains can be deep
        index = {}
        stack = [(tree, False)]
        while stack:
            node, done = stack.pop()
            if not done:
                stack.append((node, True))
                stack.extend((c, False) for c in reversed(node.children))
                continue
            me = len(labels)
            labels.append(vocab.setdefault(node.fn, len(vocab)))
            lml.append(lml[index[id(node.children[0])]] if node.children else me)
            index[id(node)] = me
    labels = np.asarray(labels, dtype=np.int64)
    lml = np.asarray(lml, dtype=np.int64)
    n = len(labels)
    seen = set()
    keyroots = []
    for i in range(n - 1, -1, -1):
        if lml[i] not in seen:
            seen.add(int(lml[i]))
            keyroots.append(i)
    return Prepared(labels, lml, np.asarray(sorted(keyroots), dtype=np.int64))


@njit(cache=True)
def _zs(l1, lml1, kr1, l2, lml2, kr2):
    n1 = l1.shape[0]
    n2 = l2.shape[0]
    if n1 == 0:
        return n2
    if n2 == 0:
        return n1
    td = np.zeros((n1, n2), dtype=np.int64)
    fd = np.zeros((n1 + 1, n2 + 1), dtype=np.int64)
    for a in range(kr1.shape[0]):
        i = kr1[a]
        for b in range(kr2.shape[0]):
            j = kr2[b]
            li = lml1[i]
            lj = lml2[j]
            m = i - li + 2
            n = j - lj + 2
            fd[0, 0] = 0
            for x in range(1, m):
                fd[x, 0] = fd[x - 1, 0] + 1
            for y in range(1, n):
                fd[0, y] = fd[0, y - 1] + 1
            for x in range(1, m):
                ix = li + x - 1
                for y in range(1, n):
                    jy = lj + y - 1
                    if lml1[ix] == li and lml2[jy] == lj:
                        cost = 0 if l1[ix] == l2[jy] else 1
                        v = fd[x - 1, y] + 1
                        w = fd[x, y - 1] + 1
                        z = fd[x - 1, y - 1] + cost
                        if w < v:
                            v = w
                        if z < v:
                            v = z
                        fd[x, y] = v
                        td[ix, jy] = v
                    else:
                        p = lml1[ix] - li
                        q = lml2[jy] - lj
                        v = fd[x - 1, y] + 1
                        w = fd[x, y - 1] + 1
                        z = fd[p, q] + td[ix, jy]
                        if w < v:
                            v = w
                        if z < v:
                            v = z
                        fd[x, y] = v
    return td[n1 - 1, n2 - 1]


def ted_prepared(p1: Prepared, p2: Prepared) -> int:
    return int(_zs(p1.labels, p1.lml, p1.keyroots, p2.labels, p2.lml, p2.keyroots))


def ted(t1, t2) -> int:
    vocab: dict = {}
    if isinstance(t1, (list, tuple)) or isinstance(t2, (list, tuple)):
        t1 = [] if t1 is None else (list(t1) if isinstance(t1, (list, tuple)) else [t1])
        t2 = [] if t2 is None else (list(t2) if isinstance(t2, (list, tuple)) else [t2])
        if not t1 and not t2:
            return 0
        if not t1 or not t2:
            return sum(t.size() for t in (t1 or t2))
    return ted_prepared(prepare(t1, vocab), prepare(t2, vocab))
