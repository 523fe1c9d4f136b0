"""Function call trees: data model, coloring, masking and AFCT reconstruction.

A call tree is a plain :class:`CallNode` (its root); an empty tree is ``None``
and an AFCT set is a list of roots.  Trees are ordered and labeled by
function id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

UNCOLORED = "none"
WHITE = "white"
RED = "red"
BLUE = "blue"
COLORS = (UNCOLORED, WHITE, RED, BLUE)


class CallTreeError(ValueError):
    pass


@dataclass(eq=True)
class CallNode:
    fn: str
    children: list = field(default_factory=list)
    color: str = UNCOLORED
    placeholder: bool = False

    def add(self, fn: str, **kw) -> "CallNode":
        child = CallNode(fn, **kw)
        self.children.append(child)
        return child

    def child(self, fn: str) -> Optional["CallNode"]:
        for c in self.children:
            if c.fn == fn:
                return c
        return None

    def iter(self) -> Iterator["CallNode"]:
        """Preorder traversal (iterative, safe for deep trees)."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def size(self) -> int:
        return sum(1 for _ in self.iter())

    def depth(self) -> int:
        best = 0
        stack = [(self, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            stack.extend((c, d + 1) for c in node.children)
        return best

    def copy(self) -> "CallNode":
        return CallNode(self.fn, [c.copy() for c in self.children], self.color, self.placeholder)

    def __repr__(self) -> str:
        return f"CallNode({to_sexpr(self)})"


@dataclass(frozen=True)
class TraceEvent:
    """One ``(function, caller, callstack)`` record; ``caller`` None is the sentinel."""

    fn: str
    caller: Optional[str]
    stack: Optional[tuple] = None
    seq: int = 0

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "fn": self.fn,
            "caller": self.caller,
            "stack": list(self.stack) if self.stack is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceEvent":
        stack = d.get("stack")
        return cls(d["fn"], d.get("caller"), tuple(stack) if stack is not None else None, int(d["seq"]))


@dataclass(frozen=True)
class TracePlan:
    traced: frozenset
    callstack: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "traced", frozenset(self.traced))
        object.__setattr__(self, "callstack", frozenset(self.callstack))
        extra = self.callstack - self.traced
        if extra:
            raise CallTreeError(f"callstack functions not traced: {sorted(extra)}")

    def to_dict(self) -> dict:
        return {"traced": sorted(self.traced), "callstack": sorted(self.callstack)}

    @classmethod
    def from_dict(cls, d: dict) -> "TracePlan":
        return cls(frozenset(d["traced"]), frozenset(d.get("callstack", ())))


# ---------------------------------------------------------------------------
# Construction helpers and codecs


def from_sexpr(text: str) -> CallNode:
    """Parse ``"main(A(B,C),D)"`` into a tree.  Test and demo convenience."""
    pos = 0

    def name() -> str:
        nonlocal pos
        start = pos
        while pos < len(text) and text[pos] not in "(),":
            pos += 1
        if start == pos:
            raise CallTreeError(f"expected function name at offset {start} in {text!r}")
        return text[start:pos].strip()

    def node() -> CallNode:
        nonlocal pos
        n = CallNode(name())
        if pos < len(text) and text[pos] == "(":
            pos += 1
            n.children.append(node())
            while text[pos] == ",":
                pos += 1
                n.children.append(node())
            if text[pos] != ")":
                raise CallTreeError(f"expected ')' at offset {pos} in {text!r}")
            pos += 1
        return n

    text = text.replace(" ", "")
    root = node()
    if pos != len(text):
        raise CallTreeError(f"trailing input at offset {pos} in {text!r}")
    return root


def to_sexpr(node: Optional[CallNode]) -> str:
    if node is None:
        return ""
    if not node.children:
        return node.fn
    return node.fn + "(" + ",".join(to_sexpr(c) for c in node.children) + ")"


def tree_to_dict(node: CallNode) -> dict:
    return {
        "fn": node.fn,
        "color": node.color,
        "placeholder": node.placeholder,
        "children": [tree_to_dict(c) for c in node.children],
    }


def tree_from_dict(d: dict) -> CallNode:
    color = d.get("color", UNCOLORED)
    if color not in COLORS:
        raise CallTreeError(f"unknown color {color!r} on node {d.get('fn')!r}")
    return CallNode(
        str(d["fn"]),
        [tree_from_dict(c) for c in d.get("children", ())],
        color,
        bool(d.get("placeholder", False)),
    )


def load_trees(obj) -> list:
    """Accept a single CallTree dict or a list of them."""
    if isinstance(obj, dict):
        return [tree_from_dict(obj)]
    return [tree_from_dict(d) for d in obj]


def read_events(lines: Iterable[str]) -> list:
    """Parse a newline-delimited JSON trace stream."""
    events = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            events.append(TraceEvent.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CallTreeError(f"bad trace event on line {lineno}: {exc}") from exc
    return events


def write_events(events: Iterable[TraceEvent]) -> str:
    return "".join(json.dumps(e.to_dict(), separators=(",", ":")) + "\n" for e in events)


def _shape(node: CallNode):
    return [node.fn, [_shape(c) for c in node.children]]


def canonical_form(tree: Optional[CallNode]) -> bytes:
    """Injective byte encoding of an ordered labeled tree (labels and order only)."""
    if tree is None:
        return b"null"
    return json.dumps(_shape(tree), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode_canonical(blob: bytes) -> Optional[CallNode]:
    def build(item) -> CallNode:
        fn, kids = item
        return CallNode(fn, [build(k) for k in kids])

    data = json.loads(blob.decode("utf-8"))
    return None if data is None else build(data)


def forest_key(trees: Sequence[CallNode]) -> bytes:
    return b"[" + b",".join(canonical_form(t) for t in trees) + b"]"


# ---------------------------------------------------------------------------
# Normalization (duplicate-call collapsing and recursion folding)


def normalize(root: Optional[CallNode], fold: bool = True) -> Optional[CallNode]:
    """Collapse repeated callees under one parent and fold recursive calls.

    Siblings with the same function are merged (children concatenated in time
    order, recursively).  With ``fold`` a call to a function already on the
    path from the root is folded into that ancestor: its children are
    re-attached there.  Colors survive; a merge with a white node is white.
    The folded result is what AFCT reconstruction can represent.
    """
    if root is None:
        return None
    out = CallNode(root.fn, color=root.color, placeholder=root.placeholder)

    def mark(dst, src):
        if src.color == WHITE:
            dst.color, dst.placeholder = WHITE, False

    # recursion depth is bounded by the simulator's stack guard
    def attach(children, path):
        dst = path[-1]
        for ch in children:
            idx = next((i for i, p in enumerate(path) if p.fn == ch.fn), None) if fold else None
            if idx is not None:
                mark(path[idx], ch)
                attach(ch.children, path[: idx + 1])
                continue
            node = dst.child(ch.fn)
            if node is None:
                node = dst.add(ch.fn, color=ch.color, placeholder=ch.placeholder)
            else:
                mark(node, ch)
            attach(ch.children, path + [node])

    attach(root.children, [out])
    return out


# ---------------------------------------------------------------------------
# Coloring and masking


def color_fcts(fcts: Sequence[CallNode], traced: Iterable[str]) -> tuple:
    """Color each FCT white/red/blue and collect the callstack-recording set.

    Returns ``(colored_copies, callstack_set)``.  A red node with a white
    descendant turns blue and its first white descendant in preorder joins the
    callstack set.  Runs in O(total nodes).
    """
    traced = frozenset(traced)
    callstack = set()
    colored = []
    for fct in fcts:
        tree = fct.copy()
        for node in tree.iter():
            node.color = WHITE if node.fn in traced else RED
        first_white = {}

        # post-order pass: id(node) -> first white strict descendant in preorder
        order = list(tree.iter())
        for node in reversed(order):
            found = None
            for c in node.children:
                if c.color == WHITE:
                    found = c
                    break
                if first_white.get(id(c)) is not None:
                    found = first_white[id(c)]
                    break
            first_white[id(node)] = found
        for node in order:
            if node.color == RED and first_white[id(node)] is not None:
                node.color = BLUE
                callstack.add(first_white[id(node)].fn)
        colored.append(tree)
    return colored, frozenset(callstack)


def mask_red(colored: Optional[CallNode]) -> Optional[CallNode]:
    """Drop every red node; returns None when the root itself is red."""
    if colored is None or colored.color == RED:
        return None
    if colored.color == UNCOLORED:
        raise CallTreeError("mask_red needs a colored tree")
    return CallNode(
        colored.fn,
        [m for m in (mask_red(c) for c in colored.children) if m is not None],
        colored.color,
        colored.placeholder or colored.color == BLUE,
    )


def masked(fct: Optional[CallNode], plan: TracePlan) -> Optional[CallNode]:
    """Colored, red-masked and recursion-folded view of one FCT.

    ``fct`` should keep recursive calls (``normalize(t, fold=False)``) so that
    callers on a re-entry path are colored blue.
    """
    if fct is None:
        return None
    (colored,), _ = color_fcts([fct], plan.traced)
    return normalize(mask_red(colored))


# ---------------------------------------------------------------------------
# Trace streams


def filter_events(events: Sequence[TraceEvent], plan: TracePlan) -> list:
    """Keep events of traced functions; callstacks only for the callstack set."""
    out = []
    for ev in events:
        if ev.fn not in plan.traced:
            continue
        stack = ev.stack if ev.fn in plan.callstack else None
        out.append(TraceEvent(ev.fn, ev.caller, stack, ev.seq))
    return out


def not_pred(node: CallNode, function: str, parents: dict) -> bool:
    """True iff ``function`` is neither ``node`` nor one of its ancestors.

    Guards against cycles when recursive calls show up in a trace.
    """
    cur = node
    while cur is not None:
        if cur.fn == function:
            return False
        cur = parents.get(id(cur))
    return True


class _AfctBuilder:
    def __init__(self):
        self.roots = []
        self.parents = {}
        self.last = {}

    def _new(self, fn, parent, traced):
        node = CallNode(fn, color=WHITE if traced else BLUE, placeholder=not traced)
        if parent is None:
            self.roots.append(node)
        else:
            parent.children.append(node)
        self.parents[id(node)] = parent
        return node

    def _ancestor(self, node, function):
        cur = node
        while cur is not None:
            if cur.fn == function:
                return cur
            cur = self.parents.get(id(cur))
        return None

    def _root(self, fn):
        for r in self.roots:
            if r.fn == fn:
                return r
        return None

    def _absorb(self, src, dst):
        """Merge ``src``'s subtree into ``dst`` by function id, folding any
        node whose function is already on ``dst``'s path."""
        if src.color == WHITE:
            dst.color, dst.placeholder = WHITE, False
        for k, v in list(self.last.items()):
            if v is src:
                self.last[k] = dst
        for ch in src.children:
            anc = self._ancestor(dst, ch.fn)
            if anc is not None:
                self._absorb(ch, anc)
                continue
            target = dst.child(ch.fn)
            if target is None:
                target = self._new(ch.fn, dst, traced=ch.color == WHITE)
            self._absorb(ch, target)

    def _walk(self, names):
        """Walk/materialize a callstack prefix, folding recursive re-entries
        into their ancestor; returns the deepest node."""
        if not names:
            return None
        node = self._root(names[0])
        if node is None:
            node = self._new(names[0], None, traced=False)
        self.last[names[0]] = node
        for name in names[1:]:
            anc = self._ancestor(node, name)
            if anc is not None:
                node = self.last[name] = anc
                continue
            nxt = node.child(name)
            if nxt is None:
                nxt = self._new(name, node, traced=False)
            stray = self._root(name)
            if stray is not None and stray is not nxt and stray.placeholder:
                self.roots.remove(stray)
                self._absorb(stray, nxt)
            self.last[name] = nxt
            node = nxt
        return node

    def add(self, ev: TraceEvent):
        if ev.stack is not None:
            if not ev.stack or ev.stack[-1] != ev.fn:
                raise CallTreeError(f"event seq={ev.seq}: callstack does not end with {ev.fn!r}")
            if ev.caller is not None and (len(ev.stack) < 2 or ev.stack[-2] != ev.caller):
                raise CallTreeError(
                    f"event seq={ev.seq}: callstack {list(ev.stack)} disagrees with caller {ev.caller!r}"
                )
            if ev.caller is None and len(ev.stack) != 1:
                raise CallTreeError(f"event seq={ev.seq}: root event carries a non-trivial callstack")
            parent = self._walk(ev.stack[:-1])
        elif ev.caller is None:
            parent = None
        else:
            parent = self.last.get(ev.caller)
            if parent is None:
                parent = self._root(ev.caller)
            if parent is None:
                parent = self._new(ev.caller, None, traced=False)
                self.last[ev.caller] = parent

        if parent is None:
            node = self._root(ev.fn)
            if node is None:
                node = self._new(ev.fn, None, traced=True)
        elif not not_pred(parent, ev.fn, self.parents):
            anc = self.last[ev.fn] = self._ancestor(parent, ev.fn)
            anc.color, anc.placeholder = WHITE, False
            return
        else:
            node = parent.child(ev.fn)
            if node is None:
                node = self._new(ev.fn, parent, traced=True)
        node.color, node.placeholder = WHITE, False
        stray = self._root(ev.fn)
        if stray is not None and stray is not node and stray.placeholder:
            self.roots.remove(stray)
            self._absorb(stray, node)
        self.last[ev.fn] = node


def build_afct(events: Sequence[TraceEvent]) -> list:
    """Reconstruct the approximate FCT set from an adaptive trace stream.

    Callers that are never traced become placeholder roots; each event hangs
    under the most recent node of its caller, subject to the recursion guard;
    a recorded callstack places its function under the full ancestor chain,
    materializing placeholder nodes and absorbing stray placeholder roots.
    The entry function's sentinel caller never appears in the output.
    """
    prev = None
    builder = _AfctBuilder()
    for ev in events:
        if prev is not None and ev.seq <= prev:
            raise CallTreeError(f"event seq={ev.seq} is not after seq={prev}")
        prev = ev.seq
        builder.add(ev)
    return builder.roots


def single_tree(afcts: Sequence[CallNode]) -> Optional[CallNode]:
    """The AFCT as one tree; several roots are joined under a sentinel node."""
    if not afcts:
        return None
    if len(afcts) == 1:
        return afcts[0]
    return CallNode("<forest>", list(afcts), BLUE, True)


# ---------------------------------------------------------------------------
# Comparison and distances


def _key(node: CallNode, ordered: bool, with_color: bool):
    kids = [_key(c, ordered, with_color) for c in node.children]
    if not ordered:
        kids.sort()
    head = (node.fn, node.color == BLUE or node.placeholder) if with_color else (node.fn,)
    return (head, tuple(kids))


def equivalent(a, b, ordered: bool = False, with_color: bool = True) -> bool:
    """Compare trees (or forests) by labels, optionally ignoring sibling order.

    With ``with_color`` a blue/placeholder node only matches another
    blue/placeholder node.
    """
    fa = [] if a is None else ([a] if isinstance(a, CallNode) else list(a))
    fb = [] if b is None else ([b] if isinstance(b, CallNode) else list(b))
    ka = [_key(t, ordered, with_color) for t in fa]
    kb = [_key(t, ordered, with_color) for t in fb]
    if not ordered:
        ka.sort()
        kb.sort()
    return ka == kb


def preorder(tree: CallNode) -> list:
    return [n.fn for n in tree.iter()]


def preorder_distance(tree: CallNode, located: str, actual: str) -> int:
    """Distance between the first preorder occurrences of two functions."""
    seq = preorder(tree)
    for fn in (located, actual):
        if fn not in seq:
            raise CallTreeError(f"function {fn!r} does not occur in the tree")
    return abs(seq.index(located) - seq.index(actual))


def tree_edit_distance(t1: Optional[CallNode], t2: Optional[CallNode]) -> int:
    """Unit-cost ordered tree edit distance (Zhang-Shasha)."""
    from afetm._ted import ted

    return ted(t1, t2)
