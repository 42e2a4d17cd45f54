"""Exact s-t max-flow / min-cut on sparse graphs with terminal capacities.

Two solvers sit behind :class:`FlowGraph`:

* ``"bk"``: the dual search-tree augmenting-path algorithm of Boykov and
  Kolmogorov, compiled with numba. This is the default and the one used by
  alpha-expansion.
* ``"ek"``: plain BFS augmenting paths (Edmonds-Karp), kept for differential
  testing against ``"bk"``.

Capacities are 64-bit floats. Terminal capacities follow the usual
``add_tweights`` convention: a node gets a capacity from the source and a
capacity to the sink, and only their difference matters for the cut.
"""

from __future__ import annotations

from collections import deque
from typing import Iterable, TextIO

import numba
import numpy as np

__all__ = [
    "FlowGraph",
    "FlowGraphError",
    "SOURCE",
    "SINK",
    "SATURATION_TOL",
    "brute_force_min_cut",
    "read_dimacs",
]

SOURCE = 0
SINK = 1
SATURATION_TOL = 1e-12

_NONE = -1
_TERMINAL = -2
_ORPHAN = -3
_INF_DIST = 1 << 60


class FlowGraphError(ValueError):
    """Raised on malformed graph construction or misuse of the solver."""


@numba.njit(cache=True, nogil=True)
def _bk_maxflow(first, nxt, head, rcap, tr_cap, tol):
    """Run BK on a residual graph stored as adjacency linked lists.

    ``rcap`` and ``tr_cap`` are modified in place. Arc ``a`` and ``a ^ 1`` are
    sisters. Returns (flow, parent, is_sink).
    """
    n = first.shape[0]
    parent = np.full(n, _NONE, dtype=np.int64)
    is_sink = np.zeros(n, dtype=np.bool_)
    ts = np.zeros(n, dtype=np.int64)
    dist = np.zeros(n, dtype=np.int64)

    # FIFO of active nodes; each node sits in it at most once
    active = np.empty(n + 1, dtype=np.int64)
    in_active = np.zeros(n, dtype=np.bool_)
    a_head = 0
    a_tail = 0
    a_cap = n + 1

    orphans = np.empty(n + 1, dtype=np.int64)
    o_head = 0
    o_tail = 0

    flow = 0.0
    for i in range(n):
        if tr_cap[i] > tol:
            parent[i] = _TERMINAL
            is_sink[i] = False
            dist[i] = 1
            active[a_tail] = i
            a_tail = (a_tail + 1) % a_cap
            in_active[i] = True
        elif tr_cap[i] < -tol:
            parent[i] = _TERMINAL
            is_sink[i] = True
            dist[i] = 1
            active[a_tail] = i
            a_tail = (a_tail + 1) % a_cap
            in_active[i] = True

    time = 0
    while a_head != a_tail:
        i = active[a_head]
        a_head = (a_head + 1) % a_cap
        in_active[i] = False
        if parent[i] == _NONE:
            continue

        # growth
        found = -1
        a = first[i]
        if not is_sink[i]:
            while a != -1:
                if rcap[a] > tol:
                    j = head[a]
                    if parent[j] == _NONE:
                        is_sink[j] = False
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                        if not in_active[j]:
                            active[a_tail] = j
                            a_tail = (a_tail + 1) % a_cap
                            in_active[j] = True
                    elif is_sink[j]:
                        found = a
                        break
                    elif ts[j] <= ts[i] and dist[j] > dist[i]:
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                a = nxt[a]
        else:
            while a != -1:
                if rcap[a ^ 1] > tol:
                    j = head[a]
                    if parent[j] == _NONE:
                        is_sink[j] = True
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                        if not in_active[j]:
                            active[a_tail] = j
                            a_tail = (a_tail + 1) % a_cap
                            in_active[j] = True
                    elif not is_sink[j]:
                        found = a ^ 1
                        break
                    elif ts[j] <= ts[i] and dist[j] > dist[i]:
                        parent[j] = a ^ 1
                        ts[j] = ts[i]
                        dist[j] = dist[i] + 1
                a = nxt[a]

        time += 1
        if found == -1:
            continue

        # i may still have unexplored arcs; keep it active
        if not in_active[i]:
            active[a_tail] = i
            a_tail = (a_tail + 1) % a_cap
            in_active[i] = True

        # augmentation along source-tree path + found arc + sink-tree path
        mid = found
        bottleneck = rcap[mid]
        k = head[mid ^ 1]
        while parent[k] != _TERMINAL:
            pa = parent[k]
            if rcap[pa ^ 1] < bottleneck:
                bottleneck = rcap[pa ^ 1]
            k = head[pa]
        if tr_cap[k] < bottleneck:
            bottleneck = tr_cap[k]
        k = head[mid]
        while parent[k] != _TERMINAL:
            pa = parent[k]
            if rcap[pa] < bottleneck:
                bottleneck = rcap[pa]
            k = head[pa]
        if -tr_cap[k] < bottleneck:
            bottleneck = -tr_cap[k]

        rcap[mid ^ 1] += bottleneck
        rcap[mid] -= bottleneck
        k = head[mid ^ 1]
        while parent[k] != _TERMINAL:
            pa = parent[k]
            rcap[pa] += bottleneck
            rcap[pa ^ 1] -= bottleneck
            nk = head[pa]
            if rcap[pa ^ 1] <= tol:
                parent[k] = _ORPHAN
                orphans[o_tail] = k
                o_tail = (o_tail + 1) % a_cap
            k = nk
        tr_cap[k] -= bottleneck
        if tr_cap[k] <= tol:
            parent[k] = _ORPHAN
            orphans[o_tail] = k
            o_tail = (o_tail + 1) % a_cap
        k = head[mid]
        while parent[k] != _TERMINAL:
            pa = parent[k]
            rcap[pa ^ 1] += bottleneck
            rcap[pa] -= bottleneck
            nk = head[pa]
            if rcap[pa] <= tol:
                parent[k] = _ORPHAN
                orphans[o_tail] = k
                o_tail = (o_tail + 1) % a_cap
            k = nk
        tr_cap[k] += bottleneck
        if tr_cap[k] >= -tol:
            parent[k] = _ORPHAN
            orphans[o_tail] = k
            o_tail = (o_tail + 1) % a_cap
        flow += bottleneck

        # adoption
        time += 1
        while o_head != o_tail:
            i2 = orphans[o_head]
            o_head = (o_head + 1) % a_cap
            sink_side = is_sink[i2]
            d_min = _INF_DIST
            a_min = _NONE
            a0 = first[i2]
            while a0 != -1:
                if sink_side:
                    ok = rcap[a0] > tol
                else:
                    ok = rcap[a0 ^ 1] > tol
                j = head[a0]
                if ok and is_sink[j] == sink_side and parent[j] != _NONE:
                    d = 0
                    k = j
                    while True:
                        if ts[k] == time:
                            d += dist[k]
                            break
                        pa = parent[k]
                        d += 1
                        if pa == _TERMINAL:
                            ts[k] = time
                            dist[k] = 1
                            break
                        if pa == _ORPHAN:
                            d = _INF_DIST
                            break
                        k = head[pa]
                    if d < _INF_DIST:
                        if d < d_min:
                            a_min = a0
                            d_min = d
                        k = j
                        while ts[k] != time:
                            ts[k] = time
                            dist[k] = d
                            d -= 1
                            k = head[parent[k]]
                a0 = nxt[a0]

            parent[i2] = a_min
            if a_min != _NONE:
                ts[i2] = time
                dist[i2] = d_min + 1
            else:
                # i2 becomes free; its children become orphans
                a0 = first[i2]
                while a0 != -1:
                    j = head[a0]
                    if is_sink[j] == sink_side and parent[j] != _NONE:
                        if sink_side:
                            ok = rcap[a0] > tol
                        else:
                            ok = rcap[a0 ^ 1] > tol
                        if ok and not in_active[j]:
                            active[a_tail] = j
                            a_tail = (a_tail + 1) % a_cap
                            in_active[j] = True
                        pj = parent[j]
                        if pj != _TERMINAL and pj != _ORPHAN and head[pj] == i2:
                            parent[j] = _ORPHAN
                            orphans[o_tail] = j
                            o_tail = (o_tail + 1) % a_cap
                    a0 = nxt[a0]

    return flow, parent, is_sink


class FlowGraph:
    """Directed graph with source/sink terminal capacities.

    >>> g = FlowGraph()
    >>> a, b = g.add_node(2)
    >>> g.add_tweights(a, 3.0, 0.0)
    >>> g.add_tweights(b, 0.0, 2.0)
    >>> g.add_edge(a, b, 1.0, 0.0)
    >>> g.solve()
    1.0
    """

    def __init__(self, algorithm: str = "bk"):
        if algorithm not in ("bk", "ek"):
            raise FlowGraphError(f"unknown max-flow algorithm {algorithm!r}")
        self.algorithm = algorithm
        self._n = 0
        self._src = np.zeros(0)
        self._snk = np.zeros(0)
        self._eu: list[np.ndarray] = []
        self._ev: list[np.ndarray] = []
        self._ecap: list[np.ndarray] = []
        self._erev: list[np.ndarray] = []
        self._solved = False
        self._flow = 0.0
        self._side: np.ndarray | None = None
        self._arc_flow: np.ndarray | None = None
        self._term_flow: np.ndarray | None = None

    # -- construction -----------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self._n

    @property
    def n_edges(self) -> int:
        return int(sum(len(u) for u in self._eu))

    def add_node(self, n: int = 1) -> range:
        """Append ``n`` nodes and return their (contiguous) ids."""
        if n < 1:
            raise FlowGraphError("add_node needs n >= 1")
        start = self._n
        self._n += n
        self._src = np.concatenate([self._src, np.zeros(n)])
        self._snk = np.concatenate([self._snk, np.zeros(n)])
        self._invalidate()
        return range(start, self._n)

    def add_edge(self, u: int, v: int, cap_uv: float, cap_vu: float = 0.0) -> None:
        """Add arc u->v with capacity ``cap_uv`` and its reverse with ``cap_vu``."""
        self.add_edges(np.array([u]), np.array([v]), np.array([cap_uv]), np.array([cap_vu]))

    def add_edges(self, us, vs, caps, rev_caps=None) -> None:
        """Bulk version of :meth:`add_edge`."""
        us = np.asarray(us, dtype=np.int64).ravel()
        vs = np.asarray(vs, dtype=np.int64).ravel()
        caps = np.asarray(caps, dtype=np.float64).ravel()
        rev = np.zeros_like(caps) if rev_caps is None else np.asarray(rev_caps, dtype=np.float64).ravel()
        if not (len(us) == len(vs) == len(caps) == len(rev)):
            raise FlowGraphError("edge arrays have different lengths")
        if len(us) == 0:
            return
        self._check_ids(us)
        self._check_ids(vs)
        if np.any(us == vs):
            raise FlowGraphError("self-loops are not allowed")
        self._check_caps(caps)
        self._check_caps(rev)
        self._eu.append(us)
        self._ev.append(vs)
        self._ecap.append(caps)
        self._erev.append(rev)
        self._invalidate()

    def add_tweights(self, u, cap_source, cap_sink) -> None:
        """Add terminal capacities source->u and u->sink (arrays allowed)."""
        u = np.asarray(u, dtype=np.int64).ravel()
        cs = np.broadcast_to(np.asarray(cap_source, dtype=np.float64), u.shape)
        ct = np.broadcast_to(np.asarray(cap_sink, dtype=np.float64), u.shape)
        self._check_ids(u)
        self._check_caps(cs)
        self._check_caps(ct)
        np.add.at(self._src, u, cs)
        np.add.at(self._snk, u, ct)
        self._invalidate()

    def total_capacity(self) -> float:
        """Sum of every finite capacity in the graph."""
        tot = float(self._src.sum() + self._snk.sum())
        for c, r in zip(self._ecap, self._erev):
            tot += float(c.sum() + r.sum())
        return tot

    def infinite_capacity(self) -> float:
        """A capacity that no minimum cut can ever afford to sever."""
        return 1.0 + self.total_capacity()

    # -- solving ----------------------------------------------------------

    def solve(self) -> float:
        """Compute the maximum flow; returns its value (= min-cut capacity)."""
        if self._n == 0:
            raise FlowGraphError("graph has no nodes")
        us, vs, caps, rev = self._edge_arrays()
        base = np.minimum(self._src, self._snk)
        tr_cap = self._src - self._snk
        if self.algorithm == "bk":
            flow, side, rcap, tr_final = self._solve_bk(us, vs, caps, rev, tr_cap.copy())
        else:
            flow, side, rcap, tr_final = self._solve_ek(us, vs, caps, rev, tr_cap.copy())
        self._flow = float(flow + base.sum())
        self._side = side
        # net flow on each edge pair in the u->v direction
        self._arc_flow = caps - rcap[0::2]
        self._term_flow = tr_cap - tr_final
        self._solved = True
        return self._flow

    def min_cut_side(self, node: int) -> int:
        """Return :data:`SOURCE` or :data:`SINK` for ``node`` after :meth:`solve`."""
        if not self._solved:
            raise FlowGraphError("call solve() first")
        if not 0 <= node < self._n:
            raise FlowGraphError(f"invalid node id {node}")
        return int(self._side[node])

    def cut_sides(self) -> np.ndarray:
        """Vector of sides for all nodes (0 = source, 1 = sink)."""
        if not self._solved:
            raise FlowGraphError("call solve() first")
        return self._side.copy()

    def cut_capacity(self, sides: np.ndarray | None = None) -> float:
        """Capacity of the cut given by ``sides`` (defaults to the solved cut)."""
        if sides is None:
            sides = self.cut_sides()
        sides = np.asarray(sides).astype(bool)
        cost = float(self._src[sides].sum() + self._snk[~sides].sum())
        us, vs, caps, rev = self._edge_arrays()
        cost += float(caps[~sides[us] & sides[vs]].sum())
        cost += float(rev[sides[us] & ~sides[vs]].sum())
        return cost

    def conservation_violation(self) -> float:
        """Max |inflow - outflow| over non-terminal nodes of the final flow."""
        if not self._solved:
            raise FlowGraphError("call solve() first")
        us, vs, _, _ = self._edge_arrays()
        excess = self._term_flow.copy()
        np.add.at(excess, us, -self._arc_flow)
        np.add.at(excess, vs, self._arc_flow)
        return float(np.abs(excess).max()) if self._n else 0.0

    def capacity_violation(self) -> float:
        """Largest amount by which any arc flow exceeds its capacity."""
        if not self._solved:
            raise FlowGraphError("call solve() first")
        _, _, caps, rev = self._edge_arrays()
        f = self._arc_flow
        over = np.concatenate([f - caps, -f - rev, [0.0]])
        return float(over.max())

    def copy(self) -> "FlowGraph":
        """Unsolved copy of the same graph."""
        g = FlowGraph(self.algorithm)
        g._n = self._n
        g._src = self._src.copy()
        g._snk = self._snk.copy()
        g._eu = list(self._eu)
        g._ev = list(self._ev)
        g._ecap = list(self._ecap)
        g._erev = list(self._erev)
        return g

    # -- DIMACS -----------------------------------------------------------

    def write_dimacs(self, fh: TextIO) -> None:
        """Write the graph in DIMACS max-flow format (1-based, s = n+1, t = n+2)."""
        us, vs, caps, rev = self._edge_arrays()
        s, t = self._n + 1, self._n + 2
        lines = []
        for i in range(self._n):
            if self._src[i] > 0:
                lines.append(f"a {s} {i + 1} {float(self._src[i])!r}")
            if self._snk[i] > 0:
                lines.append(f"a {i + 1} {t} {float(self._snk[i])!r}")
        for u, v, c, r in zip(us, vs, caps, rev):
            if c > 0:
                lines.append(f"a {u + 1} {v + 1} {float(c)!r}")
            if r > 0:
                lines.append(f"a {v + 1} {u + 1} {float(r)!r}")
        fh.write(f"p max {self._n + 2} {len(lines)}\n")
        fh.write(f"n {s} s\nn {t} t\n")
        fh.write("\n".join(lines))
        fh.write("\n")

    # -- internals --------------------------------------------------------

    def _invalidate(self) -> None:
        self._solved = False

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self._n):
            raise FlowGraphError("invalid node id")

    @staticmethod
    def _check_caps(caps: np.ndarray) -> None:
        if caps.size and not np.all(np.isfinite(caps)):
            raise FlowGraphError("capacities must be finite")
        if caps.size and caps.min() < 0:
            raise FlowGraphError("capacities must be non-negative")

    def _edge_arrays(self):
        if not self._eu:
            z = np.zeros(0, dtype=np.int64)
            return z, z, np.zeros(0), np.zeros(0)
        if len(self._eu) > 1:
            self._eu = [np.concatenate(self._eu)]
            self._ev = [np.concatenate(self._ev)]
            self._ecap = [np.concatenate(self._ecap)]
            self._erev = [np.concatenate(self._erev)]
        return self._eu[0], self._ev[0], self._ecap[0], self._erev[0]

    def _residual_arrays(self, us, vs, caps, rev):
        m = len(us)
        head = np.empty(2 * m, dtype=np.int64)
        head[0::2] = vs
        head[1::2] = us
        tail = np.empty(2 * m, dtype=np.int64)
        tail[0::2] = us
        tail[1::2] = vs
        rcap = np.empty(2 * m)
        rcap[0::2] = caps
        rcap[1::2] = rev
        # adjacency linked lists, built so each node's arcs appear in insertion order
        first = np.full(self._n, -1, dtype=np.int64)
        nxt = np.full(2 * m, -1, dtype=np.int64)
        if m:
            order = np.argsort(tail, kind="stable")
            sorted_tail = tail[order]
            starts = np.ones(2 * m, dtype=bool)
            starts[1:] = sorted_tail[1:] != sorted_tail[:-1]
            first[sorted_tail[starts]] = order[starts]
            same = ~starts[1:]
            nxt[order[:-1][same]] = order[1:][same]
        return first, nxt, head, tail, rcap

    def _solve_bk(self, us, vs, caps, rev, tr_cap):
        first, nxt, head, _, rcap = self._residual_arrays(us, vs, caps, rev)
        flow, parent, is_sink = _bk_maxflow(first, nxt, head, rcap, tr_cap, SATURATION_TOL)
        side = np.where((parent != _NONE) & is_sink, SINK, SOURCE).astype(np.int8)
        return flow, side, rcap, tr_cap

    def _solve_ek(self, us, vs, caps, rev, tr_cap):
        n = self._n
        m = len(us)
        first, nxt, head, tail, rcap = self._residual_arrays(us, vs, caps, rev)
        adj: list[list[int]] = [[] for _ in range(n)]
        for a in range(2 * m):
            adj[tail[a]].append(a)
        tol = SATURATION_TOL
        flow = 0.0
        while True:
            # BFS from the virtual source over positive tr_cap nodes
            pred = np.full(n, -2, dtype=np.int64)
            queue = deque()
            for i in np.flatnonzero(tr_cap > tol):
                pred[i] = -1
                queue.append(int(i))
            end = -1
            while queue:
                i = queue.popleft()
                if tr_cap[i] < -tol:
                    end = i
                    break
                for a in adj[i]:
                    j = head[a]
                    if pred[j] == -2 and rcap[a] > tol:
                        pred[j] = a
                        queue.append(int(j))
            if end == -1:
                break
            b = -tr_cap[end]
            k = end
            while pred[k] != -1:
                b = min(b, rcap[pred[k]])
                k = tail[pred[k]]
            b = min(b, tr_cap[k])
            k = end
            while pred[k] != -1:
                a = pred[k]
                rcap[a] -= b
                rcap[a ^ 1] += b
                k = tail[a]
            tr_cap[k] -= b
            tr_cap[end] += b
            flow += b
        # source side = reachable from source in the residual graph
        seen = np.zeros(n, dtype=bool)
        queue = deque(int(i) for i in np.flatnonzero(tr_cap > tol))
        seen[list(queue)] = True
        while queue:
            i = queue.popleft()
            for a in adj[i]:
                j = head[a]
                if not seen[j] and rcap[a] > tol:
                    seen[j] = True
                    queue.append(int(j))
        side = np.where(seen, SOURCE, SINK).astype(np.int8)
        return flow, side, rcap, tr_cap


def brute_force_min_cut(graph: FlowGraph) -> tuple[float, np.ndarray]:
    """Exhaustive minimum cut over all 2^n node partitions (n <= 20).

    Returns (capacity, sides) where sides[i] == 1 means node i is on the sink side.
    """
    n = graph.n_nodes
    if n > 20:
        raise FlowGraphError("brute force limited to 20 nodes")
    masks = np.arange(1 << n, dtype=np.int64)
    sides = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
    cost = sides @ graph._src + (~sides) @ graph._snk
    us, vs, caps, rev = graph._edge_arrays()
    if len(us):
        su, sv = sides[:, us], sides[:, vs]
        cost = cost + (~su & sv) @ caps + (su & ~sv) @ rev
    best = int(np.argmin(cost))
    return float(cost[best]), sides[best].astype(np.int8)


def read_dimacs(lines: Iterable[str], algorithm: str = "bk") -> FlowGraph:
    """Parse a DIMACS max-flow problem into a :class:`FlowGraph`."""
    g = FlowGraph(algorithm)
    n_total = s = t = None
    arcs = []
    for raw in lines:
        parts = raw.split()
        if not parts or parts[0] == "c":
            continue
        tag = parts[0]
        if tag == "p":
            if len(parts) != 4 or parts[1] != "max":
                raise FlowGraphError(f"bad problem line: {raw.strip()!r}")
            n_total = int(parts[2])
        elif tag == "n":
            if parts[2] == "s":
                s = int(parts[1])
            elif parts[2] == "t":
                t = int(parts[1])
            else:
                raise FlowGraphError(f"bad node line: {raw.strip()!r}")
        elif tag == "a":
            arcs.append((int(parts[1]), int(parts[2]), float(parts[3])))
        else:
            raise FlowGraphError(f"unknown DIMACS line: {raw.strip()!r}")
    if n_total is None or s is None or t is None:
        raise FlowGraphError("DIMACS input lacks problem or terminal lines")
    # non-terminal nodes keep their relative order
    ids = {}
    for k in range(1, n_total + 1):
        if k not in (s, t):
            ids[k] = len(ids)
    if ids:
        g.add_node(len(ids))
    for u, v, c in arcs:
        if u == s and v == t:
            raise FlowGraphError("direct source->sink arcs are not supported")
        if v == s or u == t:
            continue  # never carries flow
        if u == s:
            g.add_tweights(ids[v], c, 0.0)
        elif v == t:
            g.add_tweights(ids[u], 0.0, c)
        else:
            g.add_edge(ids[u], ids[v], c, 0.0)
    return g
