"""Exact s-t minimum cut on sparse capacitated graphs.

The solver is a Boykov-Kolmogorov style augmenting-path algorithm: two search
trees grow from the terminals and are repaired (not rebuilt) after every
augmentation, which is what makes it fast on lattice graphs.

Node side convention used throughout the package: a node on the SOURCE side has
its sink link severed, so ``sink_caps[i]`` is the price of putting ``i`` on the
source side and ``source_caps[i]`` the price of putting it on the sink side.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

INF = np.inf
INF_FACTOR = 1e12

SOURCE = True
SINK = False

_NONE = -1
_TERMINAL = -2
_ORPHAN = -3


class InfeasibleCutError(RuntimeError):
    """Every cut severs an INF link; the constraints encoded in the graph contradict."""


@dataclass(frozen=True)
class FlowGraph:
    """Immutable s-t graph. Capacities are float64; ``inf`` marks hard links.

    ``source_caps``/``sink_caps`` are per-node terminal capacities, and
    ``edge_u, edge_v, edge_cap, edge_rcap`` list the undirected node pairs with
    capacity ``u -> v`` and ``v -> u``.
    """

    node_count: int
    source_caps: np.ndarray
    sink_caps: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    edge_cap: np.ndarray
    edge_rcap: np.ndarray

    def __post_init__(self):
        n = self.node_count
        if self.source_caps.shape != (n,) or self.sink_caps.shape != (n,):
            raise ValueError("terminal capacity arrays must have one entry per node")
        m = self.edge_u.shape[0]
        for arr in (self.edge_v, self.edge_cap, self.edge_rcap):
            if arr.shape != (m,):
                raise ValueError("edge arrays must have equal length")
        for arr in (self.source_caps, self.sink_caps, self.edge_cap, self.edge_rcap):
            if np.any(np.isnan(arr)) or np.any(arr < 0):
                raise ValueError("capacities must be non-negative")
        if m:
            if np.any(self.edge_u == self.edge_v):
                raise ValueError("self loops are not allowed")
            if min(self.edge_u.min(), self.edge_v.min()) < 0 or max(
                self.edge_u.max(), self.edge_v.max()
            ) >= n:
                raise ValueError("edge endpoint out of range")

    @property
    def inf_value(self) -> float:
        """Finite stand-in for INF: 1e12 times the largest finite capacity."""
        largest = 0.0
        for arr in (self.source_caps, self.sink_caps, self.edge_cap, self.edge_rcap):
            finite = arr[np.isfinite(arr)]
            if finite.size:
                largest = max(largest, float(finite.max()))
        return INF_FACTOR * (largest if largest > 0 else 1.0)


@dataclass(frozen=True)
class CutResult:
    side: np.ndarray  # bool per node, True = SOURCE
    cut_value: float
    flow_value: float


class GraphBuilder:
    """Accumulates terminal costs and pairwise capacities, then freezes a FlowGraph.

    Unary terms are given as *costs of a label* rather than as capacities: they
    may be negative, and the per-node constant is dropped when the graph is
    frozen.  ``inf`` is allowed on either label cost (hard constraint).
    """

    def __init__(self, node_count: int):
        self.node_count = int(node_count)
        self._cost_source = np.zeros(self.node_count)
        self._cost_sink = np.zeros(self.node_count)
        self._edges: list[tuple[np.ndarray, ...]] = []

    def add_unary(self, nodes, cost_source=0.0, cost_sink=0.0):
        """Add cost for labelling ``nodes`` SOURCE (resp. SINK)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        np.add.at(self._cost_source, nodes, np.broadcast_to(cost_source, nodes.shape))
        np.add.at(self._cost_sink, nodes, np.broadcast_to(cost_sink, nodes.shape))

    def add_edges(self, u, v, cap, rcap):
        """Pairwise capacities: ``cap`` is paid when u is SOURCE and v SINK."""
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        cap = np.broadcast_to(np.asarray(cap, dtype=float), u.shape).copy()
        rcap = np.broadcast_to(np.asarray(rcap, dtype=float), u.shape).copy()
        if np.any(cap < 0) or np.any(rcap < 0):
            raise ValueError("pairwise capacities must be non-negative")
        if u.size:
            self._edges.append((u, v, cap, rcap))

    def add_pairwise(self, u, v, c_ss, c_st, c_ts, c_tt):
        """Add a submodular 2x2 cost table per pair (rows: label of u, SOURCE first)."""
        b, c, d = reparameterize_pairwise(c_ss, c_st, c_ts, c_tt)
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        # B is paid when u is SOURCE, C when v is SINK, D on either disagreement.
        self.add_unary(u, cost_source=b)
        self.add_unary(v, cost_sink=c)
        self.add_edges(u, v, d, d)

    def build(self) -> FlowGraph:
        cs, ct = self._cost_source, self._cost_sink
        if np.any(np.isinf(cs) & np.isinf(ct)):
            raise InfeasibleCutError("a node is forbidden from both terminals")
        shift = np.minimum(cs, ct)
        shift[~np.isfinite(shift)] = 0.0
        if self._edges:
            u, v, cap, rcap = (np.concatenate(parts) for parts in zip(*self._edges))
            keep = (cap > 0) | (rcap > 0)
            u, v, cap, rcap = u[keep], v[keep], cap[keep], rcap[keep]
        else:
            u = v = np.zeros(0, dtype=np.int64)
            cap = rcap = np.zeros(0)
        return FlowGraph(
            node_count=self.node_count,
            # severing the source link means the node ends on the SINK side
            source_caps=ct - shift,
            sink_caps=cs - shift,
            edge_u=u,
            edge_v=v,
            edge_cap=cap,
            edge_rcap=rcap,
        )


def reparameterize_pairwise(c_ss, c_st, c_ts, c_tt):
    """Decompose a 2x2 pairwise table into link costs ``(B, C, D)``.

    ``[[C_SS, C_ST], [C_TS, C_TT]] = A*1 + B*[[1,1],[0,0]] + C*[[0,1],[0,1]]
    + D*[[0,1],[1,0]]`` with the constant ``A`` discarded.  ``B`` is charged
    when the first node is SOURCE, ``C`` when the second is SINK and ``D`` on
    the pair edge; ``B`` and ``C`` may be negative, the graph builder moves
    them to the opposite terminal.  Works elementwise on arrays.
    """
    c_ss, c_st, c_ts, c_tt = (np.asarray(x, dtype=float) for x in (c_ss, c_st, c_ts, c_tt))
    a = (c_ss + c_tt + c_ts - c_st) / 2.0
    b = c_ss - a
    c = c_tt - a
    d = (c_st + c_ts - c_ss - c_tt) / 2.0
    tol = 1e-12 * np.maximum(1.0, np.abs(c_st) + np.abs(c_ts) + np.abs(c_ss) + np.abs(c_tt))
    if np.any(d < -tol):
        raise ValueError("pairwise table is not submodular (C_ST + C_TS < C_SS + C_TT)")
    d = np.maximum(d, 0.0)
    if d.ndim == 0:
        return float(b), float(c), float(d)
    return b, c, d


def _build_arcs(g: FlowGraph, inf_value: float):
    m = g.edge_u.shape[0]
    tails = np.empty(2 * m, dtype=np.int64)
    heads = np.empty(2 * m, dtype=np.int64)
    caps = np.empty(2 * m, dtype=np.float64)
    tails[0::2], tails[1::2] = g.edge_u, g.edge_v
    heads[0::2], heads[1::2] = g.edge_v, g.edge_u
    caps[0::2], caps[1::2] = g.edge_cap, g.edge_rcap
    caps[np.isinf(caps)] = inf_value
    order = np.argsort(tails, kind="stable")
    rank = np.empty(2 * m, dtype=np.int64)
    rank[order] = np.arange(2 * m)
    sister = rank[order ^ 1]
    first = np.zeros(g.node_count + 1, dtype=np.int64)
    np.cumsum(np.bincount(tails, minlength=g.node_count), out=first[1:])
    return first, heads[order], caps[order], sister


@numba.njit(cache=True, nogil=True)
def _bk_maxflow(first, head, rcap, sister, tr_cap):
    """Boykov-Kolmogorov max-flow. Mutates ``rcap``/``tr_cap``; returns (flow, in_source_tree)."""
    n = tr_cap.shape[0]
    parent = np.full(n, _NONE, dtype=np.int64)
    is_sink = np.zeros(n, dtype=np.bool_)
    ts = np.zeros(n, dtype=np.int64)
    dist = np.zeros(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    in_queue = np.zeros(n, dtype=np.bool_)
    orphans = np.empty(n, dtype=np.int64)
    q_head = 0
    q_len = 0
    flow = 0.0
    time = 0

    for i in range(n):
        if tr_cap[i] > 0:
            parent[i] = _TERMINAL
            dist[i] = 1
        elif tr_cap[i] < 0:
            parent[i] = _TERMINAL
            is_sink[i] = True
            dist[i] = 1
        else:
            continue
        queue[(q_head + q_len) % n] = i
        q_len += 1
        in_queue[i] = True

    while q_len > 0:
        i = queue[q_head]
        q_head = (q_head + 1) % n
        q_len -= 1
        in_queue[i] = False
        if parent[i] == _NONE:
            continue

        # grow the tree of i until it touches the other tree
        bridge = -1
        for a in range(first[i], first[i + 1]):
            j = head[a]
            if not is_sink[i]:
                if rcap[a] <= 0:
                    continue
            else:
                if rcap[sister[a]] <= 0:
                    continue
            if parent[j] == _NONE:
                is_sink[j] = is_sink[i]
                parent[j] = sister[a]
                ts[j] = ts[i]
                dist[j] = dist[i] + 1
                if not in_queue[j]:
                    queue[(q_head + q_len) % n] = j
                    q_len += 1
                    in_queue[j] = True
            elif is_sink[j] != is_sink[i]:
                bridge = a if not is_sink[i] else sister[a]
                break
        if bridge < 0:
            continue

        # bridge runs from the source tree into the sink tree
        time += 1
        s_end = head[sister[bridge]]
        t_end = head[bridge]
        bottleneck = rcap[bridge]
        k = s_end
        while parent[k] != _TERMINAL:
            c = rcap[sister[parent[k]]]
            if c < bottleneck:
                bottleneck = c
            k = head[parent[k]]
        if tr_cap[k] < bottleneck:
            bottleneck = tr_cap[k]
        k = t_end
        while parent[k] != _TERMINAL:
            c = rcap[parent[k]]
            if c < bottleneck:
                bottleneck = c
            k = head[parent[k]]
        if -tr_cap[k] < bottleneck:
            bottleneck = -tr_cap[k]

        n_orph = 0
        rcap[bridge] -= bottleneck
        rcap[sister[bridge]] += bottleneck
        k = s_end
        while parent[k] != _TERMINAL:
            a = parent[k]
            rcap[a] += bottleneck
            rcap[sister[a]] -= bottleneck
            nxt = head[a]
            if rcap[sister[a]] <= 0:
                parent[k] = _ORPHAN
                orphans[n_orph] = k
                n_orph += 1
            k = nxt
        tr_cap[k] -= bottleneck
        if tr_cap[k] <= 0:
            tr_cap[k] = 0.0
            parent[k] = _ORPHAN
            orphans[n_orph] = k
            n_orph += 1
        k = t_end
        while parent[k] != _TERMINAL:
            a = parent[k]
            rcap[sister[a]] += bottleneck
            rcap[a] -= bottleneck
            nxt = head[a]
            if rcap[a] <= 0:
                parent[k] = _ORPHAN
                orphans[n_orph] = k
                n_orph += 1
            k = nxt
        tr_cap[k] += bottleneck
        if tr_cap[k] >= 0:
            tr_cap[k] = 0.0
            parent[k] = _ORPHAN
            orphans[n_orph] = k
            n_orph += 1
        flow += bottleneck

        # adoption: orphans are processed FIFO; new orphans are appended
        o_pos = 0
        while o_pos < n_orph:
            o = orphans[o_pos]
            o_pos += 1
            sink_tree = is_sink[o]
            best_arc = -1
            best_d = 1 << 62
            for a in range(first[o], first[o + 1]):
                if sink_tree:
                    if rcap[a] <= 0:
                        continue
                else:
                    if rcap[sister[a]] <= 0:
                        continue
                j = head[a]
                if parent[j] == _NONE or is_sink[j] != sink_tree:
                    continue
                d = 0
                k = j
                valid = True
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
                        valid = False
                        break
                    k = head[pa]
                if not valid:
                    continue
                if d < best_d:
                    best_d = d
                    best_arc = a
                k = j
                while ts[k] != time:
                    ts[k] = time
                    dist[k] = d
                    d -= 1
                    k = head[parent[k]]
            if best_arc >= 0:
                parent[o] = best_arc
                ts[o] = time
                dist[o] = best_d + 1
                continue
            for a in range(first[o], first[o + 1]):
                j = head[a]
                if parent[j] == _NONE or is_sink[j] != sink_tree:
                    continue
                if sink_tree:
                    has_res = rcap[a] > 0
                else:
                    has_res = rcap[sister[a]] > 0
                if has_res and not in_queue[j]:
                    queue[(q_head + q_len) % n] = j
                    q_len += 1
                    in_queue[j] = True
                pj = parent[j]
                if pj >= 0 and head[pj] == o:
                    parent[j] = _ORPHAN
                    orphans[n_orph] = j
                    n_orph += 1
            parent[o] = _NONE

        if parent[i] != _NONE and not in_queue[i]:
            queue[(q_head + q_len) % n] = i
            q_len += 1
            in_queue[i] = True

    in_source = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if parent[i] != _NONE and not is_sink[i]:
            in_source[i] = True
    return flow, in_source


def cut_cost(g: FlowGraph, side: np.ndarray) -> float:
    """Sum of capacities severed by the partition ``side`` (True = SOURCE)."""
    side = np.asarray(side, dtype=bool)
    total = float(np.sum(g.sink_caps[side])) + float(np.sum(g.source_caps[~side]))
    su, sv = side[g.edge_u], side[g.edge_v]
    total += float(np.sum(g.edge_cap[su & ~sv])) + float(np.sum(g.edge_rcap[sv & ~su]))
    return total


def solve_min_cut(g: FlowGraph) -> CutResult:
    """Minimum s-t cut of ``g``.

    The returned partition puts on the SOURCE side exactly the nodes reachable
    from the source in the final residual graph, so among equal-value cuts the
    source side is minimal.
    """
    inf_value = g.inf_value
    first, head, rcap, sister = _build_arcs(g, inf_value)
    src = np.where(np.isinf(g.source_caps), inf_value, g.source_caps)
    snk = np.where(np.isinf(g.sink_caps), inf_value, g.sink_caps)
    base_flow = float(np.minimum(src, snk).sum())
    tr_cap = (src - snk).astype(np.float64)
    if g.node_count == 0:
        return CutResult(np.zeros(0, dtype=bool), 0.0, 0.0)
    flow, side = _bk_maxflow(first, head, rcap, sister, tr_cap)
    flow += base_flow
    if flow >= inf_value:
        raise InfeasibleCutError("minimum cut severs an INF link")
    return CutResult(side=side, cut_value=cut_cost(g, side), flow_value=flow)
