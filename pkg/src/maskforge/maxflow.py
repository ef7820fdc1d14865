"""Exact s-t max-flow / min-cut on sparse graphs (Boykov-Kolmogorov search trees).

Node ids coincide with row-major pixel indices when the network comes
from an image, so a cut maps straight back onto a mask.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

_FREE, _S, _T = 0, 1, 2
_TERMINAL, _ORPHAN, _NONE = -1, -2, -3


@dataclass(frozen=True)
class FlowNetwork:
    node_count: int
    source_caps: np.ndarray  # capacity s -> i
    sink_caps: np.ndarray  # capacity i -> t
    edge_u: np.ndarray
    edge_v: np.ndarray
    cap_uv: np.ndarray
    cap_vu: np.ndarray
    offset: float = 0.0  # energy constant not represented by any edge

    @classmethod
    def from_lists(cls, node_count, terminal_caps, edges=()) -> "FlowNetwork":
        """Build from [(cap_from_source, cap_to_sink), ...] and [(u, v, cap_uv, cap_vu), ...]."""
        tc = np.asarray(terminal_caps, dtype=float).reshape(node_count, 2)
        e = np.asarray(list(edges), dtype=float).reshape(-1, 4)
        return cls(
            node_count,
            tc[:, 0].copy(),
            tc[:, 1].copy(),
            e[:, 0].astype(np.int64),
            e[:, 1].astype(np.int64),
            e[:, 2].copy(),
            e[:, 3].copy(),
        )

    def validate(self) -> None:
        n = self.node_count
        if n < 0 or self.source_caps.shape != (n,) or self.sink_caps.shape != (n,):
            raise ValueError("terminal capacity arrays must have one entry per node")
        m = len(self.edge_u)
        if not (len(self.edge_v) == len(self.cap_uv) == len(self.cap_vu) == m):
            raise ValueError("edge arrays differ in length")
        caps = np.concatenate([self.source_caps, self.sink_caps, self.cap_uv, self.cap_vu])
        if not np.all(np.isfinite(caps)):
            raise ValueError("capacities must be finite")
        if np.any(caps < 0):
            raise ValueError("capacities must be non-negative")
        if m:
            if np.any((self.edge_u < 0) | (self.edge_u >= n) | (self.edge_v < 0) | (self.edge_v >= n)):
                raise ValueError("edge endpoint outside 0..node_count-1")
            if np.any(self.edge_u == self.edge_v):
                raise ValueError("self-loops are not allowed")


@dataclass(frozen=True)
class CutResult:
    max_flow_value: float
    source_side: np.ndarray  # bool per node; True = source side


def verify_cut(net: FlowNetwork, result: CutResult | np.ndarray) -> float:
    """Capacity of the s-t cut given by a source-side indicator."""
    side = result.source_side if isinstance(result, CutResult) else np.asarray(result, dtype=bool)
    total = net.source_caps[~side].sum() + net.sink_caps[side].sum()
    su, sv = side[net.edge_u], side[net.edge_v]
    total += net.cap_uv[su & ~sv].sum() + net.cap_vu[~su & sv].sum()
    return float(total)


def max_flow(net: FlowNetwork) -> CutResult:
    """Maximum s-t flow and the minimum cut whose source side is the residual reach of s."""
    net.validate()
    n = net.node_count
    src = net.source_caps.tolist()
    snk = net.sink_caps.tolist()

    # Push what each node can route straight from s to t.
    flow = 0.0
    tr = [0.0] * n  # >0: residual s->i, <0: residual i->t
    for i in range(n):
        f = min(src[i], snk[i])
        flow += f
        tr[i] = src[i] - snk[i]

    # Arc 2e is u->v, arc 2e+1 is v->u; the reverse of arc a is a ^ 1.
    m = len(net.edge_u)
    head = [0] * (2 * m)
    res = [0.0] * (2 * m)
    adj = [[] for _ in range(n)]
    for e, (u, v, cuv, cvu) in enumerate(
        zip(net.edge_u.tolist(), net.edge_v.tolist(), net.cap_uv.tolist(), net.cap_vu.tolist())
    ):
        if cuv == 0.0 and cvu == 0.0:
            continue
        a = 2 * e
        head[a], head[a + 1] = v, u
        res[a], res[a + 1] = cuv, cvu
        adj[u].append(a)
        adj[v].append(a + 1)

    tree = [_FREE] * n
    parent = [_NONE] * n  # arc from node towards its parent
    active = deque()
    for i in range(n):
        if tr[i] > 0:
            tree[i], parent[i] = _S, _TERMINAL
            active.append(i)
        elif tr[i] < 0:
            tree[i], parent[i] = _T, _TERMINAL
            active.append(i)

    def rooted(x: int) -> bool:
        while True:
            pa = parent[x]
            if pa == _TERMINAL:
                return True
            if pa < 0:
                return False
            x = head[pa]

    orphans = deque()
    while True:
        # Growth: find an arc joining the two trees, oriented S -> T.
        bridge = -1
        while active:
            p = active[0]
            tp = tree[p]
            if tp == _FREE:
                active.popleft()
                continue
            for a in adj[p]:
                if tp == _S:
                    if res[a] <= 0.0:
                        continue
                elif res[a ^ 1] <= 0.0:
                    continue
                q = head[a]
                tq = tree[q]
                if tq == _FREE:
                    tree[q], parent[q] = tp, a ^ 1
                    active.append(q)
                elif tq != tp:
                    bridge = a if tp == _S else a ^ 1
                    break
            if bridge >= 0:
                break
            active.popleft()
        if bridge < 0:
            break

        # Augmentation along s -> ... -> u -> v -> ... -> t.
        u, v = head[bridge ^ 1], head[bridge]
        bottleneck = res[bridge]
        x = u
        while parent[x] != _TERMINAL:
            a = parent[x]
            if res[a ^ 1] < bottleneck:
                bottleneck = res[a ^ 1]
            x = head[a]
        if tr[x] < bottleneck:
            bottleneck = tr[x]
        x = v
        while parent[x] != _TERMINAL:
            a = parent[x]
            if res[a] < bottleneck:
                bottleneck = res[a]
            x = head[a]
        if -tr[x] < bottleneck:
            bottleneck = -tr[x]

        res[bridge] -= bottleneck
        res[bridge ^ 1] += bottleneck
        x = u
        while parent[x] != _TERMINAL:
            a = parent[x]
            nxt = head[a]
            res[a ^ 1] -= bottleneck
            res[a] += bottleneck
            if res[a ^ 1] <= 0.0:
                parent[x] = _ORPHAN
                orphans.append(x)
            x = nxt
        tr[x] -= bottleneck
        if tr[x] <= 0.0:
            parent[x] = _ORPHAN
            orphans.append(x)
        x = v
        while parent[x] != _TERMINAL:
            a = parent[x]
            nxt = head[a]
            res[a] -= bottleneck
            res[a ^ 1] += bottleneck
            if res[a] <= 0.0:
                parent[x] = _ORPHAN
                orphans.append(x)
            x = nxt
        tr[x] += bottleneck
        if tr[x] >= 0.0:
            parent[x] = _ORPHAN
            orphans.append(x)
        flow += bottleneck

        # Adoption: reattach orphans or release them (and their subtrees).
        while orphans:
            p = orphans.popleft()
            if parent[p] != _ORPHAN:
                continue
            tp = tree[p]
            new_parent = _NONE
            for a in adj[p]:
                q = head[a]
                if tree[q] != tp:
                    continue
                if (res[a ^ 1] if tp == _S else res[a]) <= 0.0:
                    continue
                if rooted(q):
                    new_parent = a
                    break
            if new_parent != _NONE:
                parent[p] = new_parent
                continue
            for a in adj[p]:
                q = head[a]
                if tree[q] != tp:
                    continue
                if (res[a ^ 1] if tp == _S else res[a]) > 0.0:
                    active.append(q)
                pq = parent[q]
                if pq >= 0 and head[pq] == p:
                    parent[q] = _ORPHAN
                    orphans.append(q)
            tree[p], parent[p] = _FREE, _NONE

    # Source side = everything reachable from s in the residual graph.
    side = np.zeros(n, dtype=bool)
    stack = [i for i in range(n) if tr[i] > 0]
    for i in stack:
        side[i] = True
    while stack:
        p = stack.pop()
        for a in adj[p]:
            q = head[a]
            if res[a] > 0.0 and not side[q]:
                side[q] = True
                stack.append(q)
    return CutResult(flow, side)
