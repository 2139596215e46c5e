"""Branched transport on small planar graphs: flux, Gilbert energy and the
optimal single branch point for one source and two sinks."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class CyclicGraph(ValueError):
    pass


class UnbalancedComponent(ValueError):
    pass


def _find(parent: list[int], i: int) -> int:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@dataclass(frozen=True)
class Graph:
    """Oriented forest with node coordinates and a nodal forcing (positive = source)."""

    coords: np.ndarray
    edges: tuple[tuple[int, int], ...]
    forcing: np.ndarray
    lengths: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=float)
        forcing = np.asarray(self.forcing, dtype=float)
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        n = coords.shape[0]
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError("coords must have shape (n, 2)")
        if forcing.shape != (n,):
            raise ValueError("one forcing value per node")
        parent = list(range(n))
        for a, b in edges:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) references a missing node")
            ra, rb = _find(parent, a), _find(parent, b)
            if ra == rb:
                raise CyclicGraph(f"edge ({a}, {b}) closes a cycle")
            parent[ra] = rb
        roots = np.array([_find(parent, i) for i in range(n)])
        for r in np.unique(roots):
            vals = forcing[roots == r]
            if abs(math.fsum(vals)) > 1e-12 * max(1.0, np.abs(vals).sum()):
                raise UnbalancedComponent(f"forcing on the component of node {r} sums to {math.fsum(vals):g}")
        lengths = np.array([np.hypot(*(coords[b] - coords[a])) for a, b in edges])
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "forcing", forcing)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "lengths", lengths)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]


def graph_flux(g: Graph, priority: Sequence[int] | None = None) -> np.ndarray:
    """Edge flux ``v`` with ``sum_out v - sum_in v = f`` at every node.

    Leaves are eliminated one at a time (lowest ``priority`` first, node index
    by default), never removing the lowest-index node of a tree.  Each flux is
    then the correctly rounded sum of the forcing in the subtree hanging off
    that edge, so the result does not depend on the order.
    """
    n = g.n_nodes
    key = list(range(n)) if priority is None else [int(p) for p in priority]
    parent = list(range(n))
    incident: list[set[int]] = [set() for _ in range(n)]
    for e, (a, b) in enumerate(g.edges):
        incident[a].add(e)
        incident[b].add(e)
        ra, rb = _find(parent, a), _find(parent, b)
        parent[max(ra, rb)] = min(ra, rb)
    keep = {_find(parent, i) for i in range(n)}
    carried: list[list[float]] = [[float(x)] for x in g.forcing]
    v = np.zeros(len(g.edges))
    heap = [(key[i], i) for i in range(n) if len(incident[i]) == 1 and i not in keep]
    heapq.heapify(heap)
    while heap:
        _, k = heapq.heappop(heap)
        if len(incident[k]) != 1:
            continue
        e = incident[k].pop()
        a, b = g.edges[e]
        other = b if a == k else a
        total = math.fsum(carried[k])
        v[e] = total if a == k else -total
        carried[other].extend(carried[k])
        incident[other].discard(e)
        if len(incident[other]) == 1 and other not in keep:
            heapq.heappush(heap, (key[other], other))
    return v


def node_balance(g: Graph, v: np.ndarray) -> np.ndarray:
    """``sum_out v - sum_in v - f`` per node."""
    out = -g.forcing.copy()
    for e, (a, b) in enumerate(g.edges):
        out[a] += v[e]
        out[b] -= v[e]
    return out


def gilbert_energy(g: Graph, alpha: float) -> float:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    v = graph_flux(g)
    return float(np.sum(np.abs(v) ** alpha * g.lengths))


# ---------------------------------------------------------------------------
# Three-terminal branch point


@dataclass(frozen=True)
class BranchResult:
    point: tuple[float, float]
    energy: float
    angle: float  # angle PBQ in radians; nan when B coincides with P or Q


def _y_energy(x, y, O, P, Q, cP, cQ):
    return np.hypot(x - O[0], y - O[1]) + cP * np.hypot(x - P[0], y - P[1]) + cQ * np.hypot(x - Q[0], y - Q[1])


def branch_angle(B, P, Q) -> float:
    u = np.asarray(P, float) - B
    w = np.asarray(Q, float) - B
    nu, nw = np.hypot(*u), np.hypot(*w)
    if nu == 0 or nw == 0:
        return float("nan")
    return float(np.arccos(np.clip(u @ w / (nu * nw), -1.0, 1.0)))


def _argmin_lex(xs, ys, E):
    """Smallest energy; ties go to the smallest (x, y)."""
    best = E.min()
    cand = np.flatnonzero(E == best)
    order = np.lexsort((ys[cand], xs[cand]))
    j = cand[order[0]]
    return xs[j], ys[j], best


def optimal_branch_point(
    O, P, Q, w_P: float, w_Q: float, alpha: float, resolution: float = 1e-4, samples: int = 41
) -> BranchResult:
    """Brute-force minimizer of ``|OB| + w_P^a |BP| + w_Q^a |BQ|`` over the bounding box.

    A uniform grid is refined around the current best point until its
    spacing is below ``resolution``.  The objective is convex, so the
    refinement cannot lose the global minimum.
    """
    if abs(w_P + w_Q - 1.0) > 1e-12 or w_P < 0 or w_Q < 0:
        raise ValueError("sink masses must be nonnegative and sum to 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    O, P, Q = (np.asarray(p, dtype=float) for p in (O, P, Q))
    cP, cQ = w_P**alpha, w_Q**alpha
    pts = np.stack([O, P, Q])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    while True:
        gx = np.linspace(lo[0], hi[0], samples)
        gy = np.linspace(lo[1], hi[1], samples)
        X, Y = np.meshgrid(gx, gy, indexing="ij")
        xs = np.concatenate([X.ravel(), pts[:, 0]])
        ys = np.concatenate([Y.ravel(), pts[:, 1]])
        E = _y_energy(xs, ys, O, P, Q, cP, cQ)
        bx, by, best = _argmin_lex(xs, ys, E)
        step = np.array([gx[1] - gx[0] if samples > 1 else 0.0, gy[1] - gy[0] if samples > 1 else 0.0])
        if step.max() <= resolution:
            break
        lo = np.maximum(np.array([bx, by]) - 2 * step, pts.min(axis=0))
        hi = np.minimum(np.array([bx, by]) + 2 * step, pts.max(axis=0))
    B = np.array([bx, by])
    return BranchResult((float(bx), float(by)), float(best), branch_angle(B, P, Q))


def y_graph(O, B, P, Q, w_P: float, w_Q: float) -> Graph:
    """Star graph O -> B -> {P, Q} with unit source mass."""
    return Graph(np.array([O, B, P, Q], dtype=float), ((0, 1), (1, 2), (1, 3)), np.array([1.0, 0.0, -w_P, -w_Q]))
