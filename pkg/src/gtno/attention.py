"""Graph multi-head self-attention with rotary position encoding.

The layer computes, per head k and node i,

    w_ij = softmax_{j in N_i}( (R(p_i) Q^k h_i) . (R(p_j) K^k h_j) / sqrt(d_k) )
    z_i^k = (1 / |N_i|) * sum_{j in N_i} w_ij (V^k h_j)

and concatenates heads through an output projection. Both the softmax and the
1/|N_i| average are applied (the attn average can be disabled via avg=False
for the non-averaged variant).

R(p) is a 2-D rotary encoding: each head's d_k channels are split evenly
across the spatial axes, and within an axis adjacent channel pairs (2j, 2j+1)
rotate by omega_j * p_axis with omega_j = base^(-2j/m). Positions are scaled
so the domain diagonal spans 2*pi*scale; attention logits then depend on
relative positions only.

Feature rows are stored in position-rank order (nodes sorted by coordinates,
see Graph.rank_order): every matrix entering a matmul is then a function of
the point positions alone, never of node labels, which makes predictions
bitwise invariant under node relabeling without assuming anything about how
the BLAS kernels round.

kernel_oracle() is an independent, loop-based evaluation of the same layer as
a kernel integral: per edge the block-diagonal matrix  directsum_k w_ij^k V^k
applied to h_j stacked per head, averaged over N_i, then the output
projection. It shares no code with the fast path and is used to pin the
layer's semantics in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .graph import Graph, PointSet
from .tensor import Tensor, _make

__all__ = [
    "RopeConfig",
    "GTBlockParams",
    "rope_tables",
    "rope_apply",
    "graph_self_attention",
    "graph_transformer_block",
    "kernel_oracle",
]


@dataclass(frozen=True)
class RopeConfig:
    base: float = 10000.0
    scale: float = 1.0


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class GTBlockParams:
    """Parameters of one graph-transformer block.

    wq/wk/wv are (d, d) with head k owning rows [k*d_k, (k+1)*d_k); wo is the
    (d, d) output projection; w1 (2d, d) and w2 (d, 2d) form the block MLP
    (no biases inside the block); ln1/ln2 are the post-attention and
    post-MLP layer norms.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.wq.shape[1]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def init(cls, d_model: int, n_heads: int, rng: np.random.Generator) -> "GTBlockParams":
        if d_model % n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        u = lambda shape: uniform_init(rng, shape, fan_in=shape[1])
        return cls(
            wq=u((d_model, d_model)),
            wk=u((d_model, d_model)),
            wv=u((d_model, d_model)),
            wo=u((d_model, d_model)),
            w1=u((2 * d_model, d_model)),
            w2=u((d_model, 2 * d_model)),
            ln1_g=Tensor(np.ones(d_model), requires_grad=True),
            ln1_b=Tensor(np.zeros(d_model), requires_grad=True),
            ln2_g=Tensor(np.ones(d_model), requires_grad=True),
            ln2_b=Tensor(np.zeros(d_model), requires_grad=True),
            n_heads=n_heads,
        )

    def named(self, prefix: str):
        for field in ("wq", "wk", "wv", "wo", "w1", "w2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            yield f"{prefix}.{field}", getattr(self, field)


def _axis_splits(d_head: int, ndim: int) -> int:
    if d_head % (2 * ndim) != 0:
        raise ShapeError(
            f"head dim {d_head} must split into even blocks across {ndim} axes"
        )
    return d_head // ndim


def rope_tables(points: PointSet, d_head: int, n_heads: int, cfg: RopeConfig):
    """cos/sin tables, each (L, n_heads*d_head/2), pair-major per head block."""
    n = points.ndim
    m = _axis_splits(d_head, n)
    factor = 2.0 * math.pi * cfg.scale / points.diagonal()
    coords = points.positions * factor
    pairs = []
    for axis in range(n):
        j = np.arange(m // 2, dtype=np.float64)
        omega = cfg.base ** (-2.0 * j / m)
        pairs.append(coords[:, axis : axis + 1] * omega[None, :])
    angles = np.concatenate(pairs, axis=1)  # (L, d_head/2)
    angles = np.tile(angles, (1, n_heads))  # same layout in every head block
    return np.cos(angles), np.sin(angles)


def rope_apply(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent channel pairs of x by the tabulated angles.

    Linear in x; the adjoint rotates the cotangent by the opposite angle.
    """
    if x.shape[-1] != 2 * cos.shape[-1]:
        raise ShapeError("rope table width must be half the channel count")

    def rotate(arr, flip):
        ev, od = arr[:, 0::2], arr[:, 1::2]
        s = -sin if flip else sin
        out = np.empty_like(arr)
        out[:, 0::2] = ev * cos - od * s
        out[:, 1::2] = ev * s + od * cos
        return out

    return _make(rotate(x.data, False), (x,), lambda g: (rotate(g, True),))


def graph_self_attention(
    h: Tensor,
    graph: Graph,
    p: GTBlockParams,
    rope: RopeConfig | None = None,
    avg: bool = True,
) -> Tensor:
    """Multi-head neighborhood attention over the graph.

    h is (L, d) in position-rank order (row r belongs to node
    graph.rank_order()[r]); the output uses the same row convention.
    """
    L, d = h.shape
    if d != p.d_model:
        raise ShapeError(f"feature width {d} != block width {p.d_model}")
    if L != graph.n_nodes:
        raise ShapeError("h rows must match graph nodes")
    H, dk = p.n_heads, p.d_head
    src_rank, seg, inv_deg, src_plan, dst_plan = graph.rank_edges()

    q = T.matmul(h, T.transpose(p.wq))
    k = T.matmul(h, T.transpose(p.wk))
    v = T.matmul(h, T.transpose(p.wv))
    if rope is not None:
        key = ("rope", dk, H, rope.base, rope.scale)
        tab = graph._edge_cache.get(key)
        if tab is None:
            cos, sin = rope_tables(graph.points, dk, H, rope)
            order = graph.rank_order()
            tab = (cos[order], sin[order])  # match the rank-ordered rows of q/k
            graph._edge_cache[key] = tab
        cos, sin = tab
        q = rope_apply(q, cos, sin)
        k = rope_apply(k, cos, sin)

    E = src_rank.shape[0]
    qe = T.gather_rows(q, seg, plan=dst_plan)
    ke = T.gather_rows(k, src_rank, plan=src_plan)
    prod = T.reshape(T.mul(qe, ke), (E, H, dk))
    logits = T.mul(prod.sum(axis=2), 1.0 / math.sqrt(dk))  # (E, H)
    w = T.segment_softmax(logits, seg, L)
    ve = T.reshape(T.gather_rows(v, src_rank, plan=src_plan), (E, H, dk))
    wv = T.reshape(T.mul(T.reshape(w, (E, H, 1)), ve), (E, H * dk))
    agg = T.segment_sum(wv, seg, L)  # already in rank order
    if avg:
        agg = T.mul(agg, Tensor(inv_deg))
    return T.matmul(agg, T.transpose(p.wo))


def graph_transformer_block(
    h: Tensor,
    graph: Graph,
    p: GTBlockParams,
    rope: RopeConfig | None = None,
    avg: bool = True,
) -> Tensor:
    """Attention -> Norm(residual) -> 2-layer MLP -> Norm(residual).

    Rows of h follow the rank-order convention of graph_self_attention.
    """
    attn = graph_self_attention(h, graph, p, rope=rope, avg=avg)
    y = T.layer_norm(T.add(h, attn), p.ln1_g, p.ln1_b)
    ff = T.matmul(T.relu(T.matmul(y, T.transpose(p.w1))), T.transpose(p.w2))
    return T.layer_norm(T.add(y, ff), p.ln2_g, p.ln2_b)


# ---------------------------------------------------------------------------
# independent reference path


def _oracle_rotation(p_scaled: np.ndarray, d_head: int, base: float) -> np.ndarray:
    """Dense (d_head, d_head) rotation matrix for one scaled position."""
    n = p_scaled.shape[0]
    m = d_head // n
    R = np.zeros((d_head, d_head))
    col = 0
    for axis in range(n):
        for j in range(m // 2):
            ang = (base ** (-2.0 * j / m)) * p_scaled[axis]
            c, s = math.cos(ang), math.sin(ang)
            R[col, col] = c
            R[col, col + 1] = -s
            R[col + 1, col] = s
            R[col + 1, col + 1] = c
            col += 2
    return R


def kernel_oracle(
    h: np.ndarray,
    graph: Graph,
    p: GTBlockParams,
    rope: RopeConfig | None = None,
    avg: bool = True,
) -> np.ndarray:
    """Slow kernel-integral evaluation of graph_self_attention.

    Builds, for every edge, the block-diagonal matrix  directsum_k w_ij^k V^k
    (one d_k x d block per head), applies it to h_j stacked per head, averages
    over the neighborhood and applies the output projection. Pure numpy loops;
    no code shared with the fast path.
    """
    h = np.asarray(h, dtype=np.float64)
    L, d = h.shape
    H, dk = p.n_heads, p.d_head
    Wq, Wk, Wv, Wo = p.wq.data, p.wk.data, p.wv.data, p.wo.data
    if rope is not None:
        factor = 2.0 * math.pi * rope.scale / graph.points.diagonal()
        rot = [
            _oracle_rotation(graph.points.positions[i] * factor, dk, rope.base)
            for i in range(L)
        ]
    out = np.zeros((L, d))
    for i in range(L):
        nb = list(graph.neighbors[i])
        # per-head attention weights over the neighborhood
        weights = np.zeros((H, len(nb)))
        for kh in range(H):
            Q = Wq[kh * dk : (kh + 1) * dk]
            K = Wk[kh * dk : (kh + 1) * dk]
            qi = Q @ h[i]
            if rope is not None:
                qi = rot[i] @ qi
            logits = []
            for j in nb:
                kj = K @ h[j]
                if rope is not None:
                    kj = rot[j] @ kj
                logits.append(float(qi @ kj) / math.sqrt(dk))
            logits = np.asarray(logits)
            e = np.exp(logits - logits.max())
            weights[kh] = e / e.sum()
        acc = np.zeros(H * dk)
        for jj, j in enumerate(nb):
            M = np.zeros((H * dk, H * d))
            for kh in range(H):
                V = Wv[kh * dk : (kh + 1) * dk]
                M[kh * dk : (kh + 1) * dk, kh * d : (kh + 1) * d] = weights[kh, jj] * V
            acc += M @ np.tile(h[j], H)
        if avg:
            acc /= len(nb)
        out[i] = Wo @ acc
    return out
