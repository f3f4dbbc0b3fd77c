"""Graph-transformer neural operator: encoder, query encoder, decoders.

Pipeline (steady mode):

    theta on points --lift--> graph-transformer blocks --> H_EncI   (L, d)
    query coords --Gaussian Fourier + MLP--> H_EncQ               (L', d)
    H_Enc = cross_attention(H_EncQ, H_EncI)                        (L', d)
    u(x_q) = MLP_out(H_Enc || x_q)                                 (L', out)

Rollout mode replaces the last line with a recurrent latent propagator:
H^{t+dt} = MLP_prop(H^t || x_q) + H^t, decoded by MLP_out at every frame.

The cross attention is the softmax-free (Galerkin) form out = Q (K^T V) / L
with layer-normalized K and V, a residual on the query stream and an
Attn-Norm-MLP-Norm block structure. Queries are independent rows, so the
model evaluates on any query set inside the domain, at any resolution.

Checkpoints serialize the full config plus every named array to a little-
endian binary file; save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .attention import GTBlockParams, RopeConfig, graph_transformer_block, uniform_init
from .errors import FormatError, MagicError, ShapeError, VersionError
from .graph import Graph, PointSet, assemble_node_features, build_knn_graph, build_radius_graph
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "OperatorModel",
    "QuerySet",
    "save_checkpoint",
    "load_checkpoint",
    "rollout_to_array",
]

QuerySet = PointSet

MAGIC = b"HMLT"
CKPT_VERSION = 1

_POS_ENC = ("none", "concat", "rope")
_GRAPH_KIND = ("radius", "knn")
_MODE = ("steady", "rollout")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are desk-scale."""

    d_model: int = 32
    n_gt_blocks: int = 2
    n_heads: int = 4
    d_dec: int = 64
    n_out_mlp_layers: int = 2
    n_prop_mlp_layers: int = 3
    gf_dim: int = 32
    gf_sigma: float = 5.0
    rope_base: float = 10000.0
    rope_scale: float = 1.0
    pos_enc: str = "rope"
    attn_avg: bool = True
    graph_kind: str = "radius"
    radius: float = 0.1
    knn_k: int = 8
    mode: str = "steady"
    rollout_steps: int = 1
    in_channels: int = 1
    out_channels: int = 1
    ndim: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        if self.gf_dim % 2 != 0:
            raise ShapeError("gf_dim must be even")
        if self.pos_enc not in _POS_ENC:
            raise ShapeError(f"pos_enc must be one of {_POS_ENC}")
        if self.graph_kind not in _GRAPH_KIND:
            raise ShapeError(f"graph_kind must be one of {_GRAPH_KIND}")
        if self.mode not in _MODE:
            raise ShapeError(f"mode must be one of {_MODE}")
        if self.n_out_mlp_layers < 1 or self.n_prop_mlp_layers < 1:
            raise ShapeError("decoder MLPs need at least one layer")
        if self.mode == "rollout" and self.rollout_steps < 1:
            raise ShapeError("rollout needs rollout_steps >= 1")

    @property
    def d_in(self) -> int:
        return self.in_channels + (self.ndim if self.pos_enc != "none" else 0)


class Linear:
    def __init__(self, w: Tensor, b: Tensor):
        self.w, self.b = w, b

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, T.transpose(self.w)), self.b)

    @classmethod
    def init(cls, d_out: int, d_in: int, rng: np.random.Generator) -> "Linear":
        return cls(
            uniform_init(rng, (d_out, d_in), fan_in=d_in),
            uniform_init(rng, (d_out,), fan_in=d_in),
        )


class MLP:
    """Linear stack with ReLU between layers (none after the last)."""

    def __init__(self, layers: list[Linear]):
        self.layers = layers

    def __call__(self, x: Tensor) -> Tensor:
        for i, lyr in enumerate(self.layers):
            x = lyr(x)
            if i + 1 < len(self.layers):
                x = T.relu(x)
        return x

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator) -> "MLP":
        return cls([Linear.init(dims[i + 1], dims[i], rng) for i in range(len(dims) - 1)])

    def named(self, prefix: str):
        for i, lyr in enumerate(self.layers):
            yield f"{prefix}.{i}.w", lyr.w
            yield f"{prefix}.{i}.b", lyr.b


class CrossAttentionParams:
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        u = lambda shape: uniform_init(rng, shape, fan_in=shape[1])
        ones = lambda: Tensor(np.ones(d), requires_grad=True)
        zeros = lambda: Tensor(np.zeros(d), requires_grad=True)
        self.n_heads = n_heads
        self.wq, self.wk, self.wv, self.wo = (u((d, d)) for _ in range(4))
        self.lnk_g, self.lnk_b = ones(), zeros()
        self.lnv_g, self.lnv_b = ones(), zeros()
        self.ln1_g, self.ln1_b = ones(), zeros()
        self.w1 = u((2 * d, d))
        self.w2 = u((d, 2 * d))
        self.ln2_g, self.ln2_b = ones(), zeros()

    _FIELDS = (
        "wq", "wk", "wv", "wo", "lnk_g", "lnk_b", "lnv_g", "lnv_b",
        "ln1_g", "ln1_b", "w1", "w2", "ln2_g", "ln2_b",
    )

    def named(self, prefix: str):
        for f in self._FIELDS:
            yield f"{prefix}.{f}", getattr(self, f)


def gaussian_fourier(positions: np.ndarray, b_matrix: np.ndarray) -> np.ndarray:
    """gamma(x) = [sin(2 pi x B) | cos(2 pi x B)], rows are query points.

    B is (ndim, gf_dim/2), frozen at init; gamma has squared norm gf_dim/2
    for every x.
    """
    proj = 2.0 * np.pi * (np.asarray(positions, dtype=np.float64) @ b_matrix)
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)


class OperatorModel:
    """Resolution-independent neural operator over point clouds."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 0])
        c = config
        self.fc_in = Linear.init(c.d_model, c.d_in, rng)
        self.blocks = [
            GTBlockParams.init(c.d_model, c.n_heads, rng) for _ in range(c.n_gt_blocks)
        ]
        self.gf_b = Tensor(rng.normal(0.0, c.gf_sigma, size=(c.ndim, c.gf_dim // 2)))
        self.mlp_qry = MLP.init([c.gf_dim, c.d_model, c.d_model], rng)
        self.cross = CrossAttentionParams(c.d_model, c.n_heads, rng)
        out_dims = [c.d_model + c.ndim] + [c.d_dec] * (c.n_out_mlp_layers - 1) + [c.out_channels]
        self.mlp_out = MLP.init(out_dims, rng)
        if c.mode == "rollout":
            prop_dims = [c.d_model + c.ndim] + [c.d_dec] * (c.n_prop_mlp_layers - 1) + [c.d_model]
            self.mlp_prop = MLP.init(prop_dims, rng)
        else:
            self.mlp_prop = None
        self._rope = RopeConfig(c.rope_base, c.rope_scale) if c.pos_enc == "rope" else None

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"fc_in.w": self.fc_in.w, "fc_in.b": self.fc_in.b}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"gt{i}"))
        out.update(self.mlp_qry.named("mlp_qry"))
        out.update(self.cross.named("cross"))
        out.update(self.mlp_out.named("mlp_out"))
        if self.mlp_prop is not None:
            out.update(self.mlp_prop.named("mlp_prop"))
        return out

    def state_tensors(self) -> dict[str, Tensor]:
        out = dict(self.named_parameters())
        out["gf_b"] = self.gf_b  # frozen buffer, saved but never trained
        return out

    def zero_grads(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    # -- forward pieces --------------------------------------------------------

    def build_graph(self, points: PointSet) -> Graph:
        if self.config.graph_kind == "radius":
            return build_radius_graph(points, self.config.radius)
        return build_knn_graph(points, self.config.knn_k)

    def encode_input(self, graph: Graph) -> Tensor:
        """Lift node features and run the graph-transformer blocks.

        Rows are permuted into position-rank order before any dense algebra,
        so the returned encoding carries one row per node sorted by
        coordinates (graph.rank_order) and is bitwise independent of how the
        input nodes were labeled.
        """
        c = self.config
        if graph.node_features is None:
            raise ShapeError("graph has no node features; call assemble_node_features")
        if graph.node_features.shape[1] != c.d_in:
            raise ShapeError(
                f"node features width {graph.node_features.shape[1]} != expected {c.d_in}"
            )
        h = self.fc_in(Tensor(graph.node_features[graph.rank_order()]))
        for blk in self.blocks:
            h = graph_transformer_block(h, graph, blk, rope=self._rope, avg=c.attn_avg)
        return h

    def encode_query(self, queries: PointSet) -> Tensor:
        gamma = gaussian_fourier(queries.positions, self.gf_b.data)
        return self.mlp_qry(Tensor(gamma))

    def cross_attention(self, h_query: Tensor, h_input: Tensor) -> Tensor:
        """Galerkin cross attention: out = Q (K^T V) / L per head.

        K and V are layer-normalized. h_input rows arrive in the rank order
        produced by encode_input, so the K^T V contraction accumulates over
        nodes in a labeling-independent order.
        """
        p = self.cross
        d = self.config.d_model
        H = p.n_heads
        dk = d // H
        L = h_input.shape[0]
        q = T.matmul(h_query, T.transpose(p.wq))
        k = T.layer_norm(T.matmul(h_input, T.transpose(p.wk)), p.lnk_g, p.lnk_b)
        v = T.layer_norm(T.matmul(h_input, T.transpose(p.wv)), p.lnv_g, p.lnv_b)
        head_outs = []
        for hh in range(H):
            qh = T.slice_cols(q, hh * dk, (hh + 1) * dk)
            kh = T.slice_cols(k, hh * dk, (hh + 1) * dk)
            vh = T.slice_cols(v, hh * dk, (hh + 1) * dk)
            ktv = T.matmul(T.transpose(kh), vh)  # (dk, dk)
            head_outs.append(T.mul(T.matmul(qh, ktv), 1.0 / L))
        attn = T.matmul(T.concat(head_outs), T.transpose(p.wo))
        y = T.layer_norm(T.add(h_query, attn), p.ln1_g, p.ln1_b)
        ff = T.matmul(T.relu(T.matmul(y, T.transpose(p.w1))), T.transpose(p.w2))
        return T.layer_norm(T.add(y, ff), p.ln2_g, p.ln2_b)

    def decode_steady(self, h_enc: Tensor, queries: PointSet) -> Tensor:
        d_qry = Tensor(queries.positions)
        return self.mlp_out(T.concat([h_enc, d_qry]))

    def decode_rollout(self, h_enc: Tensor, queries: PointSet, steps: int | None = None) -> list[Tensor]:
        if self.mlp_prop is None:
            raise ShapeError("model was built in steady mode; no propagator")
        steps = self.config.rollout_steps if steps is None else steps
        d_qry = Tensor(queries.positions)
        state = h_enc
        frames = []
        for _ in range(steps):
            state = T.add(self.mlp_prop(T.concat([state, d_qry])), state)
            frames.append(self.mlp_out(T.concat([state, d_qry])))
        return frames

    # -- end-to-end -------------------------------------------------------------

    def forward_on_graph(self, graph: Graph, queries: PointSet, steps: int | None = None):
        h_in = self.encode_input(graph)
        h_q = self.encode_query(queries)
        h_enc = self.cross_attention(h_q, h_in)
        if self.config.mode == "steady":
            return self.decode_steady(h_enc, queries)
        return self.decode_rollout(h_enc, queries, steps)

    def forward(self, points: PointSet, theta: np.ndarray, queries: PointSet, steps: int | None = None):
        """Build the graph from config, encode theta, answer the queries.

        Returns (L', out) in steady mode, else a list of per-frame tensors.
        """
        graph = self.build_graph(points)
        graph = assemble_node_features(graph, theta, with_coords=self.config.pos_enc != "none")
        return self.forward_on_graph(graph, queries, steps)


def rollout_to_array(frames: list[Tensor]) -> np.ndarray:
    return np.stack([f.data for f in frames], axis=0)


# ---------------------------------------------------------------------------
# checkpoint format (little-endian throughout)
#
#   magic "HMLT" | u16 version | config block | u32 n_blobs | blobs
#   blob: u16 name_len | name utf-8 | u8 rank | u32 extents[rank] | f64 data
#
# Blobs are written sorted by name, so byte output is a pure function of the
# model state and save -> load -> save round-trips identically.

_CONFIG_STRUCT = struct.Struct("<7I4d4B4I")


def _pack_config(c: ModelConfig) -> bytes:
    return _CONFIG_STRUCT.pack(
        c.d_model,
        c.n_gt_blocks,
        c.n_heads,
        c.d_dec,
        c.n_out_mlp_layers,
        c.n_prop_mlp_layers,
        c.gf_dim,
        c.gf_sigma,
        c.rope_base,
        c.rope_scale,
        c.radius,
        _POS_ENC.index(c.pos_enc),
        int(c.attn_avg),
        _GRAPH_KIND.index(c.graph_kind),
        _MODE.index(c.mode),
        c.knn_k,
        c.rollout_steps,
        c.in_channels,
        c.out_channels,
    ) + struct.pack("<I", c.ndim)


def _unpack_config(buf: bytes) -> ModelConfig:
    vals = _CONFIG_STRUCT.unpack(buf[: _CONFIG_STRUCT.size])
    (ndim,) = struct.unpack("<I", buf[_CONFIG_STRUCT.size : _CONFIG_STRUCT.size + 4])
    (d_model, n_gt, n_heads, d_dec, n_out, n_prop, gf_dim) = vals[:7]
    (gf_sigma, rope_base, rope_scale, radius) = vals[7:11]
    (pos_enc_i, attn_avg, graph_kind_i, mode_i) = vals[11:15]
    (knn_k, rollout_steps, in_ch, out_ch) = vals[15:19]
    try:
        return ModelConfig(
            d_model=d_model,
            n_gt_blocks=n_gt,
            n_heads=n_heads,
            d_dec=d_dec,
            n_out_mlp_layers=n_out,
            n_prop_mlp_layers=n_prop,
            gf_dim=gf_dim,
            gf_sigma=gf_sigma,
            rope_base=rope_base,
            rope_scale=rope_scale,
            radius=radius,
            pos_enc=_POS_ENC[pos_enc_i],
            attn_avg=bool(attn_avg),
            graph_kind=_GRAPH_KIND[graph_kind_i],
            mode=_MODE[mode_i],
            knn_k=knn_k,
            rollout_steps=rollout_steps,
            in_channels=in_ch,
            out_channels=out_ch,
            ndim=ndim,
        )
    except IndexError as e:
        raise FormatError(f"bad enum value in checkpoint config: {e}") from e


def save_checkpoint(model: OperatorModel, path: str) -> None:
    blobs = model.state_tensors()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        f.write(_pack_config(model.config))
        f.write(struct.pack("<I", len(blobs)))
        for name in sorted(blobs):
            arr = blobs[name].data
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        from .errors import TruncationError

        raise TruncationError(f"checkpoint ends inside {what}")
    return buf


def load_checkpoint(path: str) -> OperatorModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise MagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != CKPT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        cfg = _unpack_config(_read_exact(f, _CONFIG_STRUCT.size + 4, "config block"))
        (n_blobs,) = struct.unpack("<I", _read_exact(f, 4, "blob count"))
        model = OperatorModel(cfg, seed=0)
        targets = model.state_tensors()
        seen = set()
        for _ in range(n_blobs):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "blob name length"))
            name = _read_exact(f, nlen, "blob name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "blob rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "blob extents"))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = _read_exact(f, 8 * count, f"blob {name!r} payload")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            if name not in targets:
                raise FormatError(f"unknown blob {name!r} in checkpoint")
            if targets[name].data.shape != arr.shape:
                raise FormatError(
                    f"blob {name!r} shape {arr.shape} != expected {targets[name].data.shape}"
                )
            targets[name].data = np.ascontiguousarray(arr)
            seen.add(name)
        extra = f.read(1)
        if extra:
            raise FormatError("trailing bytes after the last blob")
    missing = set(targets) - seen
    if missing:
        raise FormatError(f"checkpoint is missing blobs: {sorted(missing)}")
    return model
