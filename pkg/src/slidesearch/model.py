"""Hierarchical graph encoder with a binary hash head.

Forward pass per graph: L levels of {K-step normalized graph convolution,
soft-assignment pooling}, a column-wise max readout over the final pooled
features, and a tanh projection to (-1, 1)^code_bits. Every intermediate
needed for exact reverse-mode gradients is kept in a ForwardCache;
``encode_backward`` consumes it.

All arithmetic is float64. Checkpoints store the dimension header plus all
weight matrices in declaration order as little-endian f64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .graphs import TissueGraph

CHECKPOINT_MAGIC = b"GCHK"
CHECKPOINT_VERSION = 1

# Guard against float drift when alpha*n lands on an integer
# (e.g. 0.2 * 50 = 10.000000000000002 in binary floating point).
_CEIL_EPS = 1e-9


def cluster_count(pool_ratio: float, n: int) -> int:
    """Next-level node count: ceil(pool_ratio * n), floored at 1."""
    return max(1, math.ceil(pool_ratio * n - _CEIL_EPS))


@dataclass(frozen=True)
class ModelDims:
    """Architecture hyper-parameters.

    ``max_nodes`` bounds input graph size; pool stacks are parameterized at
    the width the cluster schedule yields for ``max_nodes`` and truncated to
    each graph's live cluster count.
    """

    levels: int
    steps: int
    embed_dim: int
    pool_ratio: float
    code_bits: int
    feature_dim: int
    max_nodes: int

    def validate(self) -> None:
        if self.levels < 1:
            raise DataError(f"model dims: levels must be >= 1, got {self.levels}")
        if self.steps < 1:
            raise DataError(f"model dims: steps must be >= 1, got {self.steps}")
        if not 0.0 < self.pool_ratio <= 1.0:
            raise DataError(f"model dims: pool_ratio must be in (0, 1], got {self.pool_ratio}")
        if min(self.embed_dim, self.code_bits, self.feature_dim, self.max_nodes) < 1:
            raise DataError("model dims: embed_dim, code_bits, feature_dim, max_nodes must be >= 1")

    def cluster_caps(self) -> list:
        """Upper bound on node count entering each level, plus the final one."""
        caps = [self.max_nodes]
        for _ in range(self.levels):
            caps.append(cluster_count(self.pool_ratio, caps[-1]))
        return caps


@dataclass
class GcnStack:
    """Weights of one K-step convolution stack; shapes chain input -> output."""

    weights: list


@dataclass
class LevelParams:
    embed: GcnStack
    pool: GcnStack


@dataclass
class GcnHashParams:
    """All trainable weights: per-level embed/pool stacks plus the hash head."""

    levels: list
    hash_w: np.ndarray
    hash_b: np.ndarray
    dims: ModelDims

    def iter_arrays(self):
        """(name, array) pairs in declaration order; the order fixes
        checkpoint layout and optimizer state alignment."""
        for l, level in enumerate(self.levels):
            for k, w in enumerate(level.embed.weights):
                yield f"level{l}.embed.w{k}", w
            for k, w in enumerate(level.pool.weights):
                yield f"level{l}.pool.w{k}", w
        yield "hash_w", self.hash_w
        yield "hash_b", self.hash_b

    def zeros_like(self) -> "GcnHashParams":
        return GcnHashParams(
            levels=[
                LevelParams(
                    embed=GcnStack([np.zeros_like(w) for w in lv.embed.weights]),
                    pool=GcnStack([np.zeros_like(w) for w in lv.pool.weights]),
                )
                for lv in self.levels
            ],
            hash_w=np.zeros_like(self.hash_w),
            hash_b=np.zeros_like(self.hash_b),
            dims=self.dims,
        )

    def copy(self) -> "GcnHashParams":
        return GcnHashParams(
            levels=[
                LevelParams(
                    embed=GcnStack([w.copy() for w in lv.embed.weights]),
                    pool=GcnStack([w.copy() for w in lv.pool.weights]),
                )
                for lv in self.levels
            ],
            hash_w=self.hash_w.copy(),
            hash_b=self.hash_b.copy(),
            dims=self.dims,
        )


def _stack_shapes(d_in: int, hidden: int, d_out: int, steps: int) -> list:
    """Chained weight shapes: d_in -> hidden -> ... -> d_out over ``steps`` matrices."""
    if steps == 1:
        return [(d_in, d_out)]
    return [(d_in, hidden)] + [(hidden, hidden)] * (steps - 2) + [(hidden, d_out)]


def init_params(dims: ModelDims, seed: int) -> GcnHashParams:
    """Seeded uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero hash bias."""
    dims.validate()
    rng = np.random.default_rng(seed)

    def xavier(shape):
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, size=shape)

    caps = dims.cluster_caps()
    levels = []
    d_in = dims.feature_dim
    for l in range(dims.levels):
        embed = GcnStack([xavier(s) for s in _stack_shapes(d_in, dims.embed_dim, dims.embed_dim, dims.steps)])
        pool = GcnStack([xavier(s) for s in _stack_shapes(d_in, dims.embed_dim, caps[l + 1], dims.steps)])
        levels.append(LevelParams(embed=embed, pool=pool))
        d_in = dims.embed_dim
    hash_w = xavier((dims.embed_dim, dims.code_bits))
    hash_b = np.zeros(dims.code_bits)
    return GcnHashParams(levels=levels, hash_w=hash_w, hash_b=hash_b, dims=dims)


# ---------------------------------------------------------------------------
# forward


def _normalize(adj: np.ndarray) -> tuple:
    """Symmetric degree normalization of adj + I; returns (normalized, degrees)."""
    atil = adj + np.eye(adj.shape[0])
    deg = atil.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    return atil * np.outer(dinv, dinv), deg


def normalize_adjacency(adjacency) -> np.ndarray:
    """Degree-normalized adjacency with self-loops.

    Accepts a PatchAdjacency or a dense symmetric non-negative matrix.
    """
    if hasattr(adjacency, "to_dense"):
        adj = adjacency.to_dense()
    else:
        adj = np.asarray(adjacency, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DataError(f"normalize_adjacency: expected square matrix, got {adj.shape}")
    if adj.size and adj.min() < 0:
        raise DataError("normalize_adjacency: negative entries")
    scale = max(1.0, float(np.abs(adj).max())) if adj.size else 1.0
    if np.abs(adj - adj.T).max(initial=0.0) > 1e-8 * scale:
        raise DataError("normalize_adjacency: input is not symmetric")
    norm, _ = _normalize(adj)
    return norm


@dataclass
class StackCache:
    inputs: list = field(default_factory=list)  # H^(k-1) per step
    props: list = field(default_factory=list)  # norm_adj @ H^(k-1)
    preacts: list = field(default_factory=list)  # props @ W^(k)
    scales: list = field(default_factory=list)  # dropout mask / keep prob, or None
    out: np.ndarray | None = None


def gcn_forward(
    norm_adj: np.ndarray,
    x: np.ndarray,
    stack: GcnStack,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple:
    """K steps of H <- ReLU(norm_adj @ H @ W), with optional inverted dropout
    after each ReLU. Returns (output, cache)."""
    if x.shape[1] != stack.weights[0].shape[0]:
        raise DataError(
            f"gcn_forward: input width {x.shape[1]} != first weight rows {stack.weights[0].shape[0]}"
        )
    cache = StackCache()
    h = x
    for w in stack.weights:
        prop = norm_adj @ h
        pre = prop @ w
        if not np.all(np.isfinite(pre)):
            raise NumericError("gcn_forward: non-finite activation (exploding weights?)")
        out = np.maximum(pre, 0.0)
        if dropout_p > 0.0 and rng is not None:
            scale = (rng.random(out.shape) >= dropout_p) / (1.0 - dropout_p)
            out = out * scale
        else:
            scale = None
        cache.inputs.append(h)
        cache.props.append(prop)
        cache.preacts.append(pre)
        cache.scales.append(scale)
        h = out
    cache.out = h
    return h, cache


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LevelCache:
    adj_raw: np.ndarray
    norm_adj: np.ndarray
    deg: np.ndarray
    embed: StackCache
    pool: StackCache
    assign: np.ndarray  # row-stochastic n_l x n_{l+1}
    x_next: np.ndarray
    adj_next: np.ndarray


def _level_forward(
    adj: np.ndarray,
    x: np.ndarray,
    level: LevelParams,
    n_next: int,
    dropout_p: float,
    rng: np.random.Generator | None,
) -> LevelCache:
    norm_adj, deg = _normalize(adj)
    z, embed_cache = gcn_forward(norm_adj, x, level.embed, dropout_p, rng)
    pool_out, pool_cache = gcn_forward(norm_adj, x, level.pool, dropout_p, rng)
    if n_next > pool_out.shape[1]:
        raise DataError(
            f"diffpool: requested {n_next} clusters but pool stack is {pool_out.shape[1]} wide"
        )
    assign = _row_softmax(pool_out[:, :n_next])
    x_next = assign.T @ z
    adj_next = assign.T @ adj @ assign
    return LevelCache(
        adj_raw=adj,
        norm_adj=norm_adj,
        deg=deg,
        embed=embed_cache,
        pool=pool_cache,
        assign=assign,
        x_next=x_next,
        adj_next=adj_next,
    )


def diffpool(adj, x: np.ndarray, level: LevelParams, n_next: int) -> tuple:
    """Coarsen a graph to ``n_next`` soft clusters.

    Returns (pooled features, pooled adjacency, assignment matrix). The
    assignment is the row-softmax of the pool stack output truncated to
    ``n_next`` columns; pooled adjacency uses the raw (unnormalized) input
    adjacency.
    """
    adj = adj.to_dense() if hasattr(adj, "to_dense") else np.asarray(adj, dtype=np.float64)
    if n_next > adj.shape[0]:
        raise DataError(f"diffpool: n_next {n_next} exceeds node count {adj.shape[0]}")
    if n_next < 1:
        raise DataError(f"diffpool: n_next must be >= 1, got {n_next}")
    lc = _level_forward(adj, x, level, n_next, dropout_p=0.0, rng=None)
    return lc.x_next, lc.adj_next, lc.assign


@dataclass
class ForwardCache:
    levels: list
    readout_rows: np.ndarray  # argmax row per embedding column
    x_final: np.ndarray
    pooled: np.ndarray  # readout vector z
    pre_hash: np.ndarray
    y: np.ndarray


def encode_graph(
    graph: TissueGraph,
    params: GcnHashParams,
    rng: np.random.Generator | None = None,
    dropout_p: float = 0.0,
) -> tuple:
    """Encode one graph to a vector in (-1, 1)^code_bits.

    Inference mode (rng None or dropout_p 0) applies no dropout; training
    mode is deterministic given the generator state. Returns (y, cache).
    """
    dims = params.dims
    if graph.feature_dim != dims.feature_dim:
        raise DataError(
            f"encode_graph: graph feature dim {graph.feature_dim} != model {dims.feature_dim}"
        )
    n = graph.n_nodes
    if n < 1:
        raise DataError("encode_graph: empty graph")
    if n > dims.max_nodes:
        raise DataError(f"encode_graph: graph has {n} nodes, model bound is {dims.max_nodes}")

    x = np.asarray(graph.node_features, dtype=np.float64)
    adj = graph.adjacency.to_dense()
    level_caches = []
    for level in params.levels:
        n_next = cluster_count(dims.pool_ratio, x.shape[0])
        lc = _level_forward(adj, x, level, n_next, dropout_p, rng)
        level_caches.append(lc)
        x, adj = lc.x_next, lc.adj_next

    readout_rows = x.argmax(axis=0)
    pooled = x[readout_rows, np.arange(x.shape[1])]
    pre_hash = pooled @ params.hash_w + params.hash_b
    y = np.tanh(pre_hash)
    if not np.all(np.isfinite(y)):
        raise NumericError("encode_graph: non-finite output")
    return y, ForwardCache(
        levels=level_caches,
        readout_rows=readout_rows,
        x_final=x,
        pooled=pooled,
        pre_hash=pre_hash,
        y=y,
    )


def binarize(y: np.ndarray) -> np.ndarray:
    """Componentwise sign with sign(0) = +1; returns int8 in {-1, +1}."""
    y = np.asarray(y)
    if not np.all(np.isfinite(y)):
        raise NumericError("binarize: non-finite entry")
    return np.where(y >= 0.0, 1, -1).astype(np.int8)


# ---------------------------------------------------------------------------
# backward


def _stack_backward(
    cache: StackCache,
    stack: GcnStack,
    grads: GcnStack,
    norm_adj: np.ndarray,
    g_out: np.ndarray,
) -> tuple:
    """Backprop through one stack. Returns (grad wrt input x, grad wrt norm_adj)."""
    g_h = g_out
    g_norm = np.zeros_like(norm_adj)
    for k in reversed(range(len(stack.weights))):
        if cache.scales[k] is not None:
            g_h = g_h * cache.scales[k]
        g_pre = g_h * (cache.preacts[k] > 0.0)
        grads.weights[k] += cache.props[k].T @ g_pre
        g_prop = g_pre @ stack.weights[k].T
        g_norm += g_prop @ cache.inputs[k].T
        g_h = norm_adj.T @ g_prop
    return g_h, g_norm


def _normalize_backward(g_norm: np.ndarray, norm_adj: np.ndarray, deg: np.ndarray) -> np.ndarray:
    """Chain gradients through symmetric degree normalization back to the raw
    adjacency (the +I shift has unit Jacobian)."""
    dinv = 1.0 / np.sqrt(deg)
    weighted = g_norm * norm_adj
    row_correction = -(weighted.sum(axis=1) + weighted.sum(axis=0)) / (2.0 * deg)
    return g_norm * np.outer(dinv, dinv) + row_correction[:, None]


def _level_backward(
    lc: LevelCache,
    level: LevelParams,
    grads: LevelParams,
    g_x_next: np.ndarray,
    g_adj_next: np.ndarray | None,
) -> tuple:
    """Backprop one level. Returns (grad wrt level input x, grad wrt raw adjacency)."""
    s = lc.assign
    z = lc.embed.out
    adj = lc.adj_raw

    g_s = z @ g_x_next.T
    g_z = s @ g_x_next
    if g_adj_next is not None:
        g_s += adj @ s @ g_adj_next.T + adj.T @ s @ g_adj_next
        g_adj = s @ g_adj_next @ s.T
    else:
        g_adj = np.zeros_like(adj)

    # row-softmax Jacobian
    g_logits = s * (g_s - (g_s * s).sum(axis=1, keepdims=True))
    g_pool_out = np.zeros_like(lc.pool.out)
    g_pool_out[:, : s.shape[1]] = g_logits

    g_x_pool, g_norm_pool = _stack_backward(lc.pool, level.pool, grads.pool, lc.norm_adj, g_pool_out)
    g_x_embed, g_norm_embed = _stack_backward(lc.embed, level.embed, grads.embed, lc.norm_adj, g_z)
    g_adj += _normalize_backward(g_norm_pool + g_norm_embed, lc.norm_adj, lc.deg)
    return g_x_pool + g_x_embed, g_adj


def encode_backward(cache: ForwardCache, params: GcnHashParams, grad_y: np.ndarray, grads: GcnHashParams) -> None:
    """Accumulate d(loss)/d(params) into ``grads`` given d(loss)/dy for one graph."""
    g_pre = grad_y * (1.0 - cache.y * cache.y)
    grads.hash_b += g_pre
    grads.hash_w += np.outer(cache.pooled, g_pre)
    g_pooled = params.hash_w @ g_pre

    g_x = np.zeros_like(cache.x_final)
    g_x[cache.readout_rows, np.arange(g_x.shape[1])] = g_pooled
    g_adj = None
    for lc, level, level_grads in zip(
        reversed(cache.levels), reversed(params.levels), reversed(grads.levels)
    ):
        g_x, g_adj = _level_backward(lc, level, level_grads, g_x, g_adj)
    # g_x / g_adj now refer to the input features and adjacency: constants.


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: GcnHashParams, path) -> None:
    dims = params.dims
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack(
        "<IIIIIIdB",
        CHECKPOINT_VERSION,
        dims.levels,
        dims.steps,
        dims.embed_dim,
        dims.code_bits,
        dims.feature_dim,
        dims.pool_ratio,
        1,  # dropout reaches pool stacks as well as embed stacks
    )
    out += struct.pack("<I", dims.max_nodes)
    for _, arr in params.iter_arrays():
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> GcnHashParams:
    path = Path(path)
    raw = path.read_bytes()
    head = struct.Struct("<IIIIIIdB")
    if len(raw) < 4 + head.size + 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, levels, steps, embed_dim, code_bits, feature_dim, pool_ratio, _pool_drop = head.unpack_from(
        raw, 4
    )
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (max_nodes,) = struct.unpack_from("<I", raw, 4 + head.size)
    dims = ModelDims(
        levels=levels,
        steps=steps,
        embed_dim=embed_dim,
        pool_ratio=pool_ratio,
        code_bits=code_bits,
        feature_dim=feature_dim,
        max_nodes=max_nodes,
    )
    dims.validate()
    params = init_params(dims, seed=0)
    pos = 4 + head.size + 4
    for name, arr in params.iter_arrays():
        nbytes = arr.size * 8
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated at tensor {name}")
        arr[...] = np.frombuffer(raw, dtype="<f8", count=arr.size, offset=pos).reshape(arr.shape)
        pos += nbytes
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes")
    return params
