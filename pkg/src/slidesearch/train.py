"""End-to-end training of the graph hash encoder.

The objective over a batch of N encoded graphs Y (N x code_bits) with
pairwise label matrix C (+1 same class, -1 otherwise) is

    J = (1/N) * ||(1/code_bits) Y Y^T - C||_F^2
        + ortho_weight * ||W_h^T W_h - I||_F^2

minimized with Adam over shuffled mini-batches. Gradients are exact
reverse-mode derivatives through the encoder and are checked against
central finite differences by ``finite_diff_check``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .graphs import GraphLabel, TissueGraph
from .model import (
    GcnHashParams,
    ModelDims,
    encode_backward,
    encode_graph,
    init_params,
)

# Architecture and loss-weight presets; "default" matches the lung preset,
# "camelyon16" the lymph-node one.
PRESETS = {
    "default": dict(levels=2, steps=4, embed_dim=110, pool_ratio=0.2, ortho_weight=0.005, code_bits=48),
    "camelyon16": dict(levels=2, steps=4, embed_dim=100, pool_ratio=0.2, ortho_weight=0.05, code_bits=48),
}


@dataclass
class TrainConfig:
    """Optimizer settings plus the model dimensions to train."""

    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 200
    ortho_weight: float = 0.005
    dropout: float = 0.5
    stratified_batches: bool = False
    seed: int = 0
    levels: int = 2
    steps: int = 4
    embed_dim: int = 110
    pool_ratio: float = 0.2
    code_bits: int = 48
    max_nodes: int = 256

    def validate(self) -> None:
        if self.ortho_weight < 0:
            raise ConfigError(f"train config: ortho_weight must be >= 0, got {self.ortho_weight}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"train config: dropout must be in [0, 1), got {self.dropout}")
        if self.batch_size < 2:
            raise ConfigError(f"train config: batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"train config: epochs must be >= 1, got {self.epochs}")

    def model_dims(self, feature_dim: int) -> ModelDims:
        return ModelDims(
            levels=self.levels,
            steps=self.steps,
            embed_dim=self.embed_dim,
            pool_ratio=self.pool_ratio,
            code_bits=self.code_bits,
            feature_dim=feature_dim,
            max_nodes=self.max_nodes,
        )

    @classmethod
    def from_mapping(cls, kv: dict) -> "TrainConfig":
        kv = dict(kv)
        preset = kv.pop("preset", None)
        base = cls()
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"train config: unknown preset {preset!r}")
            base = replace(base, **PRESETS[preset])
        valid = {f.name: f.type for f in fields(cls)}
        updates = {}
        for key, value in kv.items():
            if key not in valid:
                raise ConfigError(f"train config: unknown key {key!r}")
            current = getattr(base, key)
            try:
                if isinstance(current, bool):
                    updates[key] = value.strip().lower() in ("1", "true", "yes") if isinstance(value, str) else bool(value)
                elif isinstance(current, int):
                    updates[key] = int(value)
                else:
                    updates[key] = float(value)
            except ValueError:
                raise ConfigError(f"train config: bad value for {key}: {value!r}") from None
        cfg = replace(base, **updates)
        cfg.validate()
        return cfg


def pairwise_label_matrix(labels) -> np.ndarray:
    """N x N matrix with +1 where labels match, -1 where they differ."""
    for i, lab in enumerate(labels):
        if lab == GraphLabel.EXCLUDED:
            raise DataError(f"pairwise_label_matrix: excluded graph at position {i}")
    values = np.asarray([lab.value for lab in labels])
    if values.size == 0:
        raise DataError("pairwise_label_matrix: empty label list")
    return np.where(values[:, None] == values[None, :], 1.0, -1.0)


def hash_loss(y_batch: np.ndarray, c: np.ndarray, hash_w: np.ndarray, ortho_weight: float) -> float:
    """Pairwise code-similarity loss plus orthogonality penalty on the hash weights."""
    y = np.asarray(y_batch, dtype=np.float64)
    n, code_bits = y.shape
    if c.shape != (n, n):
        raise DataError(f"hash_loss: label matrix {c.shape} does not match batch size {n}")
    sim = (y @ y.T) / code_bits - c
    gram = hash_w.T @ hash_w - np.eye(hash_w.shape[1])
    return float((sim * sim).sum() / n + ortho_weight * (gram * gram).sum())


def _batch_forward(graphs, params, rng, dropout_p):
    ys, caches = [], []
    for g in graphs:
        y, cache = encode_graph(g, params, rng=rng, dropout_p=dropout_p)
        ys.append(y)
        caches.append(cache)
    return np.stack(ys), caches


def batch_loss(graphs, labels, params: GcnHashParams, ortho_weight: float) -> float:
    """Inference-mode loss of a batch; the scalar function finite differences probe."""
    y, _ = _batch_forward(graphs, params, rng=None, dropout_p=0.0)
    return hash_loss(y, pairwise_label_matrix(labels), params.hash_w, ortho_weight)


def loss_gradients(
    graphs,
    labels,
    params: GcnHashParams,
    ortho_weight: float,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple:
    """Exact gradients of the batch loss for every weight.

    Returns (grads, loss). Dropout masks, when enabled, are drawn from
    ``rng`` per graph in batch order, so a seeded generator makes the call
    deterministic.
    """
    if len(graphs) < 2:
        raise DataError(f"loss_gradients: pairwise loss needs >= 2 graphs, got {len(graphs)}")
    c = pairwise_label_matrix(labels)
    y, caches = _batch_forward(graphs, params, rng=rng, dropout_p=dropout_p)
    n, code_bits = y.shape

    sim = (y @ y.T) / code_bits - c
    loss_pair = float((sim * sim).sum() / n)
    g_y = (4.0 / (n * code_bits)) * (sim @ y)

    grads = params.zeros_like()
    for cache, row in zip(caches, g_y):
        encode_backward(cache, params, row, grads)

    gram = params.hash_w.T @ params.hash_w - np.eye(code_bits)
    grads.hash_w += 4.0 * ortho_weight * (params.hash_w @ gram)
    loss = loss_pair + float(ortho_weight * (gram * gram).sum())

    for name, arr in grads.iter_arrays():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"loss_gradients: non-finite gradient in {name}")
    return grads, loss


def finite_diff_check(
    params: GcnHashParams,
    graphs,
    labels,
    ortho_weight: float,
    step: float = 1e-5,
    per_tensor: int = 200,
    seed: int = 0,
) -> tuple:
    """Compare analytic gradients against central finite differences.

    Probes up to ``per_tensor`` randomly sampled coordinates of every weight
    tensor (all of them when the tensor is smaller) with dropout disabled.
    Returns (max relative error, name of the worst coordinate); the error is
    |analytic - numeric| / max(|numeric|, 1e-8).
    """
    rng = np.random.default_rng(seed)
    grads, _ = loss_gradients(graphs, labels, params, ortho_weight)
    analytic = {name: arr for name, arr in grads.iter_arrays()}

    worst = 0.0
    worst_name = ""
    work = params.copy()
    for name, arr in work.iter_arrays():
        flat = arr.reshape(-1)
        count = min(per_tensor, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for idx in coords:
            saved = flat[idx]
            flat[idx] = saved + step
            up = batch_loss(graphs, labels, work, ortho_weight)
            flat[idx] = saved - step
            down = batch_loss(graphs, labels, work, ortho_weight)
            flat[idx] = saved
            numeric = (up - down) / (2.0 * step)
            rel = abs(analytic[name].reshape(-1)[idx] - numeric) / max(abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
                worst_name = f"{name}[{idx}]"
    return worst, worst_name


class Adam:
    """Adam with bias correction; state arrays align with the parameter order."""

    def __init__(self, params: GcnHashParams, lr: float, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(arr) for _, arr in params.iter_arrays()]
        self.v = [np.zeros_like(arr) for _, arr in params.iter_arrays()]

    def step(self, params: GcnHashParams, grads: GcnHashParams) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, ((_, arr), (_, g)) in enumerate(zip(params.iter_arrays(), grads.iter_arrays())):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            arr -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)


def _make_batches(order: np.ndarray, batch_size: int) -> list:
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _stratified_order(labels, rng: np.random.Generator) -> np.ndarray:
    """Interleave the two classes so every batch sees both where possible."""
    by_class = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    piles = [rng.permutation(idx) for idx in by_class.values()]
    order = []
    k = 0
    while any(k < len(p) for p in piles):
        for p in piles:
            if k < len(p):
                order.append(int(p[k]))
        k += 1
    return np.asarray(order)


def train(graphs, config: TrainConfig) -> tuple:
    """Train on labeled graphs; returns (params, per-epoch mean loss history).

    Excluded graphs are dropped up front. A single-class dataset trains
    (with a warning) but the pairwise term is degenerate. Identical
    (graphs, config) reproduce identical parameters and history.
    """
    config.validate()
    kept = [g for g in graphs if g.label != GraphLabel.EXCLUDED]
    if len(kept) < len(graphs):
        warnings.warn(f"train: dropping {len(graphs) - len(kept)} excluded graphs")
    if len(kept) < 2:
        raise DataError(f"train: need >= 2 labeled graphs, got {len(kept)}")
    labels = [g.label for g in kept]
    if len(set(labels)) < 2:
        warnings.warn("train: single-class dataset; pairwise loss is degenerate")

    feature_dim = kept[0].feature_dim
    params = init_params(config.model_dims(feature_dim), seed=config.seed)
    optimizer = Adam(
        params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

    history = []
    for epoch in range(config.epochs):
        if config.stratified_batches:
            order = _stratified_order(labels, shuffle_rng)
        else:
            order = shuffle_rng.permutation(len(kept))
        epoch_losses = []
        for batch_idx in _make_batches(order, config.batch_size):
            batch = [kept[i] for i in batch_idx]
            batch_labels = [labels[i] for i in batch_idx]
            if len(batch) < 2:
                continue
            try:
                grads, loss = loss_gradients(
                    batch,
                    batch_labels,
                    params,
                    config.ortho_weight,
                    dropout_p=config.dropout,
                    rng=dropout_rng,
                )
            except NumericError as exc:
                raise NumericError(f"train: diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericError(f"train: non-finite loss at epoch {epoch}")
            optimizer.step(params, grads)
            epoch_losses.append(loss)
        history.append(float(np.mean(epoch_losses)))
    return params, history
