"""Trainable edge-scoring head: projection, per-source-group biased
self-attention, and an MLP classifier, with hand-derived gradients.

Tokens are 20-d edge feature vectors. Attention runs independently inside each
per-source candidate group; the additive bias -lambda_comp off the diagonal
penalizes co-activation, so the head learns to pick few edges per source.
All math is float64 internally; persisted weights are float32.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FEATURE_DIM, HeadWeights, Raster, ValidationError, Vertex
from .features import CandidateEdge, extract_edge_features

MLP_HIDDEN = 64


@dataclass
class TrainBatch:
    """Edge tokens with contiguous per-source groups and binary labels."""

    features: np.ndarray  # (n, 20)
    groups: list[tuple[int, int]]  # half-open [start, end) spans covering [0, n)
    labels: np.ndarray  # (n,) in {0, 1}

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.features.shape[1] != FEATURE_DIM:
            raise ValidationError(
                f"features must be (n, {FEATURE_DIM}), got {self.features.shape}"
            )
        if self.labels.shape != (n,):
            raise ValidationError("labels misaligned with features")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("labels must be 0 or 1")
        cursor = 0
        for s, e in self.groups:
            if s != cursor or e <= s:
                raise ValidationError(f"groups must be contiguous, bad span ({s}, {e})")
            cursor = e
        if cursor != n:
            raise ValidationError("groups do not cover all tokens")


def groups_from_sources(sources: list[int]) -> list[tuple[int, int]]:
    """Contiguous spans of equal source ids (ids must already be grouped)."""
    spans = []
    start = 0
    for k in range(1, len(sources) + 1):
        if k == len(sources) or sources[k] != sources[start]:
            spans.append((start, k))
            start = k
    return spans


def init_weights(seed: int, d_h: int = 256, heads: int = 4) -> HeadWeights:
    """Glorot-uniform weights, zero biases, lambda_comp = 1."""
    if d_h % heads != 0:
        raise ValidationError(f"hidden dim {d_h} not divisible by heads {heads}")
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(np.float32)

    t = {
        "proj.weight": glorot(FEATURE_DIM, d_h),
        "proj.bias": np.zeros(d_h, dtype=np.float32),
        "attn.q.weight": glorot(d_h, d_h),
        "attn.q.bias": np.zeros(d_h, dtype=np.float32),
        "attn.k.weight": glorot(d_h, d_h),
        "attn.k.bias": np.zeros(d_h, dtype=np.float32),
        "attn.v.weight": glorot(d_h, d_h),
        "attn.v.bias": np.zeros(d_h, dtype=np.float32),
        "attn.out.weight": glorot(d_h, d_h),
        "attn.out.bias": np.zeros(d_h, dtype=np.float32),
        "lambda_comp": np.array([1.0], dtype=np.float32),
        "mlp.fc1.weight": glorot(d_h, MLP_HIDDEN),
        "mlp.fc1.bias": np.zeros(MLP_HIDDEN, dtype=np.float32),
        "mlp.fc2.weight": glorot(MLP_HIDDEN, 1),
        "mlp.fc2.bias": np.zeros(1, dtype=np.float32),
        "heads": np.array([float(heads)], dtype=np.float32),
    }
    return HeadWeights(t)


def _as_f64(weights: HeadWeights) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64) for k, v in weights.tensors.items()}


def _forward_cached(w: dict[str, np.ndarray], features: np.ndarray, groups) -> tuple:
    """Forward pass keeping every intermediate needed by the backward pass."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != FEATURE_DIM:
        raise ValidationError(f"features must be (n, {FEATURE_DIM}), got {x.shape}")
    d = w["proj.weight"].shape[1]
    heads = int(round(w["heads"][0]))
    dh = d // heads
    lam = w["lambda_comp"][0]

    h0 = x @ w["proj.weight"] + w["proj.bias"]
    q = h0 @ w["attn.q.weight"] + w["attn.q.bias"]
    k = h0 @ w["attn.k.weight"] + w["attn.k.bias"]
    v = h0 @ w["attn.v.weight"] + w["attn.v.bias"]

    attn_concat = np.zeros_like(h0)
    group_cache = []
    for s, e in groups:
        m = e - s
        qh = q[s:e].reshape(m, heads, dh).transpose(1, 0, 2)  # (H, m, dh)
        kh = k[s:e].reshape(m, heads, dh).transpose(1, 0, 2)
        vh = v[s:e].reshape(m, heads, dh).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)  # (H, m, m)
        bias = -lam * (1.0 - np.eye(m))
        scores = scores + bias[None, :, :]
        scores -= scores.max(axis=2, keepdims=True)
        expd = np.exp(scores)
        attn = expd / expd.sum(axis=2, keepdims=True)  # (H, m, m), rows sum to 1
        out = attn @ vh  # (H, m, dh)
        attn_concat[s:e] = out.transpose(1, 0, 2).reshape(m, d)
        group_cache.append((qh, kh, vh, attn))

    attn_out = attn_concat @ w["attn.out.weight"] + w["attn.out.bias"]
    h1 = h0 + attn_out
    z1 = h1 @ w["mlp.fc1.weight"] + w["mlp.fc1.bias"]
    r = np.maximum(z1, 0.0)
    logits = (r @ w["mlp.fc2.weight"] + w["mlp.fc2.bias"])[:, 0]
    cache = (x, h0, q, k, v, attn_concat, h1, z1, r, group_cache, heads, dh, lam)
    return logits, cache


def forward(weights: HeadWeights, features: np.ndarray, groups) -> np.ndarray:
    """Connectivity logits, one per token. Groups never attend across."""
    logits, _ = _forward_cached(_as_f64(weights), features, groups)
    return logits


def attention_matrices(weights: HeadWeights, features: np.ndarray, groups) -> list[np.ndarray]:
    """Per-group attention tensors (heads, m, m); exposed for verification."""
    _, cache = _forward_cached(_as_f64(weights), features, groups)
    return [attn for (_, _, _, attn) in cache[9]]


def _backward(w, groups, cache, dlogits) -> dict[str, np.ndarray]:
    x, h0, q, k, v, attn_concat, h1, z1, r, group_cache, heads, dh, lam = cache
    g = {name: np.zeros_like(arr) for name, arr in w.items()}
    g["heads"][:] = 0.0  # structural constant, never trained

    dr = dlogits[:, None] @ w["mlp.fc2.weight"].T  # (n, MLP_HIDDEN)
    g["mlp.fc2.weight"] += r.T @ dlogits[:, None]
    g["mlp.fc2.bias"] += dlogits.sum(keepdims=True)
    dz1 = dr * (z1 > 0.0)
    g["mlp.fc1.weight"] += h1.T @ dz1
    g["mlp.fc1.bias"] += dz1.sum(axis=0)
    dh1 = dz1 @ w["mlp.fc1.weight"].T

    dattn_out = dh1
    g["attn.out.weight"] += attn_concat.T @ dattn_out
    g["attn.out.bias"] += dattn_out.sum(axis=0)
    dattn_concat = dattn_out @ w["attn.out.weight"].T
    dh0 = dh1.copy()  # residual branch

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dlam = 0.0
    for (s, e), (qh, kh, vh, attn) in zip(groups, group_cache):
        m = e - s
        dout = dattn_concat[s:e].reshape(m, heads, dh).transpose(1, 0, 2)  # (H, m, dh)
        dattn = dout @ vh.transpose(0, 2, 1)  # (H, m, m)
        dvh = attn.transpose(0, 2, 1) @ dout
        # softmax backward: dS = A * (dA - sum(dA * A, axis))
        tmp = (dattn * attn).sum(axis=2, keepdims=True)
        dscores = attn * (dattn - tmp)
        off_diag = 1.0 - np.eye(m)
        dlam += -(dscores * off_diag[None, :, :]).sum()
        dqh = dscores @ kh / np.sqrt(dh)
        dkh = dscores.transpose(0, 2, 1) @ qh / np.sqrt(dh)
        dq[s:e] = dqh.transpose(1, 0, 2).reshape(m, heads * dh)
        dk[s:e] = dkh.transpose(1, 0, 2).reshape(m, heads * dh)
        dv[s:e] = dvh.transpose(1, 0, 2).reshape(m, heads * dh)
    g["lambda_comp"][0] = dlam

    g["attn.q.weight"] += h0.T @ dq
    g["attn.q.bias"] += dq.sum(axis=0)
    g["attn.k.weight"] += h0.T @ dk
    g["attn.k.bias"] += dk.sum(axis=0)
    g["attn.v.weight"] += h0.T @ dv
    g["attn.v.bias"] += dv.sum(axis=0)
    dh0 += dq @ w["attn.q.weight"].T
    dh0 += dk @ w["attn.k.weight"].T
    dh0 += dv @ w["attn.v.weight"].T

    g["proj.weight"] += x.T @ dh0
    g["proj.bias"] += dh0.sum(axis=0)
    return g


def bce_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    z, y = np.asarray(logits, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean())


def loss_and_grad(weights: HeadWeights, batch: TrainBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean sigmoid-BCE and analytic gradients for every tensor."""
    if batch.features.shape[0] == 0:
        raise ValidationError("empty batch")
    w = _as_f64(weights)
    return _loss_and_grad_f64(w, batch)


def _loss_and_grad_f64(w: dict[str, np.ndarray], batch: TrainBatch):
    logits, cache = _forward_cached(w, batch.features, batch.groups)
    loss = bce_from_logits(logits, batch.labels)
    n = len(logits)
    dlogits = (1.0 / (1.0 + np.exp(-logits)) - batch.labels) / n
    grads = _backward(w, batch.groups, cache, dlogits)
    return loss, grads


def gradient_check(
    weights: HeadWeights, batch: TrainBatch, eps: float = 1e-3, max_entries: int = 24, seed: int = 0
) -> dict[str, float]:
    """Relative error of analytic vs central-difference gradients per tensor.

    Checks up to max_entries randomly chosen entries of each tensor; error is
    |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8) maximized over checked entries.
    """
    w = _as_f64(weights)
    _, grads = _loss_and_grad_f64(w, batch)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, arr in w.items():
        if name == "heads":
            continue
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        idxs = (
            np.arange(flat.size)
            if flat.size <= max_entries
            else rng.choice(flat.size, size=max_entries, replace=False)
        )
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = _loss_and_grad_f64(w, batch)
            flat[i] = orig - eps
            lm, _ = _loss_and_grad_f64(w, batch)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(fd), 1e-8)
            worst = max(worst, abs(gflat[i] - fd) / denom)
        errors[name] = worst
    return errors


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def train(
    weights: HeadWeights,
    dataset: list[TrainBatch],
    lr: float = 1e-3,
    epochs: int = 50,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[HeadWeights, list[float]]:
    """Adam over the dataset; lr drops by 10x at 80% of the epoch budget.

    Returns trained weights and the per-epoch mean loss curve. Batch order is
    preserved, so runs are deterministic.
    """
    if not dataset:
        raise ValidationError("empty dataset")
    w = _as_f64(weights)
    state = AdamState(
        m={k: np.zeros_like(v) for k, v in w.items()},
        v={k: np.zeros_like(v) for k, v in w.items()},
    )
    b1, b2 = betas
    decay_at = int(np.floor(0.8 * epochs))
    curve = []
    for epoch in range(epochs):
        cur_lr = lr * (0.1 if epoch >= decay_at else 1.0)
        total = 0.0
        for batch in dataset:
            loss, grads = _loss_and_grad_f64(w, batch)
            total += loss
            state.step += 1
            t = state.step
            for name in w:
                if name == "heads":
                    continue
                gk = grads[name]
                state.m[name] = b1 * state.m[name] + (1 - b1) * gk
                state.v[name] = b2 * state.v[name] + (1 - b2) * gk * gk
                mhat = state.m[name] / (1 - b1**t)
                vhat = state.v[name] / (1 - b2**t)
                w[name] = w[name] - cur_lr * mhat / (np.sqrt(vhat) + eps)
        curve.append(total / len(dataset))
    out = HeadWeights({k: v.astype(np.float32) for k, v in w.items()})
    return out, curve


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


def score_edges(
    weights: HeadWeights,
    road: Raster,
    vertices: list[Vertex],
    pairs: list[tuple[int, int]],
    config,
) -> list[CandidateEdge]:
    """Feature extraction + head forward + sigmoid for a batch of pairs.

    Pairs are grouped by their source (lower) vertex index for attention.
    """
    if not pairs:
        return []
    ordered = sorted(pairs)
    edges = extract_edge_features(
        road,
        vertices,
        ordered,
        kernels=config.pool_kernels,
        r=config.pair_radius,
        n_samples=config.num_samples,
        tau=config.temperature,
    )
    feats = np.stack([e.feature_vector() for e in edges])
    groups = groups_from_sources([e.src for e in edges])
    logits = forward(weights, feats, groups)
    probs = sigmoid(logits)
    for e, p in zip(edges, probs):
        e.score = float(p)
    return edges
