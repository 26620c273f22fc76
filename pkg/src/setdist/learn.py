"""Desk-scale metric learning through the set distance.

An affine (optionally ReLU) embedding stands in for the CNN feature
extractor.  Each batch holds P identities x Q tracklets with a few random
frames per tracklet.  The loss is batch-hard triplet loss on OT set
distances plus softmax identification loss on mean-pooled embeddings, and
parameters are updated with ADAM.  Gradients through the OT distance hold
the optimal plan fixed (envelope rule).
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from setdist.measures import Tracklet
from setdist.ot import (
    exact_w2,
    grad_ot_points,
    grad_sinkhorn_objective,
    neg_entropy,
    sinkhorn_plans,
)

log = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "relu")
TRAIN_POLISH_AFTER = 50


@dataclass
class EmbeddingModel:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise ValueError(f"weight must be a nonempty matrix, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias length must equal out_dim")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("model parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "EmbeddingModel":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def random(cls, in_dim: int, out_dim: int, rng: np.random.Generator,
               activation: str = "identity") -> "EmbeddingModel":
        weight = rng.normal(scale=1.0 / math.sqrt(in_dim), size=(out_dim, in_dim))
        return cls(weight, np.zeros(out_dim), activation)

    def preactivation(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.in_dim:
            raise ValueError(
                f"dimension mismatch: frames {frames.shape} vs model in_dim {self.in_dim}"
            )
        return frames @ self.weight.T + self.bias

    def embed(self, frames: np.ndarray) -> np.ndarray:
        pre = self.preactivation(frames)
        return np.maximum(pre, 0.0) if self.activation == "relu" else pre

    def params(self) -> dict[str, np.ndarray]:
        return {"embed.weight": self.weight, "embed.bias": self.bias}


def embed(model: EmbeddingModel, frames) -> np.ndarray:
    return model.embed(frames)


@dataclass
class Classifier:
    weight: np.ndarray  # (num_identities, out_dim)
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[0] < 2:
            raise ValueError("classifier needs at least 2 identities")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias length must equal num_identities")

    @property
    def num_identities(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def random(cls, num_identities: int, in_dim: int, rng: np.random.Generator) -> "Classifier":
        return cls(rng.normal(scale=0.01, size=(num_identities, in_dim)), np.zeros(num_identities))

    def params(self) -> dict[str, np.ndarray]:
        return {"cls.weight": self.weight, "cls.bias": self.bias}


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.4
    batch_tracklets: int = 24
    tracklets_per_identity: int = 4
    frames_per_tracklet: int = 4
    learning_rate: float = 3e-4
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 100
    total_epochs: int = 400
    lam: float = 20.0
    distance: str = "sinkhorn"  # or "exact"
    out_dim: int = 16
    activation: str = "identity"
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.batch_tracklets < 2:
            raise ValueError("batch_tracklets must be >= 2")
        for name in ("tracklets_per_identity", "frames_per_tracklet", "lr_decay_every_epochs",
                     "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_epochs < 0 or self.learning_rate < 0 or self.lam < 0:
            raise ValueError("total_epochs, learning_rate and lam must be nonnegative")
        if self.distance not in ("sinkhorn", "exact"):
            raise ValueError(f"unknown training distance {self.distance!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def batch_layout(self) -> tuple[int, int]:
        """(identities per batch P, tracklets per identity Q) with P * Q == B."""
        q = min(self.tracklets_per_identity, self.batch_tracklets // 2)
        while self.batch_tracklets % q:
            q -= 1
        return self.batch_tracklets // q, q

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every_epochs)


# ---------------------------------------------------------------------------
# losses


def batch_hard_triplets(distances, identities) -> list[tuple[int, int, int]]:
    """For each anchor: the farthest positive and the nearest negative.

    Ties go to the lowest index; anchors without a positive or a negative
    are skipped.
    """
    d = np.asarray(distances, dtype=np.float64)
    ids = np.asarray(identities)
    out = []
    for a in range(len(ids)):
        same = ids == ids[a]
        same[a] = False
        other = ids != ids[a]
        if not same.any() or not other.any():
            continue
        pos_idx = np.flatnonzero(same)
        neg_idx = np.flatnonzero(other)
        p = int(pos_idx[np.argmax(d[a, pos_idx])])
        n = int(neg_idx[np.argmin(d[a, neg_idx])])
        out.append((a, p, n))
    return out


def triplet_loss(d_ap: float, d_an: float, margin: float) -> float:
    return max(0.0, d_ap - d_an + margin)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(classifier: Classifier, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if np.any(labels < 0) or np.any(labels >= classifier.num_identities):
        raise ValueError(f"label out of range for {classifier.num_identities} identities")
    return labels


def id_loss(classifier: Classifier, pooled, labels) -> float:
    """Batch-mean softmax cross-entropy of the classifier on pooled embeddings."""
    labels = _check_labels(classifier, labels)
    logits = np.asarray(pooled, dtype=np.float64) @ classifier.weight.T + classifier.bias
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Batch:
    frames: list[np.ndarray]  # raw frames per tracklet, (f_t, in_dim)
    labels: np.ndarray  # class indices in [0, num_identities)
    source: list[str] = field(default_factory=list)  # tracklet ids, for logging


@dataclass
class Forward:
    pre: list[np.ndarray]
    emb: list[np.ndarray]
    pooled: np.ndarray
    distances: np.ndarray
    plans: dict[tuple[int, int], np.ndarray]
    triplets: list[tuple[int, int, int]]
    hinge: np.ndarray
    triplet_loss: float
    id_loss: float

    @property
    def total(self) -> float:
        return self.triplet_loss + self.id_loss


def _pair_distances(emb: list[np.ndarray], config: TrainConfig):
    b = len(emb)
    pairs = [(i, j) for i in range(b) for j in range(i + 1, b)]
    dist = np.zeros((b, b))
    plans: dict[tuple[int, int], np.ndarray] = {}
    if not pairs:
        return dist, plans
    if config.distance == "exact":
        for i, j in pairs:
            r = exact_w2(emb[i], emb[j])
            dist[i, j] = dist[j, i] = r.value
            plans[i, j] = r.plan
        return dist, plans
    # group pairs by shape so each group is one batched Sinkhorn solve
    groups: dict[tuple[int, int], list[tuple[int, int]]] = defaultdict(list)
    for i, j in pairs:
        groups[emb[i].shape[0], emb[j].shape[0]].append((i, j))
    for shape in sorted(groups):
        group = groups[shape]
        xs = np.stack([emb[i] for i, _ in group])
        ys = np.stack([emb[j] for _, j in group])
        costs = ((xs[:, :, None, :] - ys[:, None, :, :]) ** 2).sum(axis=-1)
        if config.lam == 0:
            p = np.full(costs.shape, 1.0 / (shape[0] * shape[1]))
            values = (p * costs).sum(axis=(1, 2))
        else:
            # the stack waits on its slowest pair, so switch to Newton early
            p, scale = sinkhorn_plans(costs, config.lam, max_iter=config.sinkhorn_max_iter,
                                      tol=config.sinkhorn_tol, polish_after=TRAIN_POLISH_AFTER)
            values = (p * costs).sum(axis=(1, 2)) + scale / config.lam * neg_entropy(p)
        for k, (i, j) in enumerate(group):
            dist[i, j] = dist[j, i] = values[k]
            plans[i, j] = p[k]
    return dist, plans


def forward(model: EmbeddingModel, classifier: Classifier, batch: Batch,
            config: TrainConfig) -> Forward:
    """Loss of one batch; records everything ``backward`` needs.

    Training distance: with ``config.distance == "sinkhorn"`` it is the
    entropic objective <P, M> + (max M / lam) sum(P log P) (its gradient
    is exact under the envelope rule); with ``"exact"`` it is W2^2.
    """
    pre = [model.preactivation(f) for f in batch.frames]
    emb = [np.maximum(a, 0.0) if model.activation == "relu" else a for a in pre]
    pooled = np.stack([e.mean(axis=0) for e in emb])
    dist, plans = _pair_distances(emb, config)
    triplets = batch_hard_triplets(dist, batch.labels)
    hinge = np.array([dist[a, p] - dist[a, n] + config.margin for a, p, n in triplets])
    l_tri = float(np.maximum(hinge, 0.0).sum()) if len(triplets) else 0.0
    l_id = id_loss(classifier, pooled, batch.labels)
    return Forward(pre, emb, pooled, dist, plans, triplets, hinge, l_tri, l_id)


def _pair_grad(fwd: Forward, i: int, j: int, config: TrainConfig):
    """Gradient of d(i, j) w.r.t. (emb[i], emb[j])."""
    flip = i > j
    a, b = (j, i) if flip else (i, j)
    plan = fwd.plans[a, b]
    if config.distance == "exact":
        ga, gb = grad_ot_points(fwd.emb[a], fwd.emb[b], plan)
    else:
        ga, gb = grad_sinkhorn_objective(fwd.emb[a], fwd.emb[b], plan, config.lam)
    return (gb, ga) if flip else (ga, gb)


def backward(fwd: Forward, model: EmbeddingModel, classifier: Classifier, batch: Batch,
             config: TrainConfig) -> dict[str, np.ndarray]:
    """Gradients of L_triplet + L_ID w.r.t. all embedding and classifier parameters."""
    labels = _check_labels(classifier, batch.labels)
    d_emb = [np.zeros_like(e) for e in fwd.emb]

    for (a, p, n), h in zip(fwd.triplets, fwd.hinge):
        if h <= 0:
            continue
        ga, gp = _pair_grad(fwd, a, p, config)
        d_emb[a] += ga
        d_emb[p] += gp
        ga, gn = _pair_grad(fwd, a, n, config)
        d_emb[a] -= ga
        d_emb[n] -= gn

    bsz = len(labels)
    probs = _softmax(fwd.pooled @ classifier.weight.T + classifier.bias)
    probs[np.arange(bsz), labels] -= 1.0
    d_logits = probs / bsz
    grads = {
        "cls.weight": d_logits.T @ fwd.pooled,
        "cls.bias": d_logits.sum(axis=0),
    }
    d_pooled = d_logits @ classifier.weight
    for t in range(bsz):
        d_emb[t] += d_pooled[t] / fwd.emb[t].shape[0]

    g_w = np.zeros_like(model.weight)
    g_b = np.zeros_like(model.bias)
    for t, frames in enumerate(batch.frames):
        d_pre = d_emb[t] * (fwd.pre[t] > 0) if model.activation == "relu" else d_emb[t]
        g_w += d_pre.T @ frames
        g_b += d_pre.sum(axis=0)
    grads["embed.weight"] = g_w
    grads["embed.bias"] = g_b
    return grads


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected ADAM update; returns new parameter arrays."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"diverged: non-finite gradient for {k}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        out[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out, state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    lr: float
    triplet: float
    identification: float
    total: float
    active_triplets: int


@dataclass
class TrainResult:
    model: EmbeddingModel
    classifier: Classifier
    history: list[EpochLog]
    class_of_identity: dict[int, int]


def sample_frames(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = frames.shape[0]
    idx = rng.choice(n, size=k, replace=n < k)
    return frames[np.sort(idx)]


def _epoch_batches(by_identity: dict[int, list[Tracklet]], class_of: dict[int, int],
                   config: TrainConfig, rng: np.random.Generator) -> list[Batch]:
    p, q = config.batch_layout()
    idents = sorted(by_identity)
    p = min(p, len(idents))
    order = [idents[i] for i in rng.permutation(len(idents))]
    num_batches = math.ceil(len(order) / p)
    batches = []
    for b in range(num_batches):
        # wrap around so the last batch is full and still has negatives
        chosen = [order[(b * p + k) % len(order)] for k in range(p)]
        frames, labels, source = [], [], []
        for ident in chosen:
            pool = by_identity[ident]
            picks = rng.choice(len(pool), size=q, replace=len(pool) < q)
            for t in picks:
                tr = pool[int(t)]
                frames.append(sample_frames(tr.frames, config.frames_per_tracklet, rng))
                labels.append(class_of[ident])
                source.append(tr.tracklet_id)
        batches.append(Batch(frames, np.array(labels), source))
    return batches


def train(tracklets: Sequence[Tracklet], config: TrainConfig,
          model: EmbeddingModel | None = None) -> TrainResult:
    """Train the embedding and classifier; deterministic for a fixed seed."""
    by_identity: dict[int, list[Tracklet]] = defaultdict(list)
    for tr in tracklets:
        by_identity[tr.identity].append(tr)
    if len(by_identity) < 2 or any(len(v) < 2 for v in by_identity.values()):
        raise ValueError("training needs >= 2 identities with >= 2 tracklets each")
    dims = {tr.dim for tr in tracklets}
    if len(dims) != 1:
        raise ValueError("all tracklets must share one feature dimension")
    in_dim = dims.pop()

    rng = np.random.default_rng(config.seed)
    if model is None:
        model = EmbeddingModel.random(in_dim, config.out_dim, rng, config.activation)
    class_of = {ident: k for k, ident in enumerate(sorted(by_identity))}
    classifier = Classifier.random(len(class_of), model.out_dim, rng)
    state = AdamState()
    history = []
    for epoch in range(config.total_epochs):
        lr = config.lr_at(epoch)
        sums = np.zeros(3)
        active = 0
        batches = _epoch_batches(by_identity, class_of, config, rng)
        for batch in batches:
            fwd = forward(model, classifier, batch, config)
            grads = backward(fwd, model, classifier, batch, config)
            params = {**model.params(), **classifier.params()}
            new, state = adam_step(params, grads, state, lr)
            model = EmbeddingModel(new["embed.weight"], new["embed.bias"], model.activation)
            classifier = Classifier(new["cls.weight"], new["cls.bias"])
            sums += (fwd.triplet_loss, fwd.id_loss, fwd.total)
            active += int(np.sum(fwd.hinge > 0))
        sums /= len(batches)
        history.append(EpochLog(epoch, lr, float(sums[0]), float(sums[1]), float(sums[2]), active))
        log.debug("epoch %d lr %.2e triplet %.4f id %.4f", epoch, lr, sums[0], sums[1])
    return TrainResult(model, classifier, history, class_of)
