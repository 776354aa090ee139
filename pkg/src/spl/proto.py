"""Prototype and memory banks, contrastive/focal losses with analytic
gradients, momentum prototype updates, and checkpoint IO.

Gradients flow to features (and, for the inter-class loss, background
features) only; prototypes and memory entries are treated as constants and
evolve through the momentum update and FIFO pushes instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, InsufficientMemory

CKPT_MAGIC = b"SPL1"


@dataclass
class LossConfig:
    tau_t: float = 1.0
    tau_s: float = 0.9
    alpha: float = 0.9
    lambda1: float = 0.5
    lambda2: float = 1.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0

    def validate(self) -> None:
        if self.tau_t <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    value: float
    gradients: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)


@dataclass
class PrototypeBank:
    P: np.ndarray  # (C, K, D), rows unit-norm

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)

    @property
    def shape(self):
        return self.P.shape

    def validate(self, tol: float = 1e-9) -> None:
        norms = np.linalg.norm(self.P, axis=2)
        if not np.allclose(norms, 1.0, atol=tol):
            raise ValueError("prototypes must be unit-norm")

    @classmethod
    def random(cls, num_classes: int, num_prototypes: int, dim: int,
               rng: np.random.Generator) -> "PrototypeBank":
        P = rng.standard_normal((num_classes, num_prototypes, dim))
        P /= np.linalg.norm(P, axis=2, keepdims=True)
        return cls(P)


class MemoryBank:
    """Per-class FIFO of unit-norm feature vectors."""

    def __init__(self, num_classes: int, dim: int, capacity: int = 1000):
        self.num_classes = num_classes
        self.dim = dim
        self.capacity = capacity
        self._store = [[] for _ in range(num_classes)]

    def features(self, class_id: int) -> np.ndarray:
        store = self._store[class_id]
        if not store:
            return np.zeros((0, self.dim))
        return np.stack(store)

    def count(self, class_id: int) -> int:
        return len(self._store[class_id])

    def push(self, features: np.ndarray, class_ids) -> None:
        """FIFO append; the oldest entries beyond capacity are evicted."""
        features = np.asarray(features, dtype=np.float64).reshape(-1, self.dim)
        for vec, cid in zip(features, np.asarray(class_ids, dtype=int)):
            store = self._store[cid]
            store.append(vec.copy())
            if len(store) > self.capacity:
                del store[0]


@dataclass
class ProjectionHead:
    weight: np.ndarray  # (D_in, D)
    bias: np.ndarray  # (D,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)

    @classmethod
    def init(cls, d_in: int, d_out: int,
             rng: np.random.Generator) -> "ProjectionHead":
        scale = 1.0 / np.sqrt(d_in)
        return cls(scale * rng.standard_normal((d_in, d_out)),
                   np.zeros(d_out))


# ---------------------------------------------------------------------------
# contrastive losses

def memory_loss(features: np.ndarray, class_ids, memory: MemoryBank,
                tau_t: float = 1.0) -> LossReport:
    """InfoNCE against the memory bank: the positive is the most similar
    same-class entry, negatives are every other-class entry.

    Features without a same-class entry are skipped and reported.  The
    positive selection is treated as constant during differentiation.
    """
    features = np.asarray(features, dtype=np.float64).reshape(-1, memory.dim)
    class_ids = np.asarray(class_ids, dtype=int)
    n = len(features)
    grads = np.zeros_like(features)
    total = 0.0
    used = 0
    skipped = []
    negatives = {
        c: np.concatenate(
            [memory.features(o) for o in range(memory.num_classes) if o != c]
        ) if memory.num_classes > 1 else np.zeros((0, memory.dim))
        for c in set(class_ids.tolist())
    }
    for i in range(n):
        c = int(class_ids[i])
        pos_pool = memory.features(c)
        if len(pos_pool) == 0:
            skipped.append(i)
            continue
        f = features[i]
        sims = pos_pool @ f
        m_pos = pos_pool[int(np.argmax(sims))]
        neg = negatives[c]

        e_pos = np.exp(f @ m_pos / tau_t)
        e_neg = np.exp(neg @ f / tau_t) if len(neg) else np.zeros(0)
        denom = e_pos + e_neg.sum()
        total += -np.log(e_pos / denom)
        num_vec = e_pos * m_pos
        if len(neg):
            num_vec = num_vec + e_neg @ neg
        grads[i] = (-m_pos + num_vec / denom) / tau_t
        used += 1
    if used == 0:
        return LossReport(0.0, {"features": grads}, skipped)
    return LossReport(total / used, {"features": grads / used}, skipped)


def intra_loss(features: np.ndarray, class_ids, proto_ids,
               bank: PrototypeBank, tau_t: float = 1.0) -> LossReport:
    """Softmax pull toward the assigned prototype against the other
    prototypes of the same class."""
    features = np.asarray(features, dtype=np.float64)
    class_ids = np.asarray(class_ids, dtype=int)
    proto_ids = np.asarray(proto_ids, dtype=int)
    n = len(features)
    grads = np.zeros_like(features)
    if n == 0:
        return LossReport(0.0, {"features": grads})
    total = 0.0
    for i in range(n):
        c, k = int(class_ids[i]), int(proto_ids[i])
        protos = bank.P[c]  # (K, D)
        logits = protos @ features[i] / tau_t
        logits -= logits.max()
        soft = np.exp(logits)
        soft /= soft.sum()
        total += -np.log(soft[k])
        grads[i] = (soft @ protos - protos[k]) / tau_t
    return LossReport(total / n, {"features": grads / n})


def inter_loss(features: np.ndarray, class_ids, proto_ids,
               background: np.ndarray, bank: PrototypeBank,
               tau_t: float = 1.0) -> LossReport:
    """Cross-class and foreground/background contrast.

    Per feature the positive term competes against every other-class
    prototype plus all background features; background features receive
    gradients as well.
    """
    features = np.asarray(features, dtype=np.float64)
    class_ids = np.asarray(class_ids, dtype=int)
    proto_ids = np.asarray(proto_ids, dtype=int)
    background = np.asarray(background, dtype=np.float64).reshape(
        -1, bank.P.shape[2]
    )
    n = len(features)
    grads = np.zeros_like(features)
    bg_grads = np.zeros_like(background)
    if n == 0:
        return LossReport(0.0, {"features": grads, "background": bg_grads})
    C = bank.P.shape[0]
    total = 0.0
    for i in range(n):
        c, k = int(class_ids[i]), int(proto_ids[i])
        f = features[i]
        self_logit = f @ bank.P[c, k] / tau_t
        s_self = np.exp(self_logit)

        other = [bank.P[cc] for cc in range(C) if cc != c]
        if other:
            other = np.concatenate(other)  # ((C-1)*K, D)
            e_other = np.exp(other @ f / tau_t)
        else:
            other = np.zeros((0, len(f)))
            e_other = np.zeros(0)
        e_bg = np.exp(background @ f / tau_t) if len(background) else np.zeros(0)

        denom = s_self + e_other.sum() + e_bg.sum()
        total += -self_logit + np.log(denom)

        num_vec = s_self * bank.P[c, k]
        if len(other):
            num_vec = num_vec + e_other @ other
        if len(background):
            num_vec = num_vec + e_bg @ background
        grads[i] = (-bank.P[c, k] + num_vec / denom) / tau_t
        if len(background):
            bg_grads += np.outer(e_bg / denom, f) / tau_t
    return LossReport(total / n,
                      {"features": grads / n, "background": bg_grads / n})


def focal_cls_loss(pred: np.ndarray, h_up: np.ndarray, h_mask: np.ndarray,
                   focal_alpha: float = 2.0, focal_beta: float = 4.0,
                   pos_threshold: float = 0.999) -> LossReport:
    """Penalty-reduced focal loss against H_up, masked by H_mask.

    Cells with H_mask = 0 contribute nothing; the sum is normalized by the
    number of positive (near-peak) unmasked cells, floored at one.
    """
    pred = np.asarray(pred, dtype=np.float64)
    h_up = np.asarray(h_up, dtype=np.float64)
    if pred.shape != h_up.shape:
        raise DimMismatch(f"pred {pred.shape} vs target {h_up.shape}")
    mask = np.asarray(h_mask, dtype=np.float64)[:, :, None]

    pos = h_up >= pos_threshold
    log_p = np.log(pred)
    log_1p = np.log1p(-pred)
    pos_term = -((1.0 - pred) ** focal_alpha) * log_p
    neg_term = -((1.0 - h_up) ** focal_beta) * (pred ** focal_alpha) * log_1p
    loss_cells = np.where(pos, pos_term, neg_term) * mask

    num_pos = max(1.0, float(np.count_nonzero(pos & (mask > 0.0))))
    value = float(loss_cells.sum()) / num_pos

    d_pos = (focal_alpha * (1.0 - pred) ** (focal_alpha - 1.0) * log_p
             - ((1.0 - pred) ** focal_alpha) / pred)
    d_neg = -((1.0 - h_up) ** focal_beta) * (
        focal_alpha * pred ** (focal_alpha - 1.0) * log_1p
        - (pred ** focal_alpha) / (1.0 - pred)
    )
    grad = np.where(pos, d_pos, d_neg) * mask / num_pos
    return LossReport(value, {"pred": grad})


def total_loss(l_reg: float, l_cls: float, l_intra: float, l_inter: float,
               lambda1: float = 0.5, lambda2: float = 1.0) -> float:
    return l_reg + l_cls + lambda1 * l_intra + lambda2 * l_inter


# ---------------------------------------------------------------------------
# prototype maintenance

def update_prototypes(bank: PrototypeBank, features: np.ndarray, class_ids,
                      proto_ids, alpha: float = 0.9) -> PrototypeBank:
    """Momentum update: assigned prototypes move toward the mean of their
    features and are re-normalized; untouched prototypes are returned as-is."""
    features = np.asarray(features, dtype=np.float64)
    class_ids = np.asarray(class_ids, dtype=int)
    proto_ids = np.asarray(proto_ids, dtype=int)
    P = bank.P.copy()
    groups = {}
    for f, c, k in zip(features, class_ids, proto_ids):
        groups.setdefault((int(c), int(k)), []).append(f)
    for (c, k), vecs in groups.items():
        mean = np.mean(vecs, axis=0)
        # exact fixed points: a full-momentum update or a feature mean that
        # already sits on the prototype must not move it, not even by
        # rounding in the renormalization
        if alpha == 1.0 or np.array_equal(mean, P[c, k]):
            continue
        blended = alpha * P[c, k] + (1.0 - alpha) * mean
        norm = np.linalg.norm(blended)
        if norm > 0:
            P[c, k] = blended / norm
    return PrototypeBank(P)


def _kmeans_pp_seeds(data: np.ndarray, k: int,
                     rng: np.random.Generator) -> np.ndarray:
    n = len(data)
    centers = [data[int(rng.integers(n))]]
    d2 = np.full(n, np.inf)
    for _ in range(k - 1):
        d2 = np.minimum(d2, ((data - centers[-1]) ** 2).sum(axis=1))
        total = d2.sum()
        if total <= 0:
            centers.append(data[int(rng.integers(n))])
            continue
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), r))
        centers.append(data[min(idx, n - 1)])
    return np.stack(centers)


def lloyd_kmeans(data: np.ndarray, k: int, rng: np.random.Generator,
                 tol: float = 1e-6, max_iter: int = 100):
    """k-means++ seeding plus Lloyd iterations; returns (centroids, labels)."""
    centers = _kmeans_pp_seeds(data, k, rng)
    labels = np.zeros(len(data), dtype=int)
    for _ in range(max_iter):
        dists = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = data[labels == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
            else:  # re-seed an empty cluster at the farthest point
                far = int(dists.min(axis=1).argmax())
                new_centers[j] = data[far]
        shift = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        if shift < tol:
            break
    return centers, labels


def kmeans_init(memory: MemoryBank, k: int,
                rng: np.random.Generator) -> PrototypeBank:
    """Initialize prototypes by per-class k-means over the memory bank."""
    C = memory.num_classes
    P = np.zeros((C, k, memory.dim))
    for c in range(C):
        data = memory.features(c)
        if len(data) < k:
            raise InsufficientMemory(c, len(data), k)
        centers, _ = lloyd_kmeans(data, k, rng)
        norms = np.linalg.norm(centers, axis=1, keepdims=True)
        P[c] = centers / np.where(norms > 0, norms, 1.0)
    return PrototypeBank(P)


# ---------------------------------------------------------------------------
# projection head backward

def head_backward(raw_values: np.ndarray, head: ProjectionHead,
                  upstream: np.ndarray):
    """Backpropagate through the per-cell affine map and L2 normalization.

    Returns (grad_weight, grad_bias, grad_raw).
    """
    x = np.asarray(raw_values, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if x.shape[-1] != head.weight.shape[0]:
        raise DimMismatch("raw feature dim does not match head input")
    if g.shape[-1] != head.weight.shape[1]:
        raise DimMismatch("upstream dim does not match head output")

    y = x @ head.weight + head.bias
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    safe = np.where(norm > 0.0, norm, 1.0)
    z = y / safe
    # d(normalize)/dy applied to the upstream gradient
    gy = (g - (g * z).sum(axis=-1, keepdims=True) * z) / safe
    gy = np.where(norm > 0.0, gy, 0.0)

    flat_x = x.reshape(-1, x.shape[-1])
    flat_gy = gy.reshape(-1, gy.shape[-1])
    grad_w = flat_x.T @ flat_gy
    grad_b = flat_gy.sum(axis=0)
    grad_x = gy @ head.weight.T
    return grad_w, grad_b, grad_x


# ---------------------------------------------------------------------------
# checkpoint IO

def save_checkpoint(path, bank: PrototypeBank, memory: MemoryBank,
                    head: ProjectionHead | None = None,
                    cls_weight: np.ndarray | None = None,
                    cls_bias: np.ndarray | None = None) -> None:
    """Binary checkpoint: int32 header (C, K, D, count, per-class counts,
    head dims) followed by a little-endian float32 payload."""
    C, K, D = bank.P.shape
    counts = [memory.count(c) for c in range(C)]
    total = sum(counts)
    head_in = head.weight.shape[0] if head is not None else 0
    head_out = head.weight.shape[1] if head is not None else 0
    cls_c = cls_weight.shape[0] if cls_weight is not None else 0

    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<4i", C, K, D, total))
        fh.write(struct.pack(f"<{C}i", *counts))
        fh.write(struct.pack("<4i", head_in, head_out, cls_c,
                             memory.capacity))
        bank.P.astype("<f4").tofile(fh)
        for c in range(C):
            memory.features(c).astype("<f4").tofile(fh)
        if head is not None:
            head.weight.astype("<f4").tofile(fh)
            head.bias.astype("<f4").tofile(fh)
        if cls_weight is not None:
            cls_weight.astype("<f4").tofile(fh)
            cls_bias.astype("<f4").tofile(fh)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns a dict of the stored pieces."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        C, K, D, total = struct.unpack("<4i", fh.read(16))
        counts = struct.unpack(f"<{C}i", fh.read(4 * C))
        head_in, head_out, cls_c, capacity = struct.unpack("<4i", fh.read(16))

        P = np.fromfile(fh, dtype="<f4", count=C * K * D).reshape(C, K, D)
        memory = MemoryBank(C, D, capacity=capacity)
        for c in range(C):
            feats = np.fromfile(fh, dtype="<f4", count=counts[c] * D)
            if counts[c]:
                memory.push(feats.reshape(counts[c], D).astype(np.float64),
                            [c] * counts[c])
        head = None
        if head_in:
            w = np.fromfile(fh, dtype="<f4", count=head_in * head_out)
            b = np.fromfile(fh, dtype="<f4", count=head_out)
            head = ProjectionHead(w.reshape(head_in, head_out).astype(np.float64),
                                  b.astype(np.float64))
        cls_weight = cls_bias = None
        if cls_c:
            cls_weight = np.fromfile(fh, dtype="<f4", count=cls_c * D).reshape(
                cls_c, D).astype(np.float64)
            cls_bias = np.fromfile(fh, dtype="<f4", count=cls_c).astype(np.float64)
    return {
        "bank": PrototypeBank(P.astype(np.float64)),
        "memory": memory,
        "head": head,
        "cls_weight": cls_weight,
        "cls_bias": cls_bias,
    }
