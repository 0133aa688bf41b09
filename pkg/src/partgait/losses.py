"""Triplet loss with batch-all mining, cosine proximity loss and Adam."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateBatch, ZeroVector


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.2
    mining: str = "batch_all"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("triplet margin must be positive")


@dataclass
class MiningReport:
    easy: int = 0
    semi_hard: int = 0
    hard: int = 0
    averaged_over: int = 0

    @property
    def total(self):
        return self.easy + self.semi_hard + self.hard


def triplet_loss(d_ap, d_an, margin=0.2):
    """Hinge ``max(M + d_ap - d_an, 0) / (2M)`` for one triplet.

    The anchor-positive distance must undercut the anchor-negative distance
    by the margin for the loss to vanish.
    """
    return max(margin + d_ap - d_an, 0.0) / (2.0 * margin)


def valid_triplet_mask(labels):
    """Boolean ``(n, n, n)`` mask of (anchor, positive, negative) index triples."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    distinct = ~np.eye(len(labels), dtype=bool)
    ap = same & distinct
    an = ~same
    return ap[:, :, None] & an[:, None, :]


def count_valid_triplets(labels):
    """Closed form: sum over identities of ``n_i (n_i - 1) (n - n_i)``."""
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    n = counts.sum()
    return int((counts * (counts - 1) * (n - counts)).sum())


def batch_all_triplet_loss(embeddings, labels, margin=0.2):
    """Batch-all triplet loss, averaged over the triplets with positive loss.

    Returns ``(loss Tensor, MiningReport)``.  The loss is zero when every
    valid triplet is easy.
    """
    emb = T.as_tensor(embeddings)
    labels = np.asarray(labels)
    if emb.ndim != 2 or emb.shape[0] != len(labels):
        raise ValueError(f"embeddings {emb.shape} do not match {len(labels)} labels")
    mask = valid_triplet_mask(labels)
    if not mask.any():
        raise DegenerateBatch("batch has no (anchor, positive, negative) triplet")
    n = len(labels)
    D = T.pairwise_distances(emb)
    hinge = T.relu(D.reshape((n, n, 1)) - D.reshape((n, 1, n)) + margin) / (2.0 * margin)
    per = hinge * mask.astype(emb.dtype)

    d = D.data
    raw = margin + d[:, :, None] - d[:, None, :]
    positive = mask & (raw > 0)
    hard = positive & (d[:, :, None] >= d[:, None, :])
    report = MiningReport(
        easy=int((mask & ~positive).sum()),
        semi_hard=int((positive & ~hard).sum()),
        hard=int(hard.sum()),
        averaged_over=int(positive.sum()),
    )
    if report.averaged_over == 0:
        return T.tsum(per) * 0.0, report
    return T.tsum(per) / float(report.averaged_over), report


def cosine_proximity_loss(pred, target):
    """``-cos(pred, target)`` averaged over a leading batch axis (if any)."""
    pred = T.as_tensor(pred)
    target = T.as_tensor(np.asarray(target.data if isinstance(target, T.Tensor) else target,
                                    dtype=pred.dtype))
    pn = np.sqrt((pred.data ** 2).sum(axis=-1))
    if np.any(pn == 0):
        raise ZeroVector("prediction vector has zero norm")
    tn = np.sqrt((target.data ** 2).sum(axis=-1))
    if np.any(tn == 0):
        raise ZeroVector("target vector has zero norm")
    dot = T.tsum(pred * target, axis=-1)
    norm = T.sqrt(T.tsum(pred * pred, axis=-1))
    cos = dot / (norm * tn)
    return -T.mean(cos)


def one_hot(indices, num_classes, dtype=np.float64):
    out = np.zeros((len(indices), num_classes), dtype=dtype)
    out[np.arange(len(indices)), indices] = 1
    return out


def adam_step(param, grad, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction.

    ``state`` holds ``m``, ``v`` (arrays or None) and ``t``; it is updated in
    place and the new parameter array is returned.
    """
    p = np.asarray(param)
    g = np.asarray(grad, dtype=p.dtype)
    m = state.get("m")
    v = state.get("v")
    m = np.zeros_like(p) if m is None else m
    v = np.zeros_like(p) if v is None else v
    t = state.get("t", 0) + 1
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    state.update(m=m, v=v, t=t)
    return (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


class Adam:
    """Adam over a dict of named Tensors; gradients are read from ``.grad``."""

    def __init__(self, tensors, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = dict(tensors)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {name: {} for name in self.tensors}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def step(self):
        for name, t in self.tensors.items():
            if t.grad is None:
                continue
            t.data = adam_step(t.data, t.grad, self.state[name], self.lr,
                               self.beta1, self.beta2, self.eps)
