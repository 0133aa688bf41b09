"""Two-stage training: triplet-trained feature extractor, then the attentive head."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import encode_batch
from .errors import DegenerateBatch, ShapeMismatch
from .head import classify, forward_head, partial_features
from .losses import Adam, batch_all_triplet_loss, cosine_proximity_loss, one_hot
from .model import STAGE1_PREFIXES, STAGE2_PREFIXES, with_classifier

log = logging.getLogger(__name__)

STAGE1_LOG_FIELDS = ("step", "loss", "easy", "semi_hard", "hard")
STAGE2_LOG_FIELDS = ("epoch", "loss", "accuracy")


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults are the full-scale CASIA-B settings.

    Step/epoch counts are taken literally as optimizer steps (stage 1) and
    passes over the extracted features (stage 2).
    """

    lr: float = 1e-4
    margin: float = 0.2
    dropout: float = 0.1
    seed: int = 0
    stage1_steps: int = 80000
    stage1_batch_size: int = 128
    seqs_per_id: int = 4
    stage2_epochs: int = 1500
    stage2_batch_size: int = 220
    stage2_lr: float | None = None
    dtype: str = "float32"

    @classmethod
    def toy(cls, **overrides):
        base = dict(lr=1e-3, stage1_steps=300, stage1_batch_size=16, seqs_per_id=2,
                    stage2_epochs=400, stage2_batch_size=16, stage2_lr=3e-3)
        base.update(overrides)
        return cls(**base)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class CsvLog:
    """Append rows to a CSV training log (header written on creation)."""

    def __init__(self, path, fieldnames):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fieldnames = fieldnames
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(fieldnames)

    def __call__(self, row):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[k]) for k in self.fieldnames])


def _fmt(v):
    return f"{v:.8g}" if isinstance(v, float) else v


def _sequence_arrays(sequences, dtype):
    return [np.asarray(s.array() if hasattr(s, "array") else s, dtype=dtype) for s in sequences]


def sample_batch(labels, ids_per_batch, seqs_per_id, rng):
    """Indices for a P x S batch: P identities, S recordings each."""
    labels = np.asarray(labels)
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    eligible = sorted(k for k, v in groups.items() if len(v) >= 2)
    if len(eligible) < 1 or len(groups) < 2:
        raise DegenerateBatch("stage 1 needs two identities and one with >= 2 recordings")
    P = max(2, min(ids_per_batch, len(groups)))
    chosen = list(rng.choice(eligible, size=min(P, len(eligible)), replace=False))
    if len(chosen) < 2:
        others = [k for k in groups if k not in chosen]
        chosen.append(others[rng.integers(len(others))])
    idx = []
    for k in chosen:
        pool = groups[k]
        idx.extend(rng.choice(pool, size=seqs_per_id, replace=len(pool) < seqs_per_id).tolist())
    return idx


def subnetwork_a(frames_batch, params):
    """Concatenated partial features ``(n, B*F)`` for a list of frame arrays."""
    gcem = encode_batch(frames_batch, params)
    pf = partial_features(gcem, params)
    return pf.reshape((pf.shape[0], pf.shape[1] * pf.shape[2]))


def extract_partial_features(sequences, params, chunk=8):
    """Stage-1 features ``(n, B, F)`` for every sequence, inference mode."""
    arrays = _sequence_arrays(sequences, params.dtype)
    out = []
    for start in range(0, len(arrays), chunk):
        g = encode_batch(arrays[start : start + chunk], params)
        out.append(partial_features(g, params).data)
    return np.concatenate(out)


def stage1_loss(sequences, labels, params, margin=0.2):
    """Batch-all loss over the whole set, computed once without gradients."""
    pf = extract_partial_features(sequences, params)
    emb = pf.reshape(len(pf), -1)
    loss, report = batch_all_triplet_loss(emb, labels, margin)
    return float(loss.data), report


def train_stage1(sequences, labels, params, cfg, log_row=None):
    """Triplet training of the encoder and FC reduction (subnetwork A).

    Returns the history as a list of dict rows.  ``params`` is updated in place.
    """
    rng = np.random.default_rng(cfg.seed)
    arrays = _sequence_arrays(sequences, params.dtype)
    labels = np.asarray(labels)
    S = cfg.seqs_per_id
    P = max(2, cfg.stage1_batch_size // S)
    opt = Adam(params.subset(STAGE1_PREFIXES), lr=cfg.lr)
    history = []
    for step in range(cfg.stage1_steps):
        idx = sample_batch(labels, P, S, rng)
        opt.zero_grad()
        with T.GradTape() as tape:
            emb = subnetwork_a([arrays[i] for i in idx], params)
            loss, report = batch_all_triplet_loss(emb, labels[idx], cfg.margin)
        tape.backward(loss)
        opt.step()
        row = {"step": step, "loss": float(loss.data), "easy": report.easy,
               "semi_hard": report.semi_hard, "hard": report.hard}
        history.append(row)
        if log_row is not None:
            log_row(row)
        if step % 25 == 0:
            log.debug("stage1 step %d loss %.4f", step, row["loss"])
    return history


def classification_accuracy(pf, targets, params):
    probs = classify(forward_head(pf, params).af, params).data
    return float((probs.argmax(axis=1) == np.asarray(targets)).mean())


def train_stage2(pf, targets, params, cfg, log_row=None):
    """Train BGRU, attention and classifier on frozen partial features.

    pf: ``(n, B, F)`` array; targets: class indices.  Returns history rows
    with the mean epoch loss and the post-epoch training accuracy.
    """
    pf = np.asarray(pf, dtype=params.dtype)
    targets = np.asarray(targets)
    cfg_m = params.config
    if pf.ndim != 3 or pf.shape[1:] != (cfg_m.bins, cfg_m.fc_width):
        raise ShapeMismatch(f"partial features {pf.shape} do not match (n, {cfg_m.bins}, {cfg_m.fc_width})")
    if not cfg_m.num_classes:
        raise ShapeMismatch("params have no classifier; use with_classifier() first")
    rng = np.random.default_rng(cfg.seed + 1)
    lr = cfg.stage2_lr if cfg.stage2_lr is not None else cfg.lr
    opt = Adam(params.subset(STAGE2_PREFIXES), lr=lr)
    onehot = one_hot(targets, cfg_m.num_classes, params.dtype)
    n = len(pf)
    history = []
    for epoch in range(cfg.stage2_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.stage2_batch_size):
            idx = order[start : start + cfg.stage2_batch_size]
            opt.zero_grad()
            with T.GradTape() as tape:
                emb = forward_head(pf[idx], params, training=True, rng=rng, dropout_rate=cfg.dropout)
                loss = cosine_proximity_loss(classify(emb.af, params), onehot[idx])
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data) * len(idx))
        row = {"epoch": epoch, "loss": sum(losses) / n,
               "accuracy": classification_accuracy(pf, targets, params)}
        history.append(row)
        if log_row is not None:
            log_row(row)
    return history


def class_indices(subjects, classes=None):
    classes = sorted(set(subjects)) if classes is None else list(classes)
    lookup = {c: i for i, c in enumerate(classes)}
    return classes, np.array([lookup[s] for s in subjects])


def train_model(sequences, model_config, cfg, log1=None, log2=None):
    """Both stages end to end on training sequences.

    Returns ``(params, stage1_history, stage2_history)``.
    """
    from .model import init_params

    subjects = [s.subject_id for s in sequences]
    params = init_params(model_config, seed=cfg.seed, dtype=cfg.np_dtype)
    h1 = train_stage1(sequences, subjects, params, cfg, log1)
    classes, targets = class_indices(subjects)
    params = with_classifier(params, classes, seed=cfg.seed + 7)
    pf = extract_partial_features(sequences, params)
    h2 = train_stage2(pf, targets, params, cfg, log2)
    return params, h1, h2
