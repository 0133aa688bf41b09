"""Embedding extraction, cross-view rank-1 evaluation and the occlusion experiment."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import encode_batch
from .errors import EmptyGalleryView
from .head import AttentiveEmbedding, embed_gcem
from .silhouette_io import enumerate_occlusion_specs, format_view, occlude_sequence

SCHEMA_PATH = Path(__file__).with_name("eval_report.schema.json")


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray
    subjects: list
    views: np.ndarray
    conditions: list = field(default_factory=list)
    seq_indices: list = field(default_factory=list)
    attention: np.ndarray | None = None

    def __len__(self):
        return len(self.subjects)

    def scaled(self, factor):
        return EmbeddingSet(self.embeddings * factor, self.subjects, self.views, self.conditions,
                            self.seq_indices, self.attention)


def embed(seq, params):
    """Attentive embedding of one sequence (inference, no dropout)."""
    g = encode_batch([seq], params)
    out = embed_gcem(g, params)
    return AttentiveEmbedding(out.af[0], out.attention_weights[0])


def embed_sequences(sequences, params, chunk=8):
    """Embed many sequences; frames are processed ``chunk`` sequences at a time."""
    afs, weights = [], []
    for start in range(0, len(sequences), chunk):
        part = sequences[start : start + chunk]
        g = encode_batch(part, params)
        out = embed_gcem(g, params)
        afs.append(out.af.data)
        weights.append(out.attention_weights.data)
    return EmbeddingSet(
        embeddings=np.concatenate(afs) if afs else np.zeros((0, params.config.embedding_width)),
        subjects=[s.subject_id for s in sequences],
        views=np.array([float(s.view) for s in sequences]),
        conditions=[s.condition for s in sequences],
        seq_indices=[s.sequence_index for s in sequences],
        attention=np.concatenate(weights) if weights else None,
    )


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


@dataclass
class EvalReport:
    """Rank-1 accuracies per (probe view, gallery view).

    ``rank1[i, j]`` is the fraction of probes at ``probe_views[i]`` whose
    most cosine-similar sample among gallery recordings at
    ``gallery_views[j]`` has the same identity; NaN marks excluded cells.
    ``pooled_rank1`` matches each probe against every permitted gallery
    view at once.
    """

    protocol: dict
    probe_views: list
    gallery_views: list
    rank1: np.ndarray
    per_view_mean: np.ndarray
    overall_mean: float
    overall_sd: float
    pooled_rank1: np.ndarray
    pooled_mean: float
    counts: dict
    occlusion: str | None = None
    sd_kind: str = "population"

    def to_dict(self):
        def clean(a):
            return [None if np.isnan(v) else float(v) for v in a]

        return {
            "protocol": self.protocol,
            "occlusion": self.occlusion,
            "probe_views": [float(v) for v in self.probe_views],
            "gallery_views": [float(v) for v in self.gallery_views],
            "rank1": [clean(row) for row in self.rank1],
            "per_probe_view_mean": clean(self.per_view_mean),
            "overall_mean": float(self.overall_mean),
            "overall_sd": float(self.overall_sd),
            "sd_kind": self.sd_kind,
            "pooled_rank1": clean(self.pooled_rank1),
            "pooled_mean": float(self.pooled_mean),
            "counts": self.counts,
        }

    def summary(self):
        head = "probe\\gallery " + " ".join(f"{format_view(v):>6}" for v in self.gallery_views) + "   mean"
        lines = [head]
        for pv, row, m in zip(self.probe_views, self.rank1, self.per_view_mean):
            cells = " ".join("     -" if np.isnan(c) else f"{100 * c:6.1f}" for c in row)
            lines.append(f"{format_view(pv):>13} {cells} {100 * m:6.1f}")
        lines.append(f"mean {100 * self.overall_mean:.1f} +- {100 * self.overall_sd:.1f}")
        return "\n".join(lines)


def evaluate_cross_view(gallery, probes, spec):
    """Nearest-gallery (cosine) identification of every probe, view by view."""
    g_views = np.asarray(gallery.views, dtype=float)
    p_views = np.asarray(probes.views, dtype=float)
    g_subj = np.asarray(gallery.subjects)
    p_subj = np.asarray(probes.subjects)
    exclude = spec.exclude_identical_views

    if spec.views is not None:
        views = sorted(float(v) for v in spec.views)
        for v in views:
            if not np.any(g_views == v):
                raise EmptyGalleryView(f"no gallery sample at view {format_view(v)}")
        probe_views = [v for v in views if np.any(p_views == v)]
        gallery_views = views
    else:
        gallery_views = sorted(set(g_views.tolist()))
        probe_views = sorted(set(p_views.tolist()))
    if not gallery_views:
        raise EmptyGalleryView("gallery is empty")

    G = _unit_rows(gallery.embeddings)
    P = _unit_rows(probes.embeddings)
    sims = P @ G.T

    rank1 = np.full((len(probe_views), len(gallery_views)), np.nan)
    pooled = np.full(len(probe_views), np.nan)
    per_view = np.full(len(probe_views), np.nan)
    probe_counts = []
    for i, pv in enumerate(probe_views):
        pidx = np.flatnonzero(p_views == pv)
        probe_counts.append(int(pidx.size))
        for j, gv in enumerate(gallery_views):
            if exclude and gv == pv:
                continue
            gidx = np.flatnonzero(g_views == gv)
            best = gidx[np.argmax(sims[np.ix_(pidx, gidx)], axis=1)]
            rank1[i, j] = float(np.mean(g_subj[best] == p_subj[pidx]))
        allowed = np.isin(g_views, gallery_views) & ((g_views != pv) if exclude else True)
        gidx = np.flatnonzero(allowed)
        if gidx.size == 0:
            raise EmptyGalleryView(f"no permitted gallery view for probes at {format_view(pv)}")
        best = gidx[np.argmax(sims[np.ix_(pidx, gidx)], axis=1)]
        pooled[i] = float(np.mean(g_subj[best] == p_subj[pidx]))
        per_view[i] = float(np.nanmean(rank1[i]))

    return EvalReport(
        protocol=spec.to_dict(),
        probe_views=probe_views,
        gallery_views=gallery_views,
        rank1=rank1,
        per_view_mean=per_view,
        overall_mean=float(np.mean(per_view)),
        overall_sd=float(np.std(per_view)),
        pooled_rank1=pooled,
        pooled_mean=float(np.mean(pooled)),
        counts={"gallery": int(len(gallery)), "probes": int(sum(probe_counts)),
                "probes_per_view": probe_counts,
                "gallery_views_per_probe_view": [int(np.sum(~np.isnan(r))) for r in rank1]},
    )


@dataclass
class OcclusionResult:
    clean: EvalReport
    reports: list  # [(OcclusionSpec, EvalReport)] in enumeration order

    def degradation_table(self):
        rows = []
        for spec, rep in self.reports:
            rows.append({"occlusion": spec.name, "band": list(spec.band),
                         "axis": "rows" if spec.axis == 0 else "columns",
                         "mean": rep.overall_mean, "sd": rep.overall_sd,
                         "degradation": self.clean.overall_mean - rep.overall_mean})
        return rows

    def to_dict(self):
        return {"clean": self.clean.to_dict(),
                "occluded": [rep.to_dict() for _, rep in self.reports],
                "degradation": {"clean_mean": self.clean.overall_mean, "rows": self.degradation_table()}}


def occlusion_experiment(params, gallery_seqs, probe_seqs, spec, occlusions=None, clean=None):
    """Occlude every gallery and probe frame with each spec, re-embed and evaluate."""
    occlusions = enumerate_occlusion_specs() if occlusions is None else list(occlusions)
    if clean is None:
        clean = evaluate_cross_view(embed_sequences(gallery_seqs, params),
                                    embed_sequences(probe_seqs, params), spec)
    reports = []
    for occ in occlusions:
        g = embed_sequences([occlude_sequence(s, occ) for s in gallery_seqs], params)
        p = embed_sequences([occlude_sequence(s, occ) for s in probe_seqs], params)
        rep = evaluate_cross_view(g, p, spec)
        rep.occlusion = occ.name
        reports.append((occ, rep))
    return OcclusionResult(clean, reports)


# --------------------------------------------------------------------------
# exports


def write_embeddings_csv(path, emb):
    """Rows ``subject,view,condition,seq_index,af_0..af_{d-1}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = emb.embeddings.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "view", "condition", "seq_index"] + [f"af_{k}" for k in range(d)])
        for i in range(len(emb)):
            w.writerow([emb.subjects[i], format_view(emb.views[i]), emb.conditions[i], emb.seq_indices[i]]
                       + [repr(float(v)) for v in emb.embeddings[i]])


def write_attention_csv(path, emb):
    path = Path(path)
    b = emb.attention.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "view", "condition", "seq_index"] + [f"a_{k}" for k in range(b)])
        for i in range(len(emb)):
            w.writerow([emb.subjects[i], format_view(emb.views[i]), emb.conditions[i], emb.seq_indices[i]]
                       + [repr(float(v)) for v in emb.attention[i]])


def load_report_schema():
    return json.loads(SCHEMA_PATH.read_text())
