"""Bin splitting, per-bin reduction, bidirectional GRU and attention pooling.

All functions accept a single sample or a leading batch axis.  Shapes below
are written for one sample; batched inputs prepend ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import Gcem
from .errors import InvalidBinCount, ShapeMismatch
from .model import VALID_BINS


@dataclass
class GruParams:
    """Weights act on the concatenation ``[x; h]``: shape ``(hidden, in + hidden)``."""

    W_z: T.Tensor
    b_z: T.Tensor
    W_r: T.Tensor
    b_r: T.Tensor
    W_h: T.Tensor
    b_h: T.Tensor

    @property
    def hidden(self):
        return self.b_z.shape[0]

    @classmethod
    def from_params(cls, params, direction):
        p = f"bgru.{direction}_"
        return cls(params[p + "update.weight"], params[p + "update.bias"],
                   params[p + "reset.weight"], params[p + "reset.bias"],
                   params[p + "candidate.weight"], params[p + "candidate.bias"])


@dataclass
class AttentionParams:
    W: T.Tensor
    b: T.Tensor

    @classmethod
    def from_params(cls, params):
        return cls(params["attention.score.weight"], params["attention.score.bias"])


@dataclass
class AttentiveEmbedding:
    af: T.Tensor
    attention_weights: T.Tensor


def _gcem_map(g):
    return g.map if isinstance(g, Gcem) else T.as_tensor(g)


def split_gcem(g, bins):
    """Split the map into ``bins`` horizontal strips, top to bottom.

    Returns a list of Tensors of shape ``(rows/bins, cols, C)`` (batched maps
    give ``(N, rows/bins, cols, C)``).
    """
    m = _gcem_map(g)
    rows = m.shape[-3]
    if bins not in VALID_BINS or rows % bins:
        raise InvalidBinCount(f"bin count {bins} must be one of {VALID_BINS} and divide {rows}")
    h = rows // bins
    return [m[..., b * h : (b + 1) * h, :, :] for b in range(bins)]


def flatten_bins(g, bins):
    """All bins flattened to ``(bins, bin_length)``.

    For a row-major ``H x W x C`` map a strip of rows is a contiguous block,
    so this is a reshape; it agrees element for element with flattening each
    :func:`split_gcem` strip.
    """
    m = _gcem_map(g)
    rows = m.shape[-3]
    if bins not in VALID_BINS or rows % bins:
        raise InvalidBinCount(f"bin count {bins} must be one of {VALID_BINS} and divide {rows}")
    lead = m.shape[:-3]
    return m.reshape(lead + (bins, m.size // (int(np.prod(lead, dtype=int)) * bins)))


def reduce_bin(bin_, W, b):
    """``relu(W @ flatten(bin) + b)``; the same weights serve every bin."""
    x = T.as_tensor(bin_)
    if x.shape[-1] != W.shape[1] and x.ndim >= 3:
        # an unflattened (rows, cols, C) strip
        x = x.reshape(x.shape[:-3] + (int(np.prod(x.shape[-3:])),))
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"bin of length {x.shape[-1]} does not fit FC input {W.shape[1]}")
    return T.relu(T.linear(x, W, b))


def partial_features(gcem, params):
    """Subnetwork-A tail: split the GCEM and reduce each bin. Returns ``(..., B, F)``."""
    cfg = params.config
    flat = flatten_bins(gcem, cfg.bins)
    return reduce_bin(flat, params["reduce.fc.weight"], params["reduce.fc.bias"])


def gru_cell(x, h_prev, p):
    """One GRU step.

    z = sigmoid(W_z [x; h] + b_z), r = sigmoid(W_r [x; h] + b_r),
    c = tanh(W_h [x; r*h] + b_h), h' = (1 - z) * h + z * c.
    """
    x, h_prev = T.as_tensor(x), T.as_tensor(h_prev)
    if h_prev.shape[-1] != p.hidden:
        raise ShapeMismatch(f"hidden state width {h_prev.shape[-1]} != {p.hidden}")
    if x.shape[-1] + p.hidden != p.W_z.shape[1]:
        raise ShapeMismatch(f"input width {x.shape[-1]} does not match GRU weights {p.W_z.shape}")
    xh = T.concat([x, h_prev], axis=-1)
    z = T.sigmoid(T.linear(xh, p.W_z, p.b_z))
    r = T.sigmoid(T.linear(xh, p.W_r, p.b_r))
    c = T.tanh(T.linear(T.concat([x, r * h_prev], axis=-1), p.W_h, p.b_h))
    return (1.0 - z) * h_prev + z * c


def _run_gru(steps, p, reverse=False):
    lead = steps[0].shape[:-1]
    h = T.Tensor(np.zeros(lead + (p.hidden,), dtype=steps[0].dtype))
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    out = [None] * len(steps)
    for b in order:
        h = gru_cell(steps[b], h, p)
        out[b] = h
    return out


def bgru(pf, fwd, bwd):
    """Bidirectional GRU over the bin axis.

    pf: ``(B, F)``.  Returns ``(B, 2*hidden)`` where row ``b`` is the forward
    state after bin ``b`` followed by the backward state after bin ``b``
    (scanning from the last bin).  Both directions start from zeros.
    """
    pf = T.as_tensor(pf)
    nb = pf.shape[-2]
    if nb < 1:
        raise ShapeMismatch("bgru needs at least one bin")
    steps = [pf[..., b, :] for b in range(nb)]
    hf = _run_gru(steps, fwd)
    hb = _run_gru(steps, bwd, reverse=True)
    return T.stack([T.concat([f, r], axis=-1) for f, r in zip(hf, hb)], axis=-2)


def attention(H, ap=None, uniform=False):
    """Softmax attention over bins and weighted concatenation.

    Each bin's score is ``sum(tanh(W H_b + b))``; weights ``a = softmax(scores)``
    over bins; ``AF = concat_b(a_b * H_b)``.  ``uniform=True`` skips scoring
    and uses ``a_b = 1/B``.
    """
    H = T.as_tensor(H)
    nb, width = H.shape[-2], H.shape[-1]
    if uniform:
        a = T.Tensor(np.full(H.shape[:-1], 1.0 / nb, dtype=H.dtype))
    else:
        if ap.W.shape != (width, width):
            raise ShapeMismatch(f"attention weights {ap.W.shape} do not fit width {width}")
        u = T.tanh(T.linear(H, ap.W, ap.b))
        a = T.softmax(T.tsum(u, axis=-1), axis=-1)
    weighted = H * a.reshape(a.shape + (1,))
    af = weighted.reshape(H.shape[:-2] + (nb * width,))
    return AttentiveEmbedding(af, a)


def forward_head(pf, params, training=False, rng=None, dropout_rate=0.1):
    """Subnetwork B from partial features: BGRU, dropout (training only), attention."""
    cfg = params.config
    pf = T.as_tensor(pf)
    if cfg.use_bgru:
        H = bgru(pf, GruParams.from_params(params, "fwd"), GruParams.from_params(params, "bwd"))
    else:
        H = pf
    if training and dropout_rate > 0:
        H = T.dropout(H, dropout_rate, rng if rng is not None else np.random.default_rng())
    if cfg.use_attention:
        return attention(H, AttentionParams.from_params(params))
    return attention(H, uniform=True)


def embed_gcem(gcem, params, training=False, rng=None, dropout_rate=0.1):
    """GCEM (single or batched) to attentive embedding."""
    return forward_head(partial_features(gcem, params), params, training, rng, dropout_rate)


def classify(af, params):
    """Dense softmax layer over the attentive features."""
    return T.softmax(T.linear(af, params["classifier.dense.weight"], params["classifier.dense.bias"]))
