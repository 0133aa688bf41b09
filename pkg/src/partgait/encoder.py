"""Frame-level convolutional encoding and temporal pooling into a GCEM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptySequence, ShapeMismatch
from .model import ENCODER_LAYERS
from .silhouette_io import SilhouetteFrame, SilhouetteSequence


@dataclass
class Gcem:
    """Gait convolutional energy map: per-position mean of frame features."""

    map: T.Tensor
    subject_id: str = ""
    view: float = 0.0

    @property
    def shape(self):
        return self.map.shape


def _frames_tensor(frames, size, dtype):
    if isinstance(frames, T.Tensor):
        x = frames
    else:
        x = T.Tensor(np.asarray(frames, dtype=dtype))
    if x.ndim == 3:
        x = x.reshape(x.shape + (1,))
    if x.ndim != 4 or x.shape[1:] != (size, size, 1):
        raise ShapeMismatch(f"expected frames of shape (N, {size}, {size}[, 1]), got {x.shape}")
    return x


def encode_frames(frames, params, return_intermediates=False):
    """Run the conv/pool stack on a batch of frames.

    frames: ``(N, S, S)`` or ``(N, S, S, 1)`` array/Tensor.  Returns a Tensor
    of shape ``(N, S/4, S/4, C6)``; with ``return_intermediates`` also a list
    of ``(layer name, per-frame output shape)``.
    """
    cfg = params.config
    x = _frames_tensor(frames, cfg.frame_size, params.dtype)
    shapes = []
    pools = 0
    for name, _k, pad, pool in ENCODER_LAYERS:
        x = T.relu(T.conv2d(x, params[f"encoder.{name}.weight"], params[f"encoder.{name}.bias"], pad))
        shapes.append((name, x.shape[1:]))
        if pool:
            x = T.maxpool2d(x)
            pools += 1
            shapes.append((f"pool{pools}", x.shape[1:]))
    return (x, shapes) if return_intermediates else x


def encode_frame(frame, params):
    """Encode a single 64x64 frame into a ``16 x 16 x C`` feature map."""
    pixels = frame.pixels if isinstance(frame, SilhouetteFrame) else frame
    if isinstance(pixels, T.Tensor):
        batch = pixels.reshape((1,) + pixels.shape)
    else:
        pixels = np.asarray(pixels)
        size = params.config.frame_size
        if pixels.shape[:2] != (size, size):
            raise ShapeMismatch(f"frame must be {size}x{size}, got {pixels.shape}")
        batch = pixels[None]
    return encode_frames(batch, params)[0]


def temporal_pool(frame_features):
    """Elementwise mean over a list (or leading axis) of frame features."""
    if isinstance(frame_features, T.Tensor):
        if frame_features.shape[0] == 0:
            raise EmptySequence("cannot pool an empty sequence")
        return Gcem(T.segment_mean(frame_features, [frame_features.shape[0]])[0])
    feats = list(frame_features)
    if not feats:
        raise EmptySequence("cannot pool an empty sequence")
    shapes = {tuple(f.shape) for f in feats}
    if len(shapes) != 1:
        raise ShapeMismatch(f"frame features differ in shape: {sorted(shapes)}")
    return Gcem(T.segment_mean(T.stack(feats), [len(feats)])[0])


def encode_batch(sequences, params, chunk_frames=512):
    """GCEMs for many sequences, shape ``(n, S/4, S/4, C)``.

    Frames of all sequences are encoded together (in chunks when not
    recording gradients) and averaged per sequence.
    """
    arrays = [s.array() if isinstance(s, SilhouetteSequence) else np.asarray(s) for s in sequences]
    if any(a.shape[0] == 0 for a in arrays):
        raise EmptySequence("cannot pool an empty sequence")
    lengths = [a.shape[0] for a in arrays]
    frames = np.concatenate(arrays).astype(params.dtype, copy=False)
    recording = T.active_tape() is not None
    if recording or frames.shape[0] <= chunk_frames:
        feats = encode_frames(frames, params)
        return T.segment_mean(feats, lengths)
    out = []
    for start in range(0, frames.shape[0], chunk_frames):
        out.append(encode_frames(frames[start : start + chunk_frames], params).data)
    return T.segment_mean(T.Tensor(np.concatenate(out)), lengths)


def encode_sequence(seq, params):
    """GCEM of one sequence; works for any number of frames."""
    if len(seq) == 0:
        raise EmptySequence("cannot pool an empty sequence")
    g = encode_batch([seq], params)[0]
    if isinstance(seq, SilhouetteSequence):
        return Gcem(g, seq.subject_id, seq.view)
    return Gcem(g)
