"""Model configuration, parameter containers and the checkpoint archive."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CheckpointError, InvalidBinCount
from .tensor import Tensor

# (name, kernel, padding, pool_after)
ENCODER_LAYERS = (
    ("conv1", 5, 2, False),
    ("conv2", 3, 1, True),
    ("conv3", 3, 1, False),
    ("conv4", 3, 1, True),
    ("conv5", 3, 1, False),
    ("conv6", 3, 1, False),
)

VALID_BINS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class ModelConfig:
    """Layer widths and ablation switches.

    The defaults are the full-size network; ``toy()`` gives a narrow variant
    for CPU experiments.  ``bins=1`` is the global-representation baseline.
    """

    channels: tuple = (64, 64, 128, 128, 256, 256)
    fc_width: int = 256
    hidden: int = 128
    bins: int = 16
    use_bgru: bool = True
    use_attention: bool = True
    num_classes: int = 0
    frame_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != len(ENCODER_LAYERS):
            raise ValueError(f"need {len(ENCODER_LAYERS)} conv widths, got {len(self.channels)}")
        if self.frame_size % 4:
            raise ValueError("frame_size must be divisible by 4")
        if self.bins not in VALID_BINS or self.map_size % self.bins:
            raise InvalidBinCount(f"bins={self.bins} must divide the {self.map_size}-row map")

    @classmethod
    def toy(cls, **overrides):
        base = dict(channels=(4, 4, 8, 8, 8, 8), fc_width=32, hidden=16)
        base.update(overrides)
        return cls(**base)

    @property
    def map_size(self):
        return self.frame_size // 4

    @property
    def gcem_shape(self):
        return (self.map_size, self.map_size, self.channels[-1])

    @property
    def bin_length(self):
        s, _, c = self.gcem_shape
        return (s // self.bins) * s * c

    @property
    def part_width(self):
        """Width of one recurrent (or, without BGRU, FC) output vector."""
        return 2 * self.hidden if self.use_bgru else self.fc_width

    @property
    def embedding_width(self):
        return self.bins * self.part_width

    def layer_shapes(self):
        """Expected (name, output shape) for every encoder layer, pools included."""
        s, pools = self.frame_size, 0
        rows = []
        for (name, _k, _p, pool), cout in zip(ENCODER_LAYERS, self.channels):
            rows.append((name, (s, s, cout)))
            if pool:
                s //= 2
                pools += 1
                rows.append((f"pool{pools}", (s, s, cout)))
        return rows

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


STAGE1_PREFIXES = ("encoder.", "reduce.")
STAGE2_PREFIXES = ("bgru.", "attention.", "classifier.")


@dataclass
class ModelParams:
    """Named trainable tensors plus the configuration they were built for.

    Names follow ``<module>.<layer>.<weight|bias>``.
    """

    config: ModelConfig
    tensors: dict = field(default_factory=dict)
    classes: list = field(default_factory=list)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self, prefixes=None):
        if prefixes is None:
            return list(self.tensors)
        return [n for n in self.tensors if n.startswith(tuple(prefixes))]

    def subset(self, prefixes):
        return {n: self.tensors[n] for n in self.names(prefixes)}

    def copy(self):
        return ModelParams(self.config, {n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                                         for n, t in self.tensors.items()}, list(self.classes))

    def astype(self, dtype):
        return ModelParams(self.config, {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                                         for n, t in self.tensors.items()}, list(self.classes))

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def _gru_shapes(prefix, in_width, hidden):
    rows = []
    for gate in ("update", "reset", "candidate"):
        rows.append((f"bgru.{prefix}_{gate}.weight", (hidden, in_width + hidden), in_width + hidden))
        rows.append((f"bgru.{prefix}_{gate}.bias", (hidden,), None))
    return rows


def param_shapes(config):
    """``[(name, shape, fan_in or None for biases)]`` in canonical order."""
    rows = []
    cin = 1
    for (name, k, _p, _pool), cout in zip(ENCODER_LAYERS, config.channels):
        rows.append((f"encoder.{name}.weight", (k, k, cin, cout), k * k * cin))
        rows.append((f"encoder.{name}.bias", (cout,), None))
        cin = cout
    rows.append(("reduce.fc.weight", (config.fc_width, config.bin_length), config.bin_length))
    rows.append(("reduce.fc.bias", (config.fc_width,), None))
    if config.use_bgru:
        rows += _gru_shapes("fwd", config.fc_width, config.hidden)
        rows += _gru_shapes("bwd", config.fc_width, config.hidden)
    if config.use_attention:
        w = config.part_width
        rows.append(("attention.score.weight", (w, w), w))
        rows.append(("attention.score.bias", (w,), None))
    if config.num_classes:
        e = config.embedding_width
        rows.append(("classifier.dense.weight", (config.num_classes, e), e))
        rows.append(("classifier.dense.bias", (config.num_classes,), None))
    return rows


def init_params(config, seed=0, dtype=np.float32, classes=None):
    """Fan-in scaled uniform weights in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``; zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in param_shapes(config):
        if fan_in is None:
            data = np.zeros(shape, dtype=dtype)
        else:
            data = _fan_in_uniform(rng, shape, fan_in, dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, tensors, list(classes or []))


def with_classifier(params, classes, seed=0):
    """Return params extended with a (re)initialized head and classifier for ``classes``."""
    cfg = replace(params.config, num_classes=len(classes))
    fresh = init_params(cfg, seed=seed, dtype=params.dtype, classes=classes)
    for name in params.names(STAGE1_PREFIXES):
        fresh.tensors[name] = Tensor(params[name].data.copy(), requires_grad=True, name=name)
    return fresh


# --------------------------------------------------------------------------
# checkpoint archive
#
# Layout: one magic line, one JSON header line, then the raw little-endian
# bytes of every tensor in header order.  The header lists name, dtype and
# shape per tensor so truncation is attributable to a specific tensor.

MAGIC = b"PARTGAIT-CKPT 1\n"


def save_checkpoint(path, params, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    specs = []
    blobs = []
    for name, t in params.tensors.items():
        arr = np.ascontiguousarray(t.data)
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        specs.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {"config": params.config.to_dict(), "classes": list(params.classes),
              "tensors": specs, "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint archive")
        line = fh.readline()
        try:
            return json.loads(line), fh.tell()
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from None


def load_checkpoint(path, expect_config=None):
    """Load params; ``expect_config`` (a ModelConfig) is checked tensor by tensor."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    header, offset = read_checkpoint_header(path)
    raw = path.read_bytes()[offset:]
    config = ModelConfig.from_dict(header["config"])
    tensors = {}
    pos = 0
    for spec in header["tensors"]:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {spec['name']}", spec["name"])
        arr = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
        tensors[spec["name"]] = Tensor(arr.reshape(shape).astype(dtype.newbyteorder("=")),
                                       requires_grad=True, name=spec["name"])
        pos += nbytes
    params = ModelParams(config, tensors, header.get("classes", []))
    expected = param_shapes(config)
    for name, shape, _ in expected:
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}", name)
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, "
                                  f"expected {shape}", name)
    if expect_config is not None:
        check_compatible(params, expect_config)
    return params, header.get("extra", {})


def check_compatible(params, config):
    """Raise CheckpointError naming the first tensor whose shape differs under ``config``."""
    want = dict((n, s) for n, s, _ in param_shapes(replace(config, num_classes=params.config.num_classes)))
    for name, shape in want.items():
        if name not in params.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name} required by config", name)
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(f"width mismatch at tensor {name}: checkpoint "
                                  f"{params[name].shape} vs config {shape}", name)
