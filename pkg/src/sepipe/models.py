"""Desk-scale classifiers: a strided SimpleCNN and a ToyViT.

Parameters live in a plain ``dict[str, np.ndarray]``; a forward pass wraps
them as tensors, so a trained :class:`Model` is immutable from the
autodiff's point of view and safe to share between threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, ParseError, StateError
from .image import Image

HEADS = ("softmax_2class", "sigmoid_1logit")
CHECKPOINT_MAGIC = b"SEPCKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "simple_cnn"
    input_size: int = 64
    num_classes: int = 2
    # toy_vit
    patch_size: int = 8
    layers: int = 4
    hidden_size: int = 64
    mlp_size: int = 128
    heads: int = 4
    # simple_cnn: one stride-2 3x3 conv per entry
    conv_channels: tuple = (8, 16, 32, 32)
    head: str | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.head is None:
            object.__setattr__(self, "head", "sigmoid_1logit" if self.kind == "simple_cnn" else "softmax_2class")
        self.validate()

    def validate(self):
        if self.kind not in ("simple_cnn", "toy_vit"):
            raise ConfigError(f"kind: expected simple_cnn or toy_vit, got {self.kind!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head: expected one of {HEADS}, got {self.head!r}")
        if self.num_classes != 2:
            raise ConfigError(f"num_classes: only 2-class models are supported, got {self.num_classes}")
        if self.input_size < 1:
            raise ConfigError(f"input_size: must be positive, got {self.input_size}")
        if self.kind == "toy_vit":
            if self.patch_size < 1 or self.input_size % self.patch_size:
                raise ConfigError(f"patch_size: {self.patch_size} does not divide input_size {self.input_size}")
            if self.layers < 1:
                raise ConfigError(f"layers: must be >= 1, got {self.layers}")
            if self.heads < 1 or self.hidden_size % self.heads:
                raise ConfigError(f"heads: hidden_size {self.hidden_size} not divisible by {self.heads}")
            if self.mlp_size < 1:
                raise ConfigError(f"mlp_size: must be >= 1, got {self.mlp_size}")
        else:
            if any(c < 1 for c in self.conv_channels):
                raise ConfigError(f"conv_channels: all must be >= 1, got {self.conv_channels}")
            if self.cnn_out_size() < 1:
                raise ConfigError(f"conv_channels: {len(self.conv_channels)} stages shrink "
                                  f"{self.input_size}px input to nothing")

    def cnn_out_size(self):
        s = self.input_size
        for _ in self.conv_channels:
            s = (s + 2 - 3) // 2 + 1
        return s

    @property
    def num_patches(self):
        return (self.input_size // self.patch_size) ** 2

    @property
    def seq_len(self):
        return self.num_patches + 1

    @property
    def out_dim(self):
        return 2 if self.head == "softmax_2class" else 1

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def param_shapes(cfg):
    """Ordered (name, shape) pairs; the order fixes initialization and file layout."""
    shapes = []
    if cfg.kind == "simple_cnn":
        cin = 1
        for i, cout in enumerate(cfg.conv_channels):
            shapes += [(f"conv{i}.w", (cout, cin, 3, 3)), (f"conv{i}.b", (cout,))]
            cin = cout
        flat = cin * cfg.cnn_out_size() ** 2
        shapes += [("head.w", (flat, cfg.out_dim)), ("head.b", (cfg.out_dim,))]
        return shapes
    h, m, p2 = cfg.hidden_size, cfg.mlp_size, cfg.patch_size ** 2
    shapes += [("embed.w", (p2, h)), ("embed.b", (h,)), ("cls", (1, 1, h)), ("pos", (1, cfg.seq_len, h))]
    for l in range(cfg.layers):
        b = f"blocks.{l}."
        shapes += [(b + "ln1.g", (h,)), (b + "ln1.b", (h,))]
        for proj in ("q", "k", "v", "o"):
            shapes += [(b + f"attn.w{proj}", (h, h)), (b + f"attn.b{proj}", (h,))]
        shapes += [(b + "ln2.g", (h,)), (b + "ln2.b", (h,)),
                   (b + "mlp.w1", (h, m)), (b + "mlp.b1", (m,)),
                   (b + "mlp.w2", (m, h)), (b + "mlp.b2", (h,))]
    shapes += [("ln_f.g", (h,)), ("ln_f.b", (h,)), ("head.w", (h, cfg.out_dim)), ("head.b", (cfg.out_dim,))]
    return shapes


def _init_param(rng, name, shape):
    leaf = name.rsplit(".", 1)[-1]
    if name in ("cls", "pos"):
        return rng.normal(0.0, 0.02, shape)
    if leaf == "g":
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


@dataclass
class Model:
    config: ModelConfig
    params: dict
    trained: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def head(self):
        return self.config.head

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_params(self):
        return sum(int(p.size) for p in self.params.values())

    def astype(self, dtype):
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    def tensors(self, requires_grad=False):
        return {k: T.Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def logits(self, x, params=None):
        """Raw scores for a batch tensor of shape N x 1 x S x S."""
        x = T.as_tensor(x)
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
            raise DimensionError(f"expected input N x 1 x {s} x {s}, got {x.shape}")
        p = params if params is not None else self.tensors()
        if self.config.kind == "simple_cnn":
            return _cnn_logits(self.config, p, x)
        return _vit_logits(self.config, p, x)

    def loss(self, x, labels, params=None):
        """Training/attack loss; labels are class indices (0 = A, 1 = B)."""
        z = self.logits(x, params)
        labels = np.asarray(labels).reshape(-1)
        if self.head == "softmax_2class":
            return T.softmax_cross_entropy(z, labels)
        if labels.size and (labels.min() < 0 or labels.max() > 1):
            raise IndexError(f"labels must be 0 or 1, got {labels.tolist()}")
        # sigmoid output is P(A), so the BCE target is 1 for class A
        return T.bce_with_logits(z, (labels == 0).astype(np.float64))

    def class_probs(self, x):
        """N x 2 array of (P_A, P_B)."""
        probs = forward(self, x).data.astype(np.float64)
        if self.head == "sigmoid_1logit":
            return np.concatenate([probs, 1.0 - probs], axis=1)
        return probs


def _cnn_logits(cfg, p, x):
    h = x
    for i in range(len(cfg.conv_channels)):
        h = T.relu(T.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, padding=1))
    h = h.reshape(h.shape[0], -1)
    return T.dense(h, p["head.w"], p["head.b"])


def _vit_logits(cfg, p, x):
    n, s, ps = x.shape[0], cfg.input_size, cfg.patch_size
    g = s // ps
    patches = x.reshape(n, g, ps, g, ps).transpose(0, 1, 3, 2, 4).reshape(n, g * g, ps * ps)
    h = T.dense(patches, p["embed.w"], p["embed.b"])
    cls = T.broadcast_to(p["cls"], (n, 1, cfg.hidden_size))
    h = T.concat([cls, h], axis=1) + p["pos"]
    for l in range(cfg.layers):
        b = f"blocks.{l}."
        attn = {k: p[b + "attn." + k] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
        h = h + T.multi_head_attention(T.layernorm(h, p[b + "ln1.g"], p[b + "ln1.b"]), attn, cfg.heads)
        u = T.layernorm(h, p[b + "ln2.g"], p[b + "ln2.b"])
        u = T.dense(T.gelu(T.dense(u, p[b + "mlp.w1"], p[b + "mlp.b1"])), p[b + "mlp.w2"], p[b + "mlp.b2"])
        h = h + u
    h = T.layernorm(h, p["ln_f.g"], p["ln_f.b"])
    return T.dense(h[:, 0, :], p["head.w"], p["head.b"])


def build_model(config):
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {name: _init_param(rng, name, shape).astype(np.float32) for name, shape in param_shapes(config)}
    return Model(config, params)


def as_batch(x):
    """Promote an Image, S x S or N x S x S array to an N x 1 x S x S float array."""
    if isinstance(x, Image):
        x = x.to_real()
    if isinstance(x, T.Tensor):
        return x
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def forward(model, batch):
    """Class probabilities: N x 2 softmax rows, or N x 1 sigmoid P(A)."""
    x = as_batch(batch)
    if not isinstance(x, T.Tensor):
        x = T.Tensor(np.asarray(x, dtype=model.dtype))
    z = model.logits(x)
    return T.softmax(z, axis=1) if model.head == "softmax_2class" else T.sigmoid(z)


def predict(model, batch):
    """Argmax class per example; ties go to class A (index 0)."""
    probs = model.class_probs(as_batch(batch))
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def predict_proba(model, image):
    if not model.trained:
        raise StateError("predict_proba needs a trained model")
    pa, pb = model.class_probs(as_batch(image))[0]
    return float(pa), float(pb)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model):
    """JSON header, then little-endian float32 parameters in header order."""
    names = [n for n, _ in param_shapes(model.config)]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "trained": model.trained,
        "meta": model.meta,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(model.params[n], dtype="<f4").tobytes() for n in names)
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + body)


def read_checkpoint_header(path):
    data = Path(path).read_bytes()
    return _parse_header(data, path)[0]


def _parse_header(data, path):
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParseError(f"{path}: not a sepipe checkpoint", 0)
    off = len(CHECKPOINT_MAGIC)
    if len(data) < off + 4:
        raise ParseError(f"{path}: truncated checkpoint header", len(data))
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off:off + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad checkpoint header: {exc}", off) from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {header.get('format_version')}", off)
    return header, off + n


def load_checkpoint(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    header, off = _parse_header(data, path)
    config = ModelConfig.from_dict(header["config"])
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape))
        if off + nbytes > len(data):
            raise ParseError(f"{path}: truncated parameter {entry['name']}", off)
        params[entry["name"]] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off) \
            .astype(np.float32).reshape(shape)
        off += nbytes
    expected = dict(param_shapes(config))
    if {k: v.shape for k, v in params.items()} != expected:
        raise ParseError(f"{path}: parameters do not match the stored config", off)
    return Model(config, params, trained=bool(header["trained"]), meta=header.get("meta", {}))
