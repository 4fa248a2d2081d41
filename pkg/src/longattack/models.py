"""Single-exam (Source) and two-exam longitudinal (Target) classifiers.

Both share a small convolutional backbone: stride-2 conv stages with ReLU,
global average pooling, and a linear projection to a d-dimensional feature
vector. The Target model forms the difference between Prior and Current
features, refines both streams with residual cross attention, and classifies
the concatenated result.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor

__all__ = [
    "AttentionParams",
    "BackboneConfig",
    "CrossViewParams",
    "SourceModel",
    "TargetModel",
    "cross_view",
    "init_source",
    "init_target",
    "load_model",
    "multi_head_attention",
    "save_model",
    "set_trainable",
]

CHECKPOINT_MAGIC = "longattack-checkpoint-v1"


@dataclass
class BackboneConfig:
    """Architecture of the shared feature extractor and attention geometry.

    The d-dimensional feature vector is treated as ``tokens`` tokens of
    dimension d/tokens inside the attention module, so ``embed_dim`` must be
    divisible by ``tokens`` and the token dimension by ``heads``.
    """

    input_shape: tuple = (1, 32, 32)
    conv_channels: tuple = (8, 16, 32)
    embed_dim: int = 64
    heads: int = 4
    tokens: int = 8

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (channels, h, w), got {self.input_shape}")
        if not self.conv_channels:
            raise ValueError("need at least one conv stage")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % self.tokens != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by tokens {self.tokens}")
        if (self.embed_dim // self.tokens) % self.heads != 0:
            raise ValueError(
                f"token dimension {self.embed_dim // self.tokens} not divisible by "
                f"heads {self.heads}"
            )

    @property
    def token_dim(self) -> int:
        return self.embed_dim // self.tokens


@dataclass
class AttentionParams:
    """Per-token query/key/value/output projections for one attention pass."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def items(self):
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]


@dataclass
class CrossViewParams:
    """Separate attention weights for the Current stream and the difference stream."""

    current: AttentionParams
    diff: AttentionParams
    heads: int


class _Backbone:
    """Conv stages (3x3, stride 2, pad 1, ReLU) -> global average pool -> linear."""

    def __init__(self, cfg: BackboneConfig, conv_w, conv_b, proj_w, proj_b):
        self.cfg = cfg
        self.conv_w = conv_w
        self.conv_b = conv_b
        self.proj_w = proj_w
        self.proj_b = proj_b

    def parameters(self):
        out = []
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out.append((f"backbone.conv{i}.w", w))
            out.append((f"backbone.conv{i}.b", b))
        out.append(("backbone.proj.w", self.proj_w))
        out.append(("backbone.proj.b", self.proj_b))
        return out

    def forward(self, image) -> Tensor:
        x = as_tensor(image)
        expected = self.cfg.input_shape
        if x.shape[-3:] != expected:
            raise ShapeError(f"backbone expects image shape {expected}, got {x.shape}")
        for w, b in zip(self.conv_w, self.conv_b):
            x = T.conv2d(x, w, stride=2, padding=1)
            x = T.relu(x + T.reshape(b, (b.shape[0], 1, 1)))
        x = T.mean(x, axis=(-2, -1))  # global average pool -> (.., c_last)
        return T.matmul(_as_rows(x), self.proj_w) + self.proj_b


def _as_rows(x: Tensor) -> Tensor:
    """View a vector as a 1-row matrix so matmul applies; batches pass through."""
    return T.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def _squeeze_rows(x: Tensor, single: bool) -> Tensor:
    return T.reshape(x, (x.shape[-1],)) if single else x


def multi_head_attention(query_src, key_value_src, params: AttentionParams, heads: int) -> Tensor:
    """Scaled dot-product attention between two feature vectors.

    Each d-vector is reshaped to (tokens, token_dim) before the per-token
    projections; scores are scaled by 1/sqrt(d/heads), heads are concatenated
    and output-projected back to a d-vector. Accepts (d,) or batched (n, d)
    inputs.
    """
    q_in, kv_in = as_tensor(query_src), as_tensor(key_value_src)
    single = q_in.ndim == 1
    token_dim = params.wq.shape[0]
    d = q_in.shape[-1]
    if d % token_dim != 0:
        raise ShapeError(f"feature dim {d} not divisible by token dim {token_dim}")
    tokens = d // token_dim
    if token_dim % heads != 0:
        raise ShapeError(f"token dim {token_dim} not divisible by {heads} heads")
    dk = token_dim // heads
    n = 1 if single else q_in.shape[0]

    xq = T.reshape(q_in, (n, tokens, token_dim))
    xkv = T.reshape(kv_in, (n, tokens, token_dim))
    q = _heads_first(T.matmul(xq, params.wq), n, tokens, heads, dk)
    k = _heads_first(T.matmul(xkv, params.wk), n, tokens, heads, dk)
    v = _heads_first(T.matmul(xkv, params.wv), n, tokens, heads, dk)

    scale = 1.0 / np.sqrt(d / heads)
    scores = T.matmul(q, T.swap_last_axes(k)) * scale  # (n, heads, tokens, tokens)
    weights = T.softmax(scores, axis=-1)
    attended = T.matmul(weights, v)  # (n, heads, tokens, dk)
    merged = _heads_last(attended, n, tokens, heads, dk)  # (n, tokens, token_dim)
    out = T.matmul(merged, params.wo)
    out = T.reshape(out, (n, tokens * token_dim))
    return _squeeze_rows(out, single)


def _heads_first(t: Tensor, n, tokens, heads, dk) -> Tensor:
    """(n, tokens, heads*dk) -> (n, heads, tokens, dk)."""
    return _transpose_12(T.reshape(t, (n, tokens, heads, dk)))


def _transpose_12(t: Tensor) -> Tensor:
    """Swap axes 1 and 2 of a 4D tensor."""
    data = np.swapaxes(t.data, 1, 2)

    def rule(g):
        return (np.swapaxes(g, 1, 2),)

    return T._node(data, (t,), rule)


def _heads_last(t: Tensor, n, tokens, heads, dk) -> Tensor:
    """(n, heads, tokens, dk) -> (n, tokens, heads*dk)."""
    return T.reshape(_transpose_12(t), (n, tokens, heads * dk))


def cross_view(x_current, x_prior, params: CrossViewParams):
    """Residual cross attention between the Current feature and the exam difference.

    Forms the difference feature (prior minus current), attends each stream
    against the other, and adds the residuals. Returns the refined
    (current, difference) pair.
    """
    cur, prior = as_tensor(x_current), as_tensor(x_prior)
    diff = prior - cur
    cur_cross = cur + multi_head_attention(cur, diff, params.current, params.heads)
    diff_cross = diff + multi_head_attention(diff, cur, params.diff, params.heads)
    return cur_cross, diff_cross


class SourceModel:
    """Single-exam classifier: backbone features -> linear head -> 2 logits."""

    def __init__(self, cfg: BackboneConfig, backbone: _Backbone, head_w, head_b, meta=None):
        self.cfg = cfg
        self.backbone = backbone
        self.head_w = head_w
        self.head_b = head_b
        self.meta = dict(meta or {})

    kind = "source"

    def parameters(self):
        return self.backbone.parameters() + [("head.w", self.head_w), ("head.b", self.head_b)]

    def features(self, image) -> Tensor:
        return self.backbone.forward(image)

    def logits(self, image) -> Tensor:
        feats = self.features(image)
        single = as_tensor(image).ndim == 3
        return _squeeze_rows(T.matmul(_as_rows(feats), self.head_w) + self.head_b, single)

    def features_and_logits(self, image):
        feats = self.features(image)
        single = as_tensor(image).ndim == 3
        logits = _squeeze_rows(T.matmul(_as_rows(feats), self.head_w) + self.head_b, single)
        return feats, logits

    def probs(self, image) -> np.ndarray:
        return T.softmax(self.logits(image), axis=-1).data


class TargetModel:
    """Two-exam classifier with a shared backbone and cross-view attention."""

    def __init__(self, cfg: BackboneConfig, backbone: _Backbone, cross: CrossViewParams,
                 head_w, head_b, meta=None):
        self.cfg = cfg
        self.backbone = backbone
        self.cross = cross
        self.head_w = head_w
        self.head_b = head_b
        self.meta = dict(meta or {})

    kind = "target"

    def parameters(self):
        out = list(self.backbone.parameters())
        for stream, p in (("current", self.cross.current), ("diff", self.cross.diff)):
            for name, t in p.items():
                out.append((f"cross.{stream}.{name}", t))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def features(self, image) -> Tensor:
        return self.backbone.forward(image)

    def logits(self, prior, current) -> Tensor:
        single = as_tensor(current).ndim == 3
        f_prior = self.backbone.forward(prior)
        f_cur = self.backbone.forward(current)
        cur_cross, diff_cross = cross_view(f_cur, f_prior, self.cross)
        combined = T.concat([_as_rows(cur_cross), _as_rows(diff_cross)], axis=-1)
        return _squeeze_rows(T.matmul(combined, self.head_w) + self.head_b, single)

    def probs(self, prior, current) -> np.ndarray:
        return T.softmax(self.logits(prior, current), axis=-1).data


def _conv_spatial_check(cfg: BackboneConfig):
    h, w = cfg.input_shape[1], cfg.input_shape[2]
    for i in range(len(cfg.conv_channels)):
        h = (h + 2 - 3) // 2 + 1
        w = (w + 2 - 3) // 2 + 1
        if h < 1 or w < 1:
            raise ValueError(f"input {cfg.input_shape} too small for conv stage {i}")


def _init_backbone(cfg: BackboneConfig, rng) -> _Backbone:
    _conv_spatial_check(cfg)
    conv_w, conv_b = [], []
    c_in = cfg.input_shape[0]
    for c_out in cfg.conv_channels:
        fan_in = c_in * 9
        conv_w.append(Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, 3, 3))))
        conv_b.append(Tensor(np.zeros(c_out)))
        c_in = c_out
    proj_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / c_in), (c_in, cfg.embed_dim)))
    proj_b = Tensor(np.zeros(cfg.embed_dim))
    return _Backbone(cfg, conv_w, conv_b, proj_w, proj_b)


def _init_attention(cfg: BackboneConfig, rng) -> AttentionParams:
    td = cfg.token_dim
    std = np.sqrt(1.0 / td)
    return AttentionParams(
        wq=Tensor(rng.normal(0.0, std, (td, td))),
        wk=Tensor(rng.normal(0.0, std, (td, td))),
        wv=Tensor(rng.normal(0.0, std, (td, td))),
        wo=Tensor(rng.normal(0.0, std, (td, td))),
    )


def init_source(cfg: BackboneConfig, seed: int = 0) -> SourceModel:
    rng = np.random.default_rng([int(seed), 101])
    backbone = _init_backbone(cfg, rng)
    head_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / cfg.embed_dim), (cfg.embed_dim, 2)))
    head_b = Tensor(np.zeros(2))
    return SourceModel(cfg, backbone, head_w, head_b, meta={"seed": int(seed)})


def init_target(cfg: BackboneConfig, seed: int = 0) -> TargetModel:
    rng = np.random.default_rng([int(seed), 202])
    backbone = _init_backbone(cfg, rng)
    cross = CrossViewParams(
        current=_init_attention(cfg, rng),
        diff=_init_attention(cfg, rng),
        heads=cfg.heads,
    )
    head_w = Tensor(rng.normal(0.0, np.sqrt(0.5 / cfg.embed_dim), (2 * cfg.embed_dim, 2)))
    head_b = Tensor(np.zeros(2))
    return TargetModel(cfg, backbone, cross, head_w, head_b, meta={"seed": int(seed)})


def set_trainable(model, flag: bool):
    """Toggle requires_grad on all parameters (off for inference/attacks)."""
    for _, p in model.parameters():
        p.requires_grad = bool(flag)


def save_model(model, path):
    """Write a checkpoint: one JSON header line, then a little-endian float64 blob.

    Parameters are serialized in the order reported by ``model.parameters()``,
    which is fixed per kind (backbone convs, projection, cross-view streams
    for the target, classifier head last).
    """
    names, shapes, blobs = [], [], []
    for name, p in model.parameters():
        names.append(name)
        shapes.append(list(p.data.shape))
        blobs.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    header = {
        "magic": CHECKPOINT_MAGIC,
        "kind": model.kind,
        "backbone": asdict(model.cfg),
        "meta": model.meta,
        "params": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_model(path):
    """Load a checkpoint written by :func:`save_model`."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed checkpoint header ({exc})") from None
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a longattack checkpoint")
    cfg = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in header["backbone"].items()})
    kind = header["kind"]
    model = (init_source if kind == "source" else init_target)(cfg, seed=0)
    model.meta = dict(header.get("meta", {}))
    params = model.parameters()
    if [n for n, _ in params] != [p["name"] for p in header["params"]]:
        raise ValueError(f"{path}: parameter order does not match architecture")
    offset = 0
    for (_, tensor), spec in zip(params, header["params"]):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise ValueError(f"{path}: checkpoint blob truncated at parameter {spec['name']}")
        tensor.data = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes in checkpoint blob")
    return model
