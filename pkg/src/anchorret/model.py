"""Asymmetric dual tower.

Text side: a frozen anchor per (semantic id, language), built from a shared
class direction plus a small language offset, followed by a trainable
linear projector.  Visual side: 4x4 mean pooling, two tanh hidden layers
and a linear head.  Both towers end in L2 normalization.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import Node, ShapeError, add_bias, constant, l2_normalize, matmul, parameter, tanh

CHECKPOINT_FORMAT = "anchorret-ckpt/1"
TAU_MIN, TAU_MAX = 0.01, 1.0
LOG_TAU_MIN, LOG_TAU_MAX = math.log(TAU_MIN), math.log(TAU_MAX)


@dataclass(frozen=True)
class AnchorConfig:
    base_dim: int = 64
    embed_dim: int = 32
    language_offset: float = 0.1
    anchor_seed: int = 1234

    def __post_init__(self):
        if self.base_dim < self.embed_dim:
            raise ValueError(f"base_dim {self.base_dim} smaller than embed_dim {self.embed_dim}")
        if self.language_offset < 0:
            raise ValueError("language_offset must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    canvas: tuple[int, int] = (24, 72)
    pool: int = 4
    hidden: int = 64
    tau_init: float = 0.07

    @property
    def embed_dim(self) -> int:
        return self.anchor.embed_dim

    @property
    def pooled_dim(self) -> int:
        h, w = self.canvas
        if h % self.pool or w % self.pool:
            raise ShapeError(f"canvas {self.canvas} not divisible by pool {self.pool}")
        return (h // self.pool) * (w // self.pool)

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        d, hid = self.embed_dim, self.hidden
        return {
            "vis_w1": (self.pooled_dim, hid), "vis_b1": (hid,),
            "vis_w2": (hid, hid), "vis_b2": (hid,),
            "vis_w3": (hid, d), "vis_b3": (d,),
            "text_proj": (self.anchor.base_dim, d),
            "log_temperature": (1,),
        }

    def to_json(self) -> dict:
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["anchor"] = AnchorConfig(**d["anchor"])
        d["canvas"] = tuple(d["canvas"])
        return cls(**d)


VISUAL_LAYERS = (("vis_w1", "vis_b1"), ("vis_w2", "vis_b2"), ("vis_w3", "vis_b3"))


class ModelParams:
    """Trainable tensors, held as leaf nodes keyed by name.

    The frozen anchor vectors are not stored here; they are recomputed from
    the anchor seed whenever needed.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        expected = config.layer_shapes()
        if set(tensors) != set(expected):
            raise ValueError(f"tensor names {sorted(tensors)} != {sorted(expected)}")
        self.nodes: dict[str, Node] = {}
        for name, shape in expected.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: shape {arr.shape}, expected {shape}")
            self.nodes[name] = parameter(arr.copy(), name=name)

    def __getitem__(self, name: str) -> Node:
        return self.nodes[name]

    def trainable(self) -> list[Node]:
        return list(self.nodes.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: n.value.copy() for k, n in self.nodes.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.arrays())

    @property
    def tau(self) -> float:
        return math.exp(self.nodes["log_temperature"].item())

    def clamp_temperature(self) -> None:
        lt = self.nodes["log_temperature"].value
        np.clip(lt, LOG_TAU_MIN, LOG_TAU_MAX, out=lt)

    def count(self) -> int:
        return sum(n.value.size for n in self.nodes.values())


def init_params(seed: int, config: ModelConfig | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, temperature ``config.tau_init``."""
    config = config or ModelConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    tensors = {}
    for name, shape in config.layer_shapes().items():
        if name == "log_temperature":
            tensors[name] = np.array([math.log(config.tau_init)])
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# text tower


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _lang_key(language: str) -> int:
    return zlib.crc32(language.encode("utf-8"))


def anchor_base(y: int, language: str, cfg: AnchorConfig, languages=None) -> np.ndarray:
    """Frozen anchor ``normalize(u_y + beta * delta_{y,l})``; never part of the graph."""
    if languages is not None and language not in languages:
        raise KeyError(f"unknown language {language!r}; expected one of {tuple(languages)}")
    if y < 0:
        raise IndexError(f"negative semantic id {y}")
    u = _unit(np.random.default_rng([cfg.anchor_seed, int(y)]), cfg.base_dim)
    delta = _unit(np.random.default_rng([cfg.anchor_seed, int(y), _lang_key(language)]), cfg.base_dim)
    v = u + cfg.language_offset * delta
    return v / np.linalg.norm(v)


def anchor_matrix(pairs, cfg: AnchorConfig, languages=None) -> np.ndarray:
    return np.stack([anchor_base(y, l, cfg, languages) for y, l in pairs])


def project_anchors(anchors: np.ndarray, params: ModelParams) -> Node:
    """Rows of frozen anchors through the trainable projector, then normalized."""
    return l2_normalize(matmul(constant(anchors), params["text_proj"]))


def encode_text(y: int, language: str, params: ModelParams, languages=None) -> np.ndarray:
    base = anchor_base(y, language, params.config.anchor, languages)
    return project_anchors(base[None, :], params).value[0]


# ---------------------------------------------------------------------------
# visual tower


def pool_images(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """[n, H, W] (or one [H, W] image) -> [n, pooled_dim] by non-overlapping mean pooling."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    h, w = config.canvas
    if images.shape[1:] != (h, w):
        raise ShapeError(f"image shape {images.shape[1:]} does not match canvas {config.canvas}")
    p = config.pool
    n = images.shape[0]
    return images.reshape(n, h // p, p, w // p, p).mean(axis=(2, 4)).reshape(n, -1)


def visual_forward(pooled: np.ndarray, params: ModelParams) -> Node:
    x: Node = constant(pooled)
    for i, (w, b) in enumerate(VISUAL_LAYERS):
        x = add_bias(matmul(x, params[w]), params[b])
        if i < len(VISUAL_LAYERS) - 1:
            x = tanh(x)
    return l2_normalize(x)


def encode_images(images: np.ndarray, params: ModelParams) -> np.ndarray:
    return visual_forward(pool_images(images, params.config), params).value


def encode_image(image: np.ndarray, params: ModelParams) -> np.ndarray:
    return encode_images(image, params)[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Header line (JSON) followed by the raw little-endian float64 blobs in header order."""
    path = Path(path)
    if path.exists():
        raise FileExistsError(f"{path} exists; checkpoints are never overwritten")
    tensors = []
    blobs = []
    for name, node in params.nodes.items():
        data = node.value.astype("<f8").tobytes()
        tensors.append({"name": name, "shape": list(node.shape), "nbytes": len(data)})
        blobs.append(data)
    header = {"format": CHECKPOINT_FORMAT, "config": params.config.to_json(),
              "anchor_seed": params.config.anchor.anchor_seed, "tensors": tensors,
              "extra": extra or {}}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: no header line")
    header = json.loads(raw[:nl].decode("utf-8"))
    return header, raw[nl + 1:]


def load_checkpoint(path) -> ModelParams:
    header, body = read_checkpoint_header(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    config = ModelConfig.from_json(header["config"])
    tensors = {}
    offset = 0
    for t in header["tensors"]:
        chunk = body[offset:offset + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise ValueError(f"{path}: truncated blob for {t['name']}")
        tensors[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(t["shape"]).astype(np.float64)
        offset += t["nbytes"]
    return ModelParams(config, tensors)
