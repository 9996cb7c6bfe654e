"""Label-level embedding network, projector and per-label classifiers.

An image passes through a small strided CNN, its final feature map is read as
``WH`` spatial rows of ``C`` channels, and a learnable ``L x C`` matrix of class
queries attends over those rows to give one ``D``-wide embedding per label.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .attention import MultiHeadParams, glorot_uniform, multi_att_block
from .tensor import ShapeError, Tensor

U_INIT_STD = 0.02


@dataclass
class EncoderConfig:
    image_size: int = 64
    channels: Tuple[int, ...] = (16, 32, 64, 64)
    kernel: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        stride_total = 2 ** len(self.channels)
        if self.image_size % stride_total:
            raise ValueError(f"image size {self.image_size} not divisible by {stride_total}")
        if any(c <= 0 for c in self.channels):
            raise ValueError("channel counts must be positive")

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def grid(self) -> int:
        return self.image_size // 2 ** len(self.channels)

    @property
    def cells(self) -> int:
        return self.grid * self.grid


@dataclass
class ModelConfig:
    """Dimensions of a MulCon model. ``encoder.channels[-1]`` is C."""

    num_labels: int = 8
    embed_dim: int = 64
    heads: int = 4
    proj_dim: int = 32
    scaled: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.num_labels < 2:
            raise ValueError("need at least two labels")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @classmethod
    def full_scale_profile(cls, num_labels: int = 80) -> "ModelConfig":
        # Reference dimensions of the full-scale setting; far too large for CPU training here.
        return cls(num_labels=num_labels, embed_dim=1024, heads=4, proj_dim=128,
                   encoder=EncoderConfig(image_size=448, channels=(64, 256, 512, 2048)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels"] = list(self.encoder.channels)
        return d


class Encoder:
    """Conv(3x3, stride 2, pad 1) + ReLU, repeated once per channel entry."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        self.config = config
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        cin = 3
        k = config.kernel
        for cout in config.channels:
            std = math.sqrt(2.0 / (cin * k * k))
            self.weights.append(Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype), requires_grad=True))
            self.biases.append(Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
            cin = cout

    def named(self, prefix: str = "enc") -> Dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.conv{i}.w"] = w
            out[f"{prefix}.conv{i}.b"] = b
        return out

    def __call__(self, images) -> Tensor:
        """N x H x W x 3 images in [0, 1] -> N x WH x C spatial features."""
        x = T.as_tensor(images, dtype=self.weights[0].dtype)
        size = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (size, size, 3):
            raise ShapeError(f"expected N x {size} x {size} x 3 images, got {x.shape}")
        h = x
        for w, b in zip(self.weights, self.biases):
            h = T.relu(T.conv2d_nhwc(h, w, b, stride=2, padding=self.config.kernel // 2))
        n, gh, gw, c = h.shape
        return T.reshape(h, (n, gh * gw, c))


def _linear_params(rng, fan_in, fan_out, dtype):
    w = Tensor(glorot_uniform(rng, fan_in, fan_out, dtype), requires_grad=True)
    b = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
    return w, b


@dataclass
class Forward:
    g: Tensor
    probs: Tensor
    attention: Optional[List[Tensor]] = None


class MulConModel:
    """Encoder, class queries ``U``, attention block, projector and classifiers."""

    kind = "mulcon"

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        root = np.random.SeedSequence(seed)
        enc_ss, u_ss, attn_ss, proj_ss, cls_ss = root.spawn(5)
        rng = np.random.default_rng
        enc = config.encoder
        L, C, D = config.num_labels, enc.out_channels, config.embed_dim
        self.encoder = Encoder(enc, rng(enc_ss), dtype)
        self.U = Tensor(rng(u_ss).normal(0.0, U_INIT_STD, (L, C)).astype(dtype), requires_grad=True)
        self.attn = MultiHeadParams.init(C, D, config.heads, rng(attn_ss), scaled=config.scaled, dtype=dtype)
        prng = rng(proj_ss)
        self.proj = [_linear_params(prng, D, D, dtype), _linear_params(prng, D, config.proj_dim, dtype)]
        crng = rng(cls_ss)
        self.cls_w: List[Tensor] = []
        self.cls_b: List[Tensor] = []
        for _ in range(L):
            w, b = _linear_params(crng, D, 1, dtype)
            self.cls_w.append(Tensor(w.data[:, 0].copy(), requires_grad=True))
            self.cls_b.append(Tensor(b.data.copy(), requires_grad=True))

    # -- parameters ---------------------------------------------------------
    def embedding_params(self) -> Dict[str, Tensor]:
        out = dict(self.encoder.named())
        out["U"] = self.U
        out.update(self.attn.named())
        return out

    def classifier_params(self) -> Dict[str, Tensor]:
        out = {}
        for j, (w, b) in enumerate(zip(self.cls_w, self.cls_b)):
            out[f"cls.{j}.w"] = w
            out[f"cls.{j}.b"] = b
        return out

    def projector_params(self) -> Dict[str, Tensor]:
        out = {}
        for k, (w, b) in enumerate(self.proj):
            out[f"proj.{k}.w"] = w
            out[f"proj.{k}.b"] = b
        return out

    def params(self) -> Dict[str, Tensor]:
        out = self.embedding_params()
        out.update(self.projector_params())
        out.update(self.classifier_params())
        return out

    def step1_params(self) -> Dict[str, Tensor]:
        out = self.embedding_params()
        out.update(self.classifier_params())
        return out

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    # -- forward pieces ------------------------------------------------------
    def encode(self, images) -> Tensor:
        return self.encoder(images)

    def label_embeddings(self, r: Tensor, return_weights: bool = False):
        return label_embeddings(r, self.U, self.attn, return_weights=return_weights)

    def project(self, g: Tensor) -> Tensor:
        (w0, b0), (w1, b1) = self.proj
        h = T.relu(g @ w0 + b0)
        return T.l2_normalize(h @ w1 + b1, axis=-1)

    def classify(self, g: Tensor) -> Tensor:
        w = T.stack(self.cls_w, axis=0)
        b = T.concat(self.cls_b, axis=0)
        return T.sigmoid(T.sum(g * w, axis=-1) + b)

    def forward(self, images, return_weights: bool = False) -> Forward:
        r = self.encode(images)
        g, weights = self.label_embeddings(r, return_weights=True)
        return Forward(g, self.classify(g), weights if return_weights else None)

    __call__ = forward


def label_embeddings(r: Tensor, U: Tensor, params: MultiHeadParams, return_weights: bool = False):
    """g_i = MultiAttBlock(U, r_i, r_i) for every image in the batch."""
    r = T.as_tensor(r)
    if r.ndim != 3 or r.shape[-1] != U.shape[-1]:
        raise ShapeError(f"features {r.shape} do not match class queries {U.shape}")
    return multi_att_block(U, r, r, params, return_weights=return_weights)


class BackboneModel:
    """Image-level baseline: encoder, spatial mean pool, one L-way linear head.

    Carries a projector on the pooled feature so the image-level contrastive
    variant can reuse it.
    """

    kind = "backbone"

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        enc_ss, head_ss, proj_ss = np.random.SeedSequence(seed).spawn(3)
        rng = np.random.default_rng
        C = config.encoder.out_channels
        self.encoder = Encoder(config.encoder, rng(enc_ss), dtype)
        self.head = _linear_params(rng(head_ss), C, config.num_labels, dtype)
        prng = rng(proj_ss)
        self.proj = [_linear_params(prng, C, C, dtype), _linear_params(prng, C, config.proj_dim, dtype)]

    def params(self) -> Dict[str, Tensor]:
        out = dict(self.encoder.named())
        out["head.w"], out["head.b"] = self.head
        for k, (w, b) in enumerate(self.proj):
            out[f"proj.{k}.w"] = w
            out[f"proj.{k}.b"] = b
        return out

    def step1_params(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params().items() if not k.startswith("proj.")}

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    def pooled(self, images) -> Tensor:
        return T.mean(self.encoder(images), axis=1)

    def project(self, pooled: Tensor) -> Tensor:
        (w0, b0), (w1, b1) = self.proj
        return T.l2_normalize(T.relu(pooled @ w0 + b0) @ w1 + b1, axis=-1)

    def forward(self, images, return_weights: bool = False) -> Forward:
        pooled = self.pooled(images)
        w, b = self.head
        return Forward(pooled, T.sigmoid(pooled @ w + b))

    __call__ = forward


def init_model(config: ModelConfig, seed: int, kind: str = "mulcon", dtype=np.float64):
    if kind == "mulcon":
        return MulConModel(config, seed, dtype)
    if kind == "backbone":
        return BackboneModel(config, seed, dtype)
    raise ValueError(f"unknown model kind {kind!r}")


def state_dict(model) -> Dict[str, np.ndarray]:
    return {name: p.data for name, p in model.params().items()}


def load_state_dict(model, tensors: Dict[str, np.ndarray], strict: bool = True) -> None:
    params = model.params()
    if strict:
        missing = [k for k in params if k not in tensors]
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
    for name, p in params.items():
        if name not in tensors:
            continue
        arr = np.asarray(tensors[name])
        if arr.shape != p.shape:
            raise ShapeError(f"tensor {name!r} has shape {arr.shape} in checkpoint, model expects {p.shape}")
        p.data = arr.astype(p.dtype)
