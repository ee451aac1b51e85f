"""Per-modality MLP backbones and the shared cross-modal encoder.

Each modality j has its own backbone mapping raw feature vectors to
modal-specific features y; one shared affine encoder maps any modality's y to
the cross-modal embedding z used for retrieval.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeMismatchError


@dataclass(frozen=True)
class ModelConfig:
    num_modalities: int = 2
    input_dim: int = 32
    backbone_hidden_dims: tuple = (64,)
    feature_dim: int = 64
    embedding_dim: int = 128
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.num_modalities < 2:
            raise ContractError("num_modalities must be >= 2")
        if self.input_dim <= 0 or self.feature_dim <= 0 or self.embedding_dim <= 0:
            raise ContractError("dimensions must be positive")
        if any(d <= 0 for d in self.backbone_hidden_dims):
            raise ContractError("hidden dims must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ContractError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "backbone_hidden_dims",
                           tuple(int(d) for d in self.backbone_hidden_dims))

    def to_dict(self):
        return {"num_modalities": self.num_modalities, "input_dim": self.input_dim,
                "backbone_hidden_dims": list(self.backbone_hidden_dims),
                "feature_dim": self.feature_dim, "embedding_dim": self.embedding_dim,
                "activation": self.activation, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["backbone_hidden_dims"] = tuple(d.get("backbone_hidden_dims", (64,)))
        return cls(**d)


@dataclass
class ModelParams:
    """All trainable tensors: one weight/bias list per backbone, one encoder pair."""

    config: ModelConfig
    backbones: list = field(default_factory=list)  # per modality: [(W, b), ...]
    encoder: tuple = None                          # (W, b)

    def named_tensors(self):
        for j, layers in enumerate(self.backbones):
            for li, (w, b) in enumerate(layers):
                yield f"backbone{j}.layer{li}.W", w
                yield f"backbone{j}.layer{li}.b", b
        w, b = self.encoder
        yield "encoder.W", w
        yield "encoder.b", b

    def copy(self):
        """Deep copy with fresh grad-enabled tensors."""
        backbones = [[(T.Tensor(w.data.copy(), grad_enabled=True),
                       T.Tensor(b.data.copy(), grad_enabled=True))
                      for w, b in layers] for layers in self.backbones]
        w, b = self.encoder
        encoder = (T.Tensor(w.data.copy(), grad_enabled=True),
                   T.Tensor(b.data.copy(), grad_enabled=True))
        return ModelParams(self.config, backbones, encoder)


def _glorot(rng, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def init_params(config: ModelConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic in config.seed."""
    rng = np.random.default_rng(config.seed)
    backbones = []
    dims = [config.input_dim, *config.backbone_hidden_dims, config.feature_dim]
    for _ in range(config.num_modalities):
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = T.Tensor(_glorot(rng, fan_in, fan_out), grad_enabled=True)
            b = T.Tensor(np.zeros(fan_out), grad_enabled=True)
            layers.append((w, b))
        backbones.append(layers)
    w = T.Tensor(_glorot(rng, config.feature_dim, config.embedding_dim), grad_enabled=True)
    b = T.Tensor(np.zeros(config.embedding_dim), grad_enabled=True)
    return ModelParams(config, backbones, (w, b))


def forward_backbone(params: ModelParams, modality: int, x) -> T.Tensor:
    """Map a batch of raw inputs through modality j's backbone to y features."""
    if not 0 <= modality < params.config.num_modalities:
        raise IndexError(f"unknown modality {modality}")
    x = x if isinstance(x, T.Tensor) else T.Tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != params.config.input_dim:
        raise ShapeMismatchError(
            f"backbone input must be batch x {params.config.input_dim}, got {x.data.shape}")
    act = T.tanh if params.config.activation == "tanh" else T.relu
    h = x
    layers = params.backbones[modality]
    for w, b in layers[:-1]:
        h = act(T.add_rowvec(T.matmul(h, w), b))
    w, b = layers[-1]
    return T.add_rowvec(T.matmul(h, w), b)


def forward_encoder(params: ModelParams, y) -> T.Tensor:
    """Shared affine encoder: y features -> z embeddings, same weights for all modalities."""
    y = y if isinstance(y, T.Tensor) else T.Tensor(y)
    if y.data.ndim != 2 or y.data.shape[1] != params.config.feature_dim:
        raise ShapeMismatchError(
            f"encoder input must be batch x {params.config.feature_dim}, got {y.data.shape}")
    w, b = params.encoder
    return T.add_rowvec(T.matmul(y, w), b)


def embed(params: ModelParams, modality: int, x) -> T.Tensor:
    """Inference path used by retrieval: encoder applied to backbone features."""
    return forward_encoder(params, forward_backbone(params, modality, x))
