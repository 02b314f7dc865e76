"""Tiny ViT-style encoder exposing the feature map of every layer.

The encoder is randomly initialized and permanently frozen: its parameters are
created non-trainable and the two-stage schedule never touches them. Each
layer's feature is the residual-stream output after that block; no CLS token
and no final layernorm, so all depths report uniform (n_patches x width)
features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, DimensionError, NumericError
from .layers import TransformerBlock
from .rng import Rng


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 12
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "patch_size": self.patch_size,
                "depth": self.depth, "width": self.width, "heads": self.heads,
                "mlp_ratio": self.mlp_ratio, "channels": self.channels}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class VisualFeatureSet:
    """Per-layer encoder outputs, ordered by depth (1-based layer ids)."""

    per_layer: list[Tensor]
    source_layer_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.source_layer_indices:
            self.source_layer_indices = list(range(1, len(self.per_layer) + 1))
        if len(self.per_layer) != len(self.source_layer_indices):
            raise DimensionError("feature list and layer index list differ in length")

    def layer(self, index: int) -> Tensor:
        """Feature of the given 1-based encoder layer."""
        return self.per_layer[self.source_layer_indices.index(index)]

    @property
    def depth(self) -> int:
        return len(self.per_layer)


def patchify(image: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """(C, H, W) image -> (n_patches, patch_dim) rows in row-major patch order."""
    c, h, w = image.shape if image.ndim == 3 else (None, None, None)
    if image.ndim != 3 or c != cfg.channels or h != cfg.image_size or w != cfg.image_size:
        raise DimensionError(
            f"patchify: image shape {image.shape} != ({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    p = cfg.patch_size
    g = cfg.image_size // p
    # (C, gh, p, gw, p) -> (gh, gw, p, p, C) -> (gh*gw, p*p*C)
    tiles = image.reshape(c, g, p, g, p).transpose(1, 3, 2, 4, 0)
    return np.ascontiguousarray(tiles.reshape(g * g, p * p * c))


def unpatchify(patches: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Inverse of patchify."""
    p = cfg.patch_size
    g = cfg.image_size // p
    c = cfg.channels
    if patches.shape != (g * g, p * p * c):
        raise DimensionError(f"unpatchify: got {patches.shape}, expected ({g * g}, {p * p * c})")
    tiles = patches.reshape(g, g, p, p, c).transpose(4, 0, 2, 1, 3)
    return np.ascontiguousarray(tiles.reshape(c, cfg.image_size, cfg.image_size))


class VisionEncoder:
    def __init__(self, cfg: EncoderConfig, store: ParamStore, prefix: str, rng: Rng):
        self.cfg = cfg
        self.prefix = prefix
        self._store = store
        self.patch_w = store.add(f"{prefix}.patch_embed.w",
                                 rng.truncated_normal((cfg.patch_dim, cfg.width)),
                                 trainable=False)
        self.patch_b = store.add(f"{prefix}.patch_embed.b", np.zeros(cfg.width), trainable=False)
        self.pos = store.add(f"{prefix}.pos", rng.truncated_normal((cfg.n_patches, cfg.width)),
                             trainable=False)
        self.blocks = [
            TransformerBlock(store, f"{prefix}.blocks.{i}", cfg.width, cfg.heads,
                             cfg.mlp_ratio, rng)
            for i in range(cfg.depth)
        ]
        for p in store.matching(prefix):
            p.trainable = False

    def encode(self, image: np.ndarray) -> VisualFeatureSet:
        """Run all blocks, collecting the post-block output of each layer."""
        rows = patchify(image, self.cfg)
        x = ad.add(ad.bias_add(ad.matmul(Tensor(rows), self.patch_w.tensor),
                               self.patch_b.tensor),
                   self.pos.tensor)
        features = []
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, causal=False)
            if not math.isfinite(float(x.data.sum())):
                raise NumericError(f"non-finite encoder activation at layer {i}")
            features.append(x)
        return VisualFeatureSet(features)

    def load_weights(self, named: dict[str, np.ndarray]) -> None:
        """Overwrite encoder weights from a checkpoint table (pretrained hook)."""
        for p in self._store.matching(self.prefix):
            if p.name not in named:
                raise ConfigError(f"checkpoint missing encoder weight '{p.name}'")
            if named[p.name].shape != p.data.shape:
                raise DimensionError(
                    f"encoder weight '{p.name}': shape {named[p.name].shape} != {p.data.shape}")
            p.tensor.data[...] = named[p.name]
