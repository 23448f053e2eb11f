"""
BEV encoder: raster patches to a grid of feature tokens.

This module provides:
- patchify: non-overlapping patch extraction with zero padding
- BEVFeatureGrid: encoded tokens plus their spatial layout
- BEVEncoder / bev_encode: patch embedding, fixed 2D position encoding and
  self-attention blocks
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from vecmap.models.config import ModelConfig
from vecmap.network.layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from vecmap.network.layers import sinusoid_2d
from vecmap.numerics import tensor as T
from vecmap.numerics.tensor import Tensor
from vecmap.utils.errors import ShapeError

logger = logging.getLogger(__name__)


def feature_extent(height: int, width: int, patch: int) -> Tuple[int, int]:
    """(H_f, W_f) = (ceil(H / patch), ceil(W / patch))."""
    return math.ceil(height / patch), math.ceil(width / patch)


def patchify(raster: np.ndarray, patch: int) -> np.ndarray:
    """
    Split (B, C, H, W) rasters into row-major flattened patches.

    The raster is zero-padded on the high side to a multiple of `patch`.

    Returns:
        (B, H_f * W_f, C * patch * patch)
    """
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim != 4:
        raise ShapeError(f"patchify expects (B, C, H, W), got {raster.shape}")
    b, c, h, w = raster.shape
    hf, wf = feature_extent(h, w, patch)
    padded = np.zeros((b, c, hf * patch, wf * patch), dtype=np.float64)
    padded[:, :, :h, :w] = raster
    blocks = padded.reshape(b, c, hf, patch, wf, patch).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(b, hf * wf, c * patch * patch)


@dataclass
class BEVFeatureGrid:
    """
    Encoded BEV features.

    Token r * width + c holds the patch in row r (y bin) and column c (x bin).
    Map-normalized coordinates in [0, 1]^2 become feature-normalized
    coordinates by multiplying with `scale`, which is below 1 when the
    raster was padded.
    """

    tokens: Tensor
    height: int
    width: int
    scale: Tuple[float, float]

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def as_grid(self) -> Tensor:
        """(B, H_f, W_f, d) view for bilinear sampling."""
        return T.reshape(self.tokens, (self.batch_size, self.height, self.width, self.dim))

    def select(self, index: np.ndarray) -> "BEVFeatureGrid":
        """Features of the given batch entries (repeats allowed)."""
        return BEVFeatureGrid(
            tokens=T.getitem(self.tokens, np.asarray(index, dtype=np.int64)),
            height=self.height,
            width=self.width,
            scale=self.scale,
        )


class EncoderBlock(Module):
    """Post-norm self-attention block."""

    def __init__(self, d: int, heads: int, ffn_mult: int, rng: np.random.Generator, dropout=0.0):
        self.attn = MultiHeadAttention(d, heads, rng, dropout)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult, rng, dropout)
        self.norm2 = LayerNorm(d)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = self.norm1(T.add(x, T.dropout(self.attn(x, x, rng=rng), self.dropout, rng)))
        return self.norm2(T.add(x, T.dropout(self.ffn(x, rng), self.dropout, rng)))


class BEVEncoder(Module):
    """Patch embedding + 2D sinusoidal position encoding + L self-attention blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.patch = cfg.patch
        self.in_channels = cfg.in_channels
        self.raster_hw = (cfg.grid_height_cells, cfg.grid_width_cells)
        self.hf, self.wf = feature_extent(cfg.grid_height_cells, cfg.grid_width_cells, cfg.patch)
        self.embed = Linear(cfg.in_channels * cfg.patch * cfg.patch, cfg.hidden, rng)
        self.pos = sinusoid_2d(self.hf, self.wf, cfg.hidden)
        self.blocks: List[EncoderBlock] = [
            EncoderBlock(cfg.hidden, cfg.heads, cfg.ffn_mult, rng, cfg.dropout)
            for _ in range(cfg.encoder_layers)
        ]

    @property
    def scale(self) -> Tuple[float, float]:
        h, w = self.raster_hw
        return (w / (self.wf * self.patch), h / (self.hf * self.patch))

    def __call__(
        self, raster: np.ndarray, rng: Optional[np.random.Generator] = None
    ) -> BEVFeatureGrid:
        """
        Encode a batch of rasters.

        Args:
            raster: (B, C, H, W) or (C, H, W) array
            rng: Dropout generator

        Returns:
            BEVFeatureGrid with (B, H_f * W_f, d) tokens
        """
        raster = np.asarray(raster, dtype=np.float64)
        if raster.ndim == 3:
            raster = raster[None]
        expected = (self.in_channels,) + self.raster_hw
        if raster.ndim != 4 or raster.shape[1:] != expected:
            raise ShapeError(f"raster shape {raster.shape[1:]} does not match {expected}")
        x = T.add(self.embed(T.as_tensor(patchify(raster, self.patch))), self.pos)
        for block in self.blocks:
            x = block(x, rng)
        return BEVFeatureGrid(tokens=x, height=self.hf, width=self.wf, scale=self.scale)


def bev_encode(
    encoder: BEVEncoder, raster: np.ndarray, rng: Optional[np.random.Generator] = None
) -> BEVFeatureGrid:
    return encoder(raster, rng)
