"""
Map element detector.

This module provides:
- DetectionSet: per-query class logits and keypoints
- DeformableCrossAttention: single-scale bilinear offset sampling around
  reference points
- MapElementDetector / detect_elements: element queries made of keypoint
  queries, decoded into keypoints and class labels
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from vecmap.models.config import ModelConfig
from vecmap.models.schemas import NO_OBJECT, GridSpec, KeypointRepr
from vecmap.network.encoder import BEVFeatureGrid
from vecmap.network.layers import MLP, FeedForward, LayerNorm, Linear, Module
from vecmap.network.layers import MultiHeadAttention
from vecmap.numerics import tensor as T
from vecmap.numerics.tensor import Tensor
from vecmap.utils.errors import ShapeError

logger = logging.getLogger(__name__)

RefPoints = Union[Tensor, np.ndarray]


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class DetectionSet:
    """
    Detector output, batched (B, N, ...) or for a single sample (N, ...).

    Attributes:
        logits: Class logits over {crossing, divider, boundary, no-object}
        keypoints: Keypoints in meters, (..., N, k, 2)
        norm_keypoints: Keypoints in map-normalized [0, 1]^2 coordinates
        repr_kind: Keypoint representation
    """

    logits: Tensor
    keypoints: Tensor
    norm_keypoints: Tensor
    repr_kind: KeypointRepr

    @property
    def batched(self) -> bool:
        return self.logits.ndim == 3

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0] if self.batched else 1

    @property
    def n_max(self) -> int:
        return self.logits.shape[-2]

    @property
    def k(self) -> int:
        return self.keypoints.shape[-2]

    def log_probs(self) -> np.ndarray:
        return _log_softmax_np(self.logits.data)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def scores(self) -> np.ndarray:
        """Max non-no-object class probability per query."""
        return self.probs[..., :NO_OBJECT].max(axis=-1)

    def labels(self) -> np.ndarray:
        """Most likely real class per query."""
        return self.probs[..., :NO_OBJECT].argmax(axis=-1)

    def sample(self, b: int) -> "DetectionSet":
        """Unbatched view of batch entry b (gradients flow back)."""
        if not self.batched:
            if b != 0:
                raise ShapeError(f"unbatched detection set has no sample {b}")
            return self
        return DetectionSet(
            logits=self.logits[b],
            keypoints=self.keypoints[b],
            norm_keypoints=self.norm_keypoints[b],
            repr_kind=self.repr_kind,
        )


def ring_offsets(heads: int, points: int) -> np.ndarray:
    """
    Initial sampling offsets in feature cells: head h looks along direction
    2 pi h / heads, point s at distance s + 1.

    Returns:
        (heads, points, 2) array
    """
    thetas = np.arange(heads, dtype=np.float64) * (2.0 * math.pi / heads)
    grid = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
    grid = grid / np.abs(grid).max(axis=-1, keepdims=True)
    grid = np.repeat(grid[:, None, :], points, axis=1)
    grid *= np.arange(1, points + 1, dtype=np.float64)[None, :, None]
    return grid


class DeformableCrossAttention(Module):
    """
    Each head samples `points` locations around a query's reference point
    and mixes them with softmax weights predicted from the query.
    """

    def __init__(self, d: int, heads: int, points: int, rng: np.random.Generator):
        if d % heads != 0:
            raise ShapeError(f"hidden size {d} not divisible by {heads} heads")
        self.d, self.heads, self.points, self.dh = d, heads, points, d // heads
        self.offsets = Linear(d, heads * points * 2, rng)
        self.offsets.weight.data = np.zeros_like(self.offsets.weight.data)
        self.offsets.bias.data = ring_offsets(heads, points).reshape(-1)
        self.weights = Linear(d, heads * points, rng)
        self.weights.weight.data = np.zeros_like(self.weights.weight.data)
        self.value_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def sampling_locations(self, query: Tensor, ref: RefPoints, features: BEVFeatureGrid) -> Tensor:
        """(B, Q, heads, points, 2) feature-normalized locations, clamped to [0, 1]."""
        b, q, _ = query.shape
        off = T.reshape(self.offsets(query), (b, q, self.heads, self.points, 2))
        off = T.div(off, np.array([features.width, features.height], dtype=np.float64))
        ref = T.as_tensor(ref)
        base = T.mul(T.reshape(ref, (b, q, 1, 1, 2)), np.asarray(features.scale))
        return T.clip(T.add(base, off), 0.0, 1.0)

    def __call__(self, query: Tensor, ref: RefPoints, features: BEVFeatureGrid) -> Tensor:
        """
        Args:
            query: (B, Q, d)
            ref: (B, Q, 2) map-normalized reference points
            features: Encoded BEV features with batch B

        Returns:
            (B, Q, d)
        """
        b, q, _ = query.shape
        if features.batch_size != b:
            raise ShapeError(f"{b} query sets for {features.batch_size} feature grids")
        h, s, dh = self.heads, self.points, self.dh

        value = self.value_proj(features.tokens)
        value = T.reshape(value, (b, features.height, features.width, h, dh))
        value = T.reshape(
            T.transpose(value, (0, 3, 1, 2, 4)), (b * h, features.height, features.width, dh)
        )

        loc = self.sampling_locations(query, ref, features)
        loc = T.reshape(T.transpose(loc, (0, 2, 1, 3, 4)), (b * h, q * s, 2))
        sampled = T.reshape(T.grid_sample(value, loc), (b, h, q, s, dh))

        attn = T.softmax(T.reshape(self.weights(query), (b, q, h, s)), axis=-1)
        attn = T.reshape(T.transpose(attn, (0, 2, 1, 3)), (b, h, q, s, 1))
        out = T.tsum(T.mul(sampled, attn), axis=3)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, q, self.d))
        return self.out_proj(out)


def deformable_cross_attend(
    attn: DeformableCrossAttention, queries: Tensor, ref_points: RefPoints, features
) -> Tensor:
    return attn(queries, ref_points, features)


class DetectorLayer(Module):
    """Self-attention over keypoint queries, deformable cross-attention, FFN (post-norm)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.hidden
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng, cfg.dropout)
        self.norm1 = LayerNorm(d)
        self.cross_attn = DeformableCrossAttention(d, cfg.heads, cfg.n_points, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_mult, rng, cfg.dropout)
        self.norm3 = LayerNorm(d)
        self.dropout = cfg.dropout

    def __call__(
        self,
        q: Tensor,
        ref: RefPoints,
        features: BEVFeatureGrid,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        q = self.norm1(T.add(q, T.dropout(self.self_attn(q, q, rng=rng), self.dropout, rng)))
        cross = self.cross_attn(q, ref, features)
        q = self.norm2(T.add(q, T.dropout(cross, self.dropout, rng)))
        return self.norm3(T.add(q, T.dropout(self.ffn(q, rng), self.dropout, rng)))


class MapElementDetector(Module):
    """
    N_max element queries, each the sum of an element embedding and k
    keypoint-slot embeddings, refined by D decoder layers.

    After every layer the shared keypoint head predicts an offset to the
    reference logits (the inverse sigmoid of the reference points); the
    refined keypoints, detached, become the next layer's reference points.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, k = cfg.hidden, cfg.k
        self.n_max, self.k, self.d = cfg.n_max, k, d
        self.repr_kind = cfg.repr_kind
        self.grid: GridSpec = cfg.grid
        self.element_embed = T.parameter(rng.normal(0.0, 1.0, size=(cfg.n_max, d)))
        self.keypoint_embed = T.parameter(rng.normal(0.0, 1.0, size=(k, d)))
        self.ref_point = Linear(d, 2, rng)
        self.layers: List[DetectorLayer] = [
            DetectorLayer(cfg, rng) for _ in range(cfg.detector_layers)
        ]
        self.kp_head = MLP([d, d, 2], rng)
        self.cls_head = MLP([k * d, d, NO_OBJECT + 1], rng)

    def queries(self, batch_size: int) -> Tensor:
        """(B, N_max * k, d) keypoint queries e^p_i + e^kp_j."""
        q = T.add(
            T.reshape(self.element_embed, (self.n_max, 1, self.d)),
            T.reshape(self.keypoint_embed, (1, self.k, self.d)),
        )
        q = T.reshape(q, (1, self.n_max * self.k, self.d))
        return T.add(q, np.zeros((batch_size, 1, 1)))

    def to_meters(self, norm: Tensor) -> Tensor:
        g = self.grid
        return T.add(
            T.mul(norm, np.array([g.width_m, g.height_m])), np.array([g.x_min, g.y_min])
        )

    def __call__(
        self, features: BEVFeatureGrid, rng: Optional[np.random.Generator] = None
    ) -> DetectionSet:
        b = features.batch_size
        q = self.queries(b)
        ref_logit = self.ref_point(q)
        ref: RefPoints = T.sigmoid(ref_logit)
        norm_kp = ref
        for layer in self.layers:
            q = layer(q, ref, features, rng)
            logit = T.add(self.kp_head(q), ref_logit)
            norm_kp = T.sigmoid(logit)
            ref_logit, ref = logit.detach(), norm_kp.detach()

        norm_kp = T.reshape(norm_kp, (b, self.n_max, self.k, 2))
        logits = self.cls_head(T.reshape(q, (b, self.n_max, self.k * self.d)))
        return DetectionSet(
            logits=logits,
            keypoints=self.to_meters(norm_kp),
            norm_keypoints=norm_kp,
            repr_kind=self.repr_kind,
        )


def detect_elements(
    detector: MapElementDetector,
    features: BEVFeatureGrid,
    rng: Optional[np.random.Generator] = None,
) -> DetectionSet:
    return detector(features, rng)
