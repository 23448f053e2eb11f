"""
Building blocks for the vecmap network.

This module provides:
- Module: parameter registry with named traversal and state (de)serialization
- Linear / LayerNorm / MLP / FeedForward
- MultiHeadAttention with optional additive mask
- sinusoidal position encodings and the causal mask
"""

import logging
import math
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from vecmap.numerics import tensor as T
from vecmap.numerics.tensor import Tensor
from vecmap.utils.errors import ShapeError

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9


class Module:
    """Base class; parameters are Tensor attributes with requires_grad."""

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        """All parameters, named by attribute path, in definition order."""
        found: List[Tuple[str, Tensor]] = []
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    found.append((path, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_parameters(f"{path}.{i}."))
        return found

    def parameters(self) -> Iterator[Tensor]:
        for _, p in self.named_parameters():
            yield p

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of all parameter arrays."""
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        """
        Load parameter arrays by name.

        Raises:
            ShapeError: On missing names or shape mismatches
        """
        for name, p in self.named_parameters():
            if name not in arrays:
                raise ShapeError(f"missing parameter {name} in state")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()
            p.zero_grad()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    """y = x @ W + b over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = T.parameter(xavier_uniform(rng, d_in, d_out))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = T.parameter(np.ones(d))
        self.beta = T.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng: np.random.Generator, dropout: float = 0.0):
        self.inner = Linear(d, d * mult, rng)
        self.outer = Linear(d * mult, d, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = T.dropout(T.gelu(self.inner(x)), self.dropout, rng)
        return self.outer(h)


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention over (B, L, d) sequences.

    The key projection has no bias; softmax is invariant to it.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        if d % heads != 0:
            raise ShapeError(f"hidden size {d} not divisible by {heads} heads")
        self.d, self.heads, self.dh = d, heads, d // heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng, bias=False)
        self.v_proj = Linear(d, d, rng)
        self.o_proj = Linear(d, d, rng)
        self.dropout = dropout

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, self.dh)), (0, 2, 1, 3))

    def __call__(
        self,
        query: Tensor,
        context: Tensor,
        mask: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """
        Attend from query to context.

        Args:
            query: (B, Lq, d)
            context: (B, Lk, d)
            mask: Optional boolean (Lq, Lk) or (B, 1, Lq, Lk); True = allowed
            rng: Dropout generator

        Returns:
            (B, Lq, d)
        """
        if query.shape[0] != context.shape[0]:
            raise ShapeError(f"attention batch mismatch: {query.shape} vs {context.shape}")
        b, lq, _ = query.shape
        q = self._split(self.q_proj(query))
        k = T.transpose(self._split(self.k_proj(context)), (0, 1, 3, 2))
        v = self._split(self.v_proj(context))

        scores = T.mul(T.matmul(q, k), 1.0 / math.sqrt(self.dh))
        if mask is not None:
            scores = T.add(scores, np.where(mask, 0.0, MASK_VALUE))
        weights = T.dropout(T.softmax(scores, axis=-1), self.dropout, rng)
        out = T.matmul(weights, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, lq, self.d))
        return self.o_proj(out)


def causal_mask(length: int) -> np.ndarray:
    """Boolean (L, L) mask allowing attention to current and earlier positions."""
    return np.tril(np.ones((length, length), dtype=bool))


def sinusoid_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Sin/cos encoding of positions into `dim` channels."""
    i = np.arange(dim)
    freq = 1.0 / (10000.0 ** (2.0 * (i // 2) / max(dim, 1)))
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freq[None, :]
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


def sinusoid_2d(height: int, width: int, dim: int) -> np.ndarray:
    """
    Fixed 2D encoding for a row-major (height, width) token grid.

    The first half of the channels encodes the row, the rest the column.

    Returns:
        (height * width, dim) array
    """
    d_row = dim // 2
    rows = sinusoid_1d(np.arange(height), d_row)
    cols = sinusoid_1d(np.arange(width), dim - d_row)
    grid = np.concatenate(
        [
            np.repeat(rows[:, None, :], width, axis=1),
            np.repeat(cols[None, :, :], height, axis=0),
        ],
        axis=-1,
    )
    return grid.reshape(height * width, dim)
