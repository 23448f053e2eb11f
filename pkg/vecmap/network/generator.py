"""
Autoregressive polyline generator.

This module provides:
- GeneratorCondition / build_condition: class + keypoint token prompts
- PolylineGenerator: causal transformer over [prompt | vertex tokens] with
  cross-attention to the BEV features of the element's scene
- generator_step / teacher_forced_nll: next-token logits and training loss
- decode_polyline: batched greedy or temperature-sampled decoding

Token vocabulary for a grid with V = max(W, H) bins:
    0 .. V-1      coordinate bins (x tokens < W, y tokens < H)
    V             EOS
    V+1 .. V+3    class tokens (inputs only)
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from vecmap.models.config import ModelConfig
from vecmap.models.schemas import NUM_CLASSES, GridSpec, VertexTokenSeq
from vecmap.network.encoder import BEVFeatureGrid
from vecmap.network.layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from vecmap.network.layers import MASK_VALUE, causal_mask
from vecmap.numerics import tensor as T
from vecmap.numerics.tensor import Tensor, no_grad
from vecmap.services.geometry import quantize_points
from vecmap.utils.errors import ShapeError, TokenDecodeError

logger = logging.getLogger(__name__)

COORD_X = 0
COORD_Y = 1
COORD_PROMPT = 2


def class_token(label: int, g: GridSpec) -> int:
    return g.num_bins + 1 + int(label)


@dataclass(frozen=True)
class GeneratorCondition:
    """
    Prompts for E elements.

    Attributes:
        prompt: (E, 1 + 2k) tokens [class, kp1.x, kp1.y, ..., kpk.x, kpk.y]
        scene_index: (E,) batch entry whose features each element attends to
    """

    prompt: np.ndarray
    scene_index: np.ndarray

    @property
    def num(self) -> int:
        return self.prompt.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.prompt.shape[1]

    def subset(self, index: Sequence[int]) -> "GeneratorCondition":
        index = np.asarray(index, dtype=np.int64)
        return GeneratorCondition(prompt=self.prompt[index], scene_index=self.scene_index[index])


def build_condition(
    labels: np.ndarray,
    keypoints: np.ndarray,
    g: GridSpec,
    scene_index: Optional[np.ndarray] = None,
) -> GeneratorCondition:
    """
    Tokenize class labels and keypoints (meters, clamped to the grid).

    Args:
        labels: (E,) class indices
        keypoints: (E, k, 2) keypoints in meters
        g: Quantization grid
        scene_index: (E,) batch entries; all zeros when omitted

    Returns:
        GeneratorCondition
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    keypoints = np.asarray(keypoints, dtype=np.float64)
    if keypoints.ndim != 3 or keypoints.shape[0] != len(labels) or keypoints.shape[-1] != 2:
        raise ShapeError(f"keypoints {keypoints.shape} do not match {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise ShapeError(f"class labels outside [0, {NUM_CLASSES})")
    e, k, _ = keypoints.shape
    cells = quantize_points(keypoints.reshape(-1, 2), g).reshape(e, 2 * k)
    prompt = np.concatenate([(labels + g.num_bins + 1)[:, None], cells], axis=1)
    if scene_index is None:
        scene_index = np.zeros(e, dtype=np.int64)
    return GeneratorCondition(
        prompt=prompt.astype(np.int64), scene_index=np.asarray(scene_index, dtype=np.int64)
    )


class GeneratorLayer(Module):
    """Causal self-attention, cross-attention to BEV tokens, FFN (post-norm)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.hidden
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng, cfg.dropout)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, rng, cfg.dropout)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_mult, rng, cfg.dropout)
        self.norm3 = LayerNorm(d)
        self.dropout = cfg.dropout

    def __call__(
        self,
        x: Tensor,
        context: Tensor,
        mask: np.ndarray,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        x = self.norm1(T.add(x, T.dropout(self.self_attn(x, x, mask, rng), self.dropout, rng)))
        cross = self.cross_attn(x, context, rng=rng)
        x = self.norm2(T.add(x, T.dropout(cross, self.dropout, rng)))
        return self.norm3(T.add(x, T.dropout(self.ffn(x, rng), self.dropout, rng)))


class PolylineGenerator(Module):
    """
    Next-token model p(v_n | v_<n, keypoints, class, BEV features).

    A token's embedding is the sum of its value embedding, its coordinate
    slot embedding (x, y, or prompt) and its position embedding (vertex
    index for coordinates, a reserved slot per prompt position).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.hidden
        self.grid: GridSpec = cfg.grid
        self.n_v_max = cfg.n_v_max
        self.k = cfg.k
        self.vocab_out = self.grid.num_bins + 1
        vocab_in = self.vocab_out + NUM_CLASSES
        self.prompt_len = 1 + 2 * cfg.k
        self.value_embed = T.parameter(rng.normal(0.0, 1.0, size=(vocab_in, d)))
        self.coord_embed = T.parameter(rng.normal(0.0, 1.0, size=(3, d)))
        self.pos_embed = T.parameter(
            rng.normal(0.0, 1.0, size=(cfg.n_v_max + 1 + self.prompt_len, d))
        )
        self.layers: List[GeneratorLayer] = [
            GeneratorLayer(cfg, rng) for _ in range(cfg.generator_layers)
        ]
        self.head = Linear(d, self.vocab_out, rng)

    @property
    def eos_id(self) -> int:
        return self.grid.eos_id

    @property
    def max_len(self) -> int:
        return 2 * self.n_v_max + 1

    def slots(self, length: int) -> tuple:
        """Coordinate-slot and position ids for a sequence of `length` tokens."""
        p = self.prompt_len
        m = np.arange(max(length - p, 0))
        coord = np.concatenate([np.full(min(length, p), COORD_PROMPT), m % 2])
        pos = np.concatenate([self.n_v_max + 1 + np.arange(min(length, p)), m // 2])
        return coord.astype(np.int64), pos.astype(np.int64)

    def check_prefix(self, prefix: np.ndarray) -> None:
        """
        Raises:
            TokenDecodeError: If a prefix token is outside its slot's vocabulary
        """
        if prefix.size == 0:
            return
        if prefix.shape[1] >= self.max_len:
            raise TokenDecodeError(
                f"prefix length {prefix.shape[1]} reaches the limit {self.max_len}"
            )
        limits = np.where(
            np.arange(prefix.shape[1]) % 2 == 0, self.grid.width_cells, self.grid.height_cells
        )
        if np.any(prefix < 0) or np.any(prefix >= limits[None, :]):
            raise TokenDecodeError("prefix contains a token outside the coordinate vocabulary")

    def embed(self, ids: np.ndarray) -> Tensor:
        coord, pos = self.slots(ids.shape[1])
        x = T.add(T.embedding(self.value_embed, ids), T.embedding(self.coord_embed, coord))
        return T.add(x, T.embedding(self.pos_embed, pos))

    def __call__(
        self,
        ids: np.ndarray,
        features: BEVFeatureGrid,
        scene_index: np.ndarray,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """
        Logits for every position of [prompt | vertex tokens].

        Args:
            ids: (E, L) input tokens
            features: BEV features of the batch
            scene_index: (E,) batch entry per element
            rng: Dropout generator

        Returns:
            (E, L, V + 1) logits
        """
        ids = np.asarray(ids, dtype=np.int64)
        context = features.select(scene_index).tokens
        mask = causal_mask(ids.shape[1])
        x = self.embed(ids)
        for layer in self.layers:
            x = layer(x, context, mask, rng)
        return self.head(x)


def generator_step(
    gen: PolylineGenerator,
    prefix: np.ndarray,
    cond: GeneratorCondition,
    features: BEVFeatureGrid,
) -> Tensor:
    """
    Next-token logits after a vertex-token prefix.

    Args:
        gen: Generator
        prefix: (E, t) coordinate tokens generated so far (t may be 0)
        cond: Prompts for the E elements
        features: BEV features

    Returns:
        (E, V + 1) logits
    """
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim == 1:
        prefix = np.tile(prefix, (cond.num, 1))
    if prefix.shape[0] != cond.num:
        raise ShapeError(f"{prefix.shape[0]} prefixes for {cond.num} conditions")
    gen.check_prefix(prefix)
    ids = np.concatenate([cond.prompt, prefix], axis=1)
    logits = gen(ids, features, cond.scene_index)
    return logits[:, ids.shape[1] - 1]


def _token_array(seq) -> np.ndarray:
    tokens = seq.tokens if isinstance(seq, VertexTokenSeq) else seq
    return np.asarray(tokens, dtype=np.int64)


def teacher_forced_nll(
    gen: PolylineGenerator,
    cond: GeneratorCondition,
    targets: Sequence[VertexTokenSeq],
    features: BEVFeatureGrid,
    inputs: Optional[Sequence[Sequence[int]]] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Mean over elements of the per-token NLL of each target sequence.

    Args:
        gen: Generator
        cond: Prompts, one per target
        targets: Target token sequences (ending with EOS)
        features: BEV features
        inputs: Optional input token sequences replacing the targets as
            teacher-forced inputs (same lengths, used for noise augmentation)
        rng: Dropout generator

    Returns:
        Scalar loss
    """
    if len(targets) != cond.num:
        raise ShapeError(f"{len(targets)} targets for {cond.num} conditions")
    if not targets:
        return T.as_tensor(0.0)
    tgt = [_token_array(t) for t in targets]
    src = tgt if inputs is None else [_token_array(s) for s in inputs]
    if any(len(a) != len(b) for a, b in zip(src, tgt)):
        raise ShapeError("augmented inputs must match target lengths")

    e, t_max, p = len(tgt), max(len(t) for t in tgt), cond.prompt_len
    ids = np.full((e, p + t_max - 1), gen.eos_id, dtype=np.int64)
    target_ids = np.zeros((e, t_max), dtype=np.int64)
    weights = np.zeros((e, t_max), dtype=np.float64)
    ids[:, :p] = cond.prompt
    for i, (s, t) in enumerate(zip(src, tgt)):
        ids[i, p : p + len(s) - 1] = s[:-1]
        target_ids[i, : len(t)] = t
        weights[i, : len(t)] = 1.0 / len(t)

    logits = gen(ids, features, cond.scene_index, rng)
    logits = logits[:, p - 1 :]
    nll = T.cross_entropy(logits, target_ids, weights, reduction="none")
    return T.div(T.tsum(nll), float(e))


class DecodeMode(str, Enum):
    GREEDY = "greedy"
    SAMPLE = "sample"


@dataclass(frozen=True)
class DecodeResult:
    """One decoded sequence; `overflow` marks a forced EOS at the length limit."""

    tokens: VertexTokenSeq
    overflow: bool

    @property
    def degenerate(self) -> bool:
        """Fewer than two vertices: no polyline can be built."""
        return self.tokens.num_vertices < 2


def _allowed_mask(gen: PolylineGenerator, step: int) -> np.ndarray:
    allowed = np.zeros(gen.vocab_out, dtype=bool)
    if step % 2 == 0:
        allowed[: gen.grid.width_cells] = True
        allowed[gen.eos_id] = True
    else:
        allowed[: gen.grid.height_cells] = True
    return allowed


def decode_polyline(
    gen: PolylineGenerator,
    cond: GeneratorCondition,
    features: BEVFeatureGrid,
    mode: DecodeMode = DecodeMode.GREEDY,
    max_len: Optional[int] = None,
    temperature: float = 1.0,
    rng: Optional[np.random.Generator] = None,
) -> List[DecodeResult]:
    """
    Decode all elements in lockstep until EOS or the length limit.

    x slots may emit a bin below W or EOS; y slots a bin below H. When the
    limit is reached without EOS the coordinates are cut to whole vertices,
    EOS is appended and the result is flagged.

    Args:
        gen: Generator
        cond: Prompts
        features: BEV features
        mode: GREEDY (argmax) or SAMPLE (softmax at `temperature`)
        max_len: Token limit including EOS (default 2 * N_v_max + 1)
        temperature: Sampling temperature (> 0)
        rng: Generator for SAMPLE mode

    Returns:
        One DecodeResult per element, in condition order
    """
    mode = DecodeMode(mode)
    max_len = gen.max_len if max_len is None else min(int(max_len), gen.max_len)
    if max_len < 1:
        raise ValueError(f"max_len must be positive, got {max_len}")
    if mode is DecodeMode.SAMPLE:
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        rng = rng or np.random.default_rng(0)

    e = cond.num
    prefix = np.zeros((e, 0), dtype=np.int64)
    done = np.zeros(e, dtype=bool)
    lengths = np.zeros(e, dtype=np.int64)

    with no_grad():
        for step in range(max_len - 1):
            if done.all():
                break
            logits = generator_step(gen, prefix, cond, features).data
            logits = np.where(_allowed_mask(gen, step)[None, :], logits, MASK_VALUE)
            if mode is DecodeMode.GREEDY:
                nxt = logits.argmax(axis=-1)
            else:
                scaled = logits / temperature
                probs = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
                probs /= probs.sum(axis=-1, keepdims=True)
                nxt = np.array([rng.choice(gen.vocab_out, p=row) for row in probs])
            finished_now = (~done) & (nxt == gen.eos_id)
            lengths[finished_now] = step
            done |= finished_now
            # finished rows keep a harmless filler token; they are cut by `lengths`
            nxt = np.where(done, 0, nxt)
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)

    results = []
    for i in range(e):
        overflow = not done[i]
        n = prefix.shape[1] if overflow else lengths[i]
        n -= n % 2
        coords = tuple(int(t) for t in prefix[i, :n])
        seq = VertexTokenSeq(tokens=coords + (gen.eos_id,), eos_id=gen.eos_id)
        results.append(DecodeResult(tokens=seq, overflow=overflow))
    n_overflow = sum(r.overflow for r in results)
    if n_overflow:
        logger.debug(f"{n_overflow}/{e} sequences hit the length limit {max_len}")
    return results
