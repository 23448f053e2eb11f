"""
Central finite-difference gradient verification.
"""

import logging
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from vecmap.numerics.tensor import Tensor, eval_mode, no_grad

logger = logging.getLogger(__name__)

LossFn = Callable[[], Union[Tensor, float]]


def _value(out: Union[Tensor, float]) -> float:
    return out.item() if isinstance(out, Tensor) else float(out)


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a|, |n|, 1e-8)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_diff_check(
    f: LossFn,
    params: Sequence[Tuple[str, Tensor]],
    eps: float = 1e-5,
    max_coords: Optional[int] = 8,
    min_grad: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare analytic gradients with central differences.

    Coordinates are sampled without looking at the analytic gradient. A
    coordinate is skipped only when both the analytic and the numeric
    gradient are below `min_grad` in magnitude, so a backward rule that
    returns zeros still fails.

    Args:
        f: Zero-argument closure computing a scalar loss from the params' current data
        params: Named parameters to check
        eps: Perturbation size
        max_coords: Coordinates sampled per parameter (None checks all)
        min_grad: Gradient magnitude below which a coordinate is rounding noise
        rng: Generator used for coordinate sampling

    Returns:
        Maximum relative error over the checked coordinates (0.0 when none qualify)
    """
    rng = rng or np.random.default_rng(0)
    worst, worst_at = 0.0, None

    with eval_mode():
        for _, p in params:
            p.zero_grad()
        loss = f()
        loss.backward()
        analytic = {}
        for name, p in params:
            analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

        with no_grad():
            for name, p in params:
                grad = analytic[name].reshape(-1)
                coords = np.arange(grad.size)
                if max_coords is not None and grad.size > max_coords:
                    coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
                p.data = np.ascontiguousarray(p.data)
                flat = p.data.reshape(-1)
                for idx in coords:
                    original = flat[idx]
                    flat[idx] = original + eps
                    plus = _value(f())
                    flat[idx] = original - eps
                    minus = _value(f())
                    flat[idx] = original
                    numeric = (plus - minus) / (2.0 * eps)
                    if max(abs(float(grad[idx])), abs(numeric)) < min_grad:
                        continue
                    err = relative_error(float(grad[idx]), numeric)
                    if err > worst:
                        worst, worst_at = err, (name, int(idx))

    if worst_at is not None:
        logger.debug(f"Worst gradient mismatch {worst:.3e} at {worst_at[0]}[{worst_at[1]}]")
    return worst
