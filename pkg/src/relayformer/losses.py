"""BCE + edge loss for training, F1 and IoU for evaluation."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from relayformer.errors import ContractError, ShapeError
from relayformer.numerics import Tensor

BCE_EPS = 1e-7
EDGE_LAMBDA = 20.0
EDGE_WIDTH = 7


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def bce_loss(probs: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy of probabilities clamped to ``[eps, 1 - eps]``."""
    target = _as_tensor(target, probs)
    if probs.shape != target.shape:
        raise ShapeError(f"prediction {probs.shape} and target {target.shape} differ")
    p = probs.clip(eps, 1.0 - eps)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


def _morph(mask: np.ndarray, w: int, op) -> np.ndarray:
    k = 2 * w + 1
    pad = [(0, 0)] * (mask.ndim - 2) + [(w, w), (w, w)]
    padded = np.pad(mask, pad, constant_values=0)
    windows = sliding_window_view(padded, (k, k), axis=(-2, -1))
    return op(windows, axis=(-2, -1))


def dilate(mask: np.ndarray, w: int) -> np.ndarray:
    return _morph(mask.astype(np.uint8), w, np.max)


def erode(mask: np.ndarray, w: int) -> np.ndarray:
    """Square erosion; pixels outside the map count as background."""
    return _morph(mask.astype(np.uint8), w, np.min)


def edge_mask_from_gt(mask, w: int = EDGE_WIDTH) -> np.ndarray:
    """Boundary band ``dilate(M, w) XOR erode(M, w)`` over the last two axes."""
    if w < 1:
        raise ContractError(f"edge width must be >= 1, got {w}")
    m = np.asarray(mask) > 0
    if not m.any():
        return np.zeros(m.shape, dtype=np.uint8)
    return (dilate(m, w) ^ erode(m, w)).astype(np.uint8)


def combined_loss(probs: Tensor, target, edge_mask, lam: float = EDGE_LAMBDA) -> Tensor:
    """``BCE(P, M) + lam * BCE(P * M_e, M * M_e)``, both averaged over the full map."""
    if lam < 0:
        raise ContractError("edge weight must be non-negative")
    target = _as_tensor(target, probs)
    edge = _as_tensor(edge_mask, probs)
    if not probs.shape == target.shape == edge.shape:
        raise ShapeError("prediction, target and edge mask must share a shape")
    loss = bce_loss(probs, target)
    if lam == 0:
        return loss
    return loss + bce_loss(probs * edge, target * edge) * lam


def confusion(pred_bin, target) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) pixel counts."""
    p = np.asarray(pred_bin).astype(bool)
    m = np.asarray(target).astype(bool)
    if p.shape != m.shape:
        raise ShapeError(f"prediction {p.shape} and target {m.shape} differ")
    tp = int(np.count_nonzero(p & m))
    fp = int(np.count_nonzero(p & ~m))
    fn = int(np.count_nonzero(~p & m))
    return tp, fp, fn, p.size - tp - fp - fn


def f1_at_threshold(probs, target, tau: float = 0.5) -> float:
    """Pixel F1 after binarizing at ``tau``; 0 when there is nothing to score."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs) >= tau
    tp, fp, fn, _ = confusion(p, target)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def iou(pred_bin, target, empty: float = 1.0) -> float:
    """|P & M| / |P | M|; ``empty`` is returned when both masks are empty."""
    tp, fp, fn, _ = confusion(pred_bin, target)
    union = tp + fp + fn
    return tp / union if union else empty
