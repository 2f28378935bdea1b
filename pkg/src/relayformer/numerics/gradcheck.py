"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from relayformer.numerics.tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Sup-norm relative error ``max|a-n| / max(max|a|, max|n|, floor)``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(
    fn: Callable[[], Tensor],
    t: Tensor,
    h: float = 1e-5,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t``.

    Only ``indices`` (flat positions) are probed when given; other entries
    are left at zero.
    """
    flat = t.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    probe = range(flat.size) if indices is None else indices
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data.sum())
            flat[i] = orig - h
            down = float(fn().data.sum())
            flat[i] = orig
            out[i] = (up - down) / (2.0 * h)
    return out.reshape(t.shape)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: dict[str, Tensor] | list[Tensor],
    h: float = 1e-5,
    max_probes: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-input relative error between backward and central differences.

    ``max_probes`` limits the number of entries probed per tensor (chosen
    with a seeded generator); gradients are compared on those entries only.
    Each tensor's error is scaled by at least 1e-3 of the largest gradient
    over all inputs, so gradients that vanish identically (for example a key
    bias under softmax shift invariance) are judged against the overall
    gradient magnitude instead of finite-difference round-off.
    """
    named = inputs if isinstance(inputs, dict) else {str(i): t for i, t in enumerate(inputs)}
    for t in named.values():
        t.grad = None
    fn().backward()
    rng = np.random.default_rng(seed)
    pairs = {}
    for name, t in named.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        idx = None
        if max_probes is not None and t.size > max_probes:
            idx = np.sort(rng.choice(t.size, size=max_probes, replace=False))
        numeric = numeric_grad(fn, t, h=h, indices=idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        pairs[name] = (analytic, numeric)
    overall = max((np.abs(a).max(initial=0.0) for a, _ in pairs.values()), default=0.0)
    floor = max(1e-3 * overall, 1e-12)
    return {name: relative_error(a, n, floor) for name, (a, n) in pairs.items()}
