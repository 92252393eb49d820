"""Central finite differences, used as an independent oracle for analytic gradients."""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5,
                   indices: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64).

    With ``indices`` only those flat coordinates are probed; the result then has
    one entry per index.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else list(indices)
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    out = np.array(out)
    return out.reshape(x.shape) if indices is None else out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
