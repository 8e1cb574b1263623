"""Array kernels shared by the rest of the package.

Tensors are plain float64 numpy arrays; label maps are integer arrays.
Spatial layouts are always ``[..., H, W, C]``.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable

import numpy as np

MAGIC = b"CLT1"


class NumericalError(RuntimeError):
    """Raised when a computation produces NaN or Inf."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, with max-subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise ValueError("softmax needs a non-empty last axis")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_divisible(h: int, w: int, factor: int) -> None:
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if h % factor or w % factor:
        raise ValueError(f"spatial shape {h}x{w} not divisible by {factor}")


def downsample_mean(x: np.ndarray, factor: int, spatial_axis: int = 0) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks.

    ``spatial_axis`` is the index of the H axis; W follows it.
    """
    x = np.asarray(x, dtype=np.float64)
    a = spatial_axis % x.ndim
    h, w = x.shape[a], x.shape[a + 1]
    _check_divisible(h, w, factor)
    shape = x.shape[:a] + (h // factor, factor, w // factor, factor) + x.shape[a + 2:]
    return x.reshape(shape).mean(axis=(a + 1, a + 3))


def block_sum(x: np.ndarray, factor: int, spatial_axis: int = 0) -> np.ndarray:
    """Sum non-overlapping blocks; the adjoint of :func:`upsample_nearest`."""
    a = spatial_axis % x.ndim
    h, w = x.shape[a], x.shape[a + 1]
    _check_divisible(h, w, factor)
    shape = x.shape[:a] + (h // factor, factor, w // factor, factor) + x.shape[a + 2:]
    return x.reshape(shape).sum(axis=(a + 1, a + 3))


def downsample_label_center(y: np.ndarray, factor: int, spatial_axis: int = 0) -> np.ndarray:
    """Pick the label at pixel ``(h*P + P//2, w*P + P//2)`` of every block."""
    y = np.asarray(y)
    a = spatial_axis % y.ndim
    h, w = y.shape[a], y.shape[a + 1]
    _check_divisible(h, w, factor)
    c = factor // 2
    idx = (slice(None),) * a + (slice(c, None, factor), slice(c, None, factor))
    return y[idx].copy()


def upsample_nearest(x: np.ndarray, factor: int, spatial_axis: int = 0) -> np.ndarray:
    """Replicate every cell over a ``factor x factor`` block."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    a = spatial_axis % x.ndim
    return np.repeat(np.repeat(x, factor, axis=a), factor, axis=a + 1)


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], float],
    analytic_grad: np.ndarray,
    params: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between ``analytic_grad`` and central differences.

    Per coordinate: ``|fd - an| / max(1e-8, |fd| + |an|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = np.array(params, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != params.shape:
        raise ValueError(f"gradient shape {analytic_grad.shape} != params shape {params.shape}")
    flat = params.reshape(-1)
    an = analytic_grad.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn(params))
        flat[i] = orig - eps
        down = float(loss_fn(params))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"non-finite loss at coordinate {i}")
        fd = (up - down) / (2 * eps)
        err = abs(fd - an[i]) / max(1e-8, abs(fd) + abs(an[i]))
        worst = max(worst, err)
    return worst


def assert_finite(x: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{what} contains NaN or Inf")


def save_tensor(path: str | Path, x: np.ndarray) -> None:
    """Write ``x`` in the CLT1 container: magic, u32 rank, u64 dims, f64 data (all LE)."""
    x = np.ascontiguousarray(x, dtype="<f8")
    header = MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)
    Path(path).write_bytes(header + x.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}Q", raw, 8)
    offset = 8 + 8 * rank
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != 8 * n:
        raise ValueError(f"{path}: payload has {len(raw) - offset} bytes, expected {8 * n}")
    return np.frombuffer(raw, dtype="<f8", offset=offset, count=n).reshape(shape).astype(np.float64)
