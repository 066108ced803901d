"""Dense tensor primitives: multi-channel "same" convolution, its adjoint,
filter gradients and the soft-thresholding prox.

Conventions
-----------
Images and feature stacks are numpy arrays of shape ``(H, W, C)`` or, for
batches, ``(B, H, W, C)``.  A filter bank is an array of shape
``(k, s, s, c_in)``: ``k`` filters, each ``s x s`` over ``c_in`` channels.

``conv_same`` is a zero-padded cross-correlation mapping ``c_in -> k``
channels with the anchor at ``(s - 1) // 2``.  ``adjoint_conv`` is its exact
transpose (``k -> c_in``), which is a true convolution; it is the synthesis
operator ``sum_k d_k * u_k`` of a dictionary stored as a bank.

The sliding-window arithmetic is delegated to torch's CPU conv kernels (no
autograd is involved; gradients are derived by hand elsewhere).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "ContractError",
    "set_precision",
    "get_dtype",
    "conv_same",
    "adjoint_conv",
    "conv_filter_grad",
    "soft_threshold",
    "add",
    "sub",
    "scale",
    "l1_norm",
    "sq_l2_norm",
    "inner",
]


class ContractError(ValueError):
    """Raised when an operation's preconditions (shapes, signs) are violated."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32


def set_precision(precision: str) -> None:
    """Set the process-wide floating point precision, ``"f32"`` or ``"f64"``."""
    global _dtype
    try:
        _dtype = _DTYPES[precision]
    except KeyError:
        raise ContractError(f"unknown precision {precision!r}") from None


def get_dtype():
    return _dtype


def _anchor(s: int) -> int:
    return (s - 1) // 2


def _check_bank(bank: np.ndarray) -> None:
    if bank.ndim != 4 or bank.shape[1] != bank.shape[2]:
        raise ContractError(f"filter bank must have shape (k, s, s, c_in), got {bank.shape}")


def _to_torch(t: np.ndarray, dtype) -> tuple[torch.Tensor, bool]:
    """NHWC numpy -> NCHW torch view (channels_last strides, no copy)."""
    squeeze = t.ndim == 3
    if squeeze:
        t = t[None]
    elif t.ndim != 4:
        raise ContractError(f"tensor must be (H, W, C) or (B, H, W, C), got {t.shape}")
    t = np.ascontiguousarray(t, dtype=dtype)
    return torch.from_numpy(t).permute(0, 3, 1, 2), squeeze


def _to_numpy(t: torch.Tensor, squeeze: bool) -> np.ndarray:
    out = t.permute(0, 2, 3, 1).numpy()
    return out[0] if squeeze else out


def _bank_to_torch(bank: np.ndarray, dtype) -> torch.Tensor:
    # (k, s, s, c) -> (k, c, s, s)
    return torch.from_numpy(np.ascontiguousarray(bank, dtype=dtype)).permute(0, 3, 1, 2)


def conv_same(bank: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Correlate ``t`` with every filter of ``bank`` under zero "same" padding.

    ``out[..., y, x, k] = sum_{c,i,j} bank[k, i, j, c] * t[..., y+i-a, x+j-a, c]``
    with ``a = (s - 1) // 2``.
    """
    bank = np.asarray(bank)
    t = np.asarray(t)
    _check_bank(bank)
    if t.shape[-1] != bank.shape[3]:
        raise ContractError(
            f"conv_same: tensor has {t.shape[-1]} channels, bank expects {bank.shape[3]}"
        )
    dtype = np.result_type(bank, t)
    s = bank.shape[1]
    a = _anchor(s)
    x, squeeze = _to_torch(t, dtype)
    x = F.pad(x, (a, s - 1 - a, a, s - 1 - a))
    return _to_numpy(F.conv2d(x, _bank_to_torch(bank, dtype)), squeeze)


def adjoint_conv(bank: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`conv_same` for the same bank (``k -> c_in``)."""
    bank = np.asarray(bank)
    r = np.asarray(r)
    _check_bank(bank)
    if r.shape[-1] != bank.shape[0]:
        raise ContractError(
            f"adjoint_conv: tensor has {r.shape[-1]} channels, bank has {bank.shape[0]} filters"
        )
    dtype = np.result_type(bank, r)
    s = bank.shape[1]
    a = _anchor(s)
    x, squeeze = _to_torch(r, dtype)
    h, w = x.shape[2], x.shape[3]
    full = F.conv_transpose2d(x, _bank_to_torch(bank, dtype))
    return _to_numpy(full[:, :, a : a + h, a : a + w], squeeze)


def conv_filter_grad(t: np.ndarray, g: np.ndarray, s: int) -> np.ndarray:
    """Gradient w.r.t. the bank of ``conv_same(bank, t)`` given output grad ``g``.

    Returns an array of shape ``(g.shape[-1], s, s, t.shape[-1])``, summed over
    the batch.  By adjointness, the bank gradient of ``adjoint_conv(bank, r)``
    with output grad ``g`` is ``conv_filter_grad(g, r, s)``.
    """
    t = np.asarray(t)
    g = np.asarray(g)
    if t.shape[:-1] != g.shape[:-1]:
        raise ContractError(f"conv_filter_grad: spatial shapes differ, {t.shape} vs {g.shape}")
    dtype = np.result_type(t, g)
    a = _anchor(s)
    x, _ = _to_torch(t, dtype)
    y, _ = _to_torch(g, dtype)
    x = F.pad(x, (a, s - 1 - a, a, s - 1 - a))
    # batch axis becomes the reduction axis: (C, B, Hp, Wp) * (K, B, H, W) -> (C, K, s, s)
    out = F.conv2d(x.transpose(0, 1), y.transpose(0, 1))
    return out.permute(1, 2, 3, 0).numpy().copy()


def soft_threshold(t: np.ndarray, theta) -> np.ndarray:
    """``sign(t) * max(|t| - theta, 0)``; ``theta`` is a scalar or one value per channel."""
    theta = np.asarray(theta)
    if np.any(theta < 0):
        raise ContractError("soft_threshold: thresholds must be nonnegative")
    t = np.asarray(t)
    theta = theta.astype(t.dtype, copy=False)
    return t - np.clip(t, -theta, theta)


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ContractError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def add(a, b):
    _same_shape(a, b, "add")
    return np.add(a, b)


def sub(a, b):
    _same_shape(a, b, "sub")
    return np.subtract(a, b)


def scale(a, c: float):
    return np.multiply(a, c)


def l1_norm(a) -> float:
    return float(np.abs(a).sum())


def sq_l2_norm(a) -> float:
    a = np.asarray(a)
    return float(np.vdot(a, a))


def inner(a, b) -> float:
    _same_shape(a, b, "inner")
    return float(np.vdot(np.asarray(a), np.asarray(b)))
