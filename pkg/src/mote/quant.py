"""Weight and activation quantizers.

Two flavours live here. The numpy functions return integer codes plus
scales and back the packed inference path, PTQ and checkpoints. The
``fake_*`` torch functions return dequantized tensors with a
straight-through gradient and are what the model uses during QAT. Both
share the same rounding rule (half away from zero) and epsilon clamp.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from .errors import InvalidInputError, UnsupportedBitWidthError

EPS = 1e-5
ACT_QMAX = 127
ACT_QMIN = -128


@dataclass(frozen=True)
class QuantizedWeights:
    """Per-tensor quantized weight matrix: ``W ~= scale * codes``."""

    codes: np.ndarray  # int8, values in {-1, 0, 1} or {-1, 1}
    scale: float
    kind: str = "ternary"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


@dataclass(frozen=True)
class QuantizedActivations:
    """Per-token int8 activations: row ``t`` is ``scales[t] / 127 * codes[t]``."""

    codes: np.ndarray  # int8, T x d
    scales: np.ndarray  # float, (T,)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def _as_float_array(x, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise InvalidInputError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInputError("empty input")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("input contains non-finite values")
    return arr


def round_half_away(x):
    """Round to nearest integer, ties away from zero. Works on scalars and arrays."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def round_clip(x, a, b):
    """``max(a, min(b, round(x)))`` with half-away-from-zero rounding."""
    if a > b:
        raise InvalidInputError(f"round_clip bounds reversed: a={a} > b={b}")
    r = np.maximum(a, np.minimum(b, round_half_away(x)))
    if np.ndim(r) == 0:
        return float(r)
    return r


def quantize_weights_ternary(w) -> QuantizedWeights:
    """Absmean ternary quantization with a single per-tensor scale."""
    w = _as_float_array(w, ndim=2)
    scale = max(np.abs(w).mean(), w.dtype.type(EPS))
    codes = round_clip(w / scale, -1, 1).astype(np.int8)
    return QuantizedWeights(codes=codes, scale=float(scale), kind="ternary")


def quantize_weights_binary_bwn(w) -> QuantizedWeights:
    """Binary weights ``scale * sign(W)`` with ``sign(0) = +1``."""
    w = _as_float_array(w, ndim=2)
    scale = max(np.abs(w).mean(), w.dtype.type(EPS))
    codes = np.where(w >= 0, 1, -1).astype(np.int8)
    return QuantizedWeights(codes=codes, scale=float(scale), kind="binary")


def quantize_activations_int8(x) -> QuantizedActivations:
    """Per-token absmax quantization to int8."""
    x = _as_float_array(x, ndim=2)
    beta = np.maximum(np.abs(x).max(axis=1), x.dtype.type(EPS))
    codes = round_clip(ACT_QMAX * x / beta[:, None], ACT_QMIN, ACT_QMAX).astype(np.int8)
    return QuantizedActivations(codes=codes, scales=beta)


def rtn_quantize(w, bits: int, scale_dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-output-channel round-to-nearest.

    Rows of ``w`` are output channels. Returns ``(codes, scales)`` with
    ``codes`` int8 and ``scales`` of shape ``(rows,)``; every element
    satisfies ``|w - scale * code| <= scale / 2``.

    ``scale_dtype`` rounds the scales to a storage dtype before the codes are
    chosen, so the bound holds for the scales actually stored.
    """
    if bits not in (4, 8):
        raise UnsupportedBitWidthError(f"RTN supports 4 or 8 bits, got {bits}")
    w = _as_float_array(w, ndim=2)
    qmax = 2 ** (bits - 1) - 1
    scales = np.maximum(np.abs(w).max(axis=1) / qmax, w.dtype.type(EPS))
    if scale_dtype is not None:
        scales = scales.astype(scale_dtype)
    codes = round_clip(w / scales.astype(w.dtype)[:, None], -qmax - 1, qmax).astype(np.int8)
    return codes, scales


def rtn_dequantize(codes: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return scales[:, None] * codes.astype(scales.dtype)


def dequantize(q: Union[QuantizedWeights, QuantizedActivations]) -> np.ndarray:
    if isinstance(q, QuantizedWeights):
        return q.scale * q.codes.astype(np.float64)
    if isinstance(q, QuantizedActivations):
        return (q.scales[:, None] / ACT_QMAX) * q.codes.astype(q.scales.dtype)
    raise InvalidInputError(f"cannot dequantize {type(q).__name__}")


# --- torch fake quantization (training path) -------------------------------


def _round_half_away_t(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def _ste(x: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    # forward value q, gradient of identity
    return x + (q - x).detach()


def ternary_weight_values(w: torch.Tensor) -> torch.Tensor:
    scale = w.detach().abs().mean().clamp(min=EPS)
    return _round_half_away_t(w.detach() / scale).clamp(-1, 1) * scale


def binary_weight_values(w: torch.Tensor) -> torch.Tensor:
    scale = w.detach().abs().mean().clamp(min=EPS)
    return torch.where(w.detach() >= 0, 1.0, -1.0).to(w.dtype) * scale


def int8_activation_values(x: torch.Tensor) -> torch.Tensor:
    beta = x.detach().abs().amax(dim=-1, keepdim=True).clamp(min=EPS)
    codes = _round_half_away_t(ACT_QMAX * x.detach() / beta).clamp(ACT_QMIN, ACT_QMAX)
    return codes * (beta / ACT_QMAX)


def fake_quant_ternary(w: torch.Tensor) -> torch.Tensor:
    return _ste(w, ternary_weight_values(w))


def fake_quant_binary(w: torch.Tensor) -> torch.Tensor:
    return _ste(w, binary_weight_values(w))


def fake_quant_int8(x: torch.Tensor) -> torch.Tensor:
    return _ste(x, int8_activation_values(x))
