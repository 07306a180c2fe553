"""INT2 storage for ternary codes and the packed integer GEMM.

Layout: row-major, four codes per byte, element ``i`` of each group of four
in bits ``[2i, 2i+1]``. Fields are 2-bit two's complement, so ``0b00 = 0``,
``0b01 = +1``, ``0b11 = -1``; ``0b10`` is never valid. Rows are padded to a
byte boundary with ``0b00``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import CorruptWeightsError, InvalidCodeError, OverflowRiskError, ShapeError
from .quant import ACT_QMAX, QuantizedActivations

MAX_INNER_DIM = 2**24

# byte -> its four decoded fields, and whether each field is 0b10
_FIELDS = (np.arange(256, dtype=np.uint16)[:, None] >> (2 * np.arange(4))) & 0b11
_DECODE = np.where(_FIELDS >= 2, _FIELDS.astype(np.int16) - 4, _FIELDS).astype(np.int8)
_INVALID = _FIELDS == 0b10


@dataclass(frozen=True)
class PackedTernaryMatrix:
    rows: int
    cols: int
    data: bytes
    scale: float

    @property
    def row_bytes(self) -> int:
        return packed_row_bytes(self.cols)

    @property
    def nbytes(self) -> int:
        return len(self.data)


def packed_row_bytes(cols: int) -> int:
    return (cols + 3) // 4


def pack_int2(codes, scale: float = 1.0) -> PackedTernaryMatrix:
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[None, :]
    if codes.ndim != 2 or codes.size == 0:
        raise ShapeError(f"expected a non-empty 2-d code matrix, got shape {codes.shape}")
    if not np.all(np.isin(codes, (-1, 0, 1))):
        raise InvalidCodeError("ternary codes must lie in {-1, 0, 1}")
    m, n = codes.shape
    nb = packed_row_bytes(n)
    fields = np.zeros((m, nb * 4), dtype=np.uint8)
    fields[:, :n] = codes.astype(np.int8).view(np.uint8) & 0b11
    fields = fields.reshape(m, nb, 4)
    packed = (fields[..., 0] | (fields[..., 1] << 2) | (fields[..., 2] << 4) | (fields[..., 3] << 6))
    return PackedTernaryMatrix(rows=m, cols=n, data=packed.astype(np.uint8).tobytes(), scale=float(scale))


def unpack_int2(p: PackedTernaryMatrix) -> np.ndarray:
    """Decode to an ``int8`` matrix of shape ``(rows, cols)``."""
    nb = packed_row_bytes(p.cols)
    if p.rows < 1 or p.cols < 1 or len(p.data) != p.rows * nb:
        raise CorruptWeightsError(
            f"packed buffer holds {len(p.data)} bytes, expected {p.rows}x{nb}={p.rows * nb}"
        )
    raw = np.frombuffer(p.data, dtype=np.uint8).reshape(p.rows, nb)
    if np.any(_INVALID[raw].reshape(p.rows, nb * 4)[:, : p.cols]):
        raise CorruptWeightsError("packed buffer contains the invalid 2-bit code 0b10")
    return _DECODE[raw].reshape(p.rows, nb * 4)[:, : p.cols].copy()


def default_workers() -> int:
    env = os.environ.get("MOTE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _row_blocks(m: int, workers: int) -> list[tuple[int, int]]:
    step = -(-m // workers)
    return [(s, min(m, s + step)) for s in range(0, m, step)]


def ternary_gemm_accumulate(
    w: PackedTernaryMatrix, a: QuantizedActivations, workers: int | None = None
) -> np.ndarray:
    """Exact int32 accumulators ``acc[t, r] = sum_j a[t, j] * w[r, j]``.

    Output rows of ``w`` are split across ``workers`` threads; the result does
    not depend on the split.
    """
    k = w.cols
    if a.codes.ndim != 2 or a.codes.shape[1] != k:
        raise ShapeError(f"activation shape {a.codes.shape} does not match weight inner dim {k}")
    if k > MAX_INNER_DIM:
        raise OverflowRiskError(f"inner dim {k} exceeds int32 accumulator bound {MAX_INNER_DIM}")
    wcodes = unpack_int2(w).astype(np.int32)
    acodes = a.codes.astype(np.int32)
    workers = workers or default_workers()
    out = np.empty((acodes.shape[0], w.rows), dtype=np.int32)

    def run(block: tuple[int, int]) -> None:
        lo, hi = block
        out[:, lo:hi] = acodes @ wcodes[lo:hi].T

    blocks = _row_blocks(w.rows, max(1, min(workers, w.rows)))
    if len(blocks) == 1:
        run(blocks[0])
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            list(pool.map(run, blocks))
    return out


def ternary_gemm_packed(
    w: PackedTernaryMatrix, a: QuantizedActivations, workers: int | None = None
) -> np.ndarray:
    """``Y[t, r] = scale * beta_t / 127 * acc[t, r]`` as a ``T x rows`` float matrix."""
    acc = ternary_gemm_accumulate(w, a, workers)
    fused = w.scale * (np.asarray(a.scales, dtype=np.float64) / ACT_QMAX)
    return fused[:, None] * acc
