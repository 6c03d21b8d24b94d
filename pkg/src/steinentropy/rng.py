"""Counter-based Gaussian streams.

Every draw is addressed by ``(seed, stream, block)``; a block of
``BLOCK_ROWS`` rows is produced by a Philox generator keyed on that triple,
so any row range can be regenerated independently and in any order.
"""

from __future__ import annotations

import numpy as np

BLOCK_ROWS = 4096

# stream identifiers used across the package
STREAM_CHAOS = 0
STREAM_SMOOTHING = 1
STREAM_OU_COPY = 2
STREAM_DICTIONARY = 3


def derive_seed(seed: int, *labels: int) -> int:
    """Deterministic 64-bit child seed for ``labels`` (e.g. sequence index)."""
    ss = np.random.SeedSequence(entropy=int(seed) % 2**64, spawn_key=tuple(int(x) for x in labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _block_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    key = np.array([int(seed) % 2**64, (int(stream) << 40) | int(block)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian_rows(seed: int, stream: int, rows: int, cols: int, start: int = 0) -> np.ndarray:
    """Rows ``start .. start+rows-1`` of the standard Gaussian matrix for ``(seed, stream)``.

    The result depends only on the row indices and ``cols``; slicing a large
    request gives the same numbers as asking for the slice directly.
    """
    if rows < 0 or start < 0:
        raise ValueError("rows and start must be nonnegative")
    out = np.empty((rows, cols), dtype=float)
    if rows == 0:
        return out
    first = start // BLOCK_ROWS
    last = (start + rows - 1) // BLOCK_ROWS
    pos = 0
    for b in range(first, last + 1):
        block = _block_generator(seed, stream, b).standard_normal((BLOCK_ROWS, cols))
        lo = max(start, b * BLOCK_ROWS) - b * BLOCK_ROWS
        hi = min(start + rows, (b + 1) * BLOCK_ROWS) - b * BLOCK_ROWS
        out[pos:pos + hi - lo] = block[lo:hi]
        pos += hi - lo
    return out


def uniform_rows(seed: int, stream: int, rows: int, cols: int) -> np.ndarray:
    """Uniform(0,1) analogue of :func:`gaussian_rows` (starting at row 0)."""
    out = np.empty((rows, cols), dtype=float)
    for b in range(0, (rows + BLOCK_ROWS - 1) // BLOCK_ROWS):
        block = _block_generator(seed, stream, b).random((BLOCK_ROWS, cols))
        n = min(BLOCK_ROWS, rows - b * BLOCK_ROWS)
        out[b * BLOCK_ROWS:b * BLOCK_ROWS + n] = block[:n]
    return out
