"""Counter-based random number generation.

Every random matrix in the package is generated row by row from a Philox
generator keyed by (seed, stream, row).  The value of a row depends only on
that key, never on how many rows some worker generated before it, so
row-parallel generation is bit-reproducible across any worker count.
"""
from __future__ import annotations

import numpy as np

# Stream tags keep independent draws (noise, spikes, inits, ...) from colliding
# for the same user seed.  Rows are packed into the low 44 bits of the key.
STREAM_NOISE = 0
STREAM_U = 1
STREAM_W = 2
STREAM_INIT = 3
STREAM_MC = 4
STREAM_CD = 5

_ROW_BITS = 44


def row_generator(seed: int, stream: int, row: int) -> np.random.Generator:
    """Generator for one logical row of one stream of one seed."""
    if row < 0 or row >= (1 << _ROW_BITS):
        raise ValueError(f"row index {row} out of range")
    key = np.array([np.uint64(seed) & np.uint64(0xFFFFFFFFFFFFFFFF),
                    (np.uint64(stream) << np.uint64(_ROW_BITS)) | np.uint64(row)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian_rows(seed: int, stream: int, n_rows: int, n_cols: int) -> np.ndarray:
    """(n_rows, n_cols) standard Gaussians, one Philox key per row."""
    out = np.empty((n_rows, n_cols))
    for i in range(n_rows):
        out[i] = row_generator(seed, stream, i).standard_normal(n_cols)
    return out
