"""Pure numpy versions of the compiled kernels.

Each summation runs in the same order as the C loops, so results agree bit for bit
with ``_ckernels`` on IEEE hardware without fused multiply-add contraction.
"""

import numpy as np

_CHUNK = 4096


def nearest_code(z, codebook):
    n, d = z.shape
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, _CHUNK):
        zc = z[start:start + _CHUNK]
        dist = np.zeros((zc.shape[0], codebook.shape[0]))
        for c in range(d):
            diff = zc[:, c, None] - codebook[None, :, c]
            dist = dist + diff * diff
        out[start:start + _CHUNK] = np.argmin(dist, axis=1)
    return out


def _left(m, blocks):
    # out[..., u, y] = sum_x m[u, x] * blocks[..., x, y]
    acc = np.zeros(blocks.shape)
    for x in range(8):
        acc = acc + m[:, x, None] * blocks[..., x, None, :]
    return acc


def _right(blocks, m):
    # out[..., u, v] = sum_y blocks[..., u, y] * m[v, y]
    acc = np.zeros(blocks.shape)
    for y in range(8):
        acc = acc + blocks[..., :, y, None] * m[None, :, y]
    return acc


def block_dct_quantize(planes, steps, m):
    nc, h, w = planes.shape
    if h % 8 or w % 8:
        raise ValueError("plane size must be a multiple of 8")
    if steps.shape != (nc, 8, 8):
        raise ValueError("steps must be (C, 8, 8)")
    blocks = planes.reshape(nc, h // 8, 8, w // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = _right(_left(m, blocks), m)
    st = steps[:, None, None, :, :]
    coef = np.floor(coef / st + 0.5) * st
    # inverse uses the transposed basis on both sides
    rec = _right(_left(m.T, coef), m.T)
    return np.ascontiguousarray(rec.transpose(0, 1, 3, 2, 4).reshape(nc, h, w))
