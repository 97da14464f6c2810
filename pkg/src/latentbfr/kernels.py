"""Hot loops with a compiled backend and a numpy fallback.

The backend is picked once at import. Set ``LATENTBFR_PURE_PYTHON=1`` to force the
fallback. Both backends return bit-identical results.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _fallback

_backends: dict[str, ModuleType] = {"python": _fallback}
try:
    from . import _ckernels

    _backends["cython"] = _ckernels
except ImportError:  # extension not built
    pass

if os.environ.get("LATENTBFR_PURE_PYTHON") == "1" or "cython" not in _backends:
    BACKEND = "python"
else:
    BACKEND = "cython"


def available_backends() -> list[str]:
    return sorted(_backends)


def _impl(backend: str | None) -> ModuleType:
    name = backend or BACKEND
    try:
        return _backends[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}") from None


def dct_basis() -> np.ndarray:
    """Orthonormal 8x8 DCT-II matrix, rows indexed by frequency."""
    u = np.arange(8)[:, None]
    x = np.arange(8)[None, :]
    a = np.where(u == 0, np.sqrt(1.0 / 8.0), np.sqrt(2.0 / 8.0))
    return np.ascontiguousarray(a * np.cos((2 * x + 1) * u * np.pi / 16.0))


_BASIS = dct_basis()


def nearest_code(z: np.ndarray, codebook: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Exhaustive nearest-neighbour search under squared L2.

    Args:
        z: (N, d) query vectors.
        codebook: (K, d) entries.
        backend: force "cython" or "python"; default is the import-time choice.

    Returns:
        int64 array of shape (N,). Ties go to the lowest index.
    """
    z = np.ascontiguousarray(z, dtype=np.float64)
    codebook = np.ascontiguousarray(codebook, dtype=np.float64)
    if z.ndim != 2 or codebook.ndim != 2 or z.shape[1] != codebook.shape[1]:
        raise ValueError(f"dimension mismatch: z {z.shape} vs codebook {codebook.shape}")
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    return _impl(backend).nearest_code(z, codebook)


def block_dct_quantize(planes: np.ndarray, steps: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Round-trip (C, H, W) planes through a quantized 8x8 block DCT.

    H and W must be multiples of 8. ``steps`` holds one (8, 8) quantizer step table per plane.
    """
    planes = np.ascontiguousarray(planes, dtype=np.float64)
    steps = np.ascontiguousarray(steps, dtype=np.float64)
    if np.any(steps <= 0):
        raise ValueError("quantizer steps must be positive")
    return _impl(backend).block_dct_quantize(planes, steps, _BASIS)
