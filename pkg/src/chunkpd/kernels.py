"""Backend selection for the bilinear sampling kernels.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementation in ``_pykernels`` is used. Set ``CHUNKPD_KERNELS=python``
to force the fallback. Both backends return identical float32 arrays.
"""

from __future__ import annotations

import os

import numpy as np

from chunkpd import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CHUNKPD_KERNELS", "").lower() != "python":
    try:
        from chunkpd import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _as_hwc32(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img, dtype=np.float32)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return _impl.bilinear_resize(_as_hwc32(img), int(out_h), int(out_w))


def rotate_bilinear(img: np.ndarray, cos_t: float, sin_t: float, fill: float = 1.0) -> np.ndarray:
    return _impl.rotate_bilinear(_as_hwc32(img), float(cos_t), float(sin_t), float(fill))
