"""Hot numeric kernels behind the image quality metrics.

Two interchangeable paths: numba-jitted loops and vectorized numpy. Both
accumulate in float64 with the same tap order and no fastmath, so their
outputs are bit-identical; set CINESYNTH_NO_NUMBA=1 to force the numpy
path (the flag is read per call, not at import).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_SIGMA = 7.0 / 6.0
_OFFSETS = np.arange(-3, 4, dtype=np.float64)
GAUSS7 = np.exp(-(_OFFSETS**2) / (2.0 * _SIGMA**2))
GAUSS7 = GAUSS7 / GAUSS7.sum()
GAUSS7.setflags(write=False)


def numba_enabled() -> bool:
    return _HAVE_NUMBA and os.environ.get("CINESYNTH_NO_NUMBA", "") != "1"


# ---------------------------------------------------------------------------
# numpy path


def _blur7_axis0_np(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    h = img.shape[0]
    padded = np.pad(img, ((3, 3), (0, 0)), mode="symmetric")
    acc = np.zeros_like(img)
    for k in range(7):
        acc = acc + w[k] * padded[k : k + h, :]
    return acc


def _blur7_axis1_np(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    wid = img.shape[1]
    padded = np.pad(img, ((0, 0), (3, 3)), mode="symmetric")
    acc = np.zeros_like(img)
    for k in range(7):
        acc = acc + w[k] * padded[:, k : k + wid]
    return acc


def _box2_np(img: np.ndarray) -> np.ndarray:
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    a = img[0 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    b = img[1 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    c = img[0 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    d = img[1 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    return (((a + b) + c) + d) * 0.25


# ---------------------------------------------------------------------------
# numba path (same arithmetic order as above)

if _HAVE_NUMBA:

    @njit(cache=True)
    def _blur7_axis0_nb(img, w):  # pragma: no cover - measured via dispatch tests
        h, wid = img.shape
        out = np.empty((h, wid), dtype=np.float64)
        for i in range(h):
            for j in range(wid):
                s = 0.0
                for k in range(7):
                    idx = i + k - 3
                    if idx < 0:
                        idx = -idx - 1
                    elif idx >= h:
                        idx = 2 * h - idx - 1
                    s += w[k] * img[idx, j]
                out[i, j] = s
        return out

    @njit(cache=True)
    def _blur7_axis1_nb(img, w):  # pragma: no cover
        h, wid = img.shape
        out = np.empty((h, wid), dtype=np.float64)
        for i in range(h):
            for j in range(wid):
                s = 0.0
                for k in range(7):
                    idx = j + k - 3
                    if idx < 0:
                        idx = -idx - 1
                    elif idx >= wid:
                        idx = 2 * wid - idx - 1
                    s += w[k] * img[i, idx]
                out[i, j] = s
        return out

    @njit(cache=True)
    def _box2_nb(img):  # pragma: no cover
        h2, w2 = img.shape[0] // 2, img.shape[1] // 2
        out = np.empty((h2, w2), dtype=np.float64)
        for i in range(h2):
            for j in range(w2):
                out[i, j] = (
                    ((img[2 * i, 2 * j] + img[2 * i + 1, 2 * j]) + img[2 * i, 2 * j + 1])
                    + img[2 * i + 1, 2 * j + 1]
                ) * 0.25
        return out


# ---------------------------------------------------------------------------
# dispatch


def blur7(img: np.ndarray) -> np.ndarray:
    """Separable 7-tap Gaussian (sigma 7/6), symmetric border, vertical first."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    if numba_enabled():
        return _blur7_axis1_nb(_blur7_axis0_nb(img, GAUSS7), GAUSS7)
    return _blur7_axis1_np(_blur7_axis0_np(img, GAUSS7), GAUSS7)


def box2(img: np.ndarray) -> np.ndarray:
    """2x2 box downsample; odd trailing row/column is dropped."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    if numba_enabled():
        return _box2_nb(img)
    return _box2_np(img)
