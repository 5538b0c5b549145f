"""Foreground/background partition of a volume.

Foreground is the largest 26-connected component of the Otsu-thresholded
volume after one 3x3x3 binary closing. Background is the complement of the
foreground dilated by one voxel, so a one-voxel guard band belongs to
neither region.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume_io import Volume

OTSU_BINS = 256
_CUBE = np.ones((3, 3, 3), dtype=bool)


class DegenerateVolume(ValueError):
    pass


def otsu_bin(values: np.ndarray, nbins: int = OTSU_BINS) -> tuple[np.ndarray, int]:
    """Return per-value histogram bin indices and the Otsu split bin.

    Values with bin index ``> split`` are foreground. Bins are spread over
    ``[min, max]`` so the split transforms with any positive affine rescaling.
    Ties in between-class variance go to the lowest split.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        raise DegenerateVolume("constant intensity, Otsu threshold undefined")
    idx = np.floor((values - lo) / (hi - lo) * nbins).astype(np.int64)
    np.clip(idx, 0, nbins - 1, out=idx)
    hist = np.bincount(idx, minlength=nbins).astype(np.float64)
    centers = np.arange(nbins, dtype=np.float64)

    w0 = np.cumsum(hist)[:-1]
    w1 = hist.sum() - w0
    s0 = np.cumsum(hist * centers)[:-1]
    m0 = np.divide(s0, w0, out=np.zeros_like(s0), where=w0 > 0)
    m1 = np.divide(s0[-1] + hist[-1] * centers[-1] - s0, w1, out=np.zeros_like(s0), where=w1 > 0)
    between = w0 * w1 * (m0 - m1) ** 2
    # bin-index space keeps the criterion exact under a*I + b
    return idx, int(np.argmax(between))


def foreground_mask(v: Volume) -> np.ndarray:
    data = np.asarray(v.data)
    idx, split = otsu_bin(data)
    binary = (idx > split).reshape(data.shape)

    labels, n = ndimage.label(binary, structure=_CUBE)
    if n == 0:
        raise DegenerateVolume("Otsu threshold leaves no foreground")
    sizes = np.bincount(labels.ravel())[1:]
    largest = labels == (int(np.argmax(sizes)) + 1)
    closed = ndimage.binary_closing(largest, structure=_CUBE, iterations=1)
    # closing cannot drop voxels of the component itself
    return closed | largest


def background_mask(v: Volume, fg: np.ndarray) -> np.ndarray:
    fg = np.asarray(fg, dtype=bool)
    if fg.shape != v.dims:
        raise ValueError(f"mask shape {fg.shape} != volume dims {v.dims}")
    return ~ndimage.binary_dilation(fg, structure=_CUBE, iterations=1)


def guard_band(fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    return ~(np.asarray(fg, bool) | np.asarray(bg, bool))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * float(np.logical_and(a, b).sum()) / float(denom)
