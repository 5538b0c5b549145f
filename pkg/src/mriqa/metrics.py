"""Fifteen MRQy-style quality indicators computed from a volume and its masks.

Formula ledger (F foreground, B background, P patch, BP background patch)::

    mean  = mu_F                    rng  = max_F - min_F
    var   = sigma_F^2               cv   = |sigma_F / mu_F|
    cpp   = mean |3x3 high-pass| over in-plane foreground voxels
    psnr  = 10 log10(max_F^2 / MSE(I, median3(I))) over F
    snr1  = mu_F / sigma_B          snr2 = mu_P / sigma_B
    snr3  = mu_P / sigma_P          snr4 = mu_P / sigma_BP
    cnr   = |mu_P - mu_BP| / sigma_BP
    cvp   = |sigma_P / mu_P|        cjv  = (sigma_F + sigma_B) / |mu_F - mu_B|
    efc   = normalized entropy focus criterion of |I|
    fber  = median(F^2) / median(B^2)

P is the 5x5x5 cube (clipped to the volume) around the foreground centroid,
restricted to foreground voxels. BP is the 5x5x5 corner cube, restricted to
background voxels, taken from the first of the eight corners that holds at
least two background voxels. Standard deviations are population (ddof=0).
Neighbourhood filters replicate edge voxels at the volume border.

These definitions reconstruct MRQy's; exact numerical parity with MRQy is
not a goal.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from .volume_io import Volume

PATCH = 5
METRIC_NAMES = (
    "mean", "rng", "var", "cv", "cpp", "psnr",
    "snr1", "snr2", "snr3", "snr4", "cnr", "cvp", "cjv", "efc", "fber",
)
SCALE_INVARIANT = ("snr1", "snr2", "snr3", "snr4", "cnr", "cv", "cvp", "cjv", "efc", "fber")

HIGH_PASS = np.array([[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]], dtype=np.float64)


class EmptyRegion(ValueError):
    pass


class AllZeroVolume(ValueError):
    pass


class UndefinedMetric(ArithmeticError):
    def __init__(self, name: str, cause: str):
        super().__init__(f"{name}: {cause}")
        self.name = name
        self.cause = cause


@dataclass(frozen=True)
class FgBgStats:
    mu_F: float
    sigma_F: float
    mu_B: float
    sigma_B: float
    n_F: int
    n_B: int
    max_F: float
    min_F: float


@dataclass(frozen=True)
class QualityMetrics:
    """The 15 indicators. Undefined entries are NaN and listed in ``undefined``."""

    mean: float
    rng: float
    var: float
    cv: float
    cpp: float
    psnr: float
    snr1: float
    snr2: float
    snr3: float
    snr4: float
    cnr: float
    cvp: float
    cjv: float
    efc: float
    fber: float
    undefined: dict[str, str] = field(default_factory=dict, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def is_defined(self, name: str) -> bool:
        return name not in self.undefined and math.isfinite(getattr(self, name))

    def to_json(self) -> dict:
        out = {n: (None if not self.is_defined(n) else float(getattr(self, n))) for n in METRIC_NAMES}
        out["undefined"] = dict(sorted(self.undefined.items()))
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "QualityMetrics":
        vals = {n: (math.nan if obj.get(n) is None else float(obj[n])) for n in METRIC_NAMES}
        return cls(**vals, undefined=dict(obj.get("undefined", {})))


assert len(METRIC_NAMES) == 15 == len([f for f in fields(QualityMetrics) if f.name != "undefined"])


def _region(data: np.ndarray, mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != data.shape:
        raise ValueError(f"{name} mask shape {mask.shape} != data shape {data.shape}")
    vals = data[mask].astype(np.float64)
    if vals.size == 0:
        raise EmptyRegion(f"{name} region is empty")
    return vals


def fg_bg_stats(v: Volume, fg: np.ndarray, bg: np.ndarray) -> FgBgStats:
    data = np.asarray(v.data)
    f = _region(data, fg, "foreground")
    b = _region(data, bg, "background")
    return FgBgStats(
        mu_F=float(f.mean()), sigma_F=float(f.std()),
        mu_B=float(b.mean()), sigma_B=float(b.std()),
        n_F=int(f.size), n_B=int(b.size),
        max_F=float(f.max()), min_F=float(f.min()),
    )


def efc(v: Volume | np.ndarray) -> float:
    """Entropy focus criterion of the absolute intensities, scaled to [0, 1].

    1 for a uniform image, 0 when all energy sits in one voxel.
    """
    x = np.abs(np.asarray(getattr(v, "data", v), dtype=np.float64)).ravel()
    n = x.size
    norm = math.sqrt(float(np.dot(x, x)))
    if norm == 0:
        raise AllZeroVolume("efc undefined for an all-zero volume")
    if n < 2:
        raise UndefinedMetric("efc", "single-voxel volume has no entropy range")
    p = x[x > 0] / norm
    entropy = -float(np.sum(p * np.log(p)))
    max_entropy = math.sqrt(n) * math.log(math.sqrt(n))
    return min(max(entropy / max_entropy, 0.0), 1.0)


def patch_center(fg: np.ndarray) -> tuple[int, int, int]:
    """Rounded foreground centroid, snapped to the nearest foreground voxel.

    Ties in distance resolve to the lowest C-order flat index.
    """
    coords = np.argwhere(fg)
    centroid = coords.mean(axis=0)
    center = tuple(int(math.floor(c + 0.5)) for c in centroid)
    if fg[center]:
        return center
    d2 = ((coords - np.array(center)) ** 2).sum(axis=1)
    # argwhere yields C order, argmin yields the first minimum
    return tuple(int(c) for c in coords[int(np.argmin(d2))])


def _cube(center, shape, size=PATCH) -> tuple[slice, slice, slice]:
    h = size // 2
    return tuple(slice(max(c - h, 0), min(c + h + 1, n)) for c, n in zip(center, shape))


def corner_cubes(shape, size=PATCH):
    for corner in itertools.product((0, 1), repeat=3):
        yield tuple(slice(0, min(size, n)) if c == 0 else slice(max(n - size, 0), n)
                    for c, n in zip(corner, shape))


def patch_values(data: np.ndarray, fg: np.ndarray) -> np.ndarray:
    sl = _cube(patch_center(fg), data.shape)
    return data[sl][fg[sl]].astype(np.float64)


def background_patch_values(data: np.ndarray, bg: np.ndarray) -> np.ndarray | None:
    for sl in corner_cubes(data.shape):
        vals = data[sl][bg[sl]]
        if vals.size >= 2:
            return vals.astype(np.float64)
    return None


def high_pass_response(data: np.ndarray) -> np.ndarray:
    """Per-axial-slice 3x3 high-pass (center 8, neighbours -1)."""
    out = np.empty(data.shape, dtype=np.float64)
    for k in range(data.shape[2]):
        out[:, :, k] = ndimage.correlate(data[:, :, k].astype(np.float64), HIGH_PASS, mode="nearest")
    return out


def compute_metrics(v: Volume, fg: np.ndarray, bg: np.ndarray) -> QualityMetrics:
    data = np.asarray(v.data, dtype=np.float64)
    fg = np.asarray(fg, dtype=bool)
    bg = np.asarray(bg, dtype=bool)
    st = fg_bg_stats(v, fg, bg)
    f = data[fg]
    b = data[bg]

    values: dict[str, float] = {}
    undefined: dict[str, str] = {}

    def ratio(name, num, den, cause):
        if den == 0 or not math.isfinite(den):
            undefined[name] = cause
            values[name] = math.nan
        else:
            values[name] = num / den

    values["mean"] = st.mu_F
    values["rng"] = st.max_F - st.min_F
    values["var"] = st.sigma_F ** 2
    ratio("cv", st.sigma_F, st.mu_F, "foreground mean is zero")

    hp = high_pass_response(data)
    values["cpp"] = float(np.mean(np.abs(hp[fg])))

    med = ndimage.median_filter(data, size=3, mode="nearest")
    mse = float(np.mean((f - med[fg]) ** 2))
    if mse == 0:
        undefined["psnr"] = "foreground equals its median-filtered copy (MSE = 0)"
        values["psnr"] = math.nan
    elif st.max_F == 0:
        undefined["psnr"] = "foreground maximum is zero"
        values["psnr"] = math.nan
    else:
        values["psnr"] = 10.0 * math.log10(st.max_F ** 2 / mse)

    ratio("snr1", st.mu_F, st.sigma_B, "background std is zero")

    p = patch_values(data, fg)
    mu_p, sigma_p = float(p.mean()), float(p.std())
    ratio("snr2", mu_p, st.sigma_B, "background std is zero")
    ratio("snr3", mu_p, sigma_p, "foreground patch std is zero")

    bp = background_patch_values(data, bg)
    if bp is None:
        for name in ("snr4", "cnr"):
            undefined[name] = "no background corner patch"
            values[name] = math.nan
    else:
        mu_bp, sigma_bp = float(bp.mean()), float(bp.std())
        ratio("snr4", mu_p, sigma_bp, "background patch std is zero")
        ratio("cnr", abs(mu_p - mu_bp), sigma_bp, "background patch std is zero")

    ratio("cvp", sigma_p, mu_p, "foreground patch mean is zero")
    ratio("cjv", st.sigma_F + st.sigma_B, abs(st.mu_F - st.mu_B), "foreground and background means coincide")

    try:
        values["efc"] = efc(data)
    except (AllZeroVolume, UndefinedMetric) as exc:
        undefined["efc"] = str(exc)
        values["efc"] = math.nan

    ratio("fber", float(np.median(f ** 2)), float(np.median(b ** 2)), "median background energy is zero")

    for name in ("cv", "cvp"):
        if name not in undefined:
            values[name] = abs(values[name])
    return QualityMetrics(**values, undefined=undefined)


def metrics_for(v: Volume) -> tuple[QualityMetrics, np.ndarray, np.ndarray]:
    """Segment *v* and compute its metrics."""
    from .segmentation import background_mask, foreground_mask

    fg = foreground_mask(v)
    bg = background_mask(v, fg)
    return compute_metrics(v, fg, bg), fg, bg
