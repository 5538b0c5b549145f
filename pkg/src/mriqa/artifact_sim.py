"""Seeded k-space and image-space degradations for magnitude volumes.

Every kind works slice by slice along the axial axis. In each slice the
phase-encode axis is axis 1 (``ky``); a phase-encode line is ``k[:, j]``.
Random draws come from a stream keyed on ``(seed, kind, slice index)``, so
results do not depend on processing order, and a :class:`ProvenanceRecord`
can be replayed to reproduce its output bit for bit.

Severity-to-parameter maps:

* motion: 4 contiguous shots; each shot gets a linear k-space phase ramp with
  per-line slopes drawn from U[-s*pi/4, s*pi/4] (a rigid in-plane shift of
  up to s*N/8 voxels).
* ghosting: lines with ``(j - c) % period == 1`` are scaled by ``1 - 0.8*s``.
* aliasing: only lines with ``(j - c) % R == 0`` survive, ``R = 1 + round(3*s)``.
* noise: complex Gaussian k-space noise whose image-domain std per channel
  is ``s * sigma_ref`` (default ``sigma_ref`` = half the volume maximum).
* bias_field: image times ``1 + s * field``, ``field`` a random polynomial of
  the normalized coordinates scaled to max |field| = 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Any

import numpy as np

from .volume_io import Volume

KINDS = ("motion", "ghosting", "aliasing", "noise", "bias_field")
GHOST_ATTENUATION = 0.8
MOTION_SHOTS = 4

_PARAM_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "motion": {"shots": (1, 64)},
    "ghosting": {"period": (2, 64)},
    "aliasing": {"factor": (1, 16)},
    "noise": {"sigma_ref": (0.0, math.inf)},
    "bias_field": {"order": (1, 4)},
}
_INT_PARAMS = {"shots", "period", "factor", "order"}


class InvalidParams(ValueError):
    pass


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ArtifactSpec:
    kind: str
    severity: float
    seed: int = 0
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParams(f"unknown artifact kind {self.kind!r}; expected one of {KINDS}")
        sev = float(self.severity)
        if not 0.0 <= sev <= 1.0:
            raise InvalidParams(f"severity must lie in [0, 1], got {self.severity}")
        object.__setattr__(self, "severity", sev)
        object.__setattr__(self, "seed", int(self.seed))
        allowed = _PARAM_RANGES[self.kind]
        clean: dict[str, Any] = {}
        for key, value in self.params.items():
            if key not in allowed:
                raise InvalidParams(f"{self.kind} does not take parameter {key!r}")
            lo, hi = allowed[key]
            if key in _INT_PARAMS:
                if float(value) != int(value):
                    raise InvalidParams(f"{key} must be an integer")
                value = int(value)
            else:
                value = float(value)
            if not lo <= value <= hi:
                raise InvalidParams(f"{key}={value} outside [{lo}, {hi}]")
            clean[key] = value
        object.__setattr__(self, "params", clean)

    def to_json(self) -> dict:
        return {"kind": self.kind, "severity": self.severity, "seed": self.seed,
                "params": dict(sorted(self.params.items()))}

    @classmethod
    def from_json(cls, obj: dict) -> "ArtifactSpec":
        return cls(obj["kind"], obj["severity"], obj.get("seed", 0), dict(obj.get("params", {})))


@dataclass
class ProvenanceRecord:
    """Ordered artifacts applied to a clean volume, with realized parameters."""

    dims: tuple[int, int, int]
    steps: list[ArtifactSpec] = field(default_factory=list)
    realized: list[dict[str, Any]] = field(default_factory=list)

    @property
    def kinds(self) -> list[str]:
        return [s.kind for s, r in zip(self.steps, self.realized) if not r.get("noop")]

    @property
    def is_noop(self) -> bool:
        return not self.kinds

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "steps": [
                {"spec": s.to_json(), "realized": r} for s, r in zip(self.steps, self.realized)
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, obj: dict) -> "ProvenanceRecord":
        steps = [ArtifactSpec.from_json(s["spec"]) for s in obj["steps"]]
        realized = [s.get("realized", {}) for s in obj["steps"]]
        return cls(tuple(obj["dims"]), steps, realized)


# --------------------------------------------------------------------------
# k-space
# --------------------------------------------------------------------------

def to_kspace(img: np.ndarray) -> np.ndarray:
    """Centered, unnormalized 2D DFT (DC at index ``n // 2``)."""
    img = np.asarray(img)
    if img.ndim != 2 or min(img.shape) < 2:
        raise ValueError(f"expected a 2D slice of at least 2x2, got {img.shape}")
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img)))


def from_kspace(k: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k)))


def _rng(seed: int, kind: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), KINDS.index(kind), index]))


def _line_offsets(n: int) -> np.ndarray:
    """Phase-encode line index relative to the k-space center."""
    return np.arange(n) - n // 2


def _motion_slice(img, spec, k_idx):
    nx, ny = img.shape
    shots = spec.params.get("shots", MOTION_SHOTS)
    max_ramp = spec.severity * math.pi / 4
    rng = _rng(spec.seed, "motion", k_idx)
    slopes = rng.uniform(-max_ramp, max_ramp, size=(shots, 2))
    kx = _line_offsets(nx)[:, None]
    k = to_kspace(img.astype(np.float64))
    segments = np.array_split(np.arange(ny), shots)
    for (sx, sy), lines in zip(slopes, segments):
        if lines.size == 0:
            continue
        ky = _line_offsets(ny)[lines][None, :]
        k[:, lines] *= np.exp(-1j * (sx * kx + sy * ky))
    out = np.abs(from_kspace(k))
    info = {"shot_lines": [[int(s[0]), int(s[-1])] if s.size else [] for s in segments],
            "phase_slopes": [[float(a), float(b)] for a, b in slopes]}
    return out, info


def _ghost_slice(img, spec, k_idx):
    ny = img.shape[1]
    period = spec.params.get("period", 2)
    factor = 1.0 - spec.severity * GHOST_ATTENUATION
    lines = np.flatnonzero(_line_offsets(ny) % period == 1)
    k = to_kspace(img.astype(np.float64))
    k[:, lines] *= factor
    return np.abs(from_kspace(k)), {"attenuated_lines": lines.tolist(), "amplitude": factor}


def aliasing_factor(severity: float) -> int:
    return 1 + int(math.floor(3 * severity + 0.5))


def _alias_slice(img, spec, k_idx):
    ny = img.shape[1]
    r = spec.params.get("factor", aliasing_factor(spec.severity))
    dropped = np.flatnonzero(_line_offsets(ny) % r != 0)
    k = to_kspace(img.astype(np.float64))
    k[:, dropped] = 0
    return np.abs(from_kspace(k)), {"factor": int(r), "dropped_lines": dropped.tolist()}


def _noise_slice(img, spec, k_idx, sigma_ref):
    n = img.size
    sigma_img = spec.severity * sigma_ref
    rng = _rng(spec.seed, "noise", k_idx)
    sigma_k = sigma_img * math.sqrt(n)
    noise = rng.normal(0.0, sigma_k, size=img.shape) + 1j * rng.normal(0.0, sigma_k, size=img.shape)
    k = to_kspace(img.astype(np.float64)) + noise
    return np.abs(from_kspace(k)), {"sigma_image": sigma_img}


def bias_field(dims, order: int, seed: int) -> tuple[np.ndarray, list[float]]:
    """Random polynomial field over [-1, 1]^3 with max |field| = 1."""
    rng = _rng(seed, "bias_field", 0)
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    coords = (x, y, z)
    out = np.zeros(tuple(dims))
    coeffs: list[float] = []
    for deg in range(1, order + 1):
        for combo in combinations_with_replacement(range(3), deg):
            c = float(rng.uniform(-1.0, 1.0))
            coeffs.append(c)
            term = np.ones(tuple(dims))
            for axis in combo:
                term = term * coords[axis]
            out += c * term
    peak = float(np.max(np.abs(out)))
    if peak > 0:
        out /= peak
    return out, coeffs


def _apply_one(data: np.ndarray, spec: ArtifactSpec, sigma_ref: float | None) -> tuple[np.ndarray, dict]:
    if spec.severity == 0:
        return data.copy(), {"noop": True}
    if spec.kind == "bias_field":
        order = spec.params.get("order", 2)
        fld, coeffs = bias_field(data.shape, order, spec.seed)
        out = np.maximum(data.astype(np.float64) * (1.0 + spec.severity * fld), 0.0)
        return out.astype(np.float32), {"order": order, "coefficients": coeffs}

    if spec.kind == "noise":
        if sigma_ref is None:
            sigma_ref = spec.params.get("sigma_ref", 0.5 * float(np.max(np.abs(data))))
    if min(data.shape[:2]) < 2:
        raise InvalidParams(f"k-space artifacts need slices of at least 2x2, got {data.shape[:2]}")
    out = np.empty(data.shape, dtype=np.float32)
    per_slice = []
    for k in range(data.shape[2]):
        img = data[:, :, k]
        if spec.kind == "motion":
            res, info = _motion_slice(img, spec, k)
        elif spec.kind == "ghosting":
            res, info = _ghost_slice(img, spec, k)
        elif spec.kind == "aliasing":
            res, info = _alias_slice(img, spec, k)
        else:
            res, info = _noise_slice(img, spec, k, sigma_ref)
        out[:, :, k] = np.maximum(res, 0.0)
        per_slice.append(info)
    realized: dict[str, Any] = {"slices": per_slice}
    if spec.kind == "noise":
        realized["sigma_ref"] = float(sigma_ref)
    elif spec.kind in ("ghosting", "aliasing"):
        # identical for every slice
        realized = dict(per_slice[0])
    return out, realized


def apply_artifact(v: Volume, spec: ArtifactSpec,
                   prior: ProvenanceRecord | None = None) -> tuple[Volume, ProvenanceRecord]:
    """Corrupt *v* with *spec*; extend *prior* when chaining artifacts."""
    if prior is not None and tuple(prior.dims) != v.dims:
        raise DimMismatch(f"record dims {prior.dims} != volume dims {v.dims}")
    sigma_ref = spec.params.get("sigma_ref") if spec.kind == "noise" else None
    data, realized = _apply_one(np.asarray(v.data), spec, sigma_ref)
    rec = ProvenanceRecord(v.dims) if prior is None else ProvenanceRecord(prior.dims, list(prior.steps), list(prior.realized))
    rec.steps.append(spec)
    rec.realized.append(realized)
    return v.with_data(data), rec


def apply_artifacts(v: Volume, specs) -> tuple[Volume, ProvenanceRecord]:
    rec = ProvenanceRecord(v.dims)
    for spec in specs:
        v, rec = apply_artifact(v, spec, rec)
    return v, rec


def replay(clean: Volume, rec: ProvenanceRecord) -> Volume:
    if tuple(rec.dims) != clean.dims:
        raise DimMismatch(f"record dims {tuple(rec.dims)} != volume dims {clean.dims}")
    data = np.asarray(clean.data)
    for spec, realized in zip(rec.steps, rec.realized):
        sigma_ref = realized.get("sigma_ref") if spec.kind == "noise" else None
        data, _ = _apply_one(data, spec, sigma_ref)
    return clean.with_data(data)
