"""Independent brute-force reference implementations used by the tests.

Everything here is plain Python loops over nested lists (plus ``struct`` for
headers) and shares no code with the package under test.
"""
from __future__ import annotations

import gzip
import itertools
import math
import statistics
import struct


# ---------------------------------------------------------------- NIfTI header

HEADER_FIELDS = {
    # name: (offset, struct format)
    "sizeof_hdr": (0, "i"),
    "dim": (40, "8h"),
    "datatype": (70, "h"),
    "bitpix": (72, "h"),
    "pixdim": (76, "8f"),
    "vox_offset": (108, "f"),
    "scl_slope": (112, "f"),
    "scl_inter": (116, "f"),
    "sform_code": (254, "h"),
    "srow_x": (280, "4f"),
    "srow_y": (296, "4f"),
    "srow_z": (312, "4f"),
    "magic": (344, "4s"),
}
DTYPE_FORMATS = {2: "B", 4: "h", 8: "i", 16: "f", 64: "d"}


def decode_nifti(path):
    """Header fields and scaled voxel values (x fastest) of a little-endian file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    hdr = {}
    for name, (off, fmt) in HEADER_FIELDS.items():
        vals = struct.unpack_from("<" + fmt, raw, off)
        hdr[name] = vals if len(vals) > 1 else vals[0]
    nx, ny, nz = hdr["dim"][1:4]
    fmt = DTYPE_FORMATS[hdr["datatype"]]
    n = nx * ny * nz
    raw_vals = struct.unpack_from(f"<{n}{fmt}", raw, int(hdr["vox_offset"]))
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    vals = [v * slope + inter for v in raw_vals] if slope != 0 else list(raw_vals)
    grid = {}
    idx = 0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                grid[(i, j, k)] = vals[idx]
                idx += 1
    return hdr, grid


# ---------------------------------------------------------------- geometry

def ellipsoid_count(dims, axes):
    count = 0
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                r = sum(((p - (n - 1) / 2.0) / a) ** 2 for p, n, a in zip((i, j, k), dims, axes))
                if r <= 1.0:
                    count += 1
    return count


def components_26(mask):
    """Sizes of 26-connected components of a nested-list boolean grid (flood fill)."""
    nx, ny, nz = len(mask), len(mask[0]), len(mask[0][0])
    seen = set()
    comps = []
    for start in itertools.product(range(nx), range(ny), range(nz)):
        i, j, k = start
        if not mask[i][j][k] or start in seen:
            continue
        stack = [start]
        seen.add(start)
        members = []
        while stack:
            p = stack.pop()
            members.append(p)
            for d in itertools.product((-1, 0, 1), repeat=3):
                q = (p[0] + d[0], p[1] + d[1], p[2] + d[2])
                if 0 <= q[0] < nx and 0 <= q[1] < ny and 0 <= q[2] < nz and q not in seen and mask[q[0]][q[1]][q[2]]:
                    seen.add(q)
                    stack.append(q)
        comps.append(members)
    return comps


# ---------------------------------------------------------------- metrics

def _mean(xs):
    return math.fsum(xs) / len(xs)


def _std(xs):
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / len(xs))


def _ratio(a, b):
    return float("nan") if b == 0 else a / b


def brute_metrics(data, fg, bg):
    """The 15-metric formula ledger transcribed with explicit loops.

    ``data``, ``fg``, ``bg`` are nested lists indexed [i][j][k].
    """
    nx, ny, nz = len(data), len(data[0]), len(data[0][0])
    cells = list(itertools.product(range(nx), range(ny), range(nz)))
    F = [float(data[i][j][k]) for i, j, k in cells if fg[i][j][k]]
    B = [float(data[i][j][k]) for i, j, k in cells if bg[i][j][k]]
    mu_f, sd_f, mu_b, sd_b = _mean(F), _std(F), _mean(B), _std(B)

    def at(i, j, k):
        i = min(max(i, 0), nx - 1)
        j = min(max(j, 0), ny - 1)
        k = min(max(k, 0), nz - 1)
        return float(data[i][j][k])

    out = {}
    out["mean"] = mu_f
    out["rng"] = max(F) - min(F)
    out["var"] = sd_f ** 2
    out["cv"] = abs(_ratio(sd_f, mu_f))

    hp = []
    for i, j, k in cells:
        if fg[i][j][k]:
            s = 9 * at(i, j, k)
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    s -= at(i + di, j + dj, k)
            hp.append(abs(s))
    out["cpp"] = _mean(hp)

    sq = []
    for i, j, k in cells:
        if fg[i][j][k]:
            neigh = [at(i + a, j + b, k + c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
            sq.append((float(data[i][j][k]) - statistics.median(neigh)) ** 2)
    mse = _mean(sq)
    out["psnr"] = float("nan") if mse == 0 or max(F) == 0 else 10 * math.log10(max(F) ** 2 / mse)

    out["snr1"] = _ratio(mu_f, sd_b)

    coords = [c for c in cells if fg[c[0]][c[1]][c[2]]]
    cen = [math.floor(_mean([c[a] for c in coords]) + 0.5) for a in range(3)]
    if not fg[cen[0]][cen[1]][cen[2]]:
        best, best_d = None, None
        for c in coords:  # C order
            d = sum((c[a] - cen[a]) ** 2 for a in range(3))
            if best_d is None or d < best_d:
                best, best_d = c, d
        cen = list(best)
    P = [float(data[i][j][k]) for i, j, k in cells
         if all(abs(p - q) <= 2 for p, q in zip((i, j, k), cen)) and fg[i][j][k]]
    mu_p, sd_p = _mean(P), _std(P)
    out["snr2"] = _ratio(mu_p, sd_b)
    out["snr3"] = _ratio(mu_p, sd_p)

    BP = None
    for corner in itertools.product((0, 1), repeat=3):
        ranges = []
        for c, n in zip(corner, (nx, ny, nz)):
            ranges.append(range(0, min(5, n)) if c == 0 else range(max(n - 5, 0), n))
        vals = [float(data[i][j][k]) for i in ranges[0] for j in ranges[1] for k in ranges[2] if bg[i][j][k]]
        if len(vals) >= 2:
            BP = vals
            break
    if BP is None:
        out["snr4"] = out["cnr"] = float("nan")
    else:
        mu_bp, sd_bp = _mean(BP), _std(BP)
        out["snr4"] = _ratio(mu_p, sd_bp)
        out["cnr"] = _ratio(abs(mu_p - mu_bp), sd_bp)
    out["cvp"] = abs(_ratio(sd_p, mu_p))
    out["cjv"] = _ratio(sd_f + sd_b, abs(mu_f - mu_b))
    out["efc"] = brute_efc([float(data[i][j][k]) for i, j, k in cells])
    out["fber"] = _ratio(statistics.median([x * x for x in F]), statistics.median([x * x for x in B]))
    return out


def brute_efc(values):
    """Two-pass EFC: norm first, then entropy over nonzero |x|."""
    xs = [abs(v) for v in values]
    n = len(xs)
    norm = math.sqrt(math.fsum(x * x for x in xs))
    e = -math.fsum((x / norm) * math.log(x / norm) for x in xs if x > 0)
    return e / (math.sqrt(n) * math.log(math.sqrt(n)))


# ---------------------------------------------------------------- linear algebra

def naive_matmul(a, b):
    n, m, p = len(a), len(b), len(b[0])
    return [[math.fsum(a[i][k] * b[k][j] for k in range(m)) for j in range(p)] for i in range(n)]


# ---------------------------------------------------------------- evaluation

def brute_macro_f1(cm):
    n = len(cm)
    f1s = []
    for c in range(n):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(n)) - tp
        fn = sum(cm[c][k] for k in range(n)) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(f1s) / n


# ---------------------------------------------------------------- random cases

def random_case(rng, max_dim=8):
    """Random <= max_dim^3 volume with a bright blob, plus disjoint fg/bg masks.

    Half the cases use a blob mask, half a random scatter mask, so patch
    snapping and corner fallbacks get exercised.
    """
    import numpy as np
    from scipy import ndimage

    while True:
        dims = tuple(int(d) for d in rng.integers(3, max_dim + 1, size=3))
        data = rng.uniform(0.0, 40.0, size=dims)
        if rng.random() < 0.5:
            lo = [int(rng.integers(0, max(d - 2, 1))) for d in dims]
            hi = [min(l + int(rng.integers(1, 4)), d) for l, d in zip(lo, dims)]
            fg = np.zeros(dims, bool)
            fg[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
        else:
            fg = rng.random(dims) < 0.15
        if not fg.any():
            continue
        data[fg] += rng.uniform(60.0, 140.0)
        bg = ~ndimage.binary_dilation(fg, structure=np.ones((3, 3, 3), bool))
        if bg.sum() >= 1:
            return data.astype(np.float32), fg, bg
