"""Low-rank adapter arithmetic: W' = W0 + (alpha / r) * B @ A.

Desk-scale numpy implementation used to check merge/forward agreement,
parameter accounting and gradient correctness of the factored update.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# fine-tuning configuration used for the adapters in the reference setup
DEFAULT_RANK = 16
DEFAULT_ALPHA = 16.0


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    W0: np.ndarray
    A: np.ndarray
    B: np.ndarray
    r: int
    alpha: float

    def __post_init__(self):
        W0, A, B = (np.asarray(m, dtype=np.float64) for m in (self.W0, self.A, self.B))
        if W0.ndim != 2 or A.ndim != 2 or B.ndim != 2:
            raise ShapeMismatch("W0, A and B must be matrices")
        d_out, d_in = W0.shape
        if self.r <= 0 or self.alpha <= 0:
            raise ValueError("rank and alpha must be positive")
        if self.r > min(d_in, d_out):
            raise ShapeMismatch(f"rank {self.r} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
        if A.shape != (self.r, d_in):
            raise ShapeMismatch(f"A has shape {A.shape}, expected {(self.r, d_in)}")
        if B.shape != (d_out, self.r):
            raise ShapeMismatch(f"B has shape {B.shape}, expected {(d_out, self.r)}")
        object.__setattr__(self, "W0", W0)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def shape(self) -> tuple[int, int]:
        return self.W0.shape

    @classmethod
    def init(cls, W0: np.ndarray, r: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA,
             seed: int = 0, scale: float = 0.01) -> "LoraAdapter":
        """Standard start: A small uniform, B zero, so the update begins at zero."""
        W0 = np.asarray(W0, dtype=np.float64)
        rng = np.random.default_rng(seed)
        A = rng.uniform(-scale, scale, size=(r, W0.shape[1]))
        return cls(W0, A, np.zeros((W0.shape[0], r)), r, alpha)


def merge(ad: LoraAdapter) -> np.ndarray:
    return ad.W0 + ad.scaling * (ad.B @ ad.A)


def forward(ad: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """Factored application; never forms B @ A."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != ad.W0.shape[1]:
        raise ShapeMismatch(f"input length {x.shape[0]} != d_in {ad.W0.shape[1]}")
    return ad.W0 @ x + ad.scaling * (ad.B @ (ad.A @ x))


def trainable_fraction(d_in: int, d_out: int, r: int) -> float:
    """Adapter parameters relative to the dense matrix, r(d_in + d_out) / (d_in d_out)."""
    if r < 1 or r > min(d_in, d_out):
        raise ValueError(f"rank {r} must lie in [1, min(d_in, d_out)]")
    frac = r * (d_in + d_out) / (d_in * d_out)
    if frac > 1.0:
        raise ValueError(f"rank {r} adapter has more parameters than the {d_out}x{d_in} matrix")
    return frac


def numerical_rank(m: np.ndarray, rtol: float = 1e-8) -> int:
    s = np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

def loss(ad: LoraAdapter, x: np.ndarray, target: np.ndarray) -> float:
    """Squared error ||forward(x) - target||^2."""
    resid = forward(ad, x) - np.asarray(target, dtype=np.float64)
    return float(resid @ resid)


def analytic_grads(ad: LoraAdapter, x: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`loss` with respect to A and B (W0 is frozen)."""
    x = np.asarray(x, dtype=np.float64)
    resid = forward(ad, x) - np.asarray(target, dtype=np.float64)
    s = ad.scaling
    grad_B = 2.0 * s * np.outer(resid, ad.A @ x)
    grad_A = 2.0 * s * np.outer(ad.B.T @ resid, x)
    return grad_A, grad_B


def finite_difference_grads(ad: LoraAdapter, x, target, eps: float = 1e-5,
                            central: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Central (or forward) differences, one parameter at a time."""
    grads = []
    for name in ("A", "B"):
        base = getattr(ad, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            lp = loss(_with(ad, name, plus), x, target)
            if central:
                lm = loss(_with(ad, name, minus), x, target)
                g[idx] = (lp - lm) / (2 * eps)
            else:
                g[idx] = (lp - loss(ad, x, target)) / eps
        grads.append(g)
    return grads[0], grads[1]


def _with(ad: LoraAdapter, name: str, value: np.ndarray) -> LoraAdapter:
    parts = {"W0": ad.W0, "A": ad.A, "B": ad.B}
    parts[name] = value
    return LoraAdapter(parts["W0"], parts["A"], parts["B"], ad.r, ad.alpha)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


@dataclass
class GradCheckReport:
    loss: float
    grad_norm: float
    rel_error_A: float
    rel_error_B: float
    eps: float
    # eps -> (forward-difference error, central-difference error), absolute norms
    sweep: dict[float, tuple[float, float]] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_error_A, self.rel_error_B)

    @property
    def passed(self) -> bool:
        # at a stationary point the relative error is meaningless; use absolute size
        if self.grad_norm < 1e-8:
            return True
        return self.max_rel_error <= self.tolerance


def grad_check(ad: LoraAdapter, x, target, eps: float = 1e-5,
               sweep=(1e-3, 1e-4, 1e-5), tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic A/B gradients with central finite differences (64-bit).

    The loss is quadratic in every single entry of A or B, so central
    differences carry no truncation error; the eps sweep therefore also
    records one-sided differences, whose error shrinks linearly with eps.
    """
    if max(ad.W0.shape) > 32:
        raise ValueError("grad_check is limited to dims <= 32")
    ga, gb = analytic_grads(ad, x, target)
    fa, fb = finite_difference_grads(ad, x, target, eps)
    report = GradCheckReport(
        loss=loss(ad, x, target),
        grad_norm=float(np.sqrt(np.sum(ga ** 2) + np.sum(gb ** 2))),
        rel_error_A=relative_error(ga, fa),
        rel_error_B=relative_error(gb, fb),
        eps=eps,
        tolerance=tolerance,
    )
    analytic = np.concatenate([ga.ravel(), gb.ravel()])
    for e in sweep:
        errs = []
        for central in (False, True):
            sa, sb = finite_difference_grads(ad, x, target, e, central=central)
            errs.append(float(np.linalg.norm(analytic - np.concatenate([sa.ravel(), sb.ravel()]))))
        report.sweep[e] = (errs[0], errs[1])
    return report
