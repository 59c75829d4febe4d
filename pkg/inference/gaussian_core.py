"""
Information-form Gaussians and first-order linearization of factor densities.

A factor density linearized at x̄ is a Gaussian over the state increment
δ = x − x̄ expressed as p(δ) ∝ exp(−½ δᵀJδ + δᵀh).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from utils.errors import InvertibilityError, NumericalError

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-9
RIDGE_COND = 1e10
RIDGE_SCALE = 1e-9
MOMENT_COND = 1e12


class DifferentiableMap(Protocol):
    def __call__(self, x: np.ndarray) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class LinearMap:
    """Affine map x ↦ A·x + b."""
    A: np.ndarray
    b: np.ndarray | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(self.A, dtype=float) @ np.asarray(x, dtype=float)
        return out if self.b is None else out + self.b

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.A, dtype=float)


class IdentityMap:
    """Identity mapping used by every metered-series conditional factor."""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return np.eye(len(x))


class CallableMap:
    """Wrap a plain callable, falling back to central differences for its Jacobian."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray],
                 jacobian: Callable[[np.ndarray], np.ndarray] | None = None, step: float = 1e-6):
        self._fn = fn
        self._jacobian = jacobian
        self.step = step

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_1d(np.asarray(self._fn(x), dtype=float))

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        if self._jacobian is not None:
            return np.atleast_2d(np.asarray(self._jacobian(x), dtype=float))
        return numeric_jacobian(self, x, self.step)


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    columns = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        columns.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * step))
    return np.stack(columns, axis=-1)


def as_map(f, jacobian=None):
    if hasattr(f, "jacobian") and jacobian is None:
        return f
    return CallableMap(f, jacobian)


@dataclass(frozen=True)
class CanonicalGaussian:
    """Gaussian in information form: precision matrix J and information vector h."""
    J: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        J = np.atleast_2d(np.asarray(self.J, dtype=float))
        h = np.atleast_1d(np.asarray(self.h, dtype=float)).ravel()
        if J.shape[0] != J.shape[1] or J.shape[0] != h.size:
            raise ValueError(f"Inconsistent canonical Gaussian: J {J.shape}, h {h.shape}")
        J = 0.5 * (J + J.T)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.h.size

    @classmethod
    def zeros(cls, dim: int) -> "CanonicalGaussian":
        return cls(np.zeros((dim, dim)), np.zeros(dim))

    def __add__(self, other: "CanonicalGaussian") -> "CanonicalGaussian":
        if other.dim != self.dim:
            raise ValueError(f"Cannot combine Gaussians of dims {self.dim} and {other.dim}")
        return CanonicalGaussian(self.J + other.J, self.h + other.h)

    def is_psd(self, tol: float = PSD_TOL) -> bool:
        if self.dim == 0:
            return True
        scale = max(1.0, float(np.max(np.abs(self.J))))
        return bool(np.min(np.linalg.eigvalsh(self.J)) >= -tol * scale)


@dataclass(frozen=True)
class LinearizationPoint:
    x: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float)).ravel()
        if not np.all(np.isfinite(x)):
            raise NumericalError("Linearization point has non-finite entries")
        object.__setattr__(self, "x", x)

    def __len__(self) -> int:
        return self.x.size


def _equilibrate(M: np.ndarray):
    d = np.sqrt(np.abs(np.diag(M)))
    d[d == 0] = 1.0
    return M / np.outer(d, d), d


def safe_inverse(M: np.ndarray, label: str = "matrix") -> np.ndarray:
    """
    Invert a symmetric PSD matrix, adding a diagonal ridge when badly conditioned.

    The condition number is measured on the diagonally equilibrated matrix so
    that mixed units (voltages against powers) do not trigger the ridge. When it
    exceeds 1e10 a ridge of 1e-9·trace/dim is added in that scaled space.

    Raises
    ------
    InvertibilityError
        If the matrix is not finite, has a zero diagonal entry, or stays
        singular after regularization.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    M = 0.5 * (M + M.T)
    if not np.all(np.isfinite(M)):
        raise InvertibilityError(f"{label} has non-finite entries")
    if np.any(np.diag(M) <= 0.0):
        zero = np.flatnonzero(np.diag(M) <= 0.0).tolist()
        raise InvertibilityError(f"{label} is singular: zero precision/variance on components {zero}")
    scaled, d = _equilibrate(M)
    cond = np.linalg.cond(scaled)
    if not np.isfinite(cond) or cond > RIDGE_COND:
        ridge = RIDGE_SCALE * np.trace(scaled) / scaled.shape[0]
        scaled = scaled + ridge * np.eye(scaled.shape[0])
        cond = np.linalg.cond(scaled)
        if not np.isfinite(cond) or cond > MOMENT_COND:
            raise InvertibilityError(f"{label} is singular after ridge regularization (cond={cond:.3g})")
    inv = np.linalg.inv(scaled) / np.outer(d, d)
    return 0.5 * (inv + inv.T)


def safe_solve(M: np.ndarray, b: np.ndarray, label: str = "matrix") -> np.ndarray:
    return safe_inverse(M, label) @ np.asarray(b, dtype=float)


def canonical_from_moments(mean, cov, label: str = "covariance") -> CanonicalGaussian:
    """
    Convert a moment-form Gaussian (mean, covariance) to information form.

    Raises
    ------
    InvertibilityError
        If ``cov`` is singular (condition number ≥ 1e12).
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    cond = np.linalg.cond(cov)
    if not np.isfinite(cond) or cond >= MOMENT_COND:
        raise InvertibilityError(f"{label} is singular (cond={cond:.3g})")
    J = np.linalg.inv(cov)
    return CanonicalGaussian(J, J @ mean)


def moments_from_canonical(g: CanonicalGaussian, label: str = "precision") -> tuple[np.ndarray, np.ndarray]:
    cov = safe_inverse(g.J, label)
    return cov @ g.h, cov


def combine(gaussians: Sequence[CanonicalGaussian], dim: int) -> CanonicalGaussian:
    """Product of Gaussian densities: component-wise sum of (J, h); empty → zero message."""
    total = CanonicalGaussian.zeros(dim)
    for g in gaussians:
        total = total + g
    return total


def _weight(R: np.ndarray, label: str) -> np.ndarray:
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape[0] == 1 and R.shape[1] == 1:
        if R[0, 0] <= 0:
            raise InvertibilityError(f"{label} is singular")
        return np.array([[1.0 / R[0, 0]]])
    if np.count_nonzero(R - np.diag(np.diag(R))) == 0:
        diag = np.diag(R)
        if np.any(diag <= 0):
            raise InvertibilityError(f"{label} is singular: zero variance on components "
                                     f"{np.flatnonzero(diag <= 0).tolist()}")
        return np.diag(1.0 / diag)
    return safe_inverse(R, label)


def linearize_conditional(f, R, y, point: LinearizationPoint, jacobian=None,
                          label: str = "R") -> CanonicalGaussian:
    """
    Linearize p(y | x) with y = f(x) + ν, ν ~ N(0, R) at x̄.

    J = Fᵀ R⁻¹ F and h = Fᵀ R⁻¹ (y − f(x̄)).
    """
    f = as_map(f, jacobian)
    x_bar = point.x if isinstance(point, LinearizationPoint) else LinearizationPoint(point).x
    F = np.atleast_2d(f.jacobian(x_bar))
    if not np.all(np.isfinite(F)):
        raise NumericalError(f"Jacobian of the conditional mapping has non-finite entries at {label}")
    residual = np.atleast_1d(np.asarray(y, dtype=float)) - f(x_bar)
    W = _weight(R, label)
    if F.shape[0] != W.shape[0] or residual.size != W.shape[0]:
        raise ValueError(f"Observation dim {residual.size}, Jacobian rows {F.shape[0]} "
                         f"and {label} dim {W.shape[0]} disagree")
    FtW = F.T @ W
    return CanonicalGaussian(FtW @ F, FtW @ residual)


def linearize_joint(g, S, point: LinearizationPoint, jacobian=None, target=None,
                    label: str = "S") -> CanonicalGaussian:
    """
    Linearize a joint factor exp(−½ (t − g(x))ᵀ S⁻¹ (t − g(x))) at x̄.

    J = Gᵀ S⁻¹ G and h = Gᵀ S⁻¹ (t − g(x̄)); the target ``t`` defaults to the
    linearization point itself so the residual reads x̄ − g(x̄).
    """
    g = as_map(g, jacobian)
    x_bar = point.x if isinstance(point, LinearizationPoint) else LinearizationPoint(point).x
    G = np.atleast_2d(g.jacobian(x_bar))
    if not np.all(np.isfinite(G)):
        raise NumericalError(f"Jacobian of the joint mapping has non-finite entries at {label}")
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if G.shape[0] != S.shape[0]:
        raise ValueError(f"Jacobian has {G.shape[0]} rows but {label} is {S.shape[0]}x{S.shape[1]}")
    t = x_bar if target is None else np.atleast_1d(np.asarray(target, dtype=float))
    W = _weight(S, label)
    GtW = G.T @ W
    return CanonicalGaussian(GtW @ G, GtW @ (t - g(x_bar)))
