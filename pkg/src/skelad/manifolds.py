"""Latent geometries: Euclidean space, the Poincare ball, and the unit sphere.

Each geometry provides a distance, a map from the projector's Euclidean
output onto the manifold, and centroid semantics. Plain-array functions
carry the math and are what scoring and center updates use; the ``*_t``
wrappers register hand-derived gradients on the active tape for training.

Poincare ball numerics: points are kept at norm <= 1 - 1e-7 and the
arccosh argument is clamped to >= 1 before evaluation, which are the two
singular boundaries of the distance formula.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateError, DimensionError, DomainError, EmptySetError
from .tensor import Tensor, record

EUCLIDEAN = "euclidean"
HYPERBOLIC = "hyperbolic"
SPHERICAL = "spherical"
MANIFOLDS = (EUCLIDEAN, HYPERBOLIC, SPHERICAL)

_BALL_RADIUS = 1.0 - 1e-7
_UNIT_TOL = 1e-9
_MIN_DIRECTION = 1e-9


def _check_same_width(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"latent widths differ: {x.shape[-1]} vs {y.shape[-1]}")


# ---------------------------------------------------------------------------
# Euclidean


def dist_euclidean(x, y) -> np.ndarray:
    """L2 distance, row-wise over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_width(x, y)
    return np.linalg.norm(x - y, axis=-1)


# ---------------------------------------------------------------------------
# Poincare ball


def clip_to_ball(x: np.ndarray) -> np.ndarray:
    """Radially pull points with norm > 1 - 1e-7 back to that radius."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    factor = np.where(norms > _BALL_RADIUS, _BALL_RADIUS / np.maximum(norms, 1e-300), 1.0)
    return x * factor


def check_in_ball(x: np.ndarray, name: str = "point") -> None:
    norms = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    if np.any(norms >= 1.0):
        raise DomainError(f"{name} lies outside the open unit ball (norm {norms.max():.6g})")


def exp_origin(v) -> np.ndarray:
    """Exponential map at the ball's origin: tanh(|v|) * v / |v|, 0 at 0."""
    v = np.asarray(v, dtype=np.float64)
    r = np.linalg.norm(v, axis=-1, keepdims=True)
    # tanh(r)/r -> 1 as r -> 0; series keeps it smooth through the origin
    small = r < 1e-8
    safe_r = np.where(small, 1.0, r)
    factor = np.where(small, 1.0 - r * r / 3.0, np.tanh(safe_r) / safe_r)
    return v * factor


def dist_hyperbolic(x, y) -> np.ndarray:
    """Poincare-ball distance arccosh(1 + 2|x-y|^2 / ((1-|x|^2)(1-|y|^2)))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_width(x, y)
    check_in_ball(x, "first argument")
    check_in_ball(y, "second argument")
    x = clip_to_ball(x)
    y = clip_to_ball(y)
    sq = np.sum((x - y) ** 2, axis=-1)
    px = 1.0 - np.sum(x * x, axis=-1)
    py = 1.0 - np.sum(y * y, axis=-1)
    arg = np.maximum(1.0 + 2.0 * sq / (px * py), 1.0)
    return np.arccosh(arg)


# ---------------------------------------------------------------------------
# sphere


def project_sphere(v) -> np.ndarray:
    """Normalize to the unit sphere; rejects (near-)zero directions."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < _MIN_DIRECTION):
        raise DegenerateError("cannot project a zero vector onto the sphere")
    return v / norms


def check_unit(x: np.ndarray, name: str = "point") -> None:
    norms = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    err = np.abs(norms - 1.0)
    if np.any(err > _UNIT_TOL):
        raise DomainError(f"{name} is not unit-norm (deviation {err.max():.3g})")


def dist_spherical(x, c) -> np.ndarray:
    """Cosine distance 1 - x.c between unit vectors, clamped to [0, 2]."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    _check_same_width(x, c)
    check_unit(x, "first argument")
    check_unit(c, "second argument")
    return np.clip(1.0 - np.sum(x * c, axis=-1), 0.0, 2.0)


# ---------------------------------------------------------------------------
# dispatch helpers


def to_manifold(v, manifold: str) -> np.ndarray:
    """Map raw projector output into the chosen latent space."""
    v = np.asarray(v, dtype=np.float64)
    if manifold == EUCLIDEAN:
        return v
    if manifold == HYPERBOLIC:
        return exp_origin(v)
    if manifold == SPHERICAL:
        return project_sphere(v)
    raise DomainError(f"unknown manifold {manifold!r}")


def distance_to_center(z, c, manifold: str) -> np.ndarray:
    """Distance from manifold points ``z`` to the center ``c``."""
    if manifold == EUCLIDEAN:
        return dist_euclidean(z, c)
    if manifold == HYPERBOLIC:
        return dist_hyperbolic(z, c)
    if manifold == SPHERICAL:
        return dist_spherical(z, c)
    raise DomainError(f"unknown manifold {manifold!r}")


def centroid(points, manifold: str) -> np.ndarray:
    """Manifold centroid of a non-empty [N,n] point set.

    Euclidean: arithmetic mean. Spherical: mean direction (renormalized
    mean). Hyperbolic: arithmetic mean of ball coordinates, which stays
    inside the ball by convexity.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None]
    if pts.shape[0] == 0:
        raise EmptySetError("centroid of an empty point set")
    if manifold == EUCLIDEAN:
        return pts.mean(axis=0)
    if manifold == SPHERICAL:
        check_unit(pts, "spherical point")
        m = pts.mean(axis=0)
        norm = np.linalg.norm(m)
        if norm < _MIN_DIRECTION:
            raise DegenerateError("mean direction is numerically zero")
        return m / norm
    if manifold == HYPERBOLIC:
        check_in_ball(pts, "ball point")
        return pts.mean(axis=0)
    raise DomainError(f"unknown manifold {manifold!r}")


# ---------------------------------------------------------------------------
# latent point / center containers


class LatentPoint:
    """A point tagged with its manifold; validates the manifold constraint."""

    __slots__ = ("manifold", "coords")

    def __init__(self, manifold: str, coords):
        if manifold not in MANIFOLDS:
            raise DomainError(f"unknown manifold {manifold!r}")
        self.manifold = manifold
        self.coords = np.asarray(coords, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.manifold == HYPERBOLIC:
            check_in_ball(self.coords)
        elif self.manifold == SPHERICAL:
            check_unit(self.coords)

    def __repr__(self) -> str:
        return f"LatentPoint({self.manifold}, dim={self.coords.shape[-1]})"


# ---------------------------------------------------------------------------
# differentiable heads (training path)
#
# Forward values come from the plain-array functions above; only the
# backward rules live here. The center is a constant, never a parameter,
# so no gradient flows into it.


def exp_origin_t(v: Tensor) -> Tensor:
    """Taped exponential map at the origin, row-wise."""
    vd = v.data
    r = np.linalg.norm(vd, axis=-1, keepdims=True)
    out = Tensor(exp_origin(vd))

    def backward(g):
        # z = a(r) v with a = tanh(r)/r:
        #   dz/dv = a I + (a'(r)/r) v v^T,  a'(r) = (1 - tanh^2 r)/r - tanh(r)/r^2
        small = (r < 1e-8)
        safe_r = np.where(small, 1.0, r)
        t = np.tanh(safe_r)
        a = np.where(small, 1.0 - r * r / 3.0, t / safe_r)
        da_over_r = np.where(
            small,
            -2.0 / 3.0,
            ((1.0 - t * t) / safe_r - t / (safe_r**2)) / safe_r,
        )
        gv = np.sum(g * vd, axis=-1, keepdims=True)
        v.accumulate_grad(a * g + da_over_r * gv * vd)

    return record(out, (v,), backward)


def dist_euclidean_t(x: Tensor, c: np.ndarray) -> Tensor:
    """Taped row-wise L2 distance to a constant center."""
    c = np.asarray(c, dtype=np.float64)
    diff = x.data - c
    d = np.linalg.norm(diff, axis=-1)
    out = Tensor(d)

    def backward(g):
        # subgradient 0 where the point coincides with the center
        safe = np.where(d > 0.0, d, 1.0)[..., None]
        x.accumulate_grad(np.where(d[..., None] > 0.0, g[..., None] * diff / safe, 0.0))

    return record(out, (x,), backward)


def dist_hyperbolic_t(z: Tensor, c: np.ndarray) -> Tensor:
    """Taped row-wise Poincare distance to a constant center.

    Gradients are evaluated at the clipped coordinates; the clip itself is
    treated as a numerical guard, not part of the Jacobian.
    """
    c = np.asarray(c, dtype=np.float64)
    check_in_ball(c, "center")
    zd = clip_to_ball(z.data)
    diff = zd - c
    sq = np.sum(diff * diff, axis=-1)
    pz = 1.0 - np.sum(zd * zd, axis=-1)
    pc = 1.0 - np.sum(c * c)
    arg = np.maximum(1.0 + 2.0 * sq / (pz * pc), 1.0)
    out = Tensor(np.arccosh(arg))

    def backward(g):
        root = np.sqrt(np.maximum(arg * arg - 1.0, 0.0))
        active = root > 0.0
        inv_root = np.where(active, 1.0 / np.where(active, root, 1.0), 0.0)
        # d(arg)/dz = 4 (z - c) / (pz pc) + 4 |z-c|^2 z / (pz^2 pc)
        darg = (
            4.0 * diff / (pz * pc)[..., None]
            + 4.0 * (sq / (pz * pz * pc))[..., None] * zd
        )
        z.accumulate_grad((g * inv_root)[..., None] * darg)

    return record(out, (z,), backward)


def project_sphere_t(v: Tensor) -> Tensor:
    """Taped row-wise normalization onto the unit sphere."""
    vd = v.data
    norms = np.linalg.norm(vd, axis=-1, keepdims=True)
    if np.any(norms < _MIN_DIRECTION):
        raise DegenerateError("cannot project a zero vector onto the sphere")
    u = vd / norms
    out = Tensor(u)

    def backward(g):
        gu = np.sum(g * u, axis=-1, keepdims=True)
        v.accumulate_grad((g - gu * u) / norms)

    return record(out, (v,), backward)


def dist_spherical_t(u: Tensor, c: np.ndarray) -> Tensor:
    """Taped row-wise cosine distance 1 - u.c to a constant unit center."""
    c = np.asarray(c, dtype=np.float64)
    check_unit(c, "center")
    out = Tensor(np.clip(1.0 - np.sum(u.data * c, axis=-1), 0.0, 2.0))

    def backward(g):
        u.accumulate_grad(-g[..., None] * np.broadcast_to(c, u.data.shape))

    return record(out, (u,), backward)


def to_manifold_t(v: Tensor, manifold: str) -> Tensor:
    """Taped version of :func:`to_manifold`."""
    if manifold == EUCLIDEAN:
        return v
    if manifold == HYPERBOLIC:
        return exp_origin_t(v)
    if manifold == SPHERICAL:
        return project_sphere_t(v)
    raise DomainError(f"unknown manifold {manifold!r}")


def distance_to_center_t(z: Tensor, c: np.ndarray, manifold: str) -> Tensor:
    """Taped version of :func:`distance_to_center`."""
    if manifold == EUCLIDEAN:
        return dist_euclidean_t(z, c)
    if manifold == HYPERBOLIC:
        return dist_hyperbolic_t(z, c)
    if manifold == SPHERICAL:
        return dist_spherical_t(z, c)
    raise DomainError(f"unknown manifold {manifold!r}")
