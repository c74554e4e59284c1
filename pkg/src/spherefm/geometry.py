"""Product-of-spheres primitives.

A latent field is an array of shape ``(..., N, C)``: ``N`` patches, each a
point on the sphere of radius ``R`` in ``R^C``.  Leading axes are batch axes
and every operation here broadcasts over them.  Tangent fields share the
shape of the point they are attached to.

All functions are pure; randomness only enters through an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import numpy as np

from .errors import AntipodalPatch, NotTangent, ShapeMismatch, ZeroPatch

EPS_ZERO = 1e-12
EPS_PARALLEL = 1e-7
EPS_ANTIPODAL = 1e-6
# consistency between the two radii of a pair, and tangency for exp_map
RADIUS_RTOL = 1e-6
TANGENT_TOL = 1e-8


def default_radius(dim: int) -> float:
    """Sphere radius used when none is configured: sqrt(C), the typical norm of a C-dim Gaussian."""
    return float(np.sqrt(dim))


def _tol(dtype, base: float) -> float:
    # single precision runs get tolerances relaxed by 1e3
    return base * 1e3 if np.dtype(dtype) == np.float32 else base


def patch_norms(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=-1)


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...c,...c->...", a, b)


def _check_field(x: np.ndarray, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeMismatch(f"{name} must have shape (..., N, C), got {x.shape}")
    if x.shape[-1] < 2:
        raise ShapeMismatch(f"{name} needs patch dimension C >= 2, got {x.shape[-1]}")
    return x


def _check_pair(x0, x1, radius=None):
    x0 = _check_field(x0, "x0")
    x1 = _check_field(x1, "x1")
    if x0.shape != x1.shape:
        raise ShapeMismatch(f"shape mismatch: {x0.shape} vs {x1.shape}")
    n0 = patch_norms(x0)
    n1 = patch_norms(x1)
    r = float(n0.flat[0]) if radius is None else float(radius)
    tol = _tol(x0.dtype, RADIUS_RTOL) * r
    if np.any(np.abs(n0 - r) > tol) or np.any(np.abs(n1 - r) > tol):
        raise ShapeMismatch(
            f"radius mismatch: expected {r}, got norms in "
            f"[{min(n0.min(), n1.min())}, {max(n0.max(), n1.max())}]"
        )
    return x0, x1, r


def project_to_sphere(v, radius: float, eps_zero: float = EPS_ZERO) -> np.ndarray:
    """Scale every patch of ``v`` to norm ``radius``.

    Raises:
        ZeroPatch: if a patch has norm <= ``eps_zero``.
    """
    v = _check_field(v, "v")
    norms = patch_norms(v)
    if np.any(norms <= eps_zero):
        bad = np.argwhere(norms <= eps_zero)
        raise ZeroPatch(f"{len(bad)} patch(es) with norm <= {eps_zero}, first at index {tuple(bad[0])}")
    return v * (radius / norms)[..., None]


def angular_distance(x0, x1, radius: float | None = None) -> np.ndarray:
    """Per-patch arc angle in [0, pi], shape ``(..., N)``.

    Evaluated as ``2 * atan2(|x0 - x1|, |x0 + x1|)``, which equals
    ``arccos(<x0, x1> / R^2)`` for equal-norm inputs but stays accurate near
    0 and pi, where arccos of a rounded dot product loses about half the digits.
    """
    x0, x1, _ = _check_pair(x0, x1, radius)
    return _omega(x0, x1)


def _omega(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    return 2.0 * np.arctan2(patch_norms(x0 - x1), patch_norms(x0 + x1))


def geodesic_distance(x0, x1, radius: float | None = None) -> np.ndarray:
    x0, x1, r = _check_pair(x0, x1, radius)
    return r * _omega(x0, x1)


def _raise_if_antipodal(omega: np.ndarray, eps_antipodal: float) -> None:
    close = np.pi - omega < eps_antipodal
    if np.any(close):
        idx = tuple(np.argwhere(close)[0])
        raise AntipodalPatch(
            f"{int(close.sum())} antipodal patch(es) (pi - omega < {eps_antipodal}), first at {idx}"
        )


def _time_like(t, x: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-batch time to ``(..., 1, 1)``."""
    t = np.asarray(t, dtype=x.dtype)
    return t[..., None, None]


def slerp(
    x0,
    x1,
    t,
    radius: float | None = None,
    eps_parallel: float = EPS_PARALLEL,
    eps_antipodal: float = EPS_ANTIPODAL,
) -> np.ndarray:
    """Geodesic interpolation between ``x0`` (t=0) and ``x1`` (t=1), patch by patch.

    ``t`` may be a scalar or an array matching the leading batch axes.
    Nearly parallel patches fall back to lerp followed by re-projection.
    """
    x0, x1, r = _check_pair(x0, x1, radius)
    tt = _time_like(t, x0)
    if np.any((tt < 0) | (tt > 1)):
        raise ValueError("slerp time must lie in [0, 1]")
    omega = _omega(x0, x1)
    _raise_if_antipodal(omega, eps_antipodal)
    om = omega[..., None]
    near = om < eps_parallel
    s = np.where(near, 1.0, np.sin(om))
    a = np.sin((1.0 - tt) * om) / s
    b = np.sin(tt * om) / s
    out = a * x0 + b * x1
    if np.any(near):
        lerp = (1.0 - tt) * x0 + tt * x1
        lerp = lerp * (r / patch_norms(lerp))[..., None]
        out = np.where(near, lerp, out)
    return out


def tangent_project(v, x) -> np.ndarray:
    """Remove the radial component of ``v`` at ``x``: ``v - <v, x>/|x|^2 * x``."""
    v = np.asarray(v)
    x = _check_field(x, "x")
    if v.shape != x.shape:
        raise ShapeMismatch(f"shape mismatch: v {v.shape} vs x {x.shape}")
    coef = _dot(v, x) / _dot(x, x)
    return v - coef[..., None] * x


def tangency_residual(v, x) -> np.ndarray:
    """Per-patch ``|<v, x>| / (|x| |v|)``; zero-norm patches report 0."""
    v = np.asarray(v)
    x = np.asarray(x)
    denom = patch_norms(x) * patch_norms(v)
    num = np.abs(_dot(v, x))
    return np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)


def exp_map(
    x,
    v,
    radius: float | None = None,
    eps_zero: float = EPS_ZERO,
    tangent_tol: float | None = TANGENT_TOL,
) -> np.ndarray:
    """Move along the great circle from ``x`` with initial velocity ``v`` for unit time.

    Per patch: ``cos(theta) x + sin(theta) R v/|v|`` with ``theta = |v| / R``.
    Pass ``tangent_tol=None`` to skip the tangency check.
    """
    x = _check_field(x, "x")
    v = np.asarray(v)
    if v.shape != x.shape:
        raise ShapeMismatch(f"shape mismatch: v {v.shape} vs x {x.shape}")
    r = patch_norms(x) if radius is None else np.full(x.shape[:-1], float(radius))
    vn = patch_norms(v)
    if tangent_tol is not None:
        res = tangency_residual(v, x)
        tol = _tol(x.dtype, tangent_tol)
        if np.any(res > tol):
            raise NotTangent(f"velocity not tangent: max |<v,x>|/(|x||v|) = {res.max():.3e} > {tol:.1e}")
    moving = vn >= eps_zero
    safe_vn = np.where(moving, vn, 1.0)
    theta = (vn / r)[..., None]
    step = np.cos(theta) * x + np.sin(theta) * (r / safe_vn)[..., None] * v
    return np.where(moving[..., None], step, x)


def log_map(
    x,
    y,
    radius: float | None = None,
    eps_parallel: float = EPS_PARALLEL,
    eps_antipodal: float = EPS_ANTIPODAL,
) -> np.ndarray:
    """Tangent vector at ``x`` pointing along the geodesic to ``y`` with length ``R * omega``.

    Mathematically ``(omega / sin omega) (y - cos(omega) x)``; evaluated as
    ``R omega`` times the unit tangent direction so the norm is exact.
    """
    x, y, r = _check_pair(x, y, radius)
    omega = _omega(x, y)
    _raise_if_antipodal(omega, eps_antipodal)
    direction = tangent_project(y, x)
    dn = patch_norms(direction)
    near = omega < eps_parallel
    safe = np.where(near | (dn == 0), 1.0, dn)
    out = (r * omega / safe)[..., None] * direction
    if np.any(near):
        out = np.where(near[..., None], tangent_project(y - x, x), out)
    return out


def sample_prior(
    n_patches: int,
    dim: int,
    radius: float,
    rng: np.random.Generator,
    size: int | tuple[int, ...] = (),
    dtype=np.float64,
    eps_zero: float = EPS_ZERO,
) -> np.ndarray:
    """Uniform draw on each sphere: Gaussian patches projected to radius ``R``.

    Output shape is ``(*size, n_patches, dim)``.
    """
    if n_patches < 1 or dim < 2 or radius <= 0:
        raise ValueError(f"need N >= 1, C >= 2, R > 0; got N={n_patches}, C={dim}, R={radius}")
    size = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
    z = rng.standard_normal((*size, n_patches, dim))
    bad = patch_norms(z) <= eps_zero
    while np.any(bad):
        z[bad] = rng.standard_normal((int(bad.sum()), dim))
        bad = patch_norms(z) <= eps_zero
    return project_to_sphere(z, radius).astype(dtype, copy=False)
