"""Geodesic conditional paths, their target velocities and the regression loss.

Internally the prior sits at ``t = 0`` and data at ``t = 1``.  Passing
``reverse_time=True`` expresses times and velocities in the mirrored
convention (prior at 1, data at 0): ``t -> 1 - t`` and ``u -> -u``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import AntipodalPatch, BaseMismatch, OutOfRange, ShapeMismatch
from .geometry import (
    EPS_ANTIPODAL,
    EPS_PARALLEL,
    _check_pair,
    _omega,
    _time_like,
    exp_map,
    log_map,
    patch_norms,
    sample_prior,
    slerp,
    tangency_residual,
    tangent_project,
)

Field = Callable[[np.ndarray, "np.ndarray | float", "np.ndarray | int | None"], np.ndarray]


@dataclass(frozen=True)
class Scheduler:
    """Distance schedule kappa(t) with kappa(0) = 1, kappa(1) = 0."""

    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError(f"unknown scheduler kind {self.kind!r}")


LINEAR = Scheduler("linear")


def kappa(t, sched: Scheduler = LINEAR):
    t_arr = np.asarray(t, dtype=float)
    if np.any((t_arr < 0) | (t_arr > 1)) or np.any(np.isnan(t_arr)):
        raise OutOfRange(f"time outside [0, 1]: {t}")
    return 1.0 - t_arr if t_arr.ndim else float(1.0 - t_arr)


def conditional_point(x0, x1, t, sched: Scheduler = LINEAR) -> np.ndarray:
    """``exp_{x1}(kappa(t) * log_{x1}(x0))``: the point whose distance to ``x1`` is kappa(t) d(x0, x1)."""
    x0, x1, r = _check_pair(x0, x1)
    k = np.asarray(kappa(t, sched))
    back = log_map(x1, x0, r)
    return exp_map(x1, k[..., None, None] * back, r)


def target_velocity(
    x0,
    x1,
    t,
    eps_parallel: float = EPS_PARALLEL,
    eps_antipodal: float = EPS_ANTIPODAL,
) -> np.ndarray:
    """Time derivative of ``slerp(x0, x1, t)``.

    ``(omega / sin omega) (cos(t omega) x1 - cos((1 - t) omega) x0)`` per patch,
    with norm ``R * omega`` for every t.
    """
    x0, x1, r = _check_pair(x0, x1)
    tt = _time_like(t, x0)
    omega = _omega(x0, x1)
    if np.any(np.pi - omega < eps_antipodal):
        raise AntipodalPatch(f"antipodal patch (pi - omega < {eps_antipodal})")
    om = omega[..., None]
    near = om < eps_parallel
    ratio = np.where(near, 1.0, om / np.where(near, 1.0, np.sin(om)))
    u = ratio * (np.cos(tt * om) * x1 - np.cos((1.0 - tt) * om) * x0)
    if np.any(near):
        xt = slerp(x0, x1, t, r)
        u = np.where(near, tangent_project(x1 - x0, xt), u)
    return u


def rfm_loss(v_pred, u_target, base=None, tangent_tol: float = 1e-8) -> float:
    """Patch-mean squared error ``(1/N) sum_i |v_i - u_i|^2``, averaged over any batch axes.

    When ``base`` is given both fields must be tangent there, otherwise
    ``BaseMismatch`` is raised.
    """
    v_pred = np.asarray(v_pred)
    u_target = np.asarray(u_target)
    if v_pred.shape != u_target.shape:
        raise ShapeMismatch(f"shape mismatch: {v_pred.shape} vs {u_target.shape}")
    if base is not None:
        base = np.asarray(base)
        if base.shape != v_pred.shape:
            raise ShapeMismatch(f"base shape {base.shape} vs field shape {v_pred.shape}")
        for name, f in (("v_pred", v_pred), ("u_target", u_target)):
            res = tangency_residual(f, base)
            if np.any(res > tangent_tol):
                raise BaseMismatch(f"{name} is not tangent at the given base (residual {res.max():.2e})")
    sq = np.sum((v_pred - u_target) ** 2, axis=-1)
    return float(np.mean(sq))


@dataclass
class PathSample:
    """Training triple (x_t, u_t, t); arrays may carry a leading batch axis.

    ``t`` and ``u_t`` are expressed in the convention given by ``reverse_time``.
    """

    x_t: np.ndarray
    u_t: np.ndarray
    t: np.ndarray
    reverse_time: bool = False

    @property
    def internal_t(self) -> np.ndarray:
        return 1.0 - self.t if self.reverse_time else self.t

    @property
    def internal_u(self) -> np.ndarray:
        return -self.u_t if self.reverse_time else self.u_t

    def __len__(self) -> int:
        return 1 if np.ndim(self.t) == 0 else len(self.t)


def stack_samples(samples: Sequence[PathSample]) -> PathSample:
    if not samples:
        raise ValueError("cannot stack an empty list of samples")
    rev = {s.reverse_time for s in samples}
    if len(rev) != 1:
        raise ValueError("mixed time conventions in one batch")

    def cat(arrs, extra):
        return np.concatenate([np.reshape(a, (-1, *np.shape(a)[np.ndim(a) - extra :])) for a in arrs])

    return PathSample(
        x_t=cat([s.x_t for s in samples], 2),
        u_t=cat([s.u_t for s in samples], 2),
        t=np.concatenate([np.atleast_1d(s.t) for s in samples]),
        reverse_time=rev.pop(),
    )


def make_path_sample(
    x_data,
    rng: np.random.Generator,
    time_dist: str = "uniform",
    reverse_time: bool = False,
    radius: float | None = None,
    t=None,
    max_retries: int = 8,
) -> PathSample:
    """Draw a prior endpoint and a time, and return the point and velocity on the geodesic.

    ``x_data`` may be one field ``(N, C)`` or a batch ``(B, N, C)``; each batch
    element gets its own prior draw and time.  Prior draws that land antipodal to
    the data are redrawn (at most ``max_retries`` times).
    """
    x1 = np.asarray(x_data, dtype=float)
    if x1.ndim < 2:
        raise ShapeMismatch(f"data must have shape (..., N, C), got {x1.shape}")
    batch_shape = x1.shape[:-2]
    n_patches, dim = x1.shape[-2:]
    r = float(patch_norms(x1).flat[0]) if radius is None else float(radius)

    x0 = sample_prior(n_patches, dim, r, rng, size=batch_shape)
    for attempt in range(max_retries + 1):
        bad = np.any(np.pi - _omega(x0, x1) < EPS_ANTIPODAL, axis=-1)
        if not np.any(bad):
            break
        if attempt == max_retries:
            raise AntipodalPatch(f"prior draw antipodal to data after {max_retries} retries")
        x0[bad] = sample_prior(n_patches, dim, r, rng, size=int(bad.sum()))

    if t is None:
        if time_dist != "uniform":
            raise ValueError(f"unknown time distribution {time_dist!r}")
        t_conv = rng.uniform(0.0, 1.0, size=batch_shape)
    else:
        t_conv = np.broadcast_to(np.asarray(t, dtype=float), batch_shape).copy()
    t_int = 1.0 - t_conv if reverse_time else t_conv

    x_t = slerp(x0, x1, t_int, r)
    u_t = target_velocity(x0, x1, t_int)
    if reverse_time:
        u_t = -u_t
    return PathSample(x_t=x_t, u_t=u_t, t=t_conv, reverse_time=reverse_time)


@dataclass(frozen=True)
class TimeSchedule:
    steps: np.ndarray
    direction: str
    shift: float

    @property
    def n_steps(self) -> int:
        return len(self.steps) - 1


def shift_map(u, shift: float):
    """Rational time shift ``s u / (1 + (s - 1) u)``; identity for s = 1."""
    u = np.asarray(u, dtype=float)
    return shift * u / (1.0 + (shift - 1.0) * u)


def time_schedule(n_steps: int, shift: float = 1.0, direction: str = "forward") -> TimeSchedule:
    if n_steps < 1 or not shift > 0:
        raise OutOfRange(f"need T >= 1 and shift > 0, got T={n_steps}, shift={shift}")
    if direction not in ("forward", "reverse"):
        raise OutOfRange(f"direction must be 'forward' or 'reverse', got {direction!r}")
    u = np.arange(n_steps + 1, dtype=float) / n_steps
    steps = u if shift == 1.0 else shift_map(u, shift)
    steps[0], steps[-1] = 0.0, 1.0
    if direction == "reverse":
        steps = steps[::-1].copy()
    return TimeSchedule(steps=steps, direction=direction, shift=float(shift))


def conditional_field(x1, radius: float | None = None) -> Field:
    """Analytic conditional velocity toward a fixed target: ``log_x(x1) / (1 - t)``.

    Following it from any ``x`` at time ``t`` traces the geodesic to ``x1`` and
    arrives at ``t = 1``.
    """
    x1 = np.asarray(x1, dtype=float)

    def field(x, t, y=None):
        t = np.asarray(t, dtype=float)
        target = np.broadcast_to(x1, x.shape)
        return log_map(x, target, radius) / (1.0 - t)[..., None, None]

    return field


def mirror_field(field: Field) -> Field:
    """Express an internal-convention field in reversed time: ``g(x, s) = -f(x, 1 - s)``."""

    def mirrored(x, t, y=None):
        return -field(x, 1.0 - np.asarray(t, dtype=float), y)

    return mirrored
