"""Randomized invariant sweeps, grouped into suites by module.

Each check measures a worst-case quantity over random trials and compares it
with a tolerance.  ``run_suites`` drives them; ``inject_fault`` names a suite
whose measurements get a large additive error, so the failure path of the
driver can itself be exercised.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import alignlab, datasets, evalsuite, flowpath, geometry, sampler, trainer, velocitynet

FAULT = 1.0


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    measured: float
    tolerance: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite}.{self.name}: {self.measured:.3e} (tol {self.tolerance:.1e})"


def _pairs(rng, n, n_patches=3, dim=8, radius=None, max_angle=None):
    r = geometry.default_radius(dim) if radius is None else radius
    x0 = geometry.sample_prior(n_patches, dim, r, rng, size=n)
    x1 = geometry.sample_prior(n_patches, dim, r, rng, size=n)
    if max_angle is not None:
        # pull x1 toward x0 so every patch angle stays below max_angle
        om = geometry.angular_distance(x0, x1)
        frac = np.minimum(1.0, max_angle / np.maximum(om, 1e-300)) * 0.999
        x1 = geometry.exp_map(x0, frac[..., None] * geometry.log_map(x0, x1, r), r)
    return x0, x1, r


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-300))


# --- geometry ---------------------------------------------------------------


def geometry_on_manifold(rng, n):
    x0, x1, r = _pairs(rng, n, max_angle=3.0)
    t = rng.uniform(size=n)
    v = geometry.tangent_project(rng.standard_normal(x0.shape), x0)
    outs = [geometry.slerp(x0, x1, t, r), geometry.exp_map(x0, v, r), geometry.project_to_sphere(x1 * 3.7, r)]
    return max(float(np.max(np.abs(geometry.patch_norms(o) - r))) / r for o in outs), 1e-9


def geometry_tangency(rng, n):
    x0, x1, r = _pairs(rng, n, max_angle=3.0)
    v = geometry.tangent_project(rng.standard_normal(x0.shape) * 5, x0)
    lg = geometry.log_map(x0, x1, r)
    return max(float(np.max(geometry.tangency_residual(f, x0))) for f in (v, lg)), 1e-12


def geometry_slerp_exp_log(rng, n):
    x0, x1, r = _pairs(rng, n, max_angle=3.0)
    worst = 0.0
    lg = geometry.log_map(x0, x1, r)
    for t in np.arange(1, 10) / 10:
        a = geometry.slerp(x0, x1, t, r)
        b = geometry.exp_map(x0, t * lg, r)
        worst = max(worst, float(np.max(np.abs(a - b))) / r)
    return worst, 1e-10


def geometry_roundtrip(rng, n):
    x0, x1, r = _pairs(rng, n, max_angle=3.0)
    back = geometry.exp_map(x0, geometry.log_map(x0, x1, r), r)
    return float(np.max(np.abs(back - x1))) / r, 1e-9


def geometry_symmetry(rng, n):
    x0, x1, r = _pairs(rng, n, max_angle=3.0)
    t = rng.uniform(size=n)
    d = float(np.max(np.abs(geometry.angular_distance(x0, x1) - geometry.angular_distance(x1, x0))))
    s = float(np.max(np.abs(geometry.slerp(x0, x1, t, r) - geometry.slerp(x1, x0, 1 - t, r)))) / r
    return max(d, s), 1e-12


def geometry_scale_covariance(rng, n):
    x0, x1, r = _pairs(rng, n, max_angle=3.0)
    t = rng.uniform(size=n)
    alpha = 2.75
    a = geometry.slerp(alpha * x0, alpha * x1, t, alpha * r)
    b = alpha * geometry.slerp(x0, x1, t, r)
    return _rel(a, b), 1e-12


# --- flowpath ---------------------------------------------------------------


def flowpath_premetric(rng, n):
    x0, x1, r = _pairs(rng, n, max_angle=3.0)
    t = rng.uniform(size=n)
    xt = flowpath.conditional_point(x0, x1, t)
    lhs = geometry.geodesic_distance(xt, x1, r)
    d0 = geometry.geodesic_distance(x0, x1, r)
    rhs = flowpath.kappa(t)[:, None] * d0
    # relative to the initial distance; kappa(t) d0 itself vanishes as t -> 1
    return float(np.max(np.abs(lhs - rhs) / d0)), 1e-8


def flowpath_velocity_fd(rng, n):
    x0, x1, r = _pairs(rng, n, max_angle=3.0)
    t = rng.uniform(0.01, 0.99, size=n)
    h = 1e-5
    fd = (geometry.slerp(x0, x1, t + h, r) - geometry.slerp(x0, x1, t - h, r)) / (2 * h)
    u = flowpath.target_velocity(x0, x1, t)
    err = geometry.patch_norms(u - fd) / np.maximum(geometry.patch_norms(u), 1e-300)
    return float(np.max(err)), 1e-6


def flowpath_constant_speed(rng, n):
    x0, x1, r = _pairs(rng, n, max_angle=3.0)
    speed = r * geometry.angular_distance(x0, x1)
    worst = 0.0
    for t in np.arange(1, 10) / 10:
        u = flowpath.target_velocity(x0, x1, t)
        worst = max(worst, float(np.max(np.abs(geometry.patch_norms(u) - speed) / speed)))
    return worst, 1e-8


def flowpath_path_sample(rng, n):
    data = geometry.sample_prior(3, 8, geometry.default_radius(8), rng, size=n)
    ps = flowpath.make_path_sample(data, rng)
    tan = float(np.max(geometry.tangency_residual(ps.u_t, ps.x_t)))
    return tan, 1e-10


def flowpath_loss_identity(rng, n):
    x0, x1, _ = _pairs(rng, n)
    u = flowpath.target_velocity(x0, x1, 0.3)
    same = flowpath.rfm_loss(u, u)
    other = flowpath.rfm_loss(u, -u)
    return same + (0.0 if other > 0 else 1.0), 1e-14


# --- velocitynet / trainer -------------------------------------------------------


def _tiny_net(rng, n_classes=0):
    spec = velocitynet.NetSpec(n_patches=2, dim=3, hidden=(8, 8), time_feat_dim=4, n_classes=n_classes, class_embed_dim=3)
    net = velocitynet.init_params(spec, rng)
    net.params += 0.3 * rng.standard_normal(net.params.shape)
    return net


def velocitynet_gradient(rng, n):
    net = _tiny_net(rng, n_classes=3)
    data = geometry.sample_prior(2, 3, geometry.default_radius(3), rng, size=4)
    batch = flowpath.make_path_sample(data, rng)
    y = rng.integers(0, 3, size=4)
    g = velocitynet.loss_and_grad(net, batch, y).grad
    worst = 0.0
    h = 1e-6
    idx = rng.choice(len(net.params), size=min(n, len(net.params)), replace=False)
    for i in idx:
        old = net.params[i]
        net.params[i] = old + h
        lp = velocitynet.loss_and_grad(net, batch, y).loss
        net.params[i] = old - h
        lm = velocitynet.loss_and_grad(net, batch, y).loss
        net.params[i] = old
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), 1e-3))
    return worst, 1e-4


def velocitynet_zero_head(rng, n):
    spec = velocitynet.NetSpec(n_patches=2, dim=3, hidden=(16,))
    net = velocitynet.init_params(spec, rng)
    x = geometry.sample_prior(2, 3, 1.0, rng, size=n)
    return float(np.max(np.abs(velocitynet.forward(net, x, rng.uniform(size=n))))), 0.0


def velocitynet_permutation(rng, n):
    net = _tiny_net(rng)
    data = geometry.sample_prior(2, 3, geometry.default_radius(3), rng, size=32)
    batch = flowpath.make_path_sample(data, rng)
    perm = rng.permutation(32)
    shuffled = flowpath.PathSample(batch.x_t[perm], batch.u_t[perm], batch.t[perm], batch.reverse_time)
    a = velocitynet.loss_and_grad(net, batch)
    b = velocitynet.loss_and_grad(net, shuffled)
    return max(abs(a.loss - b.loss), float(np.max(np.abs(a.grad - b.grad)))), 1e-12


def trainer_clip(rng, n):
    worst = 0.0
    for _ in range(n):
        g = rng.standard_normal(50) * rng.uniform(0.1, 100)
        clipped, norm = trainer.clip_grad_norm(g, 1.0)
        if norm > 1.0:
            worst = max(worst, float(np.linalg.norm(clipped)) - 1.0)
    return worst, 1e-12


def trainer_resume(rng, n):
    ds = datasets.gen_vmf_mixture(256, 1, 3, geometry.default_radius(3),
                                  [datasets.VMFComponent((1.0, 0.0, 0.0), 10.0, 1.0)], seed=int(rng.integers(1 << 30)))
    spec = velocitynet.NetSpec(1, 3, hidden=(16, 16))
    cfg = trainer.TrainConfig(total_steps=20, batch_size=32, checkpoint_every=10, log_every=5)
    with tempfile.TemporaryDirectory() as tmp:
        full = trainer.run_training(ds, cfg, Path(tmp) / "a", spec)
        part = trainer.run_training(ds, cfg, Path(tmp) / "b", spec, resume=Path(tmp) / "a" / "checkpoint_00000010.sfm")
        return float(np.max(np.abs(full.net.params - part.net.params))), 0.0


# --- sampler ----------------------------------------------------------------


def sampler_oracle_convergence(rng, n):
    r = geometry.default_radius(4)
    x0, x1, _ = _pairs(rng, 1, n_patches=2, dim=4, radius=r, max_angle=0.75 * np.pi)
    x0, x1 = x0[0], x1[0]
    om0 = float(np.max(geometry.angular_distance(x0, x1)))
    field = flowpath.conditional_field(x1, r)
    traj = sampler.integrate(_guard(field), x0, sampler.SampleConfig(steps=50), r)
    err = float(np.max(geometry.geodesic_distance(traj.final, x1, r)))
    return err / (r * om0), 1e-2


def _guard(field):
    """Keep the analytic field finite at t = 1, where it is never evaluated by Euler anyway."""

    def f(x, t, y=None):
        t = np.minimum(np.asarray(t, dtype=float), 1.0 - 1e-12)
        return field(x, t, y)

    return f


def sampler_rodrigues_on_sphere(rng, n):
    r = geometry.default_radius(4)
    x1 = geometry.sample_prior(2, 4, r, rng)
    x0 = geometry.sample_prior(2, 4, r, rng)
    traj = sampler.sample_rodrigues(_guard(flowpath.conditional_field(x1, r)),
                                    sampler.SampleConfig(steps=50, record=True), 2, 4, r, x_init=x0)
    return max(float(np.max(np.abs(geometry.patch_norms(s) - r))) / r for s in traj.states), 1e-12


def sampler_tangent_safety(rng, n):
    r = geometry.default_radius(4)
    x0 = geometry.sample_prior(2, 4, r, rng, size=n)

    def radial_heavy(x, t, y=None):
        return 1e3 * x + np.roll(x, 1, axis=-1)

    traj = sampler.integrate(radial_heavy, x0, sampler.SampleConfig(steps=10), r)
    return traj.max_tangent_residual, 1e-10


def sampler_reverse_equivalence(rng, n):
    r = geometry.default_radius(4)
    x1 = geometry.sample_prior(2, 4, r, rng)
    x0 = geometry.sample_prior(2, 4, r, rng, size=n)
    f = _guard(flowpath.conditional_field(x1, r))
    fwd = sampler.integrate(f, x0, sampler.SampleConfig(steps=64), r).final
    rev = sampler.integrate(flowpath.mirror_field(f), x0, sampler.SampleConfig(steps=64, reverse_time=True), r).final
    return float(np.max(np.abs(fwd - rev))), 0.0


# --- alignlab ---------------------------------------------------------------


def alignlab_scale_invariance(rng, n):
    zs = rng.standard_normal((n, 4, 16))
    zt = rng.standard_normal((n, 4, 16))
    base = alignlab.cosine_align_loss(alignlab.FeaturePair(zs, zt))
    worst = 0.0
    for a in (1e-3, 0.37, 5.0, 1e3):
        worst = max(worst, abs(alignlab.cosine_align_loss(alignlab.FeaturePair(a * zs, zt)) - base))
    return worst, 1e-12


def alignlab_orthogonality(rng, n):
    zs = rng.standard_normal((n, 4, 16))
    zt = rng.standard_normal((n, 4, 16))
    g = alignlab.cosine_align_grad(alignlab.FeaturePair(zs, zt))
    dot = np.abs(np.einsum("...c,...c->...", g, zs))
    bound = np.linalg.norm(g.reshape(-1)) * np.linalg.norm(zs, axis=-1)
    return float(np.max(dot / bound)), 1e-9


def alignlab_noise_mean(rng, n):
    z = np.zeros((max(n, 1000), 1, 8))
    d = alignlab.noise_augment(z, 0.8, rng) - z
    se = d.std(axis=0) / np.sqrt(len(d))
    return float(np.max(np.abs(d.mean(axis=0)) / se)), 3.0


# --- datasets ---------------------------------------------------------------


def datasets_on_manifold(rng, n):
    r = 2.5
    comps = [datasets.VMFComponent(tuple(m), 5.0, 0.5) for m in datasets.default_means(2, 4)]
    ds = datasets.gen_vmf_mixture(max(n, 100), 3, 4, r, comps, seed=int(rng.integers(1 << 30)))
    cb = datasets.gen_checkerboard_s2(max(n, 100), 3, r, seed=int(rng.integers(1 << 30)))
    return max(evalsuite.manifold_residual(ds.samples, r), evalsuite.manifold_residual(cb.samples, r)), 1e-12


def datasets_vmf_moment(rng, n):
    m = max(n, 20000)
    worst = 0.0
    for kappa in (0.5, 5.0, 50.0):
        w = datasets.sample_vmf((0.0, 0.0, 1.0), kappa, m, rng)[:, 2]
        z = abs(w.mean() - datasets.vmf_mean_resultant(kappa, 3)) / (w.std() / np.sqrt(m))
        worst = max(worst, float(z))
    return worst, 3.0


def datasets_determinism(rng, n):
    seed = int(rng.integers(1 << 30))
    a = datasets.gen_checkerboard_s2(200, 2, 1.0, seed)
    b = datasets.gen_checkerboard_s2(200, 2, 1.0, seed)
    return float(np.max(np.abs(a.samples - b.samples))) + float(np.any(a.labels != b.labels)), 0.0


# --- evalsuite --------------------------------------------------------------


def evalsuite_symmetry(rng, n):
    a = geometry.sample_prior(2, 3, 1.0, rng, size=40)
    b = geometry.sample_prior(2, 3, 1.0, rng, size=50)
    m1, q1, _ = evalsuite.geodesic_mmd(a, b, n_permutations=50, seed=3)
    m2, q2, _ = evalsuite.geodesic_mmd(b, a, n_permutations=50, seed=3)
    return max(abs(m1 - m2), abs(q1 - q2)), 1e-12


def evalsuite_kernel(rng, n):
    a = geometry.sample_prior(2, 3, 1.0, rng, size=n)
    d = evalsuite.mean_geodesic_distance(a, a)
    k = np.exp(-(d**2) / 2.0)
    diag = float(np.max(np.abs(np.diag(k) - 1.0)))
    out_of_range = float(np.any(k <= 0) or np.any(k > 1))
    return diag + out_of_range, 1e-12


Check = Callable[[np.random.Generator, int], tuple[float, float]]

SUITES: dict[str, list[tuple[str, Check, int]]] = {
    "geometry": [
        ("on_manifold", geometry_on_manifold, 2000),
        ("tangency", geometry_tangency, 2000),
        ("slerp_exp_log", geometry_slerp_exp_log, 2000),
        ("exp_log_roundtrip", geometry_roundtrip, 2000),
        ("symmetry", geometry_symmetry, 2000),
        ("scale_covariance", geometry_scale_covariance, 2000),
    ],
    "flowpath": [
        ("premetric", flowpath_premetric, 1000),
        ("velocity_fd", flowpath_velocity_fd, 1000),
        ("constant_speed", flowpath_constant_speed, 1000),
        ("path_sample_tangent", flowpath_path_sample, 1000),
        ("loss_identity", flowpath_loss_identity, 100),
    ],
    "velocitynet": [
        ("gradient_fd", velocitynet_gradient, 200),
        ("zero_head", velocitynet_zero_head, 100),
        ("batch_permutation", velocitynet_permutation, 1),
    ],
    "trainer": [
        ("clip_norm", trainer_clip, 200),
        ("resume_bit_exact", trainer_resume, 1),
    ],
    "sampler": [
        ("oracle_convergence", sampler_oracle_convergence, 1),
        ("rodrigues_on_sphere", sampler_rodrigues_on_sphere, 1),
        ("tangent_safety", sampler_tangent_safety, 100),
        ("reverse_time_equivalence", sampler_reverse_equivalence, 50),
    ],
    "alignlab": [
        ("scale_invariance", alignlab_scale_invariance, 2000),
        ("gradient_orthogonality", alignlab_orthogonality, 2000),
        ("noise_zero_mean", alignlab_noise_mean, 20000),
    ],
    "datasets": [
        ("on_manifold", datasets_on_manifold, 500),
        ("vmf_first_moment", datasets_vmf_moment, 20000),
        ("determinism", datasets_determinism, 1),
    ],
    "evalsuite": [
        ("mmd_symmetry", evalsuite_symmetry, 1),
        ("kernel_range", evalsuite_kernel, 200),
    ],
}


def run_suites(names=None, seed: int = 0, inject_fault: str | None = None, scale: float = 1.0) -> list[CheckResult]:
    """Run the named suites (all by default); each check gets its own seeded stream."""
    names = list(SUITES) if not names else list(names)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {unknown}; available: {sorted(SUITES)}")
    results = []
    for si, suite in enumerate(names):
        for ci, (name, fn, n) in enumerate(SUITES[suite]):
            rng = np.random.default_rng(np.random.SeedSequence([seed, si, ci]))
            measured, tol = fn(rng, max(1, int(n * scale)))
            if inject_fault == suite:
                measured += FAULT
            results.append(CheckResult(suite, name, bool(measured <= tol), float(measured), float(tol)))
    return results
