from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from spherefm.alignlab import (
    METHOD_LAMBDA_ADV,
    METHOD_LAMBDA_COS,
    METHOD_LAMBDA_L1,
    METHOD_LAMBDA_LPIPS,
    METHOD_NOISE_TAU,
    ConflictConfig,
    FeaturePair,
    StageObjective,
    adversarial_loss,
    conflict_experiment,
    cosine_align_grad,
    cosine_align_loss,
    direction_decoder,
    linear_decoder,
    lpips_loss,
    mse_align_grad,
    mse_align_loss,
    noise_augment,
    rescale_probe,
    stage_objective,
)
from spherefm.errors import ConfigError, PluggableUnavailable, ShapeMismatch, ZeroPatch


def _pair(seed, shape=(5, 7)):
    rng = np.random.default_rng(seed)
    return FeaturePair(rng.standard_normal(shape), rng.standard_normal(shape))


def test_method_constants():
    assert (METHOD_LAMBDA_COS, METHOD_LAMBDA_L1, METHOD_LAMBDA_LPIPS, METHOD_LAMBDA_ADV, METHOD_NOISE_TAU) == (
        0.5, 1.0, 1.0, 0.5, 0.8)


def test_cosine_loss_examples():
    z = np.random.default_rng(0).standard_normal((4, 6))
    assert cosine_align_loss(FeaturePair(z, z)) == pytest.approx(0.0, abs=1e-15)
    assert cosine_align_loss(FeaturePair(-z, z)) == pytest.approx(2.0, abs=1e-15)
    for a in (0.01, 100.0):
        assert cosine_align_loss(FeaturePair(a * z, z)) == pytest.approx(0.0, abs=1e-15)


def test_cosine_loss_value_and_errors():
    p = _pair(1)
    want = np.mean([1 - np.cos(oracles.angle(s, t)) for s, t in zip(p.z_S, p.z_T)])
    assert cosine_align_loss(p) == pytest.approx(want, rel=1e-12)
    z = np.ones((2, 3))
    z[1] = 0
    with pytest.raises(ZeroPatch):
        cosine_align_loss(FeaturePair(z, np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        FeaturePair(np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(ShapeMismatch):
        FeaturePair(np.ones(3), np.ones(3))


def test_cosine_grad_finite_differences():
    p = _pair(2, (3, 4))
    g = cosine_align_grad(p)
    h = 1e-6
    for idx in np.ndindex(p.z_S.shape):
        zp, zm = p.z_S.copy(), p.z_S.copy()
        zp[idx] += h
        zm[idx] -= h
        fd = (cosine_align_loss(FeaturePair(zp, p.z_T)) - cosine_align_loss(FeaturePair(zm, p.z_T))) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-7 + 1e-6 * abs(fd)


def test_mse_examples():
    z = np.random.default_rng(3).standard_normal((4, 6))
    assert mse_align_loss(FeaturePair(z, z)) == 0.0
    assert mse_align_loss(FeaturePair(z + 0.3, z)) == pytest.approx(0.09, rel=1e-12)
    p = _pair(4)
    assert mse_align_loss(p) == pytest.approx(oracles.mean_sq(p.z_S, p.z_T), rel=1e-12)
    np.testing.assert_allclose(mse_align_grad(p), 2 * (p.z_S - p.z_T) / p.z_S.size)


def test_noise_augment_examples():
    z = np.random.default_rng(5).standard_normal((3, 4))
    np.testing.assert_array_equal(noise_augment(z, 0.0), z)
    a = noise_augment(z, 0.8, np.random.default_rng(1))
    b = noise_augment(z, 0.8, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigError):
        noise_augment(z, -0.1, np.random.default_rng(1))
    with pytest.raises(ConfigError):
        noise_augment(z, 0.5)


def test_noise_moment():
    z = np.zeros((100_000, 1, 64))
    out = noise_augment(z, METHOD_NOISE_TAU, np.random.default_rng(6))
    m = np.mean(np.sum(out**2, axis=(-2, -1)) / 64)
    assert abs(m / (METHOD_NOISE_TAU**2 / 3) - 1) < 0.02


def test_stage_objective_examples():
    v = stage_objective(StageObjective(1), recon_error=0.3, align_loss=0.2)
    assert v.total == pytest.approx(0.4, abs=1e-15)
    assert v.unavailable == ["lpips"]
    s3 = StageObjective(3)
    assert s3.encoder_frozen and "cos" not in s3.terms
    assert stage_objective(s3, 0.3, align_loss=0.2).total == pytest.approx(0.3)
    zero = StageObjective(2, 0.0, 0.0, 0.0, 0.0)
    assert stage_objective(zero, 5.0).total == 0.0
    assert StageObjective(4).noise_augmented and not StageObjective(3).noise_augmented


def test_stage_objective_uses_pair():
    p = _pair(7)
    v = stage_objective(StageObjective(1), 0.0, pair=p)
    assert v.terms["cos"] == pytest.approx(0.5 * cosine_align_loss(p))
    with pytest.raises(ConfigError):
        stage_objective(StageObjective(1), 0.1)
    with pytest.raises(ConfigError):
        StageObjective(5)
    with pytest.raises(ConfigError):
        StageObjective(1, lambda_cos=-1.0)


def test_pluggable_terms_unavailable():
    with pytest.raises(PluggableUnavailable):
        lpips_loss()
    with pytest.raises(PluggableUnavailable):
        adversarial_loss()


def test_conflict_ablation_arms_identical():
    cfg = ConflictConfig(lambda_align=0.0, steps=150, seeds=(0, 1), n_train=512, n_eval=256, log_every=50)
    rep = conflict_experiment(cfg)
    np.testing.assert_array_equal(rep.final("mse")[0], rep.final("cosine")[0])


def test_conflict_reproducible_and_csv(tmp_path):
    cfg = ConflictConfig(steps=100, seeds=(3,), n_train=512, n_eval=256, log_every=50)
    a, b = conflict_experiment(cfg), conflict_experiment(cfg)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv().splitlines()[0] == "arm,seed,step,recon_l1,align_cos"
    csv_path, summary = a.write(tmp_path / "c.csv")
    assert "norms vary per sample" in summary.read_text()


def test_conflict_config_validation():
    for kw in ({"n_patches": 2}, {"feature_dim": 64}, {"lambda_align": -1}, {"steps": 0}, {"lr": 0},
               {"norm_low": 3.0}, {"seeds": ()}):
        with pytest.raises(ConfigError):
            ConflictConfig(**kw)


def test_rescale_probe_examples():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((4, 6))
    W = rng.standard_normal((5, 6))
    alphas = [0.25, 0.5, 1.0, 1.7, 4.0]
    lin = rescale_probe(linear_decoder(W), z, alphas)
    ref = np.linalg.norm(z @ W.T)
    for a, d in zip(alphas, lin.deviations):
        assert abs(d - abs(a - 1) * ref) <= 1e-10 * max(ref, 1)
    assert lin.deviations[2] == 0.0
    dirn = rescale_probe(direction_decoder(lambda u: np.tanh(u @ W.T)), z, [0.5, 2.0, 4.0])
    assert dirn.deviations == [0.0, 0.0, 0.0]
    dirn = rescale_probe(direction_decoder(lambda u: np.tanh(u @ W.T)), z, [0.3, 1.7])
    assert max(dirn.deviations) <= 1e-14
    assert lin.to_csv().splitlines()[0] == "alpha,deviation,relative_deviation"
    with pytest.raises(ConfigError):
        rescale_probe(linear_decoder(W), z, [0.0])


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance_and_orthogonality(seed, alpha):
    p = _pair(seed, (3, 5))
    base = cosine_align_loss(p)
    assert abs(cosine_align_loss(FeaturePair(alpha * p.z_S, p.z_T)) - base) <= 1e-12
    g = cosine_align_grad(p)
    dots = np.abs(np.sum(g * p.z_S, axis=-1))
    assert np.all(dots <= 1e-9 * np.linalg.norm(g) * np.linalg.norm(p.z_S, axis=-1))
