"""Directional feature alignment: cosine and MSE alignment losses, latent noise
augmentation, staged objectives, and two small experiments.

``conflict_experiment`` trains a linear autoencoder whose latent is pulled
towards a frozen teacher either with MSE or with the cosine loss.  Each
teacher feature has a random per-sample magnitude drawn from U(0.5, 2), which
a linear encoder cannot follow.  Only the MSE arm is asked to, and the
leftover per-sample residual keeps pushing on the shared encoder.
``rescale_probe`` measures how a decoder's output responds to rescaling its
latent input.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .errors import ConfigError, PluggableUnavailable, ShapeMismatch, ZeroPatch
from .geometry import EPS_ZERO

# Loss weights and noise threshold stated for the source training recipe.
METHOD_LAMBDA_COS = 0.5
METHOD_LAMBDA_L1 = 1.0
METHOD_LAMBDA_LPIPS = 1.0
METHOD_LAMBDA_ADV = 0.5
METHOD_NOISE_TAU = 0.8


@dataclass
class FeaturePair:
    """Student and teacher features of equal shape ``(..., N, C)``."""

    z_S: np.ndarray
    z_T: np.ndarray

    def __post_init__(self):
        self.z_S = np.asarray(self.z_S, dtype=float)
        self.z_T = np.asarray(self.z_T, dtype=float)
        if self.z_S.shape != self.z_T.shape or self.z_S.ndim < 2:
            raise ShapeMismatch(f"student {self.z_S.shape} and teacher {self.z_T.shape} must match as (..., N, C)")


def _norms(z):
    return np.sqrt(np.einsum("...c,...c->...", z, z))


def _unit_pair(pair: FeaturePair):
    ns, nt = _norms(pair.z_S), _norms(pair.z_T)
    if np.any(ns <= EPS_ZERO) or np.any(nt <= EPS_ZERO):
        raise ZeroPatch("cosine alignment is undefined for a zero patch")
    return pair.z_S / ns[..., None], pair.z_T / nt[..., None], ns


def cosine_align_loss(pair: FeaturePair) -> float:
    """Mean over patches of ``1 - cos(z_S, z_T)``; lies in [0, 2]."""
    us, ut, _ = _unit_pair(pair)
    cos = np.clip(np.einsum("...c,...c->...", us, ut), -1.0, 1.0)
    return float(np.mean(1.0 - cos))


def cosine_align_grad(pair: FeaturePair) -> np.ndarray:
    """Gradient of ``cosine_align_loss`` with respect to ``z_S``.

    Per patch it is ``-(t_hat - cos * s_hat) / (|s| P)`` with ``P`` the number
    of patches averaged over; it is orthogonal to ``z_S``.
    """
    us, ut, ns = _unit_pair(pair)
    g = ut - np.einsum("...c,...c->...", ut, us)[..., None] * us
    # second Gram-Schmidt pass keeps <g, z_S> at rounding level relative to |g|
    g -= np.einsum("...c,...c->...", g, us)[..., None] * us
    count = ns.size
    return -g / (ns[..., None] * count)


def mse_align_loss(pair: FeaturePair) -> float:
    """Mean over all entries of ``(z_S - z_T)^2``."""
    d = pair.z_S - pair.z_T
    return float(np.mean(d * d))


def mse_align_grad(pair: FeaturePair) -> np.ndarray:
    return 2.0 * (pair.z_S - pair.z_T) / pair.z_S.size


def noise_augment(z, tau: float = METHOD_NOISE_TAU, rng: np.random.Generator | None = None) -> np.ndarray:
    """``z + sigma * eps`` with one ``sigma ~ U(0, tau)`` per field and ``eps ~ N(0, I)``.

    The last two axes form a field; any leading axes index independent fields.
    """
    if tau < 0:
        raise ConfigError(f"tau: must be >= 0, got {tau}")
    z = np.asarray(z, dtype=float)
    if tau == 0:
        return z.copy()
    if z.ndim < 2:
        raise ShapeMismatch(f"expected a field (..., N, C), got shape {z.shape}")
    if rng is None:
        raise ConfigError("rng: a seeded generator is required when tau > 0")
    sigma = rng.uniform(0.0, tau, size=z.shape[:-2])
    eps = rng.standard_normal(z.shape)
    return z + sigma[..., None, None] * eps


def lpips_loss(*_args, **_kwargs):
    raise PluggableUnavailable("perceptual loss needs a pretrained network and is not provided")


def adversarial_loss(*_args, **_kwargs):
    raise PluggableUnavailable("adversarial loss needs a discriminator and is not provided")


STAGE_TERMS = {
    1: ("cos", "l1", "lpips"),
    2: ("cos", "l1", "lpips", "adv"),
    3: ("l1", "lpips", "adv"),
    4: ("l1", "lpips", "adv"),
}
UNAVAILABLE_TERMS = ("lpips", "adv")


@dataclass(frozen=True)
class StageObjective:
    """Weights of the staged tokenizer objective.

    Stages 3 and 4 train the decoder with the encoder frozen, so the
    alignment term drops out; stage 4 additionally noise-augments latents.
    """

    stage: int = 1
    lambda_cos: float = METHOD_LAMBDA_COS
    lambda_l1: float = METHOD_LAMBDA_L1
    lambda_lpips: float = METHOD_LAMBDA_LPIPS
    lambda_adv: float = METHOD_LAMBDA_ADV
    noise_tau: float = METHOD_NOISE_TAU

    def __post_init__(self):
        if self.stage not in STAGE_TERMS:
            raise ConfigError(f"stage: must be one of 1-4, got {self.stage}")
        for name in ("lambda_cos", "lambda_l1", "lambda_lpips", "lambda_adv", "noise_tau"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")

    @property
    def encoder_frozen(self) -> bool:
        return self.stage >= 3

    @property
    def noise_augmented(self) -> bool:
        return self.stage == 4

    @property
    def terms(self) -> tuple[str, ...]:
        return STAGE_TERMS[self.stage]

    def weight(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")


@dataclass
class ObjectiveValue:
    total: float
    terms: dict[str, float]  # weighted contribution of each available term
    unavailable: list[str] = field(default_factory=list)


def stage_objective(obj: StageObjective, recon_error: float, pair: FeaturePair | None = None,
                    align_loss: float | None = None) -> ObjectiveValue:
    """Weighted sum of the available terms of ``obj.stage``.

    ``recon_error`` is the L1 reconstruction error.  The alignment value comes
    from ``align_loss`` if given, otherwise from ``cosine_align_loss(pair)``.
    Perceptual and adversarial terms contribute 0 and are listed as unavailable.
    """
    terms: dict[str, float] = {}
    unavailable = []
    for name in obj.terms:
        w = obj.weight(name)
        if name in UNAVAILABLE_TERMS:
            unavailable.append(name)
            terms[name] = 0.0
        elif name == "l1":
            terms[name] = w * float(recon_error)
        elif name == "cos":
            if w == 0:
                terms[name] = 0.0
                continue
            if align_loss is None:
                if pair is None:
                    raise ConfigError("stage objective with a cosine term needs a feature pair")
                align_loss = cosine_align_loss(pair)
            terms[name] = w * float(align_loss)
    return ObjectiveValue(total=float(sum(terms.values())), terms=terms, unavailable=unavailable)


# ---------------------------------------------------------------------------
# gradient-conflict experiment


@dataclass(frozen=True)
class ConflictConfig:
    signal_dim: int = 32
    feature_dim: int = 16
    n_patches: int = 1
    lambda_align: float = 20.0
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-2
    n_train: int = 8192
    n_eval: int = 2048
    spectrum_decay: float = 0.0  # signal std of coordinate k is k^-decay
    norm_low: float = 0.5
    norm_high: float = 2.0
    log_every: int = 100
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.n_patches != 1:
            raise ConfigError(f"n_patches: only 1 is supported by the linear model, got {self.n_patches}")
        if self.signal_dim < 2 or self.feature_dim < 2 or self.feature_dim > self.signal_dim:
            raise ConfigError(
                f"signal_dim/feature_dim: need 2 <= feature_dim <= signal_dim, got {self.signal_dim}, {self.feature_dim}"
            )
        if self.lambda_align < 0:
            raise ConfigError(f"lambda_align: must be >= 0, got {self.lambda_align}")
        if self.steps < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("steps, batch_size and log_every must be >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if not 0 < self.norm_low < self.norm_high:
            raise ConfigError(f"norm_low/norm_high: need 0 < low < high, got {self.norm_low}, {self.norm_high}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed required")


ARMS = ("mse", "cosine")
CONFLICT_COLUMNS = ("arm", "seed", "step", "recon_l1", "align_cos")


@dataclass
class _Problem:
    x_train: np.ndarray
    zt_train: np.ndarray
    x_eval: np.ndarray
    zt_eval: np.ndarray
    E0: np.ndarray
    D0: np.ndarray


def _teacher(x, A, rng, cfg: ConflictConfig):
    """Direction of ``A x`` with a per-sample magnitude ~ U(norm_low, norm_high)."""
    d = x @ A.T
    mag = rng.uniform(cfg.norm_low, cfg.norm_high, size=len(x))
    return d / np.linalg.norm(d, axis=1, keepdims=True) * mag[:, None]


def _problem(cfg: ConflictConfig, seed: int) -> _Problem:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    scale = np.arange(1, cfg.signal_dim + 1, dtype=float) ** -cfg.spectrum_decay
    A = rng.standard_normal((cfg.feature_dim, cfg.signal_dim))
    x_train = rng.standard_normal((cfg.n_train, cfg.signal_dim)) * scale
    x_eval = rng.standard_normal((cfg.n_eval, cfg.signal_dim)) * scale
    E0 = rng.standard_normal((cfg.feature_dim, cfg.signal_dim)) / np.sqrt(cfg.signal_dim)
    D0 = rng.standard_normal((cfg.signal_dim, cfg.feature_dim)) / np.sqrt(cfg.feature_dim)
    zt_train = _teacher(x_train, A, rng, cfg)
    zt_eval = _teacher(x_eval, A, rng, cfg)
    return _Problem(x_train, zt_train, x_eval, zt_eval, E0, D0)


def _metrics(E, D, x, zt):
    z = x @ E.T
    recon = float(np.mean(np.abs(z @ D.T - x)))
    cos = np.einsum("ij,ij->i", z, zt) / (np.linalg.norm(z, axis=1) * np.linalg.norm(zt, axis=1))
    return recon, float(np.mean(cos))


def _run_arm(cfg: ConflictConfig, arm: str, seed: int) -> list[tuple]:
    prob = _problem(cfg, seed)
    E, D = prob.E0.copy(), prob.D0.copy()
    params = [E, D]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    # both arms draw identical minibatches
    batch_rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
    rows = [(arm, seed, 0, *_metrics(E, D, prob.x_eval, prob.zt_eval))]
    for step in range(1, cfg.steps + 1):
        idx = batch_rng.integers(0, cfg.n_train, size=cfg.batch_size)
        x, zt = prob.x_train[idx], prob.zt_train[idx]
        z = x @ E.T
        xr = z @ D.T
        g_xr = np.sign(xr - x) / xr.size
        gD = g_xr.T @ z
        g_z = g_xr @ D
        if cfg.lambda_align:
            pair = FeaturePair(z[:, None, :], zt[:, None, :])
            g_align = mse_align_grad(pair) if arm == "mse" else cosine_align_grad(pair)
            g_z = g_z + cfg.lambda_align * g_align[:, 0, :]
        gE = g_z.T @ x
        for p, g, mi, vi in zip(params, (gE, gD), m, v):
            mi *= b1
            mi += (1 - b1) * g
            vi *= b2
            vi += (1 - b2) * g * g
            p -= cfg.lr * (mi / (1 - b1**step)) / (np.sqrt(vi / (1 - b2**step)) + eps)
        if step % cfg.log_every == 0 or step == cfg.steps:
            rows.append((arm, seed, step, *_metrics(E, D, prob.x_eval, prob.zt_eval)))
    return rows


@dataclass
class ConflictReport:
    config: ConflictConfig
    rows: list[tuple]  # (arm, seed, step, recon_l1, align_cos)

    def final(self, arm: str) -> tuple[np.ndarray, np.ndarray]:
        """Final (recon_l1, align_cos) per seed for ``arm``, in seed order."""
        last = {}
        for a, s, step, r, c in self.rows:
            if a == arm and (s not in last or step >= last[s][0]):
                last[s] = (step, r, c)
        seeds = sorted(last)
        return np.array([last[s][1] for s in seeds]), np.array([last[s][2] for s in seeds])

    def summary(self) -> dict:
        out = {}
        for arm in ARMS:
            recon, cos = self.final(arm)
            out[arm] = {
                "recon_l1_mean": float(recon.mean()),
                "recon_l1_std": float(recon.std()),
                "align_cos_mean": float(cos.mean()),
                "align_cos_std": float(cos.std()),
                "align_cos_min": float(cos.min()),
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CONFLICT_COLUMNS)
        for arm, seed, step, r, c in self.rows:
            w.writerow([arm, seed, step, repr(r), repr(c)])
        return buf.getvalue()

    def summary_text(self) -> str:
        lines = [
            "# gradient-conflict experiment",
            "# teacher feature norms vary per sample (drawn from U(%g, %g));"
            % (self.config.norm_low, self.config.norm_high),
            "# with constant teacher norms the two alignment losses would not differ.",
            "config: " + ", ".join(f"{k}={v}" for k, v in asdict(self.config).items()),
        ]
        for arm, stats in self.summary().items():
            lines.append(f"{arm}: " + ", ".join(f"{k}={v:.6g}" for k, v in stats.items()))
        return "\n".join(lines) + "\n"

    def write(self, csv_path) -> tuple[Path, Path]:
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        summary = csv_path.with_suffix(".summary.txt")
        summary.write_text(self.summary_text())
        return csv_path, summary


def conflict_experiment(cfg: ConflictConfig = ConflictConfig(), n_jobs: int = 1) -> ConflictReport:
    """Train the MSE and cosine arms for every seed; arms share data, init and minibatches."""
    jobs = [(arm, seed) for seed in cfg.seeds for arm in ARMS]
    results = Parallel(n_jobs=n_jobs)(delayed(_run_arm)(cfg, arm, seed) for arm, seed in jobs)
    rows = [row for part in results for row in part]
    return ConflictReport(cfg, rows)


# ---------------------------------------------------------------------------
# magnitude probe


@dataclass
class ProbeResult:
    alphas: list[float]
    deviations: list[float]  # ||f(alpha z) - f(z)|| per alpha
    reference_norm: float  # ||f(z)||

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "deviation", "relative_deviation"])
        for a, d in zip(self.alphas, self.deviations):
            rel = d / self.reference_norm if self.reference_norm > 0 else float("nan")
            w.writerow([repr(a), repr(d), repr(rel)])
        return buf.getvalue()


def rescale_probe(decoder: Callable[[np.ndarray], np.ndarray], z, alphas: Sequence[float]) -> ProbeResult:
    """Output deviation ``||decoder(alpha z) - decoder(z)||`` for each alpha (Frobenius norm)."""
    z = np.asarray(z, dtype=float)
    alphas = [float(a) for a in alphas]
    if any(not a > 0 for a in alphas):
        raise ConfigError(f"alphas: all scale factors must be > 0, got {alphas}")
    ref = np.asarray(decoder(z), dtype=float)
    devs = []
    for a in alphas:
        out = ref if a == 1.0 else np.asarray(decoder(a * z), dtype=float)
        devs.append(float(np.linalg.norm(out - ref)))
    return ProbeResult(alphas, devs, float(np.linalg.norm(ref)))


def linear_decoder(W: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """``f(z) = z W^T`` applied per patch."""
    W = np.asarray(W, dtype=float)
    return lambda z: z @ W.T


def direction_decoder(g: Callable[[np.ndarray], np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
    """``f(z) = g(z / |z|)`` per patch: invariant to positive rescaling by construction."""
    return lambda z: g(z / np.linalg.norm(z, axis=-1, keepdims=True))
