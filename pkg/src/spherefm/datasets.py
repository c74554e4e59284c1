"""Synthetic labelled targets on the product of spheres, and their on-disk format."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ive

from ._fileio import read_framed, write_framed
from .errors import ConfigError

DATASET_MAGIC = "SPHEREFM-DATASET"
DATASET_VERSION = 1


@dataclass
class SphereDataset:
    samples: np.ndarray  # (n, N, C), every patch of norm radius
    labels: np.ndarray  # (n,) int32
    radius: float
    n_classes: int
    spec: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_patches(self) -> int:
        return self.samples.shape[1]

    @property
    def dim(self) -> int:
        return self.samples.shape[2]


@dataclass(frozen=True)
class VMFComponent:
    mean: tuple[float, ...]
    kappa: float
    weight: float


def vmf_mean_resultant(kappa: float, dim: int) -> float:
    """Expected ``<x, mu>`` under vMF(mu, kappa) on the unit sphere in R^dim: I_{p/2}(k) / I_{p/2-1}(k)."""
    if kappa == 0:
        return 0.0
    return float(ive(dim / 2.0, kappa) / ive(dim / 2.0 - 1.0, kappa))


def _sample_vmf_cosine(kappa: float, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Cosine to the mean direction, by Wood's (1994) rejection scheme."""
    b = (dim - 1) / (np.sqrt(4.0 * kappa**2 + (dim - 1) ** 2) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (dim - 1) * np.log(1.0 - x0**2)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = n - filled
        z = rng.beta((dim - 1) / 2.0, (dim - 1) / 2.0, size=m)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=m)
        ok = kappa * w + (dim - 1) * np.log(1.0 - x0 * w) - c >= np.log(u)
        k = int(ok.sum())
        out[filled : filled + k] = w[ok]
        filled += k
    return out


def sample_vmf(mean, kappa: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` unit vectors from the von Mises-Fisher distribution, shape ``(n, dim)``."""
    mu = np.asarray(mean, dtype=float)
    dim = mu.shape[0]
    if kappa < 0:
        raise ConfigError(f"vMF concentration must be >= 0, got {kappa}")
    w = _sample_vmf_cosine(kappa, dim, n, rng)
    v = rng.standard_normal((n, dim))
    v -= (v @ mu)[:, None] * mu
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return w[:, None] * mu + np.sqrt(np.clip(1.0 - w**2, 0.0, None))[:, None] * v


def default_means(n_components: int, dim: int, seed: int = 0) -> list[tuple[float, ...]]:
    """Two components get antipodal means +-e1; otherwise means are drawn uniformly."""
    if n_components == 1:
        e = np.zeros(dim)
        e[0] = 1.0
        return [tuple(e)]
    if n_components == 2:
        e = np.zeros(dim)
        e[0] = 1.0
        return [tuple(e), tuple(-e)]
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n_components, dim))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return [tuple(row) for row in m]


def gen_vmf_mixture(
    n: int,
    n_patches: int,
    dim: int,
    radius: float,
    components: Sequence[VMFComponent],
    seed: int,
) -> SphereDataset:
    """Labelled vMF mixture: each sample picks a component, then every patch is drawn from it."""
    if n < 1 or n_patches < 1 or dim < 2 or radius <= 0:
        raise ConfigError(f"invalid sizes n={n}, N={n_patches}, C={dim}, R={radius}")
    if not components:
        raise ConfigError("components: at least one component required")
    weights = np.array([c.weight for c in components], dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ConfigError(f"weights: must be non-negative and sum to 1, got {weights.tolist()}")
    for i, c in enumerate(components):
        mu = np.asarray(c.mean, dtype=float)
        if mu.shape != (dim,):
            raise ConfigError(f"components[{i}].mean: expected length {dim}, got {mu.shape}")
        if abs(np.linalg.norm(mu) - 1.0) > 1e-6:
            raise ConfigError(f"components[{i}].mean: not a unit vector (norm {np.linalg.norm(mu)})")
        if c.kappa < 0:
            raise ConfigError(f"components[{i}].kappa: must be >= 0, got {c.kappa}")

    rng = np.random.default_rng(seed)
    labels = rng.choice(len(components), size=n, p=weights).astype(np.int32)
    samples = np.empty((n, n_patches, dim))
    for k, c in enumerate(components):
        idx = np.flatnonzero(labels == k)
        if idx.size:
            draws = sample_vmf(c.mean, c.kappa, idx.size * n_patches, rng)
            samples[idx] = draws.reshape(idx.size, n_patches, dim)
    samples *= radius / np.linalg.norm(samples, axis=-1, keepdims=True)
    spec = {
        "kind": "vmf",
        "seed": int(seed),
        "components": [{"mean": list(map(float, c.mean)), "kappa": float(c.kappa), "weight": float(c.weight)} for c in components],
    }
    return SphereDataset(samples=samples, labels=labels, radius=float(radius), n_classes=len(components), spec=spec)


def _checker_cells(points: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    theta = np.arccos(np.clip(points[:, 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * np.pi)
    i_theta = np.minimum(np.floor(theta / np.pi * resolution), resolution - 1).astype(np.int64)
    i_phi = np.minimum(np.floor(phi / np.pi * resolution), 2 * resolution - 1).astype(np.int64)
    return i_theta, i_phi


def checkerboard_accepts(points: np.ndarray, resolution: int) -> np.ndarray:
    """Parity predicate: polar band index plus azimuthal band index is even.

    Bands have angular width pi / resolution in both angles.
    """
    i_theta, i_phi = _checker_cells(points, resolution)
    return (i_theta + i_phi) % 2 == 0


def gen_checkerboard_s2(n: int, resolution: int, radius: float, seed: int) -> SphereDataset:
    """Uniform S^2 samples restricted to the even-parity cells of an angular checkerboard.

    The label is the index of the accepted cell (``resolution**2`` cells in total).
    """
    if n < 1 or resolution < 1 or radius <= 0:
        raise ConfigError(f"invalid checkerboard config n={n}, resolution={resolution}, R={radius}")
    rng = np.random.default_rng(seed)
    kept = []
    total = 0
    while total < n:
        z = rng.standard_normal((max(2 * (n - total), 64), 3))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        z = z[checkerboard_accepts(z, resolution)]
        kept.append(z)
        total += len(z)
    pts = np.concatenate(kept)[:n]
    i_theta, i_phi = _checker_cells(pts, resolution)
    labels = (i_theta * resolution + i_phi // 2).astype(np.int32)
    samples = (pts * radius)[:, None, :]
    spec = {"kind": "checkerboard", "seed": int(seed), "resolution": int(resolution)}
    return SphereDataset(samples=samples, labels=labels, radius=float(radius), n_classes=resolution**2, spec=spec)


def save_dataset(dataset: SphereDataset, path) -> Path:
    header = {
        "kind": dataset.spec.get("kind", "custom"),
        "spec": dataset.spec,
        "n": len(dataset),
        "n_patches": dataset.n_patches,
        "dim": dataset.dim,
        "radius": dataset.radius,
        "n_classes": dataset.n_classes,
        "seed": dataset.spec.get("seed"),
    }
    arrays = [("samples", dataset.samples.astype(np.float64)), ("labels", dataset.labels.astype(np.int32))]
    return write_framed(path, DATASET_MAGIC, DATASET_VERSION, header, arrays)


def load_dataset(path) -> SphereDataset:
    header, arrays = read_framed(path, DATASET_MAGIC, DATASET_VERSION)
    n, n_patches, dim = header["n"], header["n_patches"], header["dim"]
    return SphereDataset(
        samples=arrays["samples"].reshape(n, n_patches, dim),
        labels=arrays["labels"],
        radius=header["radius"],
        n_classes=header["n_classes"],
        spec=header["spec"],
    )
