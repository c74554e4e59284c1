"""End-to-end toy generation run shared by the acceptance suite."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from spherefm.datasets import VMFComponent, default_means, gen_vmf_mixture
from spherefm.evalsuite import EvalReport, evaluate
from spherefm.geometry import default_radius, sample_prior
from spherefm.sampler import SampleConfig, generate_batch
from spherefm.trainer import TrainConfig, run_training

DIM = 3
KAPPA = 20.0
N_TRAIN = 50_000
N_EVAL = 4096


@dataclass
class ToyResult:
    seed: int
    report: EvalReport
    uniform_report: EvalReport
    max_norm_drift: float


def mixture(n: int, seed: int):
    comps = [VMFComponent(m, KAPPA, 0.5) for m in default_means(2, DIM)]
    return gen_vmf_mixture(n, 1, DIM, default_radius(DIM), comps, seed)


def run_seed(seed: int, workdir, steps: int = 20_000) -> ToyResult:
    radius = default_radius(DIM)
    train = mixture(N_TRAIN, 1000 + seed)
    held_out = mixture(N_EVAL, 2000 + seed)
    cfg = TrainConfig(total_steps=steps, batch_size=256, seed=seed, checkpoint_every=0, log_every=1000)
    res = run_training(train, cfg, Path(workdir) / f"seed{seed}")
    gen, manifest = generate_batch(res.net, N_EVAL, SampleConfig(seed=seed), radius)
    report = evaluate(gen, held_out.samples, radius, seed=seed)
    uniform = sample_prior(1, DIM, radius, np.random.default_rng(3000 + seed), size=N_EVAL)
    uniform_report = evaluate(uniform, held_out.samples, radius, seed=seed)
    return ToyResult(seed, report, uniform_report, manifest["max_norm_drift"])


def run_all(workdir, seeds=range(5), steps: int = 20_000) -> list[ToyResult]:
    jobs = min(len(list(seeds)), os.cpu_count() or 1)
    return Parallel(n_jobs=jobs)(delayed(run_seed)(s, workdir, steps) for s in seeds)
