"""AdamW training loop for the velocity field, with EMA, checkpointing and exact resume."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import SphereDataset
from .errors import ConfigError, EmptyDataset, NonFinite
from .flowpath import make_path_sample
from .velocitynet import NetSpec, VelocityNet, ema_update, init_params, load_checkpoint, loss_and_grad, save_checkpoint

log = logging.getLogger(__name__)

# Defaults stated for the generative stage of the source method.
METHOD_LR = 2e-4
METHOD_BETA2 = 0.95
METHOD_EMA_DECAY = 0.9999


@dataclass
class TrainConfig:
    lr: float = METHOD_LR
    beta1: float = 0.9
    beta2: float = METHOD_BETA2
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None  # max global norm; None or 0 disables
    warmup_steps: int = 0
    batch_size: int = 256
    total_steps: int = 20_000
    ema_decay: float = METHOD_EMA_DECAY
    seed: int = 0
    time_dist: str = "uniform"
    reverse_time: bool = False
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"beta1/beta2: must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError(f"ema_decay: must lie in [0, 1], got {self.ema_decay}")


@dataclass
class TrainState:
    step: int
    m: np.ndarray
    v: np.ndarray
    rng: np.random.Generator
    epoch: int = 0
    cursor: int = 0
    last_loss: float = float("nan")
    last_grad_norm: float = float("nan")
    loss_ema: float = float("nan")
    _order: tuple[int, np.ndarray] | None = field(default=None, repr=False, compare=False)

    @classmethod
    def fresh(cls, n_params: int, seed: int) -> "TrainState":
        # path sampling stream is independent of the init and shuffling streams
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
        return cls(step=0, m=np.zeros(n_params), v=np.zeros(n_params), rng=rng)


def clip_grad_norm(grad: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    """Rescale ``grad`` to global norm ``max_norm`` if it is larger; returns (grad, original norm)."""
    norm = float(np.linalg.norm(grad))
    if max_norm and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def adamw_update(params: np.ndarray, grad: np.ndarray, state: TrainState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam step, in place. ``state.step`` is the pre-update count."""
    t = state.step + 1
    lr = cfg.lr * min(1.0, t / cfg.warmup_steps) if cfg.warmup_steps else cfg.lr
    if cfg.weight_decay:
        params *= 1.0 - lr * cfg.weight_decay
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * grad
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.beta1**t)
    v_hat = state.v / (1.0 - cfg.beta2**t)
    params -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def train_step(net: VelocityNet, state: TrainState, x_batch, labels, cfg: TrainConfig, radius: float | None = None):
    """Sample paths for a data batch, take one AdamW step and update the EMA."""
    if len(x_batch) == 0:
        raise EmptyDataset("train_step called with an empty batch")
    paths = make_path_sample(x_batch, state.rng, cfg.time_dist, cfg.reverse_time, radius)
    y = labels if net.spec.n_classes > 0 else None
    try:
        report = loss_and_grad(net, paths, y)
    except NonFinite as exc:
        raise NonFinite(f"step {state.step}: {exc}") from exc
    grad, gnorm = clip_grad_norm(report.grad, cfg.grad_clip)
    if not np.isfinite(gnorm):
        raise NonFinite(f"step {state.step}: loss={report.loss}, grad norm={gnorm}")
    adamw_update(net.params, grad, state, cfg)
    ema_update(net, cfg.ema_decay)
    state.step += 1
    state.last_loss = report.loss
    state.last_grad_norm = gnorm
    state.loss_ema = report.loss if np.isnan(state.loss_ema) else 0.99 * state.loss_ema + 0.01 * report.loss
    return net, state, report.loss


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 2, epoch])).permutation(n)


def _cached_order(state: TrainState, seed: int, n: int) -> np.ndarray:
    if state._order is None or state._order[0] != state.epoch or len(state._order[1]) != n:
        state._order = (state.epoch, _epoch_order(seed, state.epoch, n))
    return state._order[1]


def next_batch(dataset: SphereDataset, state: TrainState, cfg: TrainConfig) -> np.ndarray:
    """Indices of the next batch; an epoch is one shuffled pass over the dataset."""
    n = len(dataset)
    idx = []
    need = cfg.batch_size
    while need:
        order = _cached_order(state, cfg.seed, n)
        take = order[state.cursor : state.cursor + need]
        idx.append(take)
        need -= len(take)
        state.cursor += len(take)
        if state.cursor >= n:
            state.epoch += 1
            state.cursor = 0
    return np.concatenate(idx)


def _meta(state: TrainState, cfg: TrainConfig, dataset: SphereDataset) -> dict:
    return {
        "step": state.step,
        "epoch": state.epoch,
        "cursor": state.cursor,
        "rng_state": state.rng.bit_generator.state,
        "loss_ema": state.loss_ema,
        "radius": dataset.radius,
        "n_patches": dataset.n_patches,
        "dim": dataset.dim,
        "reverse_time": cfg.reverse_time,
        "train_config": asdict(cfg),
    }


def save_training_checkpoint(path, net: VelocityNet, state: TrainState, cfg: TrainConfig, dataset: SphereDataset):
    return save_checkpoint(path, net, _meta(state, cfg, dataset), extra=[("adam_m", state.m), ("adam_v", state.v)])


def load_training_checkpoint(path) -> tuple[VelocityNet, TrainState, dict]:
    net, meta, extra = load_checkpoint(path)
    bitgen = np.random.PCG64()
    bitgen.state = meta["rng_state"]
    state = TrainState(
        step=meta["step"],
        m=extra["adam_m"],
        v=extra["adam_v"],
        rng=np.random.Generator(bitgen),
        epoch=meta["epoch"],
        cursor=meta["cursor"],
        loss_ema=meta.get("loss_ema", float("nan")),
    )
    return net, state, meta


@dataclass
class TrainResult:
    checkpoint: Path
    loss_csv: Path
    net: VelocityNet
    losses: list[float] = field(default_factory=list)


def run_training(
    dataset: SphereDataset,
    cfg: TrainConfig,
    checkpoint_dir,
    net_spec: NetSpec | None = None,
    resume=None,
) -> TrainResult:
    """Train until ``cfg.total_steps``; checkpoint every ``cfg.checkpoint_every`` steps.

    Writes ``loss.csv`` (``step,loss,grad_norm,wall_ms``) and ``checkpoint_<step>.sfm``
    files plus ``final.sfm`` into ``checkpoint_dir``.  Resuming from a checkpoint
    written by this function continues the identical parameter trajectory.
    """
    if len(dataset) == 0:
        raise EmptyDataset("dataset has no samples")
    ckdir = Path(checkpoint_dir)
    try:
        ckdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create checkpoint directory {ckdir}: {exc}") from exc

    if resume is not None:
        net, state, _ = load_training_checkpoint(resume)
        if (net.spec.n_patches, net.spec.dim) != (dataset.n_patches, dataset.dim):
            raise ConfigError("checkpoint dims do not match the dataset")
    else:
        spec = net_spec or NetSpec(dataset.n_patches, dataset.dim)
        if (spec.n_patches, spec.dim) != (dataset.n_patches, dataset.dim):
            raise ConfigError(
                f"net input dims ({spec.n_patches}, {spec.dim}) do not match dataset ({dataset.n_patches}, {dataset.dim})"
            )
        init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        net = init_params(spec, init_rng, cfg.ema_decay)
        state = TrainState.fresh(spec.n_params, cfg.seed)

    csv_path = ckdir / "loss.csv"
    mode = "a" if resume is not None and csv_path.exists() else "w"
    losses = []
    with open(csv_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "grad_norm", "wall_ms"])
        t0 = time.perf_counter()
        while state.step < cfg.total_steps:
            idx = next_batch(dataset, state, cfg)
            net, state, loss = train_step(net, state, dataset.samples[idx], dataset.labels[idx], cfg, dataset.radius)
            losses.append(loss)
            if state.step % cfg.log_every == 0 or state.step == cfg.total_steps:
                wall = (time.perf_counter() - t0) * 1e3
                writer.writerow([state.step, repr(loss), repr(state.last_grad_norm), f"{wall:.1f}"])
                log.info("step %d loss %.5f grad_norm %.4f", state.step, loss, state.last_grad_norm)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_training_checkpoint(ckdir / f"checkpoint_{state.step:08d}.sfm", net, state, cfg, dataset)
    final = save_training_checkpoint(ckdir / "final.sfm", net, state, cfg, dataset)
    return TrainResult(checkpoint=final, loss_csv=csv_path, net=net, losses=losses)
