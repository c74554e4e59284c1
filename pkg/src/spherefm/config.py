"""Run configuration: one table of every tunable, INI files, and flag overrides.

Precedence is flags > config file > defaults.  Each default is tagged with its
provenance: ``"method"`` for values the source method states, ``"artifact"``
for choices made here where it is silent.
"""

from __future__ import annotations

import configparser
import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .alignlab import (
    METHOD_LAMBDA_ADV,
    METHOD_LAMBDA_COS,
    METHOD_LAMBDA_L1,
    METHOD_LAMBDA_LPIPS,
    METHOD_NOISE_TAU,
    ConflictConfig,
    StageObjective,
)
from .errors import ConfigError
from .sampler import SampleConfig
from .trainer import METHOD_BETA2, METHOD_EMA_DECAY, METHOD_LR, TrainConfig
from .velocitynet import NetSpec

METHOD_SAMPLE_STEPS = 50
METHOD_SAMPLE_METHOD = "euler_projection"


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str) -> float | None:
    v = str(s).strip().lower()
    return None if v in ("", "none", "auto") else float(v)


def _opt_int(s: str) -> int | None:
    v = str(s).strip().lower()
    return None if v in ("", "none") else int(v)


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in str(s).replace(" ", "").split(",") if p)


def _float_tuple(s: str) -> tuple[float, ...] | None:
    v = str(s).replace(" ", "")
    if v.lower() in ("", "none"):
        return None
    return tuple(float(p) for p in v.split(",") if p)


def _opt_str(s: str) -> str | None:
    v = str(s).strip()
    return None if v.lower() in ("", "none") else v


@dataclass(frozen=True)
class Param:
    section: str
    key: str
    default: Any
    parse: Callable[[str], Any]
    source: str  # "method" or "artifact"
    help: str = ""


PARAMS: tuple[Param, ...] = (
    # manifold
    Param("manifold", "n_patches", 1, int, "artifact", "number of patches N"),
    Param("manifold", "dim", 3, int, "artifact", "patch dimension C"),
    Param("manifold", "radius", None, _opt_float, "artifact", "sphere radius R; default sqrt(C)"),
    # flowpath
    Param("flowpath", "scheduler", "linear", str, "artifact", "premetric decay kappa(t) = 1 - t"),
    Param("flowpath", "time_dist", "uniform", str, "artifact", "training time distribution"),
    Param("flowpath", "reverse_time", False, _bool, "artifact", "external convention: data at t=0, prior at t=1"),
    Param("flowpath", "shift", 1.0, float, "artifact", "timestep shift s of the sampling grid"),
    # velocitynet
    Param("velocitynet", "hidden", (128, 128, 128), _int_tuple, "artifact", "hidden widths"),
    Param("velocitynet", "activation", "silu", str, "artifact", "silu or relu"),
    Param("velocitynet", "time_feat_dim", 64, int, "artifact", "sinusoidal time features"),
    Param("velocitynet", "class_embed_dim", 32, int, "artifact", "class embedding width"),
    Param("velocitynet", "conditional", False, _bool, "artifact", "condition on dataset labels"),
    # trainer
    Param("trainer", "lr", METHOD_LR, float, "method", "fixed learning rate"),
    Param("trainer", "beta1", 0.9, float, "artifact", "AdamW beta1"),
    Param("trainer", "beta2", METHOD_BETA2, float, "method", "AdamW beta2"),
    Param("trainer", "eps", 1e-8, float, "artifact", "AdamW epsilon"),
    Param("trainer", "weight_decay", 0.0, float, "artifact", "decoupled weight decay"),
    Param("trainer", "grad_clip", None, _opt_float, "artifact", "global gradient-norm clip; none disables"),
    Param("trainer", "warmup_steps", 0, int, "artifact", "linear lr warmup"),
    Param("trainer", "batch_size", 256, int, "artifact", "minibatch size"),
    Param("trainer", "total_steps", 20_000, int, "artifact", "optimizer steps"),
    Param("trainer", "ema_decay", METHOD_EMA_DECAY, float, "method", "EMA decay"),
    Param("trainer", "checkpoint_every", 1000, int, "artifact", "steps between checkpoints; 0 disables"),
    Param("trainer", "log_every", 100, int, "artifact", "steps between loss.csv rows"),
    Param("trainer", "resume", None, _opt_str, "artifact", "checkpoint to resume from"),
    # sampler
    Param("sampler", "steps", METHOD_SAMPLE_STEPS, int, "method", "integration steps"),
    Param("sampler", "method", METHOD_SAMPLE_METHOD, str, "method", "euler_projection or rodrigues"),
    Param("sampler", "use_ema", True, _bool, "method", "EMA weights for inference"),
    Param("sampler", "ema_debias", True, _bool, "artifact", "remove the EMA's leftover initial weight"),
    Param("sampler", "n_samples", 4096, int, "artifact", "samples to draw"),
    Param("sampler", "label", None, _opt_int, "artifact", "class label for conditional sampling"),
    # datasets
    Param("datasets", "kind", "vmf", str, "artifact", "vmf or checkerboard"),
    Param("datasets", "n", 50_000, int, "artifact", "number of samples"),
    Param("datasets", "components", 2, int, "artifact", "vMF mixture components"),
    Param("datasets", "kappa", 20.0, float, "artifact", "vMF concentration"),
    Param("datasets", "weights", None, _float_tuple, "artifact", "mixture weights; default uniform"),
    Param("datasets", "means_seed", 0, int, "artifact", "seed for random means when components > 2"),
    Param("datasets", "resolution", 4, int, "artifact", "checkerboard band count"),
    # evalsuite
    Param("evalsuite", "bandwidth", None, _opt_float, "artifact", "kernel bandwidth; none = median heuristic"),
    Param("evalsuite", "n_permutations", 200, int, "artifact", "permutation null size"),
    # alignlab
    Param("alignlab", "stage", 1, int, "artifact", "tokenizer training stage"),
    Param("alignlab", "lambda_cos", METHOD_LAMBDA_COS, float, "method", "alignment weight"),
    Param("alignlab", "lambda_l1", METHOD_LAMBDA_L1, float, "method", "L1 reconstruction weight"),
    Param("alignlab", "lambda_lpips", METHOD_LAMBDA_LPIPS, float, "method", "perceptual weight (unavailable)"),
    Param("alignlab", "lambda_adv", METHOD_LAMBDA_ADV, float, "method", "adversarial weight (unavailable)"),
    Param("alignlab", "noise_tau", METHOD_NOISE_TAU, float, "method", "noise augmentation threshold"),
    Param("alignlab", "lambda_align", ConflictConfig.lambda_align, float, "artifact", "conflict experiment weight"),
    Param("alignlab", "steps", ConflictConfig.steps, int, "artifact", "conflict experiment steps"),
    Param("alignlab", "seeds", 5, int, "artifact", "conflict experiment seed count"),
    Param("alignlab", "alphas", (0.25, 0.5, 1.0, 2.0, 4.0), _float_tuple, "artifact", "probe scale factors"),
    # run
    Param("run", "seed", 0, int, "artifact", "global seed"),
    Param("run", "jobs", 1, int, "artifact", "worker processes for parallel experiments"),
)

_INDEX = {(p.section, p.key): p for p in PARAMS}
SECTIONS = tuple(dict.fromkeys(p.section for p in PARAMS))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return "none" if v is None else str(v)


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    sources: dict[str, dict[str, str]]  # where each value came from: default, file, flag

    @classmethod
    def defaults(cls) -> "RunConfig":
        values: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
        sources: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
        for p in PARAMS:
            values[p.section][p.key] = copy.copy(p.default)
            sources[p.section][p.key] = "default"
        return cls(values, sources)

    def set(self, section: str, key: str, raw, origin: str) -> None:
        p = _INDEX.get((section, key))
        if p is None:
            raise ConfigError(f"{section}.{key}: unknown setting")
        try:
            val = p.parse(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({exc})") from exc
        self.values[section][key] = val
        self.sources[section][key] = origin

    def merge_file(self, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        for section in parser.sections():
            if section not in self.values:
                raise ConfigError(f"[{section}]: unknown section in {path}")
            for key, raw in parser.items(section):
                self.set(section, key, raw, "file")
        return self

    def merge_flags(self, flags: dict[str, Any]) -> "RunConfig":
        """``flags`` maps ``"section.key"`` to values; ``None`` means not given."""
        for name, val in flags.items():
            if val is None:
                continue
            section, key = name.split(".", 1)
            self.set(section, key, val, "flag")
        return self

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def radius(self) -> float:
        r = self.get("manifold", "radius")
        return math.sqrt(self.get("manifold", "dim")) if r is None else float(r)

    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    def validate(self) -> "RunConfig":
        n, c = self.get("manifold", "n_patches"), self.get("manifold", "dim")
        if n < 1:
            raise ConfigError(f"manifold.n_patches: must be >= 1, got {n}")
        if c < 2:
            raise ConfigError(f"manifold.dim: must be >= 2, got {c}")
        if not self.radius > 0:
            raise ConfigError(f"manifold.radius: must be > 0, got {self.radius}")
        if self.get("flowpath", "scheduler") != "linear":
            raise ConfigError(f"flowpath.scheduler: only 'linear' is supported, got {self.get('flowpath', 'scheduler')!r}")
        if self.get("datasets", "kind") not in ("vmf", "checkerboard"):
            raise ConfigError(f"datasets.kind: must be vmf or checkerboard, got {self.get('datasets', 'kind')!r}")
        if self.get("datasets", "kind") == "checkerboard" and (n, c) != (1, 3):
            raise ConfigError(f"manifold: checkerboard needs n_patches=1, dim=3, got {n}, {c}")
        if self.get("evalsuite", "n_permutations") < 0:
            raise ConfigError("evalsuite.n_permutations: must be >= 0")
        if self.get("run", "jobs") < 1:
            raise ConfigError("run.jobs: must be >= 1")
        if not self.get("alignlab", "alphas"):
            raise ConfigError("alignlab.alphas: at least one scale factor required")
        # construct typed configs so their own checks run now, before any work
        self.train_config()
        self.sample_config()
        self.net_spec(0)
        self.stage_objective()
        return self

    def net_spec(self, n_classes: int) -> NetSpec:
        try:
            return NetSpec(
                n_patches=self.get("manifold", "n_patches"),
                dim=self.get("manifold", "dim"),
                hidden=self.get("velocitynet", "hidden"),
                activation=self.get("velocitynet", "activation"),
                time_feat_dim=self.get("velocitynet", "time_feat_dim"),
                n_classes=n_classes if self.get("velocitynet", "conditional") else 0,
                class_embed_dim=self.get("velocitynet", "class_embed_dim"),
            )
        except ValueError as exc:
            raise ConfigError(f"velocitynet: {exc}") from exc

    def train_config(self) -> TrainConfig:
        t = self.values["trainer"]
        return TrainConfig(
            lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"], weight_decay=t["weight_decay"],
            grad_clip=t["grad_clip"], warmup_steps=t["warmup_steps"], batch_size=t["batch_size"],
            total_steps=t["total_steps"], ema_decay=t["ema_decay"], seed=self.seed,
            time_dist=self.get("flowpath", "time_dist"), reverse_time=self.get("flowpath", "reverse_time"),
            checkpoint_every=t["checkpoint_every"], log_every=t["log_every"],
        )

    def sample_config(self) -> SampleConfig:
        s = self.values["sampler"]
        return SampleConfig(
            steps=s["steps"], method=s["method"], shift=self.get("flowpath", "shift"), use_ema=s["use_ema"],
            ema_debias=s["ema_debias"], y=s["label"], seed=self.seed, reverse_time=self.get("flowpath", "reverse_time"),
        )

    def stage_objective(self) -> StageObjective:
        a = self.values["alignlab"]
        return StageObjective(
            stage=a["stage"], lambda_cos=a["lambda_cos"], lambda_l1=a["lambda_l1"],
            lambda_lpips=a["lambda_lpips"], lambda_adv=a["lambda_adv"], noise_tau=a["noise_tau"],
        )

    def conflict_config(self) -> ConflictConfig:
        a = self.values["alignlab"]
        if a["seeds"] < 1:
            raise ConfigError(f"alignlab.seeds: must be >= 1, got {a['seeds']}")
        return ConflictConfig(
            lambda_align=a["lambda_align"], steps=a["steps"],
            seeds=tuple(range(self.seed, self.seed + a["seeds"])),
        )

    def as_dict(self) -> dict[str, dict[str, Any]]:
        """JSON-ready copy of the effective configuration (tuples become lists)."""
        return {
            s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()}
            for s, kv in self.values.items()
        }

    def to_ini(self) -> str:
        lines = []
        for s in SECTIONS:
            lines.append(f"[{s}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in self.values[s].items()]
            lines.append("")
        return "\n".join(lines)


def load_config(path=None, flags: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig.defaults()
    if path is not None:
        cfg.merge_file(Path(path))
    if flags:
        cfg.merge_flags(flags)
    return cfg.validate()


def constants_table() -> str:
    """Markdown table of every default with its provenance."""
    rows = ["| setting | default | source | meaning |", "|---|---|---|---|"]
    for p in PARAMS:
        src = "stated by the method" if p.source == "method" else "artifact choice"
        rows.append(f"| `{p.section}.{p.key}` | `{_fmt(p.default)}` | {src} | {p.help} |")
    return "\n".join(rows)
