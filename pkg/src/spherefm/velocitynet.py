"""Fully connected velocity field v(x, t, y) with exact reverse-mode gradients.

The input is the flattened latent field concatenated with sinusoidal time
features and, when ``n_classes > 0``, a learned class embedding.  Parameters
live in one flat float64 vector so the optimizer, the EMA shadow and the
checkpoint format can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from ._fileio import read_framed, write_framed
from .errors import EmptyBatch, NonFinite, ShapeMismatch, UnknownClass
from .flowpath import PathSample, stack_samples
from .geometry import _dot

CHECKPOINT_MAGIC = "SPHEREFM-CHECKPOINT"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("silu", "relu")


@dataclass(frozen=True)
class NetSpec:
    n_patches: int
    dim: int
    hidden: tuple[int, ...] = (128, 128, 128)
    activation: str = "silu"
    time_feat_dim: int = 64
    n_classes: int = 0
    class_embed_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.time_feat_dim % 2:
            raise ValueError("time_feat_dim must be even (sin/cos pairs)")
        if self.n_patches < 1 or self.dim < 2 or any(h < 1 for h in self.hidden):
            raise ValueError(f"invalid architecture {self}")

    @property
    def embed_dim(self) -> int:
        return self.class_embed_dim if self.n_classes > 0 else 0

    @property
    def widths(self) -> tuple[int, ...]:
        d = self.n_patches * self.dim
        return (d + self.time_feat_dim + self.embed_dim, *self.hidden, d)

    @property
    def n_params(self) -> int:
        w = self.widths
        layers = sum(a * b + b for a, b in zip(w[:-1], w[1:]))
        return layers + self.n_classes * self.embed_dim


@dataclass
class VelocityNet:
    """Architecture, parameters and EMA shadow.

    ``ema_init`` is the parameter vector the EMA started from and
    ``ema_residual`` the weight it still carries (the product of all decays
    applied so far).  Together they give the zero-debiased EMA used for
    inference; see ``ema_weights``.
    """

    spec: NetSpec
    params: np.ndarray
    ema_params: np.ndarray
    ema_decay: float = 0.9999
    ema_init: np.ndarray | None = None
    ema_residual: float = 1.0

    def __post_init__(self):
        n = self.spec.n_params
        if self.params.shape != (n,) or self.ema_params.shape != (n,):
            raise ShapeMismatch(
                f"parameter vectors must have length {n}, got {self.params.shape} / {self.ema_params.shape}"
            )
        if self.ema_init is None:
            self.ema_init = self.ema_params.copy()


@dataclass
class GradientReport:
    loss: float
    grad: np.ndarray


def _unpack(spec: NetSpec, flat: np.ndarray):
    """Views into ``flat``: a list of (W, b) per layer plus the class-embedding table."""
    layers = []
    off = 0
    w = spec.widths
    for a, b in zip(w[:-1], w[1:]):
        W = flat[off : off + a * b].reshape(a, b)
        off += a * b
        bias = flat[off : off + b]
        off += b
        layers.append((W, bias))
    emb = flat[off : off + spec.n_classes * spec.embed_dim].reshape(spec.n_classes, spec.embed_dim)
    return layers, emb


def time_features(t, n_features: int = 64) -> np.ndarray:
    """[sin(f t), cos(f t)] with frequencies on a geometric ladder from 1 to 1e4."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    freqs = np.geomspace(1.0, 1e4, n_features // 2)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _act(a, kind):
    """Activation value plus the factor its derivative needs (sigmoid for silu)."""
    if kind == "relu":
        return np.maximum(a, 0.0), None
    s = expit(a)
    return a * s, s


def _act_grad(a, s, kind):
    if kind == "relu":
        return (a > 0).astype(a.dtype)
    return s * (1.0 + a * (1.0 - s))


def init_params(spec: NetSpec, rng: np.random.Generator, ema_decay: float = 0.9999) -> VelocityNet:
    """He-normal hidden layers, zero output head, N(0, 1) class embeddings; EMA starts equal."""
    flat = np.zeros(spec.n_params)
    layers, emb = _unpack(spec, flat)
    for W, _ in layers[:-1]:
        W[...] = rng.standard_normal(W.shape) * np.sqrt(2.0 / W.shape[0])
    if emb.size:
        emb[...] = rng.standard_normal(emb.shape)
    return VelocityNet(spec=spec, params=flat, ema_params=flat.copy(), ema_decay=ema_decay)


def _inputs(spec: NetSpec, emb, x, t, y):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (spec.n_patches, spec.dim):
        raise ShapeMismatch(f"expected input (B, {spec.n_patches}, {spec.dim}), got {np.shape(x)}")
    b = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (b,))
    parts = [x.reshape(b, -1), time_features(t, spec.time_feat_dim)]
    y_idx = None
    if y is not None:
        y_idx = np.broadcast_to(np.asarray(y), (b,)).astype(np.int64)
        if spec.n_classes == 0 or np.any(y_idx < 0) or np.any(y_idx >= spec.n_classes):
            raise UnknownClass(f"class labels {np.unique(y_idx)} invalid for n_classes={spec.n_classes}")
    if spec.embed_dim:
        parts.append(emb[y_idx] if y_idx is not None else np.zeros((b, spec.embed_dim)))
    return np.concatenate(parts, axis=1), y_idx, single, x.shape


def _forward_cached(spec: NetSpec, flat: np.ndarray, x, t, y):
    layers, emb = _unpack(spec, flat)
    h, y_idx, single, shape = _inputs(spec, emb, x, t, y)
    acts = [h]
    pre = []
    for i, (W, b) in enumerate(layers):
        a = h @ W + b
        if i < len(layers) - 1:
            h, s = _act(a, spec.activation)
            pre.append((a, s))
            acts.append(h)
        else:
            h = a
    return h.reshape(shape), (acts, pre, y_idx, single)


def ema_weights(net: VelocityNet, debias: bool = True) -> np.ndarray:
    """EMA parameters, optionally with the leftover weight of the initial point removed.

    After k updates with decay d the raw shadow is ``d^k * init + (1 - d^k) * avg``,
    where ``avg`` is the exponentially weighted average of the trained
    iterates; debiasing returns ``avg``.  With long schedules ``d^k`` is
    negligible and both agree.
    """
    r = net.ema_residual
    if not debias or r >= 1.0 or r == 0.0:
        return net.ema_params
    return (net.ema_params - r * net.ema_init) / (1.0 - r)


def forward(net: VelocityNet, x, t, y=None, use_ema: bool = False, debias: bool = True) -> np.ndarray:
    """Raw network output with the shape of ``x``; not projected to the tangent space."""
    flat = ema_weights(net, debias) if use_ema else net.params
    out, (_, _, _, single) = _forward_cached(net.spec, flat, x, t, y)
    return out[0] if single else out


def loss_and_grad(net: VelocityNet, batch, y=None, use_ema: bool = False) -> GradientReport:
    """Mean over the batch of ``rfm_loss(tangent_project(forward(x_t, t, y), x_t), u_t)`` and its gradient.

    ``batch`` is a ``PathSample`` with a leading batch axis or a list of them.
    The network always sees internal-convention time.
    """
    if isinstance(batch, PathSample):
        if np.ndim(batch.t) == 0:
            batch = stack_samples([batch])
    else:
        if len(batch) == 0:
            raise EmptyBatch("loss_and_grad needs at least one sample")
        batch = stack_samples(list(batch))
    if len(batch.t) == 0:
        raise EmptyBatch("loss_and_grad needs at least one sample")

    spec = net.spec
    flat = ema_weights(net) if use_ema else net.params
    x = np.asarray(batch.x_t, dtype=float)
    u = np.asarray(batch.internal_u, dtype=float)
    out, (acts, pre, y_idx, _) = _forward_cached(spec, flat, x, batch.internal_t, y)

    bsz, n_patches = x.shape[0], x.shape[1]
    xx = _dot(x, x)[..., None]
    v = out - (_dot(out, x)[..., None] / xx) * x
    diff = v - u
    scale = 1.0 / (bsz * n_patches)
    loss = float(np.sum(diff * diff) * scale)
    # d loss / d out = P^T (2 scale diff), P the symmetric per-patch tangent projector
    g_out = 2.0 * scale * (diff - (_dot(diff, x)[..., None] / xx) * x)

    grad = np.zeros_like(flat)
    g_layers, g_emb = _unpack(spec, grad)
    layers, _ = _unpack(spec, flat)
    delta = g_out.reshape(bsz, -1)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = g_layers[i]
        gW[...] = acts[i].T @ delta
        gb[...] = delta.sum(axis=0)
        delta = delta @ W.T
        if i > 0:
            delta = delta * _act_grad(*pre[i - 1], spec.activation)
    if spec.embed_dim and y_idx is not None:
        np.add.at(g_emb, y_idx, delta[:, -spec.embed_dim :])

    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFinite(f"non-finite loss or gradient (loss={loss}, |grad|={np.linalg.norm(grad)})")
    return GradientReport(loss=loss, grad=grad)


def ema_update(net: VelocityNet, decay: float | None = None) -> VelocityNet:
    """``ema <- decay * ema + (1 - decay) * params``, in place."""
    d = net.ema_decay if decay is None else decay
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {d}")
    net.ema_params *= d
    net.ema_params += (1.0 - d) * net.params
    net.ema_residual *= d
    return net


def save_checkpoint(path, net: VelocityNet, meta: dict | None = None, extra: Sequence[tuple[str, np.ndarray]] = ()):
    """Write params and EMA (plus any ``extra`` float arrays such as optimizer moments)."""
    header = {
        "kind": "velocitynet",
        "spec": asdict(net.spec),
        "widths": list(net.spec.widths),
        "ema_decay": net.ema_decay,
        "ema_residual": net.ema_residual,
        "meta": meta or {},
    }
    arrays = [("params", net.params), ("ema_params", net.ema_params), ("ema_init", net.ema_init), *extra]
    return write_framed(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, arrays)


def load_checkpoint(path) -> tuple[VelocityNet, dict, dict[str, np.ndarray]]:
    header, arrays = read_framed(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    spec_d = dict(header["spec"])
    spec_d["hidden"] = tuple(spec_d["hidden"])
    spec = NetSpec(**spec_d)
    net = VelocityNet(
        spec=spec,
        params=arrays.pop("params"),
        ema_params=arrays.pop("ema_params"),
        ema_decay=header["ema_decay"],
        ema_init=arrays.pop("ema_init"),
        ema_residual=header["ema_residual"],
    )
    return net, header.get("meta", {}), arrays
