"""Feature extractor, classifier and domain discriminator on a flat parameter vector.

All trainable weights live in one float64 vector split into three contiguous
partitions, in this order: ``psi`` (feature extractor), ``theta``
(classifier) and ``phi`` (discriminator). The optimizers and the SAM wrapper
address partitions as slices of that vector.

Weights are stored (fan_in, fan_out), so a layer is ``x @ W + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import make_rng

PARTITIONS = ("psi", "theta", "phi")

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int = 2
    feature_dims: tuple[int, ...] = (16, 16)
    bottleneck_dim: int = 8
    num_classes: int = 2
    disc_hidden: int = 32
    disc_norm: str = "batchnorm"
    conditioning: str = "plain"

    def __post_init__(self):
        object.__setattr__(self, "feature_dims", tuple(int(h) for h in self.feature_dims))
        dims = (self.input_dim, self.bottleneck_dim, self.disc_hidden, *self.feature_dims)
        if any(int(n) < 1 for n in dims):
            raise ValueError(f"all layer widths must be >= 1, got {self}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.disc_norm not in ("batchnorm", "none"):
            raise ValueError(f"disc_norm must be 'batchnorm' or 'none', got {self.disc_norm!r}")
        if self.conditioning not in ("plain", "multilinear"):
            raise ValueError(
                f"conditioning must be 'plain' or 'multilinear', got {self.conditioning!r}"
            )

    @property
    def disc_input_dim(self) -> int:
        if self.conditioning == "multilinear":
            return self.bottleneck_dim * self.num_classes
        return self.bottleneck_dim

    def layout(self) -> list[tuple[str, str, tuple[int, ...]]]:
        """(partition, name, shape) for every trainable tensor, in storage order."""
        out = []
        widths = (self.input_dim, *self.feature_dims, self.bottleneck_dim)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            out += [("psi", f"g{i}.w", (a, b)), ("psi", f"g{i}.b", (b,))]
        out += [
            ("theta", "f.w", (self.bottleneck_dim, self.num_classes)),
            ("theta", "f.b", (self.num_classes,)),
        ]
        h = self.disc_hidden
        for i, a in enumerate((self.disc_input_dim, h)):
            out += [("phi", f"d{i}.w", (a, h)), ("phi", f"d{i}.b", (h,))]
            if self.disc_norm == "batchnorm":
                out += [("phi", f"d{i}.gamma", (h,)), ("phi", f"d{i}.beta", (h,))]
        out += [("phi", "d2.w", (h, 1)), ("phi", "d2.b", (1,))]
        return out


@dataclass
class ModelParams:
    """Flat trainable vector, its named layout, and batch-norm running statistics."""

    spec: ModelSpec
    flat: np.ndarray
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        self.manifest = build_manifest(self.spec)
        n = self.manifest["size"]
        if self.flat.shape != (n,):
            raise ValueError(f"flat vector has shape {self.flat.shape}, layout needs ({n},)")

    @property
    def size(self) -> int:
        return self.flat.size

    def partition(self, name: str) -> slice:
        lo, hi = self.manifest["partitions"][name]
        return slice(lo, hi)

    def scope(self, *names: str) -> np.ndarray:
        """Boolean mask over the flat vector covering the given partitions."""
        mask = np.zeros(self.size, dtype=bool)
        for n in names:
            mask[self.partition(n)] = True
        return mask

    def unflatten(self, flat=None) -> dict[str, np.ndarray]:
        flat = self.flat if flat is None else flat
        return {
            name: flat[lo:hi].reshape(shape)
            for name, (lo, hi, shape) in self.manifest["tensors"].items()
        }

    def views(self, flat: Tensor) -> dict[str, Tensor]:
        """Taped per-layer views into a flat parameter tensor."""
        return {
            name: ad.reshape(flat[lo:hi], shape)
            for name, (lo, hi, shape) in self.manifest["tensors"].items()
        }

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec, self.flat.copy(), {k: v.copy() for k, v in self.buffers.items()}
        )


def build_manifest(spec: ModelSpec) -> dict:
    tensors, parts = {}, {}
    pos = 0
    for part, name, shape in spec.layout():
        n = int(np.prod(shape))
        tensors[name] = (pos, pos + n, shape)
        lo, _ = parts.get(part, (pos, pos))
        parts[part] = (lo, pos + n)
        pos += n
    return {"tensors": tensors, "partitions": parts, "size": pos}


def flatten(spec: ModelSpec, named: dict[str, np.ndarray]) -> np.ndarray:
    manifest = build_manifest(spec)
    flat = np.empty(manifest["size"])
    for name, (lo, hi, shape) in manifest["tensors"].items():
        arr = np.asarray(named[name], dtype=np.float64)
        if arr.shape != tuple(shape):
            raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
        flat[lo:hi] = arr.ravel()
    return flat


def init(spec: ModelSpec, seed: int) -> ModelParams:
    """Uniform(-a, a) weights with a = sqrt(6 / fan_in); zero biases; unit BN scale."""
    rng = make_rng(seed)
    named = {}
    for _, name, shape in spec.layout():
        kind = name.rsplit(".", 1)[1]
        if kind == "w":
            a = math.sqrt(6.0 / shape[0])
            named[name] = rng.uniform(-a, a, size=shape)
        elif kind == "gamma":
            named[name] = np.ones(shape)
        else:
            named[name] = np.zeros(shape)
    buffers = {}
    if spec.disc_norm == "batchnorm":
        for i in range(2):
            buffers[f"d{i}.running_mean"] = np.zeros(spec.disc_hidden)
            buffers[f"d{i}.running_var"] = np.ones(spec.disc_hidden)
    return ModelParams(spec, flatten(spec, named), buffers)


def _as_tensors(p) -> dict[str, Tensor]:
    if isinstance(p, ModelParams):
        return {k: Tensor(v) for k, v in p.unflatten().items()}
    return {k: ad.constant(v) for k, v in p.items()}


def features(p, x) -> Tensor:
    """g_psi: relu MLP followed by a linear map to the bottleneck."""
    p = _as_tensors(p)
    h = ad.constant(x)
    n_layers = sum(1 for k in p if k.startswith("g") and k.endswith(".w"))
    for i in range(n_layers):
        h = ad.linear(h, p[f"g{i}.w"], p[f"g{i}.b"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def classify(p, feats) -> Tensor:
    """f_Theta: a single linear layer to class logits."""
    p = _as_tensors(p)
    return ad.linear(feats, p["f.w"], p["f.b"])


def predict_logits(p, x) -> Tensor:
    return classify(p, features(p, x))


def batch_norm(h: Tensor, gamma, beta, train_mode: bool, running: dict | None, prefix: str):
    """Batch norm as a composite of mean / variance / normalize / affine primitives.

    In train mode the batch statistics are used and, when ``running`` is given,
    its running mean and (unbiased) variance are updated in place.
    """
    if train_mode:
        n = h.shape[0]
        if n < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2 rows")
        mu = ad.mean(h, axis=0, keepdims=True)
        centered = h - mu
        var = ad.mean(centered * centered, axis=0, keepdims=True)
        if running is not None:
            m = BN_MOMENTUM
            rm, rv = f"{prefix}.running_mean", f"{prefix}.running_var"
            running[rm] = (1 - m) * running[rm] + m * mu.data.ravel()
            running[rv] = (1 - m) * running[rv] + m * var.data.ravel() * n / (n - 1)
    else:
        if running is None:
            raise ValueError("eval-mode batch norm needs running statistics")
        mu = Tensor(running[f"{prefix}.running_mean"])
        var = Tensor(running[f"{prefix}.running_var"])
        centered = h - mu
    normed = centered * ad.power(var + BN_EPS, -0.5)
    return normed * gamma + beta


def discriminator_logits(p, disc_input, train_mode: bool, running: dict | None = None):
    """D_Phi pre-sigmoid output, clamped to +-30. Shape (n,)."""
    p = _as_tensors(p)
    h = ad.constant(disc_input)
    use_bn = "d0.gamma" in p
    for i in range(2):
        h = ad.linear(h, p[f"d{i}.w"], p[f"d{i}.b"])
        if use_bn:
            h = batch_norm(h, p[f"d{i}.gamma"], p[f"d{i}.beta"], train_mode, running, f"d{i}")
        h = ad.relu(h)
    z = ad.linear(h, p["d2.w"], p["d2.b"])
    return ad.clip(ad.reshape(z, (z.shape[0],)), -LOGIT_CLAMP, LOGIT_CLAMP)


def discriminate(p, disc_input, train_mode: bool, running: dict | None = None) -> Tensor:
    """Domain probability in (0, 1): Linear-BN-ReLU, Linear-BN-ReLU, Linear-sigmoid."""
    if isinstance(p, ModelParams) and running is None and not train_mode:
        running = p.buffers
    return ad.sigmoid(discriminator_logits(p, disc_input, train_mode, running))


def multilinear_input(feats, class_probs) -> Tensor:
    """Row-wise outer product f (x) p flattened f-major: out[i*k + j] = f[i] * p[j]."""
    f = ad.constant(feats)
    q = ad.constant(class_probs)
    n, b = f.shape
    k = q.shape[1]
    outer = ad.reshape(f, (n, b, 1)) * ad.reshape(q, (n, 1, k))
    return ad.reshape(outer, (n, b * k))


def disc_input(spec: ModelSpec, feats: Tensor, logits: Tensor) -> Tensor:
    """Discriminator input for the configured conditioning mode.

    Class probabilities are detached before conditioning.
    """
    if spec.conditioning == "multilinear":
        probs = ad.stop_gradient(ad.softmax(logits, axis=1))
        out = multilinear_input(feats, probs)
    else:
        out = feats
    if out.shape[1] != spec.disc_input_dim:
        raise ValueError(f"discriminator input width {out.shape[1]} != {spec.disc_input_dim}")
    return out


def grl_lambda(progress: float, gamma: float = 10.0, hi: float = 1.0) -> float:
    """Ramp hi * (2 / (1 + exp(-gamma p)) - 1): 0 at p=0, rising towards hi."""
    return hi * (2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0)


def grl(x, lam: float) -> Tensor:
    """Gradient reversal: identity forward, gradient times -lam backward."""
    if lam < 0:
        raise ValueError("GRL coefficient must be non-negative")
    return ad.scale_gradient(x, -lam)


def grl_backward(upstream_grad, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("GRL coefficient must be non-negative")
    return -lam * np.asarray(upstream_grad, dtype=np.float64)
