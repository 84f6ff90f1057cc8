"""Minimal differentiable compute core: layers with explicit backward passes, Adam, checks."""

from __future__ import annotations

import math
import struct
from collections.abc import Callable, Hashable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.typing import NDArray

from .exceptions import (
    CheckpointVersionMismatch,
    ConfigError,
    EmptyCloud,
    IoFailure,
    MissingGradient,
    NonDeterministicLoss,
    ShapeMismatch,
)

Tensor = NDArray[np.float64]

CHECKPOINT_MAGIC = b"PCRD"
CHECKPOINT_VERSION = 1


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class DenseCache:
    x: Tensor
    weight: Tensor


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, DenseCache]:
    """y = x W + b over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeMismatch(
            f"dense: x {x.shape}, W {weight.shape}, b {bias.shape} do not line up"
        )
    return x @ weight + bias, DenseCache(x=x, weight=weight)


def dense_backward(grad_y: Tensor, cache: DenseCache) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (dx, dW, db)."""
    x_flat = cache.x.reshape(-1, cache.x.shape[-1])
    g_flat = grad_y.reshape(-1, grad_y.shape[-1])
    grad_w = x_flat.T @ g_flat
    grad_b = g_flat.sum(axis=0)
    grad_x = grad_y @ cache.weight.T
    return grad_x, grad_w, grad_b


def relu(x: Tensor) -> tuple[Tensor, NDArray[np.bool_]]:
    mask = x > 0.0
    return np.where(mask, x, 0.0), mask


def relu_backward(grad_y: Tensor, mask: NDArray[np.bool_]) -> Tensor:
    return np.where(mask, grad_y, 0.0)


@dataclass(frozen=True)
class PoolCache:
    argmax: NDArray[np.intp]
    num_points: int


def maxpool_points(x: Tensor) -> tuple[Tensor, PoolCache]:
    """Per-feature max over the point axis (-2); ties go to the first point."""
    if x.ndim < 2 or x.shape[-2] == 0:
        raise EmptyCloud(f"maxpool_points needs at least one point, got shape {x.shape}")
    argmax = np.argmax(x, axis=-2)
    pooled = np.take_along_axis(x, np.expand_dims(argmax, axis=-2), axis=-2)
    return np.squeeze(pooled, axis=-2), PoolCache(argmax=argmax, num_points=x.shape[-2])


def maxpool_points_backward(grad_y: Tensor, cache: PoolCache) -> Tensor:
    shape = grad_y.shape[:-1] + (cache.num_points, grad_y.shape[-1])
    grad_x = np.zeros(shape)
    np.put_along_axis(
        grad_x, np.expand_dims(cache.argmax, axis=-2), np.expand_dims(grad_y, axis=-2), axis=-2
    )
    return grad_x


def sinusoidal_embedding(t: int | Sequence[int] | NDArray[np.int64], dim: int) -> Tensor:
    """Transformer-style sin/cos embedding of integer timesteps."""
    steps = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = steps[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((steps.size, 1))], axis=1)
    return emb


# ----------------------------------------------------------------------
# Parameters and optimizer
# ----------------------------------------------------------------------
def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class ParamStore:
    """Named parameters with gradients and Adam moments."""

    params: dict[str, Tensor] = field(default_factory=dict)
    grads: dict[str, Tensor] = field(default_factory=dict)
    first_moments: dict[str, Tensor] = field(default_factory=dict)
    second_moments: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self.params:
            raise ConfigError(name, "duplicate parameter name")
        array = np.array(value, dtype=np.float64)
        self.params[name] = array
        self.first_moments[name] = np.zeros_like(array)
        self.second_moments[name] = np.zeros_like(array)
        return array

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: object) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def size(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        self.grads = {}

    def accumulate(self, name: str, grad: Tensor) -> None:
        param = self.params[name]
        if grad.shape != param.shape:
            raise ShapeMismatch(
                f"gradient for {name} has shape {grad.shape}, expected {param.shape}"
            )
        if name in self.grads:
            self.grads[name] += grad
        else:
            self.grads[name] = np.array(grad, dtype=np.float64)

    def scale_grads(self, factor: float) -> None:
        for grad in self.grads.values():
            grad *= factor

    def load(self, values: Mapping[str, NDArray[np.floating]]) -> None:
        """Copy values in place; names and shapes must match exactly."""
        if set(values) != set(self.params):
            missing = sorted(set(self.params) - set(values))
            extra = sorted(set(values) - set(self.params))
            raise ShapeMismatch(f"parameter sets differ: missing {missing}, unexpected {extra}")
        for name, value in values.items():
            if value.shape != self.params[name].shape:
                raise ShapeMismatch(
                    f"{name}: stored shape {value.shape}, model shape {self.params[name].shape}"
                )
            self.params[name][...] = value


def adam_step(
    store: ParamStore,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_hat: float = 1e-8,
) -> ParamStore:
    missing = [name for name in store.params if name not in store.grads]
    if missing:
        raise MissingGradient(f"no gradient for {missing[:5]}")
    store.step += 1
    correction1 = 1.0 - beta1**store.step
    correction2 = 1.0 - beta2**store.step
    for name, param in store.params.items():
        grad = store.grads[name]
        m = store.first_moments[name]
        v = store.second_moments[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps_hat)
    return store


# ----------------------------------------------------------------------
# Shared MLP
# ----------------------------------------------------------------------
@dataclass
class MlpTape:
    caches: list[DenseCache] = field(default_factory=list)
    masks: list[NDArray[np.bool_] | None] = field(default_factory=list)


class Mlp:
    """Stack of dense layers with ReLU between them, stored under ``prefix``."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        widths: Sequence[int],
        rng: np.random.Generator,
        *,
        final_relu: bool,
    ) -> None:
        if len(widths) < 2:
            raise ConfigError(prefix, "an MLP needs input and output widths")
        self.store = store
        self.prefix = prefix
        self.widths = tuple(int(w) for w in widths)
        self.final_relu = final_relu
        self.layer_names: list[tuple[str, str]] = []
        for idx, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            w_name, b_name = f"{prefix}.{idx}.weight", f"{prefix}.{idx}.bias"
            store.add(w_name, glorot_uniform(rng, fan_in, fan_out))
            store.add(b_name, np.zeros(fan_out))
            self.layer_names.append((w_name, b_name))

    def forward(
        self, x: Tensor, *, inject: Mapping[int, Tensor] | None = None
    ) -> tuple[Tensor, MlpTape]:
        """Run the stack; ``inject[i]`` is added to the activation after layer ``i``."""
        tape = MlpTape()
        last = len(self.layer_names) - 1
        for idx, (w_name, b_name) in enumerate(self.layer_names):
            x, cache = dense(x, self.store[w_name], self.store[b_name])
            tape.caches.append(cache)
            mask = None
            if idx < last or self.final_relu:
                x, mask = relu(x)
            tape.masks.append(mask)
            if inject and idx in inject:
                x = x + inject[idx]
        return x, tape

    def backward(self, grad_y: Tensor, tape: MlpTape) -> Tensor:
        grad = grad_y
        for idx in reversed(range(len(self.layer_names))):
            mask = tape.masks[idx]
            if mask is not None:
                grad = relu_backward(grad, mask)
            grad, grad_w, grad_b = dense_backward(grad, tape.caches[idx])
            w_name, b_name = self.layer_names[idx]
            self.store.accumulate(w_name, grad_w)
            self.store.accumulate(b_name, grad_b)
        return grad


# ----------------------------------------------------------------------
# Finite-difference verification
# ----------------------------------------------------------------------
class LossClosure(Protocol):
    def __call__(self, *, backward: bool) -> float: ...


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst_parameter: str | None = None


def grad_check(
    closure: LossClosure,
    store: ParamStore,
    h: float = 1e-5,
    *,
    sample_size: int = 10_000,
    rng: np.random.Generator | None = None,
    signature: Callable[[], Hashable] | None = None,
    floor: float = 1e-4,
) -> GradCheckResult:
    """Compare backprop gradients with central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, floor). When ``signature`` is
    given, entries whose +-h evaluations change the activation pattern sit on a kink
    and are counted as skipped.
    """
    loss = closure(backward=True)
    analytic = {name: grad.copy() for name, grad in store.grads.items()}
    base_signature = signature() if signature is not None else None
    if closure(backward=False) != loss:
        raise NonDeterministicLoss("two forward passes on the same inputs disagree")
    missing = [name for name in store.params if name not in analytic]
    if missing:
        raise MissingGradient(f"closure left {missing[:5]} without a gradient")

    entries = [(name, idx) for name in store.params for idx in range(store[name].size)]
    if len(entries) > sample_size:
        picker = rng or np.random.default_rng(0)
        chosen = picker.choice(len(entries), size=sample_size, replace=False)
        entries = [entries[i] for i in sorted(chosen)]

    worst = 0.0
    worst_name: str | None = None
    checked = skipped = 0
    for name, idx in entries:
        flat = store[name].reshape(-1)
        original = flat[idx]
        flat[idx] = original + h
        plus = closure(backward=False)
        sig_plus = signature() if signature is not None else None
        flat[idx] = original - h
        minus = closure(backward=False)
        sig_minus = signature() if signature is not None else None
        flat[idx] = original
        if signature is not None and not (sig_plus == base_signature == sig_minus):
            skipped += 1
            continue
        numeric = (plus - minus) / (2.0 * h)
        exact = float(analytic[name].reshape(-1)[idx])
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        checked += 1
        if rel > worst:
            worst, worst_name = rel, name
    return GradCheckResult(
        max_rel_error=worst, checked=checked, skipped=skipped, worst_parameter=worst_name
    )


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------
def encode_checkpoint(tensors: Mapping[str, NDArray[np.floating]]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(value)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> dict[str, NDArray[np.float32]]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointVersionMismatch(f"bad magic {blob[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionMismatch(
                f"checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        offset = 12
        tensors: dict[str, NDArray[np.float32]] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            tensors[name] = values.reshape(dims).astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointVersionMismatch(f"truncated or corrupt checkpoint: {exc}") from exc
    return tensors


def save_checkpoint(path: str | Path, store: ParamStore) -> None:
    try:
        Path(path).write_bytes(encode_checkpoint(store.params))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> dict[str, NDArray[np.float32]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


__all__ = [
    "Tensor",
    "DenseCache",
    "PoolCache",
    "dense",
    "dense_backward",
    "relu",
    "relu_backward",
    "maxpool_points",
    "maxpool_points_backward",
    "sinusoidal_embedding",
    "glorot_uniform",
    "ParamStore",
    "adam_step",
    "Mlp",
    "MlpTape",
    "LossClosure",
    "GradCheckResult",
    "grad_check",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]
