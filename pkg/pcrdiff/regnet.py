"""Denoising networks: point-cloud encoders, transform encoder, fusion and the two heads."""

from __future__ import annotations

import json
import math
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree
from scipy.special import logsumexp, softmax

from .diffusion import COSINE_OFFSET, Denoiser, NoiseSchedule, cosine_schedule
from .exceptions import (
    BadRange,
    CheckpointVersionMismatch,
    ConfigError,
    EmptyCloud,
    IoFailure,
    NumericalOverflow,
    ShapeMismatch,
    StepOutOfRange,
    TooFewPoints,
)
from .geom3d import (
    CODECS,
    KabschSolution,
    RigidTransform,
    TransformCodec,
    codec_for,
    kabsch_backward,
    solve_kabsch,
)
from .hooks import ForwardEvent, ForwardHook
from .nnkit import (
    Mlp,
    MlpTape,
    ParamStore,
    PoolCache,
    Tensor,
    load_checkpoint,
    maxpool_points,
    maxpool_points_backward,
    save_checkpoint,
    sinusoidal_embedding,
)

FusionMode = Literal["ft+p_cat_q", "ft+q_cat_p", "cat_all"]
FUSION_MODES: tuple[str, ...] = ("ft+p_cat_q", "ft+q_cat_p", "cat_all")
SIDECAR_VERSION = 1


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------
def _check_widths(key: str, widths: Sequence[int]) -> None:
    if not widths or any(int(w) < 1 for w in widths):
        raise ConfigError(key, f"widths must be positive integers, got {list(widths)}")


def _check_common(prefix: str, representation: str, hidden: int, embed_dim: int) -> None:
    if representation not in CODECS:
        raise ConfigError(f"{prefix}.representation", f"unknown representation {representation!r}")
    if embed_dim != hidden:
        raise ConfigError(
            f"{prefix}.embed_dim",
            f"timestep embedding ({embed_dim}) must match the transform hidden width ({hidden})",
        )


@dataclass(frozen=True)
class CFModelConfig:
    """Correspondence-free regression network."""

    encoder_widths: tuple[int, ...] = (64, 64, 64, 128, 1024)
    transform_hidden: int = 128
    embed_dim: int = 128
    decoder_widths: tuple[int, ...] = (1024, 512, 256)
    fusion: str = "ft+p_cat_q"
    representation: str = "quat7"
    diffusion: bool = True

    variant = "cf"

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        _check_widths("model.encoder_widths", self.encoder_widths)
        _check_widths("model.decoder_widths", self.decoder_widths)
        if self.fusion not in FUSION_MODES:
            raise ConfigError(
                "model.fusion", f"expected one of {FUSION_MODES}, got {self.fusion!r}"
            )
        _check_common("model", self.representation, self.transform_hidden, self.embed_dim)

    @property
    def feature_dim(self) -> int:
        return self.encoder_widths[-1]

    @property
    def fused_dim(self) -> int:
        return self.feature_dim * (3 if self.fusion == "cat_all" else 2)


@dataclass(frozen=True)
class CBModelConfig:
    """Correspondence-based network: point-wise features, Sinkhorn matching, weighted SVD."""

    feature_widths: tuple[int, ...] = (64, 64, 128, 256)
    sinkhorn_iters: int = 5
    temp_max: float = 1.0
    temp_min: float = 0.1
    knn: int = 16
    transform_hidden: int = 128
    embed_dim: int = 128
    representation: str = "quat7"
    diffusion: bool = True

    variant = "cb"

    def __post_init__(self) -> None:
        object.__setattr__(self, "feature_widths", tuple(int(w) for w in self.feature_widths))
        _check_widths("model.feature_widths", self.feature_widths)
        if self.sinkhorn_iters < 1:
            raise ConfigError("model.sinkhorn_iters", "needs at least one iteration")
        if not 0.0 < self.temp_min <= self.temp_max:
            raise ConfigError("model.temp_min", "need 0 < temp_min <= temp_max")
        if self.knn < 2:
            raise ConfigError("model.knn", f"neighbourhood needs at least 2 points, got {self.knn}")
        _check_common("model", self.representation, self.transform_hidden, self.embed_dim)

    @property
    def descriptor_dim(self) -> int:
        return self.knn + 6

    @property
    def feature_dim(self) -> int:
        return self.feature_widths[-1]


ModelConfig = CFModelConfig | CBModelConfig


def model_config_to_dict(config: ModelConfig) -> dict[str, Any]:
    payload = asdict(config)
    payload["variant"] = config.variant
    for key, value in payload.items():
        if isinstance(value, tuple):
            payload[key] = list(value)
    return payload


def model_config_from_dict(payload: Mapping[str, Any]) -> ModelConfig:
    data = dict(payload)
    variant = data.pop("variant", "cf")
    cls: type[CFModelConfig] | type[CBModelConfig]
    if variant == "cf":
        cls = CFModelConfig
    elif variant == "cb":
        cls = CBModelConfig
    else:
        raise ConfigError("model.variant", f"expected 'cf' or 'cb', got {variant!r}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"model.{unknown[0]}", "unknown key")
    for key, value in data.items():
        if isinstance(value, list):
            data[key] = tuple(value)
    return cls(**data)


# ----------------------------------------------------------------------
# Fusion
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class FeatureBundle:
    f_p: Tensor
    f_q: Tensor
    f_t: Tensor


def fuse(bundle: FeatureBundle, mode: str) -> Tensor:
    """Combine encoded transform and cloud features (concatenation on the last axis)."""
    if not bundle.f_p.shape == bundle.f_q.shape == bundle.f_t.shape:
        raise ShapeMismatch(
            f"fusion widths differ: F_P {bundle.f_p.shape}, F_Q {bundle.f_q.shape}, "
            f"F_t {bundle.f_t.shape}"
        )
    if mode == "ft+p_cat_q":
        return np.concatenate([bundle.f_t + bundle.f_p, bundle.f_q], axis=-1)
    if mode == "ft+q_cat_p":
        return np.concatenate([bundle.f_p, bundle.f_t + bundle.f_q], axis=-1)
    if mode == "cat_all":
        return np.concatenate([bundle.f_t, bundle.f_p, bundle.f_q], axis=-1)
    raise ConfigError("model.fusion", f"unknown fusion mode {mode!r}")


def fuse_backward(grad: Tensor, mode: str, width: int) -> FeatureBundle:
    first, second = grad[..., :width], grad[..., width : 2 * width]
    if mode == "ft+p_cat_q":
        return FeatureBundle(f_p=first, f_q=second, f_t=first)
    if mode == "ft+q_cat_p":
        return FeatureBundle(f_p=first, f_q=second, f_t=second)
    if mode == "cat_all":
        return FeatureBundle(f_p=second, f_q=grad[..., 2 * width :], f_t=first)
    raise ConfigError("model.fusion", f"unknown fusion mode {mode!r}")


# ----------------------------------------------------------------------
# Shared pieces
# ----------------------------------------------------------------------
class TransformEncoder:
    """dim -> hidden (+ timestep embedding) -> out, ReLU after both layers."""

    def __init__(
        self,
        store: ParamStore,
        dim: int,
        hidden: int,
        out_dim: int,
        T: int,
        rng: np.random.Generator,
    ) -> None:
        self.T = T
        self.hidden = hidden
        self.mlp = Mlp(store, "transform_encoder", (dim, hidden, out_dim), rng, final_relu=True)

    def forward(self, g_t: Tensor, t: NDArray[np.int64]) -> tuple[Tensor, MlpTape]:
        steps = np.atleast_1d(np.asarray(t, dtype=np.int64))
        bad = steps[(steps < 0) | (steps > self.T)]
        if bad.size:
            raise StepOutOfRange(f"timestep {int(bad[0])} outside [0, {self.T}]")
        emb = sinusoidal_embedding(steps, self.hidden)
        return self.mlp.forward(np.atleast_2d(g_t), inject={0: emb})

    def backward(self, grad: Tensor, tape: MlpTape) -> None:
        self.mlp.backward(grad, tape)


def _as_steps(t: int | ArrayLike, batch: int) -> NDArray[np.int64]:
    steps = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if steps.size == 1 and batch > 1:
        steps = np.full(batch, int(steps[0]), dtype=np.int64)
    if steps.shape != (batch,):
        raise ShapeMismatch(f"expected {batch} timesteps, got {steps.shape}")
    return steps


def _as_vectors(g_t: ArrayLike, dim: int) -> Tensor:
    vectors = np.atleast_2d(np.asarray(g_t, dtype=np.float64))
    if vectors.shape[-1] != dim:
        raise ShapeMismatch(f"transform vectors must have {dim} entries, got {vectors.shape}")
    return vectors


@dataclass
class BatchForward:
    """Predictions for a batch of pairs plus whatever each head needs for backward."""

    predictions: Tensor
    transforms: list[RigidTransform]
    states: list[Any] = field(default_factory=list)
    slices: list[slice] = field(default_factory=list)


class _BaseNet:
    variant = ""

    def __init__(self, config: ModelConfig, T: int, schedule_offset: float) -> None:
        if T < 1:
            raise ConfigError("train.T", f"T must be >= 1, got {T}")
        self.config = config
        self.T = T
        self.schedule_offset = schedule_offset
        self.codec: TransformCodec = codec_for(config.representation)
        self.store = ParamStore()
        self.counters: Counter[str] = Counter()
        self.hooks: list[ForwardHook] = []

    @property
    def dim(self) -> int:
        return self.codec.dim

    def schedule(self) -> NoiseSchedule:
        """The noise schedule this network was trained against."""
        return cosine_schedule(self.T, self.schedule_offset)

    def _count(self, kind: str, count: int = 1) -> None:
        self.counters[kind] += count
        if self.hooks:
            event = ForwardEvent(kind=kind, count=count, total=self.counters[kind])
            for hook in self.hooks:
                hook(event)

    def reset_counters(self) -> None:
        self.counters.clear()


# ----------------------------------------------------------------------
# Correspondence-free head
# ----------------------------------------------------------------------
@dataclass
class CloudEncoding:
    feature: Tensor
    tape: MlpTape
    pool: PoolCache


@dataclass
class CFForward:
    prediction: Tensor
    fused_tape: MlpTape
    source: CloudEncoding
    template: CloudEncoding
    transform_tape: MlpTape | None


def _as_cloud_batch(points: ArrayLike) -> Tensor:
    batch = np.asarray(points, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.ndim != 3 or batch.shape[-1] != 3:
        raise ShapeMismatch(f"expected clouds of shape [B, N, 3], got {batch.shape}")
    if batch.shape[1] == 0:
        raise EmptyCloud("cloud has no points")
    return batch


class CorrespondenceFreeNet(_BaseNet):
    """Global max-pooled features of both clouds, fused with F_t, regressed to a vector."""

    variant = "cf"
    config: CFModelConfig

    def __init__(
        self,
        config: CFModelConfig,
        T: int,
        rng: np.random.Generator,
        *,
        schedule_offset: float = COSINE_OFFSET,
    ) -> None:
        super().__init__(config, T, schedule_offset)
        width = config.feature_dim
        self.encoder = Mlp(self.store, "encoder", (3, *config.encoder_widths), rng, final_relu=True)
        self.transform_encoder: TransformEncoder | None = None
        if config.diffusion:
            self.transform_encoder = TransformEncoder(
                self.store, self.dim, config.transform_hidden, width, T, rng
            )
        self.decoder = Mlp(
            self.store,
            "decoder",
            (config.fused_dim, *config.decoder_widths, self.dim),
            rng,
            final_relu=False,
        )

    def encode_cloud(self, points: ArrayLike) -> CloudEncoding:
        batch = _as_cloud_batch(points)
        hidden, tape = self.encoder.forward(batch)
        pooled, pool = maxpool_points(hidden)
        self._count("encode_cloud", batch.shape[0])
        return CloudEncoding(feature=pooled, tape=tape, pool=pool)

    def encode_pointcloud_global(self, points: ArrayLike) -> Tensor:
        """Permutation-invariant global feature of one cloud."""
        return self.encode_cloud(points).feature[0]

    def encode_transform(self, g_t: ArrayLike, t: int | ArrayLike) -> Tensor:
        vectors = _as_vectors(g_t, self.dim)
        return self._transform_features(vectors, _as_steps(t, vectors.shape[0]))[0]

    def _transform_features(
        self, vectors: Tensor, steps: NDArray[np.int64]
    ) -> tuple[Tensor, MlpTape | None]:
        if self.transform_encoder is None:
            if np.any((steps < 0) | (steps > self.T)):
                raise StepOutOfRange(f"timesteps {steps.tolist()} outside [0, {self.T}]")
            return np.zeros((vectors.shape[0], self.config.feature_dim)), None
        return self.transform_encoder.forward(vectors, steps)

    def _decode(
        self, f_p: Tensor, f_q: Tensor, g_t: ArrayLike, t: int | ArrayLike
    ) -> tuple[Tensor, MlpTape, MlpTape | None]:
        vectors = _as_vectors(g_t, self.dim)
        if vectors.shape[0] != f_p.shape[0]:
            raise ShapeMismatch(f"{vectors.shape[0]} transforms for {f_p.shape[0]} cloud pairs")
        f_t, transform_tape = self._transform_features(vectors, _as_steps(t, vectors.shape[0]))
        fused = fuse(FeatureBundle(f_p=f_p, f_q=f_q, f_t=f_t), self.config.fusion)
        prediction, fused_tape = self.decoder.forward(fused)
        self._count("decode", prediction.shape[0])
        return prediction, fused_tape, transform_tape

    def forward(
        self, source: ArrayLike, template: ArrayLike, g_t: ArrayLike, t: int | ArrayLike
    ) -> CFForward:
        src = self.encode_cloud(source)
        tpl = self.encode_cloud(template)
        if src.feature.shape[0] != tpl.feature.shape[0]:
            raise ShapeMismatch("source and template batches differ in size")
        prediction, fused_tape, transform_tape = self._decode(src.feature, tpl.feature, g_t, t)
        return CFForward(prediction, fused_tape, src, tpl, transform_tape)

    def cf_forward(
        self, source: ArrayLike, template: ArrayLike, g_t: ArrayLike, t: int
    ) -> Tensor:
        """Single-pair prediction of the clean transform vector."""
        return self.forward(source, template, g_t, t).prediction[0]

    def forward_batch(
        self,
        sources: Sequence[ArrayLike],
        templates: Sequence[ArrayLike],
        g_t: ArrayLike,
        t: ArrayLike,
    ) -> BatchForward:
        vectors = _as_vectors(g_t, self.dim)
        steps = _as_steps(t, vectors.shape[0])
        srcs = [np.asarray(p, dtype=np.float64) for p in sources]
        tpls = [np.asarray(q, dtype=np.float64) for q in templates]
        if len({p.shape for p in srcs}) == 1 and len({q.shape for q in tpls}) == 1:
            groups = [slice(0, len(srcs))]
        else:
            groups = [slice(i, i + 1) for i in range(len(srcs))]
        states = [
            self.forward(np.stack(srcs[s]), np.stack(tpls[s]), vectors[s], steps[s]) for s in groups
        ]
        predictions = np.concatenate([state.prediction for state in states], axis=0)
        transforms = [self.codec.decode(vec) for vec in predictions]
        return BatchForward(predictions, transforms, states, groups)

    def backward(
        self,
        batch: BatchForward,
        grad_vec: Tensor,
        grad_rotation: Tensor | None = None,
        grad_translation: Tensor | None = None,
    ) -> None:
        """Accumulate parameter gradients from losses on the vectors and decoded (R, t)."""
        total = np.array(grad_vec, dtype=np.float64)
        if grad_rotation is not None and grad_translation is not None:
            for b, vec in enumerate(batch.predictions):
                total[b] += self.codec.decode_grad(vec, grad_rotation[b], grad_translation[b])
        for state, group in zip(batch.states, batch.slices):
            self._backward_state(state, total[group])

    def _backward_state(self, state: CFForward, grad_prediction: Tensor) -> None:
        grad_fused = self.decoder.backward(grad_prediction, state.fused_tape)
        parts = fuse_backward(grad_fused, self.config.fusion, self.config.feature_dim)
        if self.transform_encoder is not None and state.transform_tape is not None:
            self.transform_encoder.backward(parts.f_t, state.transform_tape)
        for encoding, grad in ((state.source, parts.f_p), (state.template, parts.f_q)):
            grad_hidden = maxpool_points_backward(grad, encoding.pool)
            self.encoder.backward(grad_hidden, encoding.tape)

    def denoiser(self, source: ArrayLike, template: ArrayLike) -> Denoiser:
        """Sampling closure that encodes both clouds once and only re-runs the decoder."""
        f_p = self.encode_cloud(source).feature
        f_q = self.encode_cloud(template).feature

        def predict(g_t: Tensor, t: int, _conditioning: Any) -> Tensor:
            prediction, _, _ = self._decode(f_p, f_q, g_t, t)
            return prediction[0]

        return predict


# ----------------------------------------------------------------------
# Correspondence-based head
# ----------------------------------------------------------------------
def local_descriptors(points: ArrayLike, knn: int) -> Tensor:
    """Rigid-motion invariant per-point descriptors from the k-neighbourhood.

    Columns: sorted neighbour distances (k, self included), local covariance
    eigenvalues (3), |normal . (centroid - p)|, |centroid - p|, distance to the
    cloud centroid.
    """
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ShapeMismatch(f"expected a cloud of shape [N, 3], got {cloud.shape}")
    if cloud.shape[0] < knn:
        raise TooFewPoints(f"{cloud.shape[0]} points for a {knn}-neighbourhood")
    distances, index = cKDTree(cloud).query(cloud, k=list(range(1, knn + 1)))
    neighbours = cloud[index]
    centroid = neighbours.mean(axis=1)
    centered = neighbours - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / knn
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    normal = eigenvectors[:, :, 0]
    offset = centroid - cloud
    return np.concatenate(
        [
            distances,
            eigenvalues,
            np.abs(np.einsum("ni,ni->n", normal, offset))[:, None],
            np.linalg.norm(offset, axis=1)[:, None],
            np.linalg.norm(cloud - cloud.mean(axis=0), axis=1)[:, None],
        ],
        axis=1,
    )


@dataclass(frozen=True)
class SinkhornTrace:
    """Log-matrices entering each normalization, in order (row, column, row, ...)."""

    inputs: tuple[Tensor, ...]
    temp: float


def annealed_temperature(t: int, T: int, temp_max: float, temp_min: float) -> float:
    """Geometric interpolation: temp_max at t = T, temp_min at t = 0."""
    return temp_max * (temp_min / temp_max) ** (1.0 - t / T)


def sinkhorn_with_trace(sim: ArrayLike, iters: int, temp: float) -> tuple[Tensor, SinkhornTrace]:
    scores = np.asarray(sim, dtype=np.float64)
    if temp <= 0.0:
        raise BadRange(f"temperature must be positive, got {temp}")
    if iters < 1:
        raise BadRange(f"Sinkhorn needs at least one iteration, got {iters}")
    if not np.all(np.isfinite(scores)):
        raise NumericalOverflow("similarity matrix has non-finite entries")
    log_a = scores / temp
    log_a = log_a - log_a.max()
    inputs: list[Tensor] = []
    for _ in range(iters):
        inputs.append(log_a)
        log_a = log_a - logsumexp(log_a, axis=1, keepdims=True)
        inputs.append(log_a)
        log_a = log_a - logsumexp(log_a, axis=0, keepdims=True)
    assignment = np.exp(log_a)
    if not np.all(np.isfinite(assignment)):
        raise NumericalOverflow("Sinkhorn normalization produced non-finite values")
    return assignment, SinkhornTrace(inputs=tuple(inputs), temp=temp)


def sinkhorn(sim: ArrayLike, iters: int, temp: float) -> Tensor:
    """exp(sim / temp) followed by ``iters`` row-then-column normalizations (log domain)."""
    return sinkhorn_with_trace(sim, iters, temp)[0]


def sinkhorn_backward(grad_assignment: Tensor, assignment: Tensor, trace: SinkhornTrace) -> Tensor:
    grad = grad_assignment * assignment
    for idx in reversed(range(len(trace.inputs))):
        axis = 1 if idx % 2 == 0 else 0
        probs = softmax(trace.inputs[idx], axis=axis)
        grad = grad - probs * grad.sum(axis=axis, keepdims=True)
    return grad / trace.temp


@dataclass(frozen=True)
class SoftCorrespondence:
    assignment: Tensor
    trace: SinkhornTrace
    targets: Tensor
    weights: Tensor
    solution: KabschSolution


def soft_correspondence_fit(
    source: Tensor, template: Tensor, sim: Tensor, iters: int, temp: float
) -> SoftCorrespondence:
    """Sinkhorn assignment, soft targets y_i = sum_j A_ij q_j / w_i, then weighted Kabsch."""
    assignment, trace = sinkhorn_with_trace(sim, iters, temp)
    weights = assignment.sum(axis=1)
    targets = (assignment @ template) / np.maximum(weights, 1e-300)[:, None]
    solution = solve_kabsch(source, targets, weights)
    return SoftCorrespondence(assignment, trace, targets, weights, solution)


def soft_correspondence_backward(
    fit: SoftCorrespondence,
    source: Tensor,
    template: Tensor,
    grad_rotation: Tensor,
    grad_translation: Tensor,
) -> Tensor:
    """Gradient of a loss on the fitted (R, t) with respect to the similarity matrix."""
    grad_targets, grad_weights = kabsch_backward(
        fit.solution, source, fit.targets, grad_rotation, grad_translation
    )
    scaled = grad_targets / np.maximum(fit.weights, 1e-300)[:, None]
    grad_assignment = (
        scaled @ template.T
        - np.einsum("ij,ij->i", scaled, fit.targets)[:, None]
        + grad_weights[:, None]
    )
    return sinkhorn_backward(grad_assignment, fit.assignment, fit.trace)


@dataclass
class CBForward:
    prediction: Tensor
    transform: RigidTransform
    fit: SoftCorrespondence
    source: Tensor
    template: Tensor
    f_p: Tensor
    f_q: Tensor
    f_t: Tensor
    source_tape: MlpTape
    template_tape: MlpTape
    transform_tape: MlpTape | None


class CorrespondenceBasedNet(_BaseNet):
    """Point-wise invariant features, Sinkhorn soft matching and a weighted SVD fit."""

    variant = "cb"
    config: CBModelConfig

    def __init__(
        self,
        config: CBModelConfig,
        T: int,
        rng: np.random.Generator,
        *,
        schedule_offset: float = COSINE_OFFSET,
    ) -> None:
        super().__init__(config, T, schedule_offset)
        self.pointwise = Mlp(
            self.store,
            "pointwise",
            (config.descriptor_dim, *config.feature_widths),
            rng,
            final_relu=False,
        )
        self.transform_encoder: TransformEncoder | None = None
        if config.diffusion:
            self.transform_encoder = TransformEncoder(
                self.store, self.dim, config.transform_hidden, config.feature_dim, T, rng
            )

    def cb_pointwise_features(self, points: ArrayLike) -> Tensor:
        return self._pointwise(points)[0]

    def _pointwise(self, points: ArrayLike) -> tuple[Tensor, MlpTape]:
        features, tape = self.pointwise.forward(local_descriptors(points, self.config.knn))
        self._count("encode_cloud")
        return features, tape

    def encode_transform(self, g_t: ArrayLike, t: int) -> Tensor:
        return self._transform_features(_as_vectors(g_t, self.dim), t)[0][0]

    def _transform_features(self, vectors: Tensor, t: int) -> tuple[Tensor, MlpTape | None]:
        if self.transform_encoder is None:
            if not 0 <= t <= self.T:
                raise StepOutOfRange(f"timestep {t} outside [0, {self.T}]")
            return np.zeros((1, self.config.feature_dim)), None
        return self.transform_encoder.forward(vectors, np.array([t]))

    def _decode(
        self,
        source: Tensor,
        template: Tensor,
        f_p: Tensor,
        f_q: Tensor,
        g_t: ArrayLike,
        t: int,
    ) -> tuple[SoftCorrespondence, Tensor, MlpTape | None]:
        vectors = _as_vectors(g_t, self.dim)
        f_t, transform_tape = self._transform_features(vectors, t)
        scale = math.sqrt(self.config.feature_dim)
        sim = f_p @ (f_q + f_t).T / scale
        temp = annealed_temperature(t, self.T, self.config.temp_max, self.config.temp_min)
        fit = soft_correspondence_fit(source, template, sim, self.config.sinkhorn_iters, temp)
        self._count("decode")
        return fit, f_t, transform_tape

    def forward(
        self, source: ArrayLike, template: ArrayLike, g_t: ArrayLike, t: int
    ) -> CBForward:
        src = np.asarray(source, dtype=np.float64)
        tpl = np.asarray(template, dtype=np.float64)
        f_p, source_tape = self._pointwise(src)
        f_q, template_tape = self._pointwise(tpl)
        fit, f_t, transform_tape = self._decode(src, tpl, f_p, f_q, g_t, int(t))
        transform = fit.solution.transform()
        return CBForward(
            prediction=self.codec.encode(transform),
            transform=transform,
            fit=fit,
            source=src,
            template=tpl,
            f_p=f_p,
            f_q=f_q,
            f_t=f_t,
            source_tape=source_tape,
            template_tape=template_tape,
            transform_tape=transform_tape,
        )

    def cb_forward(
        self, source: ArrayLike, template: ArrayLike, g_t: ArrayLike, t: int
    ) -> Tensor:
        return self.forward(source, template, g_t, t).prediction

    def forward_batch(
        self,
        sources: Sequence[ArrayLike],
        templates: Sequence[ArrayLike],
        g_t: ArrayLike,
        t: ArrayLike,
    ) -> BatchForward:
        vectors = _as_vectors(g_t, self.dim)
        steps = _as_steps(t, vectors.shape[0])
        states = [
            self.forward(src, tpl, vectors[b], int(steps[b]))
            for b, (src, tpl) in enumerate(zip(sources, templates))
        ]
        return BatchForward(
            predictions=np.stack([state.prediction for state in states]),
            transforms=[state.transform for state in states],
            states=states,
            slices=[slice(b, b + 1) for b in range(len(states))],
        )

    def backward(
        self,
        batch: BatchForward,
        grad_vec: Tensor,
        grad_rotation: Tensor | None = None,
        grad_translation: Tensor | None = None,
    ) -> None:
        for b, state in enumerate(batch.states):
            g_rot, g_trans = self.codec.tangent_grad(state.transform, grad_vec[b])
            if grad_rotation is not None and grad_translation is not None:
                g_rot = g_rot + grad_rotation[b]
                g_trans = g_trans + grad_translation[b]
            self._backward_state(state, g_rot, g_trans)

    def _backward_state(
        self, state: CBForward, grad_rotation: Tensor, grad_translation: Tensor
    ) -> None:
        grad_sim = soft_correspondence_backward(
            state.fit, state.source, state.template, grad_rotation, grad_translation
        )
        scale = math.sqrt(self.config.feature_dim)
        grad_f_p = grad_sim @ (state.f_q + state.f_t) / scale
        grad_f_q = grad_sim.T @ state.f_p / scale
        self.pointwise.backward(grad_f_p, state.source_tape)
        self.pointwise.backward(grad_f_q, state.template_tape)
        if self.transform_encoder is not None and state.transform_tape is not None:
            grad_f_t = grad_f_q.sum(axis=0, keepdims=True)
            self.transform_encoder.backward(grad_f_t, state.transform_tape)

    def denoiser(self, source: ArrayLike, template: ArrayLike) -> Denoiser:
        src = np.asarray(source, dtype=np.float64)
        tpl = np.asarray(template, dtype=np.float64)
        f_p, _ = self._pointwise(src)
        f_q, _ = self._pointwise(tpl)

        def predict(g_t: Tensor, t: int, _conditioning: Any) -> Tensor:
            fit, _, _ = self._decode(src, tpl, f_p, f_q, g_t, t)
            return self.codec.encode(fit.solution.transform())

        return predict


RegistrationModel = CorrespondenceFreeNet | CorrespondenceBasedNet


def _tape_bytes(tape: MlpTape | None) -> list[bytes]:
    if tape is None:
        return []
    return [np.packbits(mask).tobytes() for mask in tape.masks if mask is not None]


def batch_signature(batch: BatchForward) -> bytes:
    """ReLU masks and max-pool winners of a forward pass; changes whenever a kink is crossed."""
    chunks: list[bytes] = []
    for state in batch.states:
        if isinstance(state, CFForward):
            chunks += _tape_bytes(state.fused_tape) + _tape_bytes(state.transform_tape)
            for encoding in (state.source, state.template):
                chunks += _tape_bytes(encoding.tape)
                chunks.append(encoding.pool.argmax.tobytes())
        else:
            chunks += _tape_bytes(state.source_tape) + _tape_bytes(state.template_tape)
            chunks += _tape_bytes(state.transform_tape)
    return b"|".join(chunks)


def build_model(
    config: ModelConfig,
    T: int,
    rng: np.random.Generator,
    *,
    schedule_offset: float = COSINE_OFFSET,
) -> RegistrationModel:
    if isinstance(config, CFModelConfig):
        return CorrespondenceFreeNet(config, T, rng, schedule_offset=schedule_offset)
    return CorrespondenceBasedNet(config, T, rng, schedule_offset=schedule_offset)


# ----------------------------------------------------------------------
# Persistence: nnkit checkpoint plus a JSON sidecar describing the architecture
# ----------------------------------------------------------------------
def sidecar_path(checkpoint: str | Path) -> Path:
    path = Path(checkpoint)
    return path.with_name(path.name + ".json")


def save_model(path: str | Path, model: RegistrationModel) -> None:
    save_checkpoint(path, model.store)
    sidecar = {
        "format_version": SIDECAR_VERSION,
        "T": model.T,
        "schedule_offset": model.schedule_offset,
        "model": model_config_to_dict(model.config),
    }
    try:
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write model config for {path}: {exc}") from exc


def load_model(path: str | Path) -> RegistrationModel:
    try:
        sidecar = json.loads(sidecar_path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read model config for {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoFailure(f"model config for {path} is not valid JSON: {exc}") from exc
    if sidecar.get("format_version") != SIDECAR_VERSION:
        raise CheckpointVersionMismatch(
            f"model config version {sidecar.get('format_version')}, expected {SIDECAR_VERSION}"
        )
    try:
        config = model_config_from_dict(sidecar["model"])
        T = int(sidecar["T"])
        offset = float(sidecar.get("schedule_offset", COSINE_OFFSET))
    except (KeyError, TypeError, ValueError) as exc:
        raise IoFailure(f"model config for {path} is incomplete: {exc}") from exc
    model = build_model(config, T, np.random.default_rng(0), schedule_offset=offset)
    model.store.load(load_checkpoint(path))
    return model


__all__ = [
    "FusionMode",
    "FUSION_MODES",
    "CFModelConfig",
    "CBModelConfig",
    "ModelConfig",
    "model_config_to_dict",
    "model_config_from_dict",
    "FeatureBundle",
    "fuse",
    "fuse_backward",
    "TransformEncoder",
    "BatchForward",
    "CloudEncoding",
    "CFForward",
    "CorrespondenceFreeNet",
    "local_descriptors",
    "SinkhornTrace",
    "annealed_temperature",
    "sinkhorn",
    "sinkhorn_with_trace",
    "sinkhorn_backward",
    "SoftCorrespondence",
    "soft_correspondence_fit",
    "soft_correspondence_backward",
    "CBForward",
    "CorrespondenceBasedNet",
    "RegistrationModel",
    "batch_signature",
    "build_model",
    "sidecar_path",
    "save_model",
    "load_model",
]
