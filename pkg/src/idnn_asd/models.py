"""The six detectors: AE, VAE, IDNN, VIDNN, PDNN and VPDNN.

All share one dense topology, ``input-64-32-16-32-64-output`` with ReLU on
every layer but the last. Variational models split the 32->16 encoder
layer into parallel linear mean and log-variance layers of width 16.

Anomaly scores are squared errors in normalized feature space. Variational
models score on the posterior mean, so scoring is deterministic and the KL
term is not part of the score.
"""

from __future__ import annotations

import copy
import enum
import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .dsp import FeatureParams, Spectrogram
from .neuralnet import (
    Activation,
    AdamState,
    DenseNetwork,
    VariationalHead,
    adam_step,
    forward,
    init_layer,
    loss_and_grads,
    read_network,
    squared_error,
    write_network,
)
from .windowing import (
    NormStats,
    Regime,
    WindowSet,
    apply_norm,
    check_window_length,
    concat_windows,
    fit_norm_stats,
    make_windows,
    normalize_frames,
)

ENCODER_WIDTHS = (64, 32, 16)
DECODER_WIDTHS = (32, 64)
N_FRAMES = 5

_CKPT_MAGIC = b"IDNNCKPT"
_CKPT_VERSION = 1


class ModelKind(str, enum.Enum):
    AE = "ae"
    VAE = "vae"
    IDNN = "idnn"
    VIDNN = "vidnn"
    PDNN = "pdnn"
    VPDNN = "vpdnn"

    @property
    def regime(self) -> Regime:
        return _KIND_REGIME[self]

    @property
    def variational(self) -> bool:
        return self in (ModelKind.VAE, ModelKind.VIDNN, ModelKind.VPDNN)

    @property
    def default_kl_weight(self) -> float:
        return DEFAULT_KL_WEIGHTS.get(self, 0.0)

    @classmethod
    def from_parts(cls, regime: Regime, variational: bool) -> "ModelKind":
        for kind in cls:
            if kind.regime is regime and kind.variational == variational:
                return kind
        raise ValueError(f"no model kind for {regime!r}, variational={variational}")


_KIND_REGIME = {
    ModelKind.AE: Regime.RECONSTRUCT_ALL,
    ModelKind.VAE: Regime.RECONSTRUCT_ALL,
    ModelKind.IDNN: Regime.INTERPOLATE_CENTER,
    ModelKind.VIDNN: Regime.INTERPOLATE_CENTER,
    ModelKind.PDNN: Regime.PREDICT_NEXT,
    ModelKind.VPDNN: Regime.PREDICT_NEXT,
}

DEFAULT_KL_WEIGHTS = {ModelKind.VAE: 0.1, ModelKind.VIDNN: 0.01, ModelKind.VPDNN: 0.01}


@dataclass(frozen=True)
class ModelSpec:
    regime: Regime
    variational: bool
    n_frames: int = N_FRAMES
    n_mels: int = 64

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        check_window_length(self.n_frames, self.regime)
        if self.n_mels < 1:
            raise ValueError("n_mels must be positive")

    @classmethod
    def for_kind(cls, kind, n_frames: int = N_FRAMES, n_mels: int = 64) -> "ModelSpec":
        kind = ModelKind(kind)
        return cls(kind.regime, kind.variational, n_frames, n_mels)

    @property
    def kind(self) -> ModelKind:
        return ModelKind.from_parts(self.regime, self.variational)

    @property
    def input_dim(self) -> int:
        return self.regime.dims(self.n_frames, self.n_mels)[0]

    @property
    def output_dim(self) -> int:
        return self.regime.dims(self.n_frames, self.n_mels)[1]


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kl_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")


@dataclass
class TrainedModel:
    spec: ModelSpec
    network: DenseNetwork
    norm_stats: NormStats | None = None
    loss_history: list[float] = field(default_factory=list)
    kl_weight: float = 0.0
    features: FeatureParams = field(default_factory=FeatureParams)

    @property
    def kind(self) -> ModelKind:
        return self.spec.kind


def build_network(input_dim: int, output_dim: int, rng: np.random.Generator,
                  variational: bool = False, encoder=ENCODER_WIDTHS,
                  decoder=DECODER_WIDTHS, dtype=np.float32) -> DenseNetwork:
    """Encoder widths end at the latent size; the decoder ends in a linear layer."""
    if input_dim < 1 or output_dim < 1:
        raise ValueError(f"invalid dimensions {input_dim} -> {output_dim}")
    relu = Activation.RELU
    widths = [input_dim, *encoder]
    enc = [init_layer(rng, a, b, relu, dtype) for a, b in zip(widths[:-2], widths[1:-1])]
    head = None
    if variational:
        head = VariationalHead(
            init_layer(rng, widths[-2], widths[-1], Activation.NONE, dtype),
            init_layer(rng, widths[-2], widths[-1], Activation.NONE, dtype),
        )
    else:
        enc.append(init_layer(rng, widths[-2], widths[-1], relu, dtype))
    widths = [encoder[-1], *decoder, output_dim]
    dec = [init_layer(rng, a, b, relu, dtype) for a, b in zip(widths[:-1], widths[1:])]
    dec[-1].activation = Activation.NONE
    return DenseNetwork(enc + dec, len(enc), head)


def build_model(spec: ModelSpec, seed: int = 0, features: FeatureParams | None = None) -> TrainedModel:
    """Untrained model with Glorot-initialized weights drawn from ``seed``."""
    if features is None:
        features = FeatureParams(n_mels=spec.n_mels)
    if features.n_mels != spec.n_mels:
        raise ValueError(f"feature params give {features.n_mels} Mel bands, model expects {spec.n_mels}")
    net = build_network(spec.input_dim, spec.output_dim, np.random.default_rng(seed), spec.variational)
    if net.output_dim != spec.output_dim or net.input_dim != spec.input_dim:
        raise AssertionError("network dimensions do not match the model spec")
    return TrainedModel(spec, net, features=features)


def training_windows(spectrograms: list[Spectrogram], spec: ModelSpec) -> WindowSet:
    """Window every training spectrogram, fit normalization, and apply it."""
    if not spectrograms:
        raise ValueError("no training spectrograms")
    ws = concat_windows([make_windows(s, spec.n_frames, spec.regime) for s in spectrograms])
    return apply_norm(ws, fit_norm_stats(ws))


def train(model: TrainedModel, ws: WindowSet, cfg: TrainConfig) -> TrainedModel:
    """Mini-batch Adam on the model's regime loss; returns a new TrainedModel.

    Variational models draw fresh standard-normal latent noise for every
    example and minimize ``squared error + kl_weight * KL``. The shuffle
    order and noise come from ``cfg.seed``.
    """
    spec = model.spec
    if len(ws) == 0:
        raise ValueError("cannot train on an empty window set")
    if ws.regime is not spec.regime or ws.n != spec.n_frames or ws.n_mels != spec.n_mels:
        raise ValueError(
            f"window set ({ws.regime.name}, n={ws.n}, M={ws.n_mels}) does not match "
            f"model ({spec.regime.name}, n={spec.n_frames}, M={spec.n_mels})"
        )
    net = copy.deepcopy(model.network)
    params = net.parameters()
    state = AdamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    kl_weight = cfg.kl_weight if spec.variational else 0.0
    latent = net.head.latent_dim if net.head else 0
    inputs = np.asarray(ws.inputs, dtype=np.float32)
    targets = np.asarray(ws.targets, dtype=np.float32)
    count = len(ws)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(count)
        total = 0.0
        for start in range(0, count, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            noise = None
            if latent:
                noise = rng.standard_normal((idx.size, latent), dtype=np.float32)
            _, per_example, grads = loss_and_grads(net, inputs[idx], targets[idx], kl_weight, noise)
            total += float(per_example.sum())
            adam_step(params, grads, state)
        history.append(total / count)
    return TrainedModel(spec, net, ws.norm_stats, history, kl_weight, model.features)


def window_errors(model: TrainedModel, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-dimension squared errors, shape ``(N, output_dim)``, in float64."""
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    if inputs.shape[1] != model.spec.input_dim or targets.shape[1] != model.spec.output_dim:
        raise ValueError(
            f"window dims {inputs.shape[1]}->{targets.shape[1]} do not match model "
            f"{model.spec.input_dim}->{model.spec.output_dim}"
        )
    out = forward(model.network, inputs).output
    return (out.astype(np.float64) - targets) ** 2


def score_windows(model: TrainedModel, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    if inputs.shape[1] != model.spec.input_dim or targets.shape[1] != model.spec.output_dim:
        raise ValueError(
            f"window dims {inputs.shape[1]}->{targets.shape[1]} do not match model "
            f"{model.spec.input_dim}->{model.spec.output_dim}"
        )
    return squared_error(forward(model.network, inputs).output, targets)


def score_window(model: TrainedModel, x: np.ndarray, target: np.ndarray) -> float:
    """Anomaly score of one (already normalized) window."""
    return float(score_windows(model, x, target)[0])


def segment_windows(model: TrainedModel, spec: Spectrogram) -> WindowSet:
    """Normalized windows of a spectrogram using the model's training statistics."""
    ms = model.spec
    if spec.n_mels != ms.n_mels:
        raise ValueError(f"spectrogram has {spec.n_mels} Mel bands, model expects {ms.n_mels}")
    if spec.n_frames < ms.n_frames:
        raise ValueError(f"segment has {spec.n_frames} frames, fewer than the window length {ms.n_frames}")
    frames = spec.frames
    if model.norm_stats is not None:
        frames = normalize_frames(frames, model.norm_stats)
    ws = make_windows(Spectrogram(frames, spec.frame_size, spec.hop_size), ms.n_frames, ms.regime)
    ws.norm_stats = model.norm_stats
    return ws


def score_segment(model: TrainedModel, spec: Spectrogram) -> float:
    """Mean window score over the whole segment."""
    ws = segment_windows(model, spec)
    return float(np.mean(score_windows(model, ws.inputs, ws.targets)))


def segment_errors(model: TrainedModel, spec: Spectrogram) -> np.ndarray:
    ws = segment_windows(model, spec)
    return window_errors(model, ws.inputs, ws.targets)


_SPEC_HEAD = struct.Struct("<6Id")
_FEATURE_HEAD = struct.Struct("<2Id")


def save_checkpoint(model: TrainedModel, path) -> None:
    """Write the binary checkpoint (see README for the layout)."""
    spec = model.spec
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", _CKPT_VERSION))
    buf.write(_SPEC_HEAD.pack(int(spec.regime), spec.variational, spec.n_frames, spec.n_mels,
                              spec.input_dim, spec.output_dim, model.kl_weight))
    feats = model.features
    buf.write(_FEATURE_HEAD.pack(feats.frame_size, feats.hop_size, feats.floor))
    write_network(buf, model.network)
    stats = model.norm_stats
    buf.write(struct.pack("<I", stats is not None))
    if stats is not None:
        buf.write(struct.pack("<I", stats.n_mels))
        buf.write(np.asarray(stats.mean, dtype="<f8").tobytes())
        buf.write(np.asarray(stats.std, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(model.loss_history)))
    buf.write(np.asarray(model.loss_history, dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainedModel:
    try:
        return _read_checkpoint(path)
    except (struct.error, EOFError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc


def _read_checkpoint(path) -> TrainedModel:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        regime, variational, n, m, d_in, d_out, kl_weight = _SPEC_HEAD.unpack(fh.read(_SPEC_HEAD.size))
        spec = ModelSpec(Regime(regime), bool(variational), n, m)
        frame_size, hop_size, floor = _FEATURE_HEAD.unpack(fh.read(_FEATURE_HEAD.size))
        features = FeatureParams(frame_size, hop_size, m, floor)
        if (spec.input_dim, spec.output_dim) != (d_in, d_out):
            raise ValueError(f"{path}: header dimensions disagree with the model spec")
        net = read_network(fh)
        if (net.input_dim, net.output_dim) != (d_in, d_out):
            raise ValueError(f"{path}: network dimensions disagree with the header")
        stats = None
        (has_stats,) = struct.unpack("<I", fh.read(4))
        if has_stats:
            (bands,) = struct.unpack("<I", fh.read(4))
            mean = np.frombuffer(fh.read(8 * bands), dtype="<f8").copy()
            std = np.frombuffer(fh.read(8 * bands), dtype="<f8").copy()
            stats = NormStats(mean, std)
        (epochs,) = struct.unpack("<I", fh.read(4))
        history = np.frombuffer(fh.read(8 * epochs), dtype="<f8").tolist()
        if len(history) != epochs or fh.read(1):
            raise ValueError(f"{path}: checkpoint length does not match its header")
    return TrainedModel(spec, net, stats, history, kl_weight, features)
