"""Dense feed-forward networks with hand-written backpropagation and Adam.

Arrays are batch-major: an input batch has shape ``(B, in_dim)``, weights
have shape ``(out_dim, in_dim)``. Parameters are float32 during training;
every function here is dtype-agnostic so gradient checks can run the same
code in float64. Scalar losses are always accumulated in float64.

A network is an encoder stack, an optional variational head producing a
Gaussian posterior (mean, log-variance), and a decoder stack::

    x -> encoder -> [mean | logvar] -> z -> decoder -> output

Without a head the encoder output feeds the decoder directly.
"""

from __future__ import annotations

import copy
import enum
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class Activation(enum.IntEnum):
    NONE = 0
    RELU = 1


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.NONE

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"weights {self.weights.shape} and bias {self.bias.shape} do not form a layer"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = x @ self.weights.T + self.bias
        if self.activation is Activation.RELU:
            np.maximum(out, 0, out=out)
        return out


@dataclass
class VariationalHead:
    mean_layer: DenseLayer
    logvar_layer: DenseLayer

    def __post_init__(self):
        if self.mean_layer.weights.shape != self.logvar_layer.weights.shape:
            raise ValueError("mean and log-variance layers must have the same shape")
        if Activation.RELU in (self.mean_layer.activation, self.logvar_layer.activation):
            raise ValueError("variational head layers must be linear")

    @property
    def latent_dim(self) -> int:
        return self.mean_layer.out_dim


@dataclass
class DenseNetwork:
    """``layers[:latent_index]`` is the encoder, the rest is the decoder."""

    layers: list[DenseLayer]
    latent_index: int
    head: VariationalHead | None = None

    def __post_init__(self):
        # a plain network may have an empty decoder; a variational one needs both halves
        lowest, highest = (0, len(self.layers) - 1) if self.head is not None else (1, len(self.layers))
        if not self.layers or not lowest <= self.latent_index <= highest:
            raise ValueError(f"latent_index {self.latent_index} is out of range")
        chain = list(self.encoder)
        if self.head is not None:
            chain.append(self.head.mean_layer)
        chain.extend(self.decoder)
        for i, (a, b) in enumerate(zip(chain, chain[1:])):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer {i} outputs {a.out_dim} values but layer {i + 1} expects {b.in_dim}")

    @property
    def encoder(self) -> list[DenseLayer]:
        return self.layers[: self.latent_index]

    @property
    def decoder(self) -> list[DenseLayer]:
        return self.layers[self.latent_index:]

    @property
    def variational(self) -> bool:
        return self.head is not None

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim if self.encoder else self.head.mean_layer.in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def ordered_layers(self) -> list[DenseLayer]:
        """Every layer in parameter order: encoder, head (mean, logvar), decoder."""
        head = [self.head.mean_layer, self.head.logvar_layer] if self.head else []
        return self.encoder + head + self.decoder

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.ordered_layers():
            params.extend((layer.weights, layer.bias))
        return params

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def widths(self) -> list[int]:
        """Layer widths from input to output along the mean path."""
        chain = self.encoder + ([self.head.mean_layer] if self.head else []) + self.decoder
        return [chain[0].in_dim] + [layer.out_dim for layer in chain]

    def astype(self, dtype) -> "DenseNetwork":
        net = copy.deepcopy(self)
        for layer in net.ordered_layers():
            layer.weights = layer.weights.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        return net


def init_layer(rng: np.random.Generator, in_dim: int, out_dim: int,
               activation: Activation = Activation.NONE, dtype=np.float32) -> DenseLayer:
    """Glorot-uniform weights, zero bias."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    weights = rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)
    return DenseLayer(weights, np.zeros(out_dim, dtype=dtype), activation)


@dataclass
class Trace:
    """Everything a forward pass keeps for backpropagation.

    ``activations`` runs from the input batch to the output; for a
    variational network the entry at ``latent_index`` is the latent sample
    ``z`` (or the posterior mean when no noise was supplied).
    """

    activations: list[np.ndarray]
    mu: np.ndarray | None = None
    logvar: np.ndarray | None = None
    noise: np.ndarray | None = None

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def _run(layers, x, acts):
    for layer in layers:
        x = layer(x)
        acts.append(x)
    return x


def forward(net: DenseNetwork, x: np.ndarray, noise: np.ndarray | None = None) -> Trace:
    """Run ``net`` on a batch (a single vector is treated as a batch of one).

    For variational networks ``z = mu + exp(logvar / 2) * noise``; with
    ``noise=None`` the deterministic path ``z = mu`` is used.
    """
    x = np.atleast_2d(np.asarray(x))
    if x.shape[1] != net.input_dim:
        raise ValueError(f"input has {x.shape[1]} features, network expects {net.input_dim}")
    acts = [x]
    h = _run(net.encoder, x, acts)
    mu = logvar = None
    if net.head is not None:
        mu = net.head.mean_layer(h)
        logvar = net.head.logvar_layer(h)
        if noise is None:
            z = mu
        else:
            noise = np.atleast_2d(noise)
            if noise.shape != mu.shape:
                raise ValueError(f"noise shape {noise.shape} does not match latent shape {mu.shape}")
            z = mu + np.exp(0.5 * logvar) * noise
        acts.append(z)
        h = z
    _run(net.decoder, h, acts)
    return Trace(acts, mu, logvar, noise)


def predict(net: DenseNetwork, x: np.ndarray) -> np.ndarray:
    """Deterministic output (posterior-mean path for variational networks)."""
    return forward(net, x).output


def squared_error(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-example squared L2 distance, accumulated in float64."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.einsum("...i,...i->...", diff, diff)


def loss_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Squared L2 norm of the error, averaged over the examples of a batch."""
    return float(np.mean(squared_error(pred, target)))


def loss_mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred = np.atleast_2d(pred)
    return (2.0 / pred.shape[0]) * (pred - np.atleast_2d(target))


def kl_per_example(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, I)) for each row."""
    if mu.shape != logvar.shape:
        raise ValueError(f"mu shape {mu.shape} differs from logvar shape {logvar.shape}")
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    # expm1(v) - v keeps the result exactly non-negative near v = 0
    return 0.5 * np.sum(mu * mu + (np.expm1(logvar) - logvar), axis=-1)


def kl_gaussian(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL divergence to a standard normal prior, averaged over the batch."""
    return float(np.mean(kl_per_example(mu, logvar)))


def _backprop(layers, acts, grad):
    """Backpropagate ``grad`` (w.r.t. ``acts[-1]``) through ``layers``.

    Returns per-layer ``(dW, db)`` pairs in forward order and the gradient
    with respect to ``acts[0]``.
    """
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.activation is Activation.RELU:
            grad = grad * (acts[i + 1] > 0)
        grads.append((grad.T @ acts[i], grad.sum(axis=0)))
        grad = grad @ layer.weights
    grads.reverse()
    return grads, grad


def backward(net: DenseNetwork, trace: Trace, grad_output: np.ndarray,
             kl_scale: float = 0.0) -> list[np.ndarray]:
    """Gradients for ``net.parameters()`` given dLoss/dOutput.

    For variational networks ``kl_scale`` adds the gradient of
    ``kl_scale * sum_over_batch(KL)``; pass ``w / batch_size`` for a
    batch-mean objective.
    """
    acts = trace.activations
    k = net.latent_index
    grad_output = np.atleast_2d(grad_output)
    if grad_output.shape != acts[-1].shape:
        raise ValueError(f"output gradient shape {grad_output.shape} differs from output {acts[-1].shape}")
    if net.head is None:
        if len(acts) != len(net.layers) + 1:
            raise ValueError("trace does not belong to this network")
        dec, g = _backprop(net.decoder, acts[k:], grad_output)
        enc, _ = _backprop(net.encoder, acts[: k + 1], g)
        pairs = enc + dec
    else:
        if len(acts) != len(net.layers) + 2 or trace.mu is None:
            raise ValueError("trace does not belong to this network")
        dec, g_z = _backprop(net.decoder, acts[k + 1:], grad_output)
        g_mu = g_z + kl_scale * trace.mu
        g_logvar = kl_scale * 0.5 * (np.exp(trace.logvar) - 1.0)
        if trace.noise is not None:
            g_logvar = g_logvar + g_z * trace.noise * 0.5 * np.exp(0.5 * trace.logvar)
        h = acts[k]
        head = [(g_mu.T @ h, g_mu.sum(axis=0)), (g_logvar.T @ h, g_logvar.sum(axis=0))]
        g_h = g_mu @ net.head.mean_layer.weights + g_logvar @ net.head.logvar_layer.weights
        enc, _ = _backprop(net.encoder, acts[: k + 1], g_h)
        pairs = enc + head + dec
    return [g for pair in pairs for g in pair]


def loss_and_grads(net: DenseNetwork, x: np.ndarray, target: np.ndarray,
                   kl_weight: float = 0.0, noise: np.ndarray | None = None):
    """Batch-mean objective ``||target - net(x)||^2 + kl_weight * KL`` and its gradients.

    Returns ``(loss, per_example_losses, grads)``.
    """
    trace = forward(net, x, noise)
    target = np.atleast_2d(target)
    per_example = squared_error(trace.output, target)
    kl_scale = 0.0
    if net.head is not None and kl_weight:
        per_example = per_example + kl_weight * kl_per_example(trace.mu, trace.logvar)
        kl_scale = kl_weight / trace.output.shape[0]
    grads = backward(net, trace, loss_mse_grad(trace.output, target), kl_scale)
    return float(per_example.mean()), per_example, grads


def objective(net: DenseNetwork, x, target, kl_weight: float = 0.0, noise=None) -> float:
    trace = forward(net, x, noise)
    value = squared_error(trace.output, np.atleast_2d(target)).mean()
    if net.head is not None and kl_weight:
        value += kl_weight * kl_per_example(trace.mu, trace.logvar).mean()
    return float(value)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        return cls(
            **hyper,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> bool:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Returns False, leaving parameters and state untouched, when any
    gradient is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient at Adam step %d; update skipped", state.step_count + 1)
            return False
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def relu_margin(net: DenseNetwork, x: np.ndarray, noise=None) -> float:
    """Smallest |pre-activation| over all ReLU units for batch ``x``."""
    x = np.atleast_2d(x)
    trace = forward(net, x, noise)
    margin = np.inf
    acts = trace.activations
    chain = net.encoder + ([None] if net.head else []) + net.decoder
    for i, layer in enumerate(chain):
        if layer is None or layer.activation is not Activation.RELU:
            continue
        pre = acts[i] @ layer.weights.T + layer.bias
        margin = min(margin, float(np.min(np.abs(pre))))
    return margin


def grad_check(net: DenseNetwork, x: np.ndarray, target: np.ndarray, kl_weight: float = 0.0,
               noise: np.ndarray | None = None, step: float = 1e-4,
               corrupt: float = 0.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 on a copy of ``net``. ``noise`` freezes the latent
    sample of variational networks. ``corrupt`` adds a constant to one
    analytic gradient entry and exists only to test the checker itself.
    """
    net = net.astype(np.float64)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if noise is not None:
        noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    _, _, grads = loss_and_grads(net, x, target, kl_weight, noise)
    if corrupt:
        grads[0] = grads[0].copy()
        grads[0].flat[0] += corrupt
    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up = objective(net, x, target, kl_weight, noise)
            flat[i] = saved - step
            down = objective(net, x, target, kl_weight, noise)
            flat[i] = saved
            numeric = (up - down) / (2.0 * step)
            analytic = gflat[i]
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


_LAYER_HEAD = struct.Struct("<3I")


def write_layer(fh, layer: DenseLayer) -> None:
    fh.write(_LAYER_HEAD.pack(layer.in_dim, layer.out_dim, int(layer.activation)))
    fh.write(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
    fh.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())


def read_layer(fh) -> DenseLayer:
    raw = fh.read(_LAYER_HEAD.size)
    if len(raw) < _LAYER_HEAD.size:
        raise ValueError("truncated layer header")
    in_dim, out_dim, act = _LAYER_HEAD.unpack(raw)
    body = fh.read(4 * (in_dim * out_dim + out_dim))
    if len(body) < 4 * (in_dim * out_dim + out_dim):
        raise ValueError("truncated layer parameters")
    values = np.frombuffer(body, dtype="<f4").astype(np.float32)
    weights = values[: in_dim * out_dim].reshape(out_dim, in_dim)
    return DenseLayer(weights, values[in_dim * out_dim:].copy(), Activation(act))


def write_network(fh, net: DenseNetwork) -> None:
    """Layer count, latent index, layers, then a head flag and optional head layers."""
    fh.write(struct.pack("<2I", len(net.layers), net.latent_index))
    for layer in net.layers:
        write_layer(fh, layer)
    fh.write(struct.pack("<I", net.head is not None))
    if net.head is not None:
        write_layer(fh, net.head.mean_layer)
        write_layer(fh, net.head.logvar_layer)


def read_network(fh) -> DenseNetwork:
    count, latent_index = struct.unpack("<2I", fh.read(8))
    layers = [read_layer(fh) for _ in range(count)]
    (has_head,) = struct.unpack("<I", fh.read(4))
    head = VariationalHead(read_layer(fh), read_layer(fh)) if has_head else None
    return DenseNetwork(layers, latent_index, head)
