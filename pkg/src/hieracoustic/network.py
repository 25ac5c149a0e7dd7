"""Feed-forward ReLU network with one or two softmax heads, written in numpy.

Weights are stored ``out x in`` and applied as ``x @ W.T + b`` on row-major
batches. Dropout is the non-inverted kind: training drops units without
rescaling, inference instead scales every product that consumes a
dropout-affected layer by its keep probability ``1 - rho``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

CE_CLAMP = 1e-12
DEFAULT_ALPHA = 0.6
DEFAULT_HIDDEN = (500, 500)
DEFAULT_DROPOUT_INPUT = 0.1
DEFAULT_DROPOUT_HIDDEN = 0.3

MODEL_MAGIC = b"HACM"
MODEL_VERSION = 1


class NetworkError(ValueError):
    pass


class ModelFileError(NetworkError):
    """A model file that cannot be parsed."""


class Activation(IntEnum):
    NONE = 0
    RELU = 1
    SOFTMAX = 2


def relu(y):
    return np.maximum(y, 0)


def relu_grad(y):
    """Subgradient of ReLU; 0 at exactly ``y == 0``."""
    return (y > 0).astype(np.asarray(y).dtype)


def softmax(logits):
    z = np.asarray(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: Activation = Activation.RELU

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "Layer":
        return Layer(self.W.copy(), self.b.copy(), self.activation)


@dataclass
class Network:
    """Hidden ReLU stack feeding a primary softmax head and an optional
    high-level softmax head (the multi-level model)."""

    hidden: list[Layer]
    head: Layer
    high_head: Layer | None = None
    dropout_input: float = DEFAULT_DROPOUT_INPUT
    dropout_hidden: float = DEFAULT_DROPOUT_HIDDEN

    def __post_init__(self):
        dim = self.input_dim
        for i, layer in enumerate(self.hidden):
            if layer.in_dim != dim:
                raise NetworkError(f"hidden layer {i} expects {layer.in_dim} inputs, gets {dim}")
            if layer.b.shape != (layer.out_dim,):
                raise NetworkError(f"hidden layer {i} bias has shape {layer.b.shape}")
            dim = layer.out_dim
        for name, layer in (("head", self.head), ("high_head", self.high_head)):
            if layer is None:
                continue
            if layer.in_dim != dim:
                raise NetworkError(f"{name} expects {layer.in_dim} inputs, top hidden layer has {dim}")
            if layer.b.shape != (layer.out_dim,):
                raise NetworkError(f"{name} bias has shape {layer.b.shape}")
        for name in ("dropout_input", "dropout_hidden"):
            rho = float(np.float32(getattr(self, name)))
            if not 0.0 <= rho < 1.0:
                raise NetworkError(f"dropout rate must be in [0, 1), got {rho}")
            # stored at float32 precision so model files round-trip exactly
            setattr(self, name, rho)

    @property
    def input_dim(self) -> int:
        return (self.hidden[0] if self.hidden else self.head).in_dim

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    @property
    def is_multi_level(self) -> bool:
        return self.high_head is not None

    @property
    def dtype(self):
        return self.head.W.dtype

    def layers(self) -> list[Layer]:
        out = list(self.hidden) + [self.head]
        if self.high_head is not None:
            out.append(self.high_head)
        return out

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list ``[W, b, W, b, ...]`` in layer order."""
        return [p for layer in self.layers() for p in (layer.W, layer.b)]

    def copy(self) -> "Network":
        return Network(
            [layer.copy() for layer in self.hidden],
            self.head.copy(),
            None if self.high_head is None else self.high_head.copy(),
            self.dropout_input,
            self.dropout_hidden,
        )

    def astype(self, dtype) -> "Network":
        net = self.copy()
        for layer in net.layers():
            layer.W = layer.W.astype(dtype)
            layer.b = layer.b.astype(dtype)
        return net


@dataclass
class Gradients:
    hidden: list[tuple[np.ndarray, np.ndarray]]
    head: tuple[np.ndarray, np.ndarray]
    high_head: tuple[np.ndarray, np.ndarray] | None = None

    def as_list(self) -> list[np.ndarray]:
        pairs = list(self.hidden) + [self.head]
        if self.high_head is not None:
            pairs.append(self.high_head)
        return [g for pair in pairs for g in pair]


@dataclass
class ForwardCache:
    """Per-layer inputs (after dropout masking) and pre-activations."""

    train: bool
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    masks: list[np.ndarray | None]
    p_low: np.ndarray
    p_high: np.ndarray | None = None
    top: np.ndarray = field(default=None, repr=False)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def init_random(shape, rng=None, dtype=np.float32):
    """Glorot-uniform ``(out, in)`` weight matrix and zero bias."""
    out_dim, in_dim = shape
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    W = _as_rng(rng).uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)
    return W, np.zeros(out_dim, dtype=dtype)


def random_layer(in_dim, out_dim, rng, activation=Activation.RELU, dtype=np.float32) -> Layer:
    W, b = init_random((out_dim, in_dim), rng, dtype)
    return Layer(W, b, activation)


def build_network(
    input_dim: int = 440,
    num_classes: int = 15,
    hidden_sizes=DEFAULT_HIDDEN,
    num_high: int | None = None,
    seed=0,
    dropout_input: float = DEFAULT_DROPOUT_INPUT,
    dropout_hidden: float = DEFAULT_DROPOUT_HIDDEN,
    dtype=np.float32,
) -> Network:
    rng = _as_rng(seed)
    hidden = []
    dim = input_dim
    for size in hidden_sizes:
        hidden.append(random_layer(dim, size, rng, Activation.RELU, dtype))
        dim = size
    head = random_layer(dim, num_classes, rng, Activation.SOFTMAX, dtype)
    high = None if not num_high else random_layer(dim, num_high, rng, Activation.SOFTMAX, dtype)
    return Network(hidden, head, high, dropout_input, dropout_hidden)


def forward(net: Network, batch, train: bool = False, rng=None) -> ForwardCache:
    """Run a batch through the network.

    With ``train=True`` every input unit and hidden activation is kept with
    probability ``1 - rho`` (a fresh mask per sample). Otherwise no units are
    dropped and each layer's product is discounted by the keep probability of
    the layer it reads from.
    """
    x = np.asarray(batch, dtype=net.dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != net.input_dim:
        raise NetworkError(f"batch has {x.shape[1]} features, network expects {net.input_dim}")
    if train:
        rng = _as_rng(rng)

    inputs, pre, masks = [], [], []
    a = x
    rho = net.dropout_input
    for layer in net.hidden:
        a, mask, scale = _dropout(a, rho, train, rng)
        z = a @ layer.W.T
        z = (z if scale == 1.0 else scale * z) + layer.b
        inputs.append(a)
        masks.append(mask)
        pre.append(z)
        a = relu(z)
        rho = net.dropout_hidden

    top, mask, scale = _dropout(a, rho, train, rng)
    p = []
    for layer in (net.head, net.high_head):
        if layer is None:
            continue
        z = top @ layer.W.T
        z = (z if scale == 1.0 else scale * z) + layer.b
        inputs.append(top)
        masks.append(mask)
        pre.append(z)
        p.append(softmax(z))
    return ForwardCache(train, inputs, pre, masks, p[0], p[1] if len(p) > 1 else None, top)


def _dropout(a, rho, train, rng):
    if rho == 0.0:
        return a, None, 1.0
    keep = 1.0 - rho
    if not train:
        return a, None, a.dtype.type(keep)
    mask = (rng.random(a.shape) < keep).astype(a.dtype)
    return a * mask, mask, 1.0


def predict_proba(net: Network, batch, chunk: int = 4096):
    """Inference-mode posteriors ``(p_low, p_high)``; ``p_high`` may be None."""
    x = np.asarray(batch)
    lows, highs = [], []
    for start in range(0, max(len(x), 1), chunk):
        c = forward(net, x[start : start + chunk])
        lows.append(c.p_low)
        if c.p_high is not None:
            highs.append(c.p_high)
    return np.concatenate(lows), (np.concatenate(highs) if highs else None)


def cross_entropy(p, d) -> float:
    """Batch-summed cross entropy ``-sum d * log(max(p, 1e-12))``."""
    p = np.asarray(p)
    d = np.asarray(d)
    if p.shape != d.shape:
        raise NetworkError(f"posterior shape {p.shape} != target shape {d.shape}")
    return float(-np.sum(d * np.log(np.maximum(p, CE_CLAMP))))


def multi_level_loss(p_low, p_high, d_low, d_high, alpha: float = DEFAULT_ALPHA) -> float:
    """``alpha * CE(low) + (1 - alpha) * CE(high)``, batch-summed."""
    if p_high is None:
        raise NetworkError("multi-level loss needs the high-level head")
    check_alpha(alpha)
    return alpha * cross_entropy(p_low, d_low) + (1.0 - alpha) * cross_entropy(p_high, d_high)


def check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise NetworkError(f"alpha must be in [0, 1], got {alpha}")


def batch_loss(net: Network, cache: ForwardCache, d_low, d_high=None, alpha: float = DEFAULT_ALPHA) -> float:
    """Per-frame loss (batch sum / N) of whatever objective ``backward`` uses."""
    n = cache.p_low.shape[0]
    if net.is_multi_level:
        return multi_level_loss(cache.p_low, cache.p_high, d_low, d_high, alpha) / n
    return cross_entropy(cache.p_low, d_low) / n


def backward(net: Network, cache: ForwardCache, d_low, d_high=None, alpha: float = DEFAULT_ALPHA) -> Gradients:
    """Gradients of the batch-mean loss.

    Single-head networks use plain cross entropy; multi-level networks use
    the alpha-weighted sum of both heads' cross entropies. ``cache`` must
    come from ``forward`` on this network; dropout masks recorded there are
    reused on the backward path.
    """
    if cache is None or len(cache.pre) != len(net.layers()):
        raise NetworkError("forward cache missing or from a different network")
    n = cache.p_low.shape[0]
    dtype = cache.p_low.dtype
    d_low = np.asarray(d_low, dtype=dtype)
    if d_low.shape != cache.p_low.shape:
        raise NetworkError(f"target shape {d_low.shape} != posterior shape {cache.p_low.shape}")

    nh = len(net.hidden)
    if net.is_multi_level:
        if d_high is None:
            raise NetworkError("multi-level network needs high-level targets")
        check_alpha(alpha)
        d_high = np.asarray(d_high, dtype=dtype)
        head_errors = [alpha * (cache.p_low - d_low) / n, (1.0 - alpha) * (cache.p_high - d_high) / n]
        heads = [net.head, net.high_head]
    else:
        head_errors = [(cache.p_low - d_low) / n]
        heads = [net.head]

    head_grads = []
    delta_top = None
    scale_top = _infer_scale(cache, net, nh)
    for k, (layer, err) in enumerate(zip(heads, head_errors)):
        a_in = cache.inputs[nh + k]
        gW = err.T @ a_in
        if scale_top != 1.0:
            gW *= scale_top
        head_grads.append((gW, err.sum(axis=0)))
        back = err @ layer.W
        delta_top = back if delta_top is None else delta_top + back
    if scale_top != 1.0:
        delta_top = delta_top * scale_top

    hidden_grads = [None] * nh
    delta = delta_top
    for i in range(nh - 1, -1, -1):
        # delta is dL/d(input of layer i+1), i.e. dL/d(masked activation of layer i)
        mask = cache.masks[i + 1]
        if mask is not None:
            delta = delta * mask
        dz = delta * relu_grad(cache.pre[i])
        scale = _infer_scale(cache, net, i)
        gW = dz.T @ cache.inputs[i]
        if scale != 1.0:
            gW *= scale
        hidden_grads[i] = (gW, dz.sum(axis=0))
        delta = dz @ net.hidden[i].W
        if scale != 1.0:
            delta = delta * scale

    return Gradients(hidden_grads, head_grads[0], head_grads[1] if len(head_grads) > 1 else None)


def _infer_scale(cache: ForwardCache, net: Network, layer_index: int):
    """Keep-probability scaling applied to layer ``layer_index``'s product
    in inference mode (1 in train mode)."""
    if cache.train:
        return 1.0
    rho = net.dropout_input if layer_index == 0 else net.dropout_hidden
    return 1.0 - rho


@dataclass
class OptimizerState:
    """Classical momentum SGD, no weight cost:
    ``v <- momentum * v - lr * g``; ``theta <- theta + v``."""

    learning_rate: float = 0.005
    momentum: float = 0.9
    velocity: list[np.ndarray] | None = None

    def step(self, net: Network, grads: Gradients) -> None:
        params = net.parameters()
        gs = grads.as_list()
        if len(params) != len(gs):
            raise NetworkError("gradient structure does not match the network")
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, gs, self.velocity):
            if p.shape != g.shape or p.shape != v.shape:
                raise NetworkError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
            v *= self.momentum
            v -= self.learning_rate * g
            p += v


def sgd_momentum_step(net: Network, grads: Gradients, opt: OptimizerState) -> None:
    opt.step(net, grads)


# -- model files ---------------------------------------------------------------

_HDR = struct.Struct("<4sIII")  # magic, version, input_dim, layer count
_LAYER = struct.Struct("<IIB")  # in, out, activation
_U32 = struct.Struct("<I")
_HEAD = struct.Struct("<BI")  # role (0 primary, 1 high-level), layer index
_DROP = struct.Struct("<ff")


def model_to_bytes(net: Network) -> bytes:
    layers = net.layers()
    chunks = [_HDR.pack(MODEL_MAGIC, MODEL_VERSION, net.input_dim, len(layers))]
    for layer in layers:
        chunks.append(_LAYER.pack(layer.in_dim, layer.out_dim, int(layer.activation)))
        chunks.append(np.ascontiguousarray(layer.W, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.b, dtype="<f4").tobytes())
    nh = len(net.hidden)
    heads = [(0, nh)] + ([(1, nh + 1)] if net.is_multi_level else [])
    chunks.append(_U32.pack(len(heads)))
    chunks.extend(_HEAD.pack(role, idx) for role, idx in heads)
    chunks.append(_DROP.pack(net.dropout_input, net.dropout_hidden))
    return b"".join(chunks)


def model_from_bytes(data: bytes) -> Network:
    try:
        magic, version, input_dim, count = _HDR.unpack_from(data, 0)
        if magic != MODEL_MAGIC:
            raise ModelFileError(f"not a model file (magic {magic!r})")
        if version != MODEL_VERSION:
            raise ModelFileError(f"unsupported model version {version}")
        off = _HDR.size
        layers = []
        for _ in range(count):
            in_dim, out_dim, act = _LAYER.unpack_from(data, off)
            off += _LAYER.size
            W = np.frombuffer(data, "<f4", in_dim * out_dim, off).reshape(out_dim, in_dim)
            off += 4 * in_dim * out_dim
            b = np.frombuffer(data, "<f4", out_dim, off)
            off += 4 * out_dim
            layers.append(Layer(W.astype(np.float32), b.astype(np.float32), Activation(act)))
        (n_heads,) = _U32.unpack_from(data, off)
        off += _U32.size
        heads = {}
        for _ in range(n_heads):
            role, idx = _HEAD.unpack_from(data, off)
            off += _HEAD.size
            heads[role] = idx
        rho_in, rho_h = _DROP.unpack_from(data, off)
        off += _DROP.size
    except (struct.error, ValueError) as exc:
        if isinstance(exc, NetworkError):
            raise
        raise ModelFileError(f"corrupt model file: {exc}") from exc
    if off != len(data):
        raise ModelFileError(f"corrupt model file: {len(data) - off} trailing bytes")
    if 0 not in heads or n_heads not in (1, 2) or set(heads) - {0, 1}:
        raise ModelFileError("corrupt model file: bad head descriptors")
    nh = heads[0]
    expected = nh + n_heads
    if expected != count or heads.get(1, nh + 1) != nh + 1:
        raise ModelFileError("corrupt model file: head descriptors disagree with layer count")
    net = Network(
        layers[:nh],
        layers[nh],
        layers[nh + 1] if 1 in heads else None,
        float(np.float32(rho_in)),
        float(np.float32(rho_h)),
    )
    if net.input_dim != input_dim:
        raise ModelFileError(f"model header says input_dim {input_dim}, layers say {net.input_dim}")
    return net


def save_model(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(net))


def load_model(path) -> Network:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
