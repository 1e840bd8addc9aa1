"""Feed-forward building blocks: dense/conv layers, the multi-head predictor,
the kernel mapper (shared backbone + one branch per head), and Adam.

Every forward exists in two flavors that are bit-identical by construction:

* a plain numpy evaluation path (fast, allocation-light) used for inference,
  probes, and report generation;
* a tape path (:mod:`gpdistill.autodiff`) used whenever gradients are needed.

Both run the same numpy expressions in the same order; tests pin exact
equality.

The kernel mapper turns an instance into one feature vector per head.  A
branch ends in either a dense layer (flat features) or a conv layer; conv
branch outputs — the volumetric maps — are sum-pooled over space.  The pooled
vector is L2-normalized and passed through a leaky rectifier, so the feature
norm always lies in [alpha, 1]; dot products of such features are the learned
kernel, and keeping the pre-pooling maps around is what makes per-location
similarity contributions possible (see :mod:`gpdistill.explain`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var, conv2d_value, l2_normalize_rows_value
from .errors import CapabilityError, ParameterError, ShapeError

__all__ = [
    "AdamState",
    "ConvLayer",
    "DenseLayer",
    "KernelMapper",
    "Predictor",
    "adam_step",
    "build_conv_mapper",
    "build_conv_predictor",
    "build_dense_mapper",
    "build_mlp_predictor",
    "forward_mapper",
    "forward_predictor",
    "init_adam",
    "mapper_internals",
    "mapper_parameters",
    "predictor_accuracy",
    "predictor_parameters",
    "train_predictor",
]

ACTIVATIONS = ("identity", "relu", "leaky_relu", "tanh", "sigmoid")

#: default negative slope of every leaky rectifier in the package
LEAKY_ALPHA = 0.01


def _check_activation(name: str) -> None:
    if name not in ACTIVATIONS:
        raise ParameterError(f"unknown activation {name!r}; choose from {ACTIVATIONS}")


def _act_np(x: np.ndarray, name: str, alpha: float) -> np.ndarray:
    if name == "identity":
        return x
    if name == "relu":
        return x * (x > 0.0).astype(np.float64)
    if name == "leaky_relu":
        return x * np.where(x > 0.0, 1.0, alpha)
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    raise ParameterError(f"unknown activation {name!r}")


def _act_tape(tape: Tape, x: Var, name: str, alpha: float) -> Var:
    if name == "identity":
        return x
    if name == "relu":
        return tape.relu(x)
    if name == "leaky_relu":
        return tape.leaky_relu(x, alpha)
    if name == "tanh":
        return tape.tanh(x)
    if name == "sigmoid":
        return tape.sigmoid(x)
    raise ParameterError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    """Affine map x @ weight.T + bias followed by an activation."""

    weight: np.ndarray  # (n_out, n_in)
    bias: np.ndarray  # (n_out,)
    activation: str = "identity"
    alpha: float = LEAKY_ALPHA

    def __post_init__(self):
        _check_activation(self.activation)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("DenseLayer: weight must be 2-D and bias 1-D")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError("DenseLayer: bias length must match output width")


@dataclass
class ConvLayer:
    """Valid 2-D convolution followed by an activation."""

    kernels: np.ndarray  # (c_out, c_in, kh, kw)
    bias: np.ndarray  # (c_out,)
    stride: int = 1
    activation: str = "identity"
    alpha: float = LEAKY_ALPHA

    def __post_init__(self):
        _check_activation(self.activation)
        if self.kernels.ndim != 4 or self.bias.ndim != 1:
            raise ShapeError("ConvLayer: kernels must be 4-D and bias 1-D")
        if self.bias.shape[0] != self.kernels.shape[0]:
            raise ShapeError("ConvLayer: bias length must match output channels")
        if int(self.stride) < 1:
            raise ParameterError("ConvLayer: stride must be >= 1")


Layer = DenseLayer | ConvLayer


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform init on [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]."""
    limit = np.sqrt(6.0 / float(fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_dense(rng: np.random.Generator, n_in: int, n_out: int,
               activation: str = "identity", alpha: float = LEAKY_ALPHA) -> DenseLayer:
    w = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
    return DenseLayer(weight=w, bias=np.zeros(n_out), activation=activation, alpha=alpha)


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, kh: int, kw: int,
              stride: int = 1, activation: str = "identity",
              alpha: float = LEAKY_ALPHA) -> ConvLayer:
    fan_in = c_in * kh * kw
    fan_out = c_out * kh * kw
    k = glorot_uniform(rng, (c_out, c_in, kh, kw), fan_in, fan_out)
    return ConvLayer(kernels=k, bias=np.zeros(c_out), stride=stride,
                     activation=activation, alpha=alpha)


def _layer_forward_np(layer: Layer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, DenseLayer):
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != layer.weight.shape[1]:
            raise ShapeError(
                f"dense layer expects width {layer.weight.shape[1]}, got {x.shape[1]}"
            )
        out = np.matmul(x, layer.weight.T) + layer.bias
        return _act_np(out, layer.activation, layer.alpha)
    out = conv2d_value(x, layer.kernels, layer.bias, layer.stride)
    return _act_np(out, layer.activation, layer.alpha)


def _layer_forward_tape(tape: Tape, layer: Layer, x: Var,
                        params: dict[int, Var]) -> Var:
    if isinstance(layer, DenseLayer):
        if x.value.ndim > 2:
            x = tape.reshape(x, (x.value.shape[0], -1))
        if x.value.shape[1] != layer.weight.shape[1]:
            raise ShapeError(
                f"dense layer expects width {layer.weight.shape[1]}, got {x.value.shape[1]}"
            )
        w = params[id(layer.weight)]
        b = params[id(layer.bias)]
        out = tape.add(tape.matmul(x, tape.transpose(w)), b)
        return _act_tape(tape, out, layer.activation, layer.alpha)
    k = params[id(layer.kernels)]
    b = params[id(layer.bias)]
    out = tape.conv2d(x, k, b, layer.stride)
    return _act_tape(tape, out, layer.activation, layer.alpha)


def _layer_params(layer: Layer) -> list[np.ndarray]:
    if isinstance(layer, DenseLayer):
        return [layer.weight, layer.bias]
    return [layer.kernels, layer.bias]


def _register_params(tape: Tape, arrays: list[np.ndarray]) -> dict[int, Var]:
    """One tape leaf per parameter array, keyed by the array's identity."""
    return {id(a): tape.parameter(a) for a in arrays}


# --------------------------------------------------------------------------
# predictor
# --------------------------------------------------------------------------


@dataclass
class Predictor:
    """Frozen-architecture feed-forward net with one output logit per head."""

    layers: list = field(default_factory=list)
    n_heads: int = 1
    wide_width: int = 0  # width of the layer feeding the output layer

    def __post_init__(self):
        if self.n_heads < 1:
            raise ParameterError("Predictor: need at least one head")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Normalize an instance or batch to batch form; report if it was single."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim in (1, 3):  # single flat instance or single (C, H, W) image
        return x[None, ...], True
    if x.ndim in (2, 4):
        return x, False
    raise ShapeError(f"instances must have 1-4 dims, got {x.ndim}")


def forward_predictor(p: Predictor, x, tape: Tape | None = None,
                      params: dict[int, Var] | None = None):
    """Logits of shape (B, L) — or (L,) for a single instance.

    With a tape, returns a Var whose forward value is bit-identical to the
    plain path (the same numpy expressions run in the same order).
    """
    xb, single = _batched(x)
    if tape is None:
        out = xb
        for layer in p.layers:
            out = _layer_forward_np(layer, out)
        if out.ndim != 2 or out.shape[1] != p.n_heads:
            raise ShapeError("predictor output does not match its head count")
        return out[0] if single else out
    if params is None:
        params = _register_params(tape, predictor_parameters(p))
    var = tape.constant(xb)
    for layer in p.layers:
        var = _layer_forward_tape(tape, layer, var, params)
    if var.value.ndim != 2 or var.value.shape[1] != p.n_heads:
        raise ShapeError("predictor output does not match its head count")
    return var


def predictor_parameters(p: Predictor) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for layer in p.layers:
        out.extend(_layer_params(layer))
    return out


def build_mlp_predictor(rng: np.random.Generator, n_in: int, hidden: tuple[int, ...],
                        n_heads: int, activation: str = "relu") -> Predictor:
    """MLP whose second-last width is hidden[-1] (the recorded wide layer)."""
    if not hidden:
        raise ParameterError("build_mlp_predictor: need at least one hidden layer")
    layers: list = []
    width = n_in
    for h in hidden:
        layers.append(init_dense(rng, width, h, activation))
        width = h
    layers.append(init_dense(rng, width, n_heads, "identity"))
    return Predictor(layers=layers, n_heads=n_heads, wide_width=hidden[-1])


def build_conv_predictor(rng: np.random.Generator, in_shape: tuple[int, int, int],
                         channels: tuple[int, ...], dense_width: int,
                         n_heads: int, ksize: int = 3) -> Predictor:
    """Conv stack then a wide dense layer then the head layer."""
    c, h, w = in_shape
    layers: list = []
    for ch in channels:
        layers.append(init_conv(rng, c, ch, ksize, ksize, 1, "relu"))
        c, h, w = ch, h - ksize + 1, w - ksize + 1
        if h < 1 or w < 1:
            raise ShapeError("build_conv_predictor: input too small for conv stack")
    layers.append(init_dense(rng, c * h * w, dense_width, "relu"))
    layers.append(init_dense(rng, dense_width, n_heads, "identity"))
    return Predictor(layers=layers, n_heads=n_heads, wide_width=dense_width)


# --------------------------------------------------------------------------
# kernel mapper
# --------------------------------------------------------------------------


@dataclass
class KernelMapper:
    """Shared backbone plus one branch per head producing kernel features.

    Branch outputs are sum-pooled over space when convolutional, then
    L2-normalized and passed through a leaky rectifier with slope ``alpha``;
    the resulting feature norm is always within [alpha, 1].
    """

    backbone: list = field(default_factory=list)
    branches: list = field(default_factory=list)  # one list of layers per head
    kernel_dim: int = 0
    alpha: float = LEAKY_ALPHA

    @property
    def n_heads(self) -> int:
        return len(self.branches)


def mapper_parameters(km: KernelMapper) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for layer in km.backbone:
        out.extend(_layer_params(layer))
    for branch in km.branches:
        for layer in branch:
            out.extend(_layer_params(layer))
    return out


def _check_head(km: KernelMapper, head: int) -> None:
    if not 0 <= head < km.n_heads:
        raise ParameterError(f"head {head} out of range for {km.n_heads} heads")


def _finish_np(km: KernelMapper, a: np.ndarray) -> np.ndarray:
    b, _ = l2_normalize_rows_value(a)
    return _act_np(b, "leaky_relu", km.alpha)


def forward_mapper(km: KernelMapper, x, head: int, tape: Tape | None = None,
                   params: dict[int, Var] | None = None):
    """Kernel features of one head: (B, D) — or (D,) for a single instance."""
    _check_head(km, head)
    xb, single = _batched(x)
    if tape is None:
        out = xb
        for layer in km.backbone:
            out = _layer_forward_np(layer, out)
        for layer in km.branches[head]:
            out = _layer_forward_np(layer, out)
        if out.ndim == 4:
            out = out.sum(axis=(2, 3))
        if out.shape[1] != km.kernel_dim:
            raise ShapeError("mapper branch output does not match kernel_dim")
        f = _finish_np(km, out)
        return f[0] if single else f
    if params is None:
        params = _register_params(tape, mapper_parameters(km))
    var = tape.constant(xb)
    for layer in km.backbone:
        var = _layer_forward_tape(tape, layer, var, params)
    for layer in km.branches[head]:
        var = _layer_forward_tape(tape, layer, var, params)
    if var.value.ndim == 4:
        var = tape.sum_pool_hw(var)
    if var.value.shape[1] != km.kernel_dim:
        raise ShapeError("mapper branch output does not match kernel_dim")
    var = tape.l2_normalize_rows(var)
    return tape.leaky_relu(var, km.alpha)


def mapper_internals(km: KernelMapper, x, head: int) -> dict:
    """Intermediate branch quantities needed for contribution maps.

    Returns a dict with keys ``z`` (pre-pooling volumetric maps, (B,C,H,W)),
    ``a`` (pooled, (B,C)), ``b`` (normalized), ``f`` (final features), and
    ``norms``.  Raises CapabilityError when the branch ends dense: without a
    spatial pre-pooling map there is nothing to localize.
    """
    _check_head(km, head)
    xb, _ = _batched(x)
    out = xb
    for layer in km.backbone:
        out = _layer_forward_np(layer, out)
    for layer in km.branches[head]:
        out = _layer_forward_np(layer, out)
    if out.ndim != 4:
        raise CapabilityError(
            "contribution maps need a convolutional branch with spatial maps; "
            "this mapper's branch output is dense"
        )
    z = out
    a = z.sum(axis=(2, 3))
    b, norms = l2_normalize_rows_value(a)
    f = _act_np(b, "leaky_relu", km.alpha)
    return {"z": z, "a": a, "b": b, "f": f, "norms": norms}


def build_dense_mapper(rng: np.random.Generator, n_in: int, hidden: tuple[int, ...],
                       kernel_dim: int, n_heads: int,
                       alpha: float = LEAKY_ALPHA) -> KernelMapper:
    backbone: list = []
    width = n_in
    for h in hidden:
        # leaky units: a dead-relu backbone could pool to an exactly-zero
        # branch vector, which is a degenerate input for the normalizer
        backbone.append(init_dense(rng, width, h, "leaky_relu", alpha=alpha))
        width = h
    branches = [[init_dense(rng, width, kernel_dim, "identity")] for _ in range(n_heads)]
    return KernelMapper(backbone=backbone, branches=branches,
                        kernel_dim=kernel_dim, alpha=alpha)


def build_conv_mapper(rng: np.random.Generator, in_shape: tuple[int, int, int],
                      channels: tuple[int, ...], kernel_dim: int, n_heads: int,
                      ksize: int = 3, branch_ksize: int = 1,
                      alpha: float = LEAKY_ALPHA) -> KernelMapper:
    """Conv backbone; each branch is one conv producing kernel_dim channels."""
    c, h, w = in_shape
    backbone: list = []
    for ch in channels:
        backbone.append(init_conv(rng, c, ch, ksize, ksize, 1, "leaky_relu",
                                  alpha=alpha))
        c, h, w = ch, h - ksize + 1, w - ksize + 1
        if h < 1 or w < 1:
            raise ShapeError("build_conv_mapper: input too small for conv stack")
    if h < branch_ksize or w < branch_ksize:
        raise ShapeError("build_conv_mapper: input too small for branch conv")
    branches = [
        [init_conv(rng, c, kernel_dim, branch_ksize, branch_ksize, 1, "identity")]
        for _ in range(n_heads)
    ]
    return KernelMapper(backbone=backbone, branches=branches,
                        kernel_dim=kernel_dim, alpha=alpha)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates aligned with a fixed parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def init_adam(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        t=0,
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One Adam update (bias-corrected, no AMSGrad), in place on params."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params/grads/state lengths differ")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise ParameterError("adam_step: missing gradient for a parameter")
        if g.shape != p.shape:
            raise ShapeError("adam_step: gradient shape does not match parameter")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# --------------------------------------------------------------------------
# predictor training (cross-entropy + Adam)
# --------------------------------------------------------------------------


def train_predictor(p: Predictor, instances: np.ndarray, labels: np.ndarray,
                    iters: int, batch: int, lr: float, seed: int) -> list[float]:
    """Minibatch cross-entropy training; returns the per-iteration losses."""
    n = instances.shape[0]
    if labels.shape[0] != n:
        raise ShapeError("train_predictor: instances/labels length mismatch")
    if np.any(labels < 0) or np.any(labels >= p.n_heads):
        raise ParameterError("train_predictor: label out of range")
    rng = np.random.default_rng(seed)
    params = predictor_parameters(p)
    state = init_adam(params)
    batch = min(batch, n)
    losses: list[float] = []
    for _ in range(iters):
        idx = rng.choice(n, size=batch, replace=False)
        tape = Tape()
        pvars = _register_params(tape, params)
        logits = forward_predictor(p, instances[idx], tape=tape, params=pvars)
        loss = tape.cross_entropy_with_logits(logits, labels[idx])
        adj = tape.backward(loss)
        grads = [adj[pvars[id(a)].i] for a in params]
        grads = [np.zeros_like(a) if g is None else g for a, g in zip(params, grads)]
        adam_step(params, grads, state, lr=lr)
        losses.append(float(loss.value))
    return losses


def predictor_accuracy(p: Predictor, instances: np.ndarray, labels: np.ndarray) -> float:
    logits = forward_predictor(p, instances)
    return float(np.mean(np.argmax(logits, axis=1) == labels))
