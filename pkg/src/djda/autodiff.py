"""Layer-level reverse-mode differentiation for small dense MLPs.

Matrices are plain 2-D float64 numpy arrays. Each forward call returns the
output together with a cache; the matching backward call consumes that cache
and returns gradients for the input and the layer parameters. There is no
graph: callers chain backward calls in reverse order themselves.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError, ValidationError
from .rng import SplitMix64

ACTIVATIONS = ("relu", "leaky_relu", "identity")
LEAKY_SLOPE = 0.01
LOG_PROB_FLOOR = -30.0


def as_matrix(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    return x


@dataclass(eq=False)
class Layer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "identity"
    # bumped on every in-place parameter update; caches remember it
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    @classmethod
    def init(cls, in_dim, out_dim, activation, rng: SplitMix64):
        """Glorot-uniform weights, zero bias."""
        if in_dim < 1 or out_dim < 1:
            raise ValidationError(f"layer widths must be >= 1, got {in_dim}x{out_dim}")
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform((in_dim, out_dim), -bound, bound)
        return cls(w, np.zeros(out_dim), activation)


@dataclass(eq=False)
class AffineCache:
    layer: Layer
    x: np.ndarray
    pre: np.ndarray
    version: int
    used: bool = False


def _activate(pre, activation):
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "leaky_relu":
        return np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    return pre


def _activation_grad(pre, activation):
    if activation == "relu":
        return (pre > 0).astype(np.float64)
    if activation == "leaky_relu":
        return np.where(pre > 0, 1.0, LEAKY_SLOPE)
    return np.ones_like(pre)


def affine_forward(x, layer: Layer):
    """Return ``act(x @ W + b)`` and the cache needed by :func:`affine_backward`."""
    x = as_matrix(x)
    if x.shape[1] != layer.in_dim:
        raise ShapeError(f"input has {x.shape[1]} columns, layer expects {layer.in_dim}")
    pre = x @ layer.weight + layer.bias
    return _activate(pre, layer.activation), AffineCache(layer, x, pre, layer.version)


def affine_backward(grad_out, cache: AffineCache):
    """Return ``(grad_x, grad_W, grad_b)``. A cache can be consumed once."""
    if not isinstance(cache, AffineCache):
        raise ContractError("affine_backward needs the cache returned by affine_forward")
    if cache.used:
        raise ContractError("cache already consumed by an earlier backward call")
    if cache.version != cache.layer.version:
        raise ContractError("stale cache: layer parameters changed since the forward pass")
    grad_out = as_matrix(grad_out, "grad_out")
    if grad_out.shape != cache.pre.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {cache.pre.shape}")
    cache.used = True
    g = grad_out * _activation_grad(cache.pre, cache.layer.activation)
    return g @ cache.layer.weight.T, cache.x.T @ g, g.sum(axis=0)


class Stack:
    """A chain of layers; the last one is normally ``identity``."""

    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")

    @classmethod
    def init(cls, dims, hidden_activation, rng, last_activation="identity"):
        acts = [hidden_activation] * (len(dims) - 2) + [last_activation]
        return cls(Layer.init(i, o, a, rng) for i, o, a in zip(dims, dims[1:], acts))

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = affine_forward(x, layer)
            caches.append(c)
        return x, caches

    def backward(self, grad_out, caches):
        """Return ``(grad_x, [(grad_W, grad_b), ...])`` in layer order."""
        grads = []
        for c in reversed(caches):
            grad_out, gw, gb = affine_backward(grad_out, c)
            grads.append((gw, gb))
        return grad_out, grads[::-1]

    def parameters(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out

    def named_grads(self, prefix, grads):
        out = {}
        for i, (gw, gb) in enumerate(grads):
            out[f"{prefix}.{i}.weight"] = gw
            out[f"{prefix}.{i}.bias"] = gb
        return out


def softmax(logits):
    logits = as_matrix(logits, "logits")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets, weights=None):
    """Mean (optionally per-sample weighted) cross-entropy.

    Returns ``(loss, grad_logits, errors)`` where ``loss = sum_i w_i * nll_i / n``
    and ``errors`` counts rows whose argmax differs from the target, ignoring
    the weights.
    """
    logits = as_matrix(logits, "logits")
    n, c = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ValidationError(f"targets must lie in [0, {c})")
    if weights is None:
        weights = np.ones(n)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ShapeError(f"expected {n} weights, got shape {weights.shape}")
        if np.any(weights < 0):
            raise ValidationError("sample weights must be non-negative")
    if n == 0:
        return 0.0, np.zeros_like(logits), 0

    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(n)
    picked = log_probs[rows, targets]
    clamped = picked < LOG_PROB_FLOOR
    loss = float(np.sum(weights * -np.maximum(picked, LOG_PROB_FLOOR)) / n)

    grad = np.exp(log_probs)
    grad[rows, targets] -= 1.0
    # the clamp is flat below the floor
    grad[clamped] = 0.0
    grad *= (weights / n)[:, None]
    errors = int(np.sum(np.argmax(logits, axis=1) != targets))
    return loss, grad, errors


def grad_reverse(grad, lam):
    """Backward rule of a gradient-reversal point: ``-lam * grad``.

    The forward pass through the point is the identity, so there is no
    forward function here.
    """
    lam = float(lam)
    if not np.isfinite(lam):
        raise ValidationError("reversal strength must be finite")
    return -lam * np.asarray(grad, dtype=np.float64)


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, layers_by_name=None):
    """Bias-corrected Adam update, in place on ``params``.

    Only names present in ``grads`` are touched, which is how disabled
    branches stay frozen. ``layers_by_name`` maps a parameter name to its
    owning :class:`Layer` so that outstanding caches are invalidated.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if layers_by_name is not None and name in layers_by_name:
            layers_by_name[name].version += 1
    return params, state
