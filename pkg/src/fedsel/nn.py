"""Small from-scratch neural-network kernel.

Every batch is a 2-D float64 array of shape ``(samples, features)``.
Convolutional layers reshape internally to ``(samples, C, H, W)`` and emit
flattened channel-major features again, so layers compose without an
explicit flatten layer.

Parameters live in :class:`ModelParams`, a list of ``(weights, bias)``
pairs, one per parameterized layer (dense and conv3x3).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericError

DENSE = "dense"
CONV3X3 = "conv3x3"
RELU = "relu"
SOFTMAX = "softmax"
RANDOM_POOL = "random_pool"
LAYER_KINDS = (DENSE, CONV3X3, RELU, SOFTMAX, RANDOM_POOL)

LOSS_KINDS = ("cross-entropy", "mse", "reconstruction-l2")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    # conv3x3 only
    in_channels: int = 0
    out_channels: int = 0
    height: int = 0
    width: int = 0
    # random_pool only
    pool_count: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV3X3:
            object.__setattr__(self, "in_dim", self.in_channels * self.height * self.width)
            object.__setattr__(self, "out_dim", self.out_channels * self.height * self.width)

    @property
    def has_params(self) -> bool:
        return self.kind in (DENSE, CONV3X3)

    def param_shapes(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self.kind == DENSE:
            return (self.in_dim, self.out_dim), (self.out_dim,)
        if self.kind == CONV3X3:
            return (self.out_channels, self.in_channels, 3, 3), (self.out_channels,)
        raise ValueError(f"{self.kind} layers have no parameters")


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(DENSE, in_dim=in_dim, out_dim=out_dim)


def conv3x3(in_channels: int, out_channels: int, height: int, width: int) -> LayerSpec:
    return LayerSpec(CONV3X3, in_channels=in_channels, out_channels=out_channels,
                     height=height, width=width)


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def softmax_layer() -> LayerSpec:
    return LayerSpec(SOFTMAX)


def random_pool_layer(pool_count: int = 5) -> LayerSpec:
    return LayerSpec(RANDOM_POOL, pool_count=pool_count)


def mlp_spec(sizes: Sequence[int], output_softmax: bool = True) -> list[LayerSpec]:
    """Dense/ReLU stack, e.g. ``mlp_spec([784, 64, 10])``."""
    specs: list[LayerSpec] = []
    for i in range(len(sizes) - 1):
        specs.append(dense(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            specs.append(relu())
    if output_softmax:
        specs.append(softmax_layer())
    return specs


def dqre_conv_spec(in_channels: int = 1, height: int = 28, width: int = 28,
                   num_classes: int = 10, channels: Sequence[int] = (24, 18, 12, 6),
                   pool_count: int = 5, dense_widths: Sequence[int] = (7, 8),
                   literal: bool = False) -> list[LayerSpec]:
    """Conv preset: 3x3 convolutions with descending channel counts, a random
    feature pool, then two dense layers.

    With ``literal=False`` (default) the last dense width is replaced by
    ``num_classes`` so the network can emit one logit per class.
    """
    specs: list[LayerSpec] = []
    c = in_channels
    for out_c in channels:
        specs += [conv3x3(c, out_c, height, width), relu()]
        c = out_c
    specs.append(random_pool_layer(pool_count))
    widths = list(dense_widths)
    if not literal:
        widths[-1] = num_classes
    prev = c * height * width
    for i, w in enumerate(widths):
        specs.append(dense(prev, w))
        if i < len(widths) - 1:
            specs.append(relu())
        prev = w
    specs.append(softmax_layer())
    return specs


def input_dim(specs: Sequence[LayerSpec]) -> int:
    for s in specs:
        if s.has_params:
            return s.in_dim
    raise DimensionError("layer list has no parameterized layer; input width is undefined")


class ModelParams:
    """Ordered ``(weights, bias)`` pairs for the parameterized layers."""

    __slots__ = ("layers",)

    def __init__(self, layers: Sequence[tuple[np.ndarray, np.ndarray]]):
        self.layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for w, b in layers]

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __repr__(self):
        shapes = ", ".join(f"{w.shape}/{b.shape}" for w, b in self.layers)
        return f"ModelParams([{shapes}])"

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(w.shape, b.shape) for w, b in self.layers]

    def flatten(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in self.layers])

    @classmethod
    def unflatten(cls, flat: np.ndarray, shapes) -> "ModelParams":
        """Rebuild from a flat vector. ``shapes`` is a layer-spec list, a
        ``ModelParams`` template, or the output of :meth:`shapes`."""
        if isinstance(shapes, ModelParams):
            shapes = shapes.shapes()
        elif shapes and isinstance(shapes[0], LayerSpec):
            shapes = [s.param_shapes() for s in shapes if s.has_params]
        flat = np.asarray(flat, dtype=np.float64)
        expected = sum(int(np.prod(ws)) + int(np.prod(bs)) for ws, bs in shapes)
        if flat.shape != (expected,):
            raise DimensionError(f"flat vector has shape {flat.shape}, expected ({expected},)")
        layers = []
        pos = 0
        for ws, bs in shapes:
            nw, nb = int(np.prod(ws)), int(np.prod(bs))
            w = flat[pos:pos + nw].reshape(ws).copy()
            pos += nw
            b = flat[pos:pos + nb].reshape(bs).copy()
            pos += nb
            layers.append((w, b))
        return cls(layers)

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers])

    def zeros_like(self) -> "ModelParams":
        return ModelParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def same_structure(self, other: "ModelParams") -> bool:
        return self.shapes() == other.shapes()

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact equality."""
        return self.same_structure(other) and all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers))


def param_count(specs: Sequence[LayerSpec]) -> int:
    return sum(int(np.prod(ws)) + int(np.prod(bs))
               for ws, bs in (s.param_shapes() for s in specs if s.has_params))


def init_params(specs: Sequence[LayerSpec], rng: np.random.Generator) -> ModelParams:
    """Uniform init in [-s, s], s = sqrt(6 / (fan_in + fan_out)); zero bias."""
    layers = []
    for s in specs:
        if not s.has_params:
            continue
        wshape, bshape = s.param_shapes()
        if s.kind == DENSE:
            fan_in, fan_out = s.in_dim, s.out_dim
        else:
            fan_in, fan_out = s.in_channels * 9, s.out_channels * 9
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-lim, lim, size=wshape), np.zeros(bshape)))
    return ModelParams(layers)


@dataclass(frozen=True)
class LossConfig:
    reg_lambda: float = 0.0
    loss_kind: str = "cross-entropy"

    def __post_init__(self):
        if self.reg_lambda < 0:
            raise ValueError(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


# ---------------------------------------------------------------------------
# layer primitives


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def random_pool_mask(n: int, features: int, pool_count: int,
                     rng: np.random.Generator) -> np.ndarray:
    if pool_count > features:
        raise ValueError(f"pool_count {pool_count} exceeds feature dimension {features}")
    if pool_count < 0:
        raise ValueError("pool_count must be nonnegative")
    order = np.argsort(rng.random((n, features)), axis=1, kind="stable")
    mask = np.zeros((n, features), dtype=bool)
    np.put_along_axis(mask, order[:, :pool_count], True, axis=1)
    return mask


def random_pool(x: np.ndarray, pool_count: int, rng: np.random.Generator) -> np.ndarray:
    """Keep ``pool_count`` randomly chosen features per row, zero the rest."""
    x = np.asarray(x, dtype=np.float64)
    mask = random_pool_mask(x.shape[0], x.shape[1], pool_count, rng)
    return np.where(mask, x, 0.0)


def _conv_cols(x: np.ndarray) -> np.ndarray:
    # x: (N, C, H, W) -> windows (N, H, W, C, 3, 3) over the zero-padded input
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5)


def _conv_forward(x4: np.ndarray, w: np.ndarray, b: np.ndarray):
    cols = _conv_cols(x4)
    out = np.einsum("nhwcij,ocij->nohw", cols, w, optimize=True) + b[None, :, None, None]
    return out, cols


def _conv_backward(g4: np.ndarray, cols: np.ndarray, w: np.ndarray, in_shape):
    dw = np.einsum("nohw,nhwcij->ocij", g4, cols, optimize=True)
    db = g4.sum(axis=(0, 2, 3))
    n, c, h, wd = in_shape
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += np.einsum("nohw,oc->nchw", g4, w[:, :, i, j],
                                                      optimize=True)
    return dxp[:, :, 1:-1, 1:-1], dw, db


# ---------------------------------------------------------------------------
# forward / backward


def _forward(params: ModelParams, specs: Sequence[LayerSpec], x: np.ndarray, rng):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"batch must be 2-D (samples, features), got shape {x.shape}")
    n_param_layers = sum(1 for s in specs if s.has_params)
    if n_param_layers != len(params):
        raise DimensionError(
            f"layer list has {n_param_layers} parameterized layers, params have {len(params)}")
    caches = []
    pi = 0
    for li, s in enumerate(specs):
        width = x.shape[1]
        if s.kind == DENSE:
            w, b = params.layers[pi]
            pi += 1
            if width != s.in_dim or w.shape != (s.in_dim, s.out_dim):
                raise DimensionError(
                    f"layer {li} (dense) expects {s.in_dim} input features, got {width}")
            caches.append(x)
            x = x @ w + b
        elif s.kind == CONV3X3:
            w, b = params.layers[pi]
            pi += 1
            if width != s.in_dim or w.shape != (s.out_channels, s.in_channels, 3, 3):
                raise DimensionError(
                    f"layer {li} (conv3x3) expects {s.in_dim} input features, got {width}")
            x4 = x.reshape(x.shape[0], s.in_channels, s.height, s.width)
            out, cols = _conv_forward(x4, w, b)
            caches.append((cols, x4.shape))
            x = out.reshape(x.shape[0], -1)
        elif s.kind == RELU:
            caches.append(x > 0)
            x = np.maximum(x, 0.0)
        elif s.kind == SOFTMAX:
            caches.append(x)  # logits, reused by fused cross-entropy
            x = softmax(x)
            caches[-1] = (caches[-1], x)
        elif s.kind == RANDOM_POOL:
            if rng is None:
                raise ValueError(f"layer {li} (random_pool) needs an rng stream")
            if s.pool_count > width:
                raise DimensionError(
                    f"layer {li} (random_pool) keeps {s.pool_count} of only {width} features")
            mask = random_pool_mask(x.shape[0], width, s.pool_count, rng)
            caches.append(mask)
            x = np.where(mask, x, 0.0)
    return x, caches


def forward(params: ModelParams, specs: Sequence[LayerSpec], batch: np.ndarray,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the network on ``batch``. ``rng`` is required when the layer list
    contains a random-pool layer."""
    out, _ = _forward(params, specs, batch, rng)
    return out


def _backward(params: ModelParams, specs: Sequence[LayerSpec], caches, grad: np.ndarray,
              stop: int | None = None) -> ModelParams:
    """Backpropagate ``grad`` from the output of layer ``stop - 1`` (default: last)."""
    stop = len(specs) if stop is None else stop
    grads: list = [None] * len(params)
    pi = sum(1 for s in specs[:stop] if s.has_params)
    for li in range(stop - 1, -1, -1):
        s, cache = specs[li], caches[li]
        if s.kind == DENSE:
            pi -= 1
            w, _ = params.layers[pi]
            grads[pi] = (cache.T @ grad, grad.sum(axis=0))
            grad = grad @ w.T
        elif s.kind == CONV3X3:
            pi -= 1
            w, _ = params.layers[pi]
            cols, in_shape = cache
            g4 = grad.reshape(grad.shape[0], s.out_channels, s.height, s.width)
            dx, dw, db = _conv_backward(g4, cols, w, in_shape)
            grads[pi] = (dw, db)
            grad = dx.reshape(grad.shape[0], -1)
        elif s.kind == RELU:
            grad = grad * cache
        elif s.kind == SOFTMAX:
            p = cache[1]
            grad = p * (grad - (grad * p).sum(axis=1, keepdims=True))
        elif s.kind == RANDOM_POOL:
            grad = grad * cache
    return ModelParams(grads)


def _one_hot(targets: np.ndarray, n_out: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.size and (t.min() < 0 or t.max() >= n_out):
            raise DimensionError(f"class labels must lie in [0, {n_out})")
        out = np.zeros((t.shape[0], n_out))
        out[np.arange(t.shape[0]), t.astype(np.int64)] = 1.0
        return out
    return t.astype(np.float64)


def regularization(params: ModelParams, reg_lambda: float) -> float:
    """(lambda / 2) * sum of squared weights; biases excluded."""
    return 0.5 * reg_lambda * sum(float(np.sum(w * w)) for w, _ in params)


def loss_and_grad(params: ModelParams, specs: Sequence[LayerSpec], batch: np.ndarray,
                  targets, cfg: LossConfig = LossConfig(),
                  rng: np.random.Generator | None = None) -> tuple[float, ModelParams]:
    """Total loss (data term plus weight decay) and its gradient.

    * ``cross-entropy``: targets are integer labels or probability rows. If
      the network ends in a softmax layer its probabilities are used,
      otherwise the outputs are treated as logits.
    * ``mse``: mean over samples of the squared error sum.
    * ``reconstruction-l2``: ``1/(2k) * sum ||x - x_hat||^2`` where ``x`` is
      ``targets`` or, when ``targets`` is None, the input batch itself.
    """
    batch = np.asarray(batch, dtype=np.float64)
    out, caches = _forward(params, specs, batch, rng)
    k = out.shape[0]
    stop = len(specs)
    if cfg.loss_kind == "cross-entropy":
        ends_softmax = bool(specs) and specs[-1].kind == SOFTMAX
        logits = caches[-1][0] if ends_softmax else out
        t = _one_hot(targets, logits.shape[1])
        if t.shape != logits.shape:
            raise DimensionError(f"targets shape {t.shape} does not match output {logits.shape}")
        logp = log_softmax(logits)
        data = -float(np.sum(t * logp)) / k
        grad = (np.exp(logp) * t.sum(axis=1, keepdims=True) - t) / k
        if ends_softmax:
            stop -= 1  # gradient is already w.r.t. the pre-softmax logits
    elif cfg.loss_kind == "mse":
        t = np.asarray(targets, dtype=np.float64).reshape(out.shape)
        diff = out - t
        data = float(np.sum(diff * diff)) / k
        grad = 2.0 * diff / k
    else:
        t = batch if targets is None else np.asarray(targets, dtype=np.float64)
        if t.shape != out.shape:
            raise DimensionError(
                f"reconstruction target shape {t.shape} does not match output {out.shape}")
        diff = out - t
        data = float(np.sum(diff * diff)) / (2.0 * k)
        grad = diff / k
    total = data + regularization(params, cfg.reg_lambda)
    if not np.isfinite(total):
        diag = []
        for li, c in enumerate(caches):
            arr = c[0] if isinstance(c, tuple) else c
            if isinstance(arr, np.ndarray) and arr.dtype != bool:
                diag.append(f"layer {li} ({specs[li].kind}) input max|x|={np.max(np.abs(arr)):.3g}")
        raise NumericError(f"non-finite loss {total}; " + "; ".join(diag))
    grads = _backward(params, specs, caches, grad, stop=stop)
    if cfg.reg_lambda:
        grads = ModelParams([(gw + cfg.reg_lambda * w, gb)
                             for (gw, gb), (w, _) in zip(grads, params)])
    return total, grads


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    """Return ``params - lr * grads``; inputs are not modified."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if not params.same_structure(grads):
        raise DimensionError("gradient structure does not match parameters")
    return ModelParams([(w - lr * gw, b - lr * gb)
                        for (w, b), (gw, gb) in zip(params, grads)])
