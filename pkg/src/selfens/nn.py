"""Small numpy neural-network engine.

Layers operate on NHWC arrays. A network is an ordered list of layer
descriptors (:class:`NetworkSpec`); all learnable state lives in a
:class:`ParamStore`, so one spec can drive a student and a teacher that
share the layout but not the values.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Dense:
    units: int
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Conv2D:
    kh: int
    kw: int
    channels: int
    padding: str = "valid"
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class MaxPool2x2:
    kind: str = field(default="maxpool2x2", init=False)


@dataclass(frozen=True)
class GlobalAvgPool:
    kind: str = field(default="global_avg_pool", init=False)


@dataclass(frozen=True)
class BatchNorm:
    momentum: float = 0.01
    eps: float = 1e-5
    kind: str = field(default="batch_norm", init=False)


@dataclass(frozen=True)
class Dropout:
    rate: float
    kind: str = field(default="dropout", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class SoftmaxHead:
    classes: int
    kind: str = field(default="softmax_head", init=False)


LAYER_TYPES = {
    "dense": Dense,
    "conv2d": Conv2D,
    "maxpool2x2": MaxPool2x2,
    "global_avg_pool": GlobalAvgPool,
    "batch_norm": BatchNorm,
    "dropout": Dropout,
    "relu": ReLU,
    "softmax_head": SoftmaxHead,
}


def _out_shape(layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind in ("dense", "softmax_head"):
        n = layer.units if kind == "dense" else layer.classes
        if n < 1:
            raise ShapeError(f"{kind} needs at least one unit")
        return (n,)
    if kind == "conv2d":
        if len(shape) != 3:
            raise ShapeError(f"conv2d expects HxWxC input, got {shape}")
        h, w, _ = shape
        if layer.padding == "same":
            if layer.kh % 2 == 0 or layer.kw % 2 == 0:
                raise ShapeError("'same' padding needs odd kernel sizes")
            return (h, w, layer.channels)
        if layer.padding != "valid":
            raise ShapeError(f"unknown padding {layer.padding!r}")
        ho, wo = h - layer.kh + 1, w - layer.kw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {layer.kh}x{layer.kw} larger than input {h}x{w}")
        return (ho, wo, layer.channels)
    if kind == "maxpool2x2":
        if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
            raise ShapeError(f"maxpool2x2 expects HxWxC with H,W >= 2, got {shape}")
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if kind == "global_avg_pool":
        if len(shape) != 3:
            raise ShapeError(f"global_avg_pool expects HxWxC input, got {shape}")
        return (shape[2],)
    if kind in ("batch_norm", "relu"):
        return shape
    if kind == "dropout":
        if not 0.0 <= layer.rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {layer.rate}")
        return shape
    raise ShapeError(f"unknown layer kind {kind!r}")


@dataclass
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = list(self.layers)
        heads = [i for i, l in enumerate(self.layers) if l.kind == "softmax_head"]
        if heads != [len(self.layers) - 1]:
            raise ShapeError("a network needs exactly one softmax_head, as its last layer")
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Input shape of every layer followed by the output shape."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(_out_shape(layer, out[-1]))
        return out

    @property
    def classes(self) -> int:
        return self.layers[-1].classes

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            kind = ld.pop("kind")
            layers.append(LAYER_TYPES[kind](**ld))
        return cls(tuple(d["input_shape"]), layers)


# ---------------------------------------------------------------------------
# parameter storage


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None


class ParamStore:
    """Learnable parameters plus batch-norm running statistics.

    Teacher stores are built with ``with_moments=False`` and carry no Adam
    state.
    """

    def __init__(self, with_moments: bool = True):
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.with_moments = with_moments

    def add(self, name: str, value: np.ndarray) -> None:
        m = np.zeros_like(value) if self.with_moments else None
        v = np.zeros_like(value) if self.with_moments else None
        self.params[name] = Param(value, np.zeros_like(value), m, v)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0

    def copy(self, with_moments: bool | None = None) -> "ParamStore":
        wm = self.with_moments if with_moments is None else with_moments
        out = ParamStore(with_moments=wm)
        for name, p in self.params.items():
            out.params[name] = Param(
                p.value.copy(),
                p.grad.copy(),
                None if not wm else (p.adam_m.copy() if p.adam_m is not None else np.zeros_like(p.value)),
                None if not wm else (p.adam_v.copy() if p.adam_v is not None else np.zeros_like(p.value)),
            )
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        out.step_count = self.step_count if wm else 0
        return out

    def astype(self, dtype) -> "ParamStore":
        out = self.copy()
        for p in out.params.values():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
            if p.adam_m is not None:
                p.adam_m = p.adam_m.astype(dtype)
                p.adam_v = p.adam_v.astype(dtype)
        out.buffers = {k: v.astype(dtype) for k, v in out.buffers.items()}
        return out

    def same_layout(self, other: "ParamStore") -> bool:
        if self.params.keys() != other.params.keys() or self.buffers.keys() != other.buffers.keys():
            return False
        return all(self[k].shape == other[k].shape for k in self.params) and all(
            self.buffers[k].shape == other.buffers[k].shape for k in self.buffers
        )


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    """He-uniform weights, zero biases, unit gamma, zero beta."""
    store = ParamStore()
    shapes = spec.shapes()
    for i, layer in enumerate(spec.layers):
        in_shape = shapes[i]
        if layer.kind in ("dense", "softmax_head"):
            fan_in = int(np.prod(in_shape))
            units = shapes[i + 1][0]
            lim = np.sqrt(6.0 / fan_in)
            store.add(f"{i}.W", rng.uniform(-lim, lim, (fan_in, units)).astype(dtype))
            store.add(f"{i}.b", np.zeros(units, dtype))
        elif layer.kind == "conv2d":
            cin = in_shape[2]
            fan_in = layer.kh * layer.kw * cin
            lim = np.sqrt(6.0 / fan_in)
            store.add(f"{i}.W", rng.uniform(-lim, lim, (layer.kh, layer.kw, cin, layer.channels)).astype(dtype))
            store.add(f"{i}.b", np.zeros(layer.channels, dtype))
        elif layer.kind == "batch_norm":
            c = in_shape[-1]
            store.add(f"{i}.gamma", np.ones(c, dtype))
            store.add(f"{i}.beta", np.zeros(c, dtype))
            store.buffers[f"{i}.running_mean"] = np.zeros(c, dtype)
            store.buffers[f"{i}.running_var"] = np.ones(c, dtype)
    return store


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    spec: NetworkSpec
    mode: str
    records: list
    param_names: frozenset
    probs: np.ndarray


def _pad(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    if layer.padding == "same":
        ph, pw = layer.kh // 2, layer.kw // 2
        return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    return x


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = xp.shape
    ho, wo = h - kh + 1, w - kw + 1
    # column order (dy, dx, c) matches W.reshape(kh * kw * cin, cout)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {where}")


def forward(
    spec: NetworkSpec,
    params: ParamStore,
    batch: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    update_running: bool = True,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network and return ``(probs, cache)``.

    In train mode batch norm normalises with the batch statistics and, if
    ``update_running``, folds them into the running averages; dropout draws
    its masks from ``rng``. Eval mode is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape[1:]} does not match network input {spec.input_shape}")
    train = mode == "train"
    if train and rng is None and any(l.kind == "dropout" for l in spec.layers):
        raise ValueError("train-mode forward with dropout needs an rng")

    x = np.asarray(batch, dtype=params.dtype)
    records = []
    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "conv2d":
            W, b = params[f"{i}.W"], params[f"{i}.b"]
            xp = _pad(x, layer)
            n, h, w, _ = xp.shape
            ho, wo = h - layer.kh + 1, w - layer.kw + 1
            cols = _im2col(xp, layer.kh, layer.kw)
            out = cols @ W.reshape(-1, layer.channels) + b
            records.append((cols, xp.shape))
            x = out.reshape(n, ho, wo, layer.channels)
        elif kind in ("dense", "softmax_head"):
            W, b = params[f"{i}.W"], params[f"{i}.b"]
            flat = x.reshape(x.shape[0], -1)
            records.append((flat, x.shape))
            x = flat @ W + b
            if kind == "softmax_head":
                z = x - x.max(axis=1, keepdims=True)
                e = np.exp(z)
                x = e / e.sum(axis=1, keepdims=True)
        elif kind == "relu":
            mask = x > 0
            records.append(mask)
            x = x * mask
        elif kind == "maxpool2x2":
            n, h, w, c = x.shape
            ho, wo = h // 2, w // 2
            blocks = x[:, : 2 * ho, : 2 * wo, :].reshape(n, ho, 2, wo, 2, c)
            blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
            idx = blocks.argmax(axis=-1)
            records.append((idx, x.shape))
            x = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        elif kind == "global_avg_pool":
            records.append(x.shape)
            x = x.mean(axis=(1, 2))
        elif kind == "batch_norm":
            gamma, beta = params[f"{i}.gamma"], params[f"{i}.beta"]
            axes = tuple(range(x.ndim - 1))
            rm, rv = params.buffers[f"{i}.running_mean"], params.buffers[f"{i}.running_var"]
            if train:
                mu = x.mean(axis=axes)
                var = x.var(axis=axes)
                inv = 1.0 / np.sqrt(var + layer.eps)
                xhat = (x - mu) * inv
                if update_running:
                    m = x.size // x.shape[-1]
                    unbiased = var * (m / max(m - 1, 1))
                    rm *= 1.0 - layer.momentum
                    rm += layer.momentum * mu
                    rv *= 1.0 - layer.momentum
                    rv += layer.momentum * unbiased
                records.append((xhat, inv))
            else:
                inv = 1.0 / np.sqrt(rv + layer.eps)
                xhat = (x - rm) * inv
                records.append((xhat, inv))
            x = gamma * xhat + beta
        elif kind == "dropout":
            if train and layer.rate > 0:
                keep = (rng.random(x.shape) >= layer.rate).astype(x.dtype) / (1.0 - layer.rate)
                records.append(keep)
                x = x * keep
            else:
                records.append(None)
        else:
            raise ShapeError(f"unknown layer kind {kind!r}")
    _check_finite(x, "network output")
    cache = ForwardCache(spec, mode, records, frozenset(params.params), x)
    return x, cache


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - (grad_probs * probs).sum(axis=1, keepdims=True))


def backward(cache: ForwardCache, grad: np.ndarray, params: ParamStore, wrt: str = "probs") -> None:
    """Accumulate parameter gradients into ``params``.

    ``grad`` is the loss gradient with respect to the probabilities (default)
    or the logits (``wrt="logits"``).
    """
    if cache.param_names != frozenset(params.params):
        raise ShapeError("forward cache was produced with a different parameter layout")
    spec = cache.spec
    g = np.asarray(grad, dtype=params.dtype)
    if g.shape != cache.probs.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache.probs.shape}")
    if wrt == "probs":
        g = softmax_backward(cache.probs, g)
    elif wrt != "logits":
        raise ValueError(f"wrt must be 'probs' or 'logits', got {wrt!r}")

    for i in range(len(spec.layers) - 1, -1, -1):
        layer, rec = spec.layers[i], cache.records[i]
        kind = layer.kind
        if kind == "conv2d":
            cols, pshape = rec
            n, hp, wp, cin = pshape
            ho, wo = hp - layer.kh + 1, wp - layer.kw + 1
            W = params[f"{i}.W"]
            g2 = g.reshape(-1, layer.channels)
            params.params[f"{i}.W"].grad += (cols.T @ g2).reshape(W.shape)
            params.params[f"{i}.b"].grad += g2.sum(axis=0)
            if i == 0:
                break
            dcols = (g2 @ W.reshape(-1, layer.channels).T).reshape(n, ho, wo, layer.kh * layer.kw, cin)
            dxp = np.zeros(pshape, dtype=g.dtype)
            k = 0
            for dy in range(layer.kh):
                for dx in range(layer.kw):
                    dxp[:, dy:dy + ho, dx:dx + wo, :] += dcols[:, :, :, k, :]
                    k += 1
            if layer.padding == "same":
                ph, pw = layer.kh // 2, layer.kw // 2
                dxp = dxp[:, ph:hp - ph, pw:wp - pw, :]
            g = dxp
        elif kind in ("dense", "softmax_head"):
            flat, in_shape = rec
            W = params[f"{i}.W"]
            params.params[f"{i}.W"].grad += flat.T @ g
            params.params[f"{i}.b"].grad += g.sum(axis=0)
            if i == 0:
                break
            g = (g @ W.T).reshape(in_shape)
        elif kind == "relu":
            g = g * rec
        elif kind == "maxpool2x2":
            idx, in_shape = rec
            n, h, w, c = in_shape
            ho, wo = h // 2, w // 2
            onehot = (np.arange(4) == idx[..., None]).astype(g.dtype) * g[..., None]
            blocks = onehot.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
            dx = np.zeros(in_shape, dtype=g.dtype)
            dx[:, : 2 * ho, : 2 * wo, :] = blocks.reshape(n, 2 * ho, 2 * wo, c)
            g = dx
        elif kind == "global_avg_pool":
            n, h, w, c = rec
            g = np.broadcast_to(g[:, None, None, :] / (h * w), rec).copy()
        elif kind == "batch_norm":
            if cache.mode != "train":
                raise ValueError("backward needs a train-mode forward cache")
            xhat, inv = rec
            axes = tuple(range(g.ndim - 1))
            gamma = params[f"{i}.gamma"]
            params.params[f"{i}.gamma"].grad += (g * xhat).sum(axis=axes)
            params.params[f"{i}.beta"].grad += g.sum(axis=axes)
            dxhat = g * gamma
            m = g.size // g.shape[-1]
            g = (inv / m) * (
                m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
            )
        elif kind == "dropout":
            if rec is not None:
                g = g * rec


# ---------------------------------------------------------------------------
# optimisation


def adam_step(params: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    if not params.with_moments:
        raise ValueError("adam_step on a store without moment buffers")
    t = params.step_count + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    updates = {}
    for name, p in params.params.items():
        m = beta1 * p.adam_m + (1.0 - beta1) * p.grad
        v = beta2 * p.adam_v + (1.0 - beta2) * (p.grad * p.grad)
        with np.errstate(invalid="ignore", over="ignore"):
            step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if not np.isfinite(step).all():
            raise NonFiniteError(f"non-finite Adam update for {name}")
        updates[name] = (m.astype(p.value.dtype), v.astype(p.value.dtype), step.astype(p.value.dtype))
    for name, (m, v, step) in updates.items():
        p = params.params[name]
        p.adam_m, p.adam_v = m, v
        p.value -= step
    params.step_count = t


def ema_update(teacher: ParamStore, student: ParamStore, alpha: float) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, weights and BN stats."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    if not teacher.same_layout(student):
        raise ShapeError("teacher and student parameter layouts differ")
    # blend in float64: a float32 alpha would bias the decay rate itself
    pairs = [(p.value, student.params[k].value) for k, p in teacher.params.items()]
    pairs += [(b, student.buffers[k]) for k, b in teacher.buffers.items()]
    for t, s in pairs:
        t[...] = alpha * t.astype(np.float64) + (1.0 - alpha) * s.astype(np.float64)


# ---------------------------------------------------------------------------
# finite-difference oracle


def _kink_signature(cache: ForwardCache) -> list:
    sig = []
    for layer, rec in zip(cache.spec.layers, cache.records):
        if layer.kind == "relu":
            sig.append(rec)
        elif layer.kind == "maxpool2x2":
            sig.append(rec[0])
    return sig


def _same_kinks(a: list, b: list) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_grad(
    spec: NetworkSpec,
    params: ParamStore,
    batch: np.ndarray,
    loss_fn: Callable[[np.ndarray], float],
    h: float = 1e-5,
    mode: str = "train",
    seed: int = 0,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn(forward(...))`` per parameter.

    Every evaluation reuses the dropout masks drawn from ``seed`` and leaves
    running statistics untouched. With ``max_coords`` only a random subset of
    coordinates per tensor is probed; the rest are NaN. Coordinates whose
    perturbation flips a ReLU or max-pool decision are also NaN, since the
    derivative is not defined across the kink.
    """
    if params.dtype != np.float64:
        raise TypeError("finite differences need a float64 parameter store")
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-6, 1e-3]")

    def evaluate():
        probs, cache = forward(spec, params, batch, mode, np.random.default_rng(seed), update_running=False)
        return float(loss_fn(probs)), _kink_signature(cache)

    _, base_sig = evaluate()
    out = {}
    for name, p in params.params.items():
        g = np.full(p.value.shape, np.nan)
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        gflat = g.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp, sp = evaluate()
            flat[c] = orig - h
            lm, sm = evaluate()
            flat[c] = orig
            if _same_kinks(sp, base_sig) and _same_kinks(sm, base_sig):
                gflat[c] = (lp - lm) / (2 * h)
        out[name] = g
    return out


def analytic_grad(
    spec: NetworkSpec,
    params: ParamStore,
    batch: np.ndarray,
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    mode: str = "train",
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Backprop gradient under the same conditions :func:`finite_diff_grad` uses."""
    work = params.copy()
    work.zero_grad()
    probs, cache = forward(spec, work, batch, mode, np.random.default_rng(seed), update_running=False)
    _, g = loss_and_grad(probs)
    backward(cache, g, work)
    return {k: p.grad for k, p in work.params.items()}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(max |a|, max |n|, floor) over probed coordinates."""
    ok = ~np.isnan(numeric)
    if not ok.any():
        return 0.0
    a, n = analytic[ok], numeric[ok]
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)

