"""
Minimal dense-tensor engine: the layers TFNet needs, each with an exact
backward rule recorded on a Tape, plus focal loss, plain SGD, a
finite-difference checker and the weight checkpoint format.

Every op follows the same pattern: compute the forward value with numpy,
then hand `_result` the inputs and a closure mapping the output gradient to
one gradient per input. Nothing is recorded when no Tape is active, so
inference and finite differences run the same code without a graph.
"""
import collections
import json
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

from app.config import FOCAL_ALPHA, FOCAL_GAMMA, GRAD_CHECK_EPSILON
from app.errors import DataError, InvalidArgument, StateError
from app.log import LOG

DTYPE = np.float64

# little-endian float64, the checkpoint blob format
_BLOB_DTYPE = np.dtype("<f8")

# op name -> number of invocations since the last reset
op_counts = collections.Counter()

_ACTIVE_TAPE: Optional["Tape"] = None


class Tensor:
    """Dense float64 array with an optional gradient buffer of the same shape"""

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        # set on outputs recorded by a tape
        self._tracked = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgument(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"<Tensor {self.name or '?'} shape={self.shape}>"


class Tape:
    """Records the ops of one forward pass. Used as a context manager;
    backward can run only once per tape."""

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise StateError("another tape is already recording")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor):
        """Propagate d(loss)/d(.) to every leaf that requires grad.
        Leaf grads accumulate until sgd_step clears them."""
        if self._consumed:
            raise StateError("backward already ran on this tape")
        if loss.size != 1:
            raise InvalidArgument(f"backward needs a scalar loss, shape is {loss.shape}")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.requires_grad:
            _accumulate_leaf(loss, grads[id(loss)])

        for out, inputs, backward in reversed(self._records):
            upstream = grads.pop(id(out), None)
            if upstream is None:
                continue

            for t, g in zip(inputs, backward(upstream)):
                if g is None:
                    continue
                if t._tracked:
                    if id(t) in grads:
                        grads[id(t)] = grads[id(t)] + g
                    else:
                        grads[id(t)] = g
                if t.requires_grad:
                    _accumulate_leaf(t, g)

        self._records = []


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE)
    else:
        t.grad += g


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str):
    op_counts[op] += 1
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad or t._tracked for t in inputs):
        out._tracked = True
        tape.record(out, inputs, backward)
    return out


def _check_4d(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise InvalidArgument(f"{op} expects a (B, C, H, W) tensor, got shape {x.shape}")


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None

    def __post_init__(self):
        for field_name in ("in_channels", "out_channels", "kernel_size", "stride", "dilation"):
            if getattr(self, field_name) < 1:
                raise InvalidArgument(f"conv {field_name} must be positive")
        if self.padding < 0:
            raise InvalidArgument("conv padding must be >= 0")

        w_shape = (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        if self.weight is None:
            self.weight = Tensor(np.zeros(w_shape), requires_grad=True)
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.out_channels), requires_grad=True)

        if self.weight.shape != w_shape:
            raise InvalidArgument(f"conv weight shape {self.weight.shape} != {w_shape}")
        if self.bias.shape != (self.out_channels,):
            raise InvalidArgument(f"conv bias shape {self.bias.shape} != ({self.out_channels},)")

    @classmethod
    def he_init(
        cls,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        dilation: int = 1,
        padding: Optional[int] = None,
        name: str = "",
    ) -> "ConvSpec":
        """fan-in scaled normal weights, zero bias. Padding defaults to the
        extent-preserving d*(k-1)/2"""
        if padding is None:
            padding = dilation * (kernel_size - 1) // 2
        std = np.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
        weight = rng.standard_normal((out_channels, in_channels, kernel_size, kernel_size))
        return cls(
            in_channels,
            out_channels,
            kernel_size,
            stride=stride,
            dilation=dilation,
            padding=padding,
            weight=Tensor(weight * std, requires_grad=True, name=f"{name}.weight"),
            bias=Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.bias"),
        )

    def output_extent(self, size: int) -> int:
        span = self.dilation * (self.kernel_size - 1) + 1
        return (size + 2 * self.padding - span) // self.stride + 1

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation with stride, dilation and zero padding"""
    _check_4d(x, "conv2d")
    b, c, h, w = x.shape
    if c != spec.in_channels:
        raise InvalidArgument(f"conv2d input has {c} channels, spec expects {spec.in_channels}")

    ho, wo = spec.output_extent(h), spec.output_extent(w)
    if ho < 1 or wo < 1:
        raise InvalidArgument(f"conv2d output extent {ho}x{wo} for input {h}x{w}")

    k, d, s, p = spec.kernel_size, spec.dilation, spec.stride, spec.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))

    windows = []
    cols = np.empty((b, c, k, k, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            window = (
                slice(i * d, i * d + s * (ho - 1) + 1, s),
                slice(j * d, j * d + s * (wo - 1) + 1, s),
            )
            windows.append((i, j, window))
            cols[:, :, i, j] = xp[:, :, window[0], window[1]]

    weight = spec.weight.data
    out = np.tensordot(cols, weight, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + spec.bias.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gb = g.sum(axis=(0, 2, 3))
        gcols = np.tensordot(weight, g, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i, j, window in windows:
            gxp[:, :, window[0], window[1]] += gcols[:, :, i, j]
        gx = gxp[:, :, p : p + h, p : p + w]
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), [x, spec.weight, spec.bias], backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        # subgradient 0 at x == 0
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), [x], backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    p = expit(x.data)
    # 1 - p without cancellation for large x
    q = expit(-x.data)

    def backward(g):
        return (g * p * q,)

    return _result(p, [x], backward, "sigmoid")


def _interp_matrix(n: int, factor: int) -> np.ndarray:
    """(n*factor, n) align-corners-false bilinear weights along one axis"""
    m = n * factor
    dst = np.arange(m)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    a = np.zeros((m, n), dtype=DTYPE)
    np.add.at(a, (dst, i0), 1.0 - lam)
    np.add.at(a, (dst, i1), lam)
    return a


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    _check_4d(x, "bilinear_upsample")
    if factor < 1:
        raise InvalidArgument(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _result(x.data.copy(), [x], lambda g: (g,), "bilinear_upsample")

    _, _, h, w = x.shape
    ah, aw = _interp_matrix(h, factor), _interp_matrix(w, factor)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return _result(out, [x], backward, "bilinear_upsample")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool")
    _, _, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3), keepdims=True), [x], backward, "global_avg_pool")


def expand_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Broadcast a (B, C, 1, 1) tensor to (B, C, height, width)"""
    _check_4d(x, "expand_spatial")
    if x.shape[2:] != (1, 1):
        raise InvalidArgument(f"expand_spatial expects 1x1 planes, got {x.shape}")
    b, c = x.shape[:2]

    def backward(g):
        return (g.sum(axis=(2, 3), keepdims=True),)

    out = np.broadcast_to(x.data, (b, c, height, width)).copy()
    return _result(out, [x], backward, "expand_spatial")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise InvalidArgument("concat_channels needs at least one tensor")
    for x in xs:
        _check_4d(x, "concat_channels")
    b, _, h, w = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (b, h, w):
            raise InvalidArgument(f"concat_channels mismatch: {xs[0].shape} vs {x.shape}")

    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    out = np.concatenate([x.data for x in xs], axis=1)
    return _result(out, list(xs), backward, "concat_channels")


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise InvalidArgument(f"add shape mismatch: {x.shape} vs {y.shape}")
    return _result(x.data + y.data, [x, y], lambda g: (g, g), "add")


def scale(x: Tensor, factor: float) -> Tensor:
    return _result(x.data * factor, [x], lambda g: (g * factor,), "scale")


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial window of a (B, C, H, W) tensor"""
    _check_4d(x, "crop")
    _, _, h, w = x.shape
    if top < 0 or left < 0 or height < 1 or width < 1 or top + height > h or left + width > w:
        raise InvalidArgument(
            f"crop window ({top}, {left}, {height}, {width}) outside a {h}x{w} tensor"
        )

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[:, :, top : top + height, left : left + width] = g
        return (gx,)

    out = x.data[:, :, top : top + height, left : left + width].copy()
    return _result(out, [x], backward, "crop")


def pad_bottom_right(x: Tensor, rows: int, cols: int) -> Tensor:
    """Zero-pad the bottom and right edges"""
    _check_4d(x, "pad_bottom_right")
    if rows < 0 or cols < 0:
        raise InvalidArgument("padding must be >= 0")
    _, _, h, w = x.shape

    def backward(g):
        return (g[:, :, :h, :w],)

    out = np.pad(x.data, ((0, 0), (0, 0), (0, rows), (0, cols)))
    return _result(out, [x], backward, "pad_bottom_right")


def focal_loss(
    logits: Tensor,
    target: Union[Tensor, np.ndarray],
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> Tensor:
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log(p_t), from logits.

    p_t is the sigmoid probability of the true class, alpha_t is alpha for
    foreground and 1 - alpha for background."""
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if y.shape != logits.shape:
        raise InvalidArgument(f"focal_loss target shape {y.shape} != logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgument("focal_loss target must be binary")
    if not 0 < alpha <= 1:
        raise InvalidArgument(f"focal_loss alpha must be in (0, 1], got {alpha}")
    if gamma < 0:
        raise InvalidArgument(f"focal_loss gamma must be >= 0, got {gamma}")

    sign = 2.0 * y - 1.0
    s = sign * logits.data
    p_t = expit(s)
    q_t = expit(-s)
    log_p_t = log_expit(s)
    alpha_t = np.where(y == 1, alpha, 1.0 - alpha)

    loss = -(alpha_t * q_t ** gamma * log_p_t).mean()
    n = logits.size

    def backward(g):
        d_s = gamma * p_t * q_t ** gamma * log_p_t - q_t ** (gamma + 1)
        return (g * alpha_t * sign * d_s / n,)

    return _result(np.array(loss), [logits], backward, "focal_loss")


def sgd_step(params: Sequence[Tensor], lr: float):
    """param <- param - lr * grad in place, then clear the grads: the next
    step needs a fresh backward"""
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name or p.shape} has no gradient")

    for p in params:
        p.data -= lr * p.grad
        p.zero_grad()


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = GRAD_CHECK_EPSILON,
    max_checks: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Worst relative error between the taped gradient of f at x and central
    finite differences. max_checks samples that many elements of x.
    Grads of other leaves touched by f are left accumulated."""
    saved_grad, saved_flag = x.grad, x.requires_grad
    x.grad, x.requires_grad = None, True
    try:
        with Tape() as tape:
            y = f(x)
        tape.backward(y)
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1)
    finally:
        x.grad, x.requires_grad = saved_grad, saved_flag

    flat = x.data.reshape(-1)
    positions = np.arange(flat.size)
    if max_checks is not None and max_checks < flat.size:
        rng = np.random.default_rng(seed)
        positions = np.sort(rng.choice(flat.size, size=max_checks, replace=False))

    worst = 0.0
    for i in positions:
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = f(x).item()
        flat[i] = orig - epsilon
        f_minus = f(x).item()
        flat[i] = orig

        numeric = (f_plus - f_minus) / (2 * epsilon)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)

    return worst


def save_checkpoint(named: Sequence[Tuple[str, Tensor]], path: str, extra: dict = None):
    """Writes <path>.json (names, shapes, byte offsets) and <path>.bin
    (little-endian float64 blob)"""
    entries = []
    offset = 0
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path + ".bin", "wb") as f:
        for name, t in named:
            blob = np.ascontiguousarray(t.data, dtype=_BLOB_DTYPE).tobytes()
            entries.append(
                {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)}
            )
            f.write(blob)
            offset += len(blob)

    manifest = {"dtype": "<f8", "tensors": entries, "extra": extra or {}}
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    LOG.d("saved %s tensors (%s bytes) to %s", len(entries), offset, path)


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    """Returns (name -> array, manifest extra)"""
    try:
        with open(path + ".json") as f:
            manifest = json.load(f)
        with open(path + ".bin", "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise DataError(f"checkpoint {path} not found: {e}")

    arrays = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(blob):
            raise DataError(f"checkpoint {path} is truncated at tensor {entry['name']}")
        data = np.frombuffer(blob[start : start + nbytes], dtype=_BLOB_DTYPE)
        arrays[entry["name"]] = data.reshape(entry["shape"]).astype(DTYPE)

    return arrays, manifest.get("extra", {})
