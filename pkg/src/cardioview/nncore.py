"""Minimal dense numerics with explicit forward/backward pairs.

Tensors are plain float64 numpy arrays (row-major). Every operation
validates shapes up front and checks its output for NaN/Inf, raising
:class:`NumericFault` on the first non-finite value, so training loops
fail loudly instead of drifting.

Backward functions take the upstream gradient plus whatever the forward
pass needed, and return exact analytic gradients. ``grad_check`` compares
any such pair against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericFault


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericFault(f"{name} produced a non-finite value")
    return arr


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (n, in), w: (in, out), b: (out,)."""
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"linear shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    return _finite("linear", x @ w + b)


def linear_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray):
    return g @ w.T, x.T @ g, g.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def leaky_relu(x: np.ndarray, alpha: float = 0.01) -> np.ndarray:
    # max(0, x) + alpha * min(0, x)
    return np.maximum(x, 0.0) + alpha * np.minimum(x, 0.0)


def leaky_relu_backward(g: np.ndarray, x: np.ndarray, alpha: float = 0.01) -> np.ndarray:
    return g * np.where(x > 0, 1.0, alpha)


def row_softmax(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis; rows sum to 1."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return _finite("row_softmax", e / e.sum(axis=-1, keepdims=True))


def row_softmax_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    # dL/dx_i = y_i * (g_i - sum_j g_j y_j)
    dot = (g * y).sum(axis=-1, keepdims=True)
    return y * (g - dot)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _finite("matmul", a @ b)


def matmul_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray):
    return g @ b.T, a.T @ g


def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel-mixing 1x1 convolution. x: (C_in, H, W), w: (C_in, C_out)."""
    if x.ndim != 3 or x.shape[0] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"conv1x1 shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    out = np.tensordot(w.T, x, axes=([1], [0])) + b[:, None, None]
    return _finite("conv1x1", out)


def conv1x1_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray):
    gx = np.tensordot(w, g, axes=([1], [0]))
    gw = np.tensordot(x, g, axes=([1, 2], [1, 2]))
    gb = g.sum(axis=(1, 2))
    return gx, gw, gb


def avg_pool2d(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Non-overlapping average pooling over (C, H, W); H, W must divide."""
    c, h, w = x.shape
    if h % kh or w % kw:
        raise ValueError(f"pool kernel ({kh},{kw}) does not divide ({h},{w})")
    return x.reshape(c, h // kh, kh, w // kw, kw).mean(axis=(2, 4))


def avg_pool2d_backward(g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    c, hh, ww = g.shape
    spread = np.broadcast_to(
        g[:, :, None, :, None] / (kh * kw), (c, hh, kh, ww, kw)
    )
    return spread.reshape(c, hh * kh, ww * kw).copy()


def upsample_nearest2d(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    c, h, w = x.shape
    rep = np.broadcast_to(x[:, :, None, :, None], (c, h, kh, w, kw))
    return rep.reshape(c, h * kh, w * kw).copy()


def upsample_nearest2d_backward(g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    c, h, w = g.shape
    if h % kh or w % kw:
        raise ValueError(f"upsample backward: ({h},{w}) not a multiple of ({kh},{kw})")
    return g.reshape(c, h // kh, kh, w // kw, kw).sum(axis=(2, 4))


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(xs, axis=0)


def split_channels(g: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    if sum(sizes) != g.shape[0]:
        raise ValueError("split sizes do not cover the channel axis")
    out = []
    start = 0
    for s in sizes:
        out.append(g[start:start + s])
        start += s
    return out


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradReport:
    max_rel_err: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _rel_err(a: float, n: float) -> float:
    scale = max(abs(a), abs(n))
    if scale < 1e-7:
        return 0.0
    return abs(a - n) / scale


def numeric_grad(f, x: np.ndarray, h: float = 1e-5,
                 max_coords: int = 10_000,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar-valued ``f`` at ``x``.

    Returns (flat coordinate indices, gradient estimates). Above
    ``max_coords`` coordinates a random subsample is used.
    """
    flat = x.reshape(-1)
    n = flat.size
    if n > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(gen.choice(n, size=max_coords, replace=False))
    else:
        idx = np.arange(n)
    grads = np.empty(idx.size)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        grads[k] = (up - down) / (2.0 * h)
    return idx, grads


def grad_check(forward, backward, arrays: list[np.ndarray],
               h: float = 1e-5, tolerance: float = 1e-4,
               max_coords: int = 10_000,
               rng: np.random.Generator | None = None) -> GradReport:
    """Verify an analytic backward pass against central differences.

    ``forward(*arrays)`` returns any-shaped output; ``backward(upstream,
    *arrays)`` returns one gradient per input array. The check contracts
    the output with a fixed random upstream so a single scalar is probed.
    """
    gen = rng if rng is not None else np.random.default_rng(0)
    out = forward(*arrays)
    upstream = gen.standard_normal(out.shape)

    def loss() -> float:
        return float((forward(*arrays) * upstream).sum())

    analytic = backward(upstream, *arrays)
    if not isinstance(analytic, (tuple, list)):
        analytic = (analytic,)
    if len(analytic) != len(arrays):
        raise ValueError("backward must return one gradient per input")

    worst = 0.0
    checked = 0
    for arr, grad in zip(arrays, analytic):
        idx, numeric = numeric_grad(loss, arr, h=h, max_coords=max_coords, rng=gen)
        flat_analytic = grad.reshape(-1)[idx]
        for a, nval in zip(flat_analytic, numeric):
            worst = max(worst, _rel_err(float(a), float(nval)))
        checked += idx.size
    return GradReport(max_rel_err=worst, n_checked=checked, tolerance=tolerance)


# ---------------------------------------------------------------------------
# weight serialization: JSON manifest + raw little-endian float64 blob
# ---------------------------------------------------------------------------

_WEIGHTS_FORMAT = "cardioview-weights-v1"


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_params(path, params: dict[str, np.ndarray]) -> None:
    """Write ``path`` (concatenated '<f8' blob) and ``path``.json (names and
    shapes, in order). Round-trips bit-exactly."""
    path = Path(path)
    manifest = {
        "format": _WEIGHTS_FORMAT,
        "dtype": "<f8",
        "params": [
            {"name": name, "shape": list(arr.shape)} for name, arr in params.items()
        ],
    }
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in params.values()
    )
    path.write_bytes(blob)
    _manifest_path(path).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        manifest = json.loads(_manifest_path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable weight manifest: {exc}") from exc
    if manifest.get("format") != _WEIGHTS_FORMAT or manifest.get("dtype") != "<f8":
        raise FormatError(f"{path}: unsupported weight manifest")
    blob = path.read_bytes()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: weight blob shorter than manifest")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        params[str(entry["name"])] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: weight blob longer than manifest")
    return params
