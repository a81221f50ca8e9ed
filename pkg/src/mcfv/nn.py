"""Dense MLP inference: Z-score input normalization, GeLU (exact or tabulated), fp32 and mixed fp16.

Mixed fp16 keeps weights and inter-layer activations in IEEE binary16, widens
them exactly to fp32 for the matrix product (fp32 accumulation), rounds the
layer output back to fp16 and applies an fp16-coefficient GeLU table.

Matrix products run through BLAS sgemm on fixed-height zero-padded row
tiles. Every tile has the same shape, so a sample's output does not depend
on which other samples share its batch.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

PRECISIONS = ("fp32", "mixed_fp16")
ACTIVATIONS = ("gelu_exact", "gelu_table")
TILE_ROWS = 64

GELU_LO = -3.0
GELU_HI = 3.0
GELU_STEP = 0.01
GELU_INTERVALS = 600

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class ModelError(ValueError):
    pass


def gelu_exact(x):
    """0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))) in double precision."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)))


def _gelu_f32(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float32, copy=False)
    c = np.float32(_SQRT_2_OVER_PI)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


# -- GeLU table --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GeluTable:
    """Piecewise quadratic GeLU on [lo, hi]; coefficients in local coordinate u in [0, 1].

    On interval k, y = c0 + u (c1 + u c2) with u = (x - x_k) / step.
    Outside the range, x < lo gives 0 and x > hi gives x.
    """
    coeffs: np.ndarray  # (intervals, 3)
    precision: str
    lo: float = GELU_LO
    hi: float = GELU_HI
    step: float = GELU_STEP

    @property
    def n_intervals(self) -> int:
        return len(self.coeffs)

    @property
    def knots(self) -> np.ndarray:
        return self.lo + np.arange(self.n_intervals + 1) * self.step

    def __call__(self, x):
        """Evaluate the table.

        The interval index and local coordinate are computed in the input's
        precision (at least fp32); the polynomial in the coefficient precision.
        """
        x = np.asarray(x)
        work = np.float64 if x.dtype == np.float64 else np.float32
        xs = x.astype(work)
        knots = self.knots.astype(work)
        k = np.floor((xs - work(self.lo)) / work(self.step)).astype(np.int64)
        k = np.clip(k, 0, self.n_intervals - 1)
        # exact-knot inputs must land on the left end of their own interval
        k = np.where((k + 1 < self.n_intervals) & (xs >= knots[np.minimum(k + 1, self.n_intervals)]), k + 1, k)
        k = np.where((k > 0) & (xs < knots[k]), k - 1, k)
        u = ((xs - knots[k]) / work(self.step))
        cdt = self.coeffs.dtype
        c = self.coeffs[k]
        u = u.astype(cdt)
        y = c[..., 0] + u * (c[..., 1] + u * c[..., 2])
        y = np.where(xs < work(self.lo), cdt.type(0), y)
        y = np.where(xs > work(self.hi), x.astype(cdt), y)
        return y.astype(cdt, copy=False)


def build_gelu_table(precision: str = "fp32") -> GeluTable:
    """Quadratic through exact GeLU at the left end, midpoint and right end of each interval."""
    dtype = {"fp32": np.float32, "fp16": np.float16}.get(precision)
    if dtype is None:
        raise ModelError(f"table precision must be fp32 or fp16, got {precision!r}")
    x0 = GELU_LO + np.arange(GELU_INTERVALS) * GELU_STEP
    x1 = GELU_LO + np.arange(1, GELU_INTERVALS + 1) * GELU_STEP
    g0 = gelu_exact(x0)
    gm = gelu_exact(0.5 * (x0 + x1))
    g1 = gelu_exact(x1)
    coeffs = np.stack([g0, -3.0 * g0 + 4.0 * gm - g1, 2.0 * g0 - 4.0 * gm + 2.0 * g1], axis=1)
    out = coeffs.astype(dtype)
    out.setflags(write=False)
    return GeluTable(out, precision)


_TABLES: dict[str, GeluTable] = {}


def gelu_table(precision: str) -> GeluTable:
    if precision not in _TABLES:
        _TABLES[precision] = build_gelu_table(precision)
    return _TABLES[precision]


# -- model -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MlpModel:
    """Weights are (out, in) fp32 arrays; in mixed_fp16 they hold fp16-representable values."""
    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    mean: np.ndarray
    std: np.ndarray
    precision: str = "fp32"
    activation: str = "gelu_table"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ModelError(f"invalid layer dims {dims}")
        if self.precision not in PRECISIONS:
            raise ModelError(f"unknown precision {self.precision!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ModelError("need one weight matrix and bias per layer")
        ws, bs = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.ascontiguousarray(w, dtype=np.float32)
            b = np.ascontiguousarray(b, dtype=np.float32)
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ModelError(f"layer {i}: weight {w.shape} / bias {b.shape} inconsistent with dims")
            if self.precision == "mixed_fp16":
                w = w.astype(np.float16).astype(np.float32)
                b = b.astype(np.float16).astype(np.float32)
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        if mean.shape != (dims[0],) or std.shape != (dims[0],):
            raise ModelError("normalization statistics must have one entry per input feature")
        if not np.all(std > 0):
            raise ModelError("normalization stddevs must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def flops_per_sample(self) -> int:
        return sum(2 * m * n for m, n in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def with_precision(self, precision: str, activation: Optional[str] = None) -> MlpModel:
        return replace(self, precision=precision, activation=activation or self.activation)


def random_model(layer_dims: Sequence[int], seed: int = 0, precision: str = "fp32",
                 activation: str = "gelu_table") -> MlpModel:
    """Seeded model with N(0, 1/fan_in) weights, small biases and random normalization stats."""
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in layer_dims]
    ws, bs = [], []
    for m, n in zip(dims[:-1], dims[1:]):
        ws.append((rng.standard_normal((n, m), dtype=np.float32) / np.float32(np.sqrt(m))))
        bs.append(rng.uniform(-0.1, 0.1, n).astype(np.float32))
    mean = rng.standard_normal(dims[0]).astype(np.float32)
    std = rng.uniform(0.5, 2.0, dims[0]).astype(np.float32)
    return MlpModel(tuple(dims), tuple(ws), tuple(bs), mean, std, precision, activation)


# -- inference -----------------------------------------------------------------------

@dataclass
class InferenceResult:
    outputs: np.ndarray  # float32 (batch, out)
    flops: int


def _tiled_matmul(h: np.ndarray, wt: np.ndarray) -> np.ndarray:
    """h @ wt in fp32, in fixed-shape tiles so each row's result is batch independent."""
    b = h.shape[0]
    out = np.empty((b, wt.shape[1]), dtype=np.float32)
    tile = np.zeros((TILE_ROWS, h.shape[1]), dtype=np.float32)
    for s in range(0, b, TILE_ROWS):
        e = min(s + TILE_ROWS, b)
        tile[: e - s] = h[s:e]
        tile[e - s:] = 0.0
        out[s:e] = (tile @ wt)[: e - s]
    return out


def normalize(model: MlpModel, inputs) -> np.ndarray:
    """Z-score the inputs with the model's stored statistics, in fp32."""
    x = np.asarray(inputs)
    return (x.astype(np.float32) - model.mean) / model.std


def infer(model: MlpModel, inputs, precision: Optional[str] = None,
          activation: Optional[str] = None) -> InferenceResult:
    """Forward pass; ``precision``/``activation`` override the model's defaults.

    The last layer has no activation. Outputs are returned as fp32 (exactly
    representable in fp16 in mixed mode).
    """
    precision = precision or model.precision
    activation = activation or model.activation
    if precision not in PRECISIONS:
        raise ModelError(f"unknown precision {precision!r}")
    if activation not in ACTIVATIONS:
        raise ModelError(f"unknown activation {activation!r}")
    x = np.asarray(inputs)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ModelError(f"input width {x.shape[-1]} does not match model input {model.layer_dims[0]}")
    if not np.all(np.isfinite(x)):
        raise ModelError("inputs must be finite")
    half = precision == "mixed_fp16"
    h = normalize(model, x)
    if half:
        h = h.astype(np.float16).astype(np.float32)
        weights = [w.astype(np.float16).astype(np.float32) for w in model.weights]
        biases = [b.astype(np.float16).astype(np.float32) for b in model.biases]
        table = gelu_table("fp16")
    else:
        weights, biases = model.weights, model.biases
        table = gelu_table("fp32")
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = _tiled_matmul(h, w.T)
        h += b
        if half:
            h = h.astype(np.float16)
        if i < last:
            if activation == "gelu_table":
                h = table(h)
            elif half:
                h = _gelu_f32(h.astype(np.float32)).astype(np.float16)
            else:
                h = _gelu_f32(h)
        h = h.astype(np.float32)
    return InferenceResult(h, len(x) * model.flops_per_sample())


def relative_errors(reference: np.ndarray, approx: np.ndarray) -> np.ndarray:
    """Per-sample ||approx - reference||_2 / ||reference||_2."""
    ref = np.asarray(reference, dtype=np.float64)
    diff = np.asarray(approx, dtype=np.float64) - ref
    return np.linalg.norm(diff, axis=1) / np.maximum(np.linalg.norm(ref, axis=1), np.finfo(float).tiny)


# -- model files -------------------------------------------------------------------

MAGIC = b"MCNN"
VERSION = 1
_PREC_CODE = {"fp32": 0, "mixed_fp16": 1}


def save_model(model: MlpModel, path: str | os.PathLike) -> None:
    """MCNN, version u32, precision u8, layer count u32, dims u32[L+1], mean/std f32, then W, b per layer."""
    wdt = "<f2" if model.precision == "mixed_fp16" else "<f4"
    parts = [MAGIC, struct.pack("<IBI", VERSION, _PREC_CODE[model.precision], model.n_layers),
             np.asarray(model.layer_dims, dtype="<u4").tobytes(),
             model.mean.astype("<f4").tobytes(), model.std.astype("<f4").tobytes()]
    for w, b in zip(model.weights, model.biases):
        parts.append(w.astype(wdt).tobytes())
        parts.append(b.astype(wdt).tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as e:
        raise OSError(f"cannot write model {path}: {e}") from e


def load_model(path: str | os.PathLike, activation: str = "gelu_table") -> MlpModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 13 or data[:4] != MAGIC:
        raise ModelError(f"{path}: not a model file (bad magic)")
    version, pcode, n_layers = struct.unpack_from("<IBI", data, 4)
    if version != VERSION:
        raise ModelError(f"{path}: unsupported model version {version}")
    codes = {v: k for k, v in _PREC_CODE.items()}
    if pcode not in codes:
        raise ModelError(f"{path}: unknown precision code {pcode}")
    precision = codes[pcode]
    off = 13
    need = off + 4 * (n_layers + 1)
    if len(data) < need:
        raise ModelError(f"{path}: truncated header")
    dims = np.frombuffer(data, "<u4", n_layers + 1, off).astype(int)
    off = need
    wdt = np.dtype("<f2" if precision == "mixed_fp16" else "<f4")
    total = off + 8 * dims[0] + wdt.itemsize * sum(int(m) * int(n) + int(n) for m, n in zip(dims[:-1], dims[1:]))
    if len(data) != total:
        raise ModelError(f"{path}: expected {total} bytes, found {len(data)} (truncated or corrupt)")
    mean = np.frombuffer(data, "<f4", dims[0], off)
    std = np.frombuffer(data, "<f4", dims[0], off + 4 * dims[0])
    off += 8 * dims[0]
    ws, bs = [], []
    for m, n in zip(dims[:-1], dims[1:]):
        ws.append(np.frombuffer(data, wdt, m * n, off).reshape(n, m).astype(np.float32))
        off += wdt.itemsize * m * n
        bs.append(np.frombuffer(data, wdt, n, off).astype(np.float32))
        off += wdt.itemsize * n
    return MlpModel(tuple(dims), tuple(ws), tuple(bs), mean.copy(), std.copy(), precision, activation)
