"""Layer specs, shape inference, and hand-written forward/backward passes.

Three layer kinds cover both tables: strided convolution, transposed
convolution ("deconv") and fully connected. Each layer is
``activation(batchnorm?(linear(x)))``. Layers with batch norm carry no
bias (it would be cancelled by the mean subtraction).

Parameter names follow ``layer{n}.{conv|deconv|fc}.{weight|bias}`` and
``layer{n}.bn.{gamma|beta|running_mean|running_var}`` where ``n`` is the
1-based row number of the architecture table.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .tensor import DEFAULT_DTYPE, ShapeError, check_shape

KINDS = ("conv", "deconv", "fully_connected")
PADDINGS = ("same", "valid")
ACTIVATIONS = ("relu", "sigmoid", "tanh", "none")

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_PARAM_TAG = {"conv": "conv", "deconv": "deconv", "fully_connected": "fc"}


class InfeasibleArchitecture(ShapeError):
    def __init__(self, layer: int, message: str):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: str = "valid"
    batch_norm: bool = False
    activation: str = "none"
    # printed (H, W, C) for linting; not used for computation
    printed_output: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.padding not in PADDINGS:
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.out_channels < 1 or self.stride < 1 or min(self.kernel) < 1:
            raise ValueError(f"non-positive extent in {self}")

    @property
    def has_bias(self) -> bool:
        return not self.batch_norm

    def to_json(self) -> dict:
        d = {"kind": self.kind, "kernel": list(self.kernel), "out_channels": self.out_channels,
             "stride": self.stride, "padding": self.padding, "batch_norm": self.batch_norm,
             "activation": self.activation}
        if self.printed_output is not None:
            d["printed_output"] = list(self.printed_output)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        allowed = {"kind", "kernel", "out_channels", "stride", "padding", "batch_norm",
                   "activation", "printed_output"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown layer keys {sorted(unknown)}")
        kernel = tuple(d.get("kernel", (1, 1)))
        if len(kernel) != 2:
            raise ValueError(f"kernel must be [h, w], got {d.get('kernel')}")
        printed = d.get("printed_output")
        return cls(kind=d["kind"], out_channels=int(d["out_channels"]), kernel=kernel,
                   stride=int(d.get("stride", 1)), padding=d.get("padding", "valid"),
                   batch_norm=bool(d.get("batch_norm", False)),
                   activation=d.get("activation", "none"),
                   printed_output=tuple(printed) if printed is not None else None)


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: tuple[int, ...]  # (C, H, W) for images, (D,) for flat input
    layers: tuple[LayerSpec, ...]
    first_index: int = 1  # table row number of layers[0]

    def layer_numbers(self) -> range:
        return range(self.first_index, self.first_index + len(self.layers))

    def to_json(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [l.to_json() for l in self.layers],
                **({"first_index": self.first_index} if self.first_index != 1 else {})}

    @classmethod
    def from_json(cls, d: dict) -> "ArchitectureSpec":
        unknown = set(d) - {"name", "input_shape", "layers", "first_index", "note"}
        if unknown:
            raise ValueError(f"unknown architecture keys {sorted(unknown)}")
        return cls(name=d["name"], input_shape=check_shape(d["input_shape"]),
                   layers=tuple(LayerSpec.from_json(l) for l in d["layers"]),
                   first_index=int(d.get("first_index", 1)))

    def sub(self, start: int, stop: int, input_shape: tuple[int, ...]) -> "ArchitectureSpec":
        """Layers numbered ``start..stop`` inclusive, fed by ``input_shape``."""
        lo, hi = start - self.first_index, stop - self.first_index + 1
        return ArchitectureSpec(f"{self.name}[{start}:{stop}]", tuple(input_shape),
                                self.layers[lo:hi], first_index=start)


def load_architecture(path: str | Path) -> ArchitectureSpec:
    with open(path, encoding="utf-8") as f:
        return ArchitectureSpec.from_json(json.load(f))


def builtin_spec_path(name: str) -> Path:
    return Path(__file__).parent / "specs" / f"{name}.json"


def load_builtin(name: str) -> ArchitectureSpec:
    """One of table1_generator, table2_discriminator, desk_generator, desk_discriminator."""
    return load_architecture(builtin_spec_path(name))


# ---------------------------------------------------------------- shapes

def _conv_out(n: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-n // s)
    return (n - k) // s + 1 if n >= k else 0


def _deconv_out(n: int, k: int, s: int, padding: str) -> int:
    return n * s if padding == "same" else (n - 1) * s + k


def layer_output_shape(spec: LayerSpec, in_shape: tuple[int, ...], layer: int) -> tuple[int, ...]:
    """Single-example output shape: (C, H, W) for spatial layers, (D,) for FC."""
    if spec.kind == "fully_connected":
        return (spec.out_channels,)
    if len(in_shape) != 3:
        raise InfeasibleArchitecture(layer, f"{spec.kind} needs a C x H x W input, got {in_shape}")
    _, h, w = in_shape
    (kh, kw), s = spec.kernel, spec.stride
    if spec.kind == "conv":
        oh, ow = _conv_out(h, kh, s, spec.padding), _conv_out(w, kw, s, spec.padding)
    else:
        oh, ow = _deconv_out(h, kh, s, spec.padding), _deconv_out(w, kw, s, spec.padding)
    if oh < 1 or ow < 1:
        raise InfeasibleArchitecture(
            layer, f"{spec.kind} {kh}x{kw}/{s} {spec.padding} on {h}x{w} gives {oh}x{ow}")
    return (spec.out_channels, oh, ow)


def infer_shapes(arch: ArchitectureSpec, batch: int = 1) -> list[tuple[int, ...]]:
    """Per-layer output shapes with a leading batch dimension."""
    shape = tuple(arch.input_shape)
    out = []
    for n, spec in zip(arch.layer_numbers(), arch.layers):
        shape = layer_output_shape(spec, shape, n)
        out.append((batch, *shape))
    return out


def output_shape(arch: ArchitectureSpec) -> tuple[int, ...]:
    return infer_shapes(arch, 1)[-1][1:]


def _as_hwc(shape: tuple[int, ...]) -> tuple[int, ...]:
    return (shape[1], shape[2], shape[0]) if len(shape) == 3 else (shape[0], 1)


@dataclass
class ShapeRow:
    layer: int
    inferred_hwc: tuple[int, ...] | None
    printed_hwc: tuple[int, ...] | None
    ok: bool
    message: str = ""


def lint_architecture(arch: ArchitectureSpec) -> list[ShapeRow]:
    """Compare inferred shapes with the printed sizes recorded in the spec.

    Shapes are reported as H x W x C (the tables' convention). When a layer
    is infeasible, the diagnostic is recorded and inference resumes from the
    printed size so later rows are still checked.
    """
    rows = []
    shape = tuple(arch.input_shape)
    for n, spec in zip(arch.layer_numbers(), arch.layers):
        printed = spec.printed_output
        try:
            shape = layer_output_shape(spec, shape, n)
        except InfeasibleArchitecture as e:
            rows.append(ShapeRow(n, None, printed, False, f"infeasible: {e}"))
            if printed is None:
                break
            shape = (printed[2], printed[0], printed[1]) if len(printed) == 3 else (printed[0],)
            continue
        hwc = _as_hwc(shape)
        if printed is None:
            rows.append(ShapeRow(n, hwc, None, True))
        elif tuple(printed) == hwc:
            rows.append(ShapeRow(n, hwc, tuple(printed), True))
        else:
            rows.append(ShapeRow(n, hwc, tuple(printed), False,
                                 f"inferred {'x'.join(map(str, hwc))} but printed "
                                 f"{'x'.join(map(str, printed))}"))
    return rows


# ---------------------------------------------------------------- params

@dataclass
class ParamSet:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    trainable: dict[str, bool] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, trainable: bool = True):
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name}")
        self.entries[name] = value
        self.trainable[name] = trainable

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.entries.items()}, dict(self.trainable))

    def prefixed(self, prefix: str) -> "ParamSet":
        return ParamSet({prefix + k: v for k, v in self.entries.items()},
                        {prefix + k: t for k, t in self.trainable.items()})

    def strip(self, prefix: str) -> "ParamSet":
        """Entries under ``prefix`` with the prefix removed (arrays shared)."""
        n = len(prefix)
        return ParamSet({k[n:]: v for k, v in self.entries.items() if k.startswith(prefix)},
                        {k[n:]: t for k, t in self.trainable.items() if k.startswith(prefix)})

    def update(self, other: "ParamSet"):
        self.entries.update(other.entries)
        self.trainable.update(other.trainable)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: v.astype(dtype) for k, v in self.entries.items()}, dict(self.trainable))


def layer_param_shapes(spec: LayerSpec, in_shape: tuple[int, ...], n: int) -> dict[str, tuple]:
    tag = f"layer{n}.{_PARAM_TAG[spec.kind]}"
    kh, kw = spec.kernel
    if spec.kind == "conv":
        shapes = {f"{tag}.weight": (spec.out_channels, in_shape[0], kh, kw)}
    elif spec.kind == "deconv":
        shapes = {f"{tag}.weight": (in_shape[0], spec.out_channels, kh, kw)}
    else:
        shapes = {f"{tag}.weight": (math.prod(in_shape), spec.out_channels)}
    if spec.has_bias:
        shapes[f"{tag}.bias"] = (spec.out_channels,)
    else:
        for p in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"layer{n}.bn.{p}"] = (spec.out_channels,)
    return shapes


def param_shapes(arch: ArchitectureSpec) -> dict[str, tuple]:
    shapes = {}
    in_shape = tuple(arch.input_shape)
    for n, spec in zip(arch.layer_numbers(), arch.layers):
        shapes.update(layer_param_shapes(spec, in_shape, n))
        in_shape = layer_output_shape(spec, in_shape, n)
    return shapes


def _fan_in(spec: LayerSpec, wshape: tuple) -> int:
    if spec.kind == "conv":
        return wshape[1] * wshape[2] * wshape[3]
    if spec.kind == "deconv":
        return wshape[0] * wshape[2] * wshape[3]
    return wshape[0]


def init_params(arch: ArchitectureSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> ParamSet:
    """He-normal weights (stddev sqrt(2/fan_in)), zero bias, identity batch norm."""
    params = ParamSet()
    in_shape = tuple(arch.input_shape)
    for n, spec in zip(arch.layer_numbers(), arch.layers):
        for name, shape in layer_param_shapes(spec, in_shape, n).items():
            leaf = name.rsplit(".", 1)[1]
            if leaf == "weight":
                std = math.sqrt(2.0 / _fan_in(spec, shape))
                value = (rng.standard_normal(shape) * std).astype(dtype)
            elif leaf in ("gamma", "running_var"):
                value = np.ones(shape, dtype)
            else:
                value = np.zeros(shape, dtype)
            params.add(name, value, trainable=not leaf.startswith("running_"))
        in_shape = layer_output_shape(spec, in_shape, n)
    return params


# ---------------------------------------------------------------- kernels

def _same_pads(in_size: int, k: int, s: int, out: int) -> tuple[int, int]:
    total = max((out - 1) * s + k - in_size, 0)
    return total // 2, total - total // 2


def conv_pads(spec: LayerSpec, in_hw: tuple[int, int], out_hw: tuple[int, int]):
    """(top, bottom, left, right) zero padding of the convolution relating
    a ``in_hw`` map to an ``out_hw`` map. Odd padding goes bottom/right."""
    if spec.padding == "valid":
        return 0, 0, 0, 0
    kh, kw = spec.kernel
    return (*_same_pads(in_hw[0], kh, spec.stride, out_hw[0]),
            *_same_pads(in_hw[1], kw, spec.stride, out_hw[1]))


def _im2col(x, kernel, stride, pads, out_hw):
    """Patches of ``x`` as N x (C*kh*kw) x (OH*OW)."""
    n, c = x.shape[:2]
    (kh, kw), (oh, ow) = kernel, out_hw
    if any(pads):
        pt, pb, pl, pr = pads
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * (oh - 1) + 1:stride,
                                 j:j + stride * (ow - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, channels, kernel, stride, pads, in_hw, out_hw):
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the image."""
    n = cols.shape[0]
    (kh, kw), (oh, ow) = kernel, out_hw
    pt, pb, pl, pr = pads
    cols = cols.reshape(n, channels, kh, kw, oh, ow)
    buf = np.zeros((n, channels, in_hw[0] + pt + pb, in_hw[1] + pl + pr), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += cols[:, :, i, j]
    return buf[:, :, pt:pt + in_hw[0], pl:pl + in_hw[1]]


def conv2d(x, w, stride, pads, out_hw, cols=None):
    """x: N x Cin x H x W, w: Cout x Cin x kh x kw -> N x Cout x OH x OW."""
    if cols is None:
        cols = _im2col(x, w.shape[2:], stride, pads, out_hw)
    y = np.matmul(w.reshape(w.shape[0], -1), cols)
    return y.reshape(x.shape[0], w.shape[0], *out_hw)


def conv2d_adjoint(g, w, stride, pads, in_hw):
    """Adjoint of :func:`conv2d` with respect to its input."""
    n, cout = g.shape[:2]
    cols = np.matmul(w.reshape(cout, -1).T, g.reshape(n, cout, -1))
    return _col2im(cols, w.shape[1], w.shape[2:], stride, pads, in_hw, g.shape[2:])


def conv2d_weight_grad(x, g, kernel, stride, pads, cols=None):
    """d<conv2d(x, w), g>/dw, shape Cout x Cin x kh x kw."""
    if cols is None:
        cols = _im2col(x, kernel, stride, pads, g.shape[2:])
    n, cout = g.shape[:2]
    dw = np.tensordot(g.reshape(n, cout, -1), cols, axes=([0, 2], [0, 2]))
    return dw.reshape(cout, x.shape[1], *kernel)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    return z


def activate_backward(kind: str, z: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return g * (z > 0)
    if kind == "sigmoid":
        return g * y * (1 - y)
    if kind == "tanh":
        return g * (1 - y * y)
    return g


# ---------------------------------------------------------------- layers

def _bn_axes(ndim: int):
    return (0, 2, 3) if ndim == 4 else (0,)


def _bcast(v, ndim):
    return v.reshape(1, -1, 1, 1) if ndim == 4 else v.reshape(1, -1)


def layer_forward(spec: LayerSpec, params: ParamSet, x: np.ndarray, training: bool, n: int = 1,
                  update_running: bool = True) -> tuple[np.ndarray, dict]:
    """Forward one layer numbered ``n``. Returns (output, cache).

    Batch norm uses batch statistics when ``training`` and running
    statistics otherwise; running statistics move with momentum only in
    training mode.
    """
    tag = f"layer{n}.{_PARAM_TAG[spec.kind]}"
    w = params[f"{tag}.weight"]
    cache: dict[str, Any] = {"x": x}
    if spec.kind == "fully_connected":
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != w.shape[0]:
            raise ShapeError(f"layer {n}: expected {w.shape[0]} input features, got {flat.shape[1]}")
        z = flat @ w
    else:
        if x.ndim != 4 or x.shape[1] != (w.shape[1] if spec.kind == "conv" else w.shape[0]):
            raise ShapeError(f"layer {n}: input {x.shape} does not match weight {w.shape}")
        out_hw = layer_output_shape(spec, x.shape[1:], n)[1:]
        if spec.kind == "conv":
            pads = conv_pads(spec, x.shape[2:], out_hw)
            cache["cols"] = _im2col(x, spec.kernel, spec.stride, pads, out_hw)
            z = conv2d(x, w, spec.stride, pads, out_hw, cache["cols"])
        else:
            pads = conv_pads(spec, out_hw, x.shape[2:])
            z = conv2d_adjoint(x, w, spec.stride, pads, out_hw)
        cache["pads"] = pads
    if spec.has_bias:
        z = z + _bcast(params[f"{tag}.bias"], z.ndim)
    else:
        gamma, beta = params[f"layer{n}.bn.gamma"], params[f"layer{n}.bn.beta"]
        axes = _bn_axes(z.ndim)
        if training:
            count = z.size // z.shape[1]
            if z.shape[0] < 2:
                raise ShapeError(f"layer {n}: batch norm in training mode needs batch size >= 2")
            mean = z.mean(axis=axes)
            var = z.var(axis=axes)
            if update_running:
                rm, rv = f"layer{n}.bn.running_mean", f"layer{n}.bn.running_var"
                # in place: parameter views held by composite models share these arrays
                params[rm][...] = BN_MOMENTUM * params[rm] + (1 - BN_MOMENTUM) * mean
                params[rv][...] = BN_MOMENTUM * params[rv] + (1 - BN_MOMENTUM) * var
        else:
            mean, var, count = params[f"layer{n}.bn.running_mean"], params[f"layer{n}.bn.running_var"], None
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - _bcast(mean, z.ndim)) * _bcast(inv_std, z.ndim)
        cache.update(xhat=xhat, inv_std=inv_std, bn_training=training)
        z = xhat * _bcast(gamma, z.ndim) + _bcast(beta, z.ndim)
    y = activate(spec.activation, z)
    cache.update(pre=z, y=y)
    return y, cache


def layer_backward(spec: LayerSpec, params: ParamSet, cache: dict | None, grad_out: np.ndarray,
                   n: int = 1, need_input_grad: bool = True) -> tuple[np.ndarray | None, dict]:
    if not cache:
        raise ValueError(f"layer {n}: backward called without a forward cache")
    tag = f"layer{n}.{_PARAM_TAG[spec.kind]}"
    grads = {}
    g = activate_backward(spec.activation, cache["pre"], cache["y"], grad_out)
    if spec.has_bias:
        grads[f"{tag}.bias"] = g.sum(axis=_bn_axes(g.ndim))
    else:
        axes = _bn_axes(g.ndim)
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        gamma = params[f"layer{n}.bn.gamma"]
        grads[f"layer{n}.bn.beta"] = g.sum(axis=axes)
        grads[f"layer{n}.bn.gamma"] = (g * xhat).sum(axis=axes)
        gx = g * _bcast(gamma, g.ndim)
        if cache["bn_training"]:
            m = g.size // g.shape[1]
            gx = _bcast(inv_std, g.ndim) / m * (
                m * gx - _bcast(gx.sum(axis=axes), g.ndim)
                - xhat * _bcast((gx * xhat).sum(axis=axes), g.ndim))
        else:
            gx = gx * _bcast(inv_std, g.ndim)
        g = gx
    x, w = cache["x"], params[f"{tag}.weight"]
    if spec.kind == "fully_connected":
        flat = x.reshape(x.shape[0], -1)
        grads[f"{tag}.weight"] = flat.T @ g
        gin = (g @ w.T).reshape(x.shape) if need_input_grad else None
    elif spec.kind == "conv":
        pads = cache["pads"]
        grads[f"{tag}.weight"] = conv2d_weight_grad(x, g, spec.kernel, spec.stride, pads, cache["cols"])
        gin = conv2d_adjoint(g, w, spec.stride, pads, x.shape[2:]) if need_input_grad else None
    else:
        pads = cache["pads"]
        # y = conv^T(x)  =>  dW from the conv weight-gradient rule with roles swapped
        gcols = _im2col(g, spec.kernel, spec.stride, pads, x.shape[2:])
        grads[f"{tag}.weight"] = conv2d_weight_grad(g, x, spec.kernel, spec.stride, pads, gcols)
        gin = conv2d(g, w, spec.stride, pads, x.shape[2:], gcols) if need_input_grad else None
    return gin, grads


# ---------------------------------------------------------------- networks

def forward(arch: ArchitectureSpec, params: ParamSet, x: np.ndarray, training: bool,
            update_running: bool = True) -> tuple[np.ndarray, list[dict]]:
    if tuple(x.shape[1:]) != tuple(arch.input_shape) and not (
            len(arch.input_shape) == 1 and math.prod(x.shape[1:]) == arch.input_shape[0]):
        raise ShapeError(f"{arch.name}: input {x.shape[1:]} does not match {arch.input_shape}")
    caches = []
    for n, spec in zip(arch.layer_numbers(), arch.layers):
        x, cache = layer_forward(spec, params, x, training, n, update_running)
        caches.append(cache)
    return x, caches


def backward(arch: ArchitectureSpec, params: ParamSet, caches: list[dict], grad_out: np.ndarray,
             need_input_grad: bool = True) -> tuple[np.ndarray | None, dict]:
    if len(caches) != len(arch.layers):
        raise ValueError(f"{arch.name}: cache has {len(caches)} layers, spec has {len(arch.layers)}")
    grads = {}
    g = grad_out
    numbers = list(arch.layer_numbers())
    for i in reversed(range(len(arch.layers))):
        need = need_input_grad or i > 0
        g, lg = layer_backward(arch.layers[i], params, caches[i], g, numbers[i], need)
        grads.update(lg)
    return g, grads


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    kinks_skipped: int
    worst: str = ""


def rel_error(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def _default_input_shape(spec: LayerSpec) -> tuple[int, ...]:
    if spec.kind == "fully_connected":
        return (6,)
    if spec.kind == "deconv":
        return (2, 3, 3)
    return (2, 5, 5)


def gradient_check(spec: LayerSpec, seed: int, input_shape: Iterable[int] | None = None,
                   batch: int | None = None, h: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic and central-difference gradients on a random float64
    instance. The probe loss is ``sum(R * layer(x))`` for a fixed random R.

    Coordinates whose perturbation flips a ReLU gate are skipped: the
    finite difference straddles the kink there and is not a derivative.
    """
    rng = np.random.default_rng(seed)
    in_shape = tuple(input_shape) if input_shape is not None else _default_input_shape(spec)
    batch = batch or (4 if spec.batch_norm else 2)
    arch = ArchitectureSpec("gradcheck", in_shape, (spec,))
    params = init_params(arch, rng, np.float64)
    # batch norm is invariant to input and weight scale; large scales flatten
    # its curvature so h=1e-3 differences stay accurate. Without it, small
    # inputs keep sigmoid out of its high-curvature region.
    x_scale = 3.0 if spec.batch_norm else 0.5
    for name in params.names():
        shape = params[name].shape
        if name.endswith(".weight") and spec.batch_norm:
            params.entries[name] *= 10.0
        elif name.endswith(".gamma"):
            params.entries[name] = rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape)
        elif name.endswith((".beta", ".bias")):
            params.entries[name] = rng.normal(0.0, 0.5, shape)
    x = rng.standard_normal((batch, *in_shape)) * x_scale
    y, cache = layer_forward(spec, params, x, True, 1, update_running=False)
    r = rng.standard_normal(y.shape)
    gin, grads = layer_backward(spec, params, cache, r, 1)
    gate = cache["pre"] > 0

    def probe(xv):
        out, c = layer_forward(spec, params, xv, True, 1, update_running=False)
        flipped = spec.activation == "relu" and bool(np.any((c["pre"] > 0) != gate))
        return float(np.sum(out * r)), flipped

    worst, worst_name, checked, kinks = 0.0, "", 0, 0
    targets = [("input", x, gin)] + [(k, params.entries[k], grads[k]) for k in grads]
    for name, arr, analytic in targets:
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp, kp = probe(x)
            arr[idx] = old - h
            fm, km = probe(x)
            arr[idx] = old
            if kp or km:
                kinks += 1
                continue
            numeric = (fp - fm) / (2 * h)
            err = float(rel_error(analytic[idx], numeric))
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}{list(idx)}"
    return GradCheckReport(worst, worst < tol, checked, kinks, worst_name)
