"""Minimal differentiable layer kernel on NumPy.

The kernel covers exactly the layer kinds the diagnosis model needs
(``conv1d``, ``conv2d``, ``maxpool``, ``dense``, ``relu``, ``sigmoid``,
``flatten``, ``concat``).  A :class:`Network` is a static DAG of
:class:`LayerSpec` nodes whose shapes are inferred at build time.  Parameters
live outside the network in a :class:`ParamSet`, so the same network object
can be evaluated with the parameters of any federated agent.

Arrays are batch-first: 1-d feature maps are ``(B, C, L)``, 2-d maps are
``(B, C, H, W)`` and dense activations ``(B, D)``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import StructuralError, TrainingError, UsageError

DTYPE = np.float32

LAYER_KINDS = ("conv1d", "conv2d", "maxpool", "dense", "relu", "sigmoid", "flatten", "concat")
COMMON = "common"


def head_tag(task: int) -> str:
    return f"head:{task}"


# ---------------------------------------------------------------------------
# Parameter sets
# ---------------------------------------------------------------------------


class ParamSet:
    """Ordered mapping of named arrays, each tagged with a partition.

    The partition tag is ``"common"`` for the shared feature extractor and
    ``"head:<i>"`` for the classification head of task ``i``.  ParamSets are
    value objects: :meth:`copy` is used whenever parameters cross an
    agent/server boundary.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None,
                 tags: Mapping[str, str] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        self._tags: dict[str, str] = {}
        self.version = 0
        arrays = arrays or {}
        tags = tags or {}
        for name, arr in arrays.items():
            if name not in tags:
                raise StructuralError(f"parameter {name!r} has no partition tag")
            self.add(name, arr, tags[name])

    def add(self, name: str, array: np.ndarray, tag: str) -> None:
        if name in self._arrays:
            raise StructuralError(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.asarray(array)
        self._tags[name] = tag

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._arrays:
            raise StructuralError(f"unknown parameter {name!r}")
        if np.shape(value) != self._arrays[name].shape:
            raise StructuralError(
                f"shape mismatch for {name!r}: {np.shape(value)} vs {self._arrays[name].shape}")
        self._arrays[name] = np.asarray(value)
        self.version += 1

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def tag(self, name: str) -> str:
        return self._tags[name]

    @property
    def tags(self) -> dict[str, str]:
        return dict(self._tags)

    @property
    def num_params(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def structure(self) -> tuple[tuple[str, str, tuple[int, ...]], ...]:
        return tuple((n, self._tags[n], self._arrays[n].shape) for n in self._arrays)

    def copy(self) -> "ParamSet":
        return ParamSet({n: a.copy() for n, a in self._arrays.items()}, self._tags)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({n: a.astype(dtype) for n, a in self._arrays.items()}, self._tags)

    def select(self, predicate: Callable[[str], bool]) -> "ParamSet":
        """Sub-ParamSet (copied) of arrays whose tag satisfies ``predicate``."""
        names = [n for n in self._arrays if predicate(self._tags[n])]
        return ParamSet({n: self._arrays[n].copy() for n in names},
                        {n: self._tags[n] for n in names})

    def common(self) -> "ParamSet":
        return self.select(lambda t: t == COMMON)

    def heads(self) -> "ParamSet":
        return self.select(lambda t: t.startswith("head:"))

    def load(self, other: "ParamSet") -> None:
        """Overwrite the arrays named in ``other`` (copying values in)."""
        for name, arr in other.items():
            if name not in self._arrays:
                raise StructuralError(f"unknown parameter {name!r}")
            if self._tags[name] != other.tag(name):
                raise StructuralError(f"partition tag mismatch for {name!r}")
            self[name] = arr.astype(self._arrays[name].dtype, copy=True)

    @staticmethod
    def combine(*parts: "ParamSet") -> "ParamSet":
        out = ParamSet()
        for part in parts:
            for name, arr in part.items():
                out.add(name, arr.copy(), part.tag(name))
        return out

    def flatten(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def unflatten(self, vector: np.ndarray) -> "ParamSet":
        """New ParamSet with this structure and values taken from ``vector``."""
        vector = np.asarray(vector)
        if vector.size != self.num_params:
            raise StructuralError(f"vector has {vector.size} values, expected {self.num_params}")
        out, pos = ParamSet(), 0
        for name, arr in self._arrays.items():
            out.add(name, vector[pos:pos + arr.size].reshape(arr.shape).astype(arr.dtype),
                    self._tags[name])
            pos += arr.size
        return out

    def same_structure(self, other: "ParamSet") -> bool:
        return self.structure() == other.structure()

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of structure and values."""
        return self.same_structure(other) and all(
            self._arrays[n].tobytes() == other[n].tobytes() for n in self._arrays)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self._arrays.values())


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FSPNCKPT"
CKPT_VERSION = 1


def params_to_bytes(params: ParamSet) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(params)))
    for name, arr in params.items():
        name_b = name.encode("utf-8")
        tag_b = params.tag(name).encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)) + name_b)
        buf.write(struct.pack("<H", len(tag_b)) + tag_b)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> ParamSet:
    view = memoryview(data)
    if bytes(view[:8]) != CKPT_MAGIC:
        raise StructuralError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", view, 8)
    if version != CKPT_VERSION:
        raise StructuralError(f"unsupported checkpoint version {version}")
    pos = 16
    out = ParamSet()
    for _ in range(count):
        (n,) = struct.unpack_from("<H", view, pos)
        name = bytes(view[pos + 2:pos + 2 + n]).decode("utf-8")
        pos += 2 + n
        (n,) = struct.unpack_from("<H", view, pos)
        tag = bytes(view[pos + 2:pos + 2 + n]).decode("utf-8")
        pos += 2 + n
        (ndim,) = struct.unpack_from("<B", view, pos)
        shape = struct.unpack_from(f"<{ndim}I", view, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        out.add(name, arr.astype(DTYPE), tag)
    return out


def save_checkpoint(path: str | Path, params: ParamSet) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_checkpoint(path: str | Path) -> ParamSet:
    return params_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------


@dataclass
class LayerSpec:
    """One node of the layer graph.

    ``inputs`` names the source nodes; empty means "the previous node".
    Hyperparameters by kind:

    * conv1d / conv2d: ``out_channels``, ``kernel``, ``stride`` (1), ``pad`` (0)
    * maxpool: ``size`` (int, or ``(ph, pw)`` on 2-d maps)
    * dense: ``units``
    """

    kind: str
    name: str
    inputs: tuple[str, ...] = ()
    hp: dict = field(default_factory=dict)
    partition: str = COMMON

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise StructuralError(f"unknown layer kind {self.kind!r} ({self.name})")
        self.inputs = tuple(self.inputs)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# Convolutions use an im2col buffer laid out as (kernel..., C, B, out...) so each
# kernel offset is one strided slice copy; the product with the weight matrix
# is then a single GEMM.

def _pad_cb(x, pad, spatial):
    # (B, C, *S) -> zero-padded (C, B, *S)
    xt = x.swapaxes(0, 1)
    if not pad:
        return xt
    shape = xt.shape[:2] + tuple(n + 2 * pad for n in xt.shape[2:])
    xp = np.zeros(shape, dtype=x.dtype)
    xp[(slice(None), slice(None)) + (slice(pad, -pad),) * spatial] = xt
    return xp


def _conv1d_fwd(x, W, b, stride, pad):
    B, C, L = x.shape
    O, _, k = W.shape
    xp = _pad_cb(x, pad, 1)
    Lo = (xp.shape[2] - k) // stride + 1
    span = stride * (Lo - 1) + 1
    cols = np.empty((k, C, B, Lo), dtype=x.dtype)
    for j in range(k):
        cols[j] = xp[:, :, j:j + span:stride]
    wm = W.transpose(0, 2, 1).reshape(O, k * C)
    y = wm @ cols.reshape(k * C, B * Lo)
    y += b[:, None]
    return y.reshape(O, B, Lo).swapaxes(0, 1), (cols, xp.shape)


def _conv1d_bwd(gy, ctx, W, stride, pad):
    cols, xp_shape = ctx
    B, O, Lo = gy.shape
    _, C, k = W.shape
    g2 = gy.swapaxes(0, 1).reshape(O, B * Lo)
    K = k * C
    dW = (g2 @ cols.reshape(K, B * Lo).T).reshape(O, k, C).transpose(0, 2, 1)
    db = g2.sum(axis=1, dtype=np.float64).astype(W.dtype)
    dcols = (W.transpose(0, 2, 1).reshape(O, K).T @ g2).reshape(k, C, B, Lo)
    dxp = np.zeros(xp_shape, dtype=gy.dtype)
    span = stride * (Lo - 1) + 1
    for j in range(k):
        dxp[:, :, j:j + span:stride] += dcols[j]
    if pad:
        dxp = dxp[:, :, pad:-pad]
    return dxp.swapaxes(0, 1), np.ascontiguousarray(dW), db


def _conv2d_fwd(x, W, b, stride, pad):
    B, C, H, Wd = x.shape
    O, _, kh, kw = W.shape
    xp = _pad_cb(x, pad, 2)
    Ho = (xp.shape[2] - kh) // stride + 1
    Wo = (xp.shape[3] - kw) // stride + 1
    sh, sw = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    cols = np.empty((kh, kw, C, B, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i:i + sh:stride, j:j + sw:stride]
    wm = W.transpose(0, 2, 3, 1).reshape(O, -1)
    y = wm @ cols.reshape(wm.shape[1], -1)
    y += b[:, None]
    return y.reshape(O, B, Ho, Wo).swapaxes(0, 1), (cols, xp.shape)


def _conv2d_bwd(gy, ctx, W, stride, pad):
    cols, xp_shape = ctx
    B, O, Ho, Wo = gy.shape
    _, C, kh, kw = W.shape
    K = kh * kw * C
    g2 = gy.swapaxes(0, 1).reshape(O, -1)
    dW = (g2 @ cols.reshape(K, -1).T).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
    db = g2.sum(axis=1, dtype=np.float64).astype(W.dtype)
    dcols = (W.transpose(0, 2, 3, 1).reshape(O, K).T @ g2).reshape(kh, kw, C, B, Ho, Wo)
    dxp = np.zeros(xp_shape, dtype=gy.dtype)
    sh, sw = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh:stride, j:j + sw:stride] += dcols[i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp.swapaxes(0, 1), np.ascontiguousarray(dW), db


def _pool_offsets(x_shape, size):
    # Strided slices, one per position inside the pooling window.
    if len(x_shape) == 3:
        p = int(size)
        lo = x_shape[2] // p
        return [(Ellipsis, slice(j, j + p * lo, p)) for j in range(p)]
    ph, pw = _pair(size)
    ho, wo = x_shape[2] // ph, x_shape[3] // pw
    return [(Ellipsis, slice(i, i + ph * ho, ph), slice(j, j + pw * wo, pw))
            for i in range(ph) for j in range(pw)]


def _maxpool_fwd(x, size):
    offsets = _pool_offsets(x.shape, size)
    y = x[offsets[0]].copy()
    for off in offsets[1:]:
        np.maximum(y, x[off], out=y)
    return y, (x, y)


def _maxpool_bwd(gy, ctx, size):
    # Gradient is routed to every position equal to the window max; exact
    # ties have probability zero for real-valued conv outputs.
    x, y = ctx
    gx = np.zeros(x.shape, dtype=gy.dtype)
    for off in _pool_offsets(x.shape, size):
        gx[off] = gy * (x[off] == y)
    return gx


def _concat_view(x: np.ndarray) -> np.ndarray:
    # (B, C, ..., L) -> (B, C*..., L); (B, D) unchanged.
    if x.ndim >= 3:
        return x.reshape(x.shape[0], -1, x.shape[-1])
    return x


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class Cache:
    """Activations recorded by :meth:`Network.forward` for one backward pass."""

    values: dict
    ctx: dict
    params_id: int
    params_version: int
    used: bool = False


class Network:
    """Static layer DAG with build-time shape inference.

    Parameters
    ----------
    inputs:
        Ordered mapping of input name to per-sample shape.
    layers:
        Nodes in topological order.  The last node is the network output.
    """

    def __init__(self, inputs: Mapping[str, Sequence[int]], layers: Sequence[LayerSpec]):
        self.input_names = list(inputs)
        self.shapes: dict[str, tuple[int, ...]] = {k: tuple(v) for k, v in inputs.items()}
        self.layers = list(layers)
        self.param_specs: dict[str, tuple[tuple[int, ...], str, int]] = {}
        self.init_gain: dict[str, float] = {}
        prev = self.input_names[-1] if self.input_names else None
        names = set(self.shapes)
        for layer in self.layers:
            if layer.name in names:
                raise StructuralError(f"duplicate node name {layer.name!r}")
            if not layer.inputs:
                if prev is None:
                    raise StructuralError(f"layer {layer.name!r} has no input")
                layer.inputs = (prev,)
            for src in layer.inputs:
                if src not in self.shapes:
                    raise StructuralError(f"layer {layer.name!r}: unknown input {src!r}")
            self.shapes[layer.name] = self._infer(layer)
            names.add(layer.name)
            prev = layer.name
        self.output = prev

    # -- shape inference ---------------------------------------------------
    def _infer(self, layer: LayerSpec) -> tuple[int, ...]:
        shapes = [self.shapes[s] for s in layer.inputs]
        hp, kind, name = layer.hp, layer.kind, layer.name
        if kind != "concat" and len(shapes) != 1:
            raise StructuralError(f"layer {name!r} ({kind}) takes exactly one input")
        s = shapes[0]
        if kind == "conv1d":
            if len(s) != 2:
                raise StructuralError(f"layer {name!r}: conv1d expects (C, L) input, got {s}")
            k, st, pad = int(hp["kernel"]), int(hp.get("stride", 1)), int(hp.get("pad", 0))
            lo = (s[1] + 2 * pad - k) // st + 1
            if lo <= 0:
                raise StructuralError(f"layer {name!r}: kernel larger than input {s}")
            o = int(hp["out_channels"])
            self.param_specs[f"{name}.W"] = ((o, s[0], k), layer.partition, s[0] * k)
            self.param_specs[f"{name}.b"] = ((o,), layer.partition, 0)
            return (o, lo)
        if kind == "conv2d":
            if len(s) != 3:
                raise StructuralError(f"layer {name!r}: conv2d expects (C, H, W) input, got {s}")
            kh, kw = _pair(hp["kernel"])
            st, pad = int(hp.get("stride", 1)), int(hp.get("pad", 0))
            ho = (s[1] + 2 * pad - kh) // st + 1
            wo = (s[2] + 2 * pad - kw) // st + 1
            if ho <= 0 or wo <= 0:
                raise StructuralError(f"layer {name!r}: kernel larger than input {s}")
            o = int(hp["out_channels"])
            self.param_specs[f"{name}.W"] = ((o, s[0], kh, kw), layer.partition, s[0] * kh * kw)
            self.param_specs[f"{name}.b"] = ((o,), layer.partition, 0)
            return (o, ho, wo)
        if kind == "maxpool":
            if len(s) == 2:
                lo = s[1] // int(hp["size"])
                if lo == 0:
                    raise StructuralError(f"layer {name!r}: pool larger than input {s}")
                return (s[0], lo)
            if len(s) == 3:
                ph, pw = _pair(hp["size"])
                if s[1] // ph == 0 or s[2] // pw == 0:
                    raise StructuralError(f"layer {name!r}: pool larger than input {s}")
                return (s[0], s[1] // ph, s[2] // pw)
            raise StructuralError(f"layer {name!r}: maxpool needs a feature map, got {s}")
        if kind == "dense":
            if len(s) != 1:
                raise StructuralError(f"layer {name!r}: dense expects flat input, got {s}")
            u = int(hp["units"])
            self.param_specs[f"{name}.W"] = ((s[0], u), layer.partition, s[0])
            self.init_gain[f"{name}.W"] = float(hp.get("init_gain", 1.0))
            self.param_specs[f"{name}.b"] = ((u,), layer.partition, 0)
            return (u,)
        if kind in ("relu", "sigmoid"):
            return s
        if kind == "flatten":
            return (int(np.prod(s)),)
        # concat
        views = []
        for src, sh in zip(layer.inputs, shapes):
            views.append((int(np.prod(sh[:-1])), sh[-1]) if len(sh) >= 2 else (sh[0],))
        if all(len(v) == 1 for v in views):
            return (sum(v[0] for v in views),)
        if any(len(v) == 1 for v in views) or len({v[-1] for v in views}) != 1:
            raise StructuralError(
                f"layer {name!r}: cannot concatenate shapes {shapes} (trailing sizes differ)")
        return (sum(v[0] for v in views), views[0][-1])

    # -- parameters ----------------------------------------------------------
    @property
    def num_params(self) -> int:
        return int(sum(np.prod(s) for s, _, _ in self.param_specs.values()))

    def init_params(self, seed: int, dtype=DTYPE) -> ParamSet:
        """He-uniform weights (bound sqrt(6 / fan_in)), zero biases.

        A dense layer's ``init_gain`` hyperparameter scales its bound.
        """
        rng = np.random.default_rng(seed)
        params = ParamSet()
        for name, (shape, tag, fan_in) in self.param_specs.items():
            if name.endswith(".b"):
                arr = np.zeros(shape, dtype=dtype)
            else:
                bound = np.sqrt(6.0 / fan_in) * self.init_gain.get(name, 1.0)
                arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
            params.add(name, arr, tag)
        return params

    def check_params(self, params: ParamSet) -> None:
        for name, (shape, tag, _) in self.param_specs.items():
            if name not in params:
                raise StructuralError(f"missing parameter {name!r}")
            if params[name].shape != shape:
                raise StructuralError(
                    f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
            if params.tag(name) != tag:
                raise StructuralError(f"parameter {name!r} tagged {params.tag(name)!r}, expected {tag!r}")

    # -- forward / backward --------------------------------------------------
    def forward(self, params: ParamSet, inputs: Sequence[np.ndarray] | Mapping[str, np.ndarray],
                keep_cache: bool = True):
        """Evaluate the graph.

        Returns ``(output, cache)``; ``cache`` is ``None`` when
        ``keep_cache`` is false.
        """
        if isinstance(inputs, Mapping):
            inputs = [inputs[n] for n in self.input_names]
        if len(inputs) != len(self.input_names):
            raise StructuralError(f"expected {len(self.input_names)} inputs, got {len(inputs)}")
        values: dict[str, np.ndarray] = {}
        batch = None
        for name, x in zip(self.input_names, inputs):
            x = np.asarray(x)
            if x.shape[1:] != self.shapes[name]:
                raise StructuralError(
                    f"input {name!r}: per-sample shape {x.shape[1:]} != {self.shapes[name]}")
            if batch is None:
                batch = x.shape[0]
            elif x.shape[0] != batch:
                raise StructuralError(f"input {name!r}: batch size {x.shape[0]} != {batch}")
            values[name] = x
        ctx: dict = {}
        for layer in self.layers:
            xs = [values[s] for s in layer.inputs]
            values[layer.name], ctx[layer.name] = self._fwd(layer, params, xs)
        out = values[self.output]
        if not keep_cache:
            return out, None
        return out, Cache(values, ctx, id(params), params.version)

    def _fwd(self, layer: LayerSpec, params: ParamSet, xs):
        kind, hp, n = layer.kind, layer.hp, layer.name
        x = xs[0]
        if kind == "conv1d":
            return _conv1d_fwd(x, params[f"{n}.W"], params[f"{n}.b"],
                               int(hp.get("stride", 1)), int(hp.get("pad", 0)))
        if kind == "conv2d":
            return _conv2d_fwd(x, params[f"{n}.W"], params[f"{n}.b"],
                               int(hp.get("stride", 1)), int(hp.get("pad", 0)))
        if kind == "maxpool":
            return _maxpool_fwd(x, hp["size"])
        if kind == "dense":
            return x @ params[f"{n}.W"] + params[f"{n}.b"], None
        if kind == "relu":
            return np.maximum(x, 0), None
        if kind == "sigmoid":
            return _sigmoid(x), None
        if kind == "flatten":
            return x.reshape(x.shape[0], -1), None
        return np.concatenate([_concat_view(v) for v in xs], axis=1), None

    def backward(self, cache: Cache, params: ParamSet, grad_out: np.ndarray) -> ParamSet:
        """Gradients of a scalar loss w.r.t. every parameter.

        ``grad_out`` is dLoss/d(output), same shape as the forward output.
        """
        if cache is None or cache.used:
            raise UsageError("backward needs a fresh cache from forward (cache already consumed)")
        if cache.params_id != id(params) or cache.params_version != params.version:
            raise UsageError("stale cache: parameters changed since forward")
        cache.used = True
        values, ctx = cache.values, cache.ctx
        out = values[self.output]
        grad_out = np.asarray(grad_out, dtype=out.dtype)
        if grad_out.shape != out.shape:
            raise StructuralError(f"loss gradient shape {grad_out.shape} != output {out.shape}")
        grads: dict[str, np.ndarray] = {self.output: grad_out}
        pgrads: dict[str, np.ndarray] = {}
        for layer in reversed(self.layers):
            g = grads.pop(layer.name, None)
            if g is None:
                continue
            in_grads = self._bwd(layer, params, values, ctx[layer.name], g, pgrads)
            for src, gi in zip(layer.inputs, in_grads):
                if src in self.input_names:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        result = ParamSet()
        for name, (shape, tag, _) in self.param_specs.items():
            g = pgrads.get(name)
            if g is None:
                g = np.zeros(shape, dtype=params[name].dtype)
            result.add(name, g, tag)
        return result

    def _bwd(self, layer: LayerSpec, params: ParamSet, values, ctx, g, pgrads):
        kind, hp, n = layer.kind, layer.hp, layer.name
        if kind == "conv1d":
            gx, pgrads[f"{n}.W"], pgrads[f"{n}.b"] = _conv1d_bwd(
                g, ctx, params[f"{n}.W"], int(hp.get("stride", 1)), int(hp.get("pad", 0)))
            return [gx]
        if kind == "conv2d":
            gx, pgrads[f"{n}.W"], pgrads[f"{n}.b"] = _conv2d_bwd(
                g, ctx, params[f"{n}.W"], int(hp.get("stride", 1)), int(hp.get("pad", 0)))
            return [gx]
        if kind == "maxpool":
            return [_maxpool_bwd(g, ctx, hp["size"])]
        if kind == "dense":
            x = values[layer.inputs[0]]
            W = params[f"{n}.W"]
            pgrads[f"{n}.W"] = x.T @ g
            pgrads[f"{n}.b"] = g.sum(axis=0, dtype=np.float64).astype(W.dtype)
            return [g @ W.T]
        if kind == "relu":
            return [g * (values[layer.inputs[0]] > 0)]
        if kind == "sigmoid":
            y = values[n]
            return [g * y * (1 - y)]
        if kind == "flatten":
            return [g.reshape(values[layer.inputs[0]].shape)]
        # concat
        out, pos = [], 0
        for src in layer.inputs:
            x = values[src]
            v = _concat_view(x)
            width = v.shape[1]
            out.append(g[:, pos:pos + width].reshape(x.shape))
            pos += width
        return out


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


class SGD:
    """SGD with classical momentum: ``v <- m*v + g``; ``p <- p - lr*v``."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.9):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity: dict[str, np.ndarray] = {}

    def reset(self) -> None:
        self.velocity.clear()

    def step(self, params: ParamSet, grads: ParamSet) -> ParamSet:
        return sgd_step(params, grads, self.lr, self.momentum, self.velocity)


def sgd_step(params: ParamSet, grads: ParamSet, lr: float, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> ParamSet:
    """In-place momentum SGD update; returns ``params``.

    ``velocity`` carries the momentum accumulator between calls and is
    updated in place.  Raises :class:`TrainingError` on non-finite gradients
    before touching any parameter.
    """
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise StructuralError(f"gradient {name!r} does not match parameters")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name!r}")
    if velocity is None:
        velocity = {}
    for name, g in grads.items():
        v = velocity.get(name)
        v = g.astype(params[name].dtype, copy=True) if v is None else momentum * v + g
        velocity[name] = v
        params[name] = params[name] - lr * v
    return params
