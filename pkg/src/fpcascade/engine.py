"""Minimal dense tensor engine with reverse-mode differentiation.

A :class:`ComputeGraph` is a recorded, topologically ordered list of nodes.
Networks use ten primitive kinds (:class:`OpKind`); a graph may end in a
loss head, a node with hand-written value and gradient that maps a
prediction node and a target input to a scalar.

Arrays are ``(N, C, H, W)`` for image activations and ``(N, F)`` for
features.  All arithmetic is float64.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CheckpointError,
    NonScalarOutput,
    ShapeMismatch,
    UnboundInput,
)

DTYPE = np.float64


class OpKind(str, enum.Enum):
    INPUT = "Input"
    CONV2D = "Conv2D"
    RELU = "ReLU"
    MAXPOOL2D = "MaxPool2D"
    UPSAMPLE2X = "NearestUpsample2x"
    CONCAT = "ChannelConcat"
    SIGMOID = "Sigmoid"
    ADD = "Add"
    MATMUL = "MatMul"
    GAP = "GlobalAvgPool"
    SCALE = "Scale"
    HEAD = "LossHead"


class Tensor:
    """Dense array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        if grad is not None and np.shape(grad) != self.data.shape:
            raise ShapeMismatch(f"grad shape {np.shape(grad)} != data shape {self.data.shape}")
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


@dataclass
class Node:
    kind: OpKind
    inputs: tuple[int, ...] = ()
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    channels: int | None = None  # channel/feature count, None when unknown


class LossHead:
    """Interface for a scalar head: ``value`` and ``grad`` w.r.t. predictions."""

    name = "head"

    def value(self, pred: np.ndarray, target: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ComputeGraph:
    """Recorded computation over named inputs and named parameters.

    Builder methods append a node and return its integer id.  Shape
    agreement on channel counts is checked while building; spatial
    agreement is checked when data flows through.
    """

    config = None

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Tensor] = {}
        self.input_ids: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.input_grads: dict[str, np.ndarray] = {}
        self._values: list | None = None
        self._caches: list | None = None

    # building ---------------------------------------------------------------

    def _add(self, node: Node) -> int:
        for i in node.inputs:
            if not 0 <= i < len(self.nodes):
                raise ShapeMismatch(f"node input {i} does not precede the new node")
        for p in node.params:
            if p not in self.params:
                raise ShapeMismatch(f"unknown parameter {p!r}")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _ch(self, i: int) -> int | None:
        return self.nodes[i].channels

    def input(self, name: str, channels: int | None = None) -> int:
        if name in self.input_ids:
            raise ShapeMismatch(f"duplicate input {name!r}")
        nid = self._add(Node(OpKind.INPUT, attrs={"name": name}, channels=channels))
        self.input_ids[name] = nid
        return nid

    def add_param(self, name: str, data) -> str:
        if name in self.params:
            raise ShapeMismatch(f"duplicate parameter {name!r}")
        self.params[name] = Tensor(data)
        return name

    def conv2d(self, x: int, weight: str, bias: str | None = None,
               stride: int = 1, padding: int = 0) -> int:
        w = self.params[weight].shape
        if len(w) != 4:
            raise ShapeMismatch(f"conv kernel must be 4D, got {w}")
        cin = self._ch(x)
        if cin is not None and cin != w[1]:
            raise ShapeMismatch(f"conv {weight}: input has {cin} channels, kernel expects {w[1]}")
        if bias is not None and self.params[bias].shape != (w[0],):
            raise ShapeMismatch(f"bias {bias} shape {self.params[bias].shape} != ({w[0]},)")
        if stride < 1 or padding < 0:
            raise ShapeMismatch("stride must be >= 1 and padding >= 0")
        params = (weight,) if bias is None else (weight, bias)
        return self._add(Node(OpKind.CONV2D, (x,), params,
                              {"stride": stride, "padding": padding}, w[0]))

    def relu(self, x: int) -> int:
        return self._add(Node(OpKind.RELU, (x,), channels=self._ch(x)))

    def maxpool2d(self, x: int) -> int:
        return self._add(Node(OpKind.MAXPOOL2D, (x,), channels=self._ch(x)))

    def upsample2x(self, x: int) -> int:
        return self._add(Node(OpKind.UPSAMPLE2X, (x,), channels=self._ch(x)))

    def concat(self, xs) -> int:
        xs = tuple(xs)
        if len(xs) < 2:
            raise ShapeMismatch("concat needs at least two inputs")
        chans = [self._ch(i) for i in xs]
        total = None if None in chans else sum(chans)
        return self._add(Node(OpKind.CONCAT, xs, channels=total))

    def sigmoid(self, x: int) -> int:
        return self._add(Node(OpKind.SIGMOID, (x,), channels=self._ch(x)))

    def add(self, a: int, b: int) -> int:
        ca, cb = self._ch(a), self._ch(b)
        if ca is not None and cb is not None and ca != cb:
            raise ShapeMismatch(f"add: channel counts {ca} and {cb} differ")
        return self._add(Node(OpKind.ADD, (a, b), channels=ca if ca is not None else cb))

    def matmul(self, x: int, weight: str) -> int:
        w = self.params[weight].shape
        if len(w) != 2:
            raise ShapeMismatch(f"matmul weight must be 2D, got {w}")
        if self._ch(x) is not None and self._ch(x) != w[0]:
            raise ShapeMismatch(f"matmul {weight}: input has {self._ch(x)} features, needs {w[0]}")
        return self._add(Node(OpKind.MATMUL, (x,), (weight,), channels=w[1]))

    def global_avg_pool(self, x: int) -> int:
        return self._add(Node(OpKind.GAP, (x,), channels=self._ch(x)))

    def scale(self, x: int, c: float) -> int:
        return self._add(Node(OpKind.SCALE, (x,), attrs={"c": float(c)}, channels=self._ch(x)))

    def head(self, pred: int, target: int | None, fn: LossHead) -> int:
        inputs = (pred,) if target is None else (pred, target)
        return self._add(Node(OpKind.HEAD, inputs, attrs={"fn": fn}, channels=1))

    def mark_output(self, name: str, nid: int) -> None:
        self.outputs[name] = nid

    # execution --------------------------------------------------------------

    def forward(self, inputs: dict, until: int | str | None = None) -> np.ndarray:
        """Evaluate nodes up to ``until`` (node id, output name, or last node).

        Intermediate values and per-node caches are kept for :meth:`backward`.
        """
        stop = self._resolve(until)
        needed = self._ancestors(stop)
        values: list = [None] * len(self.nodes)
        caches: list = [None] * len(self.nodes)
        for nid in range(stop + 1):
            if nid not in needed:
                continue
            node = self.nodes[nid]
            if node.kind is OpKind.INPUT:
                name = node.attrs["name"]
                if name not in inputs:
                    raise UnboundInput(f"input {name!r} is not bound")
                x = np.asarray(inputs[name], dtype=DTYPE)
                if node.channels is not None and (x.ndim < 2 or x.shape[1] != node.channels):
                    raise ShapeMismatch(
                        f"input {name!r} needs {node.channels} channels, got shape {x.shape}")
                values[nid] = x
                continue
            args = [values[i] for i in node.inputs]
            pvals = [self.params[p].data for p in node.params]
            values[nid], caches[nid] = _FORWARD[node.kind](node, args, pvals)
        self._values, self._caches, self._stop = values, caches, stop
        return values[stop]

    def backward(self) -> None:
        """Fill ``grad`` of every parameter and ``input_grads`` of every input.

        Gradients are reset before accumulation.  The last forward output
        must be a scalar.
        """
        if self._values is None:
            raise NonScalarOutput("backward called before forward")
        stop = self._stop
        out = self._values[stop]
        if np.size(out) != 1:
            raise NonScalarOutput(f"backward needs a scalar output, got shape {np.shape(out)}")
        for t in self.params.values():
            t.zero_grad()
        self.input_grads = {}
        grads: list = [None] * len(self.nodes)
        grads[stop] = np.ones_like(out)
        for nid in range(stop, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.kind is OpKind.INPUT:
                self.input_grads[node.attrs["name"]] = g
                continue
            args = [self._values[i] for i in node.inputs]
            pvals = [self.params[p].data for p in node.params]
            in_grads, p_grads = _BACKWARD[node.kind](node, args, pvals, self._values[nid],
                                                     self._caches[nid], g)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
            for p, gp in zip(node.params, p_grads):
                self.params[p].grad += gp

    def value(self, nid: int) -> np.ndarray:
        return self._values[nid]

    def _resolve(self, until) -> int:
        if until is None:
            return len(self.nodes) - 1
        if isinstance(until, str):
            return self.outputs[until]
        return int(until)

    def _ancestors(self, stop: int) -> set[int]:
        seen, todo = set(), [stop]
        while todo:
            n = todo.pop()
            if n in seen:
                continue
            seen.add(n)
            todo.extend(self.nodes[n].inputs)
        return seen

    def kink_signature(self) -> list:
        """Activation pattern of nondifferentiable points from the last forward.

        Used by gradient checking to skip coordinates whose perturbation
        crosses a ReLU or max-pool tie.
        """
        sig = []
        for nid, node in enumerate(self.nodes):
            if self._values[nid] is None:
                continue
            if node.kind is OpKind.RELU:
                x = self._values[node.inputs[0]]
                sig.append(np.sign(x))
            elif node.kind is OpKind.MAXPOOL2D:
                sig.append(self._caches[nid][1])
            elif node.kind is OpKind.HEAD:
                sig.append(node.attrs["fn"].kinks(self._values[node.inputs[0]])
                           if hasattr(node.attrs["fn"], "kinks") else None)
        return sig

    # serialisation ----------------------------------------------------------

    def topology(self) -> list[dict]:
        out = []
        for n in self.nodes:
            attrs = {k: v for k, v in n.attrs.items() if k != "fn"}
            if "fn" in n.attrs:
                attrs["fn"] = n.attrs["fn"].name
            out.append({"kind": n.kind.value, "inputs": list(n.inputs),
                        "params": list(n.params), "attrs": attrs})
        return out

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict, strict: bool = False) -> list[str]:
        """Copy matching parameters by name.  Returns names not found in the graph."""
        unmatched = []
        for name, arr in state.items():
            if name not in self.params:
                unmatched.append(name)
                continue
            if self.params[name].shape != np.shape(arr):
                raise ShapeMismatch(
                    f"parameter {name}: checkpoint shape {np.shape(arr)} != {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=DTYPE)
        if strict and (unmatched or set(self.params) - set(state)):
            raise CheckpointError(
                f"state does not match graph: extra {unmatched}, "
                f"missing {sorted(set(self.params) - set(state))}")
        return unmatched


# primitives -----------------------------------------------------------------

def _im2col(x, kh, kw, stride, padding):
    """Patch matrix of shape (C*kh*kw, N*Ho*Wo)."""
    n, c, h, w = x.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {x.shape}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeMismatch(f"input {h}x{w} with padding {padding} is not divisible by stride {stride}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``kernel[Cout,Cin,kh,kw]``."""
    x = np.asarray(x, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    out, _ = _conv_fwd(x, kernel, bias, stride, padding)
    return out


def _conv_fwd(x, kernel, bias, stride, padding):
    cout, cin, kh, kw = kernel.shape
    if x.ndim != 4 or x.shape[1] != cin:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = kernel.reshape(cout, -1) @ cols
    if bias is not None:
        out += np.asarray(bias, dtype=DTYPE)[:, None]
    out = out.reshape(cout, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _f_conv(node, args, p):
    bias = p[1] if len(p) > 1 else None
    return _conv_fwd(args[0], p[0], bias, node.attrs["stride"], node.attrs["padding"])


def _b_conv(node, args, p, out, cols, g):
    x, kernel = args[0], p[0]
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    s, pad = node.attrs["stride"], node.attrs["padding"]
    ho, wo = g.shape[2], g.shape[3]
    gt = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    dk = (gt @ cols.T).reshape(kernel.shape)
    if s == 1 and kh == kw and pad <= kh - 1:
        # input gradient = full correlation of g with the flipped, transposed kernel
        flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = _conv_fwd(g, flipped, None, 1, kh - 1 - pad)
    else:
        dcols = (kernel.reshape(cout, -1).T @ gt).reshape(cin, kh, kw, n, ho, wo)
        dxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    pgrads = [dk] if len(p) == 1 else [dk, gt.sum(axis=1)]
    return [dx], pgrads


def _f_relu(node, args, p):
    return np.maximum(args[0], 0.0), None


def _b_relu(node, args, p, out, cache, g):
    # Subgradient 0 at exactly 0.
    return [g * (args[0] > 0)], []


def _f_maxpool(node, args, p):
    x = args[0]
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeMismatch(f"2x2 max pooling needs even spatial extents, got {x.shape}")
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum: ties go to the lowest in-window index.
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def _b_maxpool(node, args, p, out, cache, g):
    shape, idx = cache
    n, c, h, w = shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    dx = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
    return [dx], []


def _f_upsample(node, args, p):
    x = args[0]
    if x.ndim != 4:
        raise ShapeMismatch(f"upsampling needs NCHW input, got {x.shape}")
    return x.repeat(2, axis=2).repeat(2, axis=3), None


def _b_upsample(node, args, p, out, cache, g):
    n, c, h, w = g.shape
    return [g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))], []


def _f_concat(node, args, p):
    base = args[0].shape
    for a in args[1:]:
        if a.ndim != len(base) or a.shape[0] != base[0] or a.shape[2:] != base[2:]:
            raise ShapeMismatch(f"concat: shapes {[x.shape for x in args]} disagree")
    return np.concatenate(args, axis=1), [a.shape[1] for a in args]


def _b_concat(node, args, p, out, sizes, g):
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=1)), []


def sigmoid(x):
    # tanh form is overflow-free and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def _f_sigmoid(node, args, p):
    return sigmoid(args[0]), None


def _b_sigmoid(node, args, p, out, cache, g):
    return [g * out * (1.0 - out)], []


def _f_add(node, args, p):
    a, b = args
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b, None


def _b_add(node, args, p, out, cache, g):
    return [g, g], []


def _f_matmul(node, args, p):
    x, w = args[0], p[0]
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"matmul: input {x.shape} incompatible with weight {w.shape}")
    return x @ w, None


def _b_matmul(node, args, p, out, cache, g):
    return [g @ p[0].T], [args[0].T @ g]


def _f_gap(node, args, p):
    x = args[0]
    if x.ndim != 4:
        raise ShapeMismatch(f"global average pooling needs NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def _b_gap(node, args, p, out, shape, g):
    n, c, h, w = shape
    return [np.broadcast_to(g[:, :, None, None] / (h * w), shape).copy()], []


def _f_scale(node, args, p):
    return node.attrs["c"] * args[0], None


def _b_scale(node, args, p, out, cache, g):
    return [node.attrs["c"] * g], []


def _f_head(node, args, p):
    fn = node.attrs["fn"]
    target = args[1] if len(args) > 1 else None
    return np.asarray(fn.value(args[0], target), dtype=DTYPE), None


def _b_head(node, args, p, out, cache, g):
    fn = node.attrs["fn"]
    target = args[1] if len(args) > 1 else None
    return [g * fn.grad(args[0], target), None], []


_FORWARD = {
    OpKind.CONV2D: _f_conv, OpKind.RELU: _f_relu, OpKind.MAXPOOL2D: _f_maxpool,
    OpKind.UPSAMPLE2X: _f_upsample, OpKind.CONCAT: _f_concat, OpKind.SIGMOID: _f_sigmoid,
    OpKind.ADD: _f_add, OpKind.MATMUL: _f_matmul, OpKind.GAP: _f_gap,
    OpKind.SCALE: _f_scale, OpKind.HEAD: _f_head,
}
_BACKWARD = {
    OpKind.CONV2D: _b_conv, OpKind.RELU: _b_relu, OpKind.MAXPOOL2D: _b_maxpool,
    OpKind.UPSAMPLE2X: _b_upsample, OpKind.CONCAT: _b_concat, OpKind.SIGMOID: _b_sigmoid,
    OpKind.ADD: _b_add, OpKind.MATMUL: _b_matmul, OpKind.GAP: _b_gap,
    OpKind.SCALE: _b_scale, OpKind.HEAD: _b_head,
}


def forward(g: ComputeGraph, inputs: dict, until=None) -> np.ndarray:
    return g.forward(inputs, until)


def backward(g: ComputeGraph) -> None:
    g.backward()


# gradient checking ----------------------------------------------------------

@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: list = field(default_factory=list)

    def __float__(self):
        return self.max_rel_error


def _same_signature(a, b) -> bool:
    return len(a) == len(b) and all(
        (x is None and y is None) or (x is not None and y is not None and np.array_equal(x, y))
        for x, y in zip(a, b))


def gradient_check(g: ComputeGraph, inputs: dict, coords=None, n_coords: int = 20,
                   h: float = 1e-4, rng: np.random.Generator | None = None) -> GradCheck:
    """Compare analytic parameter gradients with central differences.

    ``coords`` is a list of ``(param_name, flat_index)``; when omitted,
    ``n_coords`` are sampled.  Coordinates whose perturbation changes a
    ReLU sign or max-pool winner are skipped and listed in ``skipped``.
    Relative error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    g.forward(inputs)
    base_sig = g.kink_signature()
    g.backward()
    analytic = {k: t.grad.copy() for k, t in g.params.items()}
    if coords is None:
        rng = rng or np.random.default_rng(0)
        names = sorted(g.params)
        sizes = np.array([g.params[k].data.size for k in names], dtype=float)
        picks = rng.choice(len(names), size=n_coords, p=sizes / sizes.sum())
        coords = [(names[i], int(rng.integers(g.params[names[i]].data.size))) for i in picks]

    worst, checked, skipped = 0.0, 0, []
    for name, idx in coords:
        flat = g.params[name].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        f_plus = float(g.forward(inputs))
        sig_plus = g.kink_signature()
        flat[idx] = orig - h
        f_minus = float(g.forward(inputs))
        sig_minus = g.kink_signature()
        flat[idx] = orig
        if not (_same_signature(base_sig, sig_plus) and _same_signature(base_sig, sig_minus)):
            skipped.append((name, idx))
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        a = float(analytic[name].reshape(-1)[idx])
        worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
        checked += 1
    g.forward(inputs)
    return GradCheck(worst, checked, skipped)


# checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"FPCKPT\x00\x00"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict, topology=None, meta: dict | None = None) -> None:
    """Write named float64 tensors plus a JSON manifest.

    Layout: 8-byte magic, uint32 version, uint64 manifest length, manifest
    (UTF-8 JSON, sorted keys), then little-endian float64 data in manifest
    order.  Output bytes depend only on the arguments.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"version": CKPT_VERSION, "tensors": entries,
                "topology": topology, "meta": meta or {}}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    data = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(mbytes)) + mbytes + b"".join(blobs)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, mlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(data[20:20 + mlen])
    base = 20 + mlen
    params = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 8 * count > len(data):
            raise CheckpointError(f"checkpoint truncated in tensor {e['name']}")
        params[e["name"]] = np.frombuffer(data, "<f8", count, start).astype(DTYPE).reshape(e["shape"])
    return params, manifest
