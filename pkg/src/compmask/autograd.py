"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are float64 numpy arrays. A Graph is a tape of nodes appended in
topological order during the forward pass; one backward pass may be taken
per graph, after which the graph must be discarded and rebuilt.

Supported ops: elementwise add/sub/mul/relu/scale, bias_add, matmul,
conv2d (stride 1, "same" zero padding), channel softmax, weighted
softmax cross entropy, and full-tensor sum. No broadcasting beyond the
channel-bias case; shapes must match exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def as_tensor(data) -> np.ndarray:
    """Coerce to a float64 array, rejecting non-finite values."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite result in op '{op}'")
    return arr


@dataclass
class Param:
    """A named trainable array, persistent across graphs."""

    name: str
    value: np.ndarray

    def __post_init__(self):
        self.value = as_tensor(self.value)


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple
    value: np.ndarray

    @property
    def shape(self):
        return self.value.shape


class Graph:
    """Append-only tape of operations, rebuilt every training step."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._backward_fns = {}  # node id -> callable(grad) -> [(input id, grad)]
        self._param_leaves = {}  # node id -> param name
        self._backward_done = False

    # -- construction -------------------------------------------------

    def _append(self, op, inputs, value, backward_fn=None):
        node = Node(len(self.nodes), op, tuple(inp.id for inp in inputs), value)
        self.nodes.append(node)
        if backward_fn is not None:
            self._backward_fns[node.id] = backward_fn
        return node

    def leaf(self, value) -> Node:
        """Constant (non-trainable) input node."""
        return self._append("leaf", (), as_tensor(value))

    def param(self, p: Param) -> Node:
        node = self._append("param", (), p.value)
        self._param_leaves[node.id] = p.name
        return node

    # -- elementwise family -------------------------------------------

    def _binary(self, op, a: Node, b: Node):
        if a.shape != b.shape:
            raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")

    def add(self, a: Node, b: Node) -> Node:
        self._binary("add", a, b)
        return self._append("add", (a, b), _check_finite(a.value + b.value, "add"),
                            lambda g: [(a.id, g), (b.id, g)])

    def sub(self, a: Node, b: Node) -> Node:
        self._binary("sub", a, b)
        return self._append("sub", (a, b), _check_finite(a.value - b.value, "sub"),
                            lambda g: [(a.id, g), (b.id, -g)])

    def mul(self, a: Node, b: Node) -> Node:
        self._binary("mul", a, b)
        return self._append("mul", (a, b), _check_finite(a.value * b.value, "mul"),
                            lambda g: [(a.id, g * b.value), (b.id, g * a.value)])

    def relu(self, a: Node) -> Node:
        out = np.maximum(a.value, 0.0)
        mask = (a.value > 0.0).astype(np.float64)
        return self._append("relu", (a,), out, lambda g: [(a.id, g * mask)])

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._append("scale", (a,), _check_finite(a.value * c, "scale"),
                            lambda g: [(a.id, g * c)])

    def bias_add(self, a: Node, b: Node) -> Node:
        """Add a per-channel bias vector to an NC... activation."""
        if a.value.ndim < 2 or b.value.ndim != 1 or a.shape[1] != b.shape[0]:
            raise ValueError(f"bias_add: shapes {a.shape} and {b.shape} incompatible")
        shape = (1, b.shape[0]) + (1,) * (a.value.ndim - 2)
        out = _check_finite(a.value + b.value.reshape(shape), "bias_add")
        axes = (0,) + tuple(range(2, a.value.ndim))

        def backward(g):
            return [(a.id, g), (b.id, g.sum(axis=axes))]

        return self._append("bias_add", (a, b), out, backward)

    def channel_affine(self, a: Node, scale: np.ndarray, shift: np.ndarray) -> Node:
        """Per-channel x * scale + shift with constant (non-trainable) coefficients."""
        scale = as_tensor(scale)
        shift = as_tensor(shift)
        if a.value.ndim < 2 or scale.shape != (a.shape[1],) or shift.shape != (a.shape[1],):
            raise ValueError("channel_affine: need per-channel scale/shift vectors")
        shape = (1, a.shape[1]) + (1,) * (a.value.ndim - 2)
        s = scale.reshape(shape)
        out = _check_finite(a.value * s + shift.reshape(shape), "channel_affine")
        return self._append("channel_affine", (a,), out, lambda g: [(a.id, g * s)])

    # -- linear algebra -----------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2:
            raise ValueError("matmul: rank-2 operands required")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
        out = _check_finite(a.value @ b.value, "matmul")

        def backward(g):
            return [(a.id, g @ b.value.T), (b.id, a.value.T @ g)]

        return self._append("matmul", (a, b), out, backward)

    def conv2d(self, x: Node, k: Node) -> Node:
        """2D correlation, NCHW input, OIKK kernel, stride 1, same padding."""
        if x.value.ndim != 4 or k.value.ndim != 4:
            raise ValueError("conv2d: input must be NCHW, kernel OIKK")
        ksize = k.shape[2]
        if k.shape[2] != k.shape[3] or ksize % 2 == 0:
            raise ValueError(f"conv2d: kernel must be square with odd size, got {k.shape[2:]}")
        if x.shape[1] != k.shape[1]:
            raise ValueError(f"conv2d: channel mismatch, input {x.shape[1]} vs kernel {k.shape[1]}")
        out = _check_finite(_conv2d_same(x.value, k.value), "conv2d")
        backward = _conv_backend().make_backward(x, k, ksize)
        return self._append("conv2d", (x, k), out, backward)

    def slice_batch(self, a: Node, start: int, stop: int) -> Node:
        """View of batch rows [start, stop); gradient scatters back."""
        if not 0 <= start < stop <= a.shape[0]:
            raise ValueError(f"slice_batch: bad range [{start}, {stop}) for {a.shape}")
        out = a.value[start:stop]

        def backward(g):
            dx = np.zeros_like(a.value)
            dx[start:stop] = g
            return [(a.id, dx)]

        return self._append("slice_batch", (a,), out, backward)

    # -- reductions and losses ----------------------------------------

    def sum(self, a: Node) -> Node:
        out = np.asarray(a.value.sum())
        ones = np.ones_like(a.value)
        return self._append("sum", (a,), out, lambda g: [(a.id, g * ones)])

    def softmax(self, a: Node) -> Node:
        """Softmax over the channel axis (axis 1) of an NC... tensor."""
        if a.value.ndim < 2:
            raise ValueError("softmax: need a channel axis")
        p = _softmax(a.value)

        def backward(g):
            inner = (g * p).sum(axis=1, keepdims=True)
            return [(a.id, p * (g - inner))]

        return self._append("softmax", (a,), p, backward)

    def softmax_cross_entropy(self, logits: Node, targets: np.ndarray,
                              pixel_weight: np.ndarray | None = None) -> Node:
        """Mean of -log softmax(logits)[target] over weighted pixels.

        `logits` is (N, C, *spatial), `targets` integer (N, *spatial),
        `pixel_weight` optional {0,1} array of the same shape as targets.
        All-zero weights give loss 0 with zero gradient.
        """
        targets = np.asarray(targets)
        n_cls = logits.shape[1]
        expect = logits.shape[:1] + logits.shape[2:]
        if targets.shape != expect:
            raise ValueError(f"cross entropy: targets shape {targets.shape}, expected {expect}")
        if targets.min(initial=0) < 0 or targets.max(initial=0) >= n_cls:
            raise ValueError(f"cross entropy: class index out of range [0, {n_cls})")
        if pixel_weight is None:
            w = np.ones(expect)
        else:
            w = np.asarray(pixel_weight, dtype=np.float64)
            if w.shape != expect:
                raise ValueError(f"cross entropy: weight shape {w.shape}, expected {expect}")
        wsum = w.sum()

        z = logits.value
        zmax = z.max(axis=1, keepdims=True)
        logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, np.expand_dims(targets, 1), 1.0, axis=1)
        picked = np.take_along_axis(logp, np.expand_dims(targets, 1), axis=1)[:, 0]

        if wsum == 0.0:
            loss = np.asarray(0.0)

            def backward(g):
                return [(logits.id, np.zeros_like(z))]
        else:
            loss = np.asarray(-(w * picked).sum() / wsum)
            p = np.exp(logp)

            def backward(g):
                return [(logits.id, g * np.expand_dims(w, 1) * (p - onehot) / wsum)]

        return self._append("softmax_cross_entropy", (logits,),
                            _check_finite(loss, "softmax_cross_entropy"), backward)

    # -- convenience compositions -------------------------------------

    def mean_sq_diff(self, a: Node, b: Node) -> Node:
        """Mean over all entries of (a - b)^2."""
        d = self.sub(a, b)
        return self.scale(self.sum(self.mul(d, d)), 1.0 / d.value.size)

    # -- backward -----------------------------------------------------

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Accumulate gradients of a scalar root w.r.t. all param leaves."""
        if root.value.size != 1:
            raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
        if self._backward_done:
            raise RuntimeError("backward already taken on this graph; rebuild it")
        self._backward_done = True

        grads = {root.id: np.ones_like(self.nodes[root.id].value)}
        for nid in range(root.id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            if nid in self._param_leaves:
                name = self._param_leaves[nid]
                # a param may appear as several leaves; accumulate
                grads.setdefault(("param", name), 0.0)
                grads[("param", name)] = grads[("param", name)] + g
                continue
            fn = self._backward_fns.get(nid)
            if fn is None:
                continue
            for iid, contrib in fn(g):
                if iid in grads:
                    grads[iid] = grads[iid] + contrib
                else:
                    grads[iid] = contrib

        out = {}
        for key, g in grads.items():
            if isinstance(key, tuple) and key[0] == "param":
                out[key[1]] = _check_finite(np.asarray(g, dtype=np.float64), "backward")
        # params never touched by the root get explicit zero gradients
        for name_id, name in self._param_leaves.items():
            if name not in out:
                out[name] = np.zeros_like(self.nodes[name_id].value)
        return out


# -- conv helpers -----------------------------------------------------

class _NumpyConv:
    """Reference conv kernels: im2col matmul plus its adjoint."""

    def forward(self, x, k):
        n, c, h, w = x.shape
        o, _, ksize, _ = k.shape
        if ksize == 1:
            flat = x.transpose(0, 2, 3, 1).reshape(-1, c)
        else:
            flat = _im2col(x, ksize)
        return (flat @ k.reshape(o, -1).T).reshape(n, h, w, o).transpose(0, 3, 1, 2)

    def make_backward(self, x: Node, k: Node, ksize: int):
        n, c, h, w = x.shape
        o = k.shape[0]
        kmat = k.value.reshape(o, -1)
        if ksize == 1:
            flat = x.value.transpose(0, 2, 3, 1).reshape(-1, c)
        else:
            flat = _im2col(x.value, ksize)

        def backward(g):
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
            dk = (gmat.T @ flat).reshape(k.shape)
            dflat = gmat @ kmat
            if ksize == 1:
                dx = np.ascontiguousarray(
                    dflat.reshape(n, h, w, c).transpose(0, 3, 1, 2))
            else:
                dx = _col2im(dflat, (n, c, h, w), ksize)
            return [(x.id, dx), (k.id, dk)]

        return backward


class _TorchConv:
    """Same kernels delegated to torch's CPU conv primitives (no torch
    autograd involved; this is a drop-in arithmetic backend)."""

    def __init__(self):
        import torch
        import torch.nn.functional as functional
        torch.set_num_threads(max(1, torch.get_num_threads()))
        self._torch = torch
        self._f = functional

    def forward(self, x, k):
        xt = self._torch.from_numpy(np.ascontiguousarray(x))
        kt = self._torch.from_numpy(np.ascontiguousarray(k))
        return self._f.conv2d(xt, kt, padding=k.shape[2] // 2).numpy()

    def make_backward(self, x: Node, k: Node, ksize: int):
        torch, grad = self._torch, self._torch.nn.grad
        xt = torch.from_numpy(np.ascontiguousarray(x.value))
        kt = torch.from_numpy(np.ascontiguousarray(k.value))
        pad = ksize // 2

        def backward(g):
            gt = torch.from_numpy(np.ascontiguousarray(g))
            dx = grad.conv2d_input(x.shape, kt, gt, padding=pad).numpy()
            dk = grad.conv2d_weight(xt, k.shape, gt, padding=pad).numpy()
            return [(x.id, dx), (k.id, dk)]

        return backward


_BACKEND = None


def _conv_backend():
    global _BACKEND
    if _BACKEND is None:
        try:
            _BACKEND = _TorchConv()
        except ImportError:
            _BACKEND = _NumpyConv()
    return _BACKEND


def _im2col(x: np.ndarray, ksize: int) -> np.ndarray:
    """(N, C, H, W) -> contiguous (N*H*W, C*ksize*ksize) patch matrix."""
    n, c, h, w = x.shape
    pad = ksize // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (ksize, ksize), axis=(2, 3))  # (N,C,H,W,kh,kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h * w, c * ksize * ksize)


def _col2im(cols: np.ndarray, shape: tuple, ksize: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the grid."""
    n, c, h, w = shape
    pad = ksize // 2
    # accumulate channels-last so the inner slices stay contiguous
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    cols6 = cols.reshape(n, h, w, c, ksize, ksize)
    for i in range(ksize):
        for j in range(ksize):
            dxp[:, i:i + h, j:j + w, :] += cols6[:, :, :, :, i, j]
    core = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
    return np.ascontiguousarray(core.transpose(0, 3, 1, 2))


def _conv2d_same(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Graph-free forward convolution, NCHW x OIKK, stride 1, same padding."""
    return _conv_backend().forward(x, k)


def _softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=1, keepdims=True)


def softmax(z: np.ndarray) -> np.ndarray:
    """Graph-free channel softmax for inference paths."""
    return _softmax(np.asarray(z, dtype=np.float64))


# -- optimizer --------------------------------------------------------

@dataclass
class Adam:
    """Adaptive-moment optimizer with bias correction."""

    params: list[Param]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: dict = field(default_factory=dict)
    _v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("moment decay rates must lie in (0, 1)")
        if self.lr <= 0.0:
            raise ValueError("learning rate must be positive")
        for p in self.params:
            self._m[p.name] = np.zeros_like(p.value)
            self._v[p.name] = np.zeros_like(p.value)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for p in self.params:
            g = grads.get(p.name)
            if g is not None and not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for parameter '{p.name}'")
        self.step_count += 1
        b1t = 1.0 - self.beta1 ** self.step_count
        b2t = 1.0 - self.beta2 ** self.step_count
        for p in self.params:
            g = grads.get(p.name)
            if g is None:
                g = np.zeros_like(p.value)
            if g.shape != p.value.shape:
                raise ValueError(f"gradient shape mismatch for '{p.name}'")
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
