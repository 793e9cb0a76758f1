"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is deliberately small: exactly what recurrent convolutional
prediction models and their losses need. All arrays are numpy float64 in
row-major layout. Gradients are accumulated in reverse tape-insertion
order, so two runs over identical inputs produce bit-identical forward
values and gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_RANK = 5

ACTIVATIONS = ("sigmoid", "tanh", "identity", "relu")


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds supported maximum {MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


def _axis_index(axis: int, rank: int) -> int:
    if axis < 0:
        axis += rank
    if not 0 <= axis < rank:
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    return axis


class Tape:
    """Append-only record of differentiable operations.

    `backward` seeds a scalar node with 1 and sweeps the node list once in
    reverse insertion order, accumulating into `Tensor.grad`. A tape built
    with ``recording=False`` runs the same forward math without recording,
    which is what inference and finite-difference value sweeps use.
    """

    def __init__(self, recording: bool = True):
        self.recording = recording
        self.nodes: list[_Node] = []

    # -- engine ----------------------------------------------------------

    def _record(self, kind, inputs, out_data, backward_fn) -> Tensor:
        out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
        if self.recording and out.requires_grad:
            self.nodes.append(_Node(kind, inputs, out, backward_fn))
        return out

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` on every tensor that influences `loss`.

        Grad buffers from a previous backward on this tape are cleared
        first, so repeated calls (e.g. one per output pixel) are safe.
        """
        if loss.data.shape != ():
            raise ShapeError(
                f"backward seed must be scalar, got shape {loss.data.shape}"
            )
        for node in self.nodes:
            node.output.grad = None
            for t in node.inputs:
                t.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            contribs = node.backward_fn(out_grad)
            for t, contrib in zip(node.inputs, contribs):
                if contrib is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += contrib

    # -- elementwise -----------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"add: shapes {a.data.shape} != {b.data.shape}")
        return self._record("add", (a, b), a.data + b.data, lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"sub: shapes {a.data.shape} != {b.data.shape}")
        return self._record("sub", (a, b), a.data - b.data, lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"mul: shapes {a.data.shape} != {b.data.shape}")
        ad, bd = a.data, b.data
        return self._record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))

    def scale(self, a: Tensor, factor: float) -> Tensor:
        factor = float(factor)
        return self._record("scale", (a,), a.data * factor, lambda g: (g * factor,))

    def absolute(self, a: Tensor) -> Tensor:
        # subgradient at 0 is fixed to 0 (np.sign(0) == 0) for determinism
        sign = np.sign(a.data)
        return self._record("abs", (a,), np.abs(a.data), lambda g: (g * sign,))

    def sigmoid(self, a: Tensor) -> Tensor:
        y = 1.0 / (1.0 + np.exp(-a.data))
        return self._record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.data)
        return self._record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))

    def relu(self, a: Tensor) -> Tensor:
        mask = a.data > 0
        return self._record("relu", (a,), a.data * mask, lambda g: (g * mask,))

    def activation(self, a: Tensor, kind: str) -> Tensor:
        if kind == "identity":
            return a
        if kind == "sigmoid":
            return self.sigmoid(a)
        if kind == "tanh":
            return self.tanh(a)
        if kind == "relu":
            return self.relu(a)
        raise ValueError(f"unknown activation kind {kind!r}, expected one of {ACTIVATIONS}")

    # -- reductions and structure -----------------------------------------

    def sum(self, a: Tensor) -> Tensor:
        shape = a.data.shape
        return self._record(
            "sum", (a,), np.asarray(np.sum(a.data)),
            lambda g: (np.full(shape, float(g)),),
        )

    def concat(self, tensors, axis: int) -> Tensor:
        tensors = tuple(tensors)
        if not tensors:
            raise ShapeError("concat of zero tensors")
        rank = tensors[0].data.ndim
        axis = _axis_index(axis, rank)
        for t in tensors[1:]:
            if t.data.ndim != rank:
                raise ShapeError("concat: rank mismatch")
            for ax in range(rank):
                if ax != axis and t.data.shape[ax] != tensors[0].data.shape[ax]:
                    raise ShapeError(
                        f"concat: extent mismatch on axis {ax}: "
                        f"{t.data.shape[ax]} != {tensors[0].data.shape[ax]}"
                    )
        out = np.concatenate([t.data for t in tensors], axis=axis)
        offsets = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

        def backward(g):
            return tuple(np.split(g, offsets, axis=axis))

        return self._record("concat", tensors, out, backward)

    def index(self, a: Tensor, axis: int, i: int) -> Tensor:
        """Take the subarray at position i along `axis` (rank drops by 1)."""
        axis = _axis_index(axis, a.data.ndim)
        if not 0 <= i < a.data.shape[axis]:
            raise ShapeError(f"index {i} out of range on axis {axis}")
        sel = (slice(None),) * axis + (i,)
        out = a.data[sel].copy()
        shape = a.data.shape

        def backward(g):
            full = np.zeros(shape, dtype=np.float64)
            full[sel] = g
            return (full,)

        return self._record("index", (a,), out, backward)

    def stack(self, tensors, axis: int) -> Tensor:
        tensors = tuple(tensors)
        if not tensors:
            raise ShapeError("stack of zero tensors")
        base = tensors[0].data.shape
        for t in tensors[1:]:
            if t.data.shape != base:
                raise ShapeError(f"stack: shapes {t.data.shape} != {base}")
        out = np.stack([t.data for t in tensors], axis=axis)
        axis = _axis_index(axis, out.ndim)

        def backward(g):
            return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

        return self._record("stack", tensors, out, backward)

    def slice_axis(self, a: Tensor, axis: int, start: int, stop: int) -> Tensor:
        axis = _axis_index(axis, a.data.ndim)
        extent = a.data.shape[axis]
        if not (0 <= start < stop <= extent):
            raise ShapeError(
                f"slice [{start}:{stop}] invalid for extent {extent} on axis {axis}"
            )
        sel = (slice(None),) * axis + (slice(start, stop),)
        out = a.data[sel].copy()
        shape = a.data.shape

        def backward(g):
            full = np.zeros(shape, dtype=np.float64)
            full[sel] = g
            return (full,)

        return self._record("slice", (a,), out, backward)

    def reshape(self, a: Tensor, shape) -> Tensor:
        shape = tuple(int(s) for s in shape)
        old = a.data.shape
        out = a.data.reshape(shape)
        return self._record("reshape", (a,), out, lambda g: (g.reshape(old),))

    def layer_norm(self, a: Tensor, eps: float = 1e-5) -> Tensor:
        """Normalize over the last axis (no learned affine)."""
        x = a.data
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv

        def backward(g):
            gm = g.mean(axis=-1, keepdims=True)
            gxm = (g * xhat).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - xhat * gxm),)

        return self._record("layer_norm", (a,), xhat, backward)

    # -- convolution -------------------------------------------------------

    def conv2d(self, x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
        """Same-padded, stride-1 cross-correlation over the two inner axes.

        x: [A, B, Cin] or batched [N, A, B, Cin]; kernel: [kh, kw, Cin, Cout];
        bias: [Cout] or None. Out-of-range input is treated as zero.
        """
        kd = kernel.data
        if kd.ndim != 4:
            raise ShapeError(f"conv2d: kernel must have rank 4, got {kd.ndim}")
        kh, kw, cin, cout = kd.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
        xd = x.data
        batched = xd.ndim == 4
        if xd.ndim not in (3, 4):
            raise ShapeError(f"conv2d: input must have rank 3 or 4, got {xd.ndim}")
        if xd.shape[-1] != cin:
            raise ShapeError(
                f"conv2d: input channels (last axis) = {xd.shape[-1]} "
                f"but kernel expects Cin = {cin} (axis 2)"
            )
        if bias is not None and bias.data.shape != (cout,):
            raise ShapeError(
                f"conv2d: bias shape {bias.data.shape} != ({cout},) from kernel axis 3"
            )
        ph, pw = kh // 2, kw // 2
        a_ax = 1 if batched else 0
        hh, ww = xd.shape[a_ax], xd.shape[a_ax + 1]

        pad = [(0, 0)] * xd.ndim
        pad[a_ax] = (ph, ph)
        pad[a_ax + 1] = (pw, pw)
        xp = np.pad(xd, pad)

        # im2col: windows over the padded spatial axes, one matmul total
        win = sliding_window_view(xp, (kh, kw), axis=(a_ax, a_ax + 1))
        # win: [..., A, B, Cin, kh, kw] -> [..., A, B, kh, kw, Cin]
        patches = np.ascontiguousarray(np.moveaxis(win, -3, -1))
        rows = patches.reshape(-1, kh * kw * cin)
        out = rows @ kd.reshape(kh * kw * cin, cout)
        out = out.reshape(xd.shape[:-1] + (cout,))
        if bias is not None:
            out = out + bias.data

        def backward(g):
            g2 = g.reshape(-1, cout)
            gk = None
            gx = None
            if kernel.requires_grad:
                # recompute patch rows rather than keeping them alive
                w2 = sliding_window_view(xp, (kh, kw), axis=(a_ax, a_ax + 1))
                p2 = np.ascontiguousarray(np.moveaxis(w2, -3, -1))
                gk = (p2.reshape(-1, kh * kw * cin).T @ g2).reshape(kd.shape)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                head = (slice(None),) if batched else ()
                for dh in range(kh):
                    for dw in range(kw):
                        sel = head + (slice(dh, dh + hh), slice(dw, dw + ww))
                        gxp[sel] += g @ kd[dh, dw].T
                crop = head + (slice(ph, ph + hh), slice(pw, pw + ww))
                gx = gxp[crop]
            gb = g2.sum(axis=0) if (bias is not None and bias.requires_grad) else None
            if bias is None:
                return (gx, gk)
            return (gx, gk, gb)

        inputs = (x, kernel) if bias is None else (x, kernel, bias)
        return self._record("conv2d", inputs, out, backward)


def finite_diff_check(f, params, h: float = 1e-6, kink_tol: float = 1e-2):
    """Compare analytic gradients of ``f`` against central differences.

    ``f(tape, params) -> scalar Tensor`` must be a pure function of the
    parameter values. Returns ``(max_rel_err, excluded)`` where the error is
    max over parameter entries of |analytic - numeric| / max(1, |analytic|),
    and ``excluded`` lists (param_index, flat_index) entries whose second
    difference |f(+h) + f(-h) - 2 f(0)| / (2h) exceeded ``kink_tol`` --
    i.e. points sitting on a kink of a piecewise-smooth objective, where a
    central difference is meaningless.
    """
    tape = Tape()
    loss = f(tape, params)
    if loss.data.shape != ():
        raise ShapeError("finite_diff_check: f must return a scalar")
    f0 = float(loss.data)
    if not np.isfinite(f0):
        raise FloatingPointError("finite_diff_check: f evaluated non-finite")
    tape.backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    def value() -> float:
        v = float(f(Tape(recording=False), params).data)
        if not np.isfinite(v):
            raise FloatingPointError("finite_diff_check: f evaluated non-finite")
        return v

    max_rel = 0.0
    excluded = []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = value()
            flat[idx] = orig - h
            fm = value()
            flat[idx] = orig
            if abs(fp + fm - 2.0 * f0) / (2.0 * h) > kink_tol:
                excluded.append((pi, idx))
                continue
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[pi].reshape(-1)[idx]
            rel = abs(a - numeric) / max(1.0, abs(a))
            if rel > max_rel:
                max_rel = rel
    return max_rel, excluded
