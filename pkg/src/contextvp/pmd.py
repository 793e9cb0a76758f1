"""Recurrent plane-scan units, the five-direction cuboid sweep, and
context blending.

A scan unit is an LSTM whose gate transforms are same-padded 2-D
convolutions within a plane. Scanning a [T, H, W, C] cuboid along one of
five directions (t-, h-, h+, w-, w+) emits a hidden-state cuboid of the
same spatial-temporal extent; the plane perpendicular to the scan axis is
what the convolutions see, so spatial scans mix time and the remaining
spatial axis. Blending combines the five directional state cuboids
pointwise, either by summing (uniform) or by concatenating and projecting
(weighted), both realized as 1x1 convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from contextvp.tensor import Tensor, Tape, ShapeError

DIRECTIONS = ("t-", "h-", "h+", "w-", "w+")
OPPOSITE = {"h-": "h+", "h+": "h-", "w-": "w+", "w+": "w-"}
GATES = ("in", "forget", "out", "cell")

# direction -> (cuboid axis scanned, planes visited in decreasing order)
_SCAN = {
    "t-": (0, False),
    "h+": (1, False),
    "h-": (1, True),
    "w+": (2, False),
    "w-": (2, True),
}

BLEND_MODES = ("uniform", "weighted")


@dataclass
class PMDUnit:
    """Parameter bundle for one recurrence direction.

    kx_*: input-to-state kernels [k, k, Cin, Ch]; ks_*: state-to-state
    kernels [k, k, Ch, Ch]; b_*: gate biases [Ch]. Gate order everywhere
    is (in, forget, out, cell).
    """

    kx_in: Tensor
    kx_forget: Tensor
    kx_out: Tensor
    kx_cell: Tensor
    ks_in: Tensor
    ks_forget: Tensor
    ks_out: Tensor
    ks_cell: Tensor
    b_in: Tensor
    b_forget: Tensor
    b_out: Tensor
    b_cell: Tensor

    def __post_init__(self):
        k, _, cin, ch = self.kx_in.shape
        if k % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {k}")
        for name, t in self.fields():
            want = None
            if name.startswith("kx"):
                want = (k, k, cin, ch)
            elif name.startswith("ks"):
                want = (k, k, ch, ch)
            else:
                want = (ch,)
            if t.shape != want:
                raise ShapeError(f"{name}: shape {t.shape}, expected {want}")

    def fields(self):
        names = [f"{p}_{g}" for p in ("kx", "ks", "b") for g in GATES]
        return [(n, getattr(self, n)) for n in names]

    @property
    def kernel_size(self):
        return self.kx_in.shape[0]

    @property
    def in_channels(self):
        return self.kx_in.shape[2]

    @property
    def hidden(self):
        return self.kx_in.shape[3]


@dataclass
class BlendBlock:
    """Pointwise combiner of the five directional state cuboids.

    weight is [N1, N2] in uniform mode and [5*N1, N2] in weighted mode;
    bias is [N2]. `activation` defaults to identity; `layer_norm`
    normalizes the pre-activation over channels and is off by default.
    """

    mode: str
    weight: Tensor
    bias: Tensor
    activation: str = "identity"
    layer_norm: bool = False

    def __post_init__(self):
        if self.mode not in BLEND_MODES:
            raise ValueError(f"blend mode {self.mode!r} not in {BLEND_MODES}")
        if self.weight.data.ndim != 2:
            raise ShapeError("blend weight must be a matrix")
        if self.mode == "weighted" and self.weight.shape[0] % len(DIRECTIONS) != 0:
            raise ShapeError(
                f"weighted blend weight first extent {self.weight.shape[0]} "
                f"is not a multiple of {len(DIRECTIONS)}"
            )
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"blend bias shape {self.bias.shape} != ({self.weight.shape[1]},)"
            )


def _fuse_unit(tape: Tape, unit: PMDUnit):
    """Stack the four gate kernels along the output-channel axis so each
    scan step costs two convolutions instead of eight."""
    kx = tape.concat([unit.kx_in, unit.kx_forget, unit.kx_out, unit.kx_cell], axis=3)
    ks = tape.concat([unit.ks_in, unit.ks_forget, unit.ks_out, unit.ks_cell], axis=3)
    b = tape.concat([unit.b_in, unit.b_forget, unit.b_out, unit.b_cell], axis=0)
    return kx, ks, b, unit.hidden


def _gate_step(tape: Tape, fused, x: Tensor, c_prev, s_prev):
    kx, ks, b, ch = fused
    pre = tape.conv2d(x, kx, b)
    if s_prev is not None:
        pre = tape.add(pre, tape.conv2d(s_prev, ks))
    last = pre.data.ndim - 1
    gate_in = tape.sigmoid(tape.slice_axis(pre, last, 0, ch))
    gate_forget = tape.sigmoid(tape.slice_axis(pre, last, ch, 2 * ch))
    gate_out = tape.sigmoid(tape.slice_axis(pre, last, 2 * ch, 3 * ch))
    candidate = tape.tanh(tape.slice_axis(pre, last, 3 * ch, 4 * ch))
    if c_prev is None:
        c = tape.mul(gate_in, candidate)
    else:
        c = tape.add(tape.mul(gate_forget, c_prev), tape.mul(gate_in, candidate))
    s = tape.mul(gate_out, tape.tanh(c))
    return c, s


def pmd_step(tape: Tape, unit: PMDUnit, x_k: Tensor, c_prev=None, s_prev=None):
    """One recurrence step on a single plane.

    x_k: [A, B, Cin] (or batched [N, A, B, Cin]); c_prev/s_prev: matching
    [A, B, Ch] planes, or None for the zero initial state. Returns
    (cell, hidden).
    """
    if x_k.data.shape[-1] != unit.in_channels:
        raise ShapeError(
            f"step input has {x_k.data.shape[-1]} channels, unit expects "
            f"{unit.in_channels}"
        )
    if (c_prev is None) != (s_prev is None):
        raise ValueError("c_prev and s_prev must be given together")
    if s_prev is not None and s_prev.data.shape[-1] != unit.hidden:
        raise ShapeError(
            f"state has {s_prev.data.shape[-1]} channels, unit expects {unit.hidden}"
        )
    return _gate_step(tape, _fuse_unit(tape, unit), x_k, c_prev, s_prev)


def _scan_layout(cuboid: Tensor, direction: str):
    if direction not in _SCAN:
        raise ValueError(f"direction {direction!r} not in {DIRECTIONS}")
    rank = cuboid.data.ndim
    if rank not in (4, 5):
        raise ShapeError(f"cuboid must be [T,H,W,C] or [N,T,H,W,C], got rank {rank}")
    axis, reverse = _SCAN[direction]
    axis += rank - 4  # leading batch axis, if any
    order = range(cuboid.data.shape[axis])
    if reverse:
        order = reversed(order)
    return axis, reverse, list(order)


def reorient(tape: Tape, cuboid: Tensor, direction: str):
    """Slice the cuboid into planes in scan order.

    t-: T planes [H, W, C] by increasing t; h+/h-: H planes [T, W, C] by
    increasing/decreasing h; w+/w-: W planes [T, H, C] likewise. Stacking
    the planes back along the scanned axis restores the cuboid exactly.
    """
    axis, _, order = _scan_layout(cuboid, direction)
    return [tape.index(cuboid, axis, i) for i in order]


def pmd_scan(tape: Tape, unit: PMDUnit, cuboid: Tensor, direction: str) -> Tensor:
    """Run the unit over every plane of the cuboid along `direction`.

    States start at zero (no prior). Returns the hidden states at every
    position, laid out like the input: [T, H, W, Ch].
    """
    axis, reverse, order = _scan_layout(cuboid, direction)
    fused = _fuse_unit(tape, unit)
    c = s = None
    states = []
    for i in order:
        plane = tape.index(cuboid, axis, i)
        c, s = _gate_step(tape, fused, plane, c, s)
        states.append(s)
    if reverse:
        states.reverse()
    return tape.stack(states, axis=axis)


def _pointwise_project(tape: Tape, cuboid: Tensor, weight: Tensor, bias: Tensor):
    """1x1 convolution over the channel axis of a [T,H,W,C]-like cuboid."""
    n1, n2 = weight.shape
    kernel = tape.reshape(weight, (1, 1, n1, n2))
    if cuboid.data.ndim == 5:
        n, t = cuboid.data.shape[:2]
        flat = tape.reshape(cuboid, (n * t,) + cuboid.data.shape[2:])
        out = tape.conv2d(flat, kernel, bias)
        return tape.reshape(out, (n, t) + out.data.shape[1:])
    return tape.conv2d(cuboid, kernel, bias)


def _check_blend_inputs(s_list):
    if len(s_list) != len(DIRECTIONS):
        raise ShapeError(f"expected {len(DIRECTIONS)} state cuboids, got {len(s_list)}")
    base = s_list[0].data.shape
    for s in s_list[1:]:
        if s.data.shape != base:
            raise ShapeError(f"state cuboid shapes differ: {s.data.shape} != {base}")


def _finish_blend(tape: Tape, out: Tensor, block: BlendBlock) -> Tensor:
    if block.layer_norm:
        out = tape.layer_norm(out)
    return tape.activation(out, block.activation)


def blend_uniform(tape: Tape, s_list, block: BlendBlock) -> Tensor:
    """Sum the directional states over channels, then project pointwise."""
    if block.mode != "uniform":
        raise ValueError(f"blend block has mode {block.mode!r}, expected 'uniform'")
    _check_blend_inputs(s_list)
    if block.weight.shape[0] != s_list[0].data.shape[-1]:
        raise ShapeError(
            f"blend weight rows {block.weight.shape[0]} != state channels "
            f"{s_list[0].data.shape[-1]}"
        )
    total = s_list[0]
    for s in s_list[1:]:
        total = tape.add(total, s)
    return _finish_blend(
        tape, _pointwise_project(tape, total, block.weight, block.bias), block
    )


def blend_weighted(tape: Tape, s_list, block: BlendBlock) -> Tensor:
    """Concatenate the directional states in the fixed order
    (t-, h-, h+, w-, w+), then project pointwise."""
    if block.mode != "weighted":
        raise ValueError(f"blend block has mode {block.mode!r}, expected 'weighted'")
    _check_blend_inputs(s_list)
    n1 = s_list[0].data.shape[-1]
    if block.weight.shape[0] != len(DIRECTIONS) * n1:
        raise ShapeError(
            f"blend weight rows {block.weight.shape[0]} != "
            f"{len(DIRECTIONS)} * {n1} state channels"
        )
    stacked = tape.concat(s_list, axis=s_list[0].data.ndim - 1)
    return _finish_blend(
        tape, _pointwise_project(tape, stacked, block.weight, block.bias), block
    )


def blend(tape: Tape, s_list, block: BlendBlock) -> Tensor:
    return (blend_uniform if block.mode == "uniform" else blend_weighted)(
        tape, s_list, block
    )


def tie_dws(units: dict) -> dict:
    """Share parameters between opposite-direction units.

    h+ references the h- unit and w+ the w- unit (aliases, not copies), so
    a backward pass accumulates both directions' gradients into the shared
    tensors. The t- unit is untouched.
    """
    if set(units) != set(DIRECTIONS):
        raise ValueError(f"need units for all of {DIRECTIONS}, got {sorted(units)}")
    for keep, drop in (("h-", "h+"), ("w-", "w+")):
        for (name, a), (_, b) in zip(units[keep].fields(), units[drop].fields()):
            if a.shape != b.shape:
                raise ShapeError(
                    f"cannot tie {drop} to {keep}: {name} shapes "
                    f"{b.shape} != {a.shape}"
                )
    return {**units, "h+": units["h-"], "w+": units["w-"]}
