"""Reverse-mode automatic differentiation over float32 volumes.

A Tape records every Tensor produced during a forward pass; Tape.backward
replays the records in reverse and accumulates gradients into each node.
All values are float32; ops reject shape mismatches before computing.
"""

from itertools import product

import numpy as np


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of one forward pass. Single-use: re-record to backprop again."""

    __slots__ = ("nodes", "_backward_done")

    def __init__(self):
        self.nodes = []
        self._backward_done = False

    def _record(self, node):
        self.nodes.append(node)

    def backward(self, loss):
        if loss.data.size != 1:
            raise ValueError("backward expects a scalar loss node")
        if self._backward_done:
            raise TapeError(
                "backward already called on this tape; re-record the forward pass"
            )
        self._backward_done = True
        loss._accum(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


class Tensor:
    """One node of the recorded graph: a float32 array plus its backward rule."""

    __slots__ = ("data", "grad", "tape", "requires_grad", "_backward")

    def __init__(self, data, tape, requires_grad=True, _backward=None):
        data = np.asarray(data, dtype=np.float32)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = data if data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(data)
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self._backward = _backward
        tape._record(self)

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def constant(data, tape):
    """Leaf that never receives a gradient (input images, fixed grids)."""
    return Tensor(data, tape, requires_grad=False)


def _as_pair(a, b):
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
        return b, True
    return np.float32(b), False


def add(a, b):
    b, is_node = _as_pair(a, b)
    out_data = a.data + (b.data if is_node else b)
    req = a.requires_grad or (is_node and b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if is_node and b.requires_grad:
            b._accum(g)

    return Tensor(out_data, a.tape, req, bwd)


def sub(a, b):
    b, is_node = _as_pair(a, b)
    out_data = a.data - (b.data if is_node else b)
    req = a.requires_grad or (is_node and b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if is_node and b.requires_grad:
            b._accum(-g)

    return Tensor(out_data, a.tape, req, bwd)


def mul(a, b):
    b, is_node = _as_pair(a, b)
    out_data = a.data * (b.data if is_node else b)
    req = a.requires_grad or (is_node and b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (b.data if is_node else b))
        if is_node and b.requires_grad:
            b._accum(g * a.data)

    return Tensor(out_data, a.tape, req, bwd)


def square(a):
    def bwd(g):
        if a.requires_grad:
            a._accum(g * (2.0 * a.data))

    return Tensor(a.data * a.data, a.tape, a.requires_grad, bwd)


def mean(a):
    n = np.float32(a.data.size)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.full_like(a.data, np.float32(g) / n))

    return Tensor(a.data.mean(dtype=np.float32), a.tape, a.requires_grad, bwd)


def leaky_relu(a, slope=0.2):
    neg = a.data < 0.0
    out_data = np.where(neg, a.data * np.float32(slope), a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.where(neg, g * np.float32(slope), g))

    return Tensor(out_data, a.tape, a.requires_grad, bwd)


def concat_channels(parts):
    """Concatenate [C_i,X,Y,Z] tensors along the channel axis."""
    out_data = np.concatenate([p.data for p in parts], axis=0)
    req = any(p.requires_grad for p in parts)

    def bwd(g):
        off = 0
        for p in parts:
            c = p.data.shape[0]
            if p.requires_grad:
                p._accum(g[off : off + c])
            off += c

    return Tensor(out_data, parts[0].tape, req, bwd)


def conv3d(x, kernel, stride=1, padding=None):
    """3D convolution, zero-padded. x: [C_in,X,Y,Z], kernel: [C_out,C_in,k,k,k].

    Default padding is (k-1)//2 so a stride-1 output matches the input extent.
    """
    ci, X, Y, Z = x.data.shape
    co, ci_k, kx, ky, kz = kernel.data.shape
    if not (kx == ky == kz):
        raise ValueError("kernel must be cubic")
    k = kx
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    if ci_k != ci:
        raise ValueError(f"kernel expects {ci_k} input channels, got {ci}")
    p = (k - 1) // 2 if padding is None else int(padding)
    s = int(stride)

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))
    ox = (X + 2 * p - k) // s + 1
    oy = (Y + 2 * p - k) // s + 1
    oz = (Z + 2 * p - k) // s + 1
    n_out = ox * oy * oz

    def window(arr, dx, dy, dz):
        return arr[
            :,
            dx : dx + (ox - 1) * s + 1 : s,
            dy : dy + (oy - 1) * s + 1 : s,
            dz : dz + (oz - 1) * s + 1 : s,
        ]

    # im2col in kernel layout (ci, kx, ky, kz): a single GEMM does the whole conv
    patches = np.empty((ci, k, k, k, n_out), dtype=np.float32)
    for dx, dy, dz in product(range(k), repeat=3):
        patches[:, dx, dy, dz] = window(xp, dx, dy, dz).reshape(ci, n_out)
    patches = patches.reshape(ci * k**3, n_out)
    w_mat = kernel.data.reshape(co, ci * k**3)
    out_data = (w_mat @ patches).reshape(co, ox, oy, oz)

    req = x.requires_grad or kernel.requires_grad

    def bwd(g):
        g2 = g.reshape(co, n_out)
        if kernel.requires_grad:
            kernel._accum((g2 @ patches.T).reshape(kernel.data.shape))
        if not x.requires_grad:
            return
        if s == 1 and ox == X and oy == Y and oz == Z:
            # input grad of a same-size conv is a conv of g with the flipped,
            # channel-transposed kernel: one GEMM instead of 27 scatter-adds
            gp_pad = np.pad(g, ((0, 0), (p, p), (p, p), (p, p)))
            gpatches = np.empty((co, k, k, k, n_out), dtype=np.float32)
            for dx, dy, dz in product(range(k), repeat=3):
                gpatches[:, dx, dy, dz] = gp_pad[
                    :, dx : dx + X, dy : dy + Y, dz : dz + Z
                ].reshape(co, n_out)
            w_flip = np.ascontiguousarray(
                kernel.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            ).reshape(ci, co * k**3)
            x._accum((w_flip @ gpatches.reshape(co * k**3, n_out)).reshape(x.data.shape))
        else:
            gp = (w_mat.T @ g2).reshape(ci, k, k, k, n_out)
            gxp = np.zeros_like(xp)
            for dx, dy, dz in product(range(k), repeat=3):
                window(gxp, dx, dy, dz)[...] += gp[:, dx, dy, dz].reshape(
                    ci, ox, oy, oz
                )
            x._accum(gxp[:, p : p + X, p : p + Y, p : p + Z] if p > 0 else gxp)

    return Tensor(out_data, x.tape, req, bwd)


def add_channel_bias(x, bias):
    """x: [C,X,Y,Z] plus bias: [C], broadcast over the grid."""
    if bias.data.shape != (x.data.shape[0],):
        raise ValueError("bias length must match channel count")
    out_data = x.data + bias.data[:, None, None, None]
    req = x.requires_grad or bias.requires_grad

    def bwd(g):
        if x.requires_grad:
            x._accum(g)
        if bias.requires_grad:
            bias._accum(g.sum(axis=(1, 2, 3)))

    return Tensor(out_data, x.tape, req, bwd)


# --- trilinear sampling ---------------------------------------------------


def _corner_terms(shape, pts):
    """Shared indexing for the 8-corner trilinear stencil.

    pts: float32 array (3, N). Yields (index tuple, weight, validity mask,
    per-axis corner offsets) for each corner.
    """
    X, Y, Z = shape
    i0 = np.floor(pts).astype(np.int64)
    frac = pts - i0
    out = []
    for cx, cy, cz in product((0, 1), repeat=3):
        ix, iy, iz = i0[0] + cx, i0[1] + cy, i0[2] + cz
        wx = frac[0] if cx else np.float32(1.0) - frac[0]
        wy = frac[1] if cy else np.float32(1.0) - frac[1]
        wz = frac[2] if cz else np.float32(1.0) - frac[2]
        valid = (
            (ix >= 0) & (ix < X) & (iy >= 0) & (iy < Y) & (iz >= 0) & (iz < Z)
        )
        idx = (
            np.clip(ix, 0, X - 1),
            np.clip(iy, 0, Y - 1),
            np.clip(iz, 0, Z - 1),
        )
        out.append((idx, (wx * wy * wz).astype(np.float32), valid, (cx, cy, cz), (wx, wy, wz)))
    return out


def trilinear_gather(volume, pts):
    """Plain-numpy trilinear interpolation with zero padding outside the grid.

    volume: (X,Y,Z) float32; pts: (3, ...) continuous voxel coordinates.
    """
    pts = np.asarray(pts, dtype=np.float32)
    flat = pts.reshape(3, -1)
    vals = np.zeros(flat.shape[1], dtype=np.float32)
    for idx, w, valid, _, _ in _corner_terms(volume.shape, flat):
        vals += w * np.where(valid, volume[idx], np.float32(0.0))
    return vals.reshape(pts.shape[1:])


def trilinear_sample(volume, points):
    """Tape op: sample volume (X,Y,Z) at points (3, ...).

    Differentiable with respect to the volume values and, when `points` is a
    Tensor, the coordinates. Samples reaching outside the grid see zeros.
    """
    pts_node = points if isinstance(points, Tensor) else None
    pts = pts_node.data if pts_node is not None else np.asarray(points, dtype=np.float32)
    if pts.shape[0] != 3:
        raise ValueError("points must have leading axis of length 3")
    out_shape = pts.shape[1:]
    flat = pts.reshape(3, -1)
    terms = _corner_terms(volume.data.shape, flat)

    vals = np.zeros(flat.shape[1], dtype=np.float32)
    corner_vals = []
    for idx, w, valid, _, _ in terms:
        v = np.where(valid, volume.data[idx], np.float32(0.0))
        corner_vals.append(v)
        vals += w * v

    req = volume.requires_grad or (pts_node is not None and pts_node.requires_grad)

    def bwd(g):
        gf = g.reshape(-1)
        if volume.requires_grad:
            gv = np.zeros_like(volume.data)
            for (idx, w, valid, _, _), _v in zip(terms, corner_vals):
                contrib = gf * w * valid
                np.add.at(gv, idx, contrib.astype(np.float32))
            volume._accum(gv)
        if pts_node is not None and pts_node.requires_grad:
            gp = np.zeros_like(flat)
            for (idx, w, valid, (cx, cy, cz), (wx, wy, wz)), v in zip(
                terms, corner_vals
            ):
                gv = gf * v
                gp[0] += gv * (wy * wz) * (1.0 if cx else -1.0)
                gp[1] += gv * (wx * wz) * (1.0 if cy else -1.0)
                gp[2] += gv * (wx * wy) * (1.0 if cz else -1.0)
            pts_node._accum(gp.reshape(pts.shape))

    return Tensor(vals.reshape(out_shape), volume.tape, req, bwd)


# --- trilinear upsampling -------------------------------------------------


def _upsample_axis_matrix(n):
    """Dense (2n, n) corner-aligned interpolation matrix for one axis."""
    m = 2 * n
    w = np.zeros((m, n), dtype=np.float32)
    if n == 1:
        w[:, 0] = 1.0
        return w
    src = np.arange(m, dtype=np.float64) * ((n - 1) / (m - 1))
    i0 = np.minimum(np.floor(src).astype(np.int64), n - 2)
    frac = (src - i0).astype(np.float32)
    w[np.arange(m), i0] = 1.0 - frac
    w[np.arange(m), i0 + 1] += frac
    return w


def _apply_axis_matrix(a, axis, w):
    moved = np.moveaxis(a, axis, 0)
    out = w @ moved.reshape(a.shape[axis], -1)
    return np.moveaxis(out.reshape((w.shape[0],) + moved.shape[1:]), 0, axis)


def upsample_trilinear(x):
    """Double each spatial extent of x: [C,X,Y,Z] -> [C,2X,2Y,2Z], corner-aligned."""
    _, X, Y, Z = x.data.shape
    plans = [(ax, _upsample_axis_matrix(n)) for ax, n in ((1, X), (2, Y), (3, Z))]

    out_data = x.data
    for axis, w in plans:
        out_data = _apply_axis_matrix(out_data, axis, w)
    out_data = np.ascontiguousarray(out_data)

    def bwd(g):
        if not x.requires_grad:
            return
        for axis, w in reversed(plans):
            g = _apply_axis_matrix(g, axis, w.T)
        x._accum(np.ascontiguousarray(g))

    return Tensor(out_data, x.tape, x.requires_grad, bwd)


# --- flat parameter storage ----------------------------------------------


class ParamVector:
    """Flat float32 parameter storage with a named-segment layout.

    Two vectors built from the same architecture share an identical layout and
    are interchangeable. Segment views alias `values`, so flatten(load(v))
    round-trips bit-exactly.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        self.values = np.ascontiguousarray(values, dtype=np.float32)
        self.layout = tuple((name, int(off), tuple(shape)) for name, off, shape in layout)
        total = sum(int(np.prod(s)) for _, _, s in self.layout)
        if total != self.values.size:
            raise ValueError(
                f"layout covers {total} values but vector holds {self.values.size}"
            )

    @classmethod
    def from_segments(cls, named_arrays):
        layout = []
        chunks = []
        off = 0
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=np.float32)
            layout.append((name, off, arr.shape))
            chunks.append(arr.reshape(-1))
            off += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)
        return cls(values, layout)

    def segment(self, name):
        for n, off, shape in self.layout:
            if n == name:
                size = int(np.prod(shape))
                return self.values[off : off + size].reshape(shape)
        raise KeyError(name)

    def segments(self):
        for n, off, shape in self.layout:
            size = int(np.prod(shape))
            yield n, self.values[off : off + size].reshape(shape)

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self):
        return ParamVector(np.zeros_like(self.values), self.layout)

    def same_layout(self, other):
        return self.layout == other.layout

    def check_layout(self, other):
        if not self.same_layout(other):
            raise ValueError("parameter layout mismatch")

    @property
    def size(self):
        return self.values.size
