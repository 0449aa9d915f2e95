"""Transformation parameterizations: a direct dense DDF and a compact registration network."""

import os
from dataclasses import dataclass

import numpy as np

from .core import (
    ParamVector,
    Tape,
    Tensor,
    add_channel_bias,
    concat_channels,
    constant,
    conv3d,
    leaky_relu,
    upsample_trilinear,
)


@dataclass(frozen=True)
class RegNetConfig:
    """Channel widths of the 2-level encoder-decoder; architecture is a pure function of this."""

    enc_channels: tuple = (16, 16, 32)
    mid_channels: int = 32
    dec_channels: tuple = (16, 8)
    kernel: int = 3
    leaky_slope: float = 0.2

    def layer_table(self):
        e0, e1, e2 = self.enc_channels
        d1, d0 = self.dec_channels
        k = self.kernel
        return (
            ("enc0", 2, e0, k, 1),
            ("enc1", e0, e1, k, 2),
            ("enc2", e1, e2, k, 2),
            ("mid", e2, self.mid_channels, k, 1),
            ("dec1", self.mid_channels + e1, d1, k, 1),
            ("dec0", d1 + e0, d0, k, 1),
            ("head", d0, 3, 1, 1),
        )

    def param_layout(self):
        segs = []
        for name, cin, cout, k, _ in self.layer_table():
            segs.append((f"{name}.w", (cout, cin, k, k, k)))
            segs.append((f"{name}.b", (cout,)))
        return segs


def init_regnet(config: RegNetConfig, rng) -> "RegNet":
    """Hidden kernels uniform fan-in-scaled (variance 2/fan_in); head and biases zero.

    The zero head makes the untrained network predict an exactly zero DDF,
    i.e. start at the identity transform.
    """
    named = []
    for name, shape in config.param_layout():
        if name.endswith(".b") or name.startswith("head"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, shape).astype(np.float32)
        named.append((name, arr))
    return RegNet(config, ParamVector.from_segments(named))


class RegNet:
    """Registration network mapping a (moving, fixed) pair to a dense displacement field."""

    def __init__(self, config: RegNetConfig, params: ParamVector):
        self.config = config
        self.params = params

    def forward(self, params: ParamVector, moving_grid, fixed_grid, tape: Tape):
        """Record one forward pass; returns the (3,X,Y,Z) DDF node and the parameter leaves."""
        if moving_grid.shape != fixed_grid.shape:
            raise ValueError("moving and fixed grids must match")
        if any(n % 4 != 0 for n in moving_grid.shape):
            raise ValueError("grid extent must be divisible by 4")
        leaves = {
            name: Tensor(seg, tape) for name, seg in self.params_segments(params)
        }
        slope = self.config.leaky_slope

        def block(x, name, stride):
            y = conv3d(x, leaves[f"{name}.w"], stride=stride)
            y = add_channel_bias(y, leaves[f"{name}.b"])
            return y if name == "head" else leaky_relu(y, slope)

        x = constant(np.stack([moving_grid, fixed_grid]), tape)
        a0 = block(x, "enc0", 1)
        a1 = block(a0, "enc1", 2)
        a2 = block(a1, "enc2", 2)
        m = block(a2, "mid", 1)
        d1 = block(concat_channels([upsample_trilinear(m), a1]), "dec1", 1)
        d0 = block(concat_channels([upsample_trilinear(d1), a0]), "dec0", 1)
        ddf = block(d0, "head", 1)
        return ddf, leaves

    def params_segments(self, params: ParamVector):
        self.params.check_layout(params)
        return params.segments()

    def gather_grads(self, leaves) -> ParamVector:
        named = []
        for name, _, shape in self.params.layout:
            g = leaves[name].grad
            named.append((name, g if g is not None else np.zeros(shape, np.float32)))
        return ParamVector.from_segments(named)

    def predict_ddf(self, moving_grid, fixed_grid) -> np.ndarray:
        ddf, _ = self.forward(self.params, moving_grid, fixed_grid, Tape())
        return ddf.data


class DirectDdfModel:
    """The classical regime's transformation: the DDF itself is the parameter vector."""

    def __init__(self, grid_shape, params: ParamVector = None):
        self.grid_shape = tuple(grid_shape)
        if params is None:
            params = ParamVector.from_segments(
                [("ddf", np.zeros((3, *self.grid_shape), dtype=np.float32))]
            )
        self.params = params

    def forward(self, params: ParamVector, tape: Tape) -> Tensor:
        self.params.check_layout(params)
        return Tensor(params.segment("ddf"), tape)


# --- checkpoints ----------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(net: RegNet, prefix: str):
    """Text manifest + raw little-endian float32 blob; load(save(m)) is bit-exact."""
    cfg = net.config
    lines = [
        "format metareg-checkpoint-v1",
        f"enc_channels {' '.join(str(c) for c in cfg.enc_channels)}",
        f"mid_channels {cfg.mid_channels}",
        f"dec_channels {' '.join(str(c) for c in cfg.dec_channels)}",
        f"kernel {cfg.kernel}",
        f"leaky_slope {cfg.leaky_slope!r}",
        f"param_count {net.params.size}",
    ]
    for name, off, shape in net.params.layout:
        lines.append(f"segment {name} {off} {' '.join(str(s) for s in shape)}")
    with open(prefix + ".ckpt", "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(prefix + ".ckpt.raw", "wb") as f:
        f.write(net.params.values.astype("<f4").tobytes())


def load_checkpoint(prefix: str) -> RegNet:
    path = prefix + ".ckpt"
    if not os.path.exists(path):
        raise CheckpointError(f"missing checkpoint manifest {path}")
    fields = {}
    layout = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "segment":
                layout.append((parts[1], int(parts[2]), tuple(int(s) for s in parts[3:])))
            else:
                fields[parts[0]] = parts[1:]
    if fields.get("format") != ["metareg-checkpoint-v1"]:
        raise CheckpointError("unknown checkpoint format")
    cfg = RegNetConfig(
        enc_channels=tuple(int(c) for c in fields["enc_channels"]),
        mid_channels=int(fields["mid_channels"][0]),
        dec_channels=tuple(int(c) for c in fields["dec_channels"]),
        kernel=int(fields["kernel"][0]),
        leaky_slope=float(fields["leaky_slope"][0]),
    )
    count = int(fields["param_count"][0])
    blob = open(prefix + ".ckpt.raw", "rb").read()
    if len(blob) != 4 * count:
        raise CheckpointError(
            f"parameter blob holds {len(blob)} bytes, expected {4 * count}"
        )
    values = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    net = RegNet(cfg, ParamVector(values, layout))
    expected = [(f"{n}", s) for n, s in cfg.param_layout()]
    actual = [(n, tuple(s)) for n, _, s in net.params.layout]
    if expected != actual:
        raise CheckpointError("checkpoint layout does not match its architecture config")
    return net
