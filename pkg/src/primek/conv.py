"""Grouped, dilated 1-D and 2-D convolutions on the autodiff tensor.

Forward values follow the plain nested-loop definition of convolution
(cross-correlation convention, zero "same" padding for odd kernels);
the test suite holds them to an independently coded naive oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, _from_op, _accumulate, record_macs


@dataclass(frozen=True)
class ConvSpec:
    """Hyperparameters of one convolution layer.

    kernel / stride / dilation are ints for 1-D, pairs for 2-D.
    """

    in_channels: int
    out_channels: int
    kernel: object
    stride: object = 1
    dilation: object = 1
    groups: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.in_channels % self.groups != 0:
            raise ShapeError(
                f"in_channels {self.in_channels} not divisible by groups {self.groups}"
            )
        if self.out_channels % self.groups != 0:
            raise ShapeError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}"
            )
        for k in _as_tuple(self.kernel):
            if k < 1:
                raise ShapeError(f"kernel extent {k} < 1")
            if self.padding == "same" and k % 2 == 0:
                raise ShapeError(f"even kernel {k} cannot use same padding")
        for d in _as_tuple(self.dilation):
            if d < 1:
                raise ShapeError(f"dilation {d} < 1")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding policy {self.padding!r}")

    @property
    def is_depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    @property
    def is_pointwise(self):
        return self.groups == 1 and all(k == 1 for k in _as_tuple(self.kernel))


def _as_tuple(v):
    return v if isinstance(v, tuple) else (v,)


def _pair(v):
    return v if isinstance(v, tuple) else (v, v)


def _out_extent(n, k, s, d, padding):
    span = d * (k - 1) + 1
    if padding == "same":
        n = n + 2 * (d * (k - 1) // 2)
    if n < span:
        raise ShapeError(f"input extent {n} smaller than dilated kernel span {span}")
    return (n - span) // s + 1


def _check_bias(bias, c_out):
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------

def conv1d(x, spec, weight, bias=None):
    """x: [B, C_in, T], weight: [C_out, C_in/groups, K] -> [B, C_out, T']."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv1d expects [B, C, T], got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"channel axis mismatch: input has {x.shape[1]}, spec expects "
            f"{spec.in_channels}"
        )
    k = spec.kernel
    cin_g = spec.in_channels // spec.groups
    if weight.shape != (spec.out_channels, cin_g, k):
        raise ShapeError(
            f"weight shape {weight.shape} != ({spec.out_channels}, {cin_g}, {k})"
        )
    _check_bias(bias, spec.out_channels)

    b, _, t = x.shape
    s, d, g = spec.stride, spec.dilation, spec.groups
    pad = d * (k - 1) // 2 if spec.padding == "same" else 0
    t_out = _out_extent(t, k, s, d, spec.padding)
    cout_g = spec.out_channels // g

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    out = np.zeros((b, spec.out_channels, t_out), dtype=x.dtype)
    depthwise = spec.is_depthwise
    tap = lambda arr, kk: arr[:, :, kk * d: kk * d + s * (t_out - 1) + 1: s]

    for kk in range(k):
        seg = tap(xp, kk)
        if depthwise:
            out += weight.data[:, 0, kk].reshape(1, -1, 1) * seg
        else:
            for gi in range(g):
                ics = slice(gi * cin_g, (gi + 1) * cin_g)
                ocs = slice(gi * cout_g, (gi + 1) * cout_g)
                out[:, ocs] += np.matmul(weight.data[ocs, :, kk], seg[:, ics])
    if bias is not None:
        out += bias.data.reshape(1, -1, 1)
    record_macs(b * spec.out_channels * cin_g * k * t_out)

    def backward(gout):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for kk in range(k):
                dst = tap(gxp, kk)
                if depthwise:
                    dst += weight.data[:, 0, kk].reshape(1, -1, 1) * gout
                else:
                    for gi in range(g):
                        ics = slice(gi * cin_g, (gi + 1) * cin_g)
                        ocs = slice(gi * cout_g, (gi + 1) * cout_g)
                        dst[:, ics] += np.matmul(
                            weight.data[ocs, :, kk].T, gout[:, ocs]
                        )
            _accumulate(x, gxp[:, :, pad: pad + t] if pad else gxp)
        if weight.requires_grad:
            gw = np.zeros(weight.shape, dtype=weight.dtype)
            for kk in range(k):
                seg = tap(xp, kk)
                if depthwise:
                    gw[:, 0, kk] = (gout * seg).sum(axis=(0, 2))
                else:
                    for gi in range(g):
                        ics = slice(gi * cin_g, (gi + 1) * cin_g)
                        ocs = slice(gi * cout_g, (gi + 1) * cout_g)
                        gw[ocs, :, kk] = np.matmul(
                            gout[:, ocs], seg[:, ics].transpose(0, 2, 1)
                        ).sum(axis=0)
            _accumulate(weight, gw)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gout.sum(axis=(0, 2)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _from_op(out, parents, backward)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def conv2d(x, spec, weight, bias=None):
    """x: [B, C_in, T, F], weight: [C_out, C_in/groups, Kt, Kf]."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, T, F], got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"channel axis mismatch: input has {x.shape[1]}, spec expects "
            f"{spec.in_channels}"
        )
    kt, kf = _pair(spec.kernel)
    st, sf = _pair(spec.stride)
    dt, df = _pair(spec.dilation)
    g = spec.groups
    cin_g = spec.in_channels // g
    cout_g = spec.out_channels // g
    if weight.shape != (spec.out_channels, cin_g, kt, kf):
        raise ShapeError(
            f"weight shape {weight.shape} != ({spec.out_channels}, {cin_g}, {kt}, {kf})"
        )
    _check_bias(bias, spec.out_channels)

    b, _, t, f = x.shape
    pt = dt * (kt - 1) // 2 if spec.padding == "same" else 0
    pf = df * (kf - 1) // 2 if spec.padding == "same" else 0
    t_out = _out_extent(t, kt, st, dt, spec.padding)
    f_out = _out_extent(f, kf, sf, df, spec.padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (pf, pf))) if (pt or pf) else x.data
    out = np.zeros((b, spec.out_channels, t_out, f_out), dtype=x.dtype)
    depthwise = spec.is_depthwise
    tap = lambda arr, i, j: arr[
        :, :,
        i * dt: i * dt + st * (t_out - 1) + 1: st,
        j * df: j * df + sf * (f_out - 1) + 1: sf,
    ]

    for i in range(kt):
        for j in range(kf):
            seg = tap(xp, i, j)
            if depthwise:
                out += weight.data[:, 0, i, j].reshape(1, -1, 1, 1) * seg
            else:
                for gi in range(g):
                    ics = slice(gi * cin_g, (gi + 1) * cin_g)
                    ocs = slice(gi * cout_g, (gi + 1) * cout_g)
                    sflat = seg[:, ics].reshape(b, cin_g, t_out * f_out)
                    out[:, ocs] += np.matmul(
                        weight.data[ocs, :, i, j], sflat
                    ).reshape(b, cout_g, t_out, f_out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    record_macs(b * spec.out_channels * cin_g * kt * kf * t_out * f_out)

    def backward(gout):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kf):
                    dst = tap(gxp, i, j)
                    if depthwise:
                        dst += weight.data[:, 0, i, j].reshape(1, -1, 1, 1) * gout
                    else:
                        for gi in range(g):
                            ics = slice(gi * cin_g, (gi + 1) * cin_g)
                            ocs = slice(gi * cout_g, (gi + 1) * cout_g)
                            gflat = gout[:, ocs].reshape(b, cout_g, t_out * f_out)
                            dst[:, ics] += np.matmul(
                                weight.data[ocs, :, i, j].T, gflat
                            ).reshape(b, cin_g, t_out, f_out)
            if pt or pf:
                gxp = gxp[:, :, pt: pt + t, pf: pf + f]
            _accumulate(x, gxp)
        if weight.requires_grad:
            gw = np.zeros(weight.shape, dtype=weight.dtype)
            for i in range(kt):
                for j in range(kf):
                    seg = tap(xp, i, j)
                    if depthwise:
                        gw[:, 0, i, j] = (gout * seg).sum(axis=(0, 2, 3))
                    else:
                        for gi in range(g):
                            ics = slice(gi * cin_g, (gi + 1) * cin_g)
                            ocs = slice(gi * cout_g, (gi + 1) * cout_g)
                            gflat = gout[:, ocs].reshape(b, cout_g, t_out * f_out)
                            sflat = seg[:, ics].reshape(b, cin_g, t_out * f_out)
                            gw[ocs, :, i, j] = np.matmul(
                                gflat, sflat.transpose(0, 2, 1)
                            ).sum(axis=0)
            _accumulate(weight, gw)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gout.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _from_op(out, parents, backward)
