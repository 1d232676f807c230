"""Training objectives: magnitude, phase (anti-wrapped), complex, time,
and spectral-consistency losses with configurable weights.

The metric-discriminator term of the weighted sum is carried as a slot so
the sum keeps its full shape, but its weight is pinned to zero here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .spectral import istft, stft_rect
from .tensor import ShapeError, Tensor

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class LossWeights:
    metric: float = 0.0   # discriminator term: out of scope, always 0
    magnitude: float = 0.9
    phase: float = 0.3
    complex: float = 0.1
    time: float = 0.2
    consistency: float = 0.1

    def __post_init__(self):
        vals = (self.metric, self.magnitude, self.phase, self.complex,
                self.time, self.consistency)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if all(v == 0 for v in vals):
            raise ValueError("at least one loss weight must be nonzero")
        if self.metric != 0.0:
            raise ValueError("the metric loss is stubbed out; its weight must be 0")


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def magnitude_loss(est, ref):
    """Mean squared error between compressed-domain magnitudes."""
    _check_same_shape(est, ref, "magnitude_loss")
    diff = T.add(est, T.neg(ref))
    return T.mean_all(T.mul(diff, diff))


def anti_wrap(x):
    """|x - 2*pi*round(x / 2*pi)|: wrap-invariant absolute phase distance.

    round() is piecewise constant, so the gradient is that of |.| on the
    wrapped residual.
    """
    shift = TWO_PI * np.round(x.data / TWO_PI)
    return T.absolute(T.add(x, Tensor(-shift)))


def phase_loss(est, ref):
    """Anti-wrapped penalty on instantaneous phase, group delay (difference
    along frequency), and instantaneous angular frequency (difference along
    time); inputs are [B, F, T] in radians."""
    _check_same_shape(est, ref, "phase_loss")
    diff = T.add(est, T.neg(ref))
    ip = T.mean_all(anti_wrap(diff))
    gd = T.mean_all(anti_wrap(_diff_axis(diff, axis=1)))
    iaf = T.mean_all(anti_wrap(_diff_axis(diff, axis=2)))
    return T.add(T.add(ip, gd), iaf)


def _diff_axis(x, axis):
    n = x.shape[axis]
    hi = T.crop(x, axis, 1, n)
    lo = T.crop(x, axis, 0, n - 1)
    return T.add(hi, T.neg(lo))


def complex_loss(est_spec, ref_spec):
    """MSE over the rectangular form (m*cos(p), m*sin(p)) of two spectra."""
    er = T.mul(est_spec.magnitude, T.cos(est_spec.phase))
    ei = T.mul(est_spec.magnitude, T.sin(est_spec.phase))
    rr = T.mul(ref_spec.magnitude, T.cos(ref_spec.phase))
    ri = T.mul(ref_spec.magnitude, T.sin(ref_spec.phase))
    _check_same_shape(er, rr, "complex_loss")
    dr = T.add(er, T.neg(rr))
    di = T.add(ei, T.neg(ri))
    half = T.add(T.mean_all(T.mul(dr, dr)), T.mean_all(T.mul(di, di)))
    return T.mul_scalar(half, 0.5)


def time_loss(est, ref):
    """Mean absolute error between waveforms [B, N]."""
    _check_same_shape(est, ref, "time_loss")
    return T.mean_all(T.absolute(T.add(est, T.neg(ref))))


def consistency_loss(est_spec, target_len=None):
    """Distance of a spectrogram from the image of the analysis transform:
    MSE between its rectangular form and stft(istft(.))."""
    cfg = est_spec.config
    t_frames = est_spec.frames
    if target_len is None:
        if cfg.center:
            target_len = (t_frames - 1) * cfg.hop
        else:
            target_len = cfg.win_length + (t_frames - 1) * cfg.hop
    re = T.mul(est_spec.magnitude, T.cos(est_spec.phase))
    im = T.mul(est_spec.magnitude, T.sin(est_spec.phase))
    rect = T.stack([re, im], axis=1)
    wave = istft(est_spec, target_len)
    rect_rt = stft_rect(wave, cfg)
    if rect_rt.shape != rect.shape:
        rect_rt = T.crop(rect_rt, 3, 0, rect.shape[3])
    diff = T.add(rect, T.neg(rect_rt))
    return T.mean_all(T.mul(diff, diff))


def total_loss(mode, weights, magnitude=None, phase=None, complex_=None,
               time=None, consistency=None):
    """Weighted sum of the component losses.

    mode "old" uses the time term and drops consistency; mode "new" does
    the opposite. Missing components are treated as zero contributions.
    """
    if mode not in ("old", "new"):
        raise ValueError(f"unknown loss mode {mode!r}")
    total = Tensor(np.zeros(()))
    pairs = [
        (weights.magnitude, magnitude),
        (weights.phase, phase),
        (weights.complex, complex_),
    ]
    if mode == "old":
        pairs.append((weights.time, time))
    else:
        pairs.append((weights.consistency, consistency))
    for w, comp in pairs:
        if w != 0.0 and comp is not None:
            total = T.add(total, T.mul_scalar(comp, w))
    return total
