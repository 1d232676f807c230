"""STFT/iSTFT front-end, magnitude-phase handling, and WAV file I/O.

The analysis/synthesis pair is implemented as tape operations with exact
linear adjoints, so waveform-domain and consistency losses backpropagate
through it. A naive O(n^2) DFT is kept alongside as the oracle for the
fast transform.
"""

from __future__ import annotations

import wave as _wavemod
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    _from_op,
    _accumulate,
    atan2,
    cos,
    mul,
    powf,
    sin,
    stack,
)


class AudioIOError(IOError):
    """Raised for malformed or unsupported audio files."""


class ColaError(ValueError):
    """Raised when the window/hop pair violates constant overlap-add."""


def hann_window(length):
    # periodic form; satisfies COLA for hop = length/2^k
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def rect_window(length):
    return np.ones(length)


_WINDOWS = {"hann": hann_window, "rect": rect_window}


@dataclass(frozen=True)
class SpectroConfig:
    fft_size: int = 400
    win_length: int = 400
    hop: int = 100
    window: str = "hann"
    sample_rate: int = 16000
    segment_seconds: float = 2.0
    compression_exponent: float = 0.3
    center: bool = True
    cola_tol: float = 1e-10

    def __post_init__(self):
        if self.win_length > self.fft_size:
            raise ValueError(
                f"win_length {self.win_length} exceeds fft_size {self.fft_size}"
            )
        if self.hop > self.win_length:
            raise ValueError(f"hop {self.hop} exceeds win_length {self.win_length}")
        if not 0.0 < self.compression_exponent <= 1.0:
            raise ValueError("compression_exponent must lie in (0, 1]")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window kind {self.window!r}")
        dev = self.cola_deviation()
        if dev > self.cola_tol:
            raise ColaError(
                f"window {self.window!r} with hop {self.hop} is not COLA "
                f"(squared-window overlap deviates by {dev:.3e})"
            )

    @property
    def bins(self):
        return self.fft_size // 2 + 1

    @property
    def segment_samples(self):
        return int(round(self.segment_seconds * self.sample_rate))

    def analysis_window(self):
        return _WINDOWS[self.window](self.win_length)

    def cola_deviation(self):
        """Max relative deviation of the overlap-added squared window."""
        w2 = self.analysis_window() ** 2
        n_frames = 8 * (self.win_length // self.hop) + 8
        total = np.zeros(self.win_length + (n_frames - 1) * self.hop)
        for m in range(n_frames):
            total[m * self.hop: m * self.hop + self.win_length] += w2
        interior = total[self.win_length: -self.win_length]
        mean = interior.mean()
        return float(np.abs(interior - mean).max() / mean)

    def frame_count(self, n_samples):
        n = n_samples + (2 * (self.fft_size // 2) if self.center else 0)
        if n < self.win_length:
            raise ShapeError(
                f"signal of {n_samples} samples is shorter than the analysis "
                f"window ({self.win_length}) and centre padding is off"
            )
        return (n - self.win_length) // self.hop + 1


@dataclass
class Spectrogram:
    """Magnitude (nonnegative) and phase (radians) as [B, F, T] tensors."""

    magnitude: Tensor
    phase: Tensor
    config: SpectroConfig

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ShapeError(
                f"magnitude {self.magnitude.shape} vs phase {self.phase.shape}"
            )
        if self.magnitude.shape[1] != self.config.bins:
            raise ShapeError(
                f"frequency axis {self.magnitude.shape[1]} != "
                f"{self.config.bins} bins of the config"
            )

    @property
    def frames(self):
        return self.magnitude.shape[2]


# ---------------------------------------------------------------------------
# naive DFT oracle
# ---------------------------------------------------------------------------

def naive_rdft(frame):
    """O(n^2) real-input DFT: returns (re, im) arrays of length n//2 + 1.

    Reference oracle for the fast transform used by stft().
    """
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.shape[-1]
    k = np.arange(n // 2 + 1)
    t = np.arange(n)
    ang = 2.0 * np.pi * np.outer(k, t) / n
    return frame @ np.cos(ang).T, -(frame @ np.sin(ang).T)


# ---------------------------------------------------------------------------
# framing helpers
# ---------------------------------------------------------------------------

def _reflect_pad(x, p):
    return np.pad(x, ((0, 0), (p, p)), mode="reflect")


def _reflect_fold(gpad, p, n):
    g = gpad[:, p: p + n].copy()
    g[:, 1: p + 1] += gpad[:, :p][:, ::-1]
    g[:, n - 1 - p: n - 1] += gpad[:, p + n:][:, ::-1]
    return g


def _frame(xp, cfg, t_frames):
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop * np.arange(t_frames)[:, None]
    return xp[:, idx]  # [B, T, win]


def _rfft_bin_scale(fft_size):
    scale = np.full(fft_size // 2 + 1, 2.0)
    scale[0] = 1.0
    if fft_size % 2 == 0:
        scale[-1] = 1.0
    return scale


# ---------------------------------------------------------------------------
# stft / istft tape operations (rectangular form)
# ---------------------------------------------------------------------------

def stft_rect(wave, cfg):
    """wave [B, N] -> rectangular spectrogram [B, 2, F, T] (re, im)."""
    if wave.data.ndim != 2:
        raise ShapeError(f"stft expects [B, N], got {wave.shape}")
    n = wave.shape[1]
    t_frames = cfg.frame_count(n)
    p = cfg.fft_size // 2 if cfg.center else 0
    win = cfg.analysis_window()

    xp = _reflect_pad(wave.data, p) if p else wave.data
    frames = _frame(xp, cfg, t_frames) * win  # [B, T, win]
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    out = np.stack(
        [spec.real.transpose(0, 2, 1), spec.imag.transpose(0, 2, 1)], axis=1
    )

    def backward(g):
        if not wave.requires_grad:
            return
        h = g[:, 0].transpose(0, 2, 1) + 1j * g[:, 1].transpose(0, 2, 1)
        h = h / _rfft_bin_scale(cfg.fft_size)
        frame_grad = cfg.fft_size * np.fft.irfft(h, n=cfg.fft_size, axis=-1)
        frame_grad = frame_grad[..., : cfg.win_length] * win
        gpad = np.zeros_like(xp)
        for m in range(t_frames):
            gpad[:, m * cfg.hop: m * cfg.hop + cfg.win_length] += frame_grad[:, m]
        _accumulate(wave, _reflect_fold(gpad, p, n) if p else gpad)

    return _from_op(out, (wave,), backward)


def istft_rect(rect, cfg, target_len):
    """Inverse of stft_rect by windowed overlap-add: [B,2,F,T] -> [B, N]."""
    if rect.data.ndim != 4 or rect.shape[1] != 2 or rect.shape[2] != cfg.bins:
        raise ShapeError(
            f"istft expects [B, 2, {cfg.bins}, T], got {rect.shape}"
        )
    b, _, _, t_frames = rect.shape
    win = cfg.analysis_window()
    hop, fft, wl = cfg.hop, cfg.fft_size, cfg.win_length
    full = wl + (t_frames - 1) * hop
    p = fft // 2 if cfg.center else 0
    if p + target_len > full:
        raise ShapeError(
            f"requested {target_len} samples but only {full - p} reconstructible"
        )

    wss = np.zeros(full)
    for m in range(t_frames):
        wss[m * hop: m * hop + wl] += win * win
    wss = np.maximum(wss, 1e-12)

    z = rect.data[:, 0].transpose(0, 2, 1) + 1j * rect.data[:, 1].transpose(0, 2, 1)
    frames = np.fft.irfft(z, n=fft, axis=-1)[..., :wl] * win
    y = np.zeros((b, full))
    for m in range(t_frames):
        y[:, m * hop: m * hop + wl] += frames[:, m]
    y /= wss
    out = np.ascontiguousarray(y[:, p: p + target_len])

    def backward(g):
        if not rect.requires_grad:
            return
        gy = np.zeros((b, full))
        gy[:, p: p + target_len] = g
        gy /= wss
        idx = np.arange(wl)[None, :] + hop * np.arange(t_frames)[:, None]
        frame_grad = gy[:, idx] * win  # [B, T, win]
        spec = np.fft.rfft(frame_grad, n=fft, axis=-1)
        scale = _rfft_bin_scale(fft) / fft
        gre = (spec.real * scale).transpose(0, 2, 1)
        gim = (spec.imag * scale).transpose(0, 2, 1)
        gim[:, 0] = 0.0  # irfft ignores imaginary parts of the DC bin
        if fft % 2 == 0:
            gim[:, -1] = 0.0
        _accumulate(rect, np.stack([gre, gim], axis=1))

    return _from_op(out, (rect,), backward)


# ---------------------------------------------------------------------------
# magnitude/phase API
# ---------------------------------------------------------------------------

def stft(wave, cfg):
    """wave [B, N] tensor (or array) -> Spectrogram with exact mag/phase."""
    if not isinstance(wave, Tensor):
        wave = Tensor(np.atleast_2d(np.asarray(wave, dtype=np.float64)))
    rect = stft_rect(wave, cfg)
    re, im = rect.data[:, 0], rect.data[:, 1]
    mag = Tensor(np.hypot(re, im))
    ph = np.arctan2(im, re)
    ph[ph == -np.pi] = np.pi  # keep range (-pi, pi]
    return Spectrogram(mag, Tensor(ph), cfg)


def istft(spec, target_len):
    """Spectrogram -> waveform [B, N]; differentiable in mag and phase."""
    cfg = spec.config
    re = mul(spec.magnitude, cos(spec.phase))
    im = mul(spec.magnitude, sin(spec.phase))
    rect = stack([re, im], axis=1)
    return istft_rect(rect, cfg, target_len)


def compress(spec):
    """Power-law magnitude compression m -> m^c; phase untouched."""
    c = spec.config.compression_exponent
    mag = spec.magnitude if c == 1.0 else powf(spec.magnitude, c)
    return Spectrogram(mag, spec.phase, spec.config)


def decompress(spec):
    c = spec.config.compression_exponent
    mag = spec.magnitude if c == 1.0 else powf(spec.magnitude, 1.0 / c)
    return Spectrogram(mag, spec.phase, spec.config)


# ---------------------------------------------------------------------------
# WAV I/O (RIFF / PCM16)
# ---------------------------------------------------------------------------

def wav_read(path):
    """Read a PCM16 WAV file -> (Tensor [1, N] in [-1, 1), sample_rate)."""
    try:
        with _wavemod.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            sampwidth = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except (_wavemod.Error, EOFError) as exc:
        raise AudioIOError(f"{path}: malformed RIFF/WAV file ({exc})") from exc
    if sampwidth != 2:
        raise AudioIOError(
            f"{path}: unsupported bit depth {8 * sampwidth}; only 16-bit PCM"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        warnings.warn(f"{path}: downmixing {n_channels} channels by averaging")
        samples = samples.reshape(-1, n_channels).mean(axis=1)
    return Tensor(samples[None, :]), rate


def wav_write(path, wave, sample_rate):
    data = wave.data if isinstance(wave, Tensor) else np.asarray(wave)
    data = np.asarray(data, dtype=np.float64).reshape(-1)
    quantized = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    with _wavemod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(quantized.tobytes())
