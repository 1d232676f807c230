"""Architectural units: channel attention, prime-kernel gated feed-forward,
dilated dense blocks, and the assembled two-stage magnitude/phase model.

Parameter-owning classes follow a tiny Module convention (named_params for
optimizers/checkpoints); the algebra of each unit lives in plain functions
where the contract is a formula over explicit weight tensors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .conv import ConvSpec, conv1d, conv2d
from .spectral import Spectrogram, SpectroConfig, compress, decompress, istft, stft
from .tensor import ShapeError, Tensor


def _is_prime(n):
    if n < 2:
        return False
    return all(n % p for p in range(2, int(n ** 0.5) + 1))


@dataclass(frozen=True)
class KernelGroup:
    """The four depthwise kernel sizes used by the gated unit."""

    sizes: tuple = (3, 11, 23, 31)

    def __post_init__(self):
        if len(self.sizes) != 4:
            raise ValueError(f"kernel group needs 4 sizes, got {self.sizes}")
        for k in self.sizes:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel size {k} must be odd and positive")
        composite = [k for k in self.sizes if not _is_prime(k)]
        if composite:
            warnings.warn(
                f"kernel sizes {composite} are not prime; multi-scale groups "
                "may have overlapping periodic responses"
            )


@dataclass(frozen=True)
class GpfcaConfig:
    channels: int = 64
    kernel_group: KernelGroup = field(default_factory=KernelGroup)
    ffn_expansion: int = 12
    attn_expansion: int = 2
    shared_dwc: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_expansion < 1:
            raise ValueError("ffn_expansion must be >= 1")
        hidden = self.ffn_expansion * self.channels
        if hidden % 4 != 0:
            raise ValueError(
                f"hidden width {hidden} (= expansion * channels) must be "
                "divisible by 4 for channel chunking"
            )


@dataclass(frozen=True)
class DenseBlockSpec:
    depth: int = 4
    channels: int = 64
    kernel: int = 3
    dilations: tuple = None
    variant: str = "DSDDB"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.variant not in ("DDB", "DSDDB"):
            raise ValueError(f"unknown dense block variant {self.variant!r}")
        dils = self.dilations
        if dils is None:
            dils = tuple(2 ** i for i in range(self.depth))
            object.__setattr__(self, "dilations", dils)
        if len(dils) != self.depth:
            raise ValueError(
                f"dilation schedule length {len(dils)} != depth {self.depth}"
            )


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    dense: DenseBlockSpec = field(default_factory=DenseBlockSpec)
    gpfca: GpfcaConfig = field(default_factory=GpfcaConfig)
    ts_block_count: int = 2
    ts_count_unit: str = "pair"  # "pair" = time+freq GPFCA, or "instance"
    mask_max: float = 2.0
    phase_input_skip: bool = True
    identity_mode: bool = False

    def __post_init__(self):
        if self.ts_count_unit not in ("pair", "instance"):
            raise ValueError(f"unknown ts_count_unit {self.ts_count_unit!r}")
        if self.gpfca.channels != self.channels:
            raise ValueError(
                f"gpfca channels {self.gpfca.channels} != model channels "
                f"{self.channels}"
            )
        if self.dense.channels != self.channels:
            raise ValueError(
                f"dense block channels {self.dense.channels} != model channels "
                f"{self.channels}"
            )

    @property
    def ts_instances(self):
        if self.ts_count_unit == "pair":
            return 2 * self.ts_block_count
        return self.ts_block_count


# ---------------------------------------------------------------------------
# module base and initializers
# ---------------------------------------------------------------------------

class Module:
    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, t):
        self._params[name] = t
        return t

    def child(self, name, mod):
        self._children[name] = mod
        return mod

    def named_params(self, prefix=""):
        out = {}
        for n, t in self._params.items():
            out[prefix + n] = t
        for n, m in self._children.items():
            out.update(m.named_params(prefix + n + "."))
        return out

    def param_count(self):
        return sum(p.size for p in self.named_params().values())

    def conv_weight_count(self):
        """Convolution weights only (the accounting the formulas use)."""
        return sum(
            p.size
            for n, p in self.named_params().items()
            if n.endswith(".weight") or n.endswith("weight")
        )

    def zero_grad(self):
        for p in self.named_params().values():
            p.grad = None


def _winit(rng, shape, fan_in):
    std = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


class Norm(Module):
    """Zero-mean/unit-variance over the given axes with per-channel affine."""

    def __init__(self, channels, axes, eps=1e-5):
        super().__init__()
        self.axes = axes
        self.eps = eps
        self.gain = self.param("gain", _ones(channels))
        self.bias = self.param("bias", _zeros(channels))

    def forward(self, x):
        return T.normalize(x, self.axes, self.gain, self.bias, self.eps)


class Conv1d(Module):
    def __init__(self, rng, spec, bias=True):
        super().__init__()
        self.spec = spec
        cin_g = spec.in_channels // spec.groups
        fan_in = cin_g * spec.kernel
        self.weight = self.param(
            "weight", _winit(rng, (spec.out_channels, cin_g, spec.kernel), fan_in)
        )
        self.bias = self.param("bias", _zeros(spec.out_channels)) if bias else None

    def forward(self, x):
        return conv1d(x, self.spec, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, spec, bias=True):
        super().__init__()
        self.spec = spec
        kt, kf = spec.kernel if isinstance(spec.kernel, tuple) else (spec.kernel,) * 2
        cin_g = spec.in_channels // spec.groups
        fan_in = cin_g * kt * kf
        self.weight = self.param(
            "weight", _winit(rng, (spec.out_channels, cin_g, kt, kf), fan_in)
        )
        self.bias = self.param("bias", _zeros(spec.out_channels)) if bias else None

    def forward(self, x):
        return conv2d(x, self.spec, self.weight, self.bias)


# ---------------------------------------------------------------------------
# simplified channel attention
# ---------------------------------------------------------------------------

def sca_forward(x, pwc_weight, pwc_bias=None):
    """x ⊙ broadcast(PWC(mean over time)): channel reweighting on [B, C, T]."""
    c = x.shape[1]
    if pwc_weight.shape != (c, c):
        raise ShapeError(
            f"channel-mixing weight {pwc_weight.shape} does not match C={c}"
        )
    pooled = T.adaptive_avg_pool_to_one(x)  # [B, C, 1]
    spec = ConvSpec(c, c, 1)
    weights = conv1d(pooled, spec, T.reshape(pwc_weight, (c, c, 1)), pwc_bias)
    return T.mul(x, weights)


class ChannelAttention(Module):
    def __init__(self, rng, channels):
        super().__init__()
        self.weight = self.param("weight", _winit(rng, (channels, channels), channels))
        self.bias = self.param("bias", _zeros(channels))

    def forward(self, x):
        return sca_forward(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# depthwise fusion gate and the grouped gated unit
# ---------------------------------------------------------------------------

def dfg_forward(x, k, dwc_gate_w, dwc_value_w, pwc_w,
                dwc_gate_b=None, dwc_value_b=None, pwc_b=None):
    """Gate a depthwise-filtered branch with a pointwise-projected one:
    PWC(DWC_k(x)) ⊙ DWC_k(x) on [B, Cg, T].

    The two depthwise applications are independent layers by default;
    pass the same weights twice for the shared reading.
    """
    if k % 2 == 0:
        raise ShapeError(f"even kernel {k} is not allowed (same padding)")
    c = x.shape[1]
    dspec = ConvSpec(c, c, k, groups=c)
    pspec = ConvSpec(c, c, 1)
    gate = conv1d(x, dspec, dwc_gate_w, dwc_gate_b)
    value = conv1d(x, dspec, dwc_value_w, dwc_value_b)
    return T.mul(conv1d(gate, pspec, pwc_w, pwc_b), value)


class FusionGate(Module):
    def __init__(self, rng, channels, kernel, shared_dwc=False):
        super().__init__()
        self.kernel = kernel
        self.shared_dwc = shared_dwc
        self.dwc_gate = self.child(
            "dwc_gate", Conv1d(rng, ConvSpec(channels, channels, kernel, groups=channels))
        )
        if not shared_dwc:
            self.dwc_value = self.child(
                "dwc_value",
                Conv1d(rng, ConvSpec(channels, channels, kernel, groups=channels)),
            )
        else:
            self.dwc_value = self.dwc_gate
        self.pwc = self.child("pwc", Conv1d(rng, ConvSpec(channels, channels, 1)))

    def forward(self, x):
        return dfg_forward(
            x, self.kernel,
            self.dwc_gate.weight, self.dwc_value.weight, self.pwc.weight,
            self.dwc_gate.bias, self.dwc_value.bias, self.pwc.bias,
        )


class GatedUnit(Module):
    """Channel-quartered multi-scale gating: one fusion gate per quarter."""

    def __init__(self, rng, channels, kernel_group, shared_dwc=False):
        super().__init__()
        if channels % 4 != 0:
            raise ShapeError(f"channels {channels} not divisible by 4")
        self.kernel_group = kernel_group
        self.gates = [
            self.child(f"gate{i}", FusionGate(rng, channels // 4, k, shared_dwc))
            for i, k in enumerate(kernel_group.sizes)
        ]

    def forward(self, x):
        parts = T.chunk4(x)
        return T.concat_channels([g.forward(p) for g, p in zip(self.gates, parts)])


def gpgu_forward(x, unit):
    return unit.forward(x)


# ---------------------------------------------------------------------------
# feed-forward and the full residual block
# ---------------------------------------------------------------------------

class FeedForward(Module):
    """Pointwise expansion -> grouped multi-scale gating -> pointwise fusion."""

    def __init__(self, rng, cfg):
        super().__init__()
        c = cfg.channels
        hidden = cfg.ffn_expansion * c
        self.expand = self.child("expand", Conv1d(rng, ConvSpec(c, hidden, 1)))
        self.gpgu = self.child(
            "gpgu", GatedUnit(rng, hidden, cfg.kernel_group, cfg.shared_dwc)
        )
        self.fuse = self.child("fuse", Conv1d(rng, ConvSpec(hidden, c, 1)))

    def forward(self, x):
        return self.fuse.forward(self.gpgu.forward(self.expand.forward(x)))


def gpfn_forward(x, ffn):
    return ffn.forward(x)


class GpfcaBlock(Module):
    """Residual pairing of a channel-attention sub-layer and the gated
    feed-forward sub-layer, pre-norm, with zero-initialized residual scales.
    """

    def __init__(self, rng, cfg):
        super().__init__()
        c = cfg.channels
        wide = cfg.attn_expansion * c
        self.cfg = cfg
        self.norm1 = self.child("norm1", Norm(c, axes=(1,), eps=cfg.norm_eps))
        self.inflate = self.child("inflate", Conv1d(rng, ConvSpec(c, wide, 1)))
        self.dwc = self.child(
            "dwc", Conv1d(rng, ConvSpec(wide, wide, 3, groups=wide))
        )
        self.sca = self.child("sca", ChannelAttention(rng, wide // 2))
        self.project = self.child("project", Conv1d(rng, ConvSpec(wide // 2, c, 1)))
        self.scale1 = self.param("scale1", _zeros(c))
        self.norm2 = self.child("norm2", Norm(c, axes=(1,), eps=cfg.norm_eps))
        self.ffn = self.child("ffn", FeedForward(rng, cfg))
        self.scale2 = self.param("scale2", _zeros(c))

    def forward(self, x):
        h = self.norm1.forward(x)
        h = self.inflate.forward(h)
        h = self.dwc.forward(h)
        a, b = T.chunk(h, 2, axis=1)  # simple multiplicative gate
        h = T.mul(a, b)
        h = self.sca.forward(h)
        h = self.project.forward(h)
        x = T.add(x, T.scale_channels(h, self.scale1))
        h = self.norm2.forward(x)
        h = self.ffn.forward(h)
        return T.add(x, T.scale_channels(h, self.scale2))


def gpfca_forward(x, block):
    return block.forward(x)


# ---------------------------------------------------------------------------
# dilated dense blocks
# ---------------------------------------------------------------------------

class DenseBlock(Module):
    """Densely connected dilated 2-D stack; layer i sees the block input
    concatenated with every previous layer output (i*C channels in).

    variant DDB uses full dilated convolutions; DSDDB factors each into a
    depthwise dilated convolution followed by a pointwise one.
    """

    def __init__(self, rng, spec):
        super().__init__()
        self.spec = spec
        c, k = spec.channels, spec.kernel
        self.layers = []
        for i, d in enumerate(spec.dilations, start=1):
            cin = i * c
            entry = {}
            if spec.variant == "DDB":
                entry["conv"] = self.child(
                    f"layer{i}.conv",
                    Conv2d(rng, ConvSpec(cin, c, (k, k), dilation=(d, d))),
                )
            else:
                entry["depthwise"] = self.child(
                    f"layer{i}.depthwise",
                    Conv2d(
                        rng,
                        ConvSpec(cin, cin, (k, k), dilation=(d, d), groups=cin),
                        bias=False,
                    ),
                )
                entry["pointwise"] = self.child(
                    f"layer{i}.pointwise", Conv2d(rng, ConvSpec(cin, c, (1, 1)))
                )
            entry["norm"] = self.child(f"layer{i}.norm", Norm(c, axes=(2, 3)))
            entry["alpha"] = self.param(f"layer{i}.alpha", Tensor(
                np.full(c, 0.25), requires_grad=True))
            self.layers.append(entry)

    def forward(self, x):
        feats = [x]
        out = x
        for entry in self.layers:
            inp = feats[0] if len(feats) == 1 else T.concat_channels(feats)
            if self.spec.variant == "DDB":
                h = entry["conv"].forward(inp)
            else:
                h = entry["pointwise"].forward(entry["depthwise"].forward(inp))
            h = entry["norm"].forward(h)
            out = T.prelu(h, entry["alpha"])
            feats.append(out)
        return out

    def conv_weight_count(self):
        total = 0
        for entry in self.layers:
            for key in ("conv", "depthwise", "pointwise"):
                if key in entry:
                    total += entry[key].weight.size
        return total


def ddb_forward(x, block):
    if block.spec.variant != "DDB":
        raise ValueError("block is not a DDB")
    return block.forward(x)


def dsddb_forward(x, block):
    if block.spec.variant != "DSDDB":
        raise ValueError("block is not a DSDDB")
    return block.forward(x)


# ---------------------------------------------------------------------------
# encoder / decoders / assembled model
# ---------------------------------------------------------------------------

class Encoder(Module):
    """Stem -> dense block -> stride-2 frequency downsampling."""

    def __init__(self, rng, cfg):
        super().__init__()
        c = cfg.channels
        self.stem = self.child("stem", Conv2d(rng, ConvSpec(2, c, (1, 1))))
        self.stem_norm = self.child("stem_norm", Norm(c, axes=(2, 3)))
        self.stem_alpha = self.param("stem_alpha", Tensor(np.full(c, 0.25), requires_grad=True))
        self.dense = self.child("dense", DenseBlock(rng, cfg.dense))
        self.down = self.child(
            "down", Conv2d(rng, ConvSpec(c, c, (3, 3), stride=(1, 2)))
        )
        self.down_norm = self.child("down_norm", Norm(c, axes=(2, 3)))
        self.down_alpha = self.param("down_alpha", Tensor(np.full(c, 0.25), requires_grad=True))

    def forward(self, x):
        h = T.prelu(self.stem_norm.forward(self.stem.forward(x)), self.stem_alpha)
        h = self.dense.forward(h)
        return T.prelu(self.down_norm.forward(self.down.forward(h)), self.down_alpha)


class _DecoderCore(Module):
    def __init__(self, rng, cfg):
        super().__init__()
        c = cfg.channels
        self.dense = self.child("dense", DenseBlock(rng, cfg.dense))
        self.conv = self.child("conv", Conv2d(rng, ConvSpec(c, c, (3, 3))))
        self.norm = self.child("norm", Norm(c, axes=(2, 3)))
        self.alpha = self.param("alpha", Tensor(np.full(c, 0.25), requires_grad=True))

    def forward(self, h, f_target):
        h = self.dense.forward(h)
        h = T.repeat_axis(h, axis=3, times=2)  # undo the stride-2 downsampling
        if h.shape[3] != f_target:
            h = T.crop(h, axis=3, start=0, stop=f_target)
        return T.prelu(self.norm.forward(self.conv.forward(h)), self.alpha)


class MaskDecoder(Module):
    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        self.core = self.child("core", _DecoderCore(rng, cfg))
        self.head = self.child("head", Conv2d(rng, ConvSpec(cfg.channels, 1, (1, 1))))
        # start at mask == 1 so the untrained model is magnitude-neutral
        self.head.weight.data[:] = 0.0

    def forward(self, h, f_target):
        z = self.head.forward(self.core.forward(h, f_target))
        mask = T.mul_scalar(T.sigmoid(z), self.cfg.mask_max)
        return _to_bft(mask)


class PhaseDecoder(Module):
    """Pseudo real/imaginary component pair combined by atan2.

    With phase_input_skip the pair is offset by the noisy unit phasor with
    a learnable gain, so the untrained head reproduces the input phase.
    """

    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        self.core = self.child("core", _DecoderCore(rng, cfg))
        self.head_real = self.child(
            "head_real", Conv2d(rng, ConvSpec(cfg.channels, 1, (1, 1)))
        )
        self.head_imag = self.child(
            "head_imag", Conv2d(rng, ConvSpec(cfg.channels, 1, (1, 1)))
        )
        if cfg.phase_input_skip:
            self.head_real.weight.data[:] = 0.0
            self.head_imag.weight.data[:] = 0.0
            self.skip_gain = self.param("skip_gain", _ones(1))

    def forward(self, h, noisy_phase_bft):
        h = self.core.forward(h, noisy_phase_bft.shape[1])
        re = self.head_real.forward(h)
        im = self.head_imag.forward(h)
        if self.cfg.phase_input_skip:
            ph = _to_b1tf(noisy_phase_bft)
            re = T.add(re, T.scale_channels(T.cos(ph), self.skip_gain))
            im = T.add(im, T.scale_channels(T.sin(ph), self.skip_gain))
        phase = T.atan2(im, re)
        phase.data[phase.data == -np.pi] = np.pi  # keep range (-pi, pi]
        return _to_bft(phase)


def _to_bft(x):
    """[B, 1, T, F] -> [B, F, T]."""
    return T.transpose(T.reshape(x, (x.shape[0], x.shape[2], x.shape[3])), (0, 2, 1))


def _to_b1tf(x):
    """[B, F, T] -> [B, 1, T, F]."""
    y = T.transpose(x, (0, 2, 1))
    return T.reshape(y, (y.shape[0], 1, y.shape[1], y.shape[2]))


class EnhancementModel(Module):
    """Encoder -> alternating time/frequency sequence blocks -> two heads."""

    def __init__(self, cfg, rng=None, seed=0):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = self.child("encoder", Encoder(rng, cfg))
        self.ts_blocks = []
        for i in range(cfg.ts_instances):
            axis = "time" if i % 2 == 0 else "freq"
            blk = self.child(f"ts{i}_{axis}", GpfcaBlock(rng, cfg.gpfca))
            self.ts_blocks.append((axis, blk))
        self.mask_decoder = self.child("mask_decoder", MaskDecoder(rng, cfg))
        self.phase_decoder = self.child("phase_decoder", PhaseDecoder(rng, cfg))

    def forward(self, compressed):
        """compressed: Spectrogram with power-law compressed magnitude.

        Returns (mask [B, F, T] in (0, mask_max), phase [B, F, T]).
        """
        mag, phase = compressed.magnitude, compressed.phase
        if self.cfg.identity_mode:
            return Tensor(np.ones(mag.shape)), Tensor(np.array(phase.data))
        x = T.stack([T.transpose(mag, (0, 2, 1)), T.transpose(phase, (0, 2, 1))],
                    axis=1)  # [B, 2, T, F]
        h = self.encoder.forward(x)
        b, c, t, f = h.shape
        for axis, blk in self.ts_blocks:
            if axis == "time":
                seq = T.reshape(T.transpose(h, (0, 3, 1, 2)), (b * f, c, t))
                seq = blk.forward(seq)
                h = T.transpose(T.reshape(seq, (b, f, c, t)), (0, 2, 3, 1))
            else:
                seq = T.reshape(T.transpose(h, (0, 2, 1, 3)), (b * t, c, f))
                seq = blk.forward(seq)
                h = T.transpose(T.reshape(seq, (b, t, c, f)), (0, 2, 1, 3))
        mask = self.mask_decoder.forward(h, phase.shape[1])
        phase_hat = self.phase_decoder.forward(h, phase)
        return mask, phase_hat


def model_forward(compressed, model):
    return model.forward(compressed)


def enhance(noisy_wave, model, cfg):
    """Full pipeline: analysis, masking, phase estimation, resynthesis.

    noisy_wave: Tensor [B, N]; returns Tensor [B, N].
    """
    n = noisy_wave.shape[-1]
    spec = stft(noisy_wave, cfg)
    comp = compress(spec)
    mask, phase_hat = model.forward(comp)
    mag_hat_c = T.mul(mask, comp.magnitude)
    est = decompress(Spectrogram(mag_hat_c, phase_hat, cfg))
    return istft(est, n)


# ---------------------------------------------------------------------------
# self-attention reference (memory-scaling benchmark only)
# ---------------------------------------------------------------------------

class AttentionReference(Module):
    """Minimal single-head self-attention; exists solely to exhibit the
    quadratic activation-memory growth the sequence blocks avoid.
    Forward-only, no gradient support.
    """

    def __init__(self, rng, channels):
        super().__init__()
        c = channels
        self.wq = self.param("wq", _winit(rng, (c, c), c))
        self.wk = self.param("wk", _winit(rng, (c, c), c))
        self.wv = self.param("wv", _winit(rng, (c, c), c))

    def forward(self, x):
        xd = x.data if isinstance(x, Tensor) else x
        c = xd.shape[1]
        q = Tensor(np.einsum("oc,bct->bot", self.wq.data, xd))
        k = Tensor(np.einsum("oc,bct->bot", self.wk.data, xd))
        v = Tensor(np.einsum("oc,bct->bot", self.wv.data, xd))
        scores = Tensor(np.einsum("bct,bcs->bts", q.data, k.data) / np.sqrt(c))
        m = scores.data.max(axis=-1, keepdims=True)
        e = Tensor(np.exp(scores.data - m))
        attn = Tensor(e.data / e.data.sum(axis=-1, keepdims=True))
        return Tensor(np.einsum("bts,bcs->bct", attn.data, v.data))
