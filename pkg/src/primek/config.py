"""Flat key-value configuration: parsing, canonical dumping, hashing.

The file format is one `key = value` pair per line, `#` comments allowed.
Every run prints the hash of the resolved configuration so results can be
tied back to an exact setup.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .blocks import DenseBlockSpec, GpfcaConfig, KernelGroup, ModelConfig
from .losses import LossWeights
from .spectral import SpectroConfig
from .trainer import OptConfig, ToyTaskSpec


class ConfigError(ValueError):
    def __init__(self, message, line_no=None, key=None):
        loc = []
        if line_no is not None:
            loc.append(f"line {line_no}")
        if key is not None:
            loc.append(f"key {key!r}")
        prefix = f"[{', '.join(loc)}] " if loc else ""
        super().__init__(prefix + message)
        self.line_no = line_no
        self.key = key


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    spectro: SpectroConfig = field(default_factory=SpectroConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    opt: OptConfig = field(default_factory=OptConfig)
    task: ToyTaskSpec = field(default_factory=ToyTaskSpec)
    loss_mode: str = "new"
    train_steps: int = 2000
    batch_size: int = 2


def tiny_run_config():
    """Desk-scale defaults: small model, short segments, fast steps."""
    channels = 8
    return RunConfig(
        model=ModelConfig(
            channels=channels,
            dense=DenseBlockSpec(depth=2, channels=channels, dilations=(1, 2)),
            gpfca=GpfcaConfig(channels=channels, ffn_expansion=2),
            ts_block_count=1,
        ),
        spectro=SpectroConfig(
            fft_size=128, win_length=128, hop=32, segment_seconds=0.128
        ),
        task=ToyTaskSpec(segment_samples=2048),
    )


def default_run_config():
    """Full-scale defaults calibrated to the published model size."""
    return RunConfig()


_PRESETS = {"default": default_run_config, "tiny": tiny_run_config}


# ---------------------------------------------------------------------------
# flat representation
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def dump(cfg):
    """Canonical flat text form of a RunConfig (sorted keys)."""
    m, sp, w, o, t = cfg.model, cfg.spectro, cfg.weights, cfg.opt, cfg.task
    pairs = {
        "model.channels": m.channels,
        "model.ts_block_count": m.ts_block_count,
        "model.ts_count_unit": m.ts_count_unit,
        "model.mask_max": m.mask_max,
        "model.phase_input_skip": m.phase_input_skip,
        "model.identity_mode": m.identity_mode,
        "dense.depth": m.dense.depth,
        "dense.kernel": m.dense.kernel,
        "dense.dilations": m.dense.dilations,
        "dense.variant": m.dense.variant,
        "gpfca.ffn_expansion": m.gpfca.ffn_expansion,
        "gpfca.attn_expansion": m.gpfca.attn_expansion,
        "gpfca.kernel_group": m.gpfca.kernel_group.sizes,
        "gpfca.shared_dwc": m.gpfca.shared_dwc,
        "gpfca.norm_eps": m.gpfca.norm_eps,
        "spectro.fft_size": sp.fft_size,
        "spectro.win_length": sp.win_length,
        "spectro.hop": sp.hop,
        "spectro.window": sp.window,
        "spectro.sample_rate": sp.sample_rate,
        "spectro.segment_seconds": sp.segment_seconds,
        "spectro.compression_exponent": sp.compression_exponent,
        "spectro.center": sp.center,
        "loss.mode": cfg.loss_mode,
        "loss.metric": w.metric,
        "loss.magnitude": w.magnitude,
        "loss.phase": w.phase,
        "loss.complex": w.complex,
        "loss.time": w.time,
        "loss.consistency": w.consistency,
        "opt.lr": o.lr,
        "opt.beta1": o.beta1,
        "opt.beta2": o.beta2,
        "opt.eps": o.eps,
        "opt.weight_decay": o.weight_decay,
        "opt.grad_clip": o.grad_clip,
        "train.steps": cfg.train_steps,
        "train.batch_size": cfg.batch_size,
        "task.sample_rate": t.sample_rate,
        "task.segment_samples": t.segment_samples,
        "task.sinusoids_min": t.sinusoids_min,
        "task.sinusoids_max": t.sinusoids_max,
        "task.freq_min": t.freq_min,
        "task.freq_max": t.freq_max,
        "task.snr_db_min": t.snr_db_min,
        "task.snr_db_max": t.snr_db_max,
        "task.train_size": t.train_size,
        "task.eval_size": t.eval_size,
        "task.seed": t.seed,
    }
    return "\n".join(f"{k} = {_fmt(v)}" for k, v in sorted(pairs.items())) + "\n"


def config_hash(cfg):
    return hashlib.sha256(dump(cfg).encode()).hexdigest()[:16]


def _parse_scalar(raw, like):
    if isinstance(like, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse(text):
    """Parse flat key-value text into a key -> string mapping."""
    pairs = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError("expected 'key = value'", line_no=line_no)
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError("empty key or value", line_no=line_no)
        if key in pairs:
            raise ConfigError("duplicate key", line_no=line_no, key=key)
        pairs[key] = value
    return pairs


def build(pairs):
    """Materialize a RunConfig from flat pairs; unknown keys are rejected."""
    base = dump(RunConfig())
    known = {k.split(" = ")[0] for k in base.splitlines()}
    for key in pairs:
        if key not in known:
            raise ConfigError("unknown configuration key", key=key)

    def get(key, default, cast=None):
        if key not in pairs:
            return default
        raw = pairs[key]
        try:
            if cast is not None:
                return cast(raw)
            return _parse_scalar(raw, default)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), key=key) from exc

    def ints(raw):
        return tuple(int(x) for x in raw.split(","))

    try:
        channels = get("model.channels", 64)
        dense = DenseBlockSpec(
            depth=get("dense.depth", 4),
            channels=channels,
            kernel=get("dense.kernel", 3),
            dilations=get("dense.dilations", None, cast=ints),
            variant=get("dense.variant", "DSDDB"),
        )
        gpfca = GpfcaConfig(
            channels=channels,
            kernel_group=KernelGroup(get("gpfca.kernel_group", (3, 11, 23, 31), cast=ints)),
            ffn_expansion=get("gpfca.ffn_expansion", 12),
            attn_expansion=get("gpfca.attn_expansion", 2),
            shared_dwc=get("gpfca.shared_dwc", False),
            norm_eps=get("gpfca.norm_eps", 1e-5),
        )
        model = ModelConfig(
            channels=channels,
            dense=dense,
            gpfca=gpfca,
            ts_block_count=get("model.ts_block_count", 2),
            ts_count_unit=get("model.ts_count_unit", "pair"),
            mask_max=get("model.mask_max", 2.0),
            phase_input_skip=get("model.phase_input_skip", True),
            identity_mode=get("model.identity_mode", False),
        )
        spectro = SpectroConfig(
            fft_size=get("spectro.fft_size", 400),
            win_length=get("spectro.win_length", 400),
            hop=get("spectro.hop", 100),
            window=get("spectro.window", "hann"),
            sample_rate=get("spectro.sample_rate", 16000),
            segment_seconds=get("spectro.segment_seconds", 2.0),
            compression_exponent=get("spectro.compression_exponent", 0.3),
            center=get("spectro.center", True),
        )
        weights = LossWeights(
            metric=get("loss.metric", 0.0),
            magnitude=get("loss.magnitude", 0.9),
            phase=get("loss.phase", 0.3),
            complex=get("loss.complex", 0.1),
            time=get("loss.time", 0.2),
            consistency=get("loss.consistency", 0.1),
        )
        opt = OptConfig(
            lr=get("opt.lr", 5e-4),
            beta1=get("opt.beta1", 0.8),
            beta2=get("opt.beta2", 0.99),
            eps=get("opt.eps", 1e-8),
            weight_decay=get("opt.weight_decay", 0.01),
            grad_clip=get("opt.grad_clip", 5.0),
        )
        task = ToyTaskSpec(
            sample_rate=get("task.sample_rate", 16000),
            segment_samples=get("task.segment_samples", 2048),
            sinusoids_min=get("task.sinusoids_min", 3),
            sinusoids_max=get("task.sinusoids_max", 8),
            freq_min=get("task.freq_min", 200.0),
            freq_max=get("task.freq_max", 4000.0),
            snr_db_min=get("task.snr_db_min", 0.0),
            snr_db_max=get("task.snr_db_max", 10.0),
            train_size=get("task.train_size", 96),
            eval_size=get("task.eval_size", 32),
            seed=get("task.seed", 0),
        )
        mode = get("loss.mode", "new")
        if mode not in ("old", "new"):
            raise ConfigError("loss.mode must be 'old' or 'new'", key="loss.mode")
        return RunConfig(
            model=model, spectro=spectro, weights=weights, opt=opt, task=task,
            loss_mode=mode,
            train_steps=get("train.steps", 2000),
            batch_size=get("train.batch_size", 2),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load(source):
    """Load a RunConfig from a preset name or a config file path."""
    if source in _PRESETS:
        return _PRESETS[source]()
    try:
        with open(source) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {source!r}: {exc}") from exc
    return build(parse(text))
