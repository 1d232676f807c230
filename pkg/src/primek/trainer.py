"""Optimizer, synthetic denoising task, and the desk-scale training loop.

The toy task stands in for a licensed speech corpus: clean signals are
random multi-sinusoid tones with a slow envelope, noise is white Gaussian
at a random SNR. Everything is reproducible from the seed alone.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .blocks import EnhancementModel, enhance
from .spectral import Spectrogram, SpectroConfig, compress, decompress, istft, stft
from .tensor import Tensor, load_tensor, save_tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptConfig:
    lr: float = 5e-4
    beta1: float = 0.8
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class OptState:
    """Per-parameter first/second moment buffers plus the step count."""

    def __init__(self, params, cfg):
        self.cfg = cfg
        self.step = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}


def adamw_step(params, state):
    """One decoupled-weight-decay adaptive update over named parameters.

    Gradients are read from each tensor's .grad buffer; a NaN gradient
    aborts with the offending parameter named.
    """
    cfg = state.cfg
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros(p.shape)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data -= cfg.lr * (update + cfg.weight_decay * p.data)


def clip_grad_norm(params, max_norm):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyTaskSpec:
    sample_rate: int = 16000
    segment_samples: int = 2048
    sinusoids_min: int = 3
    sinusoids_max: int = 8
    freq_min: float = 200.0
    freq_max: float = 4000.0
    snr_db_min: float = 0.0
    snr_db_max: float = 10.0
    train_size: int = 96
    eval_size: int = 32
    seed: int = 0


def _clean_signal(rng, task):
    n = task.segment_samples
    t = np.arange(n) / task.sample_rate
    count = int(rng.integers(task.sinusoids_min, task.sinusoids_max + 1))
    x = np.zeros(n)
    for _ in range(count):
        freq = rng.uniform(task.freq_min, task.freq_max)
        amp = rng.uniform(0.2, 1.0)
        phase = rng.uniform(0, 2 * np.pi)
        x += amp * np.sin(2 * np.pi * freq * t + phase)
    # slow raised-cosine envelope so the tone is not perfectly stationary
    env_phase = rng.uniform(0, 2 * np.pi)
    env_rate = rng.uniform(0.5, 3.0)
    x *= 0.6 + 0.4 * np.cos(2 * np.pi * env_rate * t / t[-1] + env_phase)
    peak = np.abs(x).max()
    return 0.5 * x / peak if peak > 0 else x


def _mix(rng, clean, snr_db):
    noise = rng.normal(size=clean.shape)
    clean_pow = float((clean ** 2).mean())
    noise_pow = float((noise ** 2).mean())
    target = clean_pow / (10.0 ** (snr_db / 10.0))
    noise *= np.sqrt(target / noise_pow)
    return clean + noise


def make_dataset(task):
    """Deterministic (clean, noisy) pairs: train and held-out splits."""
    rng = np.random.default_rng(task.seed)
    total = task.train_size + task.eval_size
    clean = np.zeros((total, task.segment_samples))
    noisy = np.zeros((total, task.segment_samples))
    for i in range(total):
        c = _clean_signal(rng, task)
        snr = rng.uniform(task.snr_db_min, task.snr_db_max)
        clean[i] = c
        noisy[i] = _mix(rng, c, snr)
    return (
        (clean[: task.train_size], noisy[: task.train_size]),
        (clean[task.train_size:], noisy[task.train_size:]),
    )


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------

SI_SNR_CAP_DB = 100.0


def si_snr(est, ref):
    """Scale-invariant SNR in dB, averaged over the batch, capped at 100."""
    e = est.data if isinstance(est, Tensor) else np.asarray(est)
    r = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
    e = np.atleast_2d(e) - np.atleast_2d(e).mean(axis=1, keepdims=True)
    r = np.atleast_2d(r) - np.atleast_2d(r).mean(axis=1, keepdims=True)
    ref_pow = (r * r).sum(axis=1)
    if np.any(ref_pow == 0):
        raise ValueError("si_snr: reference signal is identically zero")
    proj = ((e * r).sum(axis=1) / ref_pow)[:, None] * r
    err = e - proj
    num = (proj * proj).sum(axis=1)
    den = (err * err).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(den == 0.0, np.inf, 10.0 * np.log10(num / den))
    return float(np.minimum(vals, SI_SNR_CAP_DB).mean())


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, step, seed, config_hash=""):
    """Directory checkpoint: manifest + one tensor container per parameter.

    Written to a temp directory first and swapped in atomically.
    """
    path = str(path)
    parent = os.path.dirname(os.path.abspath(path)) or "."
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    params = model.named_params()
    lines = [f"config_hash = {config_hash}", f"step = {step}", f"seed = {seed}"]
    for i, (name, p) in enumerate(sorted(params.items())):
        fname = f"t{i:04d}.pktn"
        save_tensor(os.path.join(tmp, fname), p)
        lines.append(f"tensor.{name} = {fname}")
    with open(os.path.join(tmp, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if os.path.isdir(path):
        old = tmp + ".old"
        os.rename(path, old)
        os.rename(tmp, path)
        import shutil

        shutil.rmtree(old)
    else:
        os.rename(tmp, path)


def load_checkpoint(path, model, expect_hash=None):
    manifest = os.path.join(str(path), "manifest.txt")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    meta = {}
    tensors = {}
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(" = ")
            if key.startswith("tensor."):
                tensors[key[len("tensor."):]] = value
            else:
                meta[key] = value
    if expect_hash is not None and meta.get("config_hash") not in ("", expect_hash):
        raise ValueError(
            f"checkpoint config hash {meta.get('config_hash')} does not match "
            f"expected {expect_hash}"
        )
    params = model.named_params()
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise ValueError(
            f"checkpoint/model parameter mismatch: missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]}"
        )
    for name, fname in tensors.items():
        loaded = load_tensor(os.path.join(str(path), fname))
        if loaded.shape != params[name].shape:
            raise ValueError(
                f"parameter {name}: checkpoint shape {loaded.shape} != model "
                f"shape {params[name].shape}"
            )
        params[name].data[...] = loaded.data
    return meta


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: EnhancementModel
    losses: list = field(default_factory=list)
    checkpoint: str = ""
    log_path: str = ""


def step_losses(model, spectro_cfg, clean, noisy, weights, mode):
    """Forward one batch and assemble the weighted loss."""
    clean_t = Tensor(clean)
    noisy_t = Tensor(noisy)
    n = clean.shape[1]
    noisy_spec = compress(stft(noisy_t, spectro_cfg))
    clean_spec = compress(stft(clean_t, spectro_cfg))
    mask, phase_hat = model.forward(noisy_spec)
    est_mag_c = T.mul(mask, noisy_spec.magnitude)
    est_spec_c = Spectrogram(est_mag_c, phase_hat, spectro_cfg)

    comps = {
        "mag": L.magnitude_loss(est_mag_c, clean_spec.magnitude),
        "pha": L.phase_loss(phase_hat, clean_spec.phase),
        "com": L.complex_loss(est_spec_c, clean_spec),
    }
    est_spec = decompress(est_spec_c)
    if mode == "old":
        est_wave = istft(est_spec, n)
        comps["time"] = L.time_loss(est_wave, clean_t)
        total = L.total_loss("old", weights, magnitude=comps["mag"],
                             phase=comps["pha"], complex_=comps["com"],
                             time=comps["time"])
    else:
        comps["con"] = L.consistency_loss(est_spec, target_len=n)
        total = L.total_loss("new", weights, magnitude=comps["mag"],
                             phase=comps["pha"], complex_=comps["com"],
                             consistency=comps["con"])
    return total, comps


def evaluate(model, spectro_cfg, clean, noisy):
    """Mean SI-SNR of the enhanced and the raw noisy signals vs clean."""
    with T.no_grad():
        est = enhance(Tensor(noisy), model, spectro_cfg)
    return si_snr(est, clean), si_snr(noisy, clean)


def train_toy(model_cfg, spectro_cfg, task, steps, weights=None, mode="new",
              opt_cfg=None, out_dir=".", batch_size=2, seed=None,
              log_every=1, checkpoint_every=0, progress=None):
    """Seeded end-to-end training on the synthetic task.

    Writes an append-only per-step loss log and a final checkpoint; on
    divergence the last good checkpoint is kept and the error re-raised.
    """
    weights = weights or L.LossWeights()
    opt_cfg = opt_cfg or OptConfig()
    seed = task.seed if seed is None else seed
    model = EnhancementModel(model_cfg, seed=seed)
    params = model.named_params()
    state = OptState(params, opt_cfg)
    (train_clean, train_noisy), _ = make_dataset(task)

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint")
    log_path = os.path.join(out_dir, "train_log.txt")
    save_checkpoint(ckpt_path, model, step=0, seed=seed)
    result = TrainResult(model=model, checkpoint=ckpt_path, log_path=log_path)

    order = np.random.default_rng(seed + 1).permutation(len(train_clean))
    with open(log_path, "w") as log:
        for step in range(1, steps + 1):
            sel = order[
                [(batch_size * (step - 1) + j) % len(order) for j in range(batch_size)]
            ]
            clean = train_clean[sel]
            noisy = train_noisy[sel]
            try:
                total, comps = step_losses(
                    model, spectro_cfg, clean, noisy, weights, mode
                )
                if not np.isfinite(total.data):
                    raise TrainingDiverged(f"loss became {total.data} at step {step}")
                model.zero_grad()
                total.backward()
                clip_grad_norm(params, opt_cfg.grad_clip)
                adamw_step(params, state)
            except TrainingDiverged:
                # the previously written checkpoint stays as the last good one
                raise
            result.losses.append(float(total.data))
            if step % log_every == 0:
                parts = " ".join(f"{k}={float(v.data):.6f}" for k, v in comps.items())
                log.write(f"step={step} {parts} total={float(total.data):.6f}\n")
                log.flush()
            if checkpoint_every and step % checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, step=step, seed=seed)
            if progress and step % 100 == 0:
                progress(step, float(total.data))
    save_checkpoint(ckpt_path, model, step=steps, seed=seed)
    return result
