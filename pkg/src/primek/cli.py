"""Command-line surface: complexity analysis, gradient verification,
memory-scaling benchmarks, toy training, and file enhancement.

Exit codes are a stable contract for CI: 0 success, 2 configuration
error, 3 I/O error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import blocks as B
from . import complexity as X
from . import config as C
from . import losses as L
from . import spectral as S
from . import tensor as T
from . import trainer as TR
from .tensor import ShapeError, Tensor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4

# debug hook used to prove the gradcheck actually detects wrong gradients:
# when set, it is called with (block_name, grads dict) and may corrupt them.
fault_hook = None


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(cfg, args):
    model = B.EnhancementModel(cfg.model, seed=args.seed)
    sp = cfg.spectro
    frames = args.frames or sp.frame_count(sp.segment_samples)
    report = X.measure(model, sp, frames, sp.bins)

    d = cfg.model.dense
    p_ddb = X.params_ddb(d.depth, d.channels, d.kernel)
    p_dsddb = X.params_dsddb(d.depth, d.channels, d.kernel)
    ratio = p_dsddb / p_ddb
    total_macs = report.entries[-1].measured_macs

    if args.json:
        payload = json.loads(report.to_json())
        payload["dense_comparison"] = {
            "depth": d.depth, "channels": d.channels, "kernel": d.kernel,
            "params_ddb": p_ddb, "params_dsddb": p_dsddb, "ratio": ratio,
        }
        payload["total_macs"] = total_macs
        payload["total_flops"] = 2 * total_macs
        print(json.dumps(payload, indent=2))
    else:
        print(report.to_text())
        print()
        print(f"dense variants at (n={d.depth}, C={d.channels}, K={d.kernel}):")
        print(f"  params_ddb   = {p_ddb}")
        print(f"  params_dsddb = {p_dsddb}")
        print(f"  params_dsddb/params_ddb = {p_dsddb}/{p_ddb} = {100 * ratio:.2f}%")
        print(f"total: {total_macs:,} MACs = {2 * total_macs:,} FLOPs "
              f"(1 MAC = 2 FLOPs), {model.param_count():,} parameters")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _fd_max_rel_err(forward, tensors, rng, coords_per_tensor=4, h=1e-6):
    """Central finite differences on a random projection of the output.

    forward() must rebuild the graph from the current tensor contents.
    Returns the max relative error over sampled coordinates of `tensors`.
    """
    out = forward()
    proj = rng.standard_normal(out.shape)

    def scalar():
        return float(np.sum(forward().data * proj))

    loss = T.sum_all(T.mul(forward(), Tensor(proj)))
    for t in tensors.values():
        t.grad = None
    loss.backward()
    grads = {k: np.array(t.grad) for k, t in tensors.items()}
    if fault_hook is not None:
        fault_hook(grads)

    worst = 0.0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        n = flat.size
        for idx in rng.choice(n, size=min(coords_per_tensor, n), replace=False):
            keep = flat[idx]
            flat[idx] = keep + h
            fp = scalar()
            flat[idx] = keep - h
            fm = scalar()
            flat[idx] = keep
            fd = (fp - fm) / (2 * h)
            an = grads[name].reshape(-1)[idx]
            # 1 + max(...) keeps finite-difference roundoff on true-zero
            # gradients (e.g. a bias swallowed by a following norm) benign
            err = abs(an - fd) / (1.0 + max(abs(an), abs(fd)))
            worst = max(worst, err)
    return worst


def _block_cases(cfg, rng):
    """(name, forward, tensors) triples at a reduced size so finite
    differences stay fast; structure follows the configured model."""
    c = 8
    t_len, f_len = 6, 5
    g = cfg.model.gpfca
    small_gpfca = B.GpfcaConfig(
        channels=c, kernel_group=g.kernel_group, ffn_expansion=2,
        attn_expansion=g.attn_expansion, shared_dwc=g.shared_dwc,
    )
    dense = B.DenseBlockSpec(depth=2, channels=c, dilations=(1, 2),
                             variant=cfg.model.dense.variant)
    model_cfg = B.ModelConfig(
        channels=c, dense=dense, gpfca=small_gpfca, ts_block_count=1,
        mask_max=cfg.model.mask_max, phase_input_skip=cfg.model.phase_input_skip,
    )

    def seq_case(name, module, length=t_len):
        x = Tensor(rng.standard_normal((1, c, length)), requires_grad=True)
        tensors = dict(module.named_params())
        tensors["input"] = x
        return name, (lambda: module.forward(x)), tensors

    def grid_case(name, module):
        x = Tensor(rng.standard_normal((1, c, t_len, f_len)), requires_grad=True)
        tensors = dict(module.named_params())
        tensors["input"] = x
        return name, (lambda: module.forward(x)), tensors

    cases = [
        seq_case("channel_attention", B.ChannelAttention(rng, c)),
        seq_case("fusion_gate", B.FusionGate(rng, c, kernel=3)),
        seq_case("gated_unit", B.GatedUnit(rng, c, g.kernel_group)),
        seq_case("feed_forward", B.FeedForward(rng, small_gpfca)),
        seq_case("gpfca_block", B.GpfcaBlock(rng, small_gpfca)),
    ]
    for variant in ("DDB", "DSDDB"):
        spec = B.DenseBlockSpec(depth=2, channels=c, dilations=(1, 2),
                                variant=variant)
        cases.append(grid_case(f"dense_{variant.lower()}",
                               B.DenseBlock(rng, spec)))

    mask_dec = B.MaskDecoder(rng, model_cfg)
    xm = Tensor(rng.standard_normal((1, c, t_len, f_len)), requires_grad=True)
    tm = dict(mask_dec.named_params())
    tm["input"] = xm
    cases.append(("mask_decoder",
                  lambda: mask_dec.forward(xm, 2 * f_len - 1), tm))

    phase_dec = B.PhaseDecoder(rng, model_cfg)
    xp = Tensor(rng.standard_normal((1, c, t_len, f_len)), requires_grad=True)
    noisy_phase = Tensor(rng.uniform(-3.0, 3.0, (1, 2 * f_len - 1, t_len)))
    tp = dict(phase_dec.named_params())
    tp["input"] = xp
    cases.append(("phase_decoder",
                  lambda: phase_dec.forward(xp, noisy_phase), tp))
    return cases, model_cfg


def _model_case(model_cfg, rng):
    bins, frames = 9, 6
    model = B.EnhancementModel(model_cfg, seed=0)
    mag = Tensor(np.abs(rng.standard_normal((1, bins, frames))) + 0.1)
    pha = Tensor(rng.uniform(-3.0, 3.0, (1, bins, frames)))
    spec = S.Spectrogram(mag, pha, X._geometry_config(bins))

    def forward():
        mask, phase = model.forward(spec)
        return T.stack([mask, phase], axis=1)

    tensors = dict(model.named_params())
    return "model", forward, tensors


def cmd_gradcheck(cfg, args):
    threshold = 1e-4
    rng = np.random.default_rng(args.seed)
    rows = []
    if args.scope == "block":
        cases, _ = _block_cases(cfg, rng)
    else:
        _, model_cfg = _block_cases(cfg, rng)
        cases = [_model_case(model_cfg, rng)]
    failed = False
    for name, forward, tensors in cases:
        err = _fd_max_rel_err(forward, tensors, rng)
        ok = err < threshold
        failed = failed or not ok
        rows.append((name, err, "PASS" if ok else "FAIL"))
    print(f"{'block':<20}{'max rel err':>14}  result")
    for name, err, verdict in rows:
        print(f"{name:<20}{err:>14.3e}  {verdict}")
    if failed:
        print(f"gradient check FAILED (threshold {threshold:g})")
        return EXIT_VERIFY
    print(f"all gradients within threshold {threshold:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-memory
# ---------------------------------------------------------------------------

def _fit_slope(lengths, series):
    return float(np.polyfit(np.log(lengths), np.log(series), 1)[0])


def cmd_bench_memory(cfg, args):
    lengths = args.lengths
    rng = np.random.default_rng(args.seed)
    c = 16
    g = cfg.model.gpfca
    gpfca = B.GpfcaBlock(rng, B.GpfcaConfig(
        channels=c, kernel_group=g.kernel_group, ffn_expansion=2))
    attn = B.AttentionReference(rng, c)

    seq_bytes, attn_bytes = [], []
    for t_len in lengths:
        x = Tensor(rng.standard_normal((1, c, t_len)))
        with T.no_grad(), T.track_allocations() as rec:
            gpfca.forward(x)
        seq_bytes.append(rec.bytes_allocated)
        with T.no_grad(), T.track_allocations() as rec:
            attn.forward(x)
        attn_bytes.append(rec.bytes_allocated)

    if args.json:
        payload = {"lengths": lengths, "gpfca_bytes": seq_bytes,
                   "attention_bytes": attn_bytes}
        if len(lengths) >= 2:
            payload["gpfca_slope"] = _fit_slope(lengths, seq_bytes)
            payload["attention_slope"] = _fit_slope(lengths, attn_bytes)
        print(json.dumps(payload, indent=2))
        return EXIT_OK

    print(f"{'length':>8}{'gpfca bytes':>16}{'attention bytes':>18}")
    for t_len, sb, ab in zip(lengths, seq_bytes, attn_bytes):
        print(f"{t_len:>8}{sb:>16,}{ab:>18,}")
    if len(lengths) >= 2:
        print(f"log-log slope: gpfca {_fit_slope(lengths, seq_bytes):.3f}, "
              f"attention {_fit_slope(lengths, attn_bytes):.3f}")
    else:
        print("slope omitted (need at least two lengths)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / enhance
# ---------------------------------------------------------------------------

def cmd_train(cfg, args):
    steps = args.steps or cfg.train_steps

    def progress(step, loss):
        print(f"step {step}/{steps} loss {loss:.4f}", flush=True)

    result = TR.train_toy(
        cfg.model, cfg.spectro, cfg.task, steps,
        weights=cfg.weights, mode=cfg.loss_mode, opt_cfg=cfg.opt,
        out_dir=args.out_dir, batch_size=cfg.batch_size, seed=args.seed,
        checkpoint_every=max(1, steps // 4), progress=progress,
    )
    _, (eval_clean, eval_noisy) = TR.make_dataset(cfg.task)
    snr_est, snr_noisy = TR.evaluate(result.model, cfg.spectro,
                                     eval_clean, eval_noisy)
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss log:   {result.log_path}")
    print(f"eval SI-SNR: noisy {snr_noisy:.2f} dB, enhanced {snr_est:.2f} dB, "
          f"improvement {snr_est - snr_noisy:.2f} dB")
    return EXIT_OK


def cmd_enhance(cfg, args):
    model = B.EnhancementModel(cfg.model, seed=args.seed)
    if args.checkpoint is not None:
        TR.load_checkpoint(args.checkpoint, model)
    elif not cfg.model.identity_mode:
        print("enhance: no checkpoint given and the model is not configured "
              "as identity", file=sys.stderr)
        return EXIT_CONFIG
    wave, rate = S.wav_read(args.input)
    if rate != cfg.spectro.sample_rate:
        print(f"enhance: {args.input} is {rate} Hz but the configuration "
              f"expects {cfg.spectro.sample_rate} Hz", file=sys.stderr)
        return EXIT_IO
    with T.no_grad():
        out = B.enhance(wave, model, cfg.spectro)
    if out.shape != wave.shape:
        raise ShapeError(f"enhance changed sample count: {wave.shape} -> {out.shape}")
    S.wav_write(args.output, out, rate)
    print(f"wrote {args.output} ({out.shape[-1]} samples at {rate} Hz)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _naive_conv1d(x, w, stride, dilation, groups, pad):
    b, cin, t = x.shape
    cout, cin_g, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    t_out = (xp.shape[2] - (dilation * (k - 1) + 1)) // stride + 1
    cout_g = cout // groups
    out = np.zeros((b, cout, t_out))
    for bi in range(b):
        for oc in range(cout):
            gi = oc // cout_g
            for ot in range(t_out):
                acc = 0.0
                for ic in range(cin_g):
                    for kk in range(k):
                        acc += (w[oc, ic, kk]
                                * xp[bi, gi * cin_g + ic,
                                     ot * stride + kk * dilation])
                out[bi, oc, ot] = acc
    return out


def cmd_selftest(cfg, args):
    rng = np.random.default_rng(args.seed)
    checks = []

    from .conv import ConvSpec, conv1d
    spec = ConvSpec(4, 6, 3, dilation=2, groups=2)
    x = Tensor(rng.standard_normal((2, 4, 12)))
    w = Tensor(rng.standard_normal((6, 2, 3)))
    got = conv1d(x, spec, w).data
    want = _naive_conv1d(x.data, w.data, 1, 2, 2, 2)
    checks.append(("conv1d vs nested loops", np.abs(got - want).max() < 1e-12))

    frame = rng.standard_normal(32)
    re, im = S.naive_rdft(frame)
    checks.append(("rfft vs direct transform",
                   np.abs(re + 1j * im - np.fft.rfft(frame)).max() < 1e-9))

    sp = cfg.spectro
    cola = sp.cola_deviation()
    checks.append((f"overlap-add deviation {cola:.1e}", cola < 1e-10))

    wave = Tensor(rng.standard_normal((1, sp.segment_samples)))
    with T.no_grad():
        back = S.istft(S.stft(wave, sp), sp.segment_samples)
    err = np.sum((back.data - wave.data) ** 2)
    snr = 10 * np.log10(np.sum(wave.data ** 2) / max(err, 1e-300))
    checks.append((f"analysis/synthesis roundtrip {snr:.0f} dB", snr > 60))

    d = cfg.model.dense
    blk = B.DenseBlock(np.random.default_rng(0), d)
    expect = (X.params_ddb if d.variant == "DDB" else X.params_dsddb)(
        d.depth, d.channels, d.kernel)
    checks.append(("dense-block weight count matches formula",
                   blk.conv_weight_count() == expect))

    vals = rng.uniform(-10, 10, 64)
    shifted = vals + 2 * np.pi * rng.integers(-3, 4, 64)
    aw = lambda a: L.anti_wrap(Tensor(a)).data
    checks.append(("anti-wrapped distance is shift invariant",
                   np.abs(aw(vals) - aw(shifted)).max() < 1e-9))

    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    p["w"].grad = np.array([0.5])
    o = TR.OptConfig(lr=0.1, weight_decay=0.0)
    TR.adamw_step(p, TR.OptState(p, o))
    # first step moves by ~lr against the gradient sign
    checks.append(("optimizer first-step direction",
                   abs(p["w"].data[0] - (1.0 - 0.1)) < 1e-6))

    failed = False
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failed = failed or not ok
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _int_list(raw):
    return [int(v) for v in raw.split(",") if v]


def build_parser():
    p = argparse.ArgumentParser(
        prog="primek",
        description="spectral speech enhancement: analysis, verification, "
                    "training, and file enhancement",
    )
    p.add_argument("--config", default="default",
                   help="preset name ('default', 'tiny') or config file path")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for all randomness in the command")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="per-block complexity report")
    a.add_argument("--json", action="store_true")
    a.add_argument("--frames", type=int, default=0,
                   help="override the frame count (default: from config)")

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scope", choices=("block", "model"), default="block")

    m = sub.add_parser("bench-memory", help="activation-memory scaling")
    m.add_argument("--lengths", type=_int_list,
                   default=[250, 500, 1000, 2000, 4000])
    m.add_argument("--json", action="store_true")

    t = sub.add_parser("train", help="train on the synthetic denoising task")
    t.add_argument("--steps", type=int, default=0,
                   help="override the configured step count")
    t.add_argument("--out-dir", default="run")

    e = sub.add_parser("enhance", help="denoise a WAV file")
    e.add_argument("input")
    e.add_argument("output")
    e.add_argument("--checkpoint", default=None)

    sub.add_parser("selftest", help="quick oracle suite")
    return p


_COMMANDS = {
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "bench-memory": cmd_bench_memory,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "selftest": cmd_selftest,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = C.load(args.config)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"config: {args.config} (hash {C.config_hash(cfg)})")
    try:
        return _COMMANDS[args.command](cfg, args)
    except (C.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, S.AudioIOError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TR.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
