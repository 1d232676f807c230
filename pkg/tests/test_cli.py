import json

import numpy as np
import pytest

import primek.cli as cli
from primek import config as C
from primek.complexity import params_ddb, params_dsddb
from primek.spectral import wav_read, wav_write
from primek.tensor import Tensor


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(tmp_path, **overrides):
    """Start from the tiny preset dump and override individual keys."""
    lines = []
    for line in C.dump(C.tiny_run_config()).splitlines():
        key = line.split(" = ")[0]
        if key in overrides:
            line = f"{key} = {overrides.pop(key)}"
        lines.append(line)
    for key, val in overrides.items():
        lines.append(f"{key} = {val}")
    path = tmp_path / "run.cfg"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


# ---------------------------------------------------------------------------
# config handling / exit codes
# ---------------------------------------------------------------------------

def test_hash_line_printed_for_every_command(capsys):
    code, out, _ = run(capsys, "--config", "tiny", "selftest")
    assert code == 0
    first = out.splitlines()[0]
    assert first.startswith("config: tiny (hash ")
    assert first == f"config: tiny (hash {C.config_hash(C.tiny_run_config())})"


def test_unknown_key_in_config_file_is_exit_2(tmp_path, capsys):
    path = write_config(tmp_path, **{"model.flux_capacitor": "1"})
    code, _, err = run(capsys, "--config", path, "analyze")
    assert code == 2
    assert "flux_capacitor" in err


def test_unknown_preset_is_exit_2(capsys):
    code, _, err = run(capsys, "--config", "no-such-preset", "analyze")
    assert code == 2


def test_selftest_all_checks_pass(capsys):
    code, out, _ = run(capsys, "--config", "tiny", "selftest")
    assert code == 0
    assert "FAIL" not in out
    assert out.count("PASS") >= 7


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def test_analyze_json_is_self_consistent(capsys):
    code, out, _ = run(capsys, "--config", "tiny", "analyze", "--json")
    assert code == 0
    payload = json.loads(out.split("\n", 1)[1])  # skip the hash line
    cmp = payload["dense_comparison"]
    assert cmp["params_ddb"] == params_ddb(cmp["depth"], cmp["channels"],
                                           cmp["kernel"])
    assert cmp["params_dsddb"] == params_dsddb(cmp["depth"], cmp["channels"],
                                               cmp["kernel"])
    assert payload["total_flops"] == 2 * payload["total_macs"]
    assert payload["entries"][-1]["name"] == "model.total"


def test_analyze_single_layer_dense_counts(tmp_path, capsys):
    path = write_config(tmp_path, **{"dense.depth": "1",
                                     "dense.dilations": "1"})
    code, out, _ = run(capsys, "--config", path, "analyze")
    assert code == 0
    assert "params_ddb   = 576" in out
    assert "params_dsddb = 136" in out


def test_analyze_frames_override_scales_macs(capsys):
    _, out1, _ = run(capsys, "--config", "tiny", "analyze", "--json",
                     "--frames", "4")
    _, out2, _ = run(capsys, "--config", "tiny", "analyze", "--json",
                     "--frames", "8")
    p1 = json.loads(out1.split("\n", 1)[1])
    p2 = json.loads(out2.split("\n", 1)[1])
    assert p1["frames"] == 4 and p2["frames"] == 8
    assert p2["total_macs"] > p1["total_macs"]
    # parameters do not depend on the analysed duration
    e1 = {e["name"]: e for e in p1["entries"]}
    e2 = {e["name"]: e for e in p2["entries"]}
    for name in e1:
        assert e1[name]["full_params"] == e2[name]["full_params"]


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def test_gradcheck_blocks_pass_and_are_deterministic(capsys):
    code1, out1, _ = run(capsys, "--config", "tiny", "--seed", "3",
                         "gradcheck", "--scope", "block")
    code2, out2, _ = run(capsys, "--config", "tiny", "--seed", "3",
                         "gradcheck", "--scope", "block")
    assert code1 == code2 == 0
    assert out1 == out2
    assert "FAIL" not in out1
    for name in ("channel_attention", "gated_unit", "gpfca_block",
                 "dense_ddb", "dense_dsddb", "mask_decoder", "phase_decoder"):
        assert name in out1


def test_gradcheck_detects_injected_gradient_fault(capsys):
    def corrupt(grads):
        for g in grads.values():
            g += 0.25

    cli.fault_hook = corrupt
    try:
        code, out, _ = run(capsys, "--config", "tiny", "gradcheck",
                           "--scope", "block")
    finally:
        cli.fault_hook = None
    assert code == 4
    assert "FAIL" in out


# ---------------------------------------------------------------------------
# bench-memory
# ---------------------------------------------------------------------------

def test_bench_memory_json_reports_slopes(capsys):
    code, out, _ = run(capsys, "--config", "tiny", "bench-memory",
                       "--lengths", "64,128,256", "--json")
    assert code == 0
    payload = json.loads(out.split("\n", 1)[1])
    assert payload["lengths"] == [64, 128, 256]
    assert len(payload["gpfca_bytes"]) == 3
    assert all(b > 0 for b in payload["gpfca_bytes"])
    assert 0.5 < payload["gpfca_slope"] < 1.5
    assert payload["attention_slope"] > payload["gpfca_slope"]


def test_bench_memory_single_length_omits_slope(capsys):
    code, out, _ = run(capsys, "--config", "tiny", "bench-memory",
                       "--lengths", "128")
    assert code == 0
    assert "slope omitted" in out


# ---------------------------------------------------------------------------
# enhance
# ---------------------------------------------------------------------------

def make_wav(path, n=2048, rate=16000):
    t = np.arange(n) / rate
    wave = 0.4 * np.sin(2 * np.pi * 440.0 * t)
    wav_write(str(path), Tensor(wave[None, :]), rate)
    return str(path)


def test_enhance_identity_mode_roundtrip(tmp_path, capsys):
    cfg = write_config(tmp_path, **{"model.identity_mode": "true"})
    src = make_wav(tmp_path / "in.wav")
    dst = tmp_path / "out.wav"
    code, out, _ = run(capsys, "--config", cfg, "enhance", src, str(dst))
    assert code == 0
    assert f"wrote {dst}" in out
    a, _ = wav_read(src)
    b, _ = wav_read(str(dst))
    err = np.sum((a.data - b.data) ** 2)
    snr = 10 * np.log10(np.sum(a.data ** 2) / max(err, 1e-300))
    assert snr > 60


def test_enhance_without_checkpoint_or_identity_is_exit_2(tmp_path, capsys):
    src = make_wav(tmp_path / "in.wav")
    code, _, err = run(capsys, "--config", "tiny", "enhance", src,
                       str(tmp_path / "out.wav"))
    assert code == 2
    assert "checkpoint" in err


def test_enhance_missing_checkpoint_is_exit_3(tmp_path, capsys):
    src = make_wav(tmp_path / "in.wav")
    code, _, _ = run(capsys, "--config", "tiny", "enhance", src,
                     str(tmp_path / "out.wav"),
                     "--checkpoint", str(tmp_path / "nope"))
    assert code == 3


def test_enhance_sample_rate_mismatch_is_exit_3(tmp_path, capsys):
    cfg = write_config(tmp_path, **{"model.identity_mode": "true"})
    src = make_wav(tmp_path / "in8k.wav", rate=8000)
    code, _, err = run(capsys, "--config", cfg, "enhance", src,
                       str(tmp_path / "out.wav"))
    assert code == 3
    assert "8000" in err


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_few_steps_writes_checkpoint_and_log(tmp_path, capsys):
    cfg = write_config(tmp_path, **{"task.train_size": "4",
                                    "task.eval_size": "2"})
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "--config", cfg, "train", "--steps", "3",
                       "--out-dir", str(out_dir))
    assert code == 0
    assert "improvement" in out
    assert "checkpoint:" in out
    assert (out_dir / "train_log.txt").exists()
