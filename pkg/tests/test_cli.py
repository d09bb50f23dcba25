import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from memsnn.cli import main, parse_spikes
from memsnn.data import write_event_dataset
from memsnn.errors import ConfigError
from memsnn.train import load_checkpoint

SUBSET = Path(__file__).resolve().parents[1] / "data" / "mnist-subset"


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert len({len(r) for r in rows}) == 1, "ragged CSV"
    return rows[0], rows[1:]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_parse_spikes():
    assert parse_spikes("100:5e-6,400:2e-6") == [(100, 5e-6), (400, 2e-6)]
    assert parse_spikes("") == []
    with pytest.raises(ConfigError):
        parse_spikes("100")
    with pytest.raises(ConfigError):
        parse_spikes("a:b")


def test_neuron_sim_default(tmp_path, capsys):
    out = tmp_path / "trace.csv"
    code, text, _ = run(capsys, "neuron-sim", "--out", str(out))
    assert code == 0
    header, rows = read_csv(out)
    assert header == ["t", "v", "x1", "x2", "I"]
    assert len(rows) == 1000
    assert "spikes=1" in text
    v = np.array([float(r[1]) for r in rows])
    assert v.max() > 0.025


def test_neuron_sim_with_oracle(tmp_path, capsys):
    out = tmp_path / "trace.csv"
    code, text, _ = run(capsys, "neuron-sim", "--oracle", "rk4", "--steps", "300", "--out", str(out))
    assert code == 0
    header, rows = read_csv(out)
    assert header == ["t", "v", "x1", "x2", "I", "v_rk4", "x1_rk4", "x2_rk4", "I_rk4"]
    line = next(l for l in text.splitlines() if l.startswith("max|Δv| = "))
    assert float(line.split("=")[1]) < 2e-3


def test_neuron_sim_zero_steps(capsys):
    code, _, err = run(capsys, "neuron-sim", "--steps", "0")
    assert code == 2 and "config error" in err


def test_neuron_sim_unstable_euler(tmp_path, capsys):
    code, _, err = run(capsys, "neuron-sim", "--integrator", "euler", "--out", str(tmp_path / "t.csv"))
    assert code == 3 and "numeric error" in err


def test_neuron_sim_params_file(tmp_path, capsys):
    cfg = tmp_path / "dev.toml"
    cfg.write_text("substeps = 10\nintegrator = \"euler\"\n")
    code, _, _ = run(capsys, "neuron-sim", "--params", str(cfg), "--steps", "200",
                     "--spikes", "10:5e-6", "--out", str(tmp_path / "t.csv"))
    assert code == 0
    cfg.write_text("nope = 1\n")
    code, _, _ = run(capsys, "neuron-sim", "--params", str(cfg))
    assert code == 2


@pytest.mark.parametrize("argv", [["neuron-sim", "--bogus"], [], ["fly"], ["hwcost", "--activity", "x"]])
def test_argument_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_gradcheck_default(capsys):
    code, text, _ = run(capsys, "gradcheck")
    assert code == 0
    last = text.strip().splitlines()[-1]
    assert last.startswith("max_rel_err=") and last.endswith("tol=1e-4 PASS")


def test_gradcheck_failure_exit_code(capsys):
    code, text, _ = run(capsys, "gradcheck", "--tol", "1e-20", "--steps", "3", "--arch", "3-2-2")
    assert code == 1 and text.strip().endswith("FAIL")


def test_hwcost_table_and_csv(tmp_path, capsys):
    code, text, _ = run(capsys, "hwcost", "--arch", "784,100,10", "--csv", str(tmp_path / "hw.csv"))
    assert code == 0
    assert "tile_power_uW=21.45" in text and "5.33x" in text
    header, rows = read_csv(tmp_path / "hw.csv")
    assert header == ["aspect", "unit", "ours", "mixed", "improvement"] and len(rows) == 3


def test_hwcost_activity_scales_power(capsys):
    _, a, _ = run(capsys, "hwcost", "--activity", "0.04")
    assert "tile_power_uW=42.91" in a


TOY_TRAIN = ("train", "--dataset", "toy", "--hidden", "8", "--steps", "40", "--epochs", "3",
             "--batch", "8", "--lr", "1e-3")


def epoch_lines(text):
    lines = text.splitlines()
    start = lines.index("epoch,train_loss,val_acc")
    return [l.split(",") for l in lines[start + 1:] if l and l[0].isdigit()]


def test_train_toy_then_eval_and_export(tmp_path, capsys):
    ckpt = tmp_path / "run"
    code, text, _ = run(capsys, *TOY_TRAIN, "--ckpt", str(ckpt))
    assert code == 0
    assert (ckpt / "best.msnn").exists()
    header, rows = read_csv(ckpt / "history.csv")
    assert header == ["epoch", "train_loss", "val_acc"] and len(rows) == 4
    best = max(float(r[2]) for r in epoch_lines(text))

    code, text, _ = run(capsys, "eval", "--dataset", "toy", "--ckpt", str(ckpt / "best.msnn"),
                        "--confusion", str(tmp_path / "cm.csv"))
    assert code == 0
    acc = float(next(l for l in text.splitlines() if l.startswith("accuracy=")).split("=")[1])
    assert acc == pytest.approx(best, abs=1e-6)
    assert np.loadtxt(tmp_path / "cm.csv", delimiter=",").sum() == 40

    out = tmp_path / "g.csv"
    code, text, _ = run(capsys, "export-weights", "--ckpt", str(ckpt / "best.msnn"), "--out", str(out))
    assert code == 0
    header, rows = read_csv(out)
    assert len(rows) == 64 * 8 + 8 * 2
    err = float(text.split("max_reconstruction_error=")[1].split()[0])
    assert err < 1e-12


def test_train_is_reproducible(tmp_path, capsys):
    _, a, _ = run(capsys, *TOY_TRAIN, "--ckpt", str(tmp_path / "a"))
    _, b, _ = run(capsys, *TOY_TRAIN, "--ckpt", str(tmp_path / "b"))
    assert epoch_lines(a) == epoch_lines(b)
    assert (tmp_path / "a" / "best.msnn").read_bytes() == (tmp_path / "b" / "best.msnn").read_bytes()


def test_train_zero_lr_keeps_epoch0_accuracy(tmp_path, capsys):
    code, text, _ = run(capsys, "train", "--dataset", "toy", "--hidden", "4", "--steps", "20",
                        "--epochs", "2", "--lr", "0", "--ckpt", str(tmp_path))
    assert code == 0
    rows = epoch_lines(text)
    assert rows[-1][2] == rows[0][2]


def test_train_mnist_subset_smoke(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MSNN_DATA_DIR", str(SUBSET))
    code, text, _ = run(capsys, "train", "--hidden", "4", "--steps", "10", "--epochs", "1",
                        "--train-limit", "40", "--batch", "20", "--ckpt", str(tmp_path))
    assert code == 0 and len(epoch_lines(text)) == 2
    code, text, _ = run(capsys, "eval", "--ckpt", str(tmp_path / "best.msnn"), "--test-limit", "30",
                        "--readout", "spikes")
    assert code == 0 and text.startswith("accuracy=")


def test_train_data_errors(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("MSNN_DATA_DIR", raising=False)
    assert run(capsys, "train", "--ckpt", str(tmp_path))[0] == 2
    assert run(capsys, "train", "--data-dir", str(tmp_path), "--ckpt", str(tmp_path))[0] == 4
    (tmp_path / "train-images-idx3-ubyte").write_bytes(b"\x01\x02\x03\x04")
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(b"\x00\x00\x08\x01")
    assert run(capsys, "train", "--data-dir", str(tmp_path), "--ckpt", str(tmp_path))[0] == 4


def test_eval_bad_checkpoint(tmp_path, capsys):
    (tmp_path / "x.msnn").write_bytes(b"nope")
    assert run(capsys, "eval", "--dataset", "toy", "--ckpt", str(tmp_path / "x.msnn"))[0] == 4


def test_eval_input_width_mismatch(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MSNN_DATA_DIR", str(SUBSET))
    run(capsys, "train", "--dataset", "toy", "--hidden", "4", "--steps", "10", "--epochs", "1",
        "--ckpt", str(tmp_path))
    code, _, err = run(capsys, "eval", "--ckpt", str(tmp_path / "best.msnn"), "--test-limit", "10")
    assert code == 4 and "expects 64 inputs" in err


def test_train_dvs_asymmetric_steps(tmp_path, capsys):
    rng = np.random.default_rng(0)
    for split, n in (("train", 6), ("test", 4)):
        samples = [rng.integers(0, 2, size=(12, 2, 32, 32)).astype(np.uint8) for _ in range(n)]
        write_event_dataset(tmp_path / split, samples, rng.integers(0, 11, size=n))
    ckpt = tmp_path / "out"
    code, text, _ = run(capsys, "train", "--dataset", "dvs", "--data-dir", str(tmp_path), "--hidden", "4",
                        "--steps", "8", "--eval-steps", "12", "--epochs", "1", "--batch", "3",
                        "--eval-fraction", "0", "--input-gain", "1e-6", "--ckpt", str(ckpt))
    assert code == 0, text
    cfg = load_checkpoint(ckpt / "best.msnn").config["train"]
    assert cfg["steps"] == 8 and cfg["eval_steps"] == 12
    code, text, _ = run(capsys, "eval", "--dataset", "dvs", "--data-dir", str(tmp_path),
                        "--ckpt", str(ckpt / "best.msnn"))
    assert code == 0 and text.startswith("accuracy=")


def test_workers_flag(tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--dataset", "toy", "--hidden", "4", "--steps", "10", "--epochs", "1",
                     "--workers", "2", "--ckpt", str(tmp_path))
    assert code == 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "memsnn.cli", "hwcost"], capture_output=True, text=True)
    assert proc.returncode == 0 and "tiles=10" in proc.stdout
