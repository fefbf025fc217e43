from __future__ import annotations

import csv
import hashlib

import pytest

from belltest.cli import main
from belltest.timetags import read_dataset, read_kv

SHORT_PROTOCOL = ("training_size=8\nretrain_every=8\nretrain_window=16\npredict_window=16\n"
                  "pbr_update_every=4\npbr_window=16\n")


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def classical(tmp_path_factory):
    out = tmp_path_factory.mktemp("classical")
    assert main(["simulate", "--source", "classical", "--seed", "7", "--trials", "36",
                 "--out", str(out)]) == 0
    return out / "dataset.csv"


def test_simulate_classical(classical):
    ds = read_dataset(classical)
    assert len(ds) == 36
    counts = {}
    for t in ds:
        counts[t.settings.as_tuple()] = counts.get(t.settings.as_tuple(), 0) + 1
    assert sorted(counts.values()) == [9, 9, 9, 9]
    meta = read_kv(classical.with_suffix(".meta"))
    assert meta["seed"] == "7" and meta["config.source"] == "classical"
    assert "config.mean_photons" in meta


def test_simulate_zero_trials(tmp_path):
    assert main(["simulate", "--trials", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "dataset.csv").read_text() == "trial_id,s_a,s_b,party,timetag\n"


def test_simulate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--source", "quantum", "--seed", "3", "--trials", "20",
                     "--out", str(tmp_path / d)]) == 0
    for name in ("dataset.csv", "dataset.meta"):
        assert _digest(tmp_path / "a" / name) == _digest(tmp_path / "b" / name)


def test_simulate_pulsed_writes_ticks(tmp_path):
    cfg = tmp_path / "q.txt"
    cfg.write_text("source=quantum\nmode=pulsed\npair_rate=1000\n")
    assert main(["simulate", "--config", str(cfg), "--trials", "4", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "dataset.ticks.csv").exists()


def test_analyze_detection_centered(classical, tmp_path):
    before = _digest(classical)
    assert main(["analyze", "--data", str(classical), "--method", "detection-centered",
                 "--radius", "12800", "--out", str(tmp_path)]) == 0
    summary = read_kv(tmp_path / "summary.txt")
    assert float(summary["b_ch"]) > 0.45
    assert summary["radius"] == "12800"
    assert (tmp_path / "counts.csv").exists()
    assert _digest(classical) == before


def test_analyze_predefined(classical, tmp_path):
    assert main(["analyze", "--data", str(classical), "--method", "predefined",
                 "--width", "12800", "--out", str(tmp_path)]) == 0
    b = float(read_kv(tmp_path / "summary.txt")["b_ch"])
    assert -1.05 <= b <= 0.02


def test_analyze_pbr_on_classical(classical, tmp_path):
    cfg = tmp_path / "p.txt"
    cfg.write_text(SHORT_PROTOCOL)
    assert main(["analyze", "--data", str(classical), "--method", "pbr", "--config", str(cfg),
                 "--out", str(tmp_path)]) == 0
    rep = read_kv(tmp_path / "report.txt")
    assert float(rep["log2_p_bound"]) == 0.0
    assert float(rep["total"]) < 0
    assert rep["protocol.training_size"] == "8"


def test_analyze_distance(classical, tmp_path):
    cfg = tmp_path / "p.txt"
    cfg.write_text("training_size=8\n")
    assert main(["analyze", "--data", str(classical), "--method", "distance", "--config", str(cfg),
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(open(tmp_path / "bell.csv")))
    assert rows[0] == ["trial_id", "s_a", "s_b", "bell_value"] and len(rows) == 29
    assert (tmp_path / "params.txt").exists()
    assert "depend on the settings" in read_kv(tmp_path / "summary.txt")["note"]


def test_analyze_missing_file(tmp_path, capsys):
    assert main(["analyze", "--data", str(tmp_path / "nope.csv")]) != 0
    assert "not found" in capsys.readouterr().err


def test_sweep_single_radius(classical, tmp_path):
    assert main(["sweep", "--data", str(classical), "--radius", "12800",
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(open(tmp_path / "sweep.csv")))
    assert len(rows) == 2 and rows[1][0] == "12800"


def test_sweep_grid(classical, tmp_path, monkeypatch):
    monkeypatch.setenv("BELLTEST_THREADS", "2")
    assert main(["sweep", "--data", str(classical), "--grid", "3200:25600:3200",
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(open(tmp_path / "sweep.csv")))[1:]
    b = {int(r[0]): float(r[1]) for r in rows}
    assert b[3200] < -0.9 and b[12800] > 0.45 and abs(b[25600]) < 0.05
    assert main(["sweep", "--data", str(classical), "--grid", "bad"]) != 0


def test_report_table(classical, tmp_path, capsys):
    cfg = tmp_path / "p.txt"
    cfg.write_text(SHORT_PROTOCOL)
    assert main(["report", "--data", str(classical), "--config", str(cfg),
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "PBR log2(p) bound" in out and out.startswith("+")
    assert (tmp_path / "report.csv").exists()


def test_rerun_outputs_identical(classical, tmp_path):
    cfg = tmp_path / "p.txt"
    cfg.write_text(SHORT_PROTOCOL)
    for d in ("a", "b"):
        assert main(["analyze", "--data", str(classical), "--method", "pbr", "--config", str(cfg),
                     "--out", str(tmp_path / d)]) == 0
    for name in ("report.csv", "report.txt", "params.txt"):
        assert _digest(tmp_path / "a" / name) == _digest(tmp_path / "b" / name)
