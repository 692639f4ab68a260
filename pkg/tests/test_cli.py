import csv
import json
import time

import numpy as np
import pytest

from carm import cli
from carm import evosearch as es
from carm.eeg import load_recording
from carm.models import load_model


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--subjects", "3", "--sessions", "1", "--minutes", "1",
                     "--seed", "4", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def search_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("search")
    rc = cli.main(["search", "--data", str(data_dir), "--pop", "4", "--gens", "1",
                   "--families", "CNN", "--epochs", "1", "--final-epochs", "1",
                   "--max-train", "200", "--out", str(out)])
    assert rc == 0
    return out


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_synth_files_frames_and_determinism(data_dir, tmp_path):
    files = sorted(data_dir.glob("*.csv"))
    assert len(files) == 3
    assert all(len(load_recording(p)) == 7500 for p in files)
    assert json.loads((data_dir / "manifest.json").read_text())["command"] == "synth"
    again = tmp_path / "again"
    cli.main(["synth", "--subjects", "3", "--sessions", "1", "--minutes", "1", "--seed", "4",
              "--out", str(again)])
    for p in files:
        assert (again / p.name).read_bytes() == p.read_bytes()


def test_default_synth_layout(tmp_path):
    assert cli.main(["synth", "--minutes", "0.05", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.csv"))) == 15


def test_search_outputs(search_dir):
    hist = read_rows(search_dir / "history.csv")
    assert len(hist) == 4
    front = es.read_candidates_csv(search_dir / "front.csv")
    for a in front:
        assert not any(es.dominates(b, a) for b in front)
    best = json.loads((search_dir / "best.json").read_text())
    cands = es.read_candidates_csv(search_dir / "history.csv")
    chosen = es.select_best(es.pareto_front(cands), 0.85)
    assert best["accuracy"] == chosen.accuracy and best["params"] == chosen.params
    assert load_model(search_dir / "best.carm").config.to_json() == best["config"]


def test_compress_report_rows(search_dir, data_dir, tmp_path):
    model = search_dir / "best.carm"
    base = ["--model", str(model), "--data", str(data_dir), "--out", str(tmp_path),
            "--repeats", "5"]
    assert cli.main(["compress", "--prune", "0.7", *base]) == 0
    assert cli.main(["compress", "--quant", "int8", *base]) == 0
    rows = read_rows(tmp_path / "compress_report.csv")
    assert [r["variant"] for r in rows] == ["prune0.7", "int8"]
    n = sum(v.size for v in load_model(model).network.tensors().values()
            if v.ndim > 1)
    assert abs(float(rows[0]["sparsity"]) - 0.7) <= 1 / n + 1e-6
    assert int(rows[1]["size_bytes"]) <= 0.3 * int(rows[1]["float_size_bytes"])


def test_compress_finetune_needs_held_out(search_dir, data_dir, tmp_path):
    rc = cli.main(["compress", "--model", str(search_dir / "best.carm"), "--prune", "0.5",
                   "--data", str(data_dir), "--out", str(tmp_path), "--repeats", "2",
                   "--finetune-epochs", "1", "--held-out", "9"])
    assert rc == 2


def test_run_with_commands_file(search_dir, data_dir, tmp_path):
    cmds = tmp_path / "cmds.txt"
    cmds.write_text("1000 fingers\n2000 banana\n")
    rc = cli.main(["run", "--model", str(search_dir / "best.carm"), "--replay",
                   str(data_dir / "sub01_ses1.csv"), "--commands", str(cmds),
                   "--out", str(tmp_path / "run")])
    assert rc == 0
    lines = [json.loads(x) for x in (tmp_path / "run" / "session.jsonl").read_text().splitlines()]
    cmd = [r for r in lines if r["type"] == "command"]
    assert cmd[0]["text"] == "fingers" and cmd[0]["mode"] == "Fingers"
    assert any(r["type"] == "warning" for r in lines)
    rep = json.loads((tmp_path / "run" / "latency.json").read_text())
    assert rep["inference_events"] == rep["n"] and 0 <= rep["online_accuracy"] <= 1
    assert rep["dropped_frames"] == 0 and rep["paced"] is False


def test_realtime_live_run_takes_wall_time(search_dir, tmp_path):
    t0 = time.perf_counter()
    rc = cli.main(["run", "--model", str(search_dir / "best.carm"), "--live", "--realtime",
                   "--seconds", "10", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    assert rc == 0
    rep = json.loads((tmp_path / "latency.json").read_text())
    assert 9.0 <= rep["wall_seconds"] <= 11.0
    assert elapsed <= 12.0
    assert rep["paced"] is True


def test_report_is_deterministic(search_dir, tmp_path):
    inputs = [str(search_dir / "history.csv"), str(search_dir / "front.csv")]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["report", "--in", *inputs, "--out", str(a)]) == 0
    assert cli.main(["report", "--in", *inputs, "--out", str(b)]) == 0
    files = sorted(p.name for p in a.iterdir() if p.name != "manifest.json")
    assert any(f.endswith(".svg") for f in files) and "filter_response.csv" in files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    svg = (a / "history_pareto.svg").read_text()
    assert svg.count("<circle class=\"marker\"") == len(read_rows(search_dir / "history.csv"))


def test_report_errors(tmp_path, capsys):
    assert cli.main(["report", "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert cli.main(["report", "--in", str(empty), "--out", str(tmp_path)]) == 2


def test_config_errors(tmp_path, monkeypatch):
    assert cli.main(["synth", "--subjects", "0", "--out", str(tmp_path)]) == 2
    assert cli.main(["search", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 2
    monkeypatch.setenv("CARM_SEED", "abc")
    assert cli.main(["synth", "--out", str(tmp_path)]) == 2
    monkeypatch.setenv("CARM_SEED", "11")
    assert cli.build_parser().parse_args(["synth", "--out", "x"]).seed == 11
