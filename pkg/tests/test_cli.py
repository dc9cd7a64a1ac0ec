import json
import subprocess
import sys

import pytest

from cacheblend.bench import MetricsReport
from cacheblend.cli import main

from test_pipeline import CTX, scenario_70b, scenario_7b


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def model(tmp_path, capsys):
    path = tmp_path / "model.json"
    code, _, _ = run(capsys, "gen-model", "-o", path, "--num-layers", 4, "--num-heads", 2, "--head-dim", 8,
                     "--mlp-dim", 32, "--vocab-size", 50, "--seed", 3, "--json")
    assert code == 0
    return path


@pytest.fixture
def chunks_file(tmp_path):
    p = tmp_path / "chunks.txt"
    p.write_text("1 2 3 4 5 6\n\n7 8 9 10 11 12 13\n14 15 16 17\n")
    return p


@pytest.fixture
def stocked(tmp_path, capsys, model, chunks_file):
    store = tmp_path / "store"
    code, _, _ = run(capsys, "precompute", "--model", model, "--store", store, "--chunks", chunks_file, "--json")
    assert code == 0
    return store


def test_gen_model_digest(tmp_path, capsys):
    digests = []
    for name, seed in (("a", 1), ("b", 1), ("c", 2)):
        code, out, _ = run(capsys, "gen-model", "-o", tmp_path / f"{name}.json", "--seed", seed, "--json")
        assert code == 0
        digests.append(json.loads(out)["digest"])
    assert digests[0] == digests[1] != digests[2]
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["config"]["seed"] == 1 and len(doc["digest"]) == 64


def test_gen_model_invalid(tmp_path, capsys):
    code, _, err = run(capsys, "gen-model", "-o", tmp_path / "m.json", "--head-dim", 3)
    assert code == 2 and "head_dim" in err
    code, _, err = run(capsys, "gen-model", "-o", tmp_path / "missing" / "m.json")
    assert code == 2


def test_precompute(tmp_path, capsys, model, chunks_file, caplog):
    store = tmp_path / "store"
    code, out, err = run(capsys, "precompute", "--model", model, "--store", store, "--chunks", chunks_file, "--json")
    assert code == 0
    rows = json.loads(out)["chunks"]
    assert len(rows) == 3 and "empty line" in caplog.text
    assert rows[0]["bytes"] == 53 + 8 * 4 + 4 * 2 * 6 * 16 * 4 + 8
    files = sorted(p.name for p in (store / "local").glob("*.kvbl"))
    assert files == sorted(r["hash"] + ".kvbl" for r in rows)
    code, out2, _ = run(capsys, "precompute", "--model", model, "--store", store, "--chunks", chunks_file, "--json")
    assert code == 0 and json.loads(out2)["chunks"] == rows
    assert len(list((store / "local").glob("*.kvbl"))) == 3


def test_precompute_malformed(tmp_path, capsys, model):
    bad = tmp_path / "bad.txt"
    bad.write_text("1 2 3\n4 five 6\n")
    code, _, err = run(capsys, "precompute", "--model", model, "--store", tmp_path / "s", "--chunks", bad)
    assert code == 3 and ":2:" in err


def test_run_full_oracle(capsys, model, stocked, chunks_file):
    code, out, _ = run(capsys, "run", "--model", model, "--store", stocked, "--chunks", chunks_file,
                       "--suffix", "20 21 22", "--method", "full", "--oracle")
    assert code == 0
    doc = json.loads(out)
    assert all(d == 0 for d in doc["dattn_per_layer"])
    rep = MetricsReport.from_json(out)
    assert rep.method == "full" and rep.per_query[0]["mac_ratio"] == 1.0


def test_run_blend_r1(capsys, model, stocked, chunks_file, tmp_path):
    trace = tmp_path / "trace.jsonl"
    code, out, _ = run(capsys, "run", "--model", model, "--store", stocked, "--chunks", chunks_file,
                       "--suffix", "20 21 22", "--method", "blend", "--ratio", 1.0, "--oracle", "--trace", trace)
    assert code == 0
    doc = json.loads(out)
    assert max(doc["dattn_per_layer"]) <= 1e-5
    assert len(doc["selection_trace"]) == 4 and doc["ttft_sim"] > 0
    assert len(trace.read_text().splitlines()) == 16


def test_run_blend_partial(capsys, model, stocked, chunks_file):
    code, out, _ = run(capsys, "run", "--model", model, "--store", stocked, "--chunks", chunks_file,
                       "--suffix", "20 21 22", "--method", "blend(0.3)", "--oracle")
    assert code == 0
    rep = MetricsReport.from_json(out)
    assert rep.r == 0.3 and rep.per_query[0]["mac_ratio"] < 1


def test_run_missing_chunk(tmp_path, capsys, model, stocked):
    other = tmp_path / "other.txt"
    other.write_text("1 2 3 4 5 6\n30 31 32\n")
    code, _, err = run(capsys, "run", "--model", model, "--store", stocked, "--chunks", other, "--suffix", "1")
    assert code == 4 and len(err.split(":")[-1].split()) == 1


def test_run_bad_inputs(capsys, model, stocked, chunks_file):
    code, _, _ = run(capsys, "run", "--model", model, "--store", stocked, "--chunks", chunks_file, "--suffix", "x")
    assert code == 3
    code, _, _ = run(capsys, "run", "--model", model, "--store", stocked, "--chunks", chunks_file,
                     "--suffix", "1", "--method", "wormhole")
    assert code == 2
    code, _, _ = run(capsys, "run", "--model", model, "--store", stocked, "--chunks", chunks_file,
                     "--suffix", "1", "--method", "blend", "--ratio", 0)
    assert code == 2


def _cost_file(tmp_path, cost):
    p = tmp_path / "cost.json"
    p.write_text(json.dumps(cost.to_dict()))
    return p


def _tier(name, dev, price):
    return f"{name}={dev.throughput!r}:{price}:1e15"


def test_estimate_7b(tmp_path, capsys):
    cost, dev = scenario_7b()
    code, out, _ = run(capsys, "estimate", "--cost", _cost_file(tmp_path, cost), "--length", CTX,
                       "--tier", _tier("nvme", dev, 2), "--json")
    assert code == 0
    picked = json.loads(out)["picked"]
    assert picked["recompute_ratio"] == 0.8 and picked["device"] == "nvme"


def test_estimate_70b(tmp_path, capsys):
    cost, dev = scenario_70b()
    code, out, _ = run(capsys, "estimate", "--cost", _cost_file(tmp_path, cost), "--length", CTX,
                       "--tier", _tier("ssd", dev, 1), "--json")
    assert code == 0
    assert json.loads(out)["picked"]["recompute_ratio"] == 0.15


def test_estimate_fast_device_and_table(capsys, model):
    code, out, _ = run(capsys, "estimate", "--model", model, "--length", 64, "--tier", "ram=1e15:5:1e12")
    assert code == 0 and "picked" in out and "ram" in out
    code, out, _ = run(capsys, "estimate", "--model", model, "--length", 64, "--tier", "ram=1e15:5:1e12", "--json")
    picked = json.loads(out)["picked"]
    assert picked["recompute_ratio"] == 0.15 and picked["device"] == "ram"


def test_estimate_no_devices(capsys, model):
    code, _, _ = run(capsys, "estimate", "--model", model, "--length", 64)
    assert code == 2


def test_bench_command(tmp_path, capsys, model):
    out_path = tmp_path / "report.json"
    code, out, _ = run(capsys, "bench", "--model", model, "--store", tmp_path / "s", "--method", "blend(0.5)",
                       "--queries", 3, "--chunk-len", 6, "--db-size", 5, "--top-k", 2, "--suffix-len", 2,
                       "--oracle", "-o", out_path)
    assert code == 0
    rep = MetricsReport.from_json(out_path.read_text())
    assert len(rep.per_query) == 3 and rep.r == 0.5


def test_deterministic_output(tmp_path, capsys, model, stocked, chunks_file):
    args = ("run", "--model", model, "--store", stocked, "--chunks", chunks_file, "--suffix", "20 21",
            "--method", "blend(0.4)", "--oracle")
    assert run(capsys, *args)[1] == run(capsys, *args)[1]


def test_console_script(model):
    proc = subprocess.run([sys.executable, "-m", "cacheblend.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
