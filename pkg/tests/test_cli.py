import json
import os
import subprocess
import sys

import numpy as np
import pytest

from trajsst.cli import main
from trajsst.ingest import read_dataset

HEADER = '"TRIP_ID","CALL_TYPE","TIMESTAMP","POLYLINE"\n'


def row(trip, polyline):
    return f'"{trip}","A","1372636858","{polyline}"\n'


# five trips, all with >= 2 points inside the box
FIVE_ROWS = HEADER + "".join([
    row(1, "[[-8.61,41.14],[-8.62,41.15],[-8.63,41.15]]"),
    row(2, "[[-8.65,41.15],[-8.66,41.16]]"),
    row(3, "[[-8.69,41.11],[-8.68,41.12],[-8.67,41.13],[-8.66,41.14]]"),
    row(4, "[[-8.6,41.2],[-8.7,41.1]]"),
    row(5, "[[-8.64,41.17],[-8.64,41.17],[-8.63,41.18]]"),
])

# the five above plus: one point outside (lon -8.71), a single point, a truncated
# polyline (malformed, file line 9) and an empty polyline
MIXED_ROWS = FIVE_ROWS + "".join([
    row(6, "[[-8.65,41.15],[-8.71,41.15]]"),
    row(7, "[[-8.65,41.15]]"),
    row(8, "[[-8.61"),
    row(9, "[]"),
])

TOY = {
    "data": {"resolution": 8},
    "synthetic": {"count": 30, "seed": 4},
    "experiment": {
        "epochs": 1, "batch_size": 8, "lr": 0.01,
        "sst": {"patch_size": 2, "embed_dim": 8, "num_heads": [2, 2]},
        "mlp": {"hidden": 6}, "cnn": {"channels": 3, "fc_width": 4},
    },
}


def write(path, text):
    path.write_text(text)
    return str(path)


def config(tmp_path, overrides=None, name="cfg.json"):
    cfg = json.loads(json.dumps(TOY))
    for section, values in (overrides or {}).items():
        cfg.setdefault(section, {}).update(values)
    return write(tmp_path / name, json.dumps(cfg))


def summary(path):
    return dict(line.split("=", 1) for line in (path / "summary.txt").read_text().splitlines())


def dir_bytes(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def run_error(argv, capsys):
    code = main(argv)
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error code={code} kind=")
    return code, err[0]


def test_ingest_five_row_fixture(tmp_path):
    csv_path = write(tmp_path / "trips.csv", FIVE_ROWS)
    assert main(["ingest", "--csv", csv_path, "--out", str(tmp_path / "a")]) == 0
    s = summary(tmp_path / "a")
    assert (s["rows"], s["malformed"], s["kept"], s["dropped"], s["sampled"]) == ("5", "0", "5", "0", "5")
    assert (s["train"], s["validation"], s["test"]) == ("3", "1", "1")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["grids_binary.tgrd", "grids_linear.tgrd", "grids_quadratic.tgrd", "sequences.tseq", "summary.txt"]
    split = read_dataset(tmp_path / "a" / "grids_linear.tgrd")
    assert split.resolution == 40 and len(split.train) == 3
    main(["ingest", "--csv", csv_path, "--out", str(tmp_path / "b")])
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")


def test_ingest_mixed_fixture_counts(tmp_path):
    csv_path = write(tmp_path / "trips.csv", MIXED_ROWS)
    assert main(["ingest", "--csv", csv_path, "--out", str(tmp_path / "o")]) == 0
    s = summary(tmp_path / "o")
    assert (s["rows"], s["malformed"], s["malformed_rows"]) == ("9", "1", "9")
    assert (s["parsed"], s["kept"], s["dropped"]) == ("8", "5", "3")


def test_ingest_errors(tmp_path, capsys):
    outside = write(tmp_path / "out.csv", HEADER + row(1, "[[-8.5,41.15],[-8.51,41.15]]"))
    code, line = run_error(["ingest", "--csv", outside, "--out", str(tmp_path / "x")], capsys)
    assert code == 4 and "kind=data" in line
    no_poly = write(tmp_path / "np.csv", '"TRIP_ID"\n"1"\n')
    assert run_error(["ingest", "--csv", no_poly, "--out", str(tmp_path / "x")], capsys)[0] == 4
    code, line = run_error(["ingest", "--csv", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x")], capsys)
    assert code == 3 and "kind=io" in line


def test_synth_is_byte_identical(tmp_path):
    cfg = config(tmp_path, {"synthetic": {"count": 100}})
    for name in ("a", "b"):
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")
    assert summary(tmp_path / "a")["generated"] == "100"


def test_synth_two_point_trips_have_one_cell(tmp_path):
    cfg = config(tmp_path, {"synthetic": {"min_length": 2, "max_length": 2}})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    for enc in ("binary", "linear", "quadratic"):
        split = read_dataset(tmp_path / "d" / f"grids_{enc}.tgrd")
        for section in split.sections():
            assert all(np.count_nonzero(g) == 1 for g in section.grids)


def test_synth_count_zero_is_an_error(tmp_path, capsys):
    code, _ = run_error(["synth", "--config", config(tmp_path), "--out", str(tmp_path / "d"), "--count", "0"], capsys)
    assert code == 4


@pytest.mark.parametrize("bad", [
    {"experiment": {"epoch": 3}},
    {"data": {"resolutoin": 8}},
    {"synthetic": {"resolution": 8}},
    {"experiment": {"model": "transformer"}},
    {"bogus": 1},
])
def test_config_errors(tmp_path, capsys, bad):
    cfg = json.loads(json.dumps(TOY))
    for section, values in bad.items():
        if isinstance(values, dict):
            cfg.setdefault(section, {}).update(values)
        else:
            cfg[section] = values
    path = write(tmp_path / "bad.json", json.dumps(cfg))
    code, line = run_error(["synth", "--config", path, "--out", str(tmp_path / "d")], capsys)
    assert code == 2 and "kind=config" in line


@pytest.fixture
def dataset(tmp_path):
    cfg = config(tmp_path)
    main(["synth", "--config", cfg, "--out", str(tmp_path / "data")])
    return cfg, str(tmp_path / "data")


def test_train_then_eval(tmp_path, dataset, capsys):
    cfg, data = dataset
    capsys.readouterr()
    assert main(["train", "--config", cfg, "--dataset", data, "--out", str(tmp_path / "runs")]) == 0
    out = tmp_path / "runs" / "train" / "sst_quadratic"
    report = dict(line.split("=", 1) for line in (out / "report.txt").read_text().splitlines())
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "model.tckp"), "--dataset", f"{data}/grids_quadratic.tgrd"]) == 0
    printed = capsys.readouterr().out
    assert f"mse_pixel2={report['test_mse']}" in printed


def test_train_lstm_defaults_encoder(tmp_path, dataset):
    cfg, data = dataset
    assert main(["train", "--config", cfg, "--dataset", data, "--model", "lstm", "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "train" / "lstm_na" / "model.tckp").exists()


def test_eval_missing_checkpoint(tmp_path, dataset, capsys):
    _, data = dataset
    code, line = run_error(["eval", "--checkpoint", str(tmp_path / "nope.tckp"),
                            "--dataset", f"{data}/grids_linear.tgrd"], capsys)
    assert code == 3 and "nope.tckp" in line


def test_eval_corrupt_checkpoint(tmp_path, dataset, capsys):
    cfg, data = dataset
    main(["train", "--config", cfg, "--dataset", data, "--out", str(tmp_path / "r")])
    ckpt = tmp_path / "r" / "train" / "sst_quadratic" / "model.tckp"
    ckpt.write_bytes(b"JUNK" + ckpt.read_bytes()[4:])
    code, line = run_error(["eval", "--checkpoint", str(ckpt), "--dataset", f"{data}/grids_linear.tgrd"], capsys)
    assert code == 4 and "magic" in line


def test_matrix_and_output_root_precedence(tmp_path, dataset, monkeypatch):
    cfg, data = dataset
    monkeypatch.setenv("TRAJSST_OUTPUT_ROOT", str(tmp_path / "env"))
    assert main(["matrix", "--config", cfg, "--dataset", data]) == 0
    lines = (tmp_path / "env" / "matrix" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "model,encoder,mse" and len(lines) == 11
    assert main(["matrix", "--config", cfg, "--dataset", data, "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "matrix" / "metrics.csv").read_bytes() == \
        (tmp_path / "env" / "matrix" / "metrics.csv").read_bytes()


def test_ablation_emits_three_pairs(tmp_path, dataset):
    cfg, data = dataset
    assert main(["ablation", "--config", cfg, "--dataset", data, "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "ablation" / "ablation.csv").read_text().splitlines()
    assert lines[0] == "encoder,sst_mse,shifted_mse"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["binary", "linear", "quadratic"]


REFERENCE_METRICS = """model,encoder,mse
mlp,binary,6.8748
mlp,linear,3.2009
mlp,quadratic,2.6359
cnn,binary,5.1156
cnn,linear,1.7879
cnn,quadratic,1.5543
sst,binary,5.2952
sst,linear,1.7722
sst,quadratic,1.4865
lstm,n/a,1.6562
"""


def test_report_on_reference_table(tmp_path, capsys):
    path = write(tmp_path / "metrics.csv", REFERENCE_METRICS)
    assert main(["report", "--matrix", path]) == 0
    text = (tmp_path / "report.txt").read_text()
    lines = text.splitlines()
    assert lines[0].split("|")[0].strip() == "Model \\ Method"
    assert [c.strip() for c in lines[0].split("|")[1:]] == ["Binary", "Linear", "Quadratic"]
    body = {ln.split("|")[0].strip(): [c.strip() for c in ln.split("|")[1:]] for ln in lines[2:]}
    assert list(body) == ["MLP", "CNN", "SST", "LSTM"]
    assert body["SST"] == ["5.2952", "1.7722", "1.4865"]
    assert body["LSTM"] == ["1.6562"]
    plot = (tmp_path / "plot_data.csv").read_text().splitlines()
    assert plot[0] == "encoder,model,mse" and "quadratic,sst,1.4865" in plot and len(plot) == 11
    assert capsys.readouterr().out == text


def test_report_errors_and_single_cell(tmp_path, capsys):
    code, _ = run_error(["report", "--matrix", write(tmp_path / "e.csv", "")], capsys)
    assert code == 4
    code, _ = run_error(["report", "--matrix", write(tmp_path / "h.csv", "a,b\n1,2\n")], capsys)
    assert code == 4
    code, _ = run_error(["report", "--matrix", write(tmp_path / "n.csv", "model,encoder,mse\nsst,linear,abc\n")], capsys)
    assert code == 4
    one = write(tmp_path / "one.csv", "model,encoder,mse\nsst,linear,1.25\n")
    assert main(["report", "--matrix", one, "--out", str(tmp_path / "rep")]) == 0
    lines = (tmp_path / "rep" / "report.txt").read_text().splitlines()
    assert len(lines) == 3 and lines[2].startswith("SST")


def test_module_entry_point(tmp_path):
    env = dict(os.environ)
    proc = subprocess.run([sys.executable, "-m", "trajsst.cli", "eval", "--checkpoint", str(tmp_path / "x"),
                           "--dataset", str(tmp_path / "y")], capture_output=True, text=True, env=env)
    assert proc.returncode == 3
    assert proc.stderr.startswith("error code=3 kind=io")
