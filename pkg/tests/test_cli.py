import csv
import json
from pathlib import Path

import pytest

from slm_forge.cli import main
from slm_forge.config import ConfigError, load_config, parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
COLUMNS = Path(__file__).resolve().parent.parent / "src" / "slm_forge" / "report_columns.json"

GBM_DEFECT = """
experiment = "defect"
model = "gbm"

[numerics]
seed = 7
n_paths = 4000
h = 0.0625
"""

LM_ANALYZE = """
experiment = "analyze"
model = "lm"

[numerics]
seed = 1

[analysis]
phi = [{ kind = "power", coef = 1.0, param = 2.0 }]
eps = [0.1, 0.1]
"""

OVERFLOW_ANALYZE = """
experiment = "analyze"
model = "wild"

[models.wild]
family = "basic"
rho = 0.5
mu = [{ kind = "power", coef = 1.0, param = 1.0 }]
b = [{ kind = "exp", coef = 1.0, param = -1.0 }]

[numerics]
seed = 1
"""


def write(tmp_path, text, name="exp.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_gbm_defect_is_martingale_consistent(tmp_path, capsys):
    code, out, _ = run(capsys, "--config", write(tmp_path, GBM_DEFECT), "--out", str(tmp_path / "o"))
    assert code == 0
    assert json.loads(out)["verdict"] == "martingale-consistent"
    report = json.loads((tmp_path / "o" / "defect_report.json").read_text())
    assert report["verdict"] == "martingale-consistent"
    assert report["seed"] == 7 and report["experiment"] == "defect"
    assert "timestamp" not in json.dumps(report)
    meta = json.loads((tmp_path / "o" / "defect_report.meta.json").read_text())
    assert "timestamp" in meta and meta["config_hash"] == report["config_hash"]


def test_analyze_lm_both_satisfied(tmp_path, capsys):
    code, _, _ = run(capsys, "--config", write(tmp_path, LM_ANALYZE), "--out", str(tmp_path))
    assert code == 0
    report = json.loads((tmp_path / "analyze_report.json").read_text())
    assert report["result"]["lm_martingale"]["verdict"] == "satisfied"
    assert report["result"]["lm_strict"]["verdict"] == "satisfied"
    assert report["verdict"] == "satisfied"


def test_negative_n_paths_names_the_field(tmp_path, capsys):
    cfg = write(tmp_path, GBM_DEFECT.replace("n_paths = 4000", "n_paths = -5"))
    code, out, err = run(capsys, "--config", cfg, "--out", str(tmp_path))
    assert code == 1 and out == ""
    e = error_of(err)
    assert e["field"] == "numerics.n_paths"
    assert not list(tmp_path.glob("*_report.json"))


@pytest.mark.parametrize(
    "text,field",
    [
        (GBM_DEFECT.replace('"defect"', '"teleport"'), "experiment"),
        (GBM_DEFECT.replace('model = "gbm"', 'model = "nowhere"'), "model"),
        (GBM_DEFECT.replace("seed = 7", ""), "numerics.seed"),
        (GBM_DEFECT + '\n[extra]\nx = 1\n', "extra"),
    ],
)
def test_config_errors_exit_one(tmp_path, capsys, text, field):
    code, _, err = run(capsys, "--config", write(tmp_path, text), "--out", str(tmp_path))
    assert code == 1
    assert error_of(err)["field"].startswith(field)


def test_compare_needs_an_enlargement():
    with pytest.raises(ConfigError):
        parse_config({"experiment": "compare", "model": "lm", "numerics": {"seed": 1}})


def test_seed_override(tmp_path, capsys):
    cfg = write(tmp_path, GBM_DEFECT.replace("seed = 7", ""))
    code, _, _ = run(capsys, "--config", cfg, "--seed", "3", "--out", str(tmp_path))
    assert code == 0
    assert json.loads((tmp_path / "defect_report.json").read_text())["seed"] == 3


def test_strict_flag_on_inconclusive_verdict(tmp_path, capsys):
    cfg = write(tmp_path, OVERFLOW_ANALYZE)
    code, out, _ = run(capsys, "--config", cfg, "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["verdict"] == "inconclusive"
    code, _, _ = run(capsys, "--config", cfg, "--out", str(tmp_path), "--strict")
    assert code == 2


def test_output_dir_falls_back_to_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SLM_FORGE_OUT", str(tmp_path / "env"))
    code, _, _ = run(capsys, "--config", write(tmp_path, GBM_DEFECT))
    assert code == 0
    assert (tmp_path / "env" / "defect_report.json").exists()


def test_dump_paths_and_atomic_writes(tmp_path, capsys):
    out = tmp_path / "o"
    code, _, _ = run(capsys, "--config", write(tmp_path, GBM_DEFECT), "--out", str(out), "--dump-paths")
    assert code == 0
    with open(out / "defect_paths.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {"t", "S", "v", "B", "W", "k", "Z"} <= set(rows[0])
    assert sorted(p.name for p in out.iterdir()) == [
        "defect_paths.csv", "defect_report.json", "defect_report.meta.json", "defect_rows.csv",
    ]


def test_same_seed_gives_identical_bytes(tmp_path, capsys):
    cfg = write(tmp_path, GBM_DEFECT)
    run(capsys, "--config", cfg, "--out", str(tmp_path / "a"))
    run(capsys, "--config", cfg, "--out", str(tmp_path / "b"), "--threads", "2")
    assert (tmp_path / "a" / "defect_report.json").read_bytes() == (tmp_path / "b" / "defect_report.json").read_bytes()


def test_bad_thread_count(tmp_path, capsys):
    code, _, err = run(capsys, "--config", write(tmp_path, GBM_DEFECT), "--threads", "0")
    assert code == 1 and error_of(err)["field"] == "threads"


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.*")), ids=lambda p: p.name)
def test_shipped_configs_validate(path):
    cfg = load_config(path)
    assert cfg.numerics.seed is not None


def test_column_docs_cover_csv_headers(tmp_path, capsys):
    docs = json.loads(COLUMNS.read_text())
    run(capsys, "--config", write(tmp_path, GBM_DEFECT), "--out", str(tmp_path))
    run(capsys, "--config", write(tmp_path, LM_ANALYZE, "a.toml"), "--out", str(tmp_path))
    for name in ("defect_rows.csv", "analyze_rows.csv"):
        with open(tmp_path / name, newline="") as fh:
            header = next(csv.reader(fh))
        assert set(header) <= set(docs[name])
