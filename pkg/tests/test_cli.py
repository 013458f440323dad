import subprocess
import sys

import pytest

from lsttm.cli import main
from lsttm.datasim import load, to_kv
from lsttm.evaluation import HourlyReport, read_reports, write_reports

from conftest import TINY_SIM, TINY_TRAIN


@pytest.fixture(scope="module")
def configs(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    (d / "sim.cfg").write_text(to_kv(TINY_SIM))
    (d / "train.cfg").write_text(to_kv(TINY_TRAIN))
    return d


def test_missing_input_exits_nonzero_without_output(tmp_path, capsys):
    out = tmp_path / "r.jsonl"
    assert main(["eval-temporal", str(tmp_path / "nope.ckpt"), str(tmp_path / "nope.log"), str(out)]) != 0
    assert not out.exists()
    assert "no such file" in capsys.readouterr().err


def test_module_entry_point_reports_missing_file(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lsttm", "train", str(tmp_path / "x.log"), str(tmp_path / "c")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and not (tmp_path / "c").exists()


def test_bad_config_line_is_an_error(tmp_path, configs, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("n_users = 4\nthis line has no equals sign\n")
    assert main(["generate-data", str(bad), str(tmp_path / "x.log")]) == 1
    assert ":2:" in capsys.readouterr().err


def test_report_merges_five_files_into_five_rows(tmp_path, capsys):
    paths = []
    for i, v in enumerate(("full", "no-meta", "no-external", "no-gating", "no-gat-ln")):
        p = tmp_path / f"{v}.jsonl"
        write_reports([HourlyReport(v, [0, 1, 2], [[0.6 + 0.01 * i] * 24] * 3)], p)
        paths.append(str(p))
    assert main(["report", *paths, "--out", str(tmp_path / "all.jsonl")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6
    assert [r.model for r in read_reports(tmp_path / "all.jsonl")] == ["full", "no-meta", "no-external", "no-gating", "no-gat-ln"]


def test_generate_train_eval_round_trip(tmp_path, configs, capsys):
    log_path, ck, rep = tmp_path / "events.log", tmp_path / "model.ckpt", tmp_path / "report.jsonl"
    assert main(["generate-data", str(configs / "sim.cfg"), str(log_path)]) == 0
    assert len(load(log_path)) > 0
    assert main(["train", str(log_path), str(configs / "train.cfg"), str(ck)]) == 0
    assert main(["eval-temporal", str(ck), str(log_path), str(rep)]) == 0
    (r,) = read_reports(rep)
    assert r.model == "full" and len(r.per_seed[0]) == 24
    assert "full" in capsys.readouterr().out


def test_seed_flag_overrides_config(tmp_path, configs):
    a, b = tmp_path / "a.log", tmp_path / "b.log"
    main(["generate-data", str(configs / "sim.cfg"), str(a)])
    main(["generate-data", str(configs / "sim.cfg"), str(b), "--seed", "7"])
    assert a.read_bytes() != b.read_bytes()
