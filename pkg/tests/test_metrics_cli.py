import csv
import io
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facenas.cli import main
from facenas.config import RunConfig, toy_config
from facenas.metrics import PredictionSet, mae, rmse
from facenas.report import line_svg, scatter_svg
from facenas.tensor import ContractError

from conftest import tiny_config


def _ps(pred, target):
    return PredictionSet([f"c{i}" for i in range(len(pred))], pred, target)


def test_metric_examples():
    assert rmse(_ps([0, 0], [3, 4])) == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert mae(_ps([0, 0], [3, 4])) == 3.5
    same = _ps([1.5, 7, 20], [1.5, 7, 20])
    assert rmse(same) == 0.0 and mae(same) == 0.0


def test_empty_set_is_a_contract_error():
    with pytest.raises(ContractError):
        rmse(_ps([], []))
    with pytest.raises(ContractError):
        mae(_ps([], []))


def test_prediction_set_validation():
    with pytest.raises(ContractError):
        PredictionSet(["a", "a"], [1, 2], [1, 2])
    with pytest.raises(ContractError):
        PredictionSet(["a"], [1, 2], [1])
    with pytest.raises(ContractError):
        PredictionSet(["a"], [math.nan], [1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(0, 24)), min_size=1, max_size=50))
def test_mae_never_exceeds_rmse(pairs):
    ps = _ps([p for p, _ in pairs], [t for _, t in pairs])
    assert mae(ps) <= rmse(ps) + 1e-12
    assert rmse(ps) >= 0


def test_prediction_csv_round_trip(tmp_path):
    ps = _ps([0.1, 2.0 / 3.0, 11.0], [1.0, 2.0, 3.0])
    ps.to_csv(tmp_path / "p.csv")
    back = PredictionSet.from_csv(tmp_path / "p.csv")
    assert back.clip_ids == ps.clip_ids
    np.testing.assert_array_equal(back.predictions, ps.predictions)


def test_svg_is_deterministic_and_parses():
    a = line_svg([1, 2, 3], [3.0, 2.0, 2.5], "curve", "t", "err")
    assert a == line_svg([1, 2, 3], [3.0, 2.0, 2.5], "curve", "t", "err")
    ET.fromstring(a)
    ET.fromstring(scatter_svg([1.0, 5.0], [2.0, 4.0], "scatter"))


def test_config_round_trip(tmp_path):
    cfg = toy_config(7, "somewhere")
    cfg.save(tmp_path / "c.toml")
    back = RunConfig.load(tmp_path / "c.toml")
    assert back.dumps() == cfg.dumps()
    assert back.stream_spaces() == cfg.stream_spaces()


def test_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "c.toml").write_text(toy_config().dumps() + "\nsurprise = 1\n")
    with pytest.raises(ValueError, match="surprise"):
        RunConfig.load(tmp_path / "c.toml")


def test_worker_override(monkeypatch):
    cfg = toy_config()
    monkeypatch.setenv("FACENAS_WORKERS", "3")
    assert cfg.workers() == 3


# ------------------------------------------------------------------ command line

@pytest.fixture
def tiny_run(tmp_path):
    cfg_path = tmp_path / "run.toml"
    run_dir = tmp_path / "run"
    tiny_config(output_dir=str(run_dir), joint_steps=3).save(cfg_path)
    return cfg_path, run_dir


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["search", "--bogus"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["search", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["evaluate"]) == 2


def test_failed_stage_exits_1(tmp_path, capsys):
    bad = tmp_path / "p.csv"
    bad.write_text("clip_id,prediction\nc0,1\n")
    assert main(["evaluate", "--predictions", str(bad)]) == 1
    assert "missing columns" in capsys.readouterr().err


def test_evaluate_perfect_predictions(tmp_path, capsys):
    _ps([3.0, 9.5, 12.0], [3.0, 9.5, 12.0]).to_csv(tmp_path / "p.csv")
    assert main(["evaluate", "--predictions", str(tmp_path / "p.csv")]) == 0
    out = capsys.readouterr().out
    assert "RMSE=0.0000" in out and "MAE=0.0000" in out


def test_full_command_line_flow(tiny_run, capsys):
    cfg_path, run_dir = tiny_run
    assert main(["encode", "--config", str(cfg_path)]) == 0
    assert (run_dir / "encoded.ckpt").exists()
    assert main(["search", "--config", str(cfg_path), "--stop-after", "1"]) == 0
    assert "incomplete at t=1" in capsys.readouterr().out
    # a fresh search on a used directory is refused; resume continues it
    assert main(["search", "--config", str(cfg_path)]) == 2
    assert main(["search", "--config", str(cfg_path), "--resume"]) == 0
    assert "complete at t=3" in capsys.readouterr().out
    assert main(["finalize", "--run-dir", str(run_dir)]) == 0
    report = json.loads((run_dir / "report.json").read_text())
    assert 1 <= len(report["finalists"]) <= 3
    assert main(["report", "--run-dir", str(run_dir)]) == 0
    rows = list(csv.DictReader(io.StringIO((run_dir / "leaderboard.csv").read_text())))
    assert rows and {"rank", "key", "count", "mean_error"} <= rows[0].keys()
    ET.parse(run_dir / "learning_curve.svg")
    ET.parse(run_dir / "predictions.svg")
    assert (run_dir / "finalists.csv").read_text().startswith("rank,")
    first = {p: (run_dir / p).read_bytes() for p in ("leaderboard.csv", "learning_curve.svg", "finalists.csv")}
    assert main(["report", "--run-dir", str(run_dir)]) == 0
    assert all((run_dir / p).read_bytes() == b for p, b in first.items())


def test_resume_with_a_different_config_is_refused(tiny_run, tmp_path):
    cfg_path, run_dir = tiny_run
    assert main(["search", "--config", str(cfg_path), "--stop-after", "1"]) == 0
    other = tmp_path / "other.toml"
    tiny_config(seed=9, output_dir=str(run_dir), joint_steps=3).save(other)
    assert main(["search", "--config", str(other), "--resume"]) == 2


def test_ablation_command(tiny_run, capsys):
    cfg_path, run_dir = tiny_run
    assert main(["evaluate", "--ablation", "--seeds", "1", "--config", str(cfg_path)]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert {r["kind"] for r in rows} == {"gnn", "cnn"}
    assert (run_dir / "ablation.json").exists()


def test_init_and_gen_data(tmp_path):
    cfg_path = tmp_path / "toy.toml"
    assert main(["init", "--config", str(cfg_path), "--run-dir", str(tmp_path / "r")]) == 0
    small = RunConfig.load(cfg_path)
    small.data.synthetic.n_clips = 3
    small.save(cfg_path)
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "csv")]) == 0
    assert (tmp_path / "csv" / "labels.csv").read_text().startswith("clip_id,score")
    assert len(list((tmp_path / "csv").glob("clip*_aus.csv"))) == 3
