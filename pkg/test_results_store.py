import json
import os

import numpy as np
import pandas as pd
import pytest

from results_store import (
    TOOL_VERSION,
    CellKey,
    ResultsStore,
    TrajectoryParseError,
    failure_fraction,
    read_trajectory_csv,
    run_grid,
    write_json,
    write_trajectory_csv,
)


def key(step=0, target="all", source="train", metric="llc"):
    return CellKey(config_hash="abc", step=step, target=target, source=source, metric=metric)


def test_put_and_get(tmp_path):
    store = ResultsStore(str(tmp_path))
    assert store.get(key()) is None
    assert store.put(key(), {"value": 1.5})
    assert key() in store
    assert store.get(key()) == {"value": 1.5}
    assert store.put(key(), {"value": 1.5}) is False
    with pytest.raises(ValueError, match="different value"):
        store.put(key(), {"value": 2.0})
    assert list(store.keys()) == [key()]


def test_store_survives_reopening(tmp_path):
    ResultsStore(str(tmp_path)).put(key(step=7), 0.25)
    reopened = ResultsStore(str(tmp_path))
    assert reopened.get(key(step=7)) == 0.25
    leftovers = [name for _, _, names in os.walk(reopened.cells_dir) for name in names if name.startswith(".")]
    assert leftovers == []


def test_digest_is_stable_and_distinguishes_fields():
    assert key().digest() == key().digest()
    assert key().digest() != key(step=1).digest()
    assert key().digest() != key(metric="hessian_trace").digest()
    assert len(key().digest()) == 64


def test_run_grid_skips_completed_cells(tmp_path):
    store = ResultsStore(str(tmp_path))
    keys = [key(step=s) for s in range(4)]
    calls = []

    def compute(k):
        calls.append(k.step)
        return float(k.step) * 2

    first = run_grid(keys, compute, store=store)
    assert [value for _, value in first] == [0.0, 2.0, 4.0, 6.0]
    second = run_grid(keys, compute, store=store, workers=2)
    assert [value for _, value in second] == [0.0, 2.0, 4.0, 6.0]
    assert calls == [0, 1, 2, 3]


def test_failed_cells_are_retried_on_the_next_run(tmp_path):
    store = ResultsStore(str(tmp_path))
    keys = [key(step=s) for s in range(3)]
    broken = {1}
    calls = []

    def compute(k):
        calls.append(k.step)
        if k.step in broken:
            raise RuntimeError("chain diverged")
        return k.step

    results = run_grid(keys, compute, store=store)
    assert [value for _, value in results] == [0, None, 2]
    assert failure_fraction(results) == pytest.approx(1 / 3)
    assert key(step=1) not in store
    broken.clear()
    results = run_grid(keys, compute, store=store)
    assert [value for _, value in results] == [0, 1, 2]
    assert calls == [0, 1, 2, 1]
    assert failure_fraction([]) == 0.0


def trajectory_rows():
    return [
        {"step": 10, "target": "head_0_0", "source": "train", "metric": "llc", "value": 3.25, "stderr": 0.1,
         "init_loss": 2.0, "chains_ok": 4, "chains_failed": 0, "negative": False},
        {"step": 0, "target": "all", "source": "train", "metric": "llc", "value": 1.0 / 3.0, "stderr": 0.2,
         "init_loss": 4.1, "chains_ok": 4, "chains_failed": 0, "negative": False},
        {"step": 10, "target": "all", "source": "train", "metric": "llc", "value": None},
    ]


def test_llc_csv_round_trip(tmp_path):
    path = str(tmp_path / "llc.csv")
    write_trajectory_csv(trajectory_rows(), path, "abc", value_column="lambda_hat")
    raw = pd.read_csv(path)
    assert "lambda_hat" in raw.columns and "value" not in raw.columns
    assert (raw["config_hash"] == "abc").all()
    assert (raw["tool_version"] == TOOL_VERSION).all()
    frame = read_trajectory_csv(path)
    assert list(zip(frame["step"], frame["target"])) == [(0, "all"), (10, "all"), (10, "head_0_0")]
    assert frame["value"].iloc[0] == 1.0 / 3.0
    assert np.isnan(frame["value"].iloc[1])
    assert frame["value"].iloc[2] == 3.25


def test_empty_trajectory_writes_only_the_header(tmp_path):
    path = str(tmp_path / "empty.csv")
    write_trajectory_csv([], path, "abc")
    with open(path) as f:
        lines = f.read().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith("step,target,source,metric,value")
    assert len(read_trajectory_csv(path)) == 0


def test_parse_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("step,target,source,metric,value\n0,all,train,llc,1.0\nx,all,train,llc,2.0\n")
    with pytest.raises(TrajectoryParseError, match="step 'x' is not an integer") as info:
        read_trajectory_csv(str(path))
    assert info.value.line == 3
    path.write_text("step,target,source,metric,value\n0,all,train,llc,abc\n")
    with pytest.raises(TrajectoryParseError, match="not a number"):
        read_trajectory_csv(str(path))
    path.write_text("step,target,value\n0,all,1.0\n")
    with pytest.raises(TrajectoryParseError, match="missing columns"):
        read_trajectory_csv(str(path))
    path.write_text("")
    with pytest.raises(TrajectoryParseError, match="file is empty") as info:
        read_trajectory_csv(str(path))
    assert info.value.line == 1


def test_write_json_embeds_provenance(tmp_path):
    path = str(tmp_path / "nested" / "report.json")
    write_json(path, {"b": 1, "a": [1, 2]}, "abc")
    with open(path) as f:
        text = f.read()
    document = json.loads(text)
    assert document == {"config_hash": "abc", "tool_version": TOOL_VERSION, "b": 1, "a": [1, 2]}
    write_json(path, {"a": [1, 2], "b": 1}, "abc")
    with open(path) as f:
        assert f.read() == text
