import io
import math

import pytest

import harness
from errors import ConfigError, DegenerateEstimateError
from estimators import BETWEEN_RUNS, NO_HITS
from harness import (
    CSV_HEADER,
    ExperimentConfig,
    build_config,
    load_config,
    main,
    read_rows,
    render,
    run_experiment,
    sweep,
)


def _cfg(**kwargs):
    values = dict(method="ak", alpha=0.5, gamma=10.0, d=2, nPerDensity=500, reps=1, seed=3)
    values.update(kwargs)
    return ExperimentConfig(**values)


def _stable(row):
    record = row.toRecord()
    record.pop("cpu_seconds")
    record.pop("rtvp")
    return record


def _untimed(text):
    # drop the wall-clock columns from every CSV line
    timing = {CSV_HEADER.index("rtvp"), CSV_HEADER.index("cpu_seconds")}
    return [[v for i, v in enumerate(line.split(",")) if i not in timing] for line in text.split("\n")]


def test_ak_in_one_dimension_is_exact_over_replications():
    rows = run_experiment(_cfg(alpha=1.0, gamma=2.0, d=1, reps=3))
    assert len(rows) == 1
    assert rows[0].ellHat == pytest.approx(math.exp(-2.0), rel=1e-14)
    assert rows[0].re == 0.0
    assert rows[0].reps == 3
    assert BETWEEN_RUNS in rows[0].flags


def test_csv_has_the_fixed_header():
    text = render(run_experiment(_cfg()))
    lines = text.split("\n")
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(text.splitlines()) == 2
    assert text.endswith("\n") and "\r" not in text


def test_table_format_renders():
    text = render(run_experiment(_cfg()), "table")
    assert "ell_hat" in text.splitlines()[0]


def test_no_hits_is_flagged():
    rows = run_experiment(_cfg(method="cmc", alpha=1.0, gamma=200.0, nPerDensity=1000))
    assert rows[0].ellHat == 0.0
    assert NO_HITS in rows[0].flags
    assert math.isnan(rows[0].log10Ell)


def test_sweep_covers_the_grid_in_order():
    gammas = [5.0, 10.0, 20.0, 40.0, 80.0]
    rows = sweep(_cfg(nPerDensity=200), gammas, [0.3, 0.7])
    assert len(rows) == 10
    keys = [(r.method, r.gamma, r.alpha) for r in rows]
    assert keys == sorted(keys)


def test_runs_are_deterministic():
    a = run_experiment(_cfg(method="mcis", reps=2, nPerDensity=400))
    b = run_experiment(_cfg(method="mcis", reps=2, nPerDensity=400))
    assert [_stable(r) for r in a] == [_stable(r) for r in b]


def test_cells_do_not_depend_on_grid_order():
    forward = sweep(_cfg(method="cmc", nPerDensity=300), [2.0, 4.0, 8.0], [0.5])
    backward = sweep(_cfg(method="cmc", nPerDensity=300), [8.0, 4.0, 2.0], [0.5])
    assert [_stable(r) for r in forward] == [_stable(r) for r in backward]


def test_csv_round_trip():
    rows = run_experiment(_cfg(reps=2))
    parsed = read_rows(io.StringIO(render(rows)))
    assert len(parsed) == 1
    assert parsed[0].ellHat == rows[0].ellHat
    assert parsed[0].re == rows[0].re
    assert parsed[0].flags == rows[0].flags


def test_read_rows_rejects_foreign_csv():
    with pytest.raises(ConfigError):
        read_rows(io.StringIO("a,b\n1,2\n"))


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(method="elm-a", d=1).validate()
    with pytest.raises(ConfigError):
        _cfg(method="nope").validate()
    with pytest.raises(ConfigError):
        _cfg(method="elm-a", nPerDensity=[10, 10]).validate()
    with pytest.raises(ConfigError):
        _cfg(method="elm-b", alpha=1.5).validate()
    with pytest.raises(ConfigError):
        _cfg(reps=0).validate()
    assert _cfg(method="elm-a", nPerDensity=[10, 20, 30, 40]).validate().budget() == [10, 20, 30, 40]


def test_sweep_flags_invalid_cells():
    rows = sweep(_cfg(method="elm-b", nPerDensity=50), [5.0], [1.5])
    assert len(rows) == 1
    assert math.isnan(rows[0].ellHat)
    assert rows[0].flags


def test_config_file_with_flag_override(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# ak cell\nmethod = ak\nalpha = 0.5\ngamma = 4\nd = 3\nn_per_density = 50\nreps = 2\n", encoding="utf-8")
    values = load_config(path)
    assert values == {"method": "ak", "alpha": 0.5, "gamma": 4.0, "d": 3, "nPerDensity": 50, "reps": 2}
    args = harness._parser().parse_args(["estimate", "--config", str(path), "--reps", "5"])
    cfg = build_config(args)
    assert cfg.reps == 5
    assert cfg.method == "ak" and cfg.d == 3


def test_yaml_config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("method: elm-a\nn-per-density: [10, 20, 30, 40]\ngammas: [5, 10]\n", encoding="utf-8")
    assert load_config(path) == {"method": "elm-a", "nPerDensity": [10, 20, 30, 40], "gammas": [5.0, 10.0]}


def test_unknown_config_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("colour = red\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_lower_bound_command_forces_its_method():
    args = harness._parser().parse_args(["lower-bound", "--alpha", "0.9", "--gamma", "30", "--d", "10"])
    assert build_config(args).method == "lower-bound"


def test_main_exit_codes(tmp_path):
    out = tmp_path / "rows.csv"
    code = main(["estimate", "--method", "ak", "--alpha", "0.5", "--gamma", "10", "--d", "2", "--n-per-density", "100", "--reps", "2", "--out", str(out), "--verbosity", "2"])
    assert code == 0
    rows = read_rows(out)
    assert len(rows) == 1 and rows[0].method == "ak"
    assert main(["estimate", "--method", "elm-a", "--d", "1", "--out", str(tmp_path / "x.csv"), "--verbosity", "2"]) == 1


def test_estimator_failures_become_flags(monkeypatch):
    def fail(*args, **kwargs):
        raise DegenerateEstimateError("boom")

    monkeypatch.setattr(harness, "cmc_estimate", fail)
    rows = run_experiment(_cfg(method="cmc"))
    assert math.isnan(rows[0].ellHat)
    assert "boom" in rows[0].flags


def test_compare_runs_matched_budgets():
    rows = run_experiment(_cfg(method="compare", alpha=0.5, gamma=20.0, d=3, nPerDensity=200))
    assert sorted(r.method for r in rows) == ["ak", "elm-a", "mcis"]
    sizes = {r.method: r.n for r in rows}
    assert sizes["ak"] == 800


def _sweepArgs(out, *extra):
    return ["sweep", "--method", "ak", "--alphas", "0.3", "0.7", "--gammas", "5", "20", "--d", "3", "--n-per-density", "200", "--reps", "2", "--seed", "11", "--out", str(out), *extra]


def test_repeated_sweeps_write_identical_csv(tmp_path):
    first, second = tmp_path / "first.csv", tmp_path / "second.csv"
    assert main(_sweepArgs(first)) == 0
    assert main(_sweepArgs(second)) == 0
    a = first.read_bytes().decode("utf-8")
    b = second.read_bytes().decode("utf-8")
    assert len(a.splitlines()) == 5
    assert _untimed(a) == _untimed(b)


def test_worker_pool_matches_serial_sweep(tmp_path):
    serial, pooled = tmp_path / "serial.csv", tmp_path / "pooled.csv"
    assert main(_sweepArgs(serial, "--workers", "1")) == 0
    assert main(_sweepArgs(pooled, "--workers", "2")) == 0
    assert _untimed(serial.read_text(encoding="utf-8")) == _untimed(pooled.read_text(encoding="utf-8"))


def test_worker_pool_matches_serial_replications():
    serial = run_experiment(_cfg(method="mcis", reps=3, nPerDensity=300, workers=1))
    pooled = run_experiment(_cfg(method="mcis", reps=3, nPerDensity=300, workers=2))
    assert [_stable(r) for r in serial] == [_stable(r) for r in pooled]
