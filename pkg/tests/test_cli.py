import csv
import io
import json
import math
import os

import numpy as np
import pytest

from fracperc import acceptance, cli, minkowski, percolation, theory
from fracperc.percolation import ModelParams


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_simulate_full_cube(capsys):
    code, out, _ = run(["simulate", "-d", "2", "-M", "2", "-p", "1", "-n", "3"], capsys)
    assert code == 0
    rows = _rows(out)
    assert [int(r["N"]) for r in rows] == [1, 4, 16, 64]
    for r in rows:
        assert (float(r["V0"]), float(r["V1"]), float(r["V2"])) == (1.0, 2.0, 1.0)


def test_simulate_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        assert cli.main(["simulate", "-d", "2", "-M", "3", "-p", "0.7", "-n", "4", "--seed", "5",
                         "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert cli.main(["simulate", "-d", "2", "-M", "3", "-p", "0.7", "-n", "4", "--seed", "6",
                     "--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_simulate_volume_in_three_dimensions(capsys):
    code, out, _ = run(["simulate", "-d", "3", "-M", "2", "-p", "0.6", "-n", "2", "--seed", "3"], capsys)
    assert code == 0
    last = _rows(out)[-1]
    assert float(last["V3"]) == int(last["N"]) / 64


def test_simulate_dump_round_trip(tmp_path, capsys):
    dump = tmp_path / "real.txt"
    assert cli.main(["simulate", "-d", "2", "-M", "2", "-p", "0.8", "-n", "3", "--seed", "2",
                     "--dump", str(dump), "--out", str(tmp_path / "s.csv")]) == 0
    r = percolation.loads(dump.read_text())
    ref = percolation.generate(ModelParams(2, 2, 0.8, 3, seed=2))
    assert [g.count for g in r.grids] == [g.count for g in ref.grids]


def test_moments_rows(capsys):
    code, out, _ = run(["moments", "-d", "2", "-M", "2", "-p", "0.7", "-n", "1"], capsys)
    assert code == 0
    rows = {(r["n"], r["functional"], r["source"]): r for r in _rows(out)}
    assert float(rows[("1", "2", "closed_form")]["variance"]) == pytest.approx(0.0525, rel=1e-12)
    assert float(rows[("1", "1", "recursion")]["mean"]) == pytest.approx(1.82, rel=1e-12)
    code, out, _ = run(["moments", "-d", "2", "-M", "3", "-p", "1", "-n", "3"], capsys)
    exact = [r for r in _rows(out) if r["source"] in ("closed_form", "recursion")]
    assert all(float(r["variance"]) == 0 for r in exact)


def test_exit_codes(tmp_path, capsys):
    assert run(["simulate", "-d", "2", "-M", "1", "-p", "0.5"], capsys)[0] == 2
    assert run(["simulate", "-p", "1.5"], capsys)[0] == 2
    assert run(["nonsense"], capsys)[0] == 2
    assert run(["verify", "--criteria", "11"], capsys)[0] == 2
    assert run(["verify", "-d", "2", "-M", "2", "-p", "0.2", "-n", "2", "--limit-checks"], capsys)[0] == 2
    assert run(["limits", "-d", "2", "--p-values", "0.2,0.8"], capsys)[0] == 2
    assert run(["simulate", "-d", "3", "-M", "3", "-p", "0.5", "-n", "12"], capsys)[0] == 3
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert run(["simulate", "--config", str(bad)], capsys)[0] == 2
    bad.write_text("[1, 2")
    assert run(["simulate", "--config", str(bad)], capsys)[0] == 2


def test_verify_custom_checks(tmp_path, capsys):
    out = tmp_path / "v.json"
    code, text, _ = run(["verify", "-d", "2", "-M", "2", "-p", "0.8", "-n", "3", "--reps", "2000",
                         "--seed", "4", "--out", str(out)], capsys)
    assert code == 0 and text.startswith("PASS")
    report = json.loads(out.read_text())
    assert report["profile"] == "custom" and report["passed"]
    # a zero tolerance must fail some check
    code, text, _ = run(["verify", "-d", "2", "-M", "2", "-p", "0.8", "-n", "3", "--reps", "2000",
                         "--tolerance", "0"], capsys)
    assert code == 1 and text.startswith("FAIL")


def test_verify_acceptance_subset(capsys):
    code, text, _ = run(["verify", "--criteria", "1,2"], capsys)
    assert code == 0
    assert [ln.split()[0] for ln in text.splitlines()[:2]] == ["PASS", "PASS"]


def test_config_round_trip_and_override(tmp_path, capsys):
    cfg = cli.RunConfig(command="simulate", d=2, M=3, p=0.6, n=2, seed=11)
    assert cli.RunConfig.from_json(cfg.to_json()) == cfg
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    _, from_cfg, _ = run(["simulate", "--config", str(path)], capsys)
    _, flags, _ = run(["simulate", "-d", "2", "-M", "3", "-p", "0.6", "-n", "2", "--seed", "11"], capsys)
    assert from_cfg == flags
    _, overridden, _ = run(["simulate", "--config", str(path), "--seed", "12"], capsys)
    assert {r["seed"] for r in _rows(overridden)} == {"12"}


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "out.csv"
    target.write_text("old\n")

    class Boom(Exception):
        pass

    def explode(*a, **k):
        raise Boom

    monkeypatch.setattr(os, "replace", explode)
    with pytest.raises(Boom):
        cli.write_atomic(str(target), "new\n")
    assert target.read_text() == "old\n"
    assert os.listdir(tmp_path) == ["out.csv"]


def test_report_writes_summary_and_trajectories(tmp_path, capsys):
    out, traj = tmp_path / "r.csv", tmp_path / "t.ndjson"
    assert cli.main(["report", "-d", "2", "-M", "2", "-p", "0.8", "-n", "3", "--reps", "50",
                     "--out", str(out), "--trajectories", str(traj)]) == 0
    assert len(traj.read_text().splitlines()) == 50
    assert _rows(out.read_text())


def test_limits_columns(capsys):
    code, out, _ = run(["limits", "-d", "2", "-M", "2", "--p-values", "0.6,0.8"], capsys)
    assert code == 0
    for r in _rows(out):
        prm = ModelParams(2, 2, float(r["p"]))
        m = prm.mean_offspring
        assert float(r["var_Z2"]) == pytest.approx((1 - prm.p) / (m - 1), rel=1e-12)
        assert float(r["var_W"]) == pytest.approx((1 - prm.p) / (m - 1), rel=1e-12)
        assert float(r["var_Z1"]) == pytest.approx(theory.surface_constants(prm).c_bar_2, rel=1e-12)
        assert float(r["Vbar2"]) == 1.0


def test_limits_subcritical_rows_are_flagged(capsys):
    code, out, err = run(["limits", "-d", "2", "-M", "2", "--p-values", "0.2,0.9"], capsys)
    assert code == 2 and "subcritical" in err
    rows = _rows(out)
    assert rows[0]["subcritical"] == "1" and rows[0]["var_W"] == ""
    assert rows[1]["subcritical"] == "0" and float(rows[1]["var_W"]) > 0


def test_limit_variances_along_p():
    """Var Z_inf^k over a p sweep: positive and decreasing for k = 1, 2, all vanish at p = 1.

    The Euler limit Vbar_0 changes sign inside the supercritical range, so
    Var Z_inf^0 touches zero there (a dip on a log plot) instead of decreasing.
    """
    ps = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0]
    cfg = cli.RunConfig(command="limits", d=2, M=2, p_values=ps)
    rows, skipped = cli.limit_rows(cfg)
    assert skipped == 0
    var = np.array([[r[f"var_Z{k}"] for k in range(3)] for r in rows])
    assert np.all(np.isfinite(var))
    for k in (1, 2):
        assert np.all(var[:-1, k] > 0) and np.all(np.diff(var[:, k]) < 0)
        assert var[-1, k] == pytest.approx(0, abs=1e-15)
    assert np.all(var[:, 0] >= 0) and var[-1, 0] == pytest.approx(0, abs=1e-15)
    vbar0 = np.array([r["Vbar0"] for r in rows])
    assert vbar0[0] > 0 and vbar0[6] < 0


def test_mutated_normalization_is_caught(monkeypatch):
    def wrong(d):
        den = [1] * (d + 1)
        if d >= 2:
            den[d - 1] = 3
        if d == 3:
            den[1] = 4
        return tuple(den)

    monkeypatch.setattr(minkowski, "_denominators", wrong)
    assert not acceptance.run_criterion(4, "smoke").passed


def test_formatting():
    assert cli._fmt(np.float64(0.5)) == "0.5"
    assert cli._fmt(None) == "" and cli._fmt(True) == "1" and cli._fmt(math.nan) == "nan"
