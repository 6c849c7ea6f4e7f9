"""Command-line entry point: ``fracperc {simulate,moments,verify,limits,report}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from . import acceptance, experiments, minkowski, percolation, theory
from .percolation import CapacityError, ModelParams

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CAPACITY = 0, 1, 2, 3
MOMENT_COLUMNS = ["d", "M", "p", "n", "functional", "mean", "variance", "source"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "simulate"
    d: int = 2
    M: int = 2
    p: float = 0.8
    n: int = 4
    seed: int = 0
    reps: int = 10_000
    out: str | None = None
    dump: str | None = None
    trajectories: str | None = None
    condition_nonextinct: bool = False
    tolerance: float | None = None
    functionals: list[int] | None = None
    profile: str = "smoke"
    criteria: list[int] | None = None
    limit_checks: bool = False
    p_values: list[float] | None = None
    M_values: list[int] | None = None
    series_replications: int = 10_000

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def params(self, n: int | None = None) -> ModelParams:
        try:
            return ModelParams(self.d, self.M, self.p, self.n if n is None else n, seed=self.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_atomic(path: str | None, text: str):
    """Write text to path via a temporary file and rename; stdout when path is None."""
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> int:
    prm = cfg.params()
    r = percolation.generate(prm)
    d = prm.d
    columns = ["d", "M", "p", "seed", "n", "N"] + [f"V{k}" for k in range(d + 1)]
    rows = []
    for level, grid in enumerate(r.grids):
        v = minkowski.intrinsic_all(grid)
        row = {"d": d, "M": prm.M, "p": prm.p, "seed": prm.seed, "n": level, "N": grid.count}
        row.update({f"V{k}": (None if x is None else float(x)) for k, x in enumerate(v.values)})
        rows.append(row)
    text = csv_text(rows, columns)
    if cfg.dump:
        write_atomic(cfg.dump, percolation.dumps(r))
    write_atomic(cfg.out, text)
    return EXIT_OK


def moment_rows(cfg: RunConfig) -> list[dict]:
    prm = cfg.params()
    d, M, p = prm.d, prm.M, prm.p
    if cfg.n < 0:
        raise ConfigError("n must be >= 0")
    ks = cfg.functionals if cfg.functionals is not None else sorted({max(d - 1, 0), d})
    for k in ks:
        if k not in (d - 1, d):
            raise ConfigError(f"moments are available for k in {{d-1, d}}, got {k}")
    rows = []

    def add(n, functional, mean, var, source):
        rows.append({"d": d, "M": M, "p": p, "n": n, "functional": functional, "mean": mean,
                     "variance": var, "source": source})

    for n in range(cfg.n + 1):
        g = theory.gw_moments(prm, n)
        add(n, "N", g.mean, g.variance, "closed_form")
        w = theory.w_moments(prm, n)
        add(n, "W", w.mean, w.variance, "closed_form")
        if d in ks:
            v = theory.volume_moments(prm, n)
            add(n, d, v.mean, v.variance, "closed_form")
        if d - 1 in ks and d >= 2:
            st = theory.surface_variance_exact(prm, n)
            add(n, d - 1, theory.surface_mean(prm, n), st.Var_X, "recursion")
            if prm.supercritical:
                a = theory.surface_variance_asymptotic(prm, n)
                add(n, d - 1, theory.surface_constants(prm).c_bar_1 * (M * p) ** n, a.leading, f"asymptotic_{a.regime}")
    return rows


def cmd_moments(cfg: RunConfig) -> int:
    write_atomic(cfg.out, csv_text(moment_rows(cfg), MOMENT_COLUMNS))
    return EXIT_OK


def _custom_checks(cfg: RunConfig) -> acceptance.CriterionResult:
    """Simulation-vs-theory checks on the configured parameters."""
    prm = cfg.params()
    if cfg.limit_checks and not prm.supercritical:
        raise theory.SubcriticalError(f"limit checks need M^d p > 1, got {prm.mean_offspring:g}")
    z_max = acceptance.Z_MAX if cfg.tolerance is None else cfg.tolerance
    res = experiments.run(experiments.ReplicationPlan(prm, cfg.reps, functionals=cfg.functionals,
                                                      condition_nonextinct=cfg.condition_nonextinct))
    checks = []
    for row in experiments.summary_rows(res):
        if row["target"] is None or row["zscore"] is None or row["n"] == 0 or row["stat"] not in ("mean", "variance"):
            continue
        z = row["zscore"]
        checks.append((f"{row['stat']} Z_{row['n']}[{row['k']}]", abs(z) <= z_max,
                       f"value={row['value']:.6g} target={row['target']:.6g} z={z:+.2f}"))
    if cfg.limit_checks:
        for c in experiments.cv_limit_check(res):
            checks.append((f"CV^2 of Z_{c.n}[{c.k}] CI holds Var W_inf", c.contains,
                           f"stat={c.statistic:.5f} CI=[{c.ci_low:.5f}, {c.ci_high:.5f}] target={c.target:.5f}"))
    ok = all(c[1] for c in checks)
    return acceptance.CriterionResult(0, f"custom checks d={prm.d} M={prm.M} p={prm.p} n={prm.n_max}", ok, checks)


def cmd_verify(cfg: RunConfig, custom: bool = False) -> int:
    results = []
    if custom:
        res = _custom_checks(cfg)
        print(res.line())
        results.append(res)
    else:
        if cfg.criteria is not None and any(c not in acceptance.CRITERIA for c in cfg.criteria):
            raise ConfigError(f"criteria must be in 1..{len(acceptance.CRITERIA)}")
        if cfg.profile not in acceptance.PROFILES:
            raise ConfigError(f"profile must be one of {sorted(acceptance.PROFILES)}")
        results = acceptance.run_all(cfg.profile, cfg.criteria, cfg.tolerance, echo=print)
    report = {"profile": cfg.profile if not custom else "custom", "passed": all(r.passed for r in results),
              "criteria": [r.to_dict() for r in results]}
    if cfg.out:
        write_atomic(cfg.out, json.dumps(report, indent=2) + "\n")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def limit_columns(d: int) -> list[str]:
    cols = ["d", "M", "p", "subcritical", "var_W"]
    cols += [f"Vbar{k}" for k in range(d + 1)]
    cols += [f"var_Z{k}" for k in range(d + 1)]
    cols += [f"abs_cov_Z{k}_Z{l}" for k in range(d + 1) for l in range(k + 1, d + 1)]
    return cols


def limit_rows(cfg: RunConfig) -> tuple[list[dict], int]:
    d = cfg.d
    Ms = cfg.M_values or [cfg.M]
    ps = cfg.p_values or [cfg.p]
    rows, skipped = [], 0
    for M in Ms:
        for p in ps:
            try:
                prm = ModelParams(d, M, p)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            row = {"d": d, "M": M, "p": p, "subcritical": not prm.supercritical}
            if not prm.supercritical:
                skipped += 1
                rows.append(row)
                continue
            lf = theory.limit_functionals(prm, replications=cfg.series_replications)
            row["var_W"] = lf.var_W
            for k in range(d + 1):
                row[f"Vbar{k}"] = lf.Vbar[k]
                row[f"var_Z{k}"] = lf.cov[k, k]
                for l in range(k + 1, d + 1):
                    row[f"abs_cov_Z{k}_Z{l}"] = abs(lf.cov[k, l])
            rows.append(row)
    return rows, skipped


def cmd_limits(cfg: RunConfig) -> int:
    rows, skipped = limit_rows(cfg)
    write_atomic(cfg.out, csv_text(rows, limit_columns(cfg.d)))
    if skipped:
        print(f"{skipped} subcritical sweep point(s) flagged and left empty", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    """Monte Carlo summary table: per-level means and variances of W_n and Z_n[k] against theory."""
    prm = cfg.params()
    res = experiments.run(experiments.ReplicationPlan(prm, cfg.reps, functionals=cfg.functionals,
                                                      record_trajectories=cfg.trajectories is not None,
                                                      condition_nonextinct=cfg.condition_nonextinct))
    text = experiments.rows_to_csv(experiments.summary_rows(res))
    if cfg.trajectories:
        write_atomic(cfg.trajectories, experiments.trajectories_ndjson(res))
    write_atomic(cfg.out, text)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "moments": cmd_moments, "verify": cmd_verify, "limits": cmd_limits,
            "report": cmd_report}


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # defaults are None so that only flags actually given override the config file
    common.add_argument("-d", type=int, default=None, help="dimension")
    common.add_argument("-M", type=int, default=None, help="subdivision factor")
    common.add_argument("-p", type=float, default=None, help="retention probability")
    common.add_argument("-n", type=int, default=None, help="number of levels")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--reps", type=int, default=None, help="replications")
    common.add_argument("--out", default=None, help="output path (stdout when omitted)")
    common.add_argument("--config", default=None, help="JSON config file; flags win")
    common.add_argument("--condition-nonextinct", action="store_true", default=None,
                        help="also report statistics conditional on N_n > 0 at the last level")
    common.add_argument("--tolerance", type=float, default=None, help="z-score bound for pass/fail")
    common.add_argument("--functionals", type=_int_list, default=None, help="comma-separated k values")

    ap = argparse.ArgumentParser(prog="fracperc", description="Fractal percolation simulator and moment checks.")
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="one realization, functionals per level")
    s.add_argument("--dump", default=None, help="also write the realization in RLE text format")
    sub.add_parser("moments", parents=[common], help="exact moments, recursions and asymptotics")
    v = sub.add_parser("verify", parents=[common], help="acceptance suite, or custom checks when -d/-M/-p are given")
    v.add_argument("--profile", choices=sorted(acceptance.PROFILES), default=None)
    v.add_argument("--criteria", type=_int_list, default=None, help="comma-separated criterion numbers")
    v.add_argument("--limit-checks", action="store_true", default=None, help="add CV^2 limit checks (custom mode)")
    lim = sub.add_parser("limits", parents=[common], help="limit functionals and covariances over a p sweep")
    lim.add_argument("--p-values", type=_float_list, default=None, help="comma-separated p values")
    lim.add_argument("--M-values", type=_int_list, default=None, help="comma-separated M values")
    lim.add_argument("--series-replications", type=int, default=None)
    r = sub.add_parser("report", parents=[common], help="Monte Carlo summary CSV against theory")
    r.add_argument("--trajectories", default=None, help="NDJSON path for per-replication trajectories")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = RunConfig.from_json(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    cfg.command = args.command
    names = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in vars(args).items():
        if key in names and key != "command" and value is not None:
            setattr(cfg, key, value)
    return cfg


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
        if cfg.command == "verify":
            custom = any(getattr(args, a) is not None for a in ("d", "M", "p"))
            return cmd_verify(cfg, custom)
        return COMMANDS[cfg.command](cfg)
    except (ConfigError, theory.SubcriticalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
