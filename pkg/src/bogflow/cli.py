"""Command-line drivers: config ingestion, experiments and report files.

    bogflow <subcommand> --config <path> [--out <dir>] [--format json,csv]

Exit codes: 0 all checks pass, 2 some check failed, 1 error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .cascade import cascade_all_modes, verify_property4_infspec
from .fockspace import (
    CapacityError,
    ModelParams,
    ModePair,
    PotentialSpec,
    SpecError,
    assemble_hbog,
    build_symmetric_sector_basis,
    lowest_eigenpairs,
    pair_tridiagonal,
)
from .threemode import (
    CoefficientSet,
    bogoliubov_energy,
    solve_ground_energy,
    x_lower_bound,
    x_sequence,
)
from .truncation import (
    TruncationParams,
    admissible_top,
    bare_operator_expansion,
    dn0_sensitivity,
    gamma_tau_h,
    truncation_decay,
)

SCHEMA_VERSION = 1
SUBCOMMANDS = ("three-mode", "cascade", "xseq", "truncation-study", "oracle", "convergence")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "model": {"d": 1, "L": 1.0, "phi0": 0.0},
    "solver": {"tol_rel": 1e-12, "max_basis": 5000},
    "coefficients": {"nu": 1.5, "kappa": 0.0},
    "truncation": {"zeta": 0.1, "dn0": 0.0},
    "scan": {},
    "cascade": {"gamma": 0.5, "C_perp": 1.0, "C_I": 1.0, "C_II": 1.0},
    "output": {"dir": "bogflow_out", "formats": ["json", "csv"]},
}


class ConfigError(ValueError):
    pass


def load_schema(name: str) -> dict:
    text = resources.files("bogflow").joinpath("schemas", name).read_text(encoding="utf-8")
    return json.loads(text)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    raw: dict  # validated, defaults filled
    spec: PotentialSpec

    @property
    def solver(self) -> dict:
        return self.raw["solver"]

    @property
    def scan(self) -> dict:
        return self.raw["scan"]

    @property
    def truncation(self) -> dict:
        return self.raw["truncation"]

    @property
    def cascade(self) -> dict:
        return self.raw["cascade"]

    @property
    def output(self) -> dict:
        return self.raw["output"]

    def coefficients(self, eps: float) -> CoefficientSet:
        c = self.raw["coefficients"]
        return CoefficientSet.from_eps(eps, c["nu"], c["kappa"])

    def truncation_params(self, N: int) -> TruncationParams:
        base = TruncationParams.default(N, self.truncation["zeta"])
        return TruncationParams(self.truncation.get("h", base.h),
                                self.truncation.get("jbar", base.jbar),
                                self.truncation["zeta"], self.truncation["dn0"])

    @property
    def hash(self) -> str:
        return hashlib.sha256(_canonical(self.raw).encode("utf-8")).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _field_message(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "multipleOf" and (path.endswith("N") or "N_values" in path):
        return f"{path}: particle number must be even, got {err.instance}"
    if err.validator == "oneOf" and "pairs" in path:
        return f"{path}: give exactly one of 'phi' or 'eps'"
    return f"{path}: {err.message} (constraint '{err.validator}')"


def _fill_defaults(cfg: dict) -> dict:
    out = copy.deepcopy(cfg)
    for key, val in DEFAULTS.items():
        if isinstance(val, dict):
            sec = out.setdefault(key, {})
            for k, v in val.items():
                sec.setdefault(k, copy.deepcopy(v))
        else:
            out.setdefault(key, val)
    return out


def build_config(cfg: dict) -> RunConfig:
    """Validate a config mapping and return it with defaults filled."""
    validator = jsonschema.Draft202012Validator(load_schema("config.schema.json"))
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(_field_message(e) for e in errors))
    raw = _fill_defaults(cfg)
    m = raw["model"]
    try:
        params = ModelParams(m["N"], m["d"], m["L"])
        pairs = [ModePair.on_lattice(p["j"], m["L"], phi=p.get("phi"), eps=p.get("eps"))
                 for p in m["pairs"]]
        spec = PotentialSpec(params, pairs, m["phi0"])
    except SpecError as exc:
        raise ConfigError(f"model: {exc}") from exc
    t = raw["truncation"]
    if "h" in t and t["dn0"] > t["h"]:
        raise ConfigError("truncation.dn0: must not exceed truncation.h")
    return RunConfig(raw, spec)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return build_config(cfg)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class Report:
    subcommand: str
    config: RunConfig
    results: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    error: str | None = None
    wall_time: float = 0.0

    def check(self, name: str, passed: bool, value=None, threshold=None):
        self.checks.append({"name": name, "passed": bool(passed),
                            "value": value, "threshold": threshold})

    def table(self, name: str, columns, rows):
        self.tables[name] = {"columns": list(columns), "rows": [list(r) for r in rows]}

    @property
    def status(self) -> str:
        if self.error is not None:
            return "error"
        return "pass" if all(c["passed"] for c in self.checks) else "fail"

    @property
    def exit_code(self) -> int:
        return {"pass": 0, "fail": 2, "error": 1}[self.status]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "subcommand": self.subcommand,
            "config_hash": self.config.hash,
            "config": self.config.raw,
            "results": self.results,
            "tables": self.tables,
            "checks": self.checks,
            "status": self.status,
            "error": self.error,
        }


def _plain(x):
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, tuple):
        return [_plain(v) for v in x]
    return x


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with floats at 17 significant digits and non-finite values as null."""
    obj = _plain(obj)
    pad, inner = " " * (indent * _level), " " * (indent * (_level + 1))
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(_plain(v), (dict, list)) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        items = [inner + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv_cell(v):
    v = _plain(v)
    if isinstance(v, float):
        return "" if not math.isfinite(v) else format(v, ".17g")
    if v is None:
        return ""
    return v


def emit_report(report: Report, out_dir, formats=("json", "csv")) -> list[Path]:
    """Write <sub>.json, <sub>_<table>.csv and the <sub>.meta.json sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = report.subcommand.replace("-", "_")
    written = []
    if "json" in formats:
        p = out / f"{stem}.json"
        p.write_bytes((dumps(report.to_dict()) + "\n").encode("utf-8"))
        written.append(p)
    if "csv" in formats:
        for name, tab in report.tables.items():
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(tab["columns"])
            for row in tab["rows"]:
                w.writerow([_csv_cell(v) for v in row])
            p = out / f"{stem}_{name}.csv"
            p.write_bytes(buf.getvalue().encode("utf-8"))
            written.append(p)
    meta = {
        "code_version": __version__,
        "config_hash": report.config.hash,
        "wall_time_s": report.wall_time,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "status": report.status,
    }
    p = out / f"{stem}.meta.json"
    p.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    written.append(p)
    return written


def validate_report(doc: dict):
    jsonschema.validate(json.loads(dumps(doc)), load_schema("report.schema.json"))


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BOGFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    """Order-stable map, fanned out over at most BOGFLOW_THREADS workers."""
    items = list(items)
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _capacity(cfg: RunConfig, spec: PotentialSpec):
    size = math.comb(spec.N // 2 + spec.M, spec.M)
    cap = cfg.solver["max_basis"]
    if size > cap:
        raise CapacityError(spec.N, spec.M, size, cap)


def _run_three_mode(rep: Report):
    cfg = rep.config
    spec = cfg.spec
    tol_rel = cfg.solver["tol_rel"]
    rows = []
    for idx, pair in enumerate(spec.pairs):
        fp = solve_ground_energy(spec.N, pair.k2, pair.phi, tol_rel * pair.phi)
        lam = float(lowest_eigenpairs(pair_tridiagonal(spec, idx), 1)[0][0])
        diff = abs(fp.z_star - lam)
        rows.append([idx + 1, spec.N, pair.k2, pair.phi, pair.eps, fp.z_star, fp.e_bog,
                     lam, diff, fp.residual])
        rep.check(f"isospectral_pair{idx + 1}", diff <= 1e-9 * abs(lam), diff, 1e-9 * abs(lam))
        rep.check(f"fixed_point_residual_pair{idx + 1}", fp.residual <= tol_rel * pair.phi,
                  fp.residual, tol_rel * pair.phi)
    rep.table("pairs", ["pair", "N", "k2", "phi", "eps", "z_star", "E_bog", "oracle_lambda_min",
                        "abs_diff", "f_residual"], rows)
    rep.results.update(z_star=rows[0][5], E_bog=rows[0][6], oracle_lambda_min=rows[0][7],
                       abs_diff=rows[0][8])


def _run_cascade(rep: Report):
    cfg = rep.config
    spec = cfg.spec
    _capacity(cfg, spec)
    c = cfg.cascade
    res = cascade_all_modes(spec, c["gamma"], cfg.solver["tol_rel"], c["C_perp"], c["C_I"],
                            c["C_II"])
    rec = res.gaps.recursion(spec.N, spec.M)
    rows = []
    prev_norm = 1.0
    for s in res.steps:
        rel = abs(s.z_total - s.oracle_energy) / abs(s.oracle_energy)
        rows.append([s.m, s.z_single, s.z_step, s.z_total, s.oracle_energy, rel, s.overlap,
                     s.residual, s.h_norm1, s.norm, s.n_plus, s.n_plus_bound,
                     s.rank_one_ratio, s.positivity_min, s.positivity_threshold,
                     s.gap_sector, s.gap_embedded, rec[s.m]])
        rep.check(f"energy_vs_oracle_m{s.m}", rel <= 1e-8, rel, 1e-8)
        rep.check(f"overlap_m{s.m}", s.overlap >= 1 - 1e-6, s.overlap, 1 - 1e-6)
        rep.check(f"residual_m{s.m}", s.residual <= 1e-8 * s.h_norm1, s.residual,
                  1e-8 * s.h_norm1)
        rep.check(f"norm_monotone_m{s.m}", s.norm >= prev_norm, s.norm, prev_norm)
        rep.check(f"number_bound_m{s.m}", s.n_plus <= s.n_plus_bound, s.n_plus, s.n_plus_bound)
        rep.check(f"rank_one_m{s.m}", s.rank_one_ratio <= 1e-10, s.rank_one_ratio, 1e-10)
        rep.check(f"pbar_positivity_m{s.m}", s.positivity_min >= s.positivity_threshold,
                  s.positivity_min, s.positivity_threshold)
        rep.check(f"gap_positive_m{s.m}", s.gap_sector > 0, s.gap_sector, 0.0)
        prev_norm = s.norm
    rep.table("steps", ["m", "z_single", "z_step", "z_total", "oracle_lambda_min", "rel_err",
                        "overlap", "residual", "H_norm1", "norm", "n_plus", "n_plus_bound",
                        "rank_one_ratio", "pbar_min_eig", "pbar_threshold", "gap_sector",
                        "gap_embedded", "gap_recursion"], rows)
    p4 = _map(lambda m: verify_property4_infspec(spec, m, res.steps[m - 1].z_total),
              range(1, spec.M + 1))
    rep.table("property4", ["m", "infspec", "z_bog", "deficit", "bound"],
              [[r.m, r.infspec, r.z_bog, r.deficit, r.bound] for r in p4])
    for r in p4:
        rep.check(f"property4_m{r.m}", r.passed, r.deficit, r.bound)
    rep.results.update(energy=res.energy, delta0=res.gaps.delta0, C_III=res.gaps.C_III,
                       norms=res.norms)


def _run_xseq(rep: Report):
    cfg = rep.config
    N = cfg.spec.N
    eps_values = cfg.scan.get("eps_values") or [p.eps for p in cfg.spec.pairs]
    rows = []
    for eps in eps_values:
        co = cfg.coefficients(eps)
        X = x_sequence(N, co)
        lb = x_lower_bound(N, co)
        ok = bool(np.all(X.values >= lb - 1e-14))
        inrange = bool(np.all((X.values > 0) & (X.values <= 1)))
        for j, (x, b) in enumerate(zip(X.values, lb)):
            rows.append([eps, 2 * j, x, b, bool(x >= b - 1e-14)])
        rep.check(f"lower_bound_eps{eps:g}", ok, float(np.min(X.values - lb)), 0.0)
        rep.check(f"unit_interval_eps{eps:g}", inrange, float(np.min(X.values)), 0.0)
    rep.table("xseq", ["eps", "i", "X", "lower_bound", "holds"], rows)
    rep.results.update(N=N, eps_values=list(eps_values))


def _run_truncation(rep: Report):
    from .cascade import run_pair_flow
    cfg = rep.config
    spec = cfg.spec
    _capacity(cfg, spec)
    pair = spec.pairs[0]
    N = spec.N
    fp = solve_ground_energy(N, pair.k2, pair.phi, cfg.solver["tol_rel"] * pair.phi,
                             check_regime=False)
    spec1 = spec.truncated(1)
    flow = run_pair_flow(spec1, None, 1, fp.z_star)
    h_values = [h for h in (cfg.scan.get("h_values") or [2, 4, 6, 8]) if N - h - 4 >= 0]
    gt = [gamma_tau_h(flow, h) for h in h_values]
    rep.table("gamma_tau", ["h", "residual", "identity_error"],
              [[g.h, g.residual, g.identity_error] for g in gt])
    ident = max(g.identity_error for g in gt)
    rep.check("two_path_identity", ident <= 1e-12, ident, 1e-12)
    if len(h_values) >= 2:
        fit = truncation_decay(flow, h_values, pair.eps)
        rep.check("residual_decreasing", fit.strictly_decreasing, None, None)
        rep.check("geometric_rate", fit.rate < 1, fit.rate, 1.0)
        rep.results.update(decay_rate=fit.rate, decay_c=fit.c)

    # Delta n_0 sensitivity over the N scan at a common offset below E^Bog
    N_values = cfg.scan.get("N_values") or [N]
    h = cfg.truncation_params(N).h
    sens_rows, K_first = [], None

    def sens(Nv):
        z = min(bogoliubov_energy(pair.k2, pair.phi) - 0.3 * pair.phi,
                admissible_top(Nv, pair.k2, pair.phi, h))
        return dn0_sensitivity(z, Nv, pair.k2, pair.phi, h)

    reports = _map(sens, [Nv for Nv in N_values if Nv - h - 6 >= 0])
    for r in reports:
        K_first = r.K_fit if K_first is None else K_first
        sens_rows.append([r.N, h, r.K_fit, float(np.max(r.derivatives))])
    rep.table("dn0_sensitivity", ["N", "h", "K_N", "max_derivative"], sens_rows)
    if reports:
        rep.check("single_K_covers_scan", all(r.within(K_first) for r in reports),
                  max(r.K_fit for r in reports), K_first)

    # bare expansion over the N scan
    params = cfg.truncation_params(N)
    exact = bare_operator_expansion(spec, cascade_all_modes(spec, with_oracle=False),
                                    params, exact=True)
    rep.check("exact_reconstruction", exact.error <= 1e-10, exact.error, 1e-10)

    def bare(Nv):
        s = spec.with_N(Nv)
        return bare_operator_expansion(s, cascade_all_modes(s, with_oracle=False), params).error

    errs = _map(bare, N_values)
    rep.table("bare_expansion", ["N", "h", "jbar", "error"],
              [[Nv, params.h, params.jbar, e] for Nv, e in zip(N_values, errs)])
    hit = [Nv for Nv, e in zip(N_values, errs) if e <= params.zeta]
    rep.results.update(N_zeta=min(hit) if hit else None, zeta=params.zeta)
    rep.check("zeta_reached", bool(hit), min(errs), params.zeta)


def _run_oracle(rep: Report):
    cfg = rep.config
    spec = cfg.spec
    _capacity(cfg, spec)
    basis = build_symmetric_sector_basis(spec)
    op = assemble_hbog(spec, basis)
    k = min(10, len(basis))
    vals, vecs = lowest_eigenpairs(op.to_dense(), k)
    res = float(np.linalg.norm(op.matvec(vecs[:, 0]) - vals[0] * vecs[:, 0]))
    norm1 = op.norm1()
    rep.table("spectrum", ["index", "eigenvalue"], [[i, v] for i, v in enumerate(vals)])
    gap = float(vals[1] - vals[0]) if k > 1 else math.inf
    rep.results.update(dim=len(basis), lambda_min=float(vals[0]), gap=gap, H_norm1=norm1)
    rep.check("residual", res <= 1e-10 * (1 + norm1), res, 1e-10 * (1 + norm1))
    rep.check("symmetric", op.asymmetry() == 0.0, op.asymmetry(), 0.0)
    rep.check("gap_positive", gap > 0, gap, 0.0)


def _run_convergence(rep: Report):
    cfg = rep.config
    pair = cfg.spec.pairs[0]
    N_values = cfg.scan.get("N_values") or [50, 100, 200, 400, 800]
    tol_rel = cfg.solver["tol_rel"]
    fps = _map(lambda Nv: solve_ground_energy(Nv, pair.k2, pair.phi, tol_rel * pair.phi,
                                              check_regime=False), N_values)
    diffs = [abs(fp.z_star - fp.e_bog) for fp in fps]
    ratios = [b / a for a, b in zip(diffs, diffs[1:])]
    rep.table("convergence", ["N", "z_star", "E_bog", "z_star_minus_E_bog"],
              [[Nv, fp.z_star, fp.e_bog, fp.z_star - fp.e_bog] for Nv, fp in zip(N_values, fps)])
    rep.results.update(ratios=ratios)
    rep.check("strictly_decreasing", all(r < 1 for r in ratios),
              max(ratios) if ratios else None, 1.0)
    rep.check("ratio_at_most_0.7", all(r <= 0.7 for r in ratios),
              max(ratios) if ratios else None, 0.7)


DRIVERS = {
    "three-mode": _run_three_mode,
    "cascade": _run_cascade,
    "xseq": _run_xseq,
    "truncation-study": _run_truncation,
    "oracle": _run_oracle,
    "convergence": _run_convergence,
}


def run_subcommand(name: str, config: RunConfig) -> Report:
    if name not in DRIVERS:
        raise ValueError(f"unknown subcommand {name!r}; choose from {', '.join(SUBCOMMANDS)}")
    rep = Report(name, config)
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            DRIVERS[name](rep)
    except Exception as exc:  # serialized into the report, exit code 1
        rep.error = f"{type(exc).__name__}: {exc}"
    rep.wall_time = time.perf_counter() - t0
    return rep


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bogflow", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("--format", help="comma-separated subset of json,csv")
    ap.add_argument("--version", action="version", version=f"bogflow {__version__}")
    args = ap.parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"bogflow: invalid config: {exc}", file=sys.stderr)
        return 1
    formats = cfg.output["formats"]
    if args.format:
        formats = [f.strip() for f in args.format.split(",") if f.strip()]
        bad = [f for f in formats if f not in ("json", "csv")]
        if bad:
            print(f"bogflow: unknown format(s): {', '.join(bad)}", file=sys.stderr)
            return 1
    out = args.out or cfg.output["dir"]
    rep = run_subcommand(args.subcommand, cfg)
    try:
        emit_report(rep, out, formats)
    except OSError as exc:
        print(f"bogflow: {exc}", file=sys.stderr)
        return 1
    failed = [c["name"] for c in rep.checks if not c["passed"]]
    print(f"{args.subcommand}: {rep.status}"
          + (f" ({rep.error})" if rep.error else "")
          + (f"; failed: {', '.join(failed)}" if failed else ""))
    return rep.exit_code


if __name__ == "__main__":
    sys.exit(main())
