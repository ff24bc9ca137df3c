"""Command line entry point: ``zrplab <command> [options]``.

Values come from built-in defaults, then an optional flat ``key = value``
config file (``--config``), then explicit flags.  Every run writes
``config.txt`` (the resolved configuration), ``results.csv``,
``report.json`` and, for the scaling experiments, ``plotdata/*.csv`` into
``out_dir`` (default ``$ZRPLAB_OUT_DIR`` or ``./zrplab_out``).

Exit status: 0 when every requested check passes, 1 on a failed check or
a truncation abort, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import experiments as X
from .engine import ScenarioSpec, KINDS
from .errors import ConfigurationError, DomainError, ResourceError, TruncationRiskError
from .observables import characteristic_speed, int_toward_zero

log = logging.getLogger("zrplab")

COMMANDS = ("simulate", "verify", "twopoint", "scaling", "diffusivity", "offchar", "lemma41", "tasep", "audit")

RESULT_COLUMNS = ("experiment", "rho", "lambda", "u", "V", "t", "m", "replicas", "estimate", "stderr", "seed")

# acceptance bands for fitted exponents
SLOPE_BANDS = {1.0: (0.55, 0.80), 2.0: (1.15, 1.55)}
DIFFUSIVITY_BAND = (0.20, 0.47)
TAGGED_BAND = (0.55, 0.80)
OFFCHAR_REL_TOL = 0.10
KS_TOL = 0.03

DEFAULT_GRID = (125.0, 250.0, 500.0, 1000.0, 2000.0)


@dataclass
class RunConfig:
    experiment: str = "simulate"
    kind: str = "muhat_pair"
    rho: float = 1.0
    lam: float = 0.8
    u: int = 5
    horizon: float = 100.0
    checkpoints: list = field(default_factory=list)
    observers: list = field(default_factory=lambda: [0.0])
    seed: int = 0
    margin_factor: float = 1.0
    t: float = 200.0
    V: list = field(default_factory=lambda: [0.0])
    m: float = 1.0
    t_grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    replicas: int = 1000
    workers: int = 1
    out_dir: str = ""
    alpha: float = 0.5
    particles: int = 50
    bijection_replicas: int = 100
    control: bool = False

    def echo(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in asdict(self).items())


# defaults that depend on the command; explicit values still win
COMMAND_DEFAULTS = {
    "verify": {"t": 200.0, "replicas": 20000},
    "twopoint": {"t": 20.0, "replicas": 2000, "margin_factor": 20.0},
    "scaling": {"replicas": 4000},
    "diffusivity": {"replicas": 4000},
    "offchar": {"t": 500.0, "replicas": 10000, "V": [0.0, 1.0]},
    "lemma41": {"t": 50.0, "replicas": 10000, "V": [0.25]},
    "tasep": {"horizon": 20.0, "replicas": 4000, "t_grid": []},
    "audit": {"t": 200.0, "replicas": 2000, "V": [0.0, 0.25]},
}

_LIST_KEYS = {"checkpoints", "observers", "V", "t_grid"}
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(float(x)) for x in v)
    return str(v)


def _coerce(key: str, raw):
    if key not in _TYPES:
        raise ConfigurationError(f"unknown config key {key!r}")
    if key in _LIST_KEYS:
        if isinstance(raw, (list, tuple)):
            return [float(x) for x in raw]
        raw = str(raw).strip()
        return [float(x) for x in raw.split(",") if x.strip()] if raw else []
    typ = _TYPES[key]
    try:
        if typ == "bool":
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return s in ("true", "1", "yes")
        if typ == "int":
            f = float(raw)
            if f != int(f):
                raise ValueError(raw)
            return int(f)
        if typ == "float":
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None
    return str(raw)


def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = _coerce(k, v)
    return out


def resolve_config(command: str, file_values: dict, flag_values: dict) -> RunConfig:
    values = dict(COMMAND_DEFAULTS.get(command, {}))
    values.update(file_values)
    values.update({k: _coerce(k, v) for k, v in flag_values.items() if v is not None})
    values["experiment"] = command
    if not values.get("out_dir"):
        values["out_dir"] = os.environ.get("ZRPLAB_OUT_DIR", "zrplab_out")
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.kind not in KINDS:
        raise ConfigurationError(f"unknown scenario kind {cfg.kind!r}")
    if not (cfg.rho >= 0 and math.isfinite(cfg.rho)):
        raise ConfigurationError("rho must be finite and >= 0")
    if cfg.replicas < 1:
        raise ConfigurationError("replicas must be >= 1")
    if cfg.workers < 1:
        raise ConfigurationError("workers must be >= 1")
    if cfg.margin_factor < 1:
        raise ConfigurationError("margin_factor must be >= 1")


# ---------------------------------------------------------------------------
# results


class Results:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.rows: list[dict] = []
        self.criteria: list[dict] = []
        self.fits: list[dict] = []
        self.plots: dict[str, list[tuple[float, float]]] = {}
        self.notes: dict = {}

    def row(self, experiment, estimate, stderr=None, *, V=None, t=None, m=None, lam=None, u=None,
            replicas=None, rho=None):
        c = self.cfg
        self.rows.append({
            "experiment": experiment,
            "rho": c.rho if rho is None else rho,
            "lambda": lam, "u": u, "V": V, "t": t, "m": m,
            "replicas": c.replicas if replicas is None else replicas,
            "estimate": estimate, "stderr": stderr, "seed": c.seed,
        })

    def criterion(self, name, lhs, rhs, z=None, passed=True, **extra):
        d = {"name": name, "lhs": lhs, "rhs": rhs, "z": z, "pass": bool(passed)}
        d.update(extra)
        self.criteria.append(d)

    def report(self, rep: X.IdentityReport):
        self.criteria.append(rep.as_dict())

    def series(self, name, series: X.MomentSeries, **row_kw):
        for t, est, se, n in series.entries:
            self.row(name, est, se, t=t, replicas=n, **row_kw)
        self.plots[name] = [(math.log(t), math.log(est)) for t, est, _, _ in series.entries if t > 0 and est > 0]

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.criteria)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _json_safe(o):
    if isinstance(o, dict):
        return {k: _json_safe(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_json_safe(v) for v in o]
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        f = float(o)
        if not math.isfinite(f):
            return str(f)
        return float(format(f, ".17g"))
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def emit_outputs(results: Results, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(results.cfg.echo())
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in results.rows:
            w.writerow([_cell(r[c]) for c in RESULT_COLUMNS])
    report = {
        "experiment": results.cfg.experiment,
        "pass": results.passed,
        "criteria": results.criteria,
        "fits": results.fits,
        "notes": results.notes,
    }
    (out / "report.json").write_text(json.dumps(_json_safe(report), indent=2) + "\n")
    if results.plots:
        pd = out / "plotdata"
        pd.mkdir(exist_ok=True)
        for name, pts in results.plots.items():
            with open(pd / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("log_t", "log_estimate"))
                for a, b in pts:
                    w.writerow((_cell(a), _cell(b)))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, res: Results):
    cps = tuple(cfg.checkpoints) or (cfg.horizon,)
    kw = {}
    if cfg.kind in ("three_process", "segment"):
        kw["lam"] = cfg.lam
    if cfg.kind == "segment":
        kw["u"] = cfg.u
    spec = ScenarioSpec(cfg.kind, cfg.rho, horizon=cfg.horizon, checkpoints=cps,
                        observers=tuple(cfg.observers), seed=cfg.seed, margin_factor=cfg.margin_factor, **kw)
    ens = X.run_ensemble(spec, cfg.replicas, workers=cfg.workers)
    merged = ens.merged()
    lam = cfg.lam if "lam" in kw else None
    u = cfg.u if "u" in kw else None
    for c, t in enumerate(merged.times):
        for k in range(merged.currents.shape[2]):
            for v, V in enumerate(merged.observers):
                est, se = X.mean_stderr(merged.currents[:, c, k, v])
                res.row(f"current[config={k}]", est, se, V=V, t=t, lam=lam, u=u)
        for d in merged.defect_ids:
            est, se = X.mean_stderr(merged.defect(d)[:, c])
            res.row(f"defect[{d}]", est, se, t=t, lam=lam, u=u)
    res.criterion("truncation_aborts", ens.aborted, 0, passed=ens.aborted == 0)
    res.criterion("coupling_violations", ens.violations, 0, passed=ens.violations == 0)


def cmd_verify(cfg: RunConfig, res: Results):
    reps = X.verify_identities(cfg.rho, cfg.V, cfg.t, cfg.replicas, cfg.seed, cfg.workers, cfg.margin_factor)
    for r in reps:
        V = r.extra.get("V")
        res.row(r.name, r.lhs_estimate, r.lhs_stderr, V=V, t=cfg.t)
        res.report(r)


def cmd_twopoint(cfg: RunConfig, res: Results):
    centre = int_toward_zero(characteristic_speed(cfg.rho) * cfg.t)
    tp = X.two_point_check(cfg.rho, cfg.t, samples=cfg.replicas, seed=cfg.seed, workers=cfg.workers,
                           margin_factor=cfg.margin_factor, check_sites=range(centre - 10, centre + 11))
    for r in (tp.sum_rule, tp.first_moment_rule, *tp.site_reports):
        res.row(r.name, r.lhs_estimate, r.lhs_stderr, t=cfg.t)
        res.report(r)
    res.notes["interior_sites"] = tp.interior


def _fit_criterion(res, name, fit, band, extra_check=None):
    res.fits.append({"name": name, **fit.as_dict()})
    ok = band is None or band[0] <= fit.slope <= band[1]
    extra = {}
    if extra_check is not None:
        ok_extra, extra = extra_check(fit)
        ok = ok and ok_extra
    res.criterion(f"{name}_slope", fit.slope, list(band) if band else None, passed=ok,
                  slope_stderr=fit.slope_stderr, **extra)


def cmd_scaling(cfg: RunConfig, res: Results):
    s = X.moment_series(cfg.rho, cfg.m, cfg.t_grid, cfg.replicas, cfg.seed, cfg.workers, cfg.margin_factor)
    res.series(f"moment_m{cfg.m:g}", s, m=cfg.m)
    fit = X.fit_exponent(s)
    band = SLOPE_BANDS.get(float(cfg.m))

    def not_diffusive(f):
        gap = f.slope - 0.5
        return gap > 2 * f.slope_stderr, {"excess_over_diffusive": gap}

    _fit_criterion(res, f"moment_m{cfg.m:g}", fit, band, not_diffusive if float(cfg.m) == 1.0 else None)


def cmd_diffusivity(cfg: RunConfig, res: Results):
    var, D = X.diffusivity_series(cfg.rho, cfg.t_grid, cfg.replicas, cfg.seed, cfg.workers, cfg.margin_factor)
    res.series("defect_variance", var, m=2.0)
    res.series("diffusivity", D, m=2.0)
    _fit_criterion(res, "diffusivity", X.fit_exponent(D), DIFFUSIVITY_BAND)


def cmd_offchar(cfg: RunConfig, res: Results):
    outs = X.offchar_suite(cfg.rho, list(cfg.V), cfg.t, cfg.replicas, cfg.seed, cfg.workers, cfg.margin_factor)
    for o in outs:
        r = o.report
        res.row(r.name, r.lhs_estimate, r.lhs_stderr, V=o.V, t=cfg.t)
        res.row(f"ks_distance[V={o.V:g}]", o.ks, None, V=o.V, t=cfg.t)
        res.criterion(r.name, r.lhs_estimate, r.rhs_estimate, r.z_score, o.rel_err < OFFCHAR_REL_TOL,
                      rel_err=o.rel_err, tolerance=OFFCHAR_REL_TOL)
        res.criterion(f"ks[V={o.V:g}]", o.ks, KS_TOL, passed=o.ks < KS_TOL)


def cmd_lemma41(cfg: RunConfig, res: Results):
    for V in cfg.V:
        r = X.lemma41_pathwise(cfg.rho, cfg.lam, cfg.u, V, cfg.t, cfg.replicas, cfg.seed, cfg.workers)
        res.row("lemma41_violations", r.violations, None, V=V, t=cfg.t, lam=cfg.lam, u=cfg.u)
        res.row("lemma41_checked", r.checked, None, V=V, t=cfg.t, lam=cfg.lam, u=cfg.u)
        if r.aborted:
            raise TruncationRiskError(f"{r.aborted} replicas hit the window edge")
        res.criterion(f"lemma41[V={V:g}]", r.violations, 0, passed=r.violations == 0, checked=r.checked)
        if cfg.control:
            c = X.lemma41_pathwise(cfg.rho, cfg.lam, cfg.u, V, cfg.t, cfg.replicas, cfg.seed, desync=True)
            res.row("lemma41_control_violations", c.violations, None, V=V, t=cfg.t, lam=cfg.lam, u=cfg.u)
            res.criterion(f"lemma41_control[V={V:g}]", c.violations, ">=1", passed=c.violations >= 1)


def cmd_tasep(cfg: RunConfig, res: Results):
    rho = 1.0 / cfg.alpha - 1.0
    bad = X.tasep_bijection_check(rho, cfg.particles, cfg.horizon, cfg.bijection_replicas, cfg.seed)
    res.row("tasep_bijection_mismatches", bad, None, t=cfg.horizon, rho=rho, replicas=cfg.bijection_replicas)
    res.criterion("tasep_bijection", bad, 0, passed=bad == 0)
    if cfg.t_grid:
        tg = X.tagged_particle_suite(cfg.alpha, cfg.t_grid, cfg.replicas, cfg.seed, cfg.workers, cfg.margin_factor)
        res.series("tagged_variance", tg.variance, rho=rho, V=cfg.alpha ** 2)
        for t, d, se in tg.drift:
            res.row("tagged_drift", d, se, t=t, rho=rho, V=cfg.alpha ** 2)
        if len(tg.variance.entries) >= 4:
            _fit_criterion(res, "tagged_variance", X.fit_exponent(tg.variance), TAGGED_BAND)


def cmd_audit(cfg: RunConfig, res: Results):
    t = cfg.t
    audits = {
        "stationary": X.truncation_audit(ScenarioSpec.stationary(cfg.rho, horizon=t, checkpoints=(t,),
                                                                 observers=tuple(cfg.V), seed=cfg.seed,
                                                                 margin_factor=cfg.margin_factor),
                                         cfg.replicas, cfg.workers),
        "muhat_pair": X.truncation_audit(ScenarioSpec.muhat_pair(cfg.rho, horizon=t, checkpoints=(t,),
                                                                 seed=cfg.seed, margin_factor=cfg.margin_factor),
                                         cfg.replicas, cfg.workers),
    }
    for group, out in audits.items():
        if out.pop("_aborted"):
            raise TruncationRiskError(f"{group} audit hit the window edge")
        for name, d in out.items():
            res.row(f"audit_{name}[narrow]", d["narrow"], d["stderr"], t=t)
            res.row(f"audit_{name}[wide]", d["wide"], d["stderr"], t=t)
            res.criterion(f"audit_{name}", d["wide"], d["narrow"], d["shift_in_stderr"],
                          d["shift_in_stderr"] < 1.0)


HANDLERS = {
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "twopoint": cmd_twopoint,
    "scaling": cmd_scaling,
    "diffusivity": cmd_diffusivity,
    "offchar": cmd_offchar,
    "lemma41": cmd_lemma41,
    "tasep": cmd_tasep,
    "audit": cmd_audit,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="flat key = value file; flags override it")
    g.add_argument("--kind", choices=KINDS)
    g.add_argument("--rho", type=float)
    g.add_argument("--lam", "--lambda", dest="lam", type=float)
    g.add_argument("--u", type=int)
    g.add_argument("--horizon", type=float)
    g.add_argument("--checkpoints", help="comma separated times")
    g.add_argument("--observers", help="comma separated observer speeds")
    g.add_argument("--seed", type=int)
    g.add_argument("--margin-factor", dest="margin_factor", type=float)
    g.add_argument("--t", type=float)
    g.add_argument("--V", help="comma separated speeds")
    g.add_argument("--m", type=float)
    g.add_argument("--t-grid", dest="t_grid", help="comma separated times")
    g.add_argument("--replicas", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--out-dir", dest="out_dir")
    g.add_argument("--alpha", type=float)
    g.add_argument("--particles", type=int)
    g.add_argument("--bijection-replicas", dest="bijection_replicas", type=int)
    g.add_argument("--control", action="store_const", const=True,
                   help="lemma41: also run the desynchronised negative control")
    g.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="zrplab", description="Monte Carlo lab for the constant-rate TAZRP")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=(HANDLERS[name].__doc__ or name).strip().splitlines()[0])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    try:
        file_values = read_config_file(ns.config) if ns.config else {}
        cfg = resolve_config(ns.command, file_values, flags)
    except (ConfigurationError, DomainError) as e:
        print(f"zrplab: configuration error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"zrplab: cannot read config: {e}", file=sys.stderr)
        return 2
    res = Results(cfg)
    code = 0
    try:
        HANDLERS[cfg.experiment](cfg, res)
        code = 0 if res.passed else 1
    except TruncationRiskError as e:
        res.notes["truncation"] = str(e)
        res.criterion("truncation", str(e), "no aborts", passed=False)
        code = 1
    except (ConfigurationError, DomainError, ResourceError) as e:
        print(f"zrplab: invalid parameters: {e}", file=sys.stderr)
        return 2
    try:
        out = emit_outputs(res, cfg.out_dir)
    except OSError as e:
        print(f"zrplab: cannot write outputs: {e}", file=sys.stderr)
        return 1
    for c in res.criteria:
        log.info("%s %s", "PASS" if c["pass"] else "FAIL", c["name"])
    print(f"{cfg.experiment}: {'PASS' if res.passed else 'FAIL'} ({len(res.criteria)} checks) -> {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
