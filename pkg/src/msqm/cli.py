"""Command-line interface.

    msqm simulate | fit | sensitivity | mc | calibrate-confounding [flags]
    msqm <command> --config run.json

A config file is one JSON object with a ``command`` field; any flag given on
the command line overrides the matching config field.  Exit codes: 0 ok,
2 configuration error, 3 computation failure.  ``MSQM_WORKERS`` caps the
number of worker processes.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from .data import (
    LongitudinalDataset,
    StructuralModelSpec,
    linear_msqm,
    load_dataset,
    parse_terms,
    write_dataset,
)
from .errors import ComputationError, ConfigError, MSQMError

EXIT_OK, EXIT_CONFIG, EXIT_COMPUTE = 0, 2, 3


class _ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, allow_nan=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)


def _write_text(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)


def _floats(v):
    if v is None:
        return None
    if isinstance(v, (int, float)):
        return [float(v)]
    if isinstance(v, str):
        return [float(x) for x in v.split(",") if x.strip()]
    return [float(x) for x in v]


def _strings(v):
    if v is None:
        return None
    if isinstance(v, str):
        return [x.strip() for x in v.split(",") if x.strip()]
    return [str(x) for x in v]


def _workers(v):
    w = int(v or 1)
    cap = os.environ.get("MSQM_WORKERS")
    if cap:
        w = min(w, max(1, int(cap)))
    return max(1, w)


def _phi(cfg):
    if cfg.get("phi") is not None:
        return float(cfg["phi"])
    sc = str(cfg.get("scenario") or "I").upper()
    if sc not in ("I", "II"):
        raise ConfigError(f"scenario must be I or II, got {cfg.get('scenario')!r}")
    return 1.0 if sc == "I" else 1.5


# ---------------------------------------------------------------------------
# dataset and model-spec plumbing


def _infer_schema(path):
    import csv as _csv
    with open(path, newline="") as fh:
        header = next(_csv.reader(fh))
    sch = {}
    for nm in header:
        if nm == "Y":
            sch[nm] = {"role": "outcome"}
        elif len(nm) >= 2 and nm[0] == "A" and nm[1:].isdigit():
            sch[nm] = {"role": "treatment", "period": int(nm[1:])}
        elif len(nm) >= 3 and nm[0] == "L" and nm[1:].isdigit():
            sch[nm] = {"role": "covariate", "period": int(nm[1])}
        else:
            raise ConfigError(f"cannot infer the role of column {nm!r}; supply a schema")
    return sch


def _load(cfg) -> LongitudinalDataset:
    path = cfg.get("data")
    if not path:
        raise ConfigError("no input dataset (--data)")
    if not os.path.exists(path):
        raise ConfigError(f"dataset {path!r} not found")
    schema = cfg.get("schema")
    if isinstance(schema, str):
        with open(schema) as fh:
            schema = json.load(fh)
    if schema is None:
        side = path + ".schema.json"
        if os.path.exists(side):
            with open(side) as fh:
                schema = json.load(fh)
        else:
            schema = _infer_schema(path)
    return load_dataset(path, schema)


def _drop_missing(specs, data):
    present = {nm for blk in data.covariate_names for nm in blk}
    out = []
    for s in specs:
        names = set().union(*(t.covariate_names() for t in ([s] if hasattr(s, "covariate_names") else
                                                             [s.mean_terms, s.var_terms])))
        for nm in sorted(names - present):
            s = s.without_covariate(nm)
        out.append(s)
    return out


def _ps_specs(text, data):
    from .simulation import model_presets
    if text is None:
        text = "preset:ps_correct"
    if isinstance(text, str) and text.startswith("preset:"):
        return _drop_missing(model_presets(text.split(":", 1)[1]), data)
    periods = text.split(";") if isinstance(text, str) else list(text)
    return [parse_terms(p, data) for p in periods]


def _om_specs(text, data):
    from .outcome import OutcomeModelSpec
    from .simulation import model_presets
    if text is None:
        text = "preset:om_correct"
    if isinstance(text, str) and text.startswith("preset:"):
        return _drop_missing(model_presets(text.split(":", 1)[1]), data)
    periods = text.split(";") if isinstance(text, str) else list(text)
    out = []
    for p in periods:
        if isinstance(p, dict):
            out.append(OutcomeModelSpec(parse_terms(p["mean"], data), parse_terms(p.get("var", "1"), data),
                                        p.get("link", "linear")))
            continue
        mean, _, var = p.partition("|")
        out.append(OutcomeModelSpec(parse_terms(mean, data), parse_terms(var or "1", data)))
    return out


def _structural(cfg, data):
    rho = cfg.get("rho") or "stabilized"
    h = cfg.get("h")
    if h is None:
        return linear_msqm(data.K, rho)
    return StructuralModelSpec(parse_terms(h, data), rho)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg):
    from .simulation import INTERCEPTS, ScenarioConfig, calibrate_intercepts, generate_scenario, true_theta
    phi = _phi(cfg)
    n = int(cfg.get("n") or 2000)
    seed = int(cfg.get("seed") or 0)
    unmeasured = cfg.get("unmeasured") or "none"
    ints = INTERCEPTS.get(phi)
    if ints is None:
        ints = calibrate_intercepts(phi)
    sc = ScenarioConfig(n, phi, unmeasured, seed, intercepts=ints)
    data = generate_scenario(sc)
    out = cfg.get("out")
    _write_text(write_dataset(data), out)
    if out not in (None, "-"):
        _dump(data.schema(), out + ".schema.json")
    if cfg.get("truth"):
        qs = _floats(cfg.get("q")) or [0.25, 0.5, 0.75]
        _dump({"phi": phi, "intercepts": list(ints), "unmeasured": sc.unmeasured,
               "true_theta": {f"{q:g}": true_theta(q).tolist() for q in qs}}, cfg["truth"])
    return EXIT_OK


def _fit_one(method, data, q, st, prop, of, cfg):
    from .estimators import dr_smoothed_fit, icr_fit, icr_theta_solve, ipw_smoothed_fit, unadjusted_qr_fit
    if method == "icr":
        return icr_fit(data, q, st, of())
    if method == "dr":
        return dr_smoothed_fit(data, q, st, prop(), of())
    if method == "ipw":
        x0 = None
        if cfg.get("om") is not None:
            x0, _ = icr_theta_solve(of(), q, st, data)
        return ipw_smoothed_fit(data, q, st, prop(), x0=x0)
    if method == "qr":
        terms = ["1"] + [f"A{k}" for k in range(1, data.K + 1)]
        return unadjusted_qr_fit(data, q, parse_terms(terms, data))
    raise ConfigError(f"unknown method {method!r}; choose from icr, ipw, dr, qr")


def cmd_fit(cfg):
    from .outcome import fit_icr
    from .propensity import fit_propensity_sequence
    data = _load(cfg)
    methods = _strings(cfg.get("method")) or ["dr"]
    qs = _floats(cfg.get("q")) or [0.5]
    st = _structural(cfg, data)
    st.validate(data)
    ps_specs = _ps_specs(cfg.get("ps"), data)
    om_specs = _om_specs(cfg.get("om"), data)
    cache = {}

    def prop():
        if "p" not in cache:
            cache["p"] = fit_propensity_sequence(data, ps_specs)
        return cache["p"]

    def of():
        if "o" not in cache:
            cache["o"] = fit_icr(data, om_specs)
        return cache["o"]

    reports, ok = [], True
    B = cfg.get("bootstrap_B")
    for method in methods:
        for q in qs:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                fit = _fit_one(method.lower(), data, q, st, prop, of, cfg)
            rep = fit.to_dict()
            rep["warnings"] = [str(w.message) for w in caught]
            if B:
                from .estimators import bootstrap_ci
                fn = _RefitTheta(method.lower(), q, cfg, ps_specs, om_specs)
                lo, hi, _ = bootstrap_ci(fn, data, B=int(B), seed=int(cfg.get("seed") or 0),
                                         workers=_workers(cfg.get("workers")))
                rep["bootstrap_ci"] = {"lower": lo.tolist(), "upper": hi.tolist(), "B": int(B)}
            ok &= rep["converged"]
            reports.append(rep)
    _dump(reports, cfg.get("out"))
    return EXIT_OK if ok else EXIT_COMPUTE


class _RefitTheta:
    def __init__(self, method, q, cfg, ps_specs, om_specs):
        self.method, self.q, self.cfg = method, q, cfg
        self.ps_specs, self.om_specs = ps_specs, om_specs

    def __call__(self, data):
        from .outcome import fit_icr
        from .propensity import fit_propensity_sequence
        st = _structural(self.cfg, data)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = _fit_one(self.method, data, self.q, st,
                           lambda: fit_propensity_sequence(data, self.ps_specs),
                           lambda: fit_icr(data, self.om_specs), self.cfg)
        return fit.theta


def _parse_grid(g):
    if g is None:
        raise ConfigError("sensitivity needs a gamma grid (--grid)")
    if isinstance(g, str):
        g = json.load(open(g)) if os.path.exists(g) else json.loads(g)
    return {int(k): v for k, v in g.items()}


def _parse_contrast(c, K):
    if c is None:
        return None
    if isinstance(c, str):
        a, _, b = c.partition(":")
        c = [[int(x) for x in a.split(",")], [int(x) for x in b.split(",")]]
    if len(c) != 2 or any(len(r) != K for r in c):
        raise ConfigError(f"contrast must be two regimens of length {K}")
    return tuple(tuple(r) for r in c)


def cmd_sensitivity(cfg):
    from .outcome import fit_icr
    from .propensity import fit_propensity_sequence
    from .sensitivity import grid_to_csv, sensitivity_grid
    data = _load(cfg)
    q = (_floats(cfg.get("q")) or [0.5])[0]
    st = _structural(cfg, data)
    grid = _parse_grid(cfg.get("grid"))
    method = (cfg.get("method") or "BC_DR").upper().replace("-", "_")
    if not method.startswith("BC_"):
        method = "BC_" + method
    prop = fit_propensity_sequence(data, _ps_specs(cfg.get("ps"), data))
    om = _om_specs(cfg.get("om"), data)
    base = fit_icr(data, om)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = sensitivity_grid(data, q, st, prop, om, grid, _parse_contrast(cfg.get("contrast"), data.K),
                                method=method, outcome_fitseq=base)
    _write_text(grid_to_csv(rows, data.K), cfg.get("out"))
    anchor = [r for r in rows if all(v[0] == 0 for v in r.gammas.values())]
    return EXIT_OK if anchor and anchor[0].converged else EXIT_COMPUTE


def _load_confounding(src, case):
    from .sensitivity import spec_from_dict
    from .simulation import calibrate_confounding
    if src in (None, "calibrate"):
        return calibrate_confounding(case) if case not in (None, "none") else None
    with open(src) as fh:
        d = json.load(fh)
    names = {f"L{p}{j}": (p, j - 1) for p in range(1, 4) for j in (1, 2)}
    return spec_from_dict(d.get("spec", d), names)


def cmd_mc(cfg):
    from .montecarlo import StudyConfig, run_monte_carlo, stderr_progress
    cells = _strings(cfg.get("cells")) or ["dr:TT"]
    unmeasured = cfg.get("unmeasured") or "none"
    spec = None
    if any(c.lower().startswith("bc") for c in cells):
        spec = _load_confounding(cfg.get("confounding"), unmeasured)
    study = StudyConfig(
        R=int(cfg.get("R") or 200), n=int(cfg.get("n") or 2000), phi=_phi(cfg), unmeasured=unmeasured,
        cells=tuple(cells), qs=tuple(_floats(cfg.get("q")) or [0.5]), seed=int(cfg.get("seed") or 1),
        bootstrap_B=int(cfg["bootstrap_B"]) if cfg.get("bootstrap_B") else None, confounding=spec)
    summary = run_monte_carlo(study, workers=_workers(cfg.get("workers")), progress=stderr_progress)
    _write_text(summary.to_csv(), cfg.get("out"))
    return EXIT_OK


def cmd_calibrate_confounding(cfg):
    from .simulation import calibrate_confounding
    case = cfg.get("case")
    kw = {}
    if cfg.get("big_n"):
        kw["big_n"] = int(cfg["big_n"])
    if cfg.get("seed") is not None:
        kw["seed"] = int(cfg["seed"])
    spec = calibrate_confounding(case, phi=_phi(cfg), **kw)
    _dump({"case": case, "spec": spec.to_dict()}, cfg.get("out"))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "sensitivity": cmd_sensitivity,
    "mc": cmd_mc,
    "calibrate-confounding": cmd_calibrate_confounding,
}


def build_parser():
    p = _ArgParser(prog="msqm", description="Marginal structural quantile models.")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", help="output path (default stdout)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)

    s = sub.add_parser("simulate", help="simulate a dataset")
    common(s)
    s.add_argument("--scenario", choices=["I", "II"])
    s.add_argument("--phi", type=float)
    s.add_argument("--n", type=int)
    s.add_argument("--unmeasured", choices=["none", "case1", "case2", "case3"])
    s.add_argument("--truth", help="write true parameters and intercepts to this JSON file")
    s.add_argument("--q", help="quantiles for the truth file")

    for name in ("fit", "sensitivity"):
        f = sub.add_parser(name, help="fit estimators" if name == "fit" else "bias-corrected grid")
        common(f)
        f.add_argument("--data")
        f.add_argument("--schema", help="JSON schema file")
        f.add_argument("--method")
        f.add_argument("--q")
        f.add_argument("--ps", help="preset:<name> or ';'-separated term lists")
        f.add_argument("--om", help="preset:<name> or ';'-separated 'mean | var' term lists")
        f.add_argument("--h", help="structural model terms")
        f.add_argument("--rho", choices=["stabilized", "unit"])
        if name == "fit":
            f.add_argument("--bootstrap-B", dest="bootstrap_B", type=int)
        else:
            f.add_argument("--grid", help="JSON grid (inline or file)")
            f.add_argument("--contrast", help="e.g. 1,1,1:0,0,0")

    m = sub.add_parser("mc", help="Monte Carlo study")
    common(m)
    m.add_argument("--scenario", choices=["I", "II"])
    m.add_argument("--phi", type=float)
    m.add_argument("--R", type=int)
    m.add_argument("--n", type=int)
    m.add_argument("--cells")
    m.add_argument("--q")
    m.add_argument("--unmeasured", choices=["none", "case1", "case2", "case3"])
    m.add_argument("--bootstrap-B", dest="bootstrap_B", type=int)
    m.add_argument("--confounding", help="calibrated spec JSON, or 'calibrate'")

    c = sub.add_parser("calibrate-confounding", help="calibrate working confounding functions")
    common(c)
    c.add_argument("--case", choices=["case1", "case2", "case3"])
    c.add_argument("--big-n", dest="big_n", type=int)
    c.add_argument("--scenario", choices=["I", "II"])
    c.add_argument("--phi", type=float)
    return p


def _config(argv):
    cfg = {}
    if "--config" in argv:
        k = argv.index("--config")
        if k + 1 >= len(argv):
            raise ConfigError("--config needs a path")
        try:
            with open(argv[k + 1]) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {argv[k + 1]!r}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    if not argv or argv[0] not in COMMANDS:
        if cfg.get("command") not in COMMANDS:
            raise ConfigError("no command given; use one of " + ", ".join(COMMANDS))
        argv = [cfg["command"]] + argv
    args = build_parser().parse_args(argv)
    if cfg.get("command") not in (None, args.command):
        raise ConfigError(f"config is for {cfg['command']!r}, not {args.command!r}")
    for k, v in vars(args).items():
        if k not in ("config", "command") and v is not None:
            cfg[k] = v
    return args.command, cfg


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    np.seterr(all="ignore")
    try:
        command, cfg = _config(argv)
        return COMMANDS[command](cfg)
    except ConfigError as exc:
        _error(exc)
        return EXIT_CONFIG
    except (ComputationError, np.linalg.LinAlgError) as exc:
        _error(exc)
        return EXIT_COMPUTE
    except OSError as exc:
        _error(exc)
        return EXIT_CONFIG


def _error(exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
