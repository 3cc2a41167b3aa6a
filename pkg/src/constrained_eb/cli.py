"""Command line front end.

Subcommands::

    constrained-eb fit       --config cfg.json --input data.csv --output prior.json
    constrained-eb denoise   --config cfg.json --input data.csv --prior prior.json \\
                             --output denoised.csv --metrics metrics.json
    constrained-eb simulate  --scenario figure7 --seed 1 --replications 10 --output results.csv
    constrained-eb evaluate  --denoised denoised.csv --latents data.csv --prior prior.json

Configuration is a single JSON object. Any key can also be given on the
command line as ``--key value``; values are parsed as JSON when possible, so
``--noise_cov 0.5`` and ``--kernel_cov '[[0.1,0],[0,0.1]]'`` both work.
Command line values win over the file.

Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Failures print a one-line JSON record to stderr.
"""

import argparse
import json
import logging
import sys
import time

import numpy as np

from . import constrain, io
from .errors import ConfigError, ConstrainedEBError, DataError
from .gmodel import npmle, prior_from_dict, smooth_npmle
from .models import conjugate_vcb
from .simulate import SCENARIOS, parse_scenario, simulate
from .transport import BoxDistance, ConstraintSpec, Monomial, moment_functions, nonnegativity

logger = logging.getLogger("constrained_eb")

DEFAULTS = {
    "model": "gaussian",
    "noise_cov": 1.0,
    "prior": "npmle",
    "prior_file": None,
    "kernel_cov": 0.0,
    "family": None,
    "grid": "exemplar",
    "grid_k": 50,
    "refine": False,
    "kkt_tol": 1e-4,
    "max_iter": 5000,
    "method": "vcb",
    "moments": None,
    "target_mean": None,
    "target_cov": None,
    "bayes_column": None,
    "constraints": ["moments:2"],
    "gcb_grid_k": None,
    "pd_ridge": 0.0,
    "gh_order": 5,
    "mc_samples": 100,
    "seed": 0,
    "scenario": None,
    "replications": 1,
    "n": None,
    "methods": None,
    "workers": 1,
    "timing": False,
    "input": None,
    "output": None,
    "metrics": None,
    "scatter": None,
    "denoised": None,
    "latents": None,
}

METHODS = ("bayes", "vcb", "dcb", "gcb", "mvcb", "cvcb", "mdcb", "mgcb", "conjugate")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(extra):
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            val = extra[i + 1]
            i += 2
        else:
            val, i = "true", i + 1
        if key not in DEFAULTS:
            raise ConfigError(f"unknown option --{key}")
        out[key] = _parse_value(val)
    return out


def load_config(args, extra):
    """Defaults, then the JSON file, then command line values."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        cfg.update(loaded)
    for key, val in vars(args).items():
        if key not in ("config", "command", "verbose") and val is not None:
            cfg[key] = val
    cfg.update(_overrides(extra))
    if cfg["model"] not in ("gaussian", "gaussian-het", "poisson"):
        raise ConfigError(f"unknown model {cfg['model']!r}")
    return cfg


# ----------------------------------------------------------------------------
# shared steps


def load_data(cfg):
    """Read ``cfg['input']`` or, failing that, draw the configured scenario."""
    if cfg.get("input"):
        try:
            return io.read_dataset(cfg["input"], cfg["model"], cfg["noise_cov"])
        except OSError as exc:
            raise DataError(f"cannot read {cfg['input']}: {exc}") from exc
    if cfg.get("scenario"):
        from .models import make_rng

        base, extra = parse_scenario(cfg["scenario"])
        if base == "conjugate":
            raise ConfigError("conjugate scenarios have no dataset to fit; use simulate")
        params = dict(extra)
        if cfg.get("n"):
            params["n"] = int(cfg["n"])
        rng = make_rng(np.random.SeedSequence(cfg["seed"]).spawn(1)[0])
        return SCENARIOS[base](rng, **params)
    raise ConfigError("no --input given and no scenario configured")


def fit_prior(cfg, data):
    kind = cfg["prior"]
    opts = {"kkt_tol": float(cfg["kkt_tol"]), "max_iter": int(cfg["max_iter"])}
    if kind == "npmle":
        return npmle(data, grid=cfg["grid"], k=int(cfg["grid_k"]), refine=bool(cfg["refine"]), **opts)
    if kind == "smooth-npmle":
        K = np.asarray(cfg["kernel_cov"], dtype=float)
        return smooth_npmle(data, kernel_cov=K, grid=cfg["grid"], k=int(cfg["grid_k"]), **opts)
    if kind == "fixed":
        return load_prior(cfg["prior_file"])
    raise ConfigError(f"prior kind {kind!r} cannot be fitted")


def load_prior(path):
    if not path:
        raise ConfigError("no prior file given")
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read prior {path}: {exc}") from exc
    try:
        return prior_from_dict(d)
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed prior file {path}: {exc}") from exc


def prior_record(prior):
    rec = prior.to_dict()
    info = getattr(prior, "info", {}) or {}
    rec["fit"] = {k: info[k] for k in ("loglik", "kkt_gap", "iterations", "method", "candidates") if k in info}
    return rec


def parse_constraints(items, m):
    """Constraint list such as ``["moments:2", "nonneg"]``."""
    funcs = []
    for item in items if isinstance(items, list) else [items]:
        name, _, arg = str(item).partition(":")
        if name == "moments":
            funcs += moment_functions(m, int(arg or 2))
        elif name == "nonneg":
            funcs.append(nonnegativity(m))
        elif name == "const":
            funcs.append(Monomial([0] * m))
        elif name == "box":
            lo, hi = (float(v) for v in arg.split(","))
            funcs.append(BoxDistance(np.full(m, lo), np.full(m, hi)))
        else:
            raise ConfigError(f"unknown constraint {item!r}")
    return ConstraintSpec(funcs)


# ----------------------------------------------------------------------------
# subcommands


def cmd_fit(cfg):
    data = load_data(cfg)
    if cfg["prior"] == "conjugate":
        den = _conjugate(cfg, data)
        rec = {"conjugate": cfg["family"], "affine": den.to_dict()}
    else:
        rec = prior_record(fit_prior(cfg, data))
    text = io.dump_json(rec, cfg.get("output"))
    if not cfg.get("output"):
        sys.stdout.write(text)
    return 0


def _conjugate(cfg, data):
    if data.m != 1:
        raise ConfigError("conjugate priors need one-dimensional data")
    family = cfg["family"] or ("poisson" if cfg["model"] == "poisson" else "gaussian")
    noise = float(np.ravel(cfg["noise_cov"])[0]) if family == "gaussian" else None
    return conjugate_vcb(family, data, noise)


def run_denoise(cfg, data, prior):
    method = str(cfg["method"]).lower()
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "conjugate" or cfg["prior"] == "conjugate":
        den = _conjugate(cfg, data)
        return constrain.DenoiseReport(den(data.standardized), "conjugate", den)
    if method in ("cvcb", "mvcb", "mdcb", "mgcb") and not data.model.heterogeneous:
        raise ConfigError(f"method {method} needs per-row heterogeneity columns")
    bayes = None
    if cfg["bayes_column"]:
        bayes = io.read_values(cfg["input"], cfg["bayes_column"], data.n)
    if method == "bayes":
        return constrain.bayes(data, prior=prior)
    if method in ("vcb", "mvcb"):
        target = None
        if cfg["target_mean"] is not None:
            target = (cfg["target_mean"], cfg["target_cov"])
        moments = cfg["moments"] or ("prior" if method == "mvcb" else "data")
        rep = constrain.variance_constrained(
            data, bayes=bayes, prior=prior, moments=moments, target=target, pd_ridge=float(cfg["pd_ridge"])
        )
        if method == "mvcb":
            rep.method = "MVCB"
        return rep
    if method == "cvcb":
        return constrain.conditional_variance_constrained(
            data,
            prior=prior,
            mc_samples=int(cfg["mc_samples"]),
            seed=int(cfg["seed"]),
            bayes=bayes,
            pd_ridge=float(cfg["pd_ridge"]),
        )
    if method in ("dcb", "mdcb"):
        return constrain.distribution_constrained(data, bayes=bayes, prior=prior, gh_order=int(cfg["gh_order"]))
    spec = parse_constraints(cfg["constraints"], data.m)
    k = cfg["gcb_grid_k"]
    return constrain.general_constrained(data, bayes=bayes, prior=prior, constraints=spec, k=None if k is None else int(k))


def cmd_denoise(cfg):
    start = time.perf_counter()
    data = load_data(cfg)
    prior = None
    if cfg["prior"] != "conjugate" and str(cfg["method"]).lower() != "conjugate":
        prior = load_prior(cfg["prior_file"]) if cfg.get("prior_file") else fit_prior(cfg, data)
    rep = run_denoise(cfg, data, prior)
    header, values = io.dataset_columns(data)
    header = header + [f"d{k}" for k in range(1, data.m + 1)]
    if cfg.get("output"):
        io.write_table(cfg["output"], header, np.hstack([values, rep.values]))
    metrics = rep.metrics()
    metrics["evaluation"] = constrain.diagnostics(rep, data, None)
    if prior is not None:
        metrics["prior"] = prior_record(prior)["fit"]
    if cfg["timing"]:
        metrics["runtime_seconds"] = time.perf_counter() - start
    text = io.dump_json(metrics, cfg.get("metrics"))
    if not cfg.get("metrics"):
        sys.stdout.write(text)
    return 0


def cmd_simulate(cfg):
    if not cfg.get("scenario"):
        raise ConfigError("no scenario given")
    methods = cfg["methods"]
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",")]
    params = {}
    opts = {"kkt_tol": float(cfg["kkt_tol"]), "mc_samples": int(cfg["mc_samples"])}
    rows, scatters = simulate(
        cfg["scenario"],
        seed=int(cfg["seed"]),
        replications=int(cfg["replications"]),
        methods=methods,
        n=cfg["n"],
        workers=int(cfg["workers"]),
        params=params,
        opts=opts,
    )
    if cfg.get("output"):
        io.write_records(cfg["output"], rows)
    else:
        sys.stdout.write(io.dump_json(rows))
    if cfg.get("scatter"):
        _write_scatter(cfg["scatter"], scatters)
    return 0


def _write_scatter(path, scatters):
    records = []
    for rep, sc in enumerate(scatters):
        for kind, pts in sc.items():
            pts = np.atleast_2d(pts)
            for i, p in enumerate(pts):
                rec = {"replication": rep, "row": i, "kind": kind}
                rec.update({f"x{k + 1}": float(v) for k, v in enumerate(p)})
                records.append(rec)
    io.write_records(path, records)


def cmd_evaluate(cfg):
    if not cfg.get("denoised"):
        raise ConfigError("no --denoised file given")
    values = io.read_values(cfg["denoised"], "d")
    latents = None
    source = cfg.get("latents") or cfg["denoised"]
    header, table = io.read_table(source)
    if any(h.startswith("theta") for h in header):
        latents = io.read_values(source, "theta", values.shape[0])
    elif cfg.get("latents"):
        raise DataError(f"{source} has no theta1.. columns")
    prior = load_prior(cfg["prior_file"]) if cfg.get("prior_file") else None
    out = constrain.diagnostics(values, None, prior, latents)
    text = io.dump_json(out, cfg.get("output"))
    if not cfg.get("output"):
        sys.stdout.write(text)
    return 0


COMMANDS = {"fit": cmd_fit, "denoise": cmd_denoise, "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="constrained-eb",
        description="Constrained empirical Bayes denoising.",
        epilog="Any configuration key may also be passed as --key value.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--output", help="output file (stdout when omitted)")
        return p

    p = common(sub.add_parser("fit", help="fit a prior and write it as JSON"))
    p.add_argument("--input", help="observations CSV")

    p = common(sub.add_parser("denoise", help="denoise observations"))
    p.add_argument("--input", help="observations CSV")
    p.add_argument("--prior", dest="prior_file", help="prior JSON from `fit`")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--metrics", help="metrics JSON path")

    p = common(sub.add_parser("simulate", help="run a simulation scenario"))
    p.add_argument("--scenario", help="figure1, figure7, conjugate(<family>) or custom")
    p.add_argument("--seed", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--scatter", help="long-format CSV of latent/observed/denoised points")

    p = common(sub.add_parser("evaluate", help="score denoised values"))
    p.add_argument("--denoised", help="CSV with d1..dm columns")
    p.add_argument("--latents", help="CSV with theta1..thetam columns")
    p.add_argument("--prior", dest="prior_file", help="prior JSON for moment residuals")
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args, extra)
        return COMMANDS[args.command](cfg)
    except ConstrainedEBError as exc:
        sys.stderr.write(json.dumps(exc.to_record(), default=str) + "\n")
        return exc.exit_status
    except (ValueError, TypeError, KeyError) as exc:
        err = ConfigError(str(exc))
        sys.stderr.write(json.dumps(err.to_record()) + "\n")
        return err.exit_status


if __name__ == "__main__":
    sys.exit(main())
