"""Command-line driver: ``sepmodel <command> [options]``.

Commands: ``gen-data``, ``fit``, ``bootstrap``, ``simulate``, ``intervene``
and ``validate``.  Every command writes a ``manifest.json`` next to its
outputs.  Option values come from the command line, then from the JSON file
given with ``--config`` (a flat object, or one object per command name),
then from the built-in defaults.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 input/output error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    SYNTHETIC_WINDOW,
    GeneratedData,
    StudyWindow,
    feature_names,
    generate_synthetic_population,
    generate_synthetic_visits,
    load_and_merge,
    read_surveys,
    read_transactions,
    save_json,
    standardize_features,
)
from .errors import (
    DataFormatError,
    DomainError,
    InsufficientDataError,
    LogDomainError,
    NonConvergenceError,
    NotOverdispersedError,
    ParameterDomainError,
    SepModelError,
)
from .fit import FitResult, bootstrap_significance, fit_contextual, fit_featureless
from .initiation import NegBinomParams, chi2_gof, fit_negbinom
from .intervene import (
    Geography,
    InterventionConfig,
    intervention_sweep,
    notification_threshold,
    threshold_histogram,
    write_sweep_csv,
)
from .likelihood import RegressionCoefficients
from .phase_type import CoxianParams, FitConfig
from .simulate import (
    ClientModel,
    SimConfig,
    chi2_compare,
    group_share_table,
    mean_ci,
    run_lifecycle_sim,
    write_shares,
)

log = logging.getLogger("sepmodel")

FEATURELESS = CoxianParams([0.8194, 0.1806], [0.0520, 0.0030], 0.0981)
INITIATION = NegBinomParams(3, 0.59725)

# default ground truth for gen-data: (rho, b1, g1, g2) per feature
DEFAULT_EFFECTS = {
    "gallery": (0.5448, -0.0387, 0.0, 0.0),
    "src_other_locations": (0.2047, 0.0, 0.0, 0.0004),
    "src_other_sep": (-0.3156, 0.0248, -0.0063, 0.0),
    "src_friends": (-0.1194, 0.0, 0.0, -0.0007),
    "src_strangers": (-0.2697, 0.0, 0.0, 0.0010),
    "drug_speedball": (0.0, -0.0704, 0.0146, -0.0008),
    "drug_heroin": (-0.0437, 0.0, 0.0, -0.0008),
    "tx_current": (-0.3254, 0.0243, -0.0126, 0.0),
    "tx_been": (-0.1137, -0.0178, 0.0063, 0.0),
    "gender_female": (0.0, 0.0, 0.0, 0.0008),
    "eth_african_american": (0.3623, 0.0, 0.0, 0.0),
    "eth_puerto_rican": (-0.7594, 0.0, 0.0101, 0.0),
    "eth_mexican": (-0.3383, 0.0, 0.0, 0.0010),
    "eth_other": (-0.1994, 0.0, 0.0, 0.0),
    "age_first_injection": (0.0, 0.0117, 0.0, 0.0003),
    "injection_span": (0.0, -0.0042, -0.0030, 0.0),
    "injections_per_day": (0.0, 0.0073, 0.0, -0.0001),
    "reuse_own_30d": (0.0380, 0.0, 0.0, 0.0),
    "days_in_area_30d": (-0.1968, 0.0, 0.0058, 0.0002),
}


class UsageError(Exception):
    pass


def substream(seed, name):
    """Integer seed for the named random substream of ``seed``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint64)[0])


def default_coefficients(names, featureless: CoxianParams = FEATURELESS):
    c = RegressionCoefficients.featureless(featureless, tuple(names))
    for name, (rho, b1, g1, g2) in DEFAULT_EFFECTS.items():
        if name in names:
            j = names.index(name) + 1
            c.rho[j], c.b[0, j], c.b[1, j] = rho, b1, -b1
            c.g[0, j], c.g[1, j] = g1, g2
    return c


# ---------------------------------------------------------------------------
# output bookkeeping


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Outputs:
    """Tracks written files so a failed command can remove partial results."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name):
        p = self.dir / name
        self.files.append(p)
        return p

    def text(self, name, content):
        self.path(name).write_text(content)

    def json(self, name, obj):
        save_json(self.path(name), obj)

    def cleanup(self):
        for p in self.files:
            if p.exists() and p.is_file():
                p.unlink()

    def manifest(self, command, args, inputs, started):
        snapshot = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
        doc = {
            "command": command,
            "version": __version__,
            "config": snapshot,
            "seed": getattr(args, "seed", None),
            "inputs": {str(p): _digest(p) for p in inputs if p and Path(p).exists()},
            "outputs": {p.name: _digest(p) for p in self.files if p.exists()},
            "duration_s": round(time.time() - started, 3),
        }
        save_json(self.dir / "manifest.json", doc)


# ---------------------------------------------------------------------------
# loaders


def _load_fit(path):
    """Featureless params or contextual coefficients (plus scaling metadata)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") == "featureless":
        return CoxianParams.from_json(doc["params"]), None, None
    if doc.get("kind") == "contextual":
        return (CoxianParams.from_json(doc["featureless"]),
                RegressionCoefficients.from_json(doc["coefficients"]), doc.get("scaling"))
    if "beta" in doc and "gamma" in doc:
        return CoxianParams.from_json(doc), None, None
    raise DataFormatError(f"{path}: not a fit result")


def _window(args):
    return StudyWindow.parse(args.window) if args.window else SYNTHETIC_WINDOW


def _population(args, seed):
    """Survey records to resample clients from."""
    if getattr(args, "surveys", None):
        return list(read_surveys(args.surveys).values())
    return generate_synthetic_population(args.population_size, substream(seed, "population"))


def _client_model(args, seed, fit_config):
    featureless, coeffs, scaling = _load_fit(args.fit)
    pop = _population(args, seed)
    if coeffs is None:
        if featureless.exit_p is None:
            raise DataFormatError("fit file lacks an exit probability")
        n = len(pop)
        model = ClientModel(np.tile(featureless.beta, (n, 1)), np.tile(featureless.gamma, (n, 1)),
                            np.full(n, featureless.exit_p))
    else:
        feats, _ = standardize_features(pop, scaling)
        model = ClientModel.from_coefficients(coeffs, feats, fit_config)
    return model, pop, featureless


def _fit_config(args):
    return FitConfig(max_iters=args.max_iters, n_starts=args.starts)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, out: Outputs):
    if args.clients < 1:
        raise UsageError("--clients must be at least 1")
    seed = args.seed
    pop = generate_synthetic_population(args.clients, substream(seed, "population"))
    _, meta = standardize_features(pop)
    names = feature_names(meta)
    if args.coeffs:
        coeffs = RegressionCoefficients.load(args.coeffs)
        if coeffs.m != len(names):
            raise UsageError(f"--coeffs has {coeffs.m} features, the survey yields {len(names)}")
    else:
        coeffs = default_coefficients(names)
    gen: GeneratedData = generate_synthetic_visits(
        pop, coeffs, NegBinomParams(args.r, args.p), _window(args), substream(seed, "visits"),
        warmup_days=args.warmup)
    out.text("surveys.csv", gen.surveys_csv)
    out.text("transactions.csv", gen.transactions_csv)
    out.json("ground_truth.json", gen.ground_truth)
    print(f"{gen.ground_truth['n_clients']} clients, {gen.ground_truth['n_transactions']} transactions")
    return []


def cmd_fit(args, out: Outputs):
    window = _window(args)
    config = _fit_config(args)
    if args.stage == "contextual" and not args.featureless:
        raise UsageError("--stage contextual requires --featureless FILE from a featureless fit")
    feats, obs, rep = load_and_merge(args.transactions, args.surveys, window, return_report=True)
    print(f"{obs.n_clients} clients, {len(obs.uncensored_t)} gaps, "
          f"{len(obs.censored_t)} censored; dropped {dict(rep.dropped)}")
    if args.stage == "featureless":
        res = fit_featureless(obs, config, seed=args.seed)
        p = res.params_or_coeffs
        out.json("fit_featureless.json", res.to_json())
        lines = ["parameter  value", f"beta       {np.array2string(p.beta, precision=4)}",
                 f"gamma      {np.array2string(p.gamma, precision=5)}", f"exit_p     {p.exit_p:.4f}",
                 f"loglik     {res.objective:.4f}", f"converged  {res.converged}"]
    else:
        featureless, _, _ = _load_fit(args.featureless)
        names = feature_names(rep.metadata)
        res = fit_contextual(obs, feats, featureless, config, seed=args.seed, feature_names=names)
        doc = res.to_json()
        doc["featureless"] = featureless.to_json()
        doc["scaling"] = rep.metadata
        out.json("fit_contextual.json", doc)
        from .fit import coefficient_signs
        cols, vals = coefficient_signs(res.params_or_coeffs, config)
        width = max(len(n) for n in names)
        lines = [f"{'Factor':<{width}} " + " ".join(f"{c:>10}" for c in cols)]
        for n, row in zip(names, vals):
            lines.append(f"{n:<{width}} " + " ".join(f"{v:>10.4f}" for v in row))
    if not res.converged:
        raise NonConvergenceError(f"optimizer stopped: {res.message}", trace=res.objective_trace)
    report = "\n".join(lines) + "\n"
    out.text("report.txt", report)
    print(report, end="")
    return [args.transactions, args.surveys, args.featureless]


def cmd_bootstrap(args, out: Outputs):
    window = _window(args)
    config = _fit_config(args)
    feats, obs, rep = load_and_merge(args.transactions, args.surveys, window, return_report=True)
    featureless, _, _ = _load_fit(args.featureless)
    table = bootstrap_significance(obs, feats, featureless, config, B=args.B,
                                   seed=substream(args.seed, "bootstrap"), n_jobs=args.jobs,
                                   feature_names=feature_names(rep.metadata))
    out.json("bootstrap.json", table.to_json())
    text = table.format() + "\n"
    out.text("bootstrap_table.txt", text)
    print(text, end="")
    if table.n_failed:
        print(f"{table.n_failed} of {table.B} replicates failed and were skipped")
    return [args.transactions, args.surveys, args.featureless]


def cmd_simulate(args, out: Outputs):
    model, pop, _ = _client_model(args, args.seed, _fit_config(args))
    nb = NegBinomParams(args.r, args.p)
    cfg = SimConfig(args.warmup, args.horizon, substream(args.seed, "simulate"), args.reps,
                    "empirical" if args.surveys else "synthetic")
    labels = np.array([_ethnicity(r) for r in pop])
    per_rep, shares = [], None
    gaps = []
    for r in range(cfg.replications):
        o = run_lifecycle_sim(model, nb, cfg, r)
        per_rep.append(o.avg_daily_arrivals)
        gaps.append(o.gaps)
        if r == 0:
            o.write_csvs(out.dir, bin_width=args.bin_width)
            for name in ("arrivals.csv", "gaps.csv", "sojourns.csv", "loglog.csv"):
                out.files.append(out.dir / name)
            shares = group_share_table(o, labels)
    write_shares(out.path("shares.csv"), shares)
    m, h = mean_ci(per_rep)
    out.json("summary.json", {"avg_daily_arrivals": m, "ci_halfwidth": h,
                              "replicate_arrivals": per_rep,
                              "mean_gap_days": float(np.concatenate(gaps).mean())})
    print(f"average daily arrivals {m:.3f} +- {h:.3f} over {cfg.replications} replications")
    return [args.fit, args.surveys]


def _ethnicity(rec):
    for lev in ("eth_white", "eth_african_american", "eth_puerto_rican", "eth_mexican",
                "eth_other_latino", "eth_other"):
        if rec.values[lev] == 1:
            return lev[4:]
    return "unknown"


def cmd_intervene(args, out: Outputs):
    model, pop, featureless = _client_model(args, args.seed, _fit_config(args))
    nb = NegBinomParams(args.r, args.p)
    cfg = SimConfig(args.warmup, args.horizon, substream(args.seed, "simulate"), args.reps)
    codes = sorted({r.zip for r in pop})
    geo = Geography(codes, np.random.default_rng(substream(args.seed, "geography"))
                    .uniform(0, args.extent, (len(codes), 2)))
    index = {c: i for i, c in enumerate(codes)}
    area = np.array([index[r.zip] for r in pop])
    risk = np.array([r.at_risk for r in pop])
    ps = [float(x) for x in args.p_s.split(",")]
    icfg = InterventionConfig(p_s=ps[0], p_r=args.p_r, max_ignored=args.max_ignored,
                              k_sites=args.sites, coverage_radius=args.radius,
                              van_sites=tuple(args.van_sites.split(",")) if args.van_sites else ())
    rows = intervention_sweep(model, nb, area, risk, geo, icfg, cfg, ps)
    write_sweep_csv(out.path("sweep.csv"), rows)
    geo.to_csv(out.path("geography.csv"))
    hist = threshold_histogram(model.gamma[:, 0], icfg.notify_quantile)
    with open(out.path("thresholds.csv"), "w") as fh:
        fh.write("bin_low,bin_high,count\n")
        for a, b, c in hist:
            fh.write(f"{a},{b},{c}\n")
    out.json("sites.json", {"sites": rows[0][1].sites,
                            "featureless_threshold_days": notification_threshold(featureless)})
    print(Path(out.dir / "sweep.csv").read_text(), end="")
    return [args.fit, args.surveys]


def cmd_validate(args, out: Outputs):
    window = _window(args)
    tx = read_transactions(args.transactions)
    # daily initiation counts: first in-window visit of each client
    first = {}
    for r in tx:
        d = window.day(r.date)
        if 0 <= d < window.open_days and (r.client_id not in first or d < first[r.client_id]):
            first[r.client_id] = d
    # clients already enrolled before the window show up early; skip that stretch
    counts = np.bincount(list(first.values()), minlength=window.open_days)[args.initiation_burnin:]
    report = {}
    try:
        nb = fit_negbinom(counts)
        report["initiation"] = {"fit": nb.to_json(), "gof": chi2_gof(counts, nb).to_json()}
    except (NotOverdispersedError, InsufficientDataError) as exc:
        report["initiation"] = {"error": str(exc)}
        nb = NegBinomParams(args.r, args.p)
    model, pop, _ = _client_model(args, args.seed, _fit_config(args))
    cfg = SimConfig(args.warmup, window.open_days, substream(args.seed, "simulate"), args.reps)
    sim_soj = np.concatenate([run_lifecycle_sim(model, nb, cfg, r).sojourns
                              for r in range(cfg.replications)])
    report["sojourn"] = chi2_compare(sim_soj, _observed_sojourns(tx, window)).to_json()
    report["clients"] = len(first)
    out.json("gof.json", report)
    print(json.dumps({k: (v.get("gof", v).get("p_value") if isinstance(v, dict) else v)
                      for k, v in report.items()}, indent=2))
    return [args.transactions, args.surveys, args.fit]


def _observed_sojourns(tx, window):
    span = {}
    for r in tx:
        d = window.day(r.date)
        if 0 <= d < window.open_days:
            lo, hi = span.get(r.client_id, (d, d))
            span[r.client_id] = (min(lo, d), max(hi, d))
    return np.array([hi - lo for lo, hi in span.values()], dtype=float)


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="sepmodel", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--seed", type=int, default=0)
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    def fitopts(sp):
        sp.add_argument("--max-iters", type=int, default=500)
        sp.add_argument("--starts", type=int, default=8)

    def nbopts(sp):
        sp.add_argument("--r", type=int, default=INITIATION.r, help="initiation successes")
        sp.add_argument("--p", type=float, default=INITIATION.p, help="initiation probability")

    def simopts(sp):
        sp.add_argument("--fit", required=True, help="fit JSON from the fit command")
        sp.add_argument("--surveys", help="resample clients from this survey file")
        sp.add_argument("--population-size", type=int, default=5903)
        sp.add_argument("--warmup", type=int, default=5000)
        sp.add_argument("--horizon", type=int, default=2310)
        sp.add_argument("--reps", type=int, default=20)
        nbopts(sp)
        fitopts(sp)

    g = sub.add_parser("gen-data", help="synthetic surveys and transactions")
    common(g)
    g.add_argument("--clients", type=int, required=True, help="synthetic population size")
    g.add_argument("--coeffs", help="ground-truth coefficients JSON")
    g.add_argument("--window", help="START:END ISO dates")
    g.add_argument("--warmup", type=int, default=5000)
    nbopts(g)
    g.set_defaults(func=cmd_gen_data)

    f = sub.add_parser("fit", help="fit the featureless or contextual model")
    common(f)
    f.add_argument("--transactions", required=True)
    f.add_argument("--surveys", required=True)
    f.add_argument("--window", help="START:END ISO dates")
    f.add_argument("--stage", choices=["featureless", "contextual"], default="featureless")
    f.add_argument("--featureless", help="featureless fit JSON (contextual stage)")
    fitopts(f)
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("bootstrap", help="sign counts over bootstrap refits")
    common(b)
    b.add_argument("--transactions", required=True)
    b.add_argument("--surveys", required=True)
    b.add_argument("--window")
    b.add_argument("--featureless", required=True)
    b.add_argument("--B", type=int, default=100)
    b.add_argument("--jobs", type=int, default=1)
    fitopts(b)
    b.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("simulate", help="lifecycle simulation")
    common(s)
    simopts(s)
    s.add_argument("--bin-width", type=float, default=1.0)
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("intervene", help="van outreach sweep over p_s")
    common(i)
    simopts(i)
    i.add_argument("--p-s", default="0,0.01,0.03,0.05,0.07,0.09")
    i.add_argument("--p-r", type=float, default=0.24)
    i.add_argument("--max-ignored", type=int, default=3)
    i.add_argument("--sites", type=int, default=5)
    i.add_argument("--van-sites", help="comma-separated area codes (default: greedy)")
    i.add_argument("--radius", type=float, default=5.0)
    i.add_argument("--extent", type=float, default=30.0, help="side of the synthetic map")
    i.set_defaults(func=cmd_intervene)

    v = sub.add_parser("validate", help="goodness-of-fit checks")
    common(v)
    simopts(v)
    v.add_argument("--transactions", required=True)
    v.add_argument("--window")
    v.add_argument("--initiation-burnin", type=int, default=1000,
                   help="days skipped before counting first visits as initiations")
    v.set_defaults(func=cmd_validate, reps=5)
    return p


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config: {exc}")
        if args.command in cfg and isinstance(cfg[args.command], dict):
            cfg = cfg[args.command]
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(k.replace("-", "_") for k in cfg if k.replace("-", "_") not in known)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    out = Outputs(args.out)
    try:
        inputs = args.func(args, out)
        out.manifest(args.command, args, inputs or [], started)
        return 0
    except UsageError as exc:
        out.cleanup()
        print(f"sepmodel {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (NonConvergenceError, LogDomainError, InsufficientDataError, NotOverdispersedError) as exc:
        out.cleanup()
        print(f"sepmodel {args.command}: numerical failure: {exc}", file=sys.stderr)
        trace = getattr(exc, "trace", None)
        if trace:
            print(f"objective trace: {trace[-5:]}", file=sys.stderr)
        return 3
    except (OSError, DataFormatError) as exc:
        out.cleanup()
        print(f"sepmodel {args.command}: i/o error: {exc}", file=sys.stderr)
        return 4
    except (DomainError, ParameterDomainError, ValueError, SepModelError) as exc:
        out.cleanup()
        print(f"sepmodel {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
