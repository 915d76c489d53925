"""Command-line pipeline: generate, sample, estimate, diagnose, simulate.

Exit codes: 0 success, 1 usage error, 2 data or convergence error.
Outputs are written to a temporary file and renamed, so an existing
file is never left partially overwritten.  A plain ``key = value``
configuration file can supply defaults for any flag of the chosen
subcommand; explicit flags win.
"""

from __future__ import annotations

import argparse
import io
import csv
import os
import sys

import numpy as np

from . import design as design_mod
from . import frame as frame_mod
from ._util import atomic_write_text, fmt
from .diagnostics import ReductionRule, cooks_distance, ols_fit, qq_data, reduce_population
from .direct import AuxSpec, cell_map, greg_total, ht_total
from .errors import SmallDomError, UsageError
from .harness import (DEFAULT_ESTIMATORS, DEFAULT_SWEEP_GRID, BootstrapConfig,
                      PopGenConfig, bootstrap_mse, generate_population,
                      run_simulation, sweep_bphi)
from .mixed import (ModelSpec, eblup_total, fit_lmm, pseudo_eblup_total)
from .mquantile import (BiasAdjustConfig, fit_mq_grid, mq_cd_total,
                        mq_naive_total, mq_wr_total, unit_q_coefficients)
from .robust import (DEFAULT_B_PSI, HuberConfig, fit_mreg, fit_reblup,
                     reblup_total, robust_synthetic_total)

_GEN_DEFAULTS = PopGenConfig()


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through UsageError."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated reals, got {text!r}")


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _grid_spec(text: str) -> tuple:
    """A grid given as comma values or start:stop:step (inclusive)."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"grid range must be start:stop:step, got {text!r}")
        try:
            start, stop, step = (float(v) for v in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"malformed grid range {text!r}")
        if step <= 0 or stop < start:
            raise argparse.ArgumentTypeError(f"empty grid range {text!r}")
        n = int(round((stop - start) / step))
        grid = tuple(start + k * step for k in range(n + 1)
                     if start + k * step <= stop + 1e-9 * max(1.0, abs(stop)))
        return grid
    return _float_list(text)


def _str_list(text: str) -> tuple:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _default_threads() -> int:
    return os.cpu_count() or 1


def _add_common(sub):
    sub.add_argument("--config", help="key = value file supplying flag defaults")


def _build_parser():
    parser = _Parser(prog="smalldom",
                     description="Small-domain estimation for skewed survey data.")
    subs = parser.add_subparsers(dest="command", metavar="subcommand")
    submap = {}

    def sub(name, **kw):
        s = subs.add_parser(name, **kw)
        _add_common(s)
        submap[name] = s
        return s

    g = sub("gen-pop", help="generate a synthetic population CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--n-units", type=int, default=_GEN_DEFAULTS.n_units)
    g.add_argument("--n-domains", type=int, default=_GEN_DEFAULTS.n_domains)
    g.add_argument("--sc-shares", type=_float_list, default=_GEN_DEFAULTS.sc_shares)
    g.add_argument("--domain-size-ratio", type=float,
                   default=_GEN_DEFAULTS.domain_size_ratio)
    g.add_argument("--tax1-log-loc", type=float, default=_GEN_DEFAULTS.tax1_log_loc)
    g.add_argument("--tax1-sc-step", type=float, default=_GEN_DEFAULTS.tax1_sc_step)
    g.add_argument("--tax1-log-sd", type=float, default=_GEN_DEFAULTS.tax1_log_sd)
    g.add_argument("--beta", type=_float_list, default=_GEN_DEFAULTS.beta)
    g.add_argument("--sigma-u", type=float, default=_GEN_DEFAULTS.sigma_u)
    g.add_argument("--sigma-eps", type=float, default=_GEN_DEFAULTS.sigma_eps)
    g.add_argument("--noise-wp-power", type=float, default=_GEN_DEFAULTS.noise_wp_power)
    g.add_argument("--noise-log-sd", type=float, default=_GEN_DEFAULTS.noise_log_sd)
    g.add_argument("--contamination", type=float, default=_GEN_DEFAULTS.contamination)
    g.add_argument("--contamination-scale", type=float,
                   default=_GEN_DEFAULTS.contamination_scale)
    g.add_argument("--contaminate-sc", type=_int_list, default=None)
    g.add_argument("--seed", type=int, default=_GEN_DEFAULTS.seed)
    g.set_defaults(func=_cmd_gen_pop)

    s = sub("sample", help="draw one stratified sample")
    s.add_argument("--pop", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--allocation", help="CSV ind,sc,n_h; default size-class fractions")
    s.add_argument("--save-allocation", help="also write the allocation used")
    s.add_argument("--seed", type=int, default=1)
    s.set_defaults(func=_cmd_sample)

    e = sub("estimate", help="estimate domain totals from one sample")
    e.add_argument("--pop", required=True)
    e.add_argument("--sample", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--method", required=True,
                   choices=["ht", "greg", "eblup", "peblup", "msyn", "reblup",
                            "mq", "mqw", "mqcd", "mqcdw", "mqwr"])
    e.add_argument("--model", choices=["full", "reduced"], default="full")
    e.add_argument("--variance", choices=["homo", "by_sc", "wp2"], default="homo")
    e.add_argument("--prediction", choices=["observed_plus_predicted", "all_predicted"],
                   default="observed_plus_predicted")
    e.add_argument("--criterion", choices=["ml", "reml"], default="ml")
    e.add_argument("--b-psi", type=float, default=DEFAULT_B_PSI)
    e.add_argument("--b-phi", type=float, default=1.0)
    e.add_argument("--grid", type=_grid_spec, default=None,
                   help="M-quantile grid, comma values or start:stop:step")
    e.add_argument("--domain", action="append", default=None,
                   help="restrict output to this domain (repeatable)")
    e.set_defaults(func=_cmd_estimate)

    d = sub("diagnose", help="working-model residuals, leverage, Cook's distance")
    d.add_argument("--pop", required=True)
    d.add_argument("--sample", help="diagnose the sample instead of the population")
    d.add_argument("--out", required=True)
    d.add_argument("--qq-out", help="also write normal-probability pairs")
    d.add_argument("--model", choices=["full", "reduced"], default="full")
    d.set_defaults(func=_cmd_diagnose)

    r = sub("reduce-pop", help="iteratively remove the most influential units")
    r.add_argument("--pop", required=True)
    r.add_argument("--out", required=True)
    group = r.add_mutually_exclusive_group(required=True)
    group.add_argument("--top-k", type=int)
    group.add_argument("--cooks-threshold", type=float)
    r.add_argument("--model", choices=["full", "reduced"], default="full")
    r.add_argument("--removed-out", help="write removed unit ids to this CSV")
    r.set_defaults(func=_cmd_reduce_pop)

    m = sub("simulate", help="design-based Monte Carlo over replicate samples")
    m.add_argument("--pop", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("-K", "--replicates", type=int, default=500, dest="K")
    m.add_argument("--seed", type=int, default=1)
    m.add_argument("--estimators", type=_str_list, default=DEFAULT_ESTIMATORS)
    m.add_argument("--allocation")
    m.add_argument("--b-psi", type=float, default=DEFAULT_B_PSI)
    m.add_argument("--interpolate", action="store_true",
                   help="interpolate grid coefficients instead of refitting")
    m.add_argument("--threads", type=int, default=_default_threads())
    m.set_defaults(func=_cmd_simulate)

    w = sub("sweep", help="rrmse sensitivity over the bias-adjustment constant")
    w.add_argument("--pop", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--grid", type=_grid_spec, default=DEFAULT_SWEEP_GRID)
    w.add_argument("-K", "--replicates", type=int, default=500, dest="K")
    w.add_argument("--seed", type=int, default=1)
    w.add_argument("--allocation")
    w.add_argument("--b-psi", type=float, default=DEFAULT_B_PSI)
    w.add_argument("--threads", type=int, default=_default_threads())
    w.set_defaults(func=_cmd_sweep)

    b = sub("bootstrap-mse", help="bootstrap MSE of one estimator")
    b.add_argument("--pop", required=True)
    b.add_argument("--sample", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("-B", "--populations", type=int, default=50, dest="B")
    b.add_argument("-L", "--samples", type=int, default=10, dest="L")
    b.add_argument("--estimator", default="mqwr:1")
    b.add_argument("--pool", choices=["unconditional", "domain"], default="unconditional")
    b.add_argument("--b-psi", type=float, default=DEFAULT_B_PSI)
    b.add_argument("--seed", type=int, default=1)
    b.add_argument("--threads", type=int, default=_default_threads())
    b.set_defaults(func=_cmd_bootstrap)

    return parser, submap


# ---------------------------------------------------------------------------
# configuration file
# ---------------------------------------------------------------------------


def _load_config(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise UsageError(f"{path}:{lineno}: expected key = value, got {text!r}")
            key, _, val = text.partition("=")
            values[key.strip()] = val.strip()
    return values


def _apply_config(subparser, path) -> None:
    values = _load_config(path)
    actions = {}
    for a in subparser._actions:
        actions[a.dest] = a
        for opt in a.option_strings:
            actions[opt.lstrip("-").replace("-", "_")] = a
    mapped = {}
    for key, raw in values.items():
        name = key.replace("-", "_")
        action = actions.get(name)
        if action is None or action.dest in ("help", "config"):
            raise UsageError(f"unknown configuration key {key!r}")
        dest = action.dest
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"configuration key {key!r} expects a boolean, got {raw!r}")
            mapped[dest] = low in ("true", "1", "yes")
            continue
        try:
            mapped[dest] = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"configuration key {key!r}: {exc}") from None
        if action.choices is not None and mapped[dest] not in action.choices:
            raise UsageError(
                f"configuration key {key!r}: {mapped[dest]!r} not in {sorted(action.choices)}")
    subparser.set_defaults(**mapped)


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def _build_cfg(ctor, **kw):
    try:
        return ctor(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _cmd_gen_pop(args) -> None:
    cfg = _build_cfg(
        PopGenConfig,
        n_units=args.n_units, n_domains=args.n_domains, sc_shares=args.sc_shares,
        domain_size_ratio=args.domain_size_ratio, tax1_log_loc=args.tax1_log_loc,
        tax1_sc_step=args.tax1_sc_step, tax1_log_sd=args.tax1_log_sd,
        beta=args.beta, sigma_u=args.sigma_u, sigma_eps=args.sigma_eps,
        noise_wp_power=args.noise_wp_power, noise_log_sd=args.noise_log_sd,
        contamination=args.contamination,
        contamination_scale=args.contamination_scale,
        contaminate_sc=args.contaminate_sc, seed=args.seed,
    )
    pop = generate_population(cfg)
    frame_mod.save_population(pop, args.out)
    print(f"wrote {args.out}: {len(pop)} units, {len(pop.domains)} domains")


def _load_design(pop, allocation_path):
    if allocation_path:
        alloc = design_mod.load_allocation(allocation_path)
    else:
        alloc = design_mod.default_allocation(pop)
    return design_mod.build_design(pop, alloc), alloc


def _cmd_sample(args) -> None:
    pop = frame_mod.load_population(args.pop)
    design, alloc = _load_design(pop, args.allocation)
    sample = design_mod.draw_sample(design, pop, args.seed)
    frame_mod.save_sample(sample, args.out)
    if args.save_allocation:
        design_mod.save_allocation(alloc, args.save_allocation)
    print(f"wrote {args.out}: {len(sample)} units from {len(pop)}")


def _estimate_rows(args, pop, sample, domains):
    spec = ModelSpec(formula=args.model, variance=args.variance,
                     prediction=args.prediction)
    method = args.method
    psi = HuberConfig(args.b_psi)
    if method == "ht":
        return [(d, ht_total(sample, d)) for d in domains], None
    if method == "greg":
        aux = AuxSpec()
        rows = [(d, greg_total(sample, pop, aux, d)) for d in domains]
        return rows, cell_map(sample, pop, aux)
    if method == "eblup":
        fit = fit_lmm(sample, spec, criterion=args.criterion)
        return [(d, eblup_total(fit, pop, spec, d)) for d in domains], None
    if method == "peblup":
        source = fit_lmm(sample, ModelSpec(formula=args.model), criterion="ml")
        return [(d, pseudo_eblup_total(sample, pop, spec, source, d))
                for d in domains], None
    if method == "msyn":
        fit = fit_mreg(sample, spec, psi)
        return [(d, robust_synthetic_total(fit, sample, pop, spec, d))
                for d in domains], None
    if method == "reblup":
        fit = fit_reblup(sample, spec, psi)
        return [(d, reblup_total(fit, pop, spec, d)) for d in domains], None
    weighted = method in ("mqw", "mqcdw")
    weights = sample.d if weighted else None
    grid = fit_mq_grid(sample, spec, grid=args.grid, cfg=psi, weights=weights)
    qc = unit_q_coefficients(sample, grid)
    if method in ("mq", "mqw"):
        fn = lambda d: mq_naive_total(sample, pop, grid, qc, d, weighted=weighted)
    elif method in ("mqcd", "mqcdw"):
        fn = lambda d: mq_cd_total(sample, pop, grid, qc, d, weighted=weighted)
    else:
        cfg = _build_cfg(BiasAdjustConfig, b_phi=args.b_phi)
        fn = lambda d: mq_wr_total(sample, pop, grid, qc, d, cfg=cfg)
    return [(d, fn(d)) for d in domains], None


def _cmd_estimate(args) -> None:
    pop = frame_mod.load_population(args.pop)
    sample = frame_mod.load_sample(args.sample, pop)
    domains = tuple(args.domain) if args.domain else pop.domains
    unknown = [d for d in domains if d not in pop.domains]
    if unknown:
        raise UsageError(f"unknown domain(s): {', '.join(unknown)}")
    rows, cells = _estimate_rows(args, pop, sample, domains)
    lines = ["estimator,domain,estimate"]
    for d, val in rows:
        lines.append(f"{args.method},{d},{fmt(val)}")
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    if cells is not None:
        root, ext = os.path.splitext(args.out)
        cells_path = f"{root}.cells{ext or '.csv'}"
        _write_cell_map(cells, cells_path)
        print(f"wrote {args.out} and {cells_path}")
    else:
        print(f"wrote {args.out}")


def _write_cell_map(cells, path) -> None:
    header = ["ind", "group", "n_pop", "n_sam", "tax1_pop", "tax1_ht",
              "beta", "lam", "tax1_calibrated", "error"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in cells:
        writer.writerow([
            row.get("ind"), row.get("group"),
            row.get("n_pop", ""), row.get("n_sam", ""),
            *(fmt(row[k]) if k in row else ""
              for k in ("tax1_pop", "tax1_ht", "beta", "lam", "tax1_calibrated")),
            row.get("error", ""),
        ])
    atomic_write_text(path, buf.getvalue())


def _cmd_diagnose(args) -> None:
    pop = frame_mod.load_population(args.pop)
    data = frame_mod.load_sample(args.sample, pop) if args.sample else pop
    fit = ols_fit(data, ModelSpec(formula=args.model))
    d = cooks_distance(fit)
    lines = ["id,fitted,residual,leverage,cooks_d"]
    for i in range(fit.n):
        lines.append(f"{fit.ids[i]},{fmt(fit.fitted[i])},{fmt(fit.residuals[i])},"
                     f"{fmt(fit.leverage[i])},{fmt(d[i])}")
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    wrote = [str(args.out)]
    if args.qq_out:
        theor, ordered = qq_data(fit.residuals)
        qlines = ["theoretical,residual"]
        qlines += [f"{fmt(t)},{fmt(r)}" for t, r in zip(theor, ordered)]
        atomic_write_text(args.qq_out, "\n".join(qlines) + "\n")
        wrote.append(str(args.qq_out))
    print("wrote " + " and ".join(wrote))


def _cmd_reduce_pop(args) -> None:
    pop = frame_mod.load_population(args.pop)
    rule = _build_cfg(ReductionRule, top_k=args.top_k, threshold=args.cooks_threshold)
    reduced, removed = reduce_population(pop, ModelSpec(formula=args.model), rule)
    frame_mod.save_population(reduced, args.out)
    if args.removed_out:
        atomic_write_text(args.removed_out, "\n".join(["id"] + removed) + "\n")
    print(f"wrote {args.out}: removed {len(removed)} of {len(pop)} units")


def _cmd_simulate(args) -> None:
    pop = frame_mod.load_population(args.pop)
    design, _ = _load_design(pop, args.allocation)
    try:
        report = run_simulation(pop, design, args.estimators, K=args.K,
                                seed=args.seed, threads=args.threads,
                                b_psi=args.b_psi, interpolate=args.interpolate)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report.to_csv(args.out)
    flagged = [f"{est}: {int(n)}" for est, n in
               zip(report.estimators, report.boundary) if n]
    if flagged:
        print("variance-boundary fits: " + ", ".join(flagged))
    print(f"wrote {args.out}: K={report.K}, {len(report.estimators)} estimators, "
          f"{len(report.domains)} domains")


def _cmd_sweep(args) -> None:
    pop = frame_mod.load_population(args.pop)
    design, _ = _load_design(pop, args.allocation)
    try:
        result = sweep_bphi(pop, design, K=args.K, grid=args.grid, seed=args.seed,
                            threads=args.threads, b_psi=args.b_psi)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result.to_csv(args.out)
    print(f"wrote {args.out}: {len(result.b_grid)} grid points, K={result.K}")


def _cmd_bootstrap(args) -> None:
    pop = frame_mod.load_population(args.pop)
    sample = frame_mod.load_sample(args.sample, pop)
    cfg = _build_cfg(BootstrapConfig, B=args.B, L=args.L, seed=args.seed,
                     pool=args.pool, b_psi=args.b_psi)
    try:
        result = bootstrap_mse(sample, pop, estimator=args.estimator, cfg=cfg,
                               threads=args.threads)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result.to_csv(args.out)
    print(f"wrote {args.out}: B={cfg.B}, L={cfg.L}, estimator {result.estimator}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def run(argv=None) -> int:
    parser, submap = _build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        if getattr(args, "config", None):
            _apply_config(submap[args.command], args.config)
            args = parser.parse_args(argv)
        args.func(args)
        return 0
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (None, 0) else 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SmallDomError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
