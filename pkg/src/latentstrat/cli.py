"""Command-line interface.

Subcommands: simulate, fit, study, oracle-check, summarize. Exit codes:
0 success, 1 validation error (bad flags, malformed files, infeasible
request), 2 runtime failure. LATENTSTRAT_SEED and LATENTSTRAT_WORKERS
override defaults when the corresponding flag is absent.
"""
from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
import traceback

import numpy as np

from . import __version__
from .dataio import (
    RunManifest,
    atomic_write_text,
    file_digest,
    load_model_config,
    load_study_design,
    read_dataset,
    read_draws_csv,
    read_truth,
    replications_csv_text,
    summary_csv_text,
    write_dataset,
    write_draws_csv,
    write_manifest,
    write_truth,
)
from .dataset import MeasurementSpec
from .diagnostics import summarize
from .errors import ValidationError
from .measurement import ItemKind
from .oracle import QuadratureGrid, oracle_posterior_summary
from .posterior import NormalPrior, Posterior, PriorConfig
from .sampler import SamplerConfig, fit
from .simgen import ScenarioConfig, generate_dataset
from .study import run_study

_KIND_CHOICES = [k.value for k in ItemKind]


def _env_int(name: str) -> int | None:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"environment variable {name} must be an integer, got {raw!r}")


def _resolve_seed(flag_value: int | None, default: int = 0) -> int:
    if flag_value is not None:
        return flag_value
    env = _env_int("LATENTSTRAT_SEED")
    return env if env is not None else default


def _resolve_workers(flag_value: int | None) -> int:
    if flag_value is not None:
        return flag_value
    env = _env_int("LATENTSTRAT_WORKERS")
    return env if env is not None else 1


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _finish_manifest(out_dir: str, command: list[str], config: dict,
                     seed: int | None, started: str, inputs: dict[str, str]):
    manifest = RunManifest(
        tool_version=__version__,
        command=command,
        config=config,
        seed=seed,
        started_at=started,
        finished_at=_now(),
        input_digests=inputs,
    )
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))


def _cmd_simulate(args, argv) -> int:
    started = _now()
    seed = _resolve_seed(args.seed)
    cfg = ScenarioConfig(
        kind=ItemKind(args.model),
        n_subjects=args.n,
        n_items=args.j,
        seed=seed,
        n_categories=args.categories,
        missing_fraction=args.missing,
        r2_eta=args.r2_eta,
        r2_y=args.r2_y,
        bernoulli_missing=args.bernoulli_missing,
    )
    data, truth = generate_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    dataset_path = os.path.join(args.out, "dataset.csv")
    truth_path = os.path.join(args.out, "truth.json")
    write_dataset(data, dataset_path)
    write_truth(truth, truth_path)
    config = {k: (v.value if isinstance(v, ItemKind) else v)
              for k, v in vars(cfg).items()}
    _finish_manifest(args.out, argv, config, seed, started, {})
    print(f"wrote {dataset_path} ({data.n_subjects} subjects, "
          f"{data.spec.n_items} items) and {truth_path}")
    return 0


def _cmd_fit(args, argv) -> int:
    started = _now()
    if (args.model is None) == (args.model_config is None):
        raise ValidationError("pass exactly one of --model or --model-config")
    if args.model_config is not None:
        kind, cats, constraint, fix_rasch, prior = load_model_config(args.model_config)
        spec = None
        if cats is not None:
            spec = MeasurementSpec(kind=kind, cats=cats, constraint=constraint,
                                   fix_rasch_first_intercept=fix_rasch)
        data = read_dataset(args.data, spec=spec, kind=kind, constraint=constraint,
                            fix_rasch_first_intercept=fix_rasch)
    else:
        prior = PriorConfig()
        data = read_dataset(args.data, kind=ItemKind(args.model))
    seed = _resolve_seed(args.seed)
    cfg = SamplerConfig(
        chains=args.chains, iterations=args.iter, warmup=args.warmup,
        target_accept=args.target_accept, max_leapfrog=args.max_leapfrog, seed=seed,
    )
    workers = _resolve_workers(args.workers)
    post = Posterior(data, prior)
    draws = fit(post, cfg, workers=workers)
    summaries = summarize(draws)
    os.makedirs(args.out, exist_ok=True)
    draws_path = os.path.join(args.out, "draws.csv")
    summary_path = os.path.join(args.out, "summary.csv")
    write_draws_csv(draws, draws_path)
    atomic_write_text(summary_path, summary_csv_text(summaries))
    config = {
        "data": args.data, "kind": data.spec.kind.value, "cats": list(data.spec.cats),
        "constraint": data.spec.constraint.value, "sampler": vars(cfg) | {},
        "workers": workers,
    }
    inputs = {args.data: file_digest(args.data)}
    if args.model_config:
        inputs[args.model_config] = file_digest(args.model_config)
    _finish_manifest(args.out, argv, config, seed, started, inputs)
    if draws.divergence_flagged:
        print("warning: divergence rate above 20% in at least one chain", file=sys.stderr)
    structural = [n for n in post.names if not n.startswith(("eta[", "a[", "d["))]
    width = max(len(n) for n in structural)
    print(f"{'param'.ljust(width)}  {'mean':>9}  {'sd':>9}  {'q2.5':>9}  "
          f"{'q97.5':>9}  {'rhat':>6}")
    for name in structural:
        s = summaries[name]
        print(f"{name.ljust(width)}  {s.mean:9.4f}  {s.sd:9.4f}  {s.q2_5:9.4f}  "
              f"{s.q97_5:9.4f}  {s.rhat:6.3f}")
    print(f"wrote {draws_path} and {summary_path}")
    return 0


def _cmd_study(args, argv) -> int:
    started = _now()
    design = load_study_design(args.design)
    if args.seed is not None or _env_int("LATENTSTRAT_SEED") is not None:
        import dataclasses

        design = dataclasses.replace(design, seed=_resolve_seed(args.seed, design.seed))
    workers = _resolve_workers(args.workers)
    report = run_study(design, workers=workers)
    os.makedirs(args.out, exist_ok=True)
    report_csv = os.path.join(args.out, "report.csv")
    report_txt = os.path.join(args.out, "report.txt")
    reps_csv = os.path.join(args.out, "replications.csv")
    atomic_write_text(report_csv, report.to_csv())
    atomic_write_text(report_txt, report.to_text())
    atomic_write_text(reps_csv, replications_csv_text(report))
    _finish_manifest(
        args.out, argv,
        {"design": args.design, "seed": design.seed, "workers": workers},
        design.seed, started, {args.design: file_digest(args.design)},
    )
    sys.stdout.write(report.to_text())
    print(f"wrote {report_csv}, {report_txt}, {reps_csv}")
    return 0


def _cmd_oracle_check(args, argv) -> int:
    started = _now()
    truth = read_truth(args.truth)
    items = truth.params.items
    if not items:
        raise ValidationError(f"{args.truth}: no items in truth file")
    spec = MeasurementSpec(kind=items[0].kind,
                           cats=tuple(item.n_categories for item in items))
    data = read_dataset(args.data, spec=spec)
    seed = _resolve_seed(args.seed)
    prior = PriorConfig(structural=NormalPrior(0.0, args.structural_sd))
    grid = QuadratureGrid(n_nodes=args.nodes, rule=args.rule,
                          n_draws=args.draws, seed=seed)
    oracle = oracle_posterior_summary(data, prior, grid, items=items)
    post = Posterior(data, prior, fixed_items=items)
    hmc_cfg = SamplerConfig(chains=args.chains, iterations=args.iter,
                            warmup=args.warmup, seed=seed)
    draws = fit(post, hmc_cfg)
    summaries = summarize(draws)
    rows = []
    worst = 0.0
    for name in oracle.names:
        s = summaries[name]
        mcse = float(np.sqrt(s.mcse ** 2 + oracle.mcse_of(name) ** 2))
        diff = abs(s.mean - oracle.mean_of(name))
        units = diff / mcse if mcse > 0 else float("inf")
        worst = max(worst, units)
        rows.append((name, s.mean, oracle.mean_of(name), diff, mcse, units))
    os.makedirs(args.out, exist_ok=True)
    lines = ["param,hmc_mean,oracle_mean,abs_diff,combined_mcse,mcse_units\r\n"]
    lines += [f"{n},{h!r},{o!r},{d!r},{m!r},{u!r}\r\n" for n, h, o, d, m, u in rows]
    cmp_path = os.path.join(args.out, "comparison.csv")
    atomic_write_text(cmp_path, "".join(lines))
    _finish_manifest(
        args.out, argv,
        {"data": args.data, "truth": args.truth, "nodes": args.nodes,
         "rule": args.rule, "draws": args.draws, "structural_sd": args.structural_sd},
        seed, started,
        {args.data: file_digest(args.data), args.truth: file_digest(args.truth)},
    )
    print(f"{'param':10s} {'hmc':>9} {'oracle':>9} {'|diff|':>8} {'mcse':>8} {'units':>6}")
    for n, h, o, d, m, u in rows:
        print(f"{n:10s} {h:9.4f} {o:9.4f} {d:8.4f} {m:8.4f} {u:6.2f}")
    print(f"oracle integration error: {oracle.integration_error:.2e}")
    print(f"wrote {cmp_path}")
    if worst > 3.0:
        print("oracle check FAILED: a posterior mean is more than 3 combined "
              "MCSE from the reference", file=sys.stderr)
        return 1
    return 0


def _cmd_summarize(args, argv) -> int:
    draws = read_draws_csv(args.draws)
    summaries = summarize(draws)
    text = summary_csv_text(summaries)
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "summary.csv")
        atomic_write_text(out_path, text)
        print(f"wrote {out_path}")
    else:
        sys.stdout.write(text)
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract wants 1 for bad input."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentstrat",
                description="Latent-trait principal stratification toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="generate a synthetic trial")
    sim.add_argument("--model", required=True, choices=_KIND_CHOICES)
    sim.add_argument("--n", required=True, type=int, help="subjects (even)")
    sim.add_argument("--j", required=True, type=int, help="items")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--categories", type=int, default=4,
                     help="categories for polytomous kinds (default 4)")
    sim.add_argument("--missing", type=float, default=0.4)
    sim.add_argument("--r2-eta", type=float, default=0.5, dest="r2_eta")
    sim.add_argument("--r2-y", type=float, default=0.2, dest="r2_y")
    sim.add_argument("--bernoulli-missing", action="store_true")
    sim.add_argument("--out", default=".")
    sim.set_defaults(func=_cmd_simulate)

    fit_p = sub.add_parser("fit", help="fit the joint model to a dataset CSV")
    fit_p.add_argument("--data", required=True)
    fit_p.add_argument("--model", choices=_KIND_CHOICES)
    fit_p.add_argument("--model-config", dest="model_config",
                       help="model JSON (kind, cats, constraint, prior)")
    fit_p.add_argument("--chains", type=int, default=2)
    fit_p.add_argument("--iter", type=int, default=5000)
    fit_p.add_argument("--warmup", type=int, default=2000)
    fit_p.add_argument("--target-accept", type=float, default=0.8, dest="target_accept")
    fit_p.add_argument("--max-leapfrog", type=int, default=16, dest="max_leapfrog")
    fit_p.add_argument("--seed", type=int, default=None)
    fit_p.add_argument("--workers", type=int, default=None)
    fit_p.add_argument("--out", default=".")
    fit_p.set_defaults(func=_cmd_fit)

    st = sub.add_parser("study", help="run a replication study from a design JSON")
    st.add_argument("--design", required=True)
    st.add_argument("--seed", type=int, default=None, help="override the design seed")
    st.add_argument("--workers", type=int, default=None)
    st.add_argument("--out", default=".")
    st.set_defaults(func=_cmd_study)

    oc = sub.add_parser("oracle-check",
                        help="compare HMC against the quadrature reference")
    oc.add_argument("--data", required=True)
    oc.add_argument("--truth", required=True, help="truth JSON with the fixed items")
    oc.add_argument("--nodes", type=int, default=61)
    oc.add_argument("--rule", choices=["gauss_hermite", "trapezoid"],
                    default="gauss_hermite")
    oc.add_argument("--draws", type=int, default=100_000)
    oc.add_argument("--chains", type=int, default=2)
    oc.add_argument("--iter", type=int, default=20_000)
    oc.add_argument("--warmup", type=int, default=5_000)
    oc.add_argument("--structural-sd", type=float, default=5.0, dest="structural_sd")
    oc.add_argument("--seed", type=int, default=None)
    oc.add_argument("--out", default=".")
    oc.set_defaults(func=_cmd_oracle_check)

    sm = sub.add_parser("summarize", help="summarize a draws CSV")
    sm.add_argument("--draws", required=True)
    sm.add_argument("--out", default=None)
    sm.set_defaults(func=_cmd_summarize)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, ["latentstrat"] + argv)
    except (ValidationError, FileNotFoundError, IsADirectoryError,
            PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
