"""Batch command-line front end.

Subcommands wire ingestion, fitting, selection, clustering, and evaluation
into reproducible pipelines: every run takes a single ``--seed`` (submodule
seeds derive from it by fixed offsets), and every artifact directory gets a
``config.json`` echoing the parsed options so the run can be reproduced
exactly.

Exit codes: 0 on success, 2 on usage errors, 1 on runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data_io import (
    ScenarioSpec,
    generate_scenario,
    load_csv,
    read_labels_csv,
    save_csv,
    write_labels_csv,
)
from .metrics import (
    adjusted_mutual_information,
    adjusted_rand_index,
    misclassification_rate,
)
from .model import arch_to_string, assign_clusters, parse_arch_string
from .optimizer import (
    FitConfig,
    fit,
    load_checkpoint,
    save_checkpoint,
    write_trace_csv,
)
from .selection import (
    default_overfitted_k,
    enumerate_architectures,
    prune_components,
    score_candidates,
    select_model,
    write_selection_csv,
)
from .variational import PriorHyperparams, point_estimates

__all__ = ["main", "run"]


def _outdir(path_str: str) -> Path:
    path = Path(path_str)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(outdir: Path, args: argparse.Namespace) -> None:
    doc = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    with open(outdir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_float_list(text: str, L: int, flag: str) -> np.ndarray:
    vals = [float(v) for v in text.split(",")]
    if len(vals) == 1:
        return np.full(L, vals[0])
    if len(vals) != L:
        raise ValueError(f"{flag} needs 1 or {L} comma-separated values")
    return np.asarray(vals)


def _prior_from_args(args, arch) -> PriorHyperparams:
    overfitted = getattr(args, "overfitted", False)
    prior = PriorHyperparams.defaults(arch, overfitted=overfitted)
    if args.prior_G is not None:
        prior.G = _parse_float_list(args.prior_G, arch.L, "--G")
    if args.prior_nu is not None:
        prior.nu = _parse_float_list(args.prior_nu, arch.L, "--nu")
    if args.prior_A is not None:
        prior.A = _parse_float_list(args.prior_A, arch.L, "--A")
    if args.prior_rho is not None:
        rho = _parse_float_list(args.prior_rho, arch.L, "--rho")
        prior.rho = [np.full(arch.K[l], rho[l]) for l in range(arch.L)]
    prior.validate(arch)
    return prior


def _fit_config_from_args(args) -> FitConfig:
    return FitConfig(
        batch_fraction=args.batch_fraction,
        batch_min=args.batch_min,
        batch_max=args.batch_max,
        max_iterations=args.iters,
        seed=args.seed,
        elbo_record_stride=args.record_stride,
        convergence_window=args.convergence_window,
        convergence_tol=args.convergence_tol,
        step_rule=args.step_rule,
    )


def _add_prior_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--G", dest="prior_G", default=None,
                   help="Cauchy mean-prior scale, scalar or per-layer list")
    p.add_argument("--nu", dest="prior_nu", default=None,
                   help="horseshoe global scale, scalar or per-layer list "
                        "(e.g. '1e5,1,1' relaxes the first layer)")
    p.add_argument("--A", dest="prior_A", default=None,
                   help="half-Cauchy noise scale, scalar or per-layer list")
    p.add_argument("--rho", dest="prior_rho", default=None,
                   help="Dirichlet concentration, scalar or per-layer list")


def _add_fit_flags(p: argparse.ArgumentParser, iters_default: int) -> None:
    p.add_argument("--iters", type=int, default=iters_default)
    p.add_argument("--batch-fraction", type=float, default=0.05)
    p.add_argument("--batch-min", type=int, default=1)
    p.add_argument("--batch-max", type=int, default=1024)
    p.add_argument("--record-stride", type=int, default=1)
    p.add_argument("--convergence-window", type=int, default=0)
    p.add_argument("--convergence-tol", type=float, default=0.0)
    p.add_argument("--step-rule", choices=("adaptive", "decay", "constant"),
                   default="adaptive")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    outdir = _outdir(args.out)
    weights = (None if args.weights is None
               else tuple(float(w) for w in args.weights.split(",")))
    spec = ScenarioSpec(scenario=args.scenario, n=args.n, d=args.d,
                        clusters=args.clusters,
                        noise_features=args.noise_features,
                        weights=weights, seed=args.seed)
    data = generate_scenario(spec)
    save_csv(outdir / "data.csv", data, label_column="label")
    write_labels_csv(outdir / "labels.csv", data.labels)
    _echo_config(outdir, args)
    print(f"wrote {data.n} rows of {args.scenario} data to {outdir}")
    return 0


def _cmd_fit(args) -> int:
    outdir = _outdir(args.out)
    data = load_csv(args.data, label_column=args.label_column)
    arch = parse_arch_string(args.arch, data.d)
    prior = _prior_from_args(args, arch)
    config = _fit_config_from_args(args)
    result = fit(data, arch, prior, config)
    save_checkpoint(outdir / "checkpoint.json", arch, prior, config,
                    result.lam_g,
                    iteration=result.trace.iterations[-1]
                    if result.trace.iterations else 0)
    write_trace_csv(outdir / "trace.csv", result.trace)
    _echo_config(outdir, args)
    print(f"fit {arch_to_string(arch)}: {result.stop_reason}, "
          f"final stochastic ELBO {result.final_elbo:.4f}")
    return 0


def _cmd_select(args) -> int:
    outdir = _outdir(args.out)
    data = load_csv(args.data, label_column=args.label_column)
    layers = tuple(int(v) for v in args.layers.split(","))
    k_deeper = tuple(int(v) for v in args.k_deeper.split(","))
    k_first = args.k_first
    if k_first is None:
        k_first = default_overfitted_k(data.n)
        if args.prior_rho is None:
            args.prior_rho = "0.5"
    candidates = enumerate_architectures(data.d, layers=layers,
                                         k_first=k_first, k_deeper=k_deeper)
    if not candidates:
        print("no architecture satisfies the dimension rule for this data",
              file=sys.stderr)
        return 1
    config = _fit_config_from_args(args)
    scored = score_candidates(data, candidates,
                              lambda arch: _prior_from_args(args, arch),
                              config, jobs=args.jobs)
    write_selection_csv(outdir / "selection.csv", scored)
    best = select_model(scored)
    with open(outdir / "chosen.json", "w", encoding="utf-8") as fh:
        json.dump({"architecture": arch_to_string(best),
                   "L": best.L, "D": list(best.D), "K": list(best.K)},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    _echo_config(outdir, args)
    print(f"scored {len(scored)} candidates; chose {arch_to_string(best)}")
    return 0


def _cmd_cluster(args) -> int:
    outdir = _outdir(args.out)
    arch, prior, _, lam_g, _, _ = load_checkpoint(args.checkpoint)
    data = load_csv(args.data, label_column=args.label_column)
    if data.d != arch.D[0]:
        raise ValueError(f"checkpoint expects {arch.D[0]} columns, "
                         f"data has {data.d}")
    params = point_estimates(lam_g, arch)
    labels = assign_clusters(data, arch, params)
    write_labels_csv(outdir / "labels.csv", labels)
    _echo_config(outdir, args)
    print(f"assigned {data.n} rows to {len(np.unique(labels))} clusters")
    return 0


def _cmd_evaluate(args) -> int:
    outdir = _outdir(args.out)
    pred = read_labels_csv(args.pred)
    truth = read_labels_csv(args.truth)
    rows = [
        ("MR", misclassification_rate(pred, truth)),
        ("ARI", adjusted_rand_index(pred, truth)),
        ("AMI", adjusted_mutual_information(pred, truth)),
    ]
    with open(outdir / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("metric,value\n")
        for name, value in rows:
            fh.write(f"{name},{value!r}\n")
    _echo_config(outdir, args)
    for name, value in rows:
        print(f"{name} = {value:.6f}")
    return 0


def _cmd_prune_refit(args) -> int:
    outdir = _outdir(args.out)
    arch, prior, old_config, lam_g, _, _ = load_checkpoint(args.checkpoint)
    data = load_csv(args.data, label_column=args.label_column)
    reports, reduced = prune_components(lam_g, arch, threshold=args.threshold)
    with open(outdir / "prune_report.json", "w", encoding="utf-8") as fh:
        json.dump([{
            "layer": r.layer,
            "surviving": r.surviving,
            "removed": r.removed,
            "weights": r.weights.tolist(),
        } for r in reports], fh, indent=1, sort_keys=True)
        fh.write("\n")
    prior2 = PriorHyperparams(
        G=prior.G, nu=prior.nu, A=prior.A,
        rho=[prior.rho[l][reports[l].surviving] for l in range(arch.L)])
    config = _fit_config_from_args(args)
    result = fit(data, reduced, prior2, config)
    save_checkpoint(outdir / "checkpoint.json", reduced, prior2, config,
                    result.lam_g,
                    iteration=result.trace.iterations[-1]
                    if result.trace.iterations else 0)
    write_trace_csv(outdir / "trace.csv", result.trace)
    _echo_config(outdir, args)
    kept = ",".join(str(len(r.surviving)) for r in reports)
    print(f"pruned to K=({kept}); refit: {result.stop_reason}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmfa",
        description="Deep mixture-of-factor-analyzers clustering "
                    "(variational fit, architecture selection, evaluation)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic benchmark dataset")
    p.add_argument("--scenario", choices=("s1", "s2"), required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--d", type=int, default=50)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--noise-features", type=int, default=30)
    p.add_argument("--weights", default=None,
                   help="comma-separated cluster weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit one architecture to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default=None)
    p.add_argument("--arch", required=True,
                   help="architecture string, e.g. 'K=5,1;D=4,1'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--overfitted", action="store_true",
                   help="use the sparse Dirichlet prior (rho=0.5)")
    _add_fit_flags(p, iters_default=2000)
    _add_prior_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("select",
                       help="enumerate and short-run-score architectures")
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default=None)
    p.add_argument("--layers", default="2,3",
                   help="comma-separated layer counts to consider")
    p.add_argument("--k-first", type=int, default=None,
                   help="first-layer components; default floor(sqrt(n)) "
                        "with the overfitted prior")
    p.add_argument("--k-deeper", default="1,2,3",
                   help="component proposals for layers >= 2")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_fit_flags(p, iters_default=250)
    _add_prior_flags(p)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("cluster", help="assign clusters from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("evaluate",
                       help="score predicted labels against the truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("prune-refit",
                       help="drop low-weight components, then refit")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default=None)
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_fit_flags(p, iters_default=2000)
    _add_prior_flags(p)
    p.set_defaults(func=_cmd_prune_refit)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
