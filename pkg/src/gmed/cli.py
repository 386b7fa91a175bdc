"""Command-line entry point.

Commands: ``fit``, ``bootstrap``, ``simulate``, ``replicate``. Every command
writes machine-readable output embedding a run manifest (resolved
configuration, seed, input digests, tool version, wall-clock runtime) so that
a run can be reproduced exactly. Exit codes: 0 success, 1 usage, 2 input
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .causal import BootstrapResult, bootstrap
from .components import ComponentSet, select_components
from .data import (
    CausalEstimates,
    ConstraintMatrix,
    ProjectionVector,
    identity_constraint,
    load_dataset,
    pooled_covariance,
    save_dataset,
)
from .exceptions import GmedDataError, GmedError, GmedNumericalError
from .optimizer import ComponentFit, FitTrace, ModelParameters, OptimizerConfig
from .report import render_fit_figures, render_replication_figures, save_metrics_csv
from .simulate import (
    MethodConfig,
    SimulationDesign,
    generate_dataset,
    replication_study,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _digest_path(path: Path) -> str:
    if path.is_dir():
        h = hashlib.sha256()
        for f in sorted(path.rglob("*")):
            if f.is_file():
                h.update(f.name.encode())
                h.update(hashlib.sha256(f.read_bytes()).digest())
        return h.hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(command: str, config: dict, seed: int, inputs: list[Path], t0: float) -> dict:
    return {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "input_digests": {str(p): _digest_path(p) for p in inputs},
        "runtime_seconds": time.perf_counter() - t0,
    }


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("GMED_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise _UsageError(f"GMED_THREADS must be an integer, got {env!r}") from None
    return 1


# ---------------------------------------------------------------------------
# Result payloads


def study_payload(
    components: ComponentSet, h: ConstraintMatrix, n_units: int, q: int
) -> dict:
    comps = []
    for j, (fit, trace) in enumerate(zip(components.fits, components.traces), start=1):
        params = fit.params
        comps.append(
            {
                "index": j,
                "theta": fit.theta.theta.tolist(),
                "coefficients": {
                    "alpha0": params.alpha0,
                    "alpha": params.alpha,
                    "phi1": params.alpha_block[1:].tolist(),
                    "gamma0": params.gamma0,
                    "gamma": params.gamma,
                    "phi2": params.gamma_block[1:].tolist(),
                    "beta": params.beta,
                    "pi2": params.pi2,
                    "sigma2": params.sigma2,
                    "alpha0i": params.alpha0i.tolist(),
                },
                "estimands": {
                    "ate": fit.estimands.ate,
                    "aie": fit.estimands.aie,
                    "ade": fit.estimands.ade,
                },
                "loglik": fit.loglik,
                "converged": fit.converged,
                "n_iter": fit.n_iter,
                "chosen_start_index": fit.start_index,
                "trace": trace.objectives.tolist(),
            }
        )
    return {
        "p": h.dim,
        "n_units": n_units,
        "q": q,
        "h": {"kind": h.kind, "matrix": h.matrix.tolist()},
        "dfd_trace": list(components.dfd_trace),
        "components": comps,
    }


def component_set_from_payload(payload: dict) -> tuple[ComponentSet, ConstraintMatrix]:
    h = ConstraintMatrix(np.asarray(payload["h"]["matrix"]), payload["h"]["kind"])
    fits = []
    traces = []
    for comp in payload["components"]:
        coef = comp["coefficients"]
        theta = np.asarray(comp["theta"], dtype=np.float64)
        params = ModelParameters(
            theta=theta,
            alpha0i=np.asarray(coef["alpha0i"], dtype=np.float64),
            alpha0=coef["alpha0"],
            alpha_block=np.asarray([coef["alpha"]] + coef["phi1"], dtype=np.float64),
            gamma0=coef["gamma0"],
            gamma_block=np.asarray([coef["gamma"]] + coef["phi2"], dtype=np.float64),
            beta=coef["beta"],
            pi2=coef["pi2"],
            sigma2=coef["sigma2"],
        )
        fits.append(
            ComponentFit(
                theta=ProjectionVector(theta, h),
                params=params,
                estimands=CausalEstimates(**comp["estimands"]),
                loglik=comp["loglik"],
                converged=comp["converged"],
                n_iter=comp["n_iter"],
                start_index=comp["chosen_start_index"],
            )
        )
        traces.append(
            FitTrace(
                objectives=np.asarray(comp["trace"]),
                converged=comp["converged"],
                n_iter=comp["n_iter"],
                chosen_start_index=comp["chosen_start_index"],
            )
        )
    return (
        ComponentSet(fits=tuple(fits), traces=tuple(traces), dfd_trace=tuple(payload["dfd_trace"])),
        h,
    )


def bootstrap_payload(result: BootstrapResult, keep_draws: bool) -> dict:
    comps = []
    for comp in result.components:
        entry = {"component": comp.component}
        for name in ("aie", "alpha", "beta", "gamma", "ade", "ate"):
            inf = getattr(comp, name)
            entry[name] = {
                "estimate": inf.estimate,
                "se": inf.se,
                "p_value": inf.p_value,
                "ci": list(inf.ci),
            }
            if keep_draws:
                entry[name]["draws"] = inf.draws.tolist()
        comps.append(entry)
    return {
        "B": result.n_replicates,
        "ci_level": result.ci_level,
        "n_failed": result.n_failed,
        "components": comps,
    }


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Commands


def _optimizer_config(args) -> OptimizerConfig:
    return OptimizerConfig(
        max_outer_iter=args.max_outer_iter,
        tol_obj=args.tol_obj,
        n_random_starts=args.random_starts,
        include_pooled_eigvec_starts=not args.no_eigvec_starts,
        seed=args.seed,
    )


def _add_fit_options(sub):
    sub.add_argument("--max-components", type=int, default=None)
    sub.add_argument("--dfd-threshold", type=float, default=2.0)
    sub.add_argument("--h", choices=["pooled", "identity"], default="pooled")
    sub.add_argument("--random-starts", type=int, default=10)
    sub.add_argument("--no-eigvec-starts", action="store_true")
    sub.add_argument("--max-outer-iter", type=int, default=200)
    sub.add_argument("--tol-obj", type=float, default=1e-8)
    sub.add_argument("--seed", type=int, default=0)


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    units = load_dataset(args.subjects, args.mediators, center=args.center)
    include_confounders = not args.ignore_confounders
    if args.h == "identity":
        h = identity_constraint(units[0].n_coords)
    else:
        h = pooled_covariance(units)
    config = _optimizer_config(args)
    threads = _resolve_threads(args.threads)
    components = select_components(
        units,
        h,
        config,
        max_k=args.max_components,
        dfd_threshold=args.dfd_threshold,
        include_confounders=include_confounders,
        threads=threads,
    )
    q = units[0].confounders.shape[0]
    payload = study_payload(components, h, len(units), q)
    cli_config = {
        "subjects": str(args.subjects),
        "mediators": str(args.mediators),
        "center": args.center,
        "ignore_confounders": args.ignore_confounders,
        "h": args.h,
        "max_components": args.max_components,
        "dfd_threshold": args.dfd_threshold,
        "threads": threads,
        "optimizer": asdict(config),
    }
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    payload["manifest"] = _manifest(
        "fit", cli_config, args.seed, [Path(args.subjects), Path(args.mediators)], t0
    )
    _write_json(payload, outdir / "result.json")
    if not args.no_plots:
        render_fit_figures(
            components.dfd_trace,
            [f.theta.theta.tolist() for f in components.fits],
            args.dfd_threshold,
            outdir,
        )
    print(f"wrote {outdir / 'result.json'} ({components.n_components} components)")
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    t0 = time.perf_counter()
    if args.B < 1:
        raise _UsageError("--B must be at least 1")
    if not (0 < args.level < 1):
        raise _UsageError("--level must lie in (0, 1)")
    fit_path = Path(args.fit)
    if not fit_path.exists():
        raise GmedDataError(f"fit result not found: {fit_path}")
    with open(fit_path) as fh:
        fit_payload = json.load(fh)
    components, _ = component_set_from_payload(fit_payload)
    fit_config = fit_payload.get("manifest", {}).get("config", {})
    subjects = args.subjects or fit_config.get("subjects")
    mediators = args.mediators or fit_config.get("mediators")
    if subjects is None or mediators is None:
        raise _UsageError("dataset paths not recorded in fit result; pass --subjects/--mediators")
    units = load_dataset(subjects, mediators, center=fit_config.get("center", False))
    threads = _resolve_threads(args.threads)
    result = bootstrap(
        units,
        components,
        n_replicates=args.B,
        ci_level=args.level,
        seed=args.seed,
        include_confounders=not fit_config.get("ignore_confounders", False),
        threads=threads,
    )
    if result.n_failed > 0.5 * args.B:
        sys.stderr.write(
            f"error: {result.n_failed}/{args.B} bootstrap replicates failed\n"
        )
        return EXIT_NUMERICAL
    payload = bootstrap_payload(result, args.keep_draws)
    cli_config = {
        "fit": str(fit_path),
        "subjects": str(subjects),
        "mediators": str(mediators),
        "B": args.B,
        "level": args.level,
        "keep_draws": args.keep_draws,
        "threads": threads,
    }
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    payload["manifest"] = _manifest(
        "bootstrap", cli_config, args.seed, [fit_path, Path(subjects), Path(mediators)], t0
    )
    _write_json(payload, outdir / "bootstrap.json")
    print(f"wrote {outdir / 'bootstrap.json'} (n_failed={result.n_failed})")
    return EXIT_OK


def _design_from_args(args) -> SimulationDesign:
    if args.T < 1:
        raise _UsageError("--T must be at least 1")
    if args.p < 1 or args.n < 1:
        raise _UsageError("--p and --n must be positive")
    return SimulationDesign(
        p=args.p,
        n=args.n,
        T=args.T,
        q=2 if args.sim == 2 else 0,
        seed=args.seed,
    )


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    design = _design_from_args(args)
    units, truth = generate_dataset(design)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_dataset(units, outdir)
    cli_config = {"sim": args.sim, "misspecify": args.misspecify, "design": asdict(design)}
    sidecar = {
        "design": asdict(design),
        "fit_confounders": not args.misspecify,
        "pi": truth.pi.tolist(),
        "mediation_dims": list(truth.mediation_dims),
        "coefficients": {
            "alpha0": truth.alpha0,
            "alpha": truth.alpha,
            "phi1": truth.phi1.tolist(),
            "gamma0": truth.gamma0,
            "gamma": truth.gamma,
            "beta": truth.beta,
            "phi2": truth.phi2.tolist(),
        },
        "components": [
            {
                "dim": dim,
                "sign": sign,
                "alpha": sign * truth.alpha,
                "beta": sign * truth.beta,
                "phi1": truth.phi1.tolist(),
            }
            for dim, sign in zip(truth.mediation_dims, truth.component_signs)
        ],
        "true_aie": truth.aie,
        "true_ade": truth.ade,
        "manifest": _manifest("simulate", cli_config, args.seed, [], t0),
    }
    _write_json(sidecar, outdir / "truth.json")
    print(f"wrote {outdir / 'subjects.csv'} and {outdir / 'truth.json'}")
    return EXIT_OK


def cmd_replicate(args) -> int:
    t0 = time.perf_counter()
    if args.reps < 1:
        raise _UsageError("--reps must be at least 1")
    if any(t < 1 for t in args.T):
        raise _UsageError("--T must be at least 1")
    if args.p < 1 or args.n < 1:
        raise _UsageError("--p and --n must be positive")
    threads = _resolve_threads(args.threads)
    config = _optimizer_config(args)
    method = MethodConfig(
        optimizer=config,
        max_k=args.max_components,
        dfd_threshold=args.dfd_threshold,
        h_kind=args.h,
        include_confounders=not args.misspecify,
    )
    rows: list[dict] = []
    details: list[dict] = []
    for t_value in args.T:
        design = SimulationDesign(
            p=args.p,
            n=args.n,
            T=t_value,
            q=2 if args.sim == 2 else 0,
            seed=args.seed,
        )
        study = replication_study(design, args.reps, method, threads=threads)
        for row in study.rows:
            rows.append({"sim": args.sim, "p": args.p, "n": args.n, "T": t_value, **row})
        for rec in study.records:
            details.append({"T": t_value, **rec})
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_metrics_csv(rows, outdir / "metrics.csv")
    cli_config = {
        "sim": args.sim,
        "p": args.p,
        "n": args.n,
        "T": list(args.T),
        "reps": args.reps,
        "misspecify": args.misspecify,
        "h": args.h,
        "max_components": args.max_components,
        "dfd_threshold": args.dfd_threshold,
        "threads": threads,
        "optimizer": asdict(config),
    }
    payload = {
        "rows": rows,
        "records": [
            {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in rec.items()}
            for rec in details
        ],
        "manifest": _manifest("replicate", cli_config, args.seed, [], t0),
    }
    _write_json(payload, outdir / "metrics.json")
    if not args.no_plots:
        render_replication_figures(rows, outdir)
    print(f"wrote {outdir / 'metrics.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="gmed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit mediation components to a dataset")
    fit.add_argument("--subjects", required=True)
    fit.add_argument("--mediators", required=True)
    fit.add_argument("--out", default=".")
    fit.add_argument("--center", action="store_true")
    fit.add_argument("--ignore-confounders", action="store_true")
    fit.add_argument("--threads", type=int, default=None)
    fit.add_argument("--no-plots", action="store_true")
    _add_fit_options(fit)
    fit.set_defaults(func=cmd_fit)

    boot = sub.add_parser("bootstrap", help="bootstrap confidence intervals for a fit")
    boot.add_argument("--fit", required=True)
    boot.add_argument("--B", type=int, default=500)
    boot.add_argument("--level", type=float, default=0.95)
    boot.add_argument("--seed", type=int, default=0)
    boot.add_argument("--keep-draws", action="store_true")
    boot.add_argument("--threads", type=int, default=None)
    boot.add_argument("--subjects", default=None)
    boot.add_argument("--mediators", default=None)
    boot.add_argument("--out", default=".")
    boot.set_defaults(func=cmd_bootstrap)

    simu = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    simu.add_argument("--sim", type=int, choices=[1, 2], default=1)
    simu.add_argument("--p", type=int, default=10)
    simu.add_argument("--n", type=int, default=500)
    simu.add_argument("--T", type=int, default=100)
    simu.add_argument("--seed", type=int, default=0)
    simu.add_argument("--misspecify", action="store_true")
    simu.add_argument("--out", default=".")
    simu.set_defaults(func=cmd_simulate)

    repl = sub.add_parser("replicate", help="run a replication study and emit metrics")
    repl.add_argument("--sim", type=int, choices=[1, 2], default=1)
    repl.add_argument("--p", type=int, default=10)
    repl.add_argument("--n", type=int, default=500)
    repl.add_argument("--T", type=int, action="append", required=True)
    repl.add_argument("--reps", type=int, default=50)
    repl.add_argument("--misspecify", action="store_true")
    repl.add_argument("--threads", type=int, default=None)
    repl.add_argument("--out", default=".")
    repl.add_argument("--no-plots", action="store_true")
    _add_fit_options(repl)
    repl.set_defaults(func=cmd_replicate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except _UsageError as exc:
        sys.stderr.write(f"gmed: error: {exc}\n")
        return EXIT_USAGE
    except GmedDataError as exc:
        sys.stderr.write(f"gmed: input error: {exc}\n")
        return EXIT_INPUT
    except GmedNumericalError as exc:
        sys.stderr.write(f"gmed: numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    except GmedError as exc:
        sys.stderr.write(f"gmed: error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
