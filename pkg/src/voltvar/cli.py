"""Command-line entry point: ``voltvar <subcommand> [options]``.

Exit codes: 0 success, 2 validation or parse error, 3 infeasible problem or
diverged run, 4 stepsize above the stability bound.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, control
from . import io as vio
from .control import INCREMENTAL, MODES, NON_INCREMENTAL, UNCONTROLLED, ControlConfig
from .errors import EmptyDatasetError, ModelConstructionError, ParseError, VoltVarError
from .grid import InjectionState, build_model, restricted_voltage
from .learning import generate_scenarios, build_datasets, train
from .opf import assemble_opf, solve_opf
from .simulation import (
    LINEAR,
    NONLINEAR,
    compare_runs,
    extract_metrics,
    perturb_profiles,
    run_fixed_load,
    run_time_varying,
    synthetic_profiles,
)

logger = logging.getLogger("voltvar")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3
EXIT_UNSTABLE = 4

PAIRED = "paired"
MANIFEST = "manifest.json"


class CliExit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- shared helpers ------------------------------------------------------------

def _network(args):
    path = args.network or vio.bundled_network_path()
    return Path(path), vio.load_network(path)


def _profiles(args, network):
    """Profiles from ``--profiles`` or, when omitted, the seeded synthetic day."""
    if args.profiles:
        profiles = vio.read_profiles_csv(args.profiles, network)
    else:
        profiles = synthetic_profiles(network, seed=args.profile_seed)
    profiles.check_network(network)
    return profiles


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_network(p):
    p.add_argument("--network", help="network JSON (default: bundled 37-bus-style feeder)")


def _add_profiles(p):
    p.add_argument("--profiles", help="profiles CSV (default: synthetic day from --profile-seed)")
    p.add_argument("--profile-seed", type=int, default=0, help="seed of the synthetic profiles")


def _profile_params(args) -> dict:
    return {"profiles": args.profiles or "synthetic", "profile_seed": None if args.profiles else args.profile_seed}


# -- subcommands -----------------------------------------------------------------

def cmd_profiles(args) -> int:
    net_path, network = _network(args)
    profiles = synthetic_profiles(network, seed=args.seed, minutes=args.minutes)
    vio.write_profiles_csv(profiles, network, args.out)
    print(f"wrote {len(profiles)} time steps for {network.n} buses to {args.out}")
    return EXIT_OK


def cmd_opf(args) -> int:
    _, network = _network(args)
    _, model = build_model(network)
    if args.profiles or args.minute is not None:
        profiles = _profiles(args, network)
        minute = 0 if args.minute is None else args.minute
        rows = np.flatnonzero(profiles.timestamps == minute)
        if not rows.size:
            raise CliExit(EXIT_INVALID, f"minute {minute} not in profiles")
        p, q_L = profiles.p[rows[0]], profiles.q_L[rows[0]]
    else:
        p, q_L = network.nominal_injections(args.load_scale)
    sol = solve_opf(assemble_opf(model, p, q_L, network), tol=args.tol)
    result = {
        "status": sol.status,
        "iterations": sol.iterations,
        "der_buses": network.der_buses.tolist(),
        "q_star": sol.q_star.tolist(),
        "v_star": sol.v_star.tolist(),
        "loss": sol.loss_star,
        "kkt": {"stationarity": sol.kkt.stationarity, "primal": sol.kkt.primal,
                "complementarity": sol.kkt.complementarity},
    }
    if not sol.optimal and sol.worst_bus is not None:
        result["worst_bus"] = sol.worst_bus + 1
        result["worst_violation"] = sol.worst_violation
    print(json.dumps(result, indent=2))
    if args.out:
        vio.write_json(args.out, result)
    if sol.status == "infeasible":
        raise CliExit(EXIT_INFEASIBLE, f"OPF infeasible; worst voltage violation {sol.worst_violation:.4e} "
                                       f"p.u. at bus {sol.worst_bus + 1}")
    if not sol.optimal:
        raise CliExit(EXIT_INFEASIBLE, f"OPF not solved to tolerance (status {sol.status})")
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    net_path, network = _network(args)
    _, model = build_model(network)
    profiles = _profiles(args, network)
    scenarios = generate_scenarios(profiles.p, profiles.q_L, args.K, args.perturbation, args.seed)
    try:
        datasets = build_datasets(scenarios, model, network, tol=args.tol)
    except EmptyDatasetError as exc:
        raise CliExit(EXIT_INFEASIBLE, str(exc)) from exc
    out = _out_dir(args.out)
    files = []
    for ds in datasets:
        path = out / vio.dataset_filename(ds.bus)
        vio.write_dataset_csv(ds, path)
        files.append(path)
    load_total = -scenarios.p[:, network.load_buses - 1].sum(axis=1)
    manifest = vio.make_manifest(
        "build-dataset",
        params={"K": args.K, "perturbation": args.perturbation, "tol": args.tol, **_profile_params(args)},
        inputs={"network": net_path, "profiles": args.profiles},
        outputs=files,
        seed=args.seed,
    )
    manifest["scenarios"] = {
        "K": scenarios.K,
        "feasible": len(datasets[0]),
        "infeasible_count": scenarios.K - len(datasets[0]),
        "total_load_min": float(load_total.min()),
        "total_load_mean": float(load_total.mean()),
        "total_load_max": float(load_total.max()),
    }
    manifest["ders"] = [{"bus": ds.bus, "q_min": ds.q_min, "q_max": ds.q_max, "file": vio.dataset_filename(ds.bus)}
                        for ds in datasets]
    vio.write_json(out / MANIFEST, manifest)
    print(f"{len(datasets[0])} of {scenarios.K} scenarios feasible; "
          f"{len(datasets)} dataset files written to {out}")
    return EXIT_OK


def _dataset_specs(args):
    """``(bus, q_min, q_max, path)`` for every dataset to train on."""
    ddir = Path(args.datasets)
    if not ddir.is_dir():
        raise FileNotFoundError(f"dataset directory {ddir} does not exist")
    manifest_path = ddir / MANIFEST
    if manifest_path.exists():
        return [(d["bus"], d["q_min"], d["q_max"], ddir / d["file"]) for d in vio.read_json(manifest_path)["ders"]]
    if not args.network:
        raise FileNotFoundError(f"{manifest_path} missing; pass --network to supply DER limits")
    network = vio.load_network(args.network)
    return [(d.bus, d.q_min, d.q_max, ddir / vio.dataset_filename(d.bus)) for d in network.ders]


def cmd_train(args) -> int:
    specs = _dataset_specs(args)
    out = _out_dir(args.out)
    report, inputs, files = [], {}, []
    for bus, q_min, q_max, path in specs:
        if not Path(path).exists():
            raise FileNotFoundError(f"dataset for DER bus {bus} missing: {path}")
        ds = vio.read_dataset_csv(path, q_min, q_max)
        nn = train(ds, H=args.H, epochs=args.epochs, lr=args.lr, seed=args.seed)
        mpath = out / vio.model_filename(bus)
        vio.save_model(nn, mpath)
        files.append(mpath)
        inputs[f"dataset_bus{bus}"] = path
        report.append({"bus": bus, "n_samples": len(ds), "mse": nn.metadata["mse"],
                       "train_mse": nn.metadata["train_mse"], "val_mse": nn.metadata["val_mse"],
                       "max_slope": control.max_slope([nn])})
        print(f"bus {bus}: mse {nn.metadata['mse']:.3e}, validation mse {nn.metadata['val_mse']:.3e}")
    vio.write_json(out / "training_report.json", report)
    manifest = vio.make_manifest("train", params={"H": args.H, "epochs": args.epochs, "lr": args.lr},
                                 inputs=inputs, outputs=files, seed=args.seed)
    vio.write_json(out / MANIFEST, manifest)
    return EXIT_OK


def _operating_points(network, model):
    """DER voltages at no load and at nominal load with zero DER output."""
    zero = np.zeros(len(network.ders))
    points = [model.u_hat_abs[model.c_idx]]
    p, q_L = network.nominal_injections()
    points.append(restricted_voltage(model, zero, p, q_L)[model.c_idx])
    return points


def _check_epsilon(report) -> None:
    if not report.epsilon_ok:
        raise CliExit(EXIT_UNSTABLE,
                      f"epsilon = {report.epsilon:g} violates the stability bound: need 0 < epsilon < "
                      f"min(1, 2 / (1 + ||X|| M)) = {report.epsilon_max:.6g} "
                      f"(||X|| = {report.X_norm:.6g}, M = {report.M:.6g})")


def cmd_stability(args) -> int:
    _, network = _network(args)
    _, model = build_model(network)
    phis = vio.load_models(args.models, network)
    report = control.stability_report(model.X, phis, _operating_points(network, model), epsilon=args.epsilon)
    data = report.to_dict()
    print(json.dumps({k: v for k, v in data.items() if k != "operating_points"}, indent=2))
    if args.out:
        vio.write_json(args.out, data)
    if not all(pt["lemma_ok"] for pt in report.operating_points):
        raise CliExit(EXIT_UNSTABLE, "eigenvalue check of |J_phi| X failed at an operating point")
    if args.epsilon is not None:
        _check_epsilon(report)
    return EXIT_OK


def _simulate_one(args, mode, network, adm, model, phis, profiles, epsilon):
    config = ControlConfig(epsilon=epsilon if mode == INCREMENTAL else 0.5, mode=mode,
                           tol=args.tol, max_iter=args.iters)
    q0 = None if args.q0 is None else np.array(args.q0, dtype=float)
    if args.fixed_load:
        minute = args.start
        rows = np.flatnonzero(profiles.timestamps == minute)
        if not rows.size:
            raise CliExit(EXIT_INVALID, f"minute {minute} not in profiles")
        k = rows[0]
        state0 = InjectionState(p=profiles.p[k], q_L=profiles.q_L[k],
                                q_C=np.zeros(len(network.ders)) if q0 is None else q0)
        return run_fixed_load(network, model, phis, config, state0, feedback=args.feedback, adm=adm,
                              stop_on_convergence=False, time=minute)
    window = profiles.window(args.start, args.end)
    return run_time_varying(network, model, phis, config, window, iters_per_step=args.iters_per_step,
                            q0=q0, feedback=args.feedback, adm=adm)


def cmd_simulate(args) -> int:
    net_path, network = _network(args)
    adm, model = build_model(network)
    profiles = _profiles(args, network)
    if args.perturbation > 0:
        profiles = perturb_profiles(profiles, args.perturbation, args.seed)
    modes = [INCREMENTAL, UNCONTROLLED] if args.mode == PAIRED else [args.mode]
    needs_models = any(m != UNCONTROLLED for m in modes)
    if needs_models and not args.models:
        raise CliExit(EXIT_INVALID, f"mode {args.mode} needs --models")
    phis = vio.load_models(args.models, network) if needs_models else []

    epsilon = args.epsilon
    if needs_models:
        report = control.stability_report(model.X, phis, epsilon=epsilon)
        epsilon = report.epsilon
        if not report.epsilon_ok and INCREMENTAL in modes:
            logger.warning("epsilon = %g exceeds the stability bound %.6g; convergence is not guaranteed",
                           epsilon, report.epsilon_max)
        if NON_INCREMENTAL in modes and report.X_norm * report.M >= 1.0:
            logger.warning("||X|| M = %.3g >= 1: the non-incremental rule may not converge",
                           report.X_norm * report.M)

    out = _out_dir(args.out)
    traces, files = {}, []
    for mode in modes:
        trace = _simulate_one(args, mode, network, adm, model, phis, profiles, epsilon)
        traces[mode] = trace
        name = "trace.csv" if len(modes) == 1 else f"trace_{mode}.csv"
        vio.write_trace_csv(trace, out / name)
        files.append(out / name)

    metrics = {mode: extract_metrics(t) for mode, t in traces.items()}
    metrics_out = metrics[modes[0]] if len(modes) == 1 else metrics
    vio.write_json(out / "metrics.json", metrics_out)
    files.append(out / "metrics.json")
    if args.mode == PAIRED:
        rows = compare_runs(traces[INCREMENTAL], traces[UNCONTROLLED])
        vio.write_comparison_csv(rows, out / "comparison.csv")
        files.append(out / "comparison.csv")

    inputs = {"network": net_path, "profiles": args.profiles}
    if needs_models:
        inputs.update({f"model_bus{b}": Path(args.models) / vio.model_filename(int(b)) for b in network.der_buses})
    params = {"mode": args.mode, "epsilon": epsilon, "iters_per_step": args.iters_per_step,
              "start": args.start, "end": args.end, "fixed_load": args.fixed_load, "iters": args.iters,
              "feedback": args.feedback, "perturbation": args.perturbation, "q0": args.q0,
              **_profile_params(args)}
    vio.write_json(out / MANIFEST, vio.make_manifest("simulate", params, inputs, files, seed=args.seed))

    for mode, m in metrics.items():
        print(f"{mode}: status {m['status']}, min deviation {m['min_dev']:+.4f}, "
              f"undervoltage samples {m['undervoltage_samples']}, final loss {m['final_loss']:.6f}")
    diverged = [mode for mode, t in traces.items() if t.status == "diverged"]
    if diverged:
        raise CliExit(EXIT_INFEASIBLE, f"run diverged in mode {', '.join(diverged)}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voltvar", description="Learned local Volt/Var control toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profiles", help="write a synthetic daily profiles CSV")
    _add_network(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--minutes", type=int, default=1440)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profiles)

    p = sub.add_parser("opf", help="solve one OPF instance and print q*, v*, loss and KKT residuals")
    _add_network(p)
    _add_profiles(p)
    p.add_argument("--minute", type=int, help="profile minute to solve (default: nominal loads)")
    p.add_argument("--load-scale", type=float, default=1.0, help="scale of the nominal loads")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", help="also write the result as JSON")
    p.set_defaults(func=cmd_opf)

    p = sub.add_parser("build-dataset", help="solve the OPF over sampled scenarios")
    _add_network(p)
    _add_profiles(p)
    p.add_argument("--K", type=int, default=1440, help="number of scenarios")
    p.add_argument("--perturbation", type=float, default=0.1, help="relative uniform noise on profile rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="fit one monotone equilibrium function per DER")
    p.add_argument("--datasets", required=True, help="directory written by build-dataset")
    p.add_argument("--network", help="network JSON for DER limits when the dataset manifest is missing")
    p.add_argument("--H", type=int, default=200)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stability", help="stepsize bound and eigenvalue checks for trained models")
    _add_network(p)
    p.add_argument("--models", required=True)
    p.add_argument("--epsilon", type=float, help="stepsize to certify (exit 4 if above the bound)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("simulate", help="closed-loop simulation")
    _add_network(p)
    _add_profiles(p)
    p.add_argument("--models")
    p.add_argument("--mode", choices=[*MODES, PAIRED], default=INCREMENTAL)
    p.add_argument("--epsilon", type=float, help="stepsize (default: half the stability bound)")
    p.add_argument("--iters-per-step", type=int, default=120)
    p.add_argument("--start", type=int, default=1095, help="first minute (fixed-load minute with --fixed-load)")
    p.add_argument("--end", type=int, default=1105, help="end minute, exclusive")
    p.add_argument("--fixed-load", action="store_true", help="freeze loads at --start and iterate --iters times")
    p.add_argument("--iters", type=int, default=600)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--feedback", choices=[LINEAR, NONLINEAR], default=LINEAR)
    p.add_argument("--q0", type=float, nargs="+", help="initial DER reactive powers (default 0)")
    p.add_argument("--perturbation", type=float, default=0.0, help="relative noise on the realized profiles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliExit as exc:
        print(f"voltvar: {exc}", file=sys.stderr)
        return exc.code
    except (ParseError, ValueError, FileNotFoundError, ModelConstructionError) as exc:
        print(f"voltvar: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except VoltVarError as exc:
        print(f"voltvar: error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
