"""Batch driver: generate / solve / sens / verify subcommands.

Every command takes a JSON run configuration and an output directory; each
output directory receives a manifest (config hash, seed, package versions)
sufficient to reproduce the run.  Outputs are deterministic under a fixed
seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, hdsa, optim, report, updates, verify
from .linops import ContractViolation, load_csv, save_csv
from .lis import GevpConfig
from .problem import QuadraticModel
from .tracer import TracerConfig, TracerData, TracerProblem, generate_data


def _canonical(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(_canonical(config).encode()).hexdigest()


def write_manifest(out_dir: Path, config: dict, extra=None) -> None:
    payload = {
        "config": config,
        "config_sha256": config_hash(config),
        "seed": config.get("seed"),
        "versions": {
            "lishdsa": __version__,
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
        },
    }
    if extra:
        payload.update(extra)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path, overrides: dict) -> dict:
    with open(path) as fh:
        config = json.load(fh)
    for key, val in overrides.items():
        if val is not None:
            config[key] = val
    config.setdefault("seed", 0)
    config.setdefault("model", "quadratic")
    return config


def _tracer_cfg(config: dict) -> TracerConfig:
    fields = {k: v for k, v in config.get("tracer", {}).items()}
    fields.setdefault("seed", config["seed"])
    return TracerConfig(**fields)


def _quadratic_model(config: dict, base_dir: Path) -> QuadraticModel:
    spec = config.get("quadratic")
    if spec is None:
        raise ContractViolation("config lacks a 'quadratic' section")
    return QuadraticModel.from_config(spec, base_dir=base_dir)


def _gevp_cfg(config: dict) -> GevpConfig:
    g = config.get("gevp", {})
    return GevpConfig(
        oversampling=g.get("oversampling", 20),
        r0=g.get("r0", 8),
        dr=g.get("dr", 8),
        lambda_min=g.get("lambda_min", 1.0),
        seed=g.get("seed", config["seed"]),
        cg_tol=g.get("cg_tol", 1e-10),
        max_rank=g.get("max_rank"),
    )


def _solver_opts(config: dict) -> optim.TrustRegionOptions:
    s = config.get("solver", {})
    return optim.TrustRegionOptions(
        max_iter=s.get("max_iter", 100),
        gtol=s.get("gtol", 1e-8),
        radius0=s.get("radius0", 1.0),
        max_radius=s.get("max_radius", 1e4),
        hessian_mode=s.get("hessian_mode", "full"),
    )


def _build_problem(config: dict, base_dir: Path, data_dir: Path):
    if config["model"] == "tracer":
        cfg = _tracer_cfg(config)
        data = TracerData.load(data_dir)
        return TracerProblem(cfg, data)
    model = _quadratic_model(config, base_dir)
    theta = np.asarray(config.get("theta", np.zeros(model.n).tolist()), dtype=float)
    d = load_csv(data_dir / "data.csv").ravel()
    return QuadraticModel(A=model.A, C=model.C, d=d, W=model.W, Hreg=model.Hreg)


def cmd_generate(args) -> int:
    config = load_config(args.config, {"seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if config["model"] == "tracer":
        cfg = _tracer_cfg(config)
        data = generate_data(cfg)
        data.save(out)
        extra = {"w_c": data.w_c, "w_p": data.w_p}
    else:
        model = _quadratic_model(config, Path(args.config).parent)
        gen = config.get("generate", {})
        seed = config["seed"]
        rng = np.random.default_rng(seed)
        z_true = np.asarray(
            gen.get("z_true", rng.standard_normal(model.m).tolist()), dtype=float
        )
        theta = np.asarray(gen.get("theta", np.zeros(model.n).tolist()), dtype=float)
        d = model.generate_data(z_true, theta, gen.get("noise_rel", 0.0), seed)
        save_csv(out / "data.csv", d.reshape(1, -1))
        save_csv(out / "z_true.csv", z_true.reshape(1, -1))
        extra = {"n_obs": int(d.size)}
    write_manifest(out, config, extra)
    print(f"wrote data bundle to {out}")
    return 0


def cmd_solve(args) -> int:
    config = load_config(args.config, {"seed": args.seed})
    if args.max_iter is not None:
        config.setdefault("solver", {})["max_iter"] = args.max_iter
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = _build_problem(config, Path(args.config).parent, Path(args.data))
    theta = np.asarray(config.get("theta", np.zeros(problem.n).tolist()), dtype=float)
    if config["model"] == "tracer":
        z0 = problem.initial_iterate()
    else:
        z0 = np.zeros(problem.m)
    opts = _solver_opts(config)
    t0 = time.perf_counter()
    result = optim.trust_region_solve(problem, z0, theta, opts)
    elapsed = time.perf_counter() - t0
    save_csv(out / "z_star.csv", result.z.reshape(1, -1))
    save_csv(
        out / "gradient.csv", problem.gradient_z(result.z, theta).reshape(1, -1)
    )
    optim.history_to_csv(result.history, out / "history.csv")
    write_manifest(
        out,
        config,
        {
            "converged": result.converged,
            "message": result.message,
            "iterations": result.n_iterations,
            "solve_seconds": round(elapsed, 3),
        },
    )
    last = result.history[-1]
    print(
        f"solve finished: {result.message} "
        f"(objective {last.objective:.6g}, grad norm {last.grad_norm:.3e})"
    )
    return 0


def cmd_sens(args) -> int:
    config = load_config(args.config, {"seed": args.seed})
    if args.lambda_min is not None:
        config["lambda_headline"] = args.lambda_min
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = _build_problem(config, Path(args.config).parent, Path(args.data))
    theta = np.asarray(config.get("theta", np.zeros(problem.n).tolist()), dtype=float)
    z_star = load_csv(Path(args.zstar)).ravel()

    rep = hdsa.run_pipeline(
        problem,
        theta,
        z_star=z_star,
        gevp_cfg=_gevp_cfg(config),
        alpha=config.get("alpha"),
        lambda_headline=config.get("lambda_headline", 1.0),
        lambda_sweep=config.get("lambda_sweep", [0.1, 0.5, 1.0, 2.0]),
        hessian_mode=config.get("solver", {}).get("hessian_mode", "full"),
        workers=args.workers or config.get("workers", 1),
        provenance={"config_sha256": config_hash(config)},
    )
    hdsa.save_report(rep, out)

    g = problem.gradient_z(z_star, theta)
    spec = updates.first_order_update(
        g, rep.alpha, z_star
    )
    updates.save_update_spec(spec, out / "update")
    figures = report.render_report_figures(rep, out)
    write_manifest(out, config, {"r": rep.r, "figures": [p.name for p in figures]})
    print(
        f"sensitivity report in {out}: r={rep.r}, "
        f"headline lambda_min={rep.lambda_min:g}, "
        f"largest index {float(np.max(rep.indices)):.4g} "
        f"({rep.labels[int(np.argmax(rep.indices))]})"
    )
    return 0


def cmd_verify(args) -> int:
    results, ok = verify.run_suite(level=args.level, seed=args.seed or 0)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name.ljust(width)}  {r.detail}")
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lishdsa",
        description="Sensitivity analysis of regularized inverse problems "
        "on likelihood-informed subspaces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--workers", type=int, default=None, help="concurrency cap")

    p_gen = sub.add_parser("generate", parents=[common], help="synthesize a data bundle")
    p_gen.set_defaults(fn=cmd_generate)

    p_solve = sub.add_parser("solve", parents=[common], help="run the trust-region solve")
    p_solve.add_argument("--data", required=True, help="data bundle directory")
    p_solve.add_argument("--max-iter", type=int, default=None)
    p_solve.set_defaults(fn=cmd_solve)

    p_sens = sub.add_parser("sens", parents=[common], help="compute sensitivity indices")
    p_sens.add_argument("--data", required=True, help="data bundle directory")
    p_sens.add_argument("--zstar", required=True, help="CSV with the solve iterate")
    p_sens.add_argument("--lambda-min", type=float, default=None)
    p_sens.add_argument("--max-iter", type=int, default=None, help="unused; accepted for symmetry")
    p_sens.set_defaults(fn=cmd_sens)

    p_ver = sub.add_parser("verify", help="run the oracle/property suites")
    p_ver.add_argument("--level", choices=("fast", "full"), default="fast")
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.set_defaults(fn=cmd_verify)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
