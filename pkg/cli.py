#!/usr/bin/env python3
"""
Command-line entry point: every primitive and experiment as a subcommand, driven by a JSON config
of flat dotted keys plus flags. Each run writes its outputs and manifest.json into the output directory.

Usage:
  python cli.py sample-fbm --H 0.75 --T 1 --N 256 --seed 42
  python cli.py simulate --family linear_meanfield --delta 0.25 --particles 500 --format mvfb
  python cli.py rate --family gaussian_decoupled --target from-khat ghat_const1.csv
  python cli.py ldp-verify --family gaussian_decoupled --r 1.0 --ladder 0.5,0.25,0.125
  python cli.py convergence averaging --config run.json
  python cli.py replay out/manifest.json

Exit codes: 0 success, 1 domain or config error, 2 a rate optimization did not converge.
"""
import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

try:
    from dotenv import load_dotenv
    load_dotenv(Path(__file__).resolve().parent / ".env")
except Exception:
    pass

import numpy as np
import pandas as pd
import pydantic
import scipy

import mvfbm
from mvfbm.coefficients import ProbeSampler, probe_growth_g, probe_H1, probe_H2
from mvfbm.config import RunConfig, build_config, config_hash, dump_config, load_config
from mvfbm.errors import ConfigError, DomainError, MvfbmError
from mvfbm.fractional import Path as GridPath
from mvfbm.fractional import apply_K, sample_fbm
from mvfbm.harness import (
    CI_BASIS,
    auxiliary_error_experiment,
    averaging_convergence_experiment,
    controlled_convergence_experiment,
    increment_scaling_experiment,
    ldp_slope_report,
    mc_exit_probability,
    moment_bound_experiment,
)
from mvfbm.ldp import SkeletonProblem, energy, rate_of_event, rate_of_path, skeleton_solve
from mvfbm.multiscale import (
    AveragedDrift,
    simulate_controlled,
    simulate_coupled,
    solve_averaged,
    solve_limit_ode,
)
from mvfbm.storage import (
    FLOAT_FORMAT,
    ensemble_frame,
    read_density_csv,
    read_json,
    read_path_csv,
    write_blocks,
    write_density_csv,
    write_json,
    write_path_csv,
)

log = logging.getLogger("mvfbm.cli")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
DEFAULT_OUTPUT = "out"
SUBCOMMANDS = (
    "sample-fbm", "simulate", "average", "limit-ode", "skeleton", "rate", "ldp-verify", "convergence",
    "probe-assumptions",
)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "family": "family.name",
    "T": "grid.T",
    "N": "grid.N",
    "H": "sim.H",
    "dim": "sim.dim",
    "particles": "sim.particles",
    "substeps": "sim.substeps",
    "x0": "sim.x0",
    "y0": "sim.y0",
    "method": "sim.method",
    "format": "sim.format",
    "delta": "scales.delta",
    "eps": "scales.eps",
    "ladder": "scales.ladder",
    "eps_power": "scales.eps_power",
    "blocks": "scales.blocks",
    "replicas": "scales.replicas",
    "r": "rate.radius",
    "control": "control.kind",
    "amplitude": "control.amplitude",
    "energy_bound": "control.energy_bound",
    "trials": "probe.trials",
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="JSON config of flat dotted keys")
    common.add_argument("--output", "-o", metavar="DIR", help="Output directory (default: $MVFBM_OUTPUT or ./out)")
    common.add_argument("--threads", type=int, help="Worker threads (default: $MVFBM_THREADS or all cores)")
    common.add_argument("--verbose", "-v", action="store_true", help="Verbose logging")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any config key, e.g. --set family.beta=2.0 (JSON values)")
    common.add_argument("--seed", type=int)
    common.add_argument("--family")
    common.add_argument("--T", type=float)
    common.add_argument("--N", type=int)
    common.add_argument("--H", type=float)
    common.add_argument("--dim", type=int)
    common.add_argument("--particles", type=int)
    common.add_argument("--substeps", type=int)
    common.add_argument("--x0", type=float)
    common.add_argument("--y0", type=float)
    common.add_argument("--method", choices=("cholesky", "circulant"))
    common.add_argument("--format", choices=("csv", "mvfb"))
    common.add_argument("--delta", type=float)
    common.add_argument("--eps", type=float)
    common.add_argument("--ladder", type=_floats, help="Comma-separated decreasing deltas")
    common.add_argument("--eps-power", dest="eps_power", type=float)
    common.add_argument("--blocks", type=_floats, help="Comma-separated block lengths")
    common.add_argument("--replicas", type=int)
    common.add_argument("--r", type=float, help="Exit radius")
    common.add_argument("--control", choices=("zero", "constant", "linear", "sine", "file"))
    common.add_argument("--amplitude", type=float)
    common.add_argument("--energy-bound", dest="energy_bound", type=float)
    common.add_argument("--trials", type=int)

    parser = argparse.ArgumentParser(description="Multi-scale McKean-Vlasov SDEs driven by fBm")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "rate":
            p.add_argument("--target", nargs="+", metavar="ARG",
                           help="Target path CSV, or 'from-khat FILE' for a u-hat density CSV")
        if name == "convergence":
            p.add_argument("kind", choices=("increment", "averaging", "controlled", "auxiliary", "moments"))
            p.add_argument("--reference", choices=("averaged", "limit"))
    rp = sub.add_parser("replay", help="Re-run from a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--output", "-o", metavar="DIR")
    rp.add_argument("--threads", type=int)
    rp.add_argument("--verbose", "-v", action="store_true")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    flat = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            flat[key] = value
    if getattr(args, "kind", None):
        flat["convergence.kind"] = args.kind
    if getattr(args, "reference", None):
        flat["convergence.reference"] = args.reference
    target = getattr(args, "target", None)
    if target:
        if target[0] == "from-khat":
            if len(target) != 2:
                raise ConfigError("--target from-khat needs exactly one FILE")
            flat["rate.target_kind"], flat["rate.target"] = "from-khat", target[1]
        else:
            flat["rate.target_kind"], flat["rate.target"] = "path", target[0]
    for item in getattr(args, "set", []):
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            flat[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            flat[key.strip()] = raw
    return flat


def _workers(cfg: RunConfig, flag) -> int:
    if flag:
        return int(flag)
    if cfg.threads:
        return cfg.threads
    env = os.getenv("MVFBM_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring MVFBM_THREADS=%r", env)
    return os.cpu_count() or 1


def _output_dir(cfg: RunConfig, flag) -> Path:
    out = Path(flag or cfg.output or os.getenv("MVFBM_OUTPUT") or DEFAULT_OUTPUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _versions() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
        "mvfbm": mvfbm.__version__,
    }


def _write_manifest(out: Path, subcommand: str, argv: list, cfg: RunConfig, outputs: list, code: int) -> None:
    files = {}
    for name in outputs:
        with open(out / name, "rb") as f:
            files[name] = hashlib.sha256(f.read()).hexdigest()
    write_json({
        "subcommand": subcommand,
        "argv": list(argv),
        "config": dump_config(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": _versions(),
        "outputs": files,
        "exit_code": code,
    }, out / "manifest.json")


def _write_table(df: pd.DataFrame, dest: Path) -> None:
    df.to_csv(dest, index=False, float_format=FLOAT_FORMAT)


# --- subcommands: each returns (exit code, list of files written) -----------------------------


def cmd_sample_fbm(cfg: RunConfig, out: Path, workers: int):
    path = sample_fbm(cfg.time_grid(), cfg.sim.H, cfg.sim.dim, cfg.seed, cfg.sim.method)
    write_path_csv(path, out / "fbm.csv", prefix="b")
    print(f"fBm H={cfg.sim.H} N={cfg.grid.N} dim={cfg.sim.dim} -> {out / 'fbm.csv'}")
    return EXIT_OK, ["fbm.csv"]


def _write_ensembles(cfg: RunConfig, out: Path, slow, fast, meta: dict) -> list:
    if cfg.sim.format == "mvfb":
        write_blocks(out / "ensemble.mvfb", {"t": cfg.time_grid().nodes, "slow": slow.values, "fast": fast.values}, meta)
        files = ["ensemble.mvfb"]
    else:
        _write_table(ensemble_frame(slow.grid, slow.values, "x"), out / "slow.csv")
        _write_table(ensemble_frame(fast.grid, fast.values, "y"), out / "fast.csv")
        files = ["slow.csv", "fast.csv"]
    _write_table(slow.summary_frame("x"), out / "summary.csv")
    return files + ["summary.csv"]


def cmd_simulate(cfg: RunConfig, out: Path, workers: int):
    c, sp, sim = cfg.coefficients(), cfg.scale_params(), cfg.sim_config()
    if cfg.control.kind == "zero" and cfg.control.vamp == 0.0:
        slow, fast = simulate_coupled(c, sp, sim)
    else:
        h = cfg.control_for(c)
        slow, fast = simulate_controlled(c, sp, sim, h, cfg.control.energy_bound, cfg.sim.companion)
    meta = {"family": c.name, "delta": sp.delta, "eps": sp.eps, "H": sim.H, "seed": cfg.seed}
    files = _write_ensembles(cfg, out, slow, fast, meta)
    print(f"{c.name}: {slow.count} particles, delta={sp.delta:g} eps={sp.eps:g}, "
          f"E|X_T|^2={float(np.mean(np.sum(slow.terminal() ** 2, axis=1))):.4g}")
    return EXIT_OK, files


def cmd_average(cfg: RunConfig, out: Path, workers: int):
    c = cfg.coefficients()
    bbar = AveragedDrift.for_coefficients(c, cfg.frozen_config())
    ens = solve_averaged(c, cfg.sim_config(), bbar, delta=cfg.scales.delta)
    _write_table(ensemble_frame(ens.grid, ens.values, "x"), out / "averaged.csv")
    _write_table(ens.summary_frame("x"), out / "summary.csv")
    print(f"{c.name}: averaged equation ({bbar.source} drift), {ens.count} particles")
    return EXIT_OK, ["averaged.csv", "summary.csv"]


def cmd_limit_ode(cfg: RunConfig, out: Path, workers: int):
    c = cfg.coefficients()
    path = solve_limit_ode(c, cfg.sim_config(), AveragedDrift.for_coefficients(c, cfg.frozen_config()))
    write_path_csv(path, out / "limit.csv")
    print(f"{c.name}: limit path X0_T = {path.values[-1]}")
    return EXIT_OK, ["limit.csv"]


def _problem(cfg: RunConfig) -> SkeletonProblem:
    c = cfg.coefficients()
    return SkeletonProblem.build(c, cfg.time_grid(), cfg.sim.x0, cfg.sim.H, AveragedDrift.for_coefficients(c, cfg.frozen_config()))


def cmd_skeleton(cfg: RunConfig, out: Path, workers: int):
    p = _problem(cfg)
    h = cfg.control_for(p.coefficients)
    path = skeleton_solve(p, h)
    write_path_csv(path, out / "skeleton.csv")
    write_json({"energy": energy(h), "sup_gap_to_limit": path.sup_distance(p.limit)}, out / "skeleton.json")
    print(f"skeleton: energy {energy(h):.6g}, sup gap to limit {path.sup_distance(p.limit):.6g}")
    return EXIT_OK, ["skeleton.csv", "skeleton.json"]


def _rate_target(cfg: RunConfig, p: SkeletonProblem) -> GridPath:
    if cfg.rate.target_kind == "path":
        target = read_path_csv(cfg.rate.target)
        if target.grid != p.grid:
            raise DomainError(f"{cfg.rate.target}: target grid N={target.grid.N} T={target.grid.T} does not match the run grid")
        return target
    khat = read_density_csv(cfg.rate.target, p.grid.T)
    if khat.grid != p.grid or khat.dim != p.n:
        raise DomainError(f"{cfg.rate.target}: density does not match the {p.n}-dim run grid")
    sig = p.coefficients.sigma(0.0, p.measures[0][0])
    return GridPath(p.grid, p.x0[None, :] + apply_K(khat, p.H).values @ sig.T)


def cmd_rate(cfg: RunConfig, out: Path, workers: int):
    p = _problem(cfg)
    rc = cfg.rate_config(workers)
    if cfg.rate.target:
        result = rate_of_path(p, _rate_target(cfg, p), rc)
    else:
        result = rate_of_event(p, cfg.rate.radius, rc)
    write_json(result.to_dict(), out / "rate.json")
    write_density_csv(result.argmin.uhat, out / "argmin_uhat.csv")
    print(f"rate ({result.mode}): {result.value:.6g}  converged={result.converged}  residual={result.residual:.2e}")
    return (EXIT_OK if result.converged else EXIT_NOT_CONVERGED), ["rate.json", "argmin_uhat.csv"]


def cmd_ldp_verify(cfg: RunConfig, out: Path, workers: int):
    c, sim, ladder = cfg.coefficients(), cfg.sim_config(), cfg.ladder()
    probs = mc_exit_probability(c, ladder, cfg.rate.radius, sim, workers)
    rate = rate_of_event(_problem(cfg), cfg.rate.radius, cfg.rate_config(workers))
    slope, summary = ldp_slope_report(probs, rate, cfg.sim.H)
    _write_table(probs, out / "probabilities.csv")
    _write_table(slope, out / "ldp_slope.csv")
    write_json({"rate": rate.to_dict(), "slope": summary, "ci_basis": CI_BASIS}, out / "ldp_report.json")
    print(probs.to_string(index=False))
    print(f"rate {rate.value:.6g}; decreasing={summary.get('decreasing')} gap={summary.get('gap_at_smallest')}")
    code = EXIT_OK if rate.converged else EXIT_NOT_CONVERGED
    return code, ["probabilities.csv", "ldp_slope.csv", "ldp_report.json"]


def _default_blocks(cfg: RunConfig, count: int = 4) -> list[float]:
    dt = cfg.grid.T / cfg.grid.N
    blocks = [dt * 2**k for k in range(count) if dt * 2**k <= cfg.grid.T / 4]
    return blocks if len(blocks) >= 2 else [dt, 2 * dt]


def cmd_convergence(cfg: RunConfig, out: Path, workers: int):
    c, sim, ladder = cfg.coefficients(), cfg.sim_config(), cfg.ladder()
    kind = cfg.convergence.kind
    blocks = list(cfg.scales.blocks) or _default_blocks(cfg)
    if kind == "increment":
        table, summary = increment_scaling_experiment(c, cfg.scale_params(), sim, blocks, ladder.replicas, workers)
    elif kind == "averaging":
        bbar = AveragedDrift.for_coefficients(c, cfg.frozen_config())
        table, summary = averaging_convergence_experiment(
            c, ladder, sim, cfg.convergence.reference, cfg.scales.delta, cfg.scales.averaging_eps, bbar, workers)
    elif kind == "controlled":
        h = cfg.control_for(c)
        table, summary = controlled_convergence_experiment(c, ladder, sim, h, cfg.control.energy_bound, workers)
    elif kind == "auxiliary":
        table, summary = auxiliary_error_experiment(c, ladder, blocks[:3], sim, None, workers)
    else:
        h = None if cfg.control.kind == "zero" else cfg.control_for(c)
        table, summary = moment_bound_experiment(c, ladder, sim, h, workers)
    _write_table(table, out / f"{kind}.csv")
    write_json({"kind": kind, **summary}, out / f"{kind}.json")
    print(table.to_string(index=False))
    print(json.dumps(summary, default=str))
    return EXIT_OK, [f"{kind}.csv", f"{kind}.json"]


def cmd_probe_assumptions(cfg: RunConfig, out: Path, workers: int):
    c = cfg.coefficients()
    sampler = ProbeSampler(seed=cfg.seed, T=cfg.grid.T, scale=cfg.probe.scale, df=cfg.probe.df)
    reports = [fn(c, c.params, sampler, cfg.probe.trials) for fn in (probe_H1, probe_H2, probe_growth_g)]
    write_json({"family": c.name, "reports": reports}, out / "probes.json")
    for r in reports:
        print(f"  {r['assumption']}: worst ratio {r['worst_ratio']:.4g}  pass={r['pass']}")
    return EXIT_OK, ["probes.json"]


COMMANDS = {
    "sample-fbm": cmd_sample_fbm,
    "simulate": cmd_simulate,
    "average": cmd_average,
    "limit-ode": cmd_limit_ode,
    "skeleton": cmd_skeleton,
    "rate": cmd_rate,
    "ldp-verify": cmd_ldp_verify,
    "convergence": cmd_convergence,
    "probe-assumptions": cmd_probe_assumptions,
}


def execute(subcommand: str, cfg: RunConfig, out: Path, workers: int, argv: list) -> int:
    if subcommand not in COMMANDS:
        raise MvfbmError(f"Unknown subcommand: {subcommand}. Choose from {list(COMMANDS)}")
    log.info("%s: config %s, seed %d, %d worker(s) -> %s", subcommand, config_hash(cfg)[:12], cfg.seed, workers, out)
    code, outputs = COMMANDS[subcommand](cfg, out, workers)
    _write_manifest(out, subcommand, argv, cfg, outputs, code)
    return code


def _replay(args: argparse.Namespace, argv: list) -> int:
    manifest = read_json(args.manifest)
    cfg = build_config(manifest["config"])
    out = _output_dir(cfg, args.output or str(Path(args.manifest).resolve().parent))
    return execute(manifest["subcommand"], cfg, out, _workers(cfg, args.threads), manifest.get("argv", argv))


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; 2 is reserved for a non-converged rate
        return EXIT_OK if e.code in (0, None) else EXIT_ERROR
    try:
        if args.subcommand == "replay":
            return _replay(args, argv)
        cfg = load_config(args.config, _overrides(args))
        return execute(args.subcommand, cfg, _output_dir(cfg, args.output), _workers(cfg, args.threads), argv)
    except MvfbmError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


def main() -> int:
    argv = sys.argv[1:]
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
