"""Command line entry point: ``westervelt <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .fem import assemble, generate_disk_mesh, write_field_csv, write_mesh
from .forward import build_source, solve_forward
from .inversion import run_reconstruction
from .sensitivity import MeasurementSet, sigma_gram

log = logging.getLogger("westervelt")


def _config(args) -> ex.ExperimentConfig:
    ref = args.config
    if ref is None:
        raise ValueError("--config is required")
    cfg = ex.load_config(ref) if Path(ref).exists() else ex.builtin_config(ref)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "fine_data", False):
        cfg.fine_data = True
    return cfg


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mesh(cfg):
    mesh = generate_disk_mesh(cfg.radius, cfg.h, cfg.sigma_arc)
    return mesh, assemble(mesh, cfg.gamma)


def cmd_mesh(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    mesh, _ = _mesh(cfg)
    write_mesh(mesh, out / "mesh.txt")
    print(f"nodes: {mesh.n_nodes}\ntriangles: {len(mesh.triangles)}\n"
          f"sigma_nodes: {len(mesh.sigma_nodes)}\nfile: {out / 'mesh.txt'}")
    return 0


def cmd_forward(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    mesh, ops = _mesh(cfg)
    params = ex.synthesize_phantom(cfg, mesh) if args.at == "truth" else cfg.background(mesh.n_nodes)
    for j, sp in enumerate(cfg.excitations(), start=1):
        sol = solve_forward(params, build_source(sp, mesh, cfg.N, cfg.gamma), cfg.N, sp.omega, ops,
                            fp_tol=cfg.fp_tol)
        write_field_csv(out / f"forward_j{j}.csv", mesh, sol.u.coeffs)
        with (out / f"forward_j{j}_residuals.csv").open("w") as fh:
            fh.write("iter,residual\n")
            for i, r in enumerate(sol.history):
                fh.write(f"{i},{r!r}\n")
        print(f"experiment_{j}_fp_iterations: {len(sol.history)}")
        print(f"experiment_{j}_degeneracy_margin: {sol.margin:.6e}")
    return 0


def cmd_admissibility(args) -> int:
    cfg = _config(args)
    if args.T1 is not None:
        cfg.T1 = args.T1
    if args.T2 is not None:
        cfg.T2 = args.T2
    report = ex.run_admissibility(cfg)
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.to_csv(out / "admissibility.csv")
    return 0 if report.passed else ex.EXIT_FAILURE


def cmd_verify(args) -> int:
    from . import verification as vf
    cfg = _config(args)
    if args.h is not None:
        cfg.h = args.h
    mesh, ops = _mesh(cfg)
    rng = np.random.default_rng(args.seed or 0)
    report = {"nodes": mesh.n_nodes}
    suites = args.suite or ["adjoint", "taylor", "range"]
    x = vf.random_interior_point(mesh, rng)
    specs = cfg.excitations()
    if "adjoint" in suites:
        report.update(vf.adjoint_suite(ops, x, specs, cfg.N, n_pairs=args.pairs, seed=args.seed or 0))
    if "taylor" in suites:
        report.update(vf.taylor_suite(ops, x, specs, cfg.N, seed=args.seed or 0))
    if "range" in suites:
        report.update(vf.range_suite(ops, n_pairs=min(args.pairs, 20), seed=args.seed or 0))
    print(vf.format_report(report))
    return 0


def _load_data(cfg, ops, data_dir: Path, noisy: bool) -> MeasurementSet:
    stem = "measurements_noisy_j" if noisy else "measurements_j"
    traces = []
    for j in (1, 2, 3):
        path = data_dir / f"{stem}{j}.csv"
        nodes, tr = ex.read_measurements(path)
        if not np.array_equal(nodes, ops.mesh.sigma_nodes):
            raise ValueError(f"{path}: observation nodes do not match the configured mesh")
        traces.append(tr)
    return MeasurementSet(traces, [sp.omega for sp in cfg.excitations()], ops.mesh.sigma_nodes,
                          sigma_gram(ops))


def cmd_invert(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    mesh, ops = _mesh(cfg)
    data = _load_data(cfg, ops, Path(args.data), noisy=not args.clean)
    data = data.copy(delta=cfg.noise * data.norm())
    ncfg = cfg.newton(mesh.n_nodes)
    params, hist = run_reconstruction(ncfg, data, cfg.excitations(), ops)
    ex.write_parameters(out / "reconstruction_final.csv", mesh, params)
    hist.to_csv(out / "convergence.csv")
    print(f"status: {hist.status}\niterations: {len(hist)}\nfinal_J: {hist.J[-1]:.6e}")
    return ex.status_exit_code(hist.status)


def cmd_run_case(args) -> int:
    cfg = _config(args)
    status, out = ex.run_case(cfg, args.out, override_admissibility=args.override_admissibility,
                              seed=args.seed, fine_data=args.fine_data or None)
    print(f"status: {status}\nout: {out}")
    return ex.status_exit_code(status)


def cmd_export(args) -> int:
    files = ex.export_plots_data(args.run, args.linear_run, args.out, n=args.raster)
    for f in files:
        print(f"wrote: {f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="westervelt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="config file or name of a shipped config (e.g. case1)")
        sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int)
        return sp

    common(sub.add_parser("mesh", help="generate and write the disk mesh"), seed=False)
    sp = common(sub.add_parser("forward", help="solve the three forward problems"), seed=False)
    sp.add_argument("--at", choices=("truth", "background"), default="truth")
    sp = common(sub.add_parser("admissibility", help="check the source conditions"), seed=False)
    sp.add_argument("--T1", type=float)
    sp.add_argument("--T2", type=float)
    sp = common(sub.add_parser("verify", help="adjoint, Taylor and range-invariance suites"))
    sp.add_argument("--suite", action="append", choices=("adjoint", "taylor", "range"))
    sp.add_argument("--pairs", type=int, default=50)
    sp.add_argument("--h", type=float, default=0.03, help="mesh size for the suites")
    sp = common(sub.add_parser("invert", help="reconstruct from measurement files"))
    sp.add_argument("--data", required=True, help="directory with measurements_*_j{1,2,3}.csv")
    sp.add_argument("--clean", action="store_true", help="use the noiseless measurement files")
    sp = common(sub.add_parser("run-case", help="full pipeline for one case"))
    sp.add_argument("--override-admissibility", action="store_true")
    sp.add_argument("--fine-data", action="store_true", help="synthesize data on a finer mesh")
    sp = sub.add_parser("export", help="plot-ready CSVs from a finished run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--linear-run")
    sp.add_argument("--out")
    sp.add_argument("--raster", type=int, default=101)
    return p


_COMMANDS = {"mesh": cmd_mesh, "forward": cmd_forward, "admissibility": cmd_admissibility,
             "verify": cmd_verify, "invert": cmd_invert, "run-case": cmd_run_case,
             "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ex.StageError as exc:
        print(f"error: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return ex.EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001 - top-level stage report
        print(f"error: stage {args.command} failed: {exc}", file=sys.stderr)
        return ex.EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
