"""Experiment configuration, phantom synthesis and the end-to-end case runner."""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
import platform
import time
import warnings
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import LinearNDInterpolator

from . import __version__
from .admissibility import check_admissibility
from .fem import Mesh2D, assemble, generate_disk_mesh, write_field_csv, write_mesh
from .forward import ExcitationSpec, ParameterSet, build_source, solve_forward, transform_parameters
from .inversion import NewtonConfig, ReconstructionProblem, add_noise, run_reconstruction
from .sensitivity import MeasurementSet, observe, sigma_gram

log = logging.getLogger(__name__)

EXIT_CONVERGED = 0
EXIT_FAILURE = 1
EXIT_STOPPED = 10
EXIT_DIVERGED = 20


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# -- configuration ----------------------------------------------------------------

@dataclass
class Phantom:
    center: tuple
    radius: float
    c: float | None = None
    frak_b: float | None = None
    BA: float | None = None
    # direct overrides of the transformed values
    s: float | None = None
    b: float | None = None
    eta: float | None = None


@dataclass
class ExperimentConfig:
    name: str = "case"
    # mesh
    radius: float = 0.2
    h: float = 0.006
    sigma_arc: tuple = (0.0, 2.0 * math.pi)
    gamma: float = 1.0
    # physics
    c: float = 10.0
    frak_b: float = 0.05
    rho0: float = 1000.0
    BA: float = 0.0
    eta: float | None = None   # None: derived from BA
    phantoms: list = field(default_factory=list)
    # excitation
    T1: float = 1.0
    T2: float = 0.7
    offset: float = 1.0
    amplitude: float = 2000.0
    profile: str = "constant"
    doubled_third: bool = True
    N: int = 4
    fp_tol: float = 1e-10
    # data
    noise: float = 0.0
    seed: int = 1
    fine_data: bool = False
    fine_h: float = 0.0
    linear: bool = False
    # reconstruction
    alpha0: float = 1.0
    q: float = 0.6
    max_iters: int = 20
    cg_tol: float = 1e-8
    cg_max_iters: int = 200
    stopping: str = "fixed"
    tau: float = 6e-4
    scale_s: float | None = None
    scale_b: float | None = None
    scale_eta: float | None = None
    save_every: int = 5
    reference: str = "linear"   # "linear": eta0 = 0; "background": eta0 = background eta
    # admissibility
    adm_L: int = 20
    adm_floor: float = 1e-8
    out: str = "runs/case"

    def validate(self) -> "ExperimentConfig":
        if self.radius <= 0 or not 0 < self.h < self.radius:
            raise ValueError("mesh radius and h must satisfy 0 < h < radius")
        for i, ph in enumerate(self.phantoms):
            d = math.hypot(*ph.center)
            if d + ph.radius >= self.radius:
                raise ValueError(f"phantom {i} is not strictly inside the domain")
        if self.N < 2:
            raise ValueError("N >= 2 is required")
        self.excitations()
        if self.reference not in ("linear", "background"):
            raise ValueError(f"unknown reference {self.reference!r}")
        NewtonConfig(alpha0=self.alpha0, q=self.q, stopping=self.stopping)
        return self

    def excitations(self):
        e1 = ExcitationSpec(self.T1, self.offset, self.amplitude, "cos", self.profile)
        e2 = ExcitationSpec(self.T2, self.offset, self.amplitude, "cos", self.profile)
        e3 = e1.doubled() if self.doubled_third else e1
        return [e1, e2, e3]

    def background(self, n_nodes) -> ParameterSet:
        s, b, eta = transform_parameters(self.c, self.frak_b, self.BA, self.rho0)
        eta = float(eta) if self.eta is None else self.eta
        return ParameterSet.constant(n_nodes, float(s), float(b), eta)

    def reference_point(self, n_nodes) -> ParameterSet:
        """Background ``(s0, b0)`` with ``eta0 = 0`` unless ``reference = background``."""
        x = self.background(n_nodes)
        if self.reference == "background":
            return x
        return ParameterSet(x.s, x.b, np.zeros(n_nodes))

    def newton(self, n_nodes, delta=None) -> NewtonConfig:
        return NewtonConfig(
            alpha0=self.alpha0, q=self.q, max_iters=self.max_iters, cg_tol=self.cg_tol,
            cg_max_iters=self.cg_max_iters, delta=self.noise if delta is None else delta,
            stopping=self.stopping, tau=self.tau, x0=self.reference_point(n_nodes),
            scales=(self.scale_s, self.scale_b, self.scale_eta),
            components=("s", "b") if self.linear else ("s", "b", "eta"), N=self.N,
            fp_tol=self.fp_tol)


_SECTIONS = {
    "case": ["name", "out"],
    "mesh": ["radius", "h", "sigma_arc", "gamma"],
    "background": ["c", "frak_b", "rho0", "BA", "eta"],
    "excitation": ["T1", "T2", "offset", "amplitude", "profile", "doubled_third", "N", "fp_tol"],
    "data": ["noise", "seed", "fine_data", "fine_h", "linear"],
    "newton": ["alpha0", "q", "max_iters", "cg_tol", "cg_max_iters", "stopping", "tau",
               "scale_s", "scale_b", "scale_eta", "save_every", "reference"],
    "admissibility": ["adm_L", "adm_floor"],
}
_KEY_ALIASES = {"adm_L": "L", "adm_floor": "floor"}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _parse(name: str, text: str):
    kind = _TYPES[name]
    text = text.strip()
    if "None" in kind and text.lower() == "auto":
        return None
    if kind == "bool":
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if kind == "int":
        return int(text)
    if kind == "str":
        return text
    if kind == "tuple":
        if name == "sigma_arc" and text.lower() == "full":
            return (0.0, 2.0 * math.pi)
        return tuple(float(x) for x in text.split(","))
    return float(text)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(text)
    kw = {}
    for sec, keys in _SECTIONS.items():
        if not cp.has_section(sec):
            continue
        known = {_KEY_ALIASES.get(k, k): k for k in keys}
        for key, val in cp.items(sec):
            if key not in known:
                raise ValueError(f"unknown key {sec}.{key}")
            kw[known[key]] = _parse(known[key], val)
    phantoms = []
    for sec in cp.sections():
        if sec.startswith("phantom"):
            d = dict(cp.items(sec))
            center = tuple(float(x) for x in d.pop("center").split(","))
            radius = float(d.pop("radius"))
            extra = {}
            for k, v in d.items():
                if k not in ("c", "frak_b", "BA", "s", "b", "eta"):
                    raise ValueError(f"unknown key {sec}.{k}")
                extra[k] = float(v)
            phantoms.append(Phantom(center, radius, **extra))
        elif sec not in _SECTIONS:
            raise ValueError(f"unknown section [{sec}]")
    kw["phantoms"] = phantoms
    return ExperimentConfig(**kw).validate()


def serialize_config(cfg: ExperimentConfig) -> str:
    out = io.StringIO()
    for sec, keys in _SECTIONS.items():
        out.write(f"[{sec}]\n")
        for k in keys:
            out.write(f"{_KEY_ALIASES.get(k, k)} = {_fmt(getattr(cfg, k))}\n")
        out.write("\n")
    for i, ph in enumerate(cfg.phantoms, start=1):
        out.write(f"[phantom.{i}]\n")
        out.write(f"center = {_fmt(tuple(float(x) for x in ph.center))}\n")
        out.write(f"radius = {_fmt(float(ph.radius))}\n")
        for k in ("c", "frak_b", "BA", "s", "b", "eta"):
            v = getattr(ph, k)
            if v is not None:
                out.write(f"{k} = {_fmt(float(v))}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def builtin_config(name: str) -> ExperimentConfig:
    """One of the configurations shipped with the package (e.g. ``"case1"``)."""
    fname = name if name.endswith(".cfg") else f"{name}.cfg"
    return parse_config(resources.files("westervelt.configs").joinpath(fname).read_text())


def builtin_config_names():
    return sorted(p.name[:-4] for p in resources.files("westervelt.configs").iterdir()
                  if p.name.endswith(".cfg"))


# -- phantoms ---------------------------------------------------------------------

def phantom_values(cfg: ExperimentConfig, ph: Phantom):
    c = cfg.c if ph.c is None else ph.c
    fb = cfg.frak_b if ph.frak_b is None else ph.frak_b
    s, b, eta = transform_parameters(c, fb, ph.BA if ph.BA is not None else 0.0, cfg.rho0)
    if ph.BA is None:
        eta = cfg.background(1).eta[0]
    s = ph.s if ph.s is not None else float(s)
    b = ph.b if ph.b is not None else float(b)
    eta = ph.eta if ph.eta is not None else float(eta)
    return s, b, eta


def synthesize_phantom(cfg: ExperimentConfig, mesh: Mesh2D) -> ParameterSet:
    """Ground-truth nodal fields; overlapping phantoms: the later one wins."""
    x = cfg.background(mesh.n_nodes)
    s, b, eta = x.s.copy(), x.b.copy(), x.eta.copy()
    owner = np.full(mesh.n_nodes, -1)
    for i, ph in enumerate(cfg.phantoms):
        inside = np.linalg.norm(mesh.nodes - np.asarray(ph.center), axis=1) <= ph.radius
        if np.any(owner[inside] >= 0):
            warnings.warn(f"phantom {i} overlaps an earlier phantom; later values win",
                          RuntimeWarning, stacklevel=2)
        owner[inside] = i
        ps, pb, pe = phantom_values(cfg, ph)
        s[inside], b[inside], eta[inside] = ps, pb, pe
    return ParameterSet(s, b, eta)


# -- measurement files ---------------------------------------------------------------

def write_measurements(path, mesh: Mesh2D, traces, nodes) -> None:
    traces = np.asarray(traces)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        hdr = ["node_id", "x", "y"]
        for m in range(traces.shape[0]):
            hdr += [f"re_m{m}", f"im_m{m}"]
        w.writerow(hdr)
        for k, i in enumerate(nodes):
            row = [int(i), repr(float(mesh.nodes[i, 0])), repr(float(mesh.nodes[i, 1]))]
            for m in range(traces.shape[0]):
                row += [repr(float(traces[m, k].real)), repr(float(traces[m, k].imag))]
            w.writerow(row)


def read_measurements(path):
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    body = np.array(rows[1:], dtype=float)
    nodes = body[:, 0].astype(int)
    n_h = (len(rows[0]) - 3) // 2
    tr = body[:, 3::2][:, :n_h] + 1j * body[:, 4::2][:, :n_h]
    return nodes, tr.T.copy()


def write_parameters(path, mesh: Mesh2D, params: ParameterSet) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "x", "y", "s", "b", "eta"])
        for i, (x, y) in enumerate(mesh.nodes):
            w.writerow([i, repr(float(x)), repr(float(y)), repr(float(params.s[i])),
                        repr(float(params.b[i])), repr(float(params.eta[i]))])


def read_parameters(path):
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    body = np.array(rows[1:], dtype=float)
    return body[:, 1:3], ParameterSet(body[:, 3], body[:, 4], body[:, 5])


# -- data synthesis ---------------------------------------------------------------------

def _interp_boundary(fine: Mesh2D, fine_traces, coarse: Mesh2D):
    """Periodic interpolation in the polar angle from fine to coarse boundary nodes."""
    fb = fine.boundary_nodes
    th_f = np.arctan2(fine.nodes[fb, 1], fine.nodes[fb, 0])
    order = np.argsort(th_f)
    th_f = th_f[order]
    th_c = np.arctan2(coarse.nodes[coarse.sigma_nodes, 1], coarse.nodes[coarse.sigma_nodes, 0])
    out = []
    for tr in fine_traces:
        full = np.zeros((tr.shape[0], fine.n_nodes), dtype=complex)
        full[:, fine.sigma_nodes] = tr
        vals = full[:, fb][:, order]
        res = np.empty((tr.shape[0], len(th_c)), dtype=complex)
        for m in range(tr.shape[0]):
            res[m] = (np.interp(th_c, th_f, vals[m].real, period=2 * np.pi)
                      + 1j * np.interp(th_c, th_f, vals[m].imag, period=2 * np.pi))
        out.append(res)
    return out


def synthesize_data(cfg: ExperimentConfig, mesh: Mesh2D, ops, truth: ParameterSet | None = None,
                    fine_data: bool | None = None) -> MeasurementSet:
    """Noiseless traces of the three experiments at the ground truth."""
    fine_data = cfg.fine_data if fine_data is None else fine_data
    specs = cfg.excitations()
    if fine_data:
        fh = cfg.fine_h if cfg.fine_h > 0 else cfg.h / 2
        fmesh = generate_disk_mesh(cfg.radius, fh, cfg.sigma_arc)
        fops = assemble(fmesh, cfg.gamma)
        ftruth = synthesize_phantom(cfg, fmesh)
        if cfg.linear:
            ftruth = ParameterSet(ftruth.s, ftruth.b, np.zeros(fmesh.n_nodes))
        states = [solve_forward(ftruth, build_source(sp, fmesh, cfg.N, cfg.gamma), cfg.N, sp.omega,
                                fops, fp_tol=cfg.fp_tol).u for sp in specs]
        fmeas = observe(states, fmesh, fops)
        traces = _interp_boundary(fmesh, fmeas.traces, mesh)
        return MeasurementSet(traces, [sp.omega for sp in specs], mesh.sigma_nodes, sigma_gram(ops))
    if truth is None:
        truth = synthesize_phantom(cfg, mesh)
    if cfg.linear:
        truth = ParameterSet(truth.s, truth.b, np.zeros(mesh.n_nodes))
    states = [solve_forward(truth, build_source(sp, mesh, cfg.N, cfg.gamma), cfg.N, sp.omega, ops,
                            fp_tol=cfg.fp_tol).u for sp in specs]
    return observe(states, mesh, ops)


# -- pipeline ------------------------------------------------------------------------------

def _versions():
    import mpmath
    import scipy
    return {"westervelt": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "mpmath": mpmath.__version__}


def run_admissibility(cfg: ExperimentConfig):
    e1, e2, e3 = cfg.excitations()
    x = cfg.background(1)
    return check_admissibility(e1, e2, e3, float(x.b[0]), float(x.s[0]), cfg.gamma, cfg.radius,
                               cfg.adm_L, cfg.adm_floor, sigma_arc=cfg.sigma_arc)


def run_case(cfg: ExperimentConfig, out_dir=None, override_admissibility: bool = False,
             seed: int | None = None, fine_data: bool | None = None):
    """Synthesize data, reconstruct and write all artifacts; returns ``(status, out_dir)``."""
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    fine = cfg.fine_data if fine_data is None else fine_data
    t0 = time.perf_counter()
    manifest = {"config": serialize_config(cfg), "versions": _versions(), "seed": seed,
                "fine_data": fine, "override_admissibility": override_admissibility}

    def stage(name, fn):
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - report the failing stage
            manifest["failed_stage"] = name
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
            raise StageError(name, str(exc)) from exc

    mesh = stage("mesh", lambda: generate_disk_mesh(cfg.radius, cfg.h, cfg.sigma_arc))
    write_mesh(mesh, out / "mesh.txt")
    ops = assemble(mesh, cfg.gamma)
    manifest["n_nodes"] = int(mesh.n_nodes)

    report = stage("admissibility", lambda: run_admissibility(cfg))
    report.to_csv(out / "admissibility.csv")
    (out / "admissibility.txt").write_text(report.to_text() + "\n")
    manifest["admissibility_passed"] = report.passed
    if not report.passed and not override_admissibility:
        manifest["failed_stage"] = "admissibility"
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        raise StageError("admissibility", "source conditions fail; use --override-admissibility")

    truth = stage("phantom", lambda: synthesize_phantom(cfg, mesh))
    write_parameters(out / "truth.csv", mesh, truth)

    clean = stage("data", lambda: synthesize_data(cfg, mesh, ops, truth, fine))
    for j, tr in enumerate(clean.traces, start=1):
        write_measurements(out / f"measurements_j{j}.csv", mesh, tr, clean.nodes)
    noisy = add_noise(clean, cfg.noise, seed)
    for j, tr in enumerate(noisy.traces, start=1):
        write_measurements(out / f"measurements_noisy_j{j}.csv", mesh, tr, noisy.nodes)
    manifest["delta_abs"] = noisy.delta

    ncfg = cfg.newton(mesh.n_nodes, delta=cfg.noise)

    def save(n, params, hist):
        if cfg.save_every and (n + 1) % cfg.save_every == 0:
            write_parameters(out / f"recon_iter{n + 1:03d}.csv", mesh, params)

    def reconstruct():
        problem = ReconstructionProblem(ops, cfg.excitations(), cfg.N, ncfg.x0, noisy,
                                        ncfg.scales, ncfg.components, cfg.fp_tol)
        manifest["scales"] = problem.scales.tolist()
        return run_reconstruction(ncfg, noisy, cfg.excitations(), ops, callback=save,
                                  problem=problem)

    params, hist = stage("inversion", reconstruct)
    write_parameters(out / "reconstruction_final.csv", mesh, params)
    hist.to_csv(out / "convergence.csv")
    manifest.update(status=hist.status, iterations=len(hist), stop_index=hist.stop_index,
                    tau=ncfg.tau, runtime_s=round(time.perf_counter() - t0, 3))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return hist.status, out


def status_exit_code(status: str) -> int:
    return {"converged": EXIT_CONVERGED, "stopped": EXIT_STOPPED,
            "diverged": EXIT_DIVERGED}.get(status, EXIT_FAILURE)


# -- plot data ---------------------------------------------------------------------------

def read_convergence(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["J"]) for r in rows]


def raster(xy, values, n: int = 101, radius: float | None = None):
    """Linear interpolation of nodal values onto an ``n x n`` grid (inside points only)."""
    xy = np.asarray(xy, dtype=float)
    values = np.asarray(values, dtype=float)
    r = radius if radius is not None else float(np.max(np.linalg.norm(xy, axis=1)))
    g = np.linspace(-r, r, n)
    X, Y = np.meshgrid(g, g)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    vals = LinearNDInterpolator(xy, values)(pts)
    keep = np.isfinite(vals)
    return pts[keep], vals[keep]


def export_plots_data(run_dir, linear_run_dir=None, out_dir=None, n: int = 101):
    """Write ``jcurve.csv`` and ``heatmap_<field>.csv`` for a finished run."""
    run = Path(run_dir)
    conv = run / "convergence.csv"
    final = run / "reconstruction_final.csv"
    if not conv.exists() or not final.exists():
        raise FileNotFoundError(f"run artifacts missing in {run}")
    out = Path(out_dir) if out_dir else run
    out.mkdir(parents=True, exist_ok=True)
    J = read_convergence(conv)
    J_lin = read_convergence(Path(linear_run_dir) / "convergence.csv") if linear_run_dir else None
    with (out / "jcurve.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "J_nonlinear"] + (["J_linear"] if J_lin is not None else []))
        for i, v in enumerate(J):
            row = [i, repr(v)]
            if J_lin is not None:
                row.append(repr(J_lin[i]) if i < len(J_lin) else "")
            w.writerow(row)
    xy, params = read_parameters(final)
    written = [out / "jcurve.csv"]
    for name in ("s", "b", "eta"):
        pts, vals = raster(xy, getattr(params, name), n)
        p = out / f"heatmap_{name}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "value"])
            for (x, y), v in zip(pts, vals):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
        written.append(p)
    return written


__all__ = [
    "ExperimentConfig", "Phantom", "parse_config", "serialize_config", "load_config",
    "builtin_config", "builtin_config_names", "phantom_values", "synthesize_phantom", "synthesize_data",
    "run_case", "run_admissibility", "export_plots_data", "raster", "status_exit_code",
    "write_measurements", "read_measurements", "write_parameters", "read_parameters",
    "StageError",
]
