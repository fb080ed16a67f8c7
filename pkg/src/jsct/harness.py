"""Experiment runner: config loading, reference optimum, CSV and image output.

An experiment builds one synthetic problem, runs every requested scheme for
every subset count, finds a reference optimum and writes, per run, a
convergence CSV and the final image.  Configuration is an INI file::

    [geometry]
    rows = 64
    cols = 64
    pixel_size = 1.0
    views = 90
    detectors = 96
    det_spacing = 1.0
    ; optional JSCT-H1 system-matrix cache, built on first use
    cache = H64.bin

    [data]
    phantom = blocks
    I0 = 1e5
    ; optional: measured data written by ``jsct simulate``
    sinogram = sino.bin

    [model]
    lambda = 20
    delta = 1e-3
    connectivity = 4

    [solver]
    method = fixed_trust_region
    grad_tol = 1e-9
    max_iters = 50

    [experiment]
    algorithms = full_js, os_js, sa_js, osa_js, full_gd, os_gd, sa_gd
    subsets = 8, 64
    max_passes = 20
    seed = 1
    x0 = 0.001
    reference_passes = 2000
    output_dir = results
    reproducible = false
    window = 0, 0.12

    [reconstruct]
    algorithm = sa_js
    ; defaults to min(64, views)
    subsets = 64
    max_passes = 20

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import platform
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .algorithms import (
    DEFAULT_X0,
    FULL_SCHEMES,
    SCHEMES,
    AlgorithmConfig,
    ReconstructionError,
    run,
)
from .model import (
    NeighborhoodSystem,
    PoissonData,
    ReconstructionProblem,
    RegularizerParams,
    lipschitz_constant,
)
from .projector import (
    Geometry,
    build_system_matrix,
    load_system_matrix,
    partition_rays,
    save_system_matrix,
)
from .simulate import make_phantom, simulate_counts
from .solver1d import Solver1DConfig

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ReferencePolicy",
    "ConvergenceRecord",
    "ReferenceOptimum",
    "load_config",
    "build_problem",
    "compute_reference_optimum",
    "normalized_errors",
    "run_experiment",
    "reconstruct",
    "render_image",
    "write_raw",
    "read_raw",
    "write_sinogram",
    "read_sinogram",
    "write_csv",
    "read_csv",
    "CSV_HEADER",
]

CSV_HEADER = ("algorithm", "pass", "objective", "normalized_error", "wall_seconds")
NEGATIVE_ERROR_SLACK = 1e-9
TAIL_TOLERANCE = 1e-8


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ReferencePolicy:
    max_ref_passes: int = 2000
    tail_tolerance: float = TAIL_TOLERANCE


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: Geometry = field(default_factory=lambda: Geometry(64, 64, 1.0, 90, 96, 1.0))
    phantom: str = "blocks"
    I0: float = 1e5
    seed: int = 1
    algorithms: tuple = SCHEMES
    subset_counts: tuple = (8, 64)
    max_passes: float = 20.0
    lam: float = 20.0
    delta: float = 1e-3
    connectivity: int = 4
    x0: float = DEFAULT_X0
    solver: Solver1DConfig = field(default_factory=Solver1DConfig)
    reference: ReferencePolicy = field(default_factory=ReferencePolicy)
    output_dir: Path = Path("results")
    reproducible: bool = False
    window: tuple | None = None
    matrix_cache: Path | None = None
    sinogram: Path | None = None
    recon_algorithm: str = "sa_js"
    recon_subsets: int | None = None  # min(64, views) when unset
    recon_passes: float = 20.0

    def __post_init__(self):
        if not self.algorithms:
            raise ConfigError("at least one algorithm is required")
        bad = [a for a in self.algorithms if a not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown algorithms {bad}; expected a subset of {list(SCHEMES)}")
        if self.recon_algorithm not in SCHEMES:
            raise ConfigError(f"unknown reconstruct algorithm {self.recon_algorithm!r}")
        if self.recon_subsets is None:
            object.__setattr__(self, "recon_subsets", min(64, self.geometry.n_views))
        if not self.subset_counts or any(int(b) < 1 for b in self.subset_counts):
            raise ConfigError("subset counts must be >= 1")
        for b in (*self.subset_counts, self.recon_subsets):
            if int(b) > self.geometry.n_views:
                raise ConfigError(f"{b} subsets exceed the {self.geometry.n_views} views")
        if not self.I0 > 0:
            raise ConfigError("I0 must be positive")
        if not self.max_passes > 0 or not self.recon_passes > 0:
            raise ConfigError("max_passes must be positive")
        if self.reference.max_ref_passes < 1:
            raise ConfigError("reference_passes must be >= 1")
        if self.window is not None and not self.window[0] < self.window[1]:
            raise ConfigError("window needs lo < hi")
        if self.lam < 0 or not self.delta > 0:
            raise ConfigError("need lambda >= 0 and delta > 0")

    def runs(self):
        """``(scheme, n_subsets)`` pairs in execution order; full schemes run once."""
        out = []
        for s in self.algorithms:
            for b in ([1] if s in FULL_SCHEMES else self.subset_counts):
                if (s, int(b)) not in out:
                    out.append((s, int(b)))
        return out

    def algorithm_config(self, scheme: str, n_subsets: int, max_passes=None) -> AlgorithmConfig:
        return AlgorithmConfig(scheme, n_subsets,
                               max_passes=self.max_passes if max_passes is None else max_passes,
                               seed=self.algorithm_seed, x0=self.x0, solver=self.solver,
                               reproducible=self.reproducible)

    @property
    def noise_seed(self) -> int:
        return int(np.random.SeedSequence(self.seed).generate_state(2)[0])

    @property
    def algorithm_seed(self) -> int:
        return int(np.random.SeedSequence(self.seed).generate_state(2)[1])

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("output_dir", "matrix_cache", "sinogram"):
            d[k] = None if d[k] is None else str(d[k])
        return d


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def load_config(path, **overrides) -> ExperimentConfig:
    """Parse an INI experiment file; keyword overrides replace parsed fields."""
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as f:
            cp.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known = {"geometry", "data", "model", "solver", "experiment", "reconstruct"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"{path}: unknown sections {sorted(extra)}")
    base = path.parent

    def rel(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    try:
        g = cp["geometry"] if cp.has_section("geometry") else {}
        geom = Geometry(
            int(g.get("rows", 64)), int(g.get("cols", 64)), float(g.get("pixel_size", 1.0)),
            int(g.get("views", 90)), int(g.get("detectors", 96)),
            float(g.get("det_spacing", 1.0)))
        kw = {"geometry": geom}
        if g.get("cache"):
            kw["matrix_cache"] = rel(g["cache"])
        if cp.has_section("data"):
            s = cp["data"]
            kw["phantom"] = s.get("phantom", "blocks")
            kw["I0"] = s.getfloat("I0", 1e5)
            if s.get("sinogram"):
                kw["sinogram"] = rel(s["sinogram"])
        if cp.has_section("model"):
            s = cp["model"]
            kw["lam"] = s.getfloat("lambda", 20.0)
            kw["delta"] = s.getfloat("delta", 1e-3)
            kw["connectivity"] = s.getint("connectivity", 4)
        if cp.has_section("solver"):
            s = cp["solver"]
            kw["solver"] = Solver1DConfig(
                method=s.get("method", "fixed_trust_region"),
                grad_tol=s.getfloat("grad_tol", 1e-9),
                max_iters=s.getint("max_iters", 50),
                tr_initial_radius=s.getfloat("tr_initial_radius", None),
                tr_fixed_radius=s.getfloat("tr_fixed_radius", None),
                tr_eta=s.getfloat("tr_eta", 0.1),
                tr_expand=s.getfloat("tr_expand", 2.0),
                tr_shrink=s.getfloat("tr_shrink", 0.25))
        if cp.has_section("experiment"):
            s = cp["experiment"]
            if "algorithms" in s:
                kw["algorithms"] = tuple(a.strip() for a in s["algorithms"].split(",") if a.strip())
            if "subsets" in s:
                kw["subset_counts"] = tuple(int(v) for v in _floats(s["subsets"]))
            kw["max_passes"] = s.getfloat("max_passes", 20.0)
            kw["seed"] = s.getint("seed", 1)
            kw["x0"] = s.getfloat("x0", DEFAULT_X0)
            kw["reference"] = ReferencePolicy(s.getint("reference_passes", 2000))
            kw["output_dir"] = rel(s.get("output_dir", "results"))
            kw["reproducible"] = s.getboolean("reproducible", False)
            if s.get("window"):
                kw["window"] = _floats(s["window"])
        if cp.has_section("reconstruct"):
            s = cp["reconstruct"]
            kw["recon_algorithm"] = s.get("algorithm", "sa_js")
            kw["recon_subsets"] = s.getint("subsets", None)
            kw["recon_passes"] = s.getfloat("max_passes", 20.0)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    kw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# --- problem construction ---------------------------------------------------

def system_matrix(cfg: ExperimentConfig):
    """Build ``H`` for the configured geometry, going through the cache file if set."""
    path = cfg.matrix_cache
    if path is not None and Path(path).exists():
        H = load_system_matrix(path)
        if H.shape != (cfg.geometry.n_rays, cfg.geometry.n_voxels):
            raise ConfigError(f"cached matrix {path} has shape {H.shape}, "
                              f"geometry needs {(cfg.geometry.n_rays, cfg.geometry.n_voxels)}")
        return H
    H = build_system_matrix(cfg.geometry)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_system_matrix(H, path)
    return H


def build_problem(cfg: ExperimentConfig, H=None, data: PoissonData | None = None):
    """``(problem, phantom_image)``; data are simulated unless given or configured."""
    H = system_matrix(cfg) if H is None else H
    phantom = make_phantom(cfg.phantom, cfg.geometry)
    if data is None:
        if cfg.sinogram is not None:
            data, _ = read_sinogram(cfg.sinogram)
        else:
            data = simulate_counts(H, phantom.x, cfg.I0, seed=cfg.noise_seed)
    if data.m != H.m:
        raise ConfigError(f"data have {data.m} rays, geometry has {H.m}")
    nbhd = NeighborhoodSystem.grid(cfg.geometry.image_shape, cfg.connectivity)
    problem = ReconstructionProblem(H, data, nbhd, RegularizerParams(cfg.lam, cfg.delta),
                                    cfg.geometry)
    return problem, phantom.image


# --- reference optimum --------------------------------------------------------

@dataclass
class ReferenceOptimum:
    x: np.ndarray
    phi: float
    source: str
    tail_drop: float
    tail_flat: bool


def compute_reference_optimum(problem, policy: ReferencePolicy = ReferencePolicy(),
                              candidates=(), x0=DEFAULT_X0, solver=None) -> ReferenceOptimum:
    """Best image seen over a long Full-JS run and the given candidates.

    ``candidates`` holds ``(name, x, phi)`` triples, typically every
    iterate already recorded by an experiment.  A warning is issued when
    the Full-JS objective still drops by more than
    ``policy.tail_tolerance`` (relative) over its last pass.
    """
    cfg = AlgorithmConfig("full_js", 1, max_passes=policy.max_ref_passes, x0=x0,
                          solver=solver or Solver1DConfig())
    best = {"phi": math.inf, "x": None, "source": None}
    last = []

    def keep(p):
        last.append(p.objective)
        del last[:-2]
        if p.objective < best["phi"]:
            best.update(phi=p.objective, x=p.x, source=f"full_js reference pass {p.passes:g}")

    res = run(problem, cfg, callback=keep, keep_history=False)
    drop = (last[0] - last[1]) / abs(last[1]) if len(last) == 2 else 0.0
    flat = drop <= policy.tail_tolerance
    if not flat:
        warnings.warn(f"reference run still descending: last-pass drop {drop:.3e} "
                      f"after {res.passes:g} passes", RuntimeWarning, stacklevel=2)
    for name, x, phi in candidates:
        if phi < best["phi"]:
            best.update(phi=phi, x=x, source=name)
    return ReferenceOptimum(np.array(best["x"]), float(best["phi"]), best["source"],
                            float(drop), bool(flat))


def normalized_errors(objectives, phi_star: float) -> np.ndarray:
    e = (np.asarray(objectives, dtype=np.float64) - phi_star) / abs(phi_star)
    if np.any(e < -NEGATIVE_ERROR_SLACK):
        raise ReconstructionError(
            f"objective {float(np.min(objectives))!r} undercuts the reference optimum "
            f"{phi_star!r}; the reference is not an optimum")
    return e


# --- experiment ---------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceRecord:
    algorithm: str
    passes: float
    objective: float
    normalized_error: float
    wall_seconds: float


def run_id(scheme: str, n_subsets: int) -> str:
    return f"{scheme}_B{n_subsets}"


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.algorithm, _fmt(r.passes), _fmt(r.objective),
                        _fmt(r.normalized_error), _fmt(r.wall_seconds)])


def read_csv(path) -> list[ConvergenceRecord]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[:1]}")
    return [ConvergenceRecord(r[0], *map(float, r[1:])) for r in rows[1:]]


def _window(cfg, truth):
    if cfg.window is not None:
        return tuple(cfg.window)
    hi = float(np.max(truth))
    return (0.0, hi if hi > 0 else 1.0)


def run_experiment(cfg: ExperimentConfig, problem=None, truth=None) -> dict:
    """Run every configured scheme, then write CSVs, images and ``metadata.json``.

    A scheme that aborts is recorded in the metadata together with the
    iterates it produced so far; the remaining schemes still run.  Returns
    the metadata dictionary.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_setup = time.perf_counter()
    if problem is None:
        problem, truth = build_problem(cfg)
    needs_L = any(s.endswith("_gd") for s in cfg.algorithms)
    L = lipschitz_constant(problem.H, problem.data, problem.nbhd, problem.reg) if needs_L else None
    partitions = {}
    setup_seconds = time.perf_counter() - t_setup

    runs, aborted, diagnostics, timings = {}, {}, {}, {}
    for scheme, B in cfg.runs():
        name = run_id(scheme, B)
        if B not in partitions:
            partitions[B] = partition_rays(cfg.geometry, problem.H, problem.data.d, B)
        history = []
        logger.info("running %s", name)
        t0 = time.perf_counter()
        try:
            res = run(problem, cfg.algorithm_config(scheme, B), history.append,
                      partition=partitions[B], lipschitz=L, keep_history=False)
            diagnostics[name] = res.diagnostics
        except (ReconstructionError, FloatingPointError, ValueError) as exc:
            logger.warning("%s aborted: %s", name, exc)
            aborted[name] = str(exc)
        timings[name] = time.perf_counter() - t0
        runs[name] = history

    candidates = [(f"{name} pass {p.passes:g}", p.x, p.objective)
                  for name, hist in runs.items() for p in hist]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t0 = time.perf_counter()
        ref = compute_reference_optimum(problem, cfg.reference, candidates, cfg.x0, cfg.solver)
        timings["reference"] = time.perf_counter() - t0
    ref_warnings = [str(w.message) for w in caught]
    for msg in ref_warnings:
        logger.warning(msg)

    window = _window(cfg, truth if truth is not None else ref.x)
    files = {}
    for name, hist in runs.items():
        if not hist:
            continue
        errs = normalized_errors([p.objective for p in hist], ref.phi)
        records = [ConvergenceRecord(name, p.passes, p.objective, e,
                                     0.0 if cfg.reproducible else p.wall_seconds)
                   for p, e in zip(hist, errs)]
        write_csv(out / f"{name}.csv", records)
        img = hist[-1].x.reshape(cfg.geometry.image_shape)
        render_image(img, out / f"{name}.pgm", window, cfg.geometry.pixel_size)
        files[name] = {"csv": f"{name}.csv", "image": f"{name}.pgm",
                       "final_pass": hist[-1].passes,
                       "final_normalized_error": float(errs[-1])}
    render_image(ref.x.reshape(cfg.geometry.image_shape), out / "reference.pgm", window,
                 cfg.geometry.pixel_size)
    if truth is not None:
        render_image(np.asarray(truth).reshape(cfg.geometry.image_shape), out / "phantom.pgm",
                     window, cfg.geometry.pixel_size)

    meta = {
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "config": cfg.to_dict(),
        "seeds": {"seed": cfg.seed, "noise": cfg.noise_seed, "algorithm": cfg.algorithm_seed},
        "problem": {"rays": problem.m, "voxels": problem.n, "lipschitz": L},
        "reference": {"phi": ref.phi, "source": ref.source, "tail_drop": ref.tail_drop,
                      "tail_flat": ref.tail_flat, "warnings": ref_warnings},
        "runs": files,
        "aborted": aborted,
        "diagnostics": diagnostics,
        "window": list(window),
    }
    if not cfg.reproducible:
        meta["timings"] = {"setup": setup_seconds, **timings}
    with open(out / "metadata.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return meta


def reconstruct(cfg: ExperimentConfig, data: PoissonData):
    """Reconstruct measured ``data`` with the ``[reconstruct]`` settings."""
    problem, _ = build_problem(cfg, data=data)
    acfg = cfg.algorithm_config(cfg.recon_algorithm, cfg.recon_subsets, cfg.recon_passes)
    return run(problem, acfg, keep_history=False)


# --- image and sinogram files -------------------------------------------------

def _sidecar(path) -> Path:
    return Path(str(path) + ".txt")


def write_raw(x, path, pixel_size: float = 1.0, units: str = "mm^-1") -> None:
    """Raw float32 little-endian dump plus a ``key = value`` text sidecar."""
    x = np.asarray(x)
    arr = x.reshape(x.shape if x.ndim > 1 else (1, -1)).astype("<f4")
    rows, cols = arr.shape[-2:]
    slices = int(np.prod(arr.shape[:-2], dtype=int)) if arr.ndim > 2 else 1
    arr.tofile(path)
    lines = ["dtype = float32", "byte_order = little", f"rows = {rows}", f"cols = {cols}",
             f"slices = {slices}", f"pixel_size = {pixel_size!r}", "pixel_size_units = mm",
             f"units = {units}"]
    _sidecar(path).write_text("\n".join(lines) + "\n")


def _read_sidecar(path) -> dict:
    meta = {}
    for line in _sidecar(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def read_raw(path) -> np.ndarray:
    meta = _read_sidecar(path)
    if meta.get("dtype") != "float32" or meta.get("byte_order") != "little":
        raise ValueError(f"{path}: unsupported raw layout {meta}")
    shape = (int(meta["rows"]), int(meta["cols"]))
    if int(meta.get("slices", 1)) > 1:
        shape = (int(meta["slices"]),) + shape
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != math.prod(shape):
        raise ValueError(f"{path}: {arr.size} values, sidecar says {shape}")
    return arr.reshape(shape)


def to_gray(x, window) -> np.ndarray:
    """Linear window to 0..255 with clamping; halves round up."""
    lo, hi = map(float, window)
    if not lo < hi:
        raise ValueError("window needs lo < hi")
    v = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * 255.0
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def render_image(x, path, window, pixel_size: float = 1.0) -> None:
    """Write an 8-bit P5 PGM and the raw float32 dump next to it (``.raw``)."""
    img = np.asarray(x)
    if img.ndim != 2:
        raise ValueError("render_image expects a 2-D image")
    gray = to_gray(img, window)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        f.write(gray.tobytes())
    write_raw(img, path.with_suffix(".raw"), pixel_size)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    # four header tokens, then exactly one whitespace byte before the pixels
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(buf) and not buf[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def write_sinogram(data: PoissonData, path, geom: Geometry | None = None) -> None:
    """Counts then blank-scan intensities as float64 LE, with a text sidecar."""
    np.concatenate([data.d, data.I0]).astype("<f8").tofile(path)
    lines = ["dtype = float64", "byte_order = little", f"rays = {data.m}",
             "layout = counts then I0, view-major"]
    if geom is not None:
        lines += [f"views = {geom.n_views}", f"detectors = {geom.n_dets}"]
    _sidecar(path).write_text("\n".join(lines) + "\n")


def read_sinogram(path):
    """``(PoissonData, sidecar dict)``."""
    meta = _read_sidecar(path)
    if meta.get("dtype") != "float64" or meta.get("byte_order") != "little":
        raise ValueError(f"{path}: unsupported sinogram layout {meta}")
    m = int(meta["rays"])
    arr = np.fromfile(path, dtype="<f8")
    if arr.size != 2 * m:
        raise ValueError(f"{path}: expected {2 * m} values, found {arr.size}")
    return PoissonData(arr[:m].copy(), arr[m:].copy()), meta
