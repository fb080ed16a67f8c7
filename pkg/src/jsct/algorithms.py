"""Full, ordered-subsets and averaged Jensen-surrogate and gradient iterations.

Every scheme works on a :class:`~jsct.projector.SubsetPartition`; the full
schemes use a single subset holding every ray.  Work is counted in subset
visits, so an iteration of a ``B``-subset scheme costs ``1/B`` of an
effective data pass.  The averaged schemes first fill their memory from the
starting image, which is charged as one full pass.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import ReconstructionProblem, lipschitz_constant, objective, regularizer_gradient
from .projector import SubsetPartition, compute_Z, partition_rays
from .solver1d import Solver1DConfig, Status, minimize_1d
from .surrogates import VoxelSurrogate, closed_form_update

logger = logging.getLogger(__name__)

__all__ = [
    "SCHEMES",
    "AlgorithmConfig",
    "AverageMemory",
    "IterationState",
    "Progress",
    "ReconstructionError",
    "RunResult",
    "Workspace",
    "prepare",
    "run",
    "full_js_iteration",
    "os_js_iteration",
    "sa_js_iteration",
    "osa_js_iteration",
    "full_gd_iteration",
    "os_gd_iteration",
    "sa_gd_iteration",
    "update_average_memory",
]

SCHEMES = ("full_js", "os_js", "sa_js", "osa_js", "full_gd", "os_gd", "sa_gd")
FULL_SCHEMES = ("full_js", "full_gd")
AVERAGED_SCHEMES = ("sa_js", "osa_js", "sa_gd")
DEFAULT_X0 = 1e-3


class ReconstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlgorithmConfig:
    """Scheme, subset count and stopping rule of one run.

    ``reproducible`` is carried for the record only: every reduction here
    runs in a fixed order through scipy.sparse, so runs are bitwise
    repeatable either way.  Full schemes force ``n_subsets = 1``.
    """

    scheme: str = "sa_js"
    n_subsets: int = 1
    max_passes: float = 20.0
    seed: int = 0
    x0: object = DEFAULT_X0
    solver: Solver1DConfig = field(default_factory=Solver1DConfig)
    reproducible: bool = True
    check_memory: bool = False
    anchor: str = "current"

    def __post_init__(self):
        if self.anchor not in ("stored", "current"):
            raise ValueError("anchor must be 'stored' or 'current'")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if int(self.n_subsets) < 1:
            raise ValueError("n_subsets must be >= 1")
        if self.scheme in FULL_SCHEMES:
            object.__setattr__(self, "n_subsets", 1)
        if not self.max_passes >= 0:
            raise ValueError("max_passes must be >= 0")


@dataclass
class IterationState:
    x: np.ndarray
    n: int = 0
    visits: int = 0
    n_subsets: int = 1

    @property
    def passes(self) -> float:
        return self.visits / self.n_subsets


class AverageMemory:
    """Per-subset stored back-projections and their running sum.

    ``ops`` counts the elementwise arithmetic performed by updates:
    one subtraction and one addition per voxel.  ``reference`` is the image
    the Jensen schemes fold their expansion points against (see
    :func:`sa_js_iteration`).
    """

    def __init__(self, stored, reference=None):
        self.stored = np.array(stored, dtype=np.float64)
        self.running_sum = self.stored.sum(axis=0)
        self.reference = None if reference is None else np.array(reference, dtype=np.float64)
        self.ops = 0

    @property
    def n_subsets(self) -> int:
        return self.stored.shape[0]

    def explicit_sum(self) -> np.ndarray:
        return self.stored.sum(axis=0)

    def deviation(self) -> float:
        ref = self.explicit_sum()
        return float(np.max(np.abs(self.running_sum - ref)) / max(np.max(np.abs(ref)), 1e-300))


def update_average_memory(memory: AverageMemory, k: int, new_bk) -> AverageMemory:
    """Replace slot ``k`` and patch the running sum in ``2N`` operations."""
    new_bk = np.asarray(new_bk, dtype=np.float64)
    if new_bk.shape != memory.running_sum.shape:
        raise ValueError("back-projection has the wrong length")
    if memory.n_subsets == 1:
        # a single slot is its own sum; copying keeps the sum exact
        memory.running_sum[:] = new_bk
        memory.stored[0] = new_bk
        memory.ops += new_bk.size
        return memory
    diff = new_bk - memory.stored[k]
    memory.running_sum += diff
    memory.stored[k] = new_bk
    memory.ops += 2 * new_bk.size
    return memory


@dataclass
class Workspace:
    """Quantities shared by all iterations of one run."""

    problem: ReconstructionProblem
    cfg: AlgorithmConfig
    partition: SubsetPartition
    Z: float
    lin_full: np.ndarray
    solver: Solver1DConfig
    lipschitz: float | None = None
    diagnostics: dict = field(default_factory=lambda: {"degenerate_updates": 0,
                                                       "unconverged_solves": 0,
                                                       "nonfinite_solves": 0})

    @property
    def n_subsets(self) -> int:
        return self.partition.n_subsets


def prepare(problem: ReconstructionProblem, cfg: AlgorithmConfig, partition=None,
            lipschitz=None) -> Workspace:
    if partition is None or partition.n_subsets != cfg.n_subsets:
        if problem.geometry is None:
            raise ValueError("problem has no geometry; pass an explicit partition")
        partition = partition_rays(problem.geometry, problem.H, problem.data.d, cfg.n_subsets)
    Z = compute_Z(problem.H)
    if cfg.scheme.endswith("_gd") and lipschitz is None:
        lipschitz = lipschitz_constant(problem.H, problem.data, problem.nbhd, problem.reg)
    return Workspace(problem, cfg, partition, Z, partition.full_backprojection,
                     cfg.solver.with_radius(1.0 / Z), lipschitz)


def _expected_backprojection(ws: Workspace, k: int, x) -> np.ndarray:
    block = ws.partition.blocks[k]
    q = ws.problem.data.I0[ws.partition.subsets[k]] * np.exp(-(block.csr @ x))
    return block.csr_t @ q


def _jensen_minimize(ws: Workspace, x, lin, expo, lam_scale) -> np.ndarray:
    reg = ws.problem.reg
    if lam_scale == 0:
        x_new, degenerate = closed_form_update(lin, expo, ws.Z, x)
        ws.diagnostics["degenerate_updates"] += int(degenerate.sum())
        return x_new
    psi = VoxelSurrogate(x, lin, expo, ws.Z, ws.problem.nbhd, lam_scale, reg.delta)
    res = minimize_1d(psi, x, ws.solver)
    bad = res.status == Status.NONFINITE
    ws.diagnostics["nonfinite_solves"] += int(bad.sum())
    ws.diagnostics["unconverged_solves"] += int(np.sum(res.status == Status.MAX_ITER))
    return np.where(bad, x, res.x)


def _advance(state: IterationState, x_new) -> IterationState:
    if not np.all(np.isfinite(x_new)):
        raise ReconstructionError(f"non-finite voxel after iteration {state.n}")
    return IterationState(x_new, state.n + 1, state.visits + 1, state.n_subsets)


def full_js_iteration(state: IterationState, ws: Workspace) -> IterationState:
    b_hat = _expected_backprojection(ws, 0, state.x)
    return _advance(state, _jensen_minimize(ws, state.x, ws.lin_full, b_hat, ws.problem.reg.lam))


def os_js_iteration(state: IterationState, ws: Workspace) -> IterationState:
    B = ws.n_subsets
    k = state.n % B
    b_hat = _expected_backprojection(ws, k, state.x)
    lin = ws.partition.backprojections[k]
    return _advance(state, _jensen_minimize(ws, state.x, lin, b_hat, ws.problem.reg.lam / B))


# Z * (x - reference) beyond this triggers a rebase of the folded memory
_FOLD_LIMIT = 600.0


def _fold(ws, memory, x):
    """Factor ``exp(Z (x - reference))`` carrying a back-projection to the common anchor."""
    if memory.n_subsets == 1:
        # the only slot is replaced now, so the anchor may move for free
        memory.reference = x.copy()
    arg = ws.Z * (x - memory.reference)
    if np.max(np.abs(arg)) > _FOLD_LIMIT:
        shift = np.exp(ws.Z * (memory.reference - x))
        memory.stored *= shift
        memory.running_sum = memory.stored.sum(axis=0)
        memory.reference = x.copy()
        arg = np.zeros_like(x)
    return np.exp(arg)


def _averaged_js(state, ws, memory, k):
    x = state.x
    b_new = _expected_backprojection(ws, k, x)
    if ws.cfg.anchor == "current":
        update_average_memory(memory, k, b_new)
        # the sum is of nonnegative terms; cancellation in the running update
        # can leave tiny negative values, which would make the surrogate concave
        expo = np.maximum(memory.running_sum, 0.0)
    else:
        update_average_memory(memory, k, b_new * _fold(ws, memory, x))
        expo = np.maximum(memory.running_sum, 0.0) * np.exp(-ws.Z * (x - memory.reference))
    if ws.cfg.check_memory and memory.deviation() > 1e-9:
        raise ReconstructionError(f"running sum drifted at iteration {state.n}")
    return _advance(state, _jensen_minimize(ws, x, ws.lin_full, expo, ws.problem.reg.lam))


def sa_js_iteration(state, ws, memory: AverageMemory, rng: np.random.Generator) -> IterationState:
    """One stochastic-average step on a uniformly drawn subset.

    The stored back-projections, stale or fresh, are summed and expanded
    around the current image, so the surrogate gradient at ``x`` is the
    SAG-style estimate ``b - sum_k b^k``.  ``cfg.anchor == "stored"`` keeps
    each term at the image it was computed from instead
    (``sum_k b^k exp(-Z (x - x^k))``, folded against a common reference so
    the running sum still applies); every term then majorises its subset.
    """
    return _averaged_js(state, ws, memory, int(rng.integers(ws.n_subsets)))


def osa_js_iteration(state, ws, memory: AverageMemory) -> IterationState:
    """Cyclic-order counterpart of :func:`sa_js_iteration`."""
    return _averaged_js(state, ws, memory, state.n % ws.n_subsets)


def _gd_step(ws, x, data_grad):
    reg = ws.problem.reg
    g = data_grad
    if reg.lam:
        g = g + reg.lam * regularizer_gradient(x, ws.problem.nbhd, reg.delta)
    return np.maximum(x - g / ws.lipschitz, 0.0)


def full_gd_iteration(state: IterationState, ws: Workspace) -> IterationState:
    b_hat = _expected_backprojection(ws, 0, state.x)
    return _advance(state, _gd_step(ws, state.x, ws.lin_full - b_hat))


def os_gd_iteration(state: IterationState, ws: Workspace) -> IterationState:
    # subset gradient scaled by B as an estimate of the full gradient
    B = ws.n_subsets
    k = state.n % B
    b_hat = _expected_backprojection(ws, k, state.x)
    return _advance(state, _gd_step(ws, state.x, B * (ws.partition.backprojections[k] - b_hat)))


def sa_gd_iteration(state, ws, memory: AverageMemory, rng: np.random.Generator) -> IterationState:
    k = int(rng.integers(ws.n_subsets))
    update_average_memory(memory, k, _expected_backprojection(ws, k, state.x))
    if ws.cfg.check_memory and memory.deviation() > 1e-9:
        raise ReconstructionError(f"running sum drifted at iteration {state.n}")
    return _advance(state, _gd_step(ws, state.x, ws.lin_full - memory.running_sum))


@dataclass(frozen=True)
class Progress:
    iteration: int
    passes: float
    objective: float | None
    wall_seconds: float
    x: np.ndarray


@dataclass
class RunResult:
    x: np.ndarray
    history: list
    n_iter: int
    passes: float
    diagnostics: dict
    memory: AverageMemory | None = None

    @property
    def final_objective(self) -> float | None:
        for p in reversed(self.history):
            if p.objective is not None:
                return p.objective
        return None


def initial_image(x0, n: int) -> np.ndarray:
    x = np.array(x0, dtype=np.float64)
    x = np.full(n, float(x)) if x.ndim == 0 else x.ravel().copy()
    if x.size != n or np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("initial image must be finite, nonnegative and of length N")
    return x


def run(problem: ReconstructionProblem, cfg: AlgorithmConfig, callback=None, *,
        partition=None, lipschitz=None, objective_every: str = "pass",
        max_iterations: int | None = None, keep_history: bool = True) -> RunResult:
    """Iterate ``cfg.scheme`` until ``cfg.max_passes`` effective passes.

    The objective is evaluated whenever a whole pass completes
    (``objective_every="pass"``) or after every iteration
    (``"iteration"``); each evaluation is reported to ``callback`` as a
    :class:`Progress` and kept in the history.  With ``keep_history=False``
    only the latest record is retained.
    """
    if objective_every not in ("pass", "iteration"):
        raise ValueError("objective_every must be 'pass' or 'iteration'")
    ws = prepare(problem, cfg, partition, lipschitz)
    B = ws.n_subsets
    scheme = cfg.scheme
    state = IterationState(initial_image(cfg.x0, problem.n), 0, 0, B)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    history = []
    t0 = time.perf_counter()

    def record():
        x = state.x.copy()
        x.flags.writeable = False
        phi = objective(x, problem.H, problem.data, problem.nbhd, problem.reg)
        p = Progress(state.n, state.passes, phi, time.perf_counter() - t0, x)
        if not keep_history:
            history.clear()
        history.append(p)
        if callback is not None:
            callback(p)

    record()
    memory = None
    if scheme in AVERAGED_SCHEMES:
        memory = AverageMemory([_expected_backprojection(ws, k, state.x) for k in range(B)],
                               reference=state.x)
        state = replace(state, visits=state.visits + B)
        record()

    budget = int(round(cfg.max_passes * B))
    steps = {
        "full_js": lambda s: full_js_iteration(s, ws),
        "os_js": lambda s: os_js_iteration(s, ws),
        "sa_js": lambda s: sa_js_iteration(s, ws, memory, rng),
        "osa_js": lambda s: osa_js_iteration(s, ws, memory),
        "full_gd": lambda s: full_gd_iteration(s, ws),
        "os_gd": lambda s: os_gd_iteration(s, ws),
        "sa_gd": lambda s: sa_gd_iteration(s, ws, memory, rng),
    }
    step = steps[scheme]
    while state.visits < budget:
        if max_iterations is not None and state.n >= max_iterations:
            break
        try:
            state = step(state)
        except (FloatingPointError, ValueError) as exc:
            raise ReconstructionError(f"{scheme} failed at iteration {state.n}: {exc}") from exc
        if objective_every == "iteration" or state.visits % B == 0:
            record()
    if history[-1].iteration != state.n:
        record()
    logger.debug("%s B=%d finished: %d iterations, %.3f passes, %s",
                 scheme, B, state.n, state.passes, ws.diagnostics)
    return RunResult(state.x, history, state.n, state.passes, dict(ws.diagnostics), memory)
