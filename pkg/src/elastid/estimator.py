"""Gradient and BFGS estimation of (E, nu) on the surrogate misfit.

Both algorithms iterate in the network's normalized input coordinates, where
E and nu have comparable magnitude. The objective handed to the line search
is divided by the gradient norm at the starting point; this constant factor
leaves minimizers and the Armijo test unchanged but makes the first trial
step a unit step, independent of the physical units of the observations.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import LineSearchError, NumericError, ValidationError
from .fem import FEConfig, ParameterBox, ParameterPoint, solve_forward
from .gradient import backprop_to_input, misfit_value
from .mesh import Mesh
from .network import DenseNetwork, predict
from .observation import ObservationConfig, observe
from .parallel import parallel_map

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObjectiveConfig:
    u_obs: np.ndarray
    alpha: float = 0.0
    E0: float = 7.5e10
    nu0: float = 0.35

    def __post_init__(self):
        u = np.asarray(self.u_obs, dtype=float)
        u.setflags(write=False)
        object.__setattr__(self, "u_obs", u)
        if self.alpha < 0:
            raise ValidationError("alpha must be non-negative")
        if self.E0 <= 0 or self.nu0 <= 0:
            raise ValidationError("characteristic values must be positive")

    @classmethod
    def for_box(cls, u_obs, box: ParameterBox, alpha: float = 0.0) -> "ObjectiveConfig":
        E0, nu0 = box.midpoint()
        return cls(u_obs, alpha, float(E0), float(nu0))


@dataclass(frozen=True)
class EstimatorConfig:
    grad_reduction_tol: float = 1e-8
    max_iter: int = 100000
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    initial_step: float = 1.0
    curvature_eps: float = 1e-10
    clamp_to_box: bool = False
    box: ParameterBox = ParameterBox()
    max_ls_trials: int = 60

    def __post_init__(self):
        if not 0 < self.armijo_c < 1 or not 0 < self.armijo_shrink < 1:
            raise ValidationError("armijo_c and armijo_shrink must lie in (0, 1)")
        if self.grad_reduction_tol <= 0 or self.curvature_eps <= 0 or self.initial_step <= 0:
            raise ValidationError("tolerances and the initial step must be positive")
        if self.max_iter < 0:
            raise ValidationError("max_iter must be non-negative")


@dataclass
class IterateRecord:
    iter: int
    p: np.ndarray
    objective: float
    grad_norm: float
    eta: float = math.nan
    direction: np.ndarray = field(default_factory=lambda: np.full(2, math.nan))
    ls_trials: int = 0
    in_box: bool = True
    curvature_update: bool | None = None
    B_min_eig: float = math.nan


@dataclass
class EstimationResult:
    p_star: np.ndarray
    trace: list[IterateRecord]
    status: str  # "converged", "max_iter" or "line_search_failed"
    method: str

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def n_iter(self) -> int:
        return len(self.trace) - 1

    TRACE_COLUMNS = ("iter", "E", "nu", "objective", "grad_norm", "eta", "ls_trials")

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.TRACE_COLUMNS)
            for r in self.trace:
                w.writerow([r.iter] + ["%.17g" % x for x in (r.p[0], r.p[1], r.objective, r.grad_norm, r.eta)]
                           + [r.ls_trials])


def regularizer(p, cfg: ObjectiveConfig) -> tuple[float, np.ndarray]:
    E, nu = np.asarray(p, dtype=float)
    a = cfg.alpha
    value = 0.5 * a * ((E / cfg.E0) ** 2 + (nu / cfg.nu0) ** 2)
    return value, np.array([a * E / cfg.E0**2, a * nu / cfg.nu0**2])


def objective(p, net: DenseNetwork, cfg: ObjectiveConfig) -> float:
    """Surrogate misfit plus the optional Tikhonov term."""
    value = misfit_value(net, p, cfg.u_obs)
    if cfg.alpha:
        value += regularizer(p, cfg)[0]
    return value


def objective_and_gradient(p, net: DenseNetwork, cfg: ObjectiveConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, physical gradient and normalized-coordinate gradient."""
    res = backprop_to_input(net, p, cfg.u_obs)
    value, g, gq = res.value, res.gradient, res.gradient_normalized
    if cfg.alpha:
        rv, rg = regularizer(p, cfg)
        value += rv
        g = g + rg
        gq = gq + rg * net.norm.input_scale
    return value, g, gq


def fe_objective(p, mesh: Mesh, fe_cfg: FEConfig, obs_cfg: ObservationConfig, u_obs) -> float:
    """FE misfit; runs a full forward solve."""
    sol = solve_forward(ParameterPoint(*np.asarray(p, dtype=float)), fe_cfg, mesh, store_all=False)
    r = observe(sol, obs_cfg) - np.asarray(u_obs, dtype=float)
    return 0.5 * float(r @ r)


def armijo_goldstein_search(f: Callable[[np.ndarray], float], p, d, g, cfg: EstimatorConfig,
                            f0: float | None = None, project=None) -> tuple[float, int, np.ndarray, float]:
    """Backtracking search for the update ``p <- p - eta d``.

    Accepts the largest ``eta = initial_step * shrink**k`` with
    ``f(p - eta d) <= f(p) - c * g.(p - p_new)``, which is the classical
    Armijo test ``f(p) - c eta g.d`` when no projection is applied.

    Returns:
        ``(eta, trials, p_new, f_new)``.
    """
    p = np.asarray(p, dtype=float)
    d = np.asarray(d, dtype=float)
    g = np.asarray(g, dtype=float)
    slope = float(g @ d)
    if not slope > 0:
        raise ValidationError("search direction is not a descent direction for p <- p - eta d")
    if f0 is None:
        f0 = f(p)
    eta = cfg.initial_step
    for trial in range(1, cfg.max_ls_trials + 1):
        p_new = p - eta * d
        if project is not None:
            p_new = project(p_new)
        f_new = f(p_new)
        if math.isfinite(f_new) and f_new <= f0 - cfg.armijo_c * float(g @ (p - p_new)) and f_new < f0:
            return eta, trial, p_new, f_new
        eta *= cfg.armijo_shrink
    raise LineSearchError(f"no admissible step after {cfg.max_ls_trials} trials")


class NormalizedProblem:
    """Objective in normalized coordinates ``q = (p - mean) / scale``, rescaled by a fixed factor."""

    def __init__(self, fun: Callable[[np.ndarray], tuple[float, np.ndarray]], mean, scale, box: ParameterBox):
        self.fun = fun  # physical-unit value and gradient at q
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.box = box
        self.factor = 1.0

    def to_physical(self, q):
        return np.asarray(q) * self.scale + self.mean

    def to_normalized(self, p):
        return (np.asarray(p, dtype=float) - self.mean) / self.scale

    def project(self, q):
        return self.to_normalized(self.box.clip(self.to_physical(q)))

    @classmethod
    def from_network(cls, net: DenseNetwork, cfg: ObjectiveConfig, box: ParameterBox) -> "NormalizedProblem":
        norm = net.norm

        def fun(q):
            value, _, gq = objective_and_gradient(norm.denormalize_inputs(q), net, cfg)
            return value, gq

        return cls(fun, norm.input_mean, norm.input_scale, box)


def _minimize(problem: NormalizedProblem, p0, cfg: EstimatorConfig, method: str) -> EstimationResult:
    q = problem.to_normalized(p0)
    value, g = problem.fun(q)
    g0 = float(np.linalg.norm(g))
    if not (math.isfinite(value) and math.isfinite(g0)):
        raise NumericError("objective or gradient is not finite at the starting point")
    box = problem.box
    trace = [IterateRecord(0, problem.to_physical(q), value, g0, in_box=box.contains(problem.to_physical(q)))]
    if g0 == 0.0:
        return EstimationResult(trace[0].p, trace, "converged", method)
    factor = g0  # objective seen by the line search is F / |grad F(p0)|

    def scaled_value(qq):
        return problem.fun(qq)[0] / factor

    project = problem.project if cfg.clamp_to_box else None
    B = np.eye(2)
    status = "max_iter"
    warned = False
    for k in range(1, cfg.max_iter + 1):
        if np.linalg.norm(g) <= cfg.grad_reduction_tol * g0:
            status = "converged"
            break
        gs = g / factor
        d = gs if method == "gradient" else np.linalg.solve(B, gs)
        try:
            eta, trials, q_new, _ = armijo_goldstein_search(scaled_value, q, d, gs, cfg, value / factor, project)
        except LineSearchError:
            status = "line_search_failed"
            break
        value_new, g_new = problem.fun(q_new)
        # direction reported in physical units, same sign convention p <- p - eta d
        rec = IterateRecord(k, problem.to_physical(q_new), value_new, float(np.linalg.norm(g_new)), eta,
                            d * problem.scale, trials)
        rec.in_box = box.contains(rec.p)
        if not rec.in_box and not warned:
            log.warning("%s iterate %d left the admissible box: E=%.6g nu=%.6g", method, k, *rec.p)
            warned = True
        if method == "bfgs":
            s = q_new - q
            y = (g_new - g) / factor
            ys = float(y @ s)
            eps = cfg.curvature_eps * np.linalg.norm(s) * np.linalg.norm(y)
            if ys >= eps and ys > 0:
                Bs = B @ s
                B = B + np.outer(y, y) / ys - np.outer(Bs, Bs) / float(s @ Bs)
                B = 0.5 * (B + B.T)
                rec.curvature_update = True
            else:
                rec.curvature_update = False
            min_eig = float(np.linalg.eigvalsh(B).min())
            if not min_eig > 0:
                raise NumericError(f"BFGS matrix lost positive definiteness (min eigenvalue {min_eig})")
            rec.B_min_eig = min_eig
        trace.append(rec)
        q, value, g = q_new, value_new, g_new
    else:
        if np.linalg.norm(g) <= cfg.grad_reduction_tol * g0:
            status = "converged"
    return EstimationResult(problem.to_physical(q), trace, status, method)


def minimize_gradient(problem: NormalizedProblem, p0, cfg: EstimatorConfig = EstimatorConfig()) -> EstimationResult:
    return _minimize(problem, p0, cfg, "gradient")


def minimize_bfgs(problem: NormalizedProblem, p0, cfg: EstimatorConfig = EstimatorConfig()) -> EstimationResult:
    return _minimize(problem, p0, cfg, "bfgs")


def gradient_descent(net: DenseNetwork, cfg_obj: ObjectiveConfig, cfg_est: EstimatorConfig = EstimatorConfig(),
                     p0=None) -> EstimationResult:
    """Surrogate-based gradient algorithm: ``p <- p - eta grad F(p)``."""
    problem = NormalizedProblem.from_network(net, cfg_obj, cfg_est.box)
    p0 = cfg_est.box.midpoint() if p0 is None else np.asarray(p0, dtype=float)
    return minimize_gradient(problem, p0, cfg_est)


def bfgs(net: DenseNetwork, cfg_obj: ObjectiveConfig, cfg_est: EstimatorConfig = EstimatorConfig(),
         p0=None) -> EstimationResult:
    """Surrogate-based BFGS: ``p <- p - eta B^{-1} grad F(p)`` with guarded rank-two updates."""
    problem = NormalizedProblem.from_network(net, cfg_obj, cfg_est.box)
    p0 = cfg_est.box.midpoint() if p0 is None else np.asarray(p0, dtype=float)
    return minimize_bfgs(problem, p0, cfg_est)


@dataclass
class Surface:
    E: np.ndarray
    nu: np.ndarray
    values: np.ndarray  # values[i, j] at (E[i], nu[j])

    def argmin(self) -> tuple[int, int]:
        i, j = np.unravel_index(int(np.argmin(self.values)), self.values.shape)
        return int(i), int(j)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("E", "nu", "F_value"))
            for i, E in enumerate(self.E):
                for j, nu in enumerate(self.nu):
                    w.writerow(["%.17g" % E, "%.17g" % nu, "%.17g" % self.values[i, j]])


def _grid(box: ParameterBox, n_E: int, n_nu: int):
    if n_E < 2 or n_nu < 2:
        raise ValidationError("surface grids need at least 2 x 2 points")
    return np.linspace(box.E_min, box.E_max, n_E), np.linspace(box.nu_min, box.nu_max, n_nu)


def surrogate_surface(net: DenseNetwork, u_obs, box: ParameterBox, n_E: int, n_nu: int) -> Surface:
    Es, nus = _grid(box, n_E, n_nu)
    P = np.array([(E, nu) for E in Es for nu in nus])
    r = predict(net, P) - np.asarray(u_obs, dtype=float)
    return Surface(Es, nus, 0.5 * np.sum(r * r, axis=1).reshape(n_E, n_nu))


def fe_surface(mesh: Mesh, fe_cfg: FEConfig, obs_cfg: ObservationConfig, u_obs, box: ParameterBox,
               n_E: int, n_nu: int, jobs: int = 1) -> Surface:
    Es, nus = _grid(box, n_E, n_nu)
    P = [(E, nu) for E in Es for nu in nus]
    fn = functools.partial(fe_objective, mesh=mesh, fe_cfg=fe_cfg, obs_cfg=obs_cfg, u_obs=np.asarray(u_obs))
    return Surface(Es, nus, np.array(parallel_map(fn, P, jobs)).reshape(n_E, n_nu))
