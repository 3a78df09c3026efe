"""Dynamic linear elasticity with Nitsche contact on P1 elements.

Backward Euler is applied to the first-order system in (u, v). The velocity
is eliminated through ``v+ = (u+ - u) / dt``, which leaves one nonlinear
system per step in the new displacement:

    rho/dt^2 M (u+ - u - dt v) + K u+ + N(u+) = F

``N`` is the contact term ``(1/gamma) <[u.n - gamma sigma_nn(u)]_+, phi.n>``
on the top/bottom boundary, solved with a semismooth Newton method.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonConvergenceError, NumericError, ValidationError
from .mesh import BoundaryTag, Mesh, outward_normals

# 3-point Gauss rule on [0, 1]
_GAUSS_S = 0.5 + 0.5 * np.array([-math.sqrt(3 / 5), 0.0, math.sqrt(3 / 5)])
_GAUSS_W = np.array([5 / 18, 8 / 18, 5 / 18])


@dataclass(frozen=True)
class ParameterPoint:
    E: float
    nu: float

    def __post_init__(self):
        if not (math.isfinite(self.E) and self.E > 0):
            raise ValidationError(f"elasticity modulus must be positive, got {self.E}")
        if not (0 < self.nu < 0.5):
            raise ValidationError(f"Poisson ratio must lie in (0, 1/2), got {self.nu}")

    def as_array(self) -> np.ndarray:
        return np.array([self.E, self.nu])


@dataclass(frozen=True)
class ParameterBox:
    E_min: float = 5e10
    E_max: float = 1e11
    nu_min: float = 0.3
    nu_max: float = 0.4

    def __post_init__(self):
        if not (0 < self.E_min <= self.E_max):
            raise ValidationError(f"invalid E range [{self.E_min}, {self.E_max}]")
        if not (0 < self.nu_min <= self.nu_max < 0.5):
            raise ValidationError(f"invalid nu range [{self.nu_min}, {self.nu_max}]")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.E_min, self.nu_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.E_max, self.nu_max])

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, p, rtol: float = 1e-12) -> bool:
        p = np.asarray(p, dtype=float)
        slack = rtol * (self.upper - self.lower + np.abs(self.upper))
        return bool(np.all(p >= self.lower - slack) and np.all(p <= self.upper + slack))

    def clip(self, p) -> np.ndarray:
        return np.clip(np.asarray(p, dtype=float), self.lower, self.upper)


@dataclass(frozen=True)
class LameParams:
    lam: float
    mu: float


@dataclass(frozen=True)
class FEConfig:
    rho: float = 2700.0
    T: float = 1.0
    n_steps: int = 50
    gamma_ratio: float = 10.0
    body_force: tuple[float, float] = (0.0, 0.0)
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    dirichlet_scale: float = 1.0
    contact: bool = True

    def __post_init__(self):
        object.__setattr__(self, "body_force", tuple(float(f) for f in self.body_force))
        if self.T <= 0:
            raise ValidationError(f"T must be positive, got {self.T}")
        if self.n_steps < 2 or self.n_steps % 2:
            raise ValidationError(f"n_steps must be a positive even number, got {self.n_steps}")
        if self.gamma_ratio <= 0 or self.newton_tol <= 0 or self.rho <= 0:
            raise ValidationError("rho, gamma_ratio and newton_tol must be positive")
        if len(self.body_force) != 2:
            raise ValidationError("body_force must be a 2-vector")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def replace(self, **changes) -> "FEConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class FEState:
    """Displacement and velocity coefficients, interleaved ``[x0, y0, x1, y1, ...]``."""

    u: np.ndarray
    v: np.ndarray
    t: float

    @classmethod
    def zero(cls, mesh: Mesh, t: float = 0.0) -> "FEState":
        n = 2 * mesh.n_vertices
        return cls(np.zeros(n), np.zeros(n), t)


@dataclass
class ForwardSolution:
    snapshots: dict[int, FEState]
    parameters: ParameterPoint
    mesh: Mesh
    config: FEConfig
    newton_iterations: list[int] = field(default_factory=list)

    def state_at(self, t: float) -> FEState:
        k = int(round(t / self.config.dt))
        if k not in self.snapshots or abs(k * self.config.dt - t) > 1e-9 * self.config.T:
            raise KeyError(f"no snapshot stored at t = {t}")
        return self.snapshots[k]


def lame_from_engineering(p: ParameterPoint) -> LameParams:
    E, nu = p.E, p.nu
    if not 0 < nu < 0.5:
        raise ValidationError(f"Poisson ratio must lie in (0, 1/2), got {nu}")
    return LameParams(E * nu / ((1 + nu) * (1 - 2 * nu)), E / (2 * (1 + nu)))


def strain(grad_u) -> np.ndarray:
    g = np.asarray(grad_u, dtype=float)
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def stress(grad_u, lame: LameParams) -> np.ndarray:
    eps = strain(grad_u)
    tr = np.trace(eps, axis1=-2, axis2=-1)
    return 2 * lame.mu * eps + lame.lam * tr[..., None, None] * np.eye(2)


def positive_part(g):
    return np.maximum(g, 0.0)


def nitsche_reformulation_residual(u_n, sigma_nn, gamma):
    """Defect ``sigma_nn + [u_n - gamma sigma_nn]_+ / gamma`` of the contact equality.

    Zero exactly when ``u_n <= 0``, ``sigma_nn <= 0`` and ``u_n sigma_nn = 0``.
    """
    if np.any(np.asarray(gamma) <= 0):
        raise ValidationError("gamma must be positive")
    return sigma_nn + positive_part(u_n - gamma * sigma_nn) / gamma


def dirichlet_value(t: float, tag: BoundaryTag | str, scale: float = 1.0) -> np.ndarray:
    tag = BoundaryTag(tag)
    if tag is BoundaryTag.LEFT:
        return np.zeros(2)
    if tag is BoundaryTag.RIGHT:
        return np.array([scale * (18 * t**2 - 12 * t**3), 0.0])
    raise ValidationError("no Dirichlet data on the top/bottom boundary")


class ElasticOperator:
    """Parameter-independent FE matrices of a mesh.

    The stiffness matrix is split as ``K = lam * K_lam + mu * K_mu`` so a new
    parameter point only costs a sparse sum.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        tri = mesh.triangles
        nt = len(tri)
        self.ndof = 2 * mesh.n_vertices
        p = mesh.vertices[tri]
        area = mesh.signed_areas()
        # gradients of the barycentric basis, (nt, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        jac = np.stack([d1, d2], axis=2)  # columns are d1, d2
        jinv = np.linalg.inv(jac)
        ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        grads = np.einsum("kr,trd->tkd", ref, jinv)
        self.area = area
        self.grads = grads

        dofs = np.empty((nt, 6), dtype=np.int64)
        dofs[:, 0::2] = 2 * tri
        dofs[:, 1::2] = 2 * tri + 1
        self.tri_dofs = dofs

        # divergence and strain of each of the 6 local basis functions
        div = np.zeros((nt, 6))
        div[:, 0::2] = grads[:, :, 0]
        div[:, 1::2] = grads[:, :, 1]
        eps = np.zeros((nt, 6, 2, 2))
        for c in range(3):
            for k in range(2):
                g = np.zeros((nt, 2, 2))
                g[:, k, :] = grads[:, c, :]  # grad of phi_c e_k: row k
                eps[:, 2 * c + k] = 0.5 * (g + np.swapaxes(g, 1, 2))
        self.div = div
        self.eps = eps

        k_lam = area[:, None, None] * np.einsum("ta,tb->tab", div, div)
        k_mu = 2 * area[:, None, None] * np.einsum("taij,tbij->tab", eps, eps)
        rows = np.repeat(dofs, 6, axis=1).ravel()
        cols = np.tile(dofs, (1, 6)).ravel()
        shape = (self.ndof, self.ndof)
        self.K_lam = sp.csr_matrix((k_lam.ravel(), (rows, cols)), shape=shape)
        self.K_mu = sp.csr_matrix((k_mu.ravel(), (rows, cols)), shape=shape)

        m_ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
        m_loc = np.zeros((nt, 6, 6))
        for k in range(2):
            m_loc[:, k::2, k::2] = area[:, None, None] * m_ref
        self.M = sp.csr_matrix((m_loc.ravel(), (rows, cols)), shape=shape)
        # load vector of a unit body force per component
        self.load = np.zeros((2, self.ndof))
        for k in range(2):
            np.add.at(self.load[k], 2 * tri + k, np.repeat(area[:, None] / 3.0, 3, axis=1))

        left = mesh.vertices_with_tag(BoundaryTag.LEFT)
        right = mesh.vertices_with_tag(BoundaryTag.RIGHT)
        right = np.setdiff1d(right, left)
        self.left_vertices = left
        self.right_vertices = right
        dir_v = np.concatenate([left, right])
        self.dirichlet_dofs = np.sort(np.concatenate([2 * dir_v, 2 * dir_v + 1]))
        mask = np.ones(self.ndof, dtype=bool)
        mask[self.dirichlet_dofs] = False
        self.free_dofs = np.flatnonzero(mask)

        self._init_contact()

    def _init_contact(self):
        mesh = self.mesh
        edges = mesh.edges_with_tag(BoundaryTag.TOP_BOTTOM)
        normals = outward_normals(mesh)[edges]
        owner = mesh.edge_triangles[edges]
        self.contact_triangles = owner
        self.contact_normals = normals
        self.contact_lengths = mesh.edge_lengths()[edges]
        self.contact_dofs = self.tri_dofs[owner]
        ne = len(edges)
        # u.n at the Gauss points as a row over the 6 triangle dofs, (ne, 3, 6)
        trace = np.zeros((ne, len(_GAUSS_S), 6))
        for e, (a, b) in enumerate(mesh.edges[edges]):
            local = list(mesh.triangles[owner[e]])
            ia, ib = local.index(a), local.index(b)
            n = normals[e]
            for q, s in enumerate(_GAUSS_S):
                trace[e, q, 2 * ia : 2 * ia + 2] += (1 - s) * n
                trace[e, q, 2 * ib : 2 * ib + 2] += s * n
        self.contact_trace = trace
        g = self.grads[owner]
        # n . eps(phi) n for each local basis function, (ne, 6)
        nn = np.zeros((ne, 6))
        ng = np.einsum("ecd,ed->ec", g, normals)
        nn[:, 0::2] = ng * normals[:, [0]]
        nn[:, 1::2] = ng * normals[:, [1]]
        self.contact_div = self.div[owner]
        self.contact_nn = nn

    def stiffness(self, lame: LameParams) -> sp.csr_matrix:
        return (lame.lam * self.K_lam + lame.mu * self.K_mu).tocsr()

    def dirichlet_vector(self, t: float, scale: float = 1.0) -> np.ndarray:
        """Dirichlet values for the entries listed in ``dirichlet_dofs``."""
        vals = np.zeros(self.ndof)
        ux = dirichlet_value(t, BoundaryTag.RIGHT, scale)[0]
        vals[2 * self.right_vertices] = ux
        return vals[self.dirichlet_dofs]

    def contact_terms(self, u, lame: LameParams, E: float, gamma_ratio: float, jacobian: bool):
        """Residual and (optionally) Jacobian of the Nitsche contact term."""
        s_nn = lame.lam * self.contact_div + 2 * lame.mu * self.contact_nn  # (ne, 6)
        gamma = self.contact_lengths / (gamma_ratio * E)  # 1/gamma = gamma0/h
        G = self.contact_trace - gamma[:, None, None] * s_nn[:, None, :]  # (ne, q, 6)
        uT = u[self.contact_dofs]  # (ne, 6)
        g = np.einsum("eqa,ea->eq", G, uT)
        weight = (self.contact_lengths / gamma)[:, None] * _GAUSS_W[None, :]
        r_loc = np.einsum("eq,eqa->ea", weight * positive_part(g), self.contact_trace)
        res = np.zeros(self.ndof)
        np.add.at(res, self.contact_dofs.ravel(), r_loc.ravel())
        active = g > 0
        if not jacobian:
            return res, None, active
        if not active.any():
            return res, None, active
        j_loc = np.einsum("eq,eqa,eqb->eab", weight * active, self.contact_trace, G)
        rows = np.repeat(self.contact_dofs, 6, axis=1).ravel()
        cols = np.tile(self.contact_dofs, (1, 6)).ravel()
        jac = sp.csr_matrix((j_loc.ravel(), (rows, cols)), shape=(self.ndof, self.ndof))
        return res, jac, active


@functools.lru_cache(maxsize=8)
def get_operator(mesh: Mesh) -> ElasticOperator:
    return ElasticOperator(mesh)


def _system_matrix(op: ElasticOperator, dt: float, lame: LameParams, cfg: FEConfig) -> sp.csr_matrix:
    return (cfg.rho / dt**2 * op.M + op.stiffness(lame)).tocsr()


def assemble_residual_and_jacobian(state_guess: FEState, prev: FEState, dt: float, lame: LameParams,
                                   cfg: FEConfig, mesh: Mesh, E: float | None = None):
    """Backward-Euler residual in the new displacement and its semismooth Jacobian.

    ``E`` scales the Nitsche weight; when omitted it is recovered from ``lame``.

    Returns:
        ``(residual, jacobian)`` over all dofs; Dirichlet rows are not eliminated.
    """
    if dt <= 0:
        raise ValidationError("dt must be positive")
    op = get_operator(mesh)
    if E is None:
        E = lame.mu * (3 * lame.lam + 2 * lame.mu) / (lame.lam + lame.mu)
    A = _system_matrix(op, dt, lame, cfg)
    rhs = cfg.rho / dt**2 * (op.M @ (prev.u + dt * prev.v))
    rhs += cfg.body_force[0] * op.load[0] + cfg.body_force[1] * op.load[1]
    res = A @ state_guess.u - rhs
    jac = A
    if cfg.contact:
        r_c, j_c, _ = op.contact_terms(state_guess.u, lame, E, cfg.gamma_ratio, jacobian=True)
        res = res + r_c
        if j_c is not None:
            jac = (A + j_c).tocsr()
    return res, jac


class _StepSolver:
    """Semismooth Newton for one parameter point; caches the contact-free factorization."""

    def __init__(self, mesh: Mesh, p: ParameterPoint, cfg: FEConfig, dt: float):
        self.op = get_operator(mesh)
        self.mesh = mesh
        self.cfg = cfg
        self.dt = dt
        self.E = p.E
        self.lame = lame_from_engineering(p)
        self.A = _system_matrix(self.op, dt, self.lame, cfg)
        free = self.op.free_dofs
        self.A_ff = self.A[free][:, free].tocsc()
        self._lu = None
        self.force = cfg.body_force[0] * self.op.load[0] + cfg.body_force[1] * self.op.load[1]

    @property
    def lu(self):
        if self._lu is None:
            self._lu = spla.splu(self.A_ff)
        return self._lu

    def residual(self, u, rhs, jacobian):
        res = self.A @ u - rhs
        jac = None
        active = None
        if self.cfg.contact:
            r_c, jac, active = self.op.contact_terms(u, self.lame, self.E, self.cfg.gamma_ratio, jacobian)
            res += r_c
        return res, jac, active

    def step(self, prev: FEState, u_guess=None, t_new=None) -> tuple[FEState, int]:
        op, cfg, dt = self.op, self.cfg, self.dt
        free = op.free_dofs
        if t_new is None:
            t_new = prev.t + dt
        u = np.array(prev.u if u_guess is None else u_guess, dtype=float)
        u[op.dirichlet_dofs] = op.dirichlet_vector(t_new, cfg.dirichlet_scale)
        rhs = cfg.rho / dt**2 * (op.M @ (prev.u + dt * prev.v)) + self.force
        res, jac, active = self.residual(u, rhs, True)
        r0 = np.linalg.norm(res[free])
        target = cfg.newton_tol * max(1.0, r0)
        norm = r0
        for it in range(cfg.newton_max_iter + 1):
            if not np.isfinite(norm):
                raise NonConvergenceError(f"non-finite Newton residual at t = {t_new}", norm, t_new)
            if norm <= target:
                v = (u - prev.u) / dt
                return FEState(u, v, t_new), it
            if it == cfg.newton_max_iter:
                break
            if jac is None:
                delta = self.lu.solve(-res[free])
            else:
                j_ff = (self.A + jac)[free][:, free].tocsc()
                try:
                    delta = spla.splu(j_ff).solve(-res[free])
                except RuntimeError as exc:
                    raise NumericError(f"singular Newton matrix at t = {t_new}: {exc}") from exc
            u[free] += delta
            prev_active = active
            res, jac, active = self.residual(u, rhs, True)
            norm = np.linalg.norm(res[free])
            # unchanged active set: the last solve was exact up to round-off
            if (
                norm > target
                and (active is None or np.array_equal(active, prev_active))
                and np.linalg.norm(delta) <= 1e-13 * max(np.linalg.norm(u), 1e-300)
            ):
                v = (u - prev.u) / dt
                return FEState(u, v, t_new), it + 1
        raise NonConvergenceError(
            f"Newton did not converge at t = {t_new} (residual {norm:.3e}, target {target:.3e})", norm, t_new
        )


def solve_time_step(prev: FEState, dt: float, p: ParameterPoint, cfg: FEConfig, mesh: Mesh,
                    u_guess=None) -> FEState:
    """One backward-Euler step from ``prev`` to ``prev.t + dt``."""
    state, _ = _StepSolver(mesh, p, cfg, dt).step(prev, u_guess)
    return state


def solve_forward(p: ParameterPoint, cfg: FEConfig, mesh: Mesh, store_all: bool = True) -> ForwardSolution:
    """March from zero initial data to ``T``.

    With ``store_all=False`` only the snapshots at ``T/2`` and ``T`` are kept.
    """
    dt = cfg.dt
    solver = _StepSolver(mesh, p, cfg, dt)
    state = FEState.zero(mesh)
    half = cfg.n_steps // 2
    snapshots = {0: state} if store_all else {}
    iters = []
    for k in range(1, cfg.n_steps + 1):
        # time from the step index keeps snapshot times exact
        state, it = solver.step(state, t_new=k * dt)
        iters.append(it)
        if store_all or k in (half, cfg.n_steps):
            snapshots[k] = state
    return ForwardSolution(snapshots, p, mesh, cfg, iters)


def element_gradients(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """Piecewise-constant displacement gradient per triangle, ``(M, 2, 2)`` with ``[i, j] = du_i/dx_j``."""
    op = get_operator(mesh)
    uT = u[op.tri_dofs].reshape(-1, 3, 2)  # (t, node, comp)
    return np.einsum("tci,tcj->tij", uT, op.grads)


def penetration(sol_or_state, mesh: Mesh) -> float:
    """Largest positive normal displacement over top/bottom vertices."""
    op = get_operator(mesh)
    edges = mesh.edges_with_tag(BoundaryTag.TOP_BOTTOM)
    normals = op.contact_normals
    states = sol_or_state.snapshots.values() if isinstance(sol_or_state, ForwardSolution) else [sol_or_state]
    worst = 0.0
    for st in states:
        u = st.u.reshape(-1, 2)
        for (a, b), n in zip(mesh.edges[edges], normals):
            worst = max(worst, float(u[a] @ n), float(u[b] @ n))
    return max(worst, 0.0)


def save_snapshot(state: FEState, p: ParameterPoint, mesh: Mesh, path) -> None:
    u = state.u.reshape(-1, 2)
    v = state.v.reshape(-1, 2)
    lines = [f"# t {state.t!r} E {p.E!r} nu {p.nu!r}", "# x y u1 u2 v1 v2"]
    for (x, y), (u1, u2), (v1, v2) in zip(mesh.vertices.tolist(), u.tolist(), v.tolist()):
        lines.append(" ".join("%.17g" % val for val in (x, y, u1, u2, v1, v2)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
