"""Measurement operator: point values, vertical means and mean von Mises stress.

The stacked observation vector has 50 entries ordered as

    C1 x-row | C1 y-row | C2 x-row | C2 y-row | C3

where every row lists points 1..5 at ``t1`` followed by points 1..5 at ``t2``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .fem import FEConfig, ForwardSolution, LameParams, element_gradients, lame_from_engineering, stress
from .mesh import DomainSpec, Mesh, barycentric_all, locate_point, vertical_section

N_POINTS = 5
N_OBS = 50
# entries sharing a physical unit: displacements (C1, C2) and stresses (C3)
OBSERVATION_GROUPS = (np.arange(0, 40), np.arange(40, 50))


@dataclass(frozen=True)
class ObservationConfig:
    points: tuple[tuple[float, float], ...]
    t1: float
    t2: float

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) != N_POINTS:
            raise ValidationError(f"expected {N_POINTS} observation points, got {len(pts)}")
        if not 0 < self.t1 < self.t2:
            raise ValidationError("observation times must satisfy 0 < t1 < t2")

    @classmethod
    def default(cls, domain: DomainSpec, fe: FEConfig) -> "ObservationConfig":
        pts = tuple((i * domain.length / 6, domain.height / 2) for i in range(1, 6))
        return cls(pts, fe.T / 2, fe.T)

    def check(self, domain: DomainSpec, fe: FEConfig) -> None:
        for x, y in self.points:
            if not (0 < x < domain.length and 0 < y < domain.height):
                raise ValidationError(f"observation point ({x}, {y}) is not strictly inside the domain")
        if abs(self.t1 - fe.T / 2) > 1e-12 * fe.T or abs(self.t2 - fe.T) > 1e-12 * fe.T:
            raise ValidationError("observation times must be T/2 and T")


def observation_labels() -> list[str]:
    cols = [(i, j) for j in (1, 2) for i in range(1, N_POINTS + 1)]
    labels = []
    for fam in ("C1", "C2"):
        for comp in ("x", "y"):
            labels += [f"{fam}_{comp}_p{i}_t{j}" for i, j in cols]
    labels += [f"C3_p{i}_t{j}" for i, j in cols]
    return labels


def von_mises(sigma) -> np.ndarray:
    """``sqrt(3/2 dev:dev)`` with the deviator taken over the 2x2 tensor."""
    s = np.asarray(sigma, dtype=float)
    tr = np.trace(s, axis1=-2, axis2=-1)
    dev = s - tr[..., None, None] / 3.0 * np.eye(2)
    return np.sqrt(1.5 * np.einsum("...ij,...ij->...", dev, dev))


class ObservationOperator:
    """Linear-algebra form of the measurement functionals for one mesh."""

    def __init__(self, mesh: Mesh, cfg: ObservationConfig):
        self.mesh = mesh
        self.cfg = cfg
        nv = mesh.n_vertices
        rows, cols, vals = [], [], []
        for i, x in enumerate(cfg.points):
            k, bary = locate_point(mesh, x)
            rows += [i] * 3
            cols += list(mesh.triangles[k])
            vals += list(bary)
        self.point_op = sp.csr_matrix((vals, (rows, cols)), shape=(N_POINTS, nv))

        rows, cols, vals = [], [], []
        vm_rows, vm_cols, vm_vals = [], [], []
        self.sections = []
        for i, (x, _) in enumerate(cfg.points):
            sec = vertical_section(mesh, x)
            self.sections.append(sec)
            kappa = 1.0 / (sec.y_b - sec.y_a)
            for k, lo, hi in sec.segments:
                seg = hi - lo
                for y in (lo, hi):
                    bary = barycentric_all(mesh, (x, y))[k]
                    rows += [i] * 3
                    cols += list(mesh.triangles[k])
                    vals += list(0.5 * seg * kappa * bary)
                vm_rows.append(i)
                vm_cols.append(k)
                vm_vals.append(seg * kappa)
        self.mean_op = sp.csr_matrix((vals, (rows, cols)), shape=(N_POINTS, nv))
        self.vm_op = sp.csr_matrix((vm_vals, (vm_rows, vm_cols)), shape=(N_POINTS, mesh.n_triangles))

    def _states(self, sol: ForwardSolution):
        try:
            return sol.state_at(self.cfg.t1), sol.state_at(self.cfg.t2)
        except KeyError as exc:
            raise ValidationError(f"solution lacks an observation snapshot: {exc}") from exc

    def point_values(self, sol: ForwardSolution) -> np.ndarray:
        return np.hstack([(self.point_op @ st.u.reshape(-1, 2)).T for st in self._states(sol)])

    def mean_displacement(self, sol: ForwardSolution) -> np.ndarray:
        return np.hstack([(self.mean_op @ st.u.reshape(-1, 2)).T for st in self._states(sol)])

    def element_von_mises(self, u: np.ndarray, lame: LameParams) -> np.ndarray:
        return von_mises(stress(element_gradients(self.mesh, u), lame))

    def mean_von_mises(self, sol: ForwardSolution, lame: LameParams) -> np.ndarray:
        return np.hstack([self.vm_op @ self.element_von_mises(st.u, lame) for st in self._states(sol)])[None, :]

    def observe(self, sol: ForwardSolution, lame: LameParams | None = None) -> np.ndarray:
        if lame is None:
            lame = lame_from_engineering(sol.parameters)
        c1 = self.point_values(sol)
        c2 = self.mean_displacement(sol)
        c3 = self.mean_von_mises(sol, lame)
        return np.concatenate([c1[0], c1[1], c2[0], c2[1], c3[0]])


@functools.lru_cache(maxsize=8)
def get_observation_operator(mesh: Mesh, cfg: ObservationConfig) -> ObservationOperator:
    return ObservationOperator(mesh, cfg)


def point_values(sol: ForwardSolution, cfg: ObservationConfig) -> np.ndarray:
    """``2 x 10`` matrix of displacement values at the observation points."""
    return get_observation_operator(sol.mesh, cfg).point_values(sol)


def mean_displacement(sol: ForwardSolution, cfg: ObservationConfig) -> np.ndarray:
    return get_observation_operator(sol.mesh, cfg).mean_displacement(sol)


def mean_von_mises(sol: ForwardSolution, cfg: ObservationConfig, lame: LameParams) -> np.ndarray:
    return get_observation_operator(sol.mesh, cfg).mean_von_mises(sol, lame)


def observe(sol: ForwardSolution, cfg: ObservationConfig, lame: LameParams | None = None) -> np.ndarray:
    """Stacked 50-entry observation vector."""
    return get_observation_operator(sol.mesh, cfg).observe(sol, lame)

