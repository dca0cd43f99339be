"""Time integration: pre-factorized implicit linear stepping, overdamped
quasi-static linear sequences for training-pose generation, and the nonlinear
Newmark reference integrator.

Matrix factorizations are counted through a module-level event counter so
tests (and the runtime contract) can assert that a whole simulation run
performs exactly one factorization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .material import MaterialModel, MaterialParams, MeshPrecomp, assemble_force, \
    assemble_stiffness
from .mesh import TetMesh, lumped_mass


class NotPositiveDefiniteError(Exception):
    """System matrix failed the positive-definiteness checks (e.g. no anchors)."""


class ConvergenceError(Exception):
    """An iterative solve failed to reach its tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class IntegrationScheme(Enum):
    BACKWARD_EULER = "backward_euler"
    NEWMARK = "newmark"


# Newmark average-acceleration parameters (unconditionally stable).
NEWMARK_GAMMA = 0.5
NEWMARK_BETA = 0.25

_factorization_events = 0


def factorization_event_count() -> int:
    """Total prefactorizations performed since the last reset."""
    return _factorization_events


def reset_factorization_event_count() -> None:
    global _factorization_events
    _factorization_events = 0


@dataclass(frozen=True)
class RayleighDamping:
    """C = alpha * M + beta * K."""

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("Rayleigh coefficients must be non-negative")


@dataclass
class SimState:
    """Displacement/velocity/acceleration of one simulation, flat (3n,) layout."""

    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    t: float = 0.0

    @classmethod
    def rest(cls, n_nodes: int) -> "SimState":
        z = np.zeros(3 * n_nodes)
        return cls(u=z.copy(), v=z.copy(), a=z.copy(), t=0.0)


def anchor_dof_indices(anchors: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.int64)
    return (anchors[:, None] * 3 + np.arange(3)).ravel()


def apply_anchors(matrix, anchors: np.ndarray):
    """Eliminate anchored rows/columns: zero them and set a unit diagonal.

    Accepts a scipy sparse matrix or a dense array; returns the same kind.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.size == 0:
        return matrix
    dofs = anchor_dof_indices(anchors)
    if sp.issparse(matrix):
        n = matrix.shape[0]
        keep = np.ones(n)
        keep[dofs] = 0.0
        D = sp.diags(keep)
        out = D @ matrix @ D
        unit = sp.coo_matrix((np.ones(len(dofs)), (dofs, dofs)), shape=matrix.shape)
        return (out + unit).tocsc()
    out = np.array(matrix, dtype=np.float64, copy=True)
    out[dofs, :] = 0.0
    out[:, dofs] = 0.0
    out[dofs, dofs] = 1.0
    return out


class Prefactorization:
    """Opaque handle to a factorized SPD system matrix.

    ``solve`` performs back-substitution only; no further factorization
    events occur after construction.
    """

    def __init__(self, matrix, dt: float, scheme: IntegrationScheme | None,
                 rng_probe: int = 3):
        global _factorization_events
        A = matrix.tocsc() if sp.issparse(matrix) else sp.csc_matrix(matrix)
        n = A.shape[0]
        asym = abs(A - A.T)
        scale = max(abs(A).max(), 1e-300)
        if asym.max() > 1e-8 * scale:
            raise NotPositiveDefiniteError("system matrix is not symmetric")
        if A.diagonal().min() <= 0.0:
            raise NotPositiveDefiniteError("system matrix has a non-positive diagonal entry")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                self._lu = spla.splu(A)
        except (RuntimeError, spla.MatrixRankWarning) as exc:
            raise NotPositiveDefiniteError(
                f"factorization failed (singular or indefinite matrix): {exc}") from None
        _factorization_events += 1
        self.factorization_count = 1
        self.n = n
        self.dt = dt
        self.scheme = scheme
        # probe: solve must reproduce A x = b, and x^T A x must stay positive
        rng = np.random.default_rng(0)
        for _ in range(rng_probe):
            b = rng.standard_normal(n)
            x = self._lu.solve(b)
            if not np.all(np.isfinite(x)):
                raise NotPositiveDefiniteError("factorization produced non-finite solve")
            if np.linalg.norm(A @ x - b) > 1e-8 * np.linalg.norm(b):
                raise NotPositiveDefiniteError("factorized solve failed the residual check")
            if float(x @ b) <= 0.0:   # x^T A x with A x = b
                raise NotPositiveDefiniteError("system matrix is not positive definite")

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(b)


def prefactorize(K, M=None, C=None, dt: float = 0.0,
                 scheme: IntegrationScheme = IntegrationScheme.BACKWARD_EULER
                 ) -> Prefactorization:
    """Factorize the constant system matrix of an implicit scheme.

    With ``M`` (and optionally ``C``) given, the matrix is
    M + dt*C + dt^2*K for backward Euler or M + gamma*dt*C + beta*dt^2*K for
    Newmark. Without ``M`` the static stiffness K itself is factorized.
    Increments the factorization event counter by exactly one.
    """
    if M is None:
        return Prefactorization(K, dt=0.0, scheme=None)
    if C is None:
        C = sp.csr_matrix(K.shape)
    if scheme is IntegrationScheme.BACKWARD_EULER:
        A = M + dt * C + dt * dt * K
    elif scheme is IntegrationScheme.NEWMARK:
        A = M + NEWMARK_GAMMA * dt * C + NEWMARK_BETA * dt * dt * K
    else:
        raise ValueError(f"unknown scheme {scheme}")
    return Prefactorization(A, dt=dt, scheme=scheme)


@dataclass
class LinearSystem:
    """Constant-coefficient implicit system for the linear material."""

    mesh: TetMesh
    K: sp.csr_matrix
    M: sp.dia_matrix
    C: sp.csr_matrix
    dt: float
    scheme: IntegrationScheme
    damping: RayleighDamping
    prefact: Prefactorization
    anchor_dofs: np.ndarray = field(repr=False, default=None)

    @property
    def n_dof(self) -> int:
        return self.K.shape[0]


def build_linear_system(mesh: TetMesh, params: MaterialParams, dt: float,
                        scheme: IntegrationScheme = IntegrationScheme.NEWMARK,
                        damping: RayleighDamping = RayleighDamping(),
                        density: float = 1000.0) -> LinearSystem:
    """Assemble, anchor and prefactorize the linear-elasticity system."""
    if params.model is not MaterialModel.LINEAR:
        params = params.as_linear()
    if not mesh.anchors:
        raise NotPositiveDefiniteError(
            "mesh has no anchors; the stiffness has a floating null space")
    anchors = mesh.anchor_array()
    dofs = anchor_dof_indices(anchors)
    K = assemble_stiffness(mesh, params, np.zeros(3 * mesh.n_nodes), anchored=True)
    masses = np.repeat(lumped_mass(mesh, density), 3)
    M = sp.diags(masses).tocsr()
    C = (damping.alpha * M + damping.beta * K).tocsr()
    M = apply_anchors(M, anchors)
    C = apply_anchors(C, anchors)
    # Unit diagonals from the three eliminations stack up on anchored DOFs;
    # that only rescales the (decoupled) anchor equations, which stay zero.
    prefact = prefactorize(K, M, C, dt, scheme)
    return LinearSystem(mesh=mesh, K=K, M=M, C=C, dt=dt, scheme=scheme,
                        damping=damping, prefact=prefact, anchor_dofs=dofs)


def step_linear_implicit(system: LinearSystem, state: SimState,
                         f_ext: np.ndarray) -> SimState:
    """One implicit step with a single back-substitution (no factorization)."""
    if len(f_ext) != system.n_dof:
        raise ValueError(f"force vector has {len(f_ext)} entries, expected {system.n_dof}")
    f = np.array(f_ext, dtype=np.float64, copy=True)
    f[system.anchor_dofs] = 0.0
    dt = system.dt
    u, v, a = state.u, state.v, state.a
    if system.scheme is IntegrationScheme.BACKWARD_EULER:
        rhs = system.M @ v + dt * (f - system.K @ u)
        rhs[system.anchor_dofs] = 0.0
        v_new = system.prefact.solve(rhs)
        u_new = u + dt * v_new
        a_new = (v_new - v) / dt
    else:
        g, b = NEWMARK_GAMMA, NEWMARK_BETA
        u_pred = u + dt * v + dt * dt * (0.5 - b) * a
        v_pred = v + dt * (1.0 - g) * a
        rhs = f - system.C @ v_pred - system.K @ u_pred
        rhs[system.anchor_dofs] = 0.0
        a_new = system.prefact.solve(rhs)
        u_new = u_pred + b * dt * dt * a_new
        v_new = v_pred + g * dt * a_new
    for vec in (u_new, v_new, a_new):
        vec[system.anchor_dofs] = 0.0
    return SimState(u=u_new, v=v_new, a=a_new, t=state.t + dt)


def smallest_mode_frequency(K, M, anchor_dofs: np.ndarray | None = None,
                            n_iter: int = 60, seed: int = 0) -> float:
    """Estimate sqrt(lambda_min) of K x = lambda M x by inverse power iteration.

    Anchored DOFs (unit-diagonal placeholder rows) are excluded so the
    estimate reflects the free structural modes.
    """
    if anchor_dofs is not None and len(anchor_dofs):
        keep = np.ones(K.shape[0], dtype=bool)
        keep[anchor_dofs] = False
        idx = np.nonzero(keep)[0]
        K = K.tocsr()[idx][:, idx]
        M = M.tocsr()[idx][:, idx]
    lu = spla.splu(K.tocsc())
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(K.shape[0])
    x /= np.linalg.norm(x)
    lam = 1.0
    for _ in range(n_iter):
        y = lu.solve(M @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            break
        x = y / ny
        lam = float(x @ (K @ x)) / float(x @ (M @ x))
    return float(np.sqrt(max(lam, 0.0)))


@dataclass
class QuasistaticSequence:
    """Damped quasi-static linear loading path.

    ``displacements[k]`` is the k-th emitted linear displacement; its lagging
    internal force is ``internal_forces[k] = K @ displacements[k]``.
    """

    displacements: list[np.ndarray]
    internal_forces: list[np.ndarray]
    target: np.ndarray
    monotone: bool
    steps_run: int


class QuasistaticDriver:
    """Reusable overdamped-loading context for one (mesh, density).

    Assembles and factorizes the linear system once; ``run`` then produces a
    quasi-static sequence per force vector, which is what the training ramp
    exercises many times.
    """

    def __init__(self, mesh: TetMesh, params: MaterialParams,
                 damping: RayleighDamping | None = None, density: float = 1000.0):
        params = params.as_linear()
        if not mesh.anchors:
            raise NotPositiveDefiniteError("quasi-static sequence requires anchors")
        self.mesh = mesh
        self.anchor_dofs = anchor_dof_indices(mesh.anchor_array())
        self.K = assemble_stiffness(mesh, params, np.zeros(3 * mesh.n_nodes),
                                    anchored=True)
        self.masses = np.repeat(lumped_mass(mesh, density), 3)
        M = apply_anchors(sp.diags(self.masses).tocsr(), mesh.anchor_array())
        self.static = prefactorize(self.K)
        omega = smallest_mode_frequency(self.K, M, self.anchor_dofs)
        if omega <= 0.0:
            raise NotPositiveDefiniteError("anchored system has a zero-frequency mode")
        if damping is None:
            damping = RayleighDamping(alpha=10.0 * omega, beta=0.0)  # damping ratio >= 5
        self.damping = damping
        # alpha*dt = 30 keeps per-step acceleration near 1/30 of the load while
        # the slow-mode relaxation still converges in a few dozen steps
        self.dt = 30.0 / max(damping.alpha, 1e-30)
        self.system = build_linear_system(mesh, params, self.dt,
                                          IntegrationScheme.BACKWARD_EULER,
                                          damping, density)

    def run(self, f_ext: np.ndarray, n_steps: int, rel_tol: float = 1e-6,
            max_steps: int = 2000, accel_bound: float = 0.05) -> QuasistaticSequence:
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        dofs = self.anchor_dofs
        f = np.array(f_ext, dtype=np.float64, copy=True)
        f[dofs] = 0.0
        target = self.static.solve(f)
        target[dofs] = 0.0
        target_norm = np.linalg.norm(target)
        if target_norm == 0.0:
            zero = np.zeros_like(f)
            return QuasistaticSequence(displacements=[zero.copy()],
                                       internal_forces=[zero.copy()],
                                       target=target, monotone=True, steps_run=1)
        state = SimState.rest(self.mesh.n_nodes)
        path: list[np.ndarray] = []
        f_norm = np.linalg.norm(f)
        converged = False
        for _ in range(max_steps):
            prev_v = state.v
            state = step_linear_implicit(self.system, state, f)
            accel = self.masses * (state.v - prev_v) / self.dt
            accel[dofs] = 0.0
            if np.linalg.norm(accel) > accel_bound * f_norm:
                raise ConvergenceError(
                    "quasi-static assumption violated: acceleration exceeds bound",
                    residual=float(np.linalg.norm(accel) / f_norm))
            path.append(state.u.copy())
            if np.linalg.norm(state.u - target) <= rel_tol * target_norm:
                converged = True
                break
        if not converged:
            res = float(np.linalg.norm(path[-1] - target) / target_norm)
            raise ConvergenceError(
                f"quasi-static sequence did not reach equilibrium in {max_steps} steps",
                residual=res)
        keep = np.unique(np.round(np.linspace(0, len(path) - 1,
                                              min(n_steps, len(path)))).astype(int))
        displacements = [path[i] for i in keep]
        norms = [np.linalg.norm(u) for u in displacements]
        monotone = all(norms[i + 1] >= norms[i] - 1e-10 for i in range(len(norms) - 1))
        forces = [self.K @ u for u in displacements]
        return QuasistaticSequence(displacements=displacements, internal_forces=forces,
                                   target=target, monotone=monotone,
                                   steps_run=len(path))


def quasistatic_linear_sequence(mesh: TetMesh, params: MaterialParams,
                                f_ext: np.ndarray, n_steps: int,
                                damping: RayleighDamping | None = None,
                                density: float = 1000.0, rel_tol: float = 1e-6,
                                max_steps: int = 2000,
                                accel_bound: float = 0.05) -> QuasistaticSequence:
    """Overdamped loading from rest toward the static solution K^-1 f_ext.

    The mass damping makes acceleration negligible, so intermediate states
    are quasi-static while their internal force still lags the applied load.
    The recorded path is subsampled to at most ``n_steps`` snapshots (always
    keeping the final, converged one).
    """
    driver = QuasistaticDriver(mesh, params, damping, density)
    return driver.run(f_ext, n_steps, rel_tol, max_steps, accel_bound)


@dataclass
class NonlinearSystem:
    """Assembled context for the nonlinear reference integrator."""

    mesh: TetMesh
    params: MaterialParams
    pre: MeshPrecomp
    M: sp.dia_matrix
    C: sp.csr_matrix
    anchor_dofs: np.ndarray
    newton_tol: float = 1e-6
    max_newton: int = 30


def build_nonlinear_system(mesh: TetMesh, params: MaterialParams,
                           damping: RayleighDamping = RayleighDamping(),
                           density: float = 1000.0) -> NonlinearSystem:
    """Ground-truth Newmark context; Rayleigh damping uses the rest-state K."""
    if not mesh.anchors:
        raise NotPositiveDefiniteError("nonlinear system requires anchors")
    anchors = mesh.anchor_array()
    pre = MeshPrecomp(mesh)
    K0 = assemble_stiffness(mesh, params, np.zeros(3 * mesh.n_nodes), pre, anchored=True)
    masses = np.repeat(lumped_mass(mesh, density), 3)
    M = sp.diags(masses).tocsr()
    C = (damping.alpha * M + damping.beta * K0).tocsr()
    M = apply_anchors(M, anchors)
    C = apply_anchors(C, anchors)
    return NonlinearSystem(mesh=mesh, params=params, pre=pre, M=M, C=C,
                           anchor_dofs=anchor_dof_indices(anchors))


def internal_force(system: NonlinearSystem, u: np.ndarray) -> np.ndarray:
    """Nonlinear internal force f_int(u) = dE/du (anchored rows zeroed)."""
    return -assemble_force(system.mesh, system.params, u, system.pre, anchored=True)


def step_newmark_nonlinear(system: NonlinearSystem, state: SimState,
                           f_ext: np.ndarray, dt: float) -> SimState:
    """One Newmark (gamma=1/2, beta=1/4) step with an inner Newton loop.

    Converges the dynamic residual to 1e-6 * |f_ext| (absolute 1e-10 when the
    load vanishes); raises ConvergenceError on Newton failure.
    """
    g, b = NEWMARK_GAMMA, NEWMARK_BETA
    dofs = system.anchor_dofs
    f = np.array(f_ext, dtype=np.float64, copy=True)
    f[dofs] = 0.0
    u0, v0, a0 = state.u, state.v, state.a
    u_pred = u0 + dt * v0 + dt * dt * (0.5 - b) * a0
    v_pred = v0 + dt * (1.0 - g) * a0

    def kinematics(u):
        a = (u - u_pred) / (b * dt * dt)
        v = v_pred + g * dt * a
        return v, a

    def residual(u):
        v, a = kinematics(u)
        r = system.M @ a + system.C @ v + internal_force(system, u) - f
        r[dofs] = 0.0
        return r

    tol = max(system.newton_tol * np.linalg.norm(f), 1e-10)
    u = u0.copy()
    u[dofs] = 0.0
    r = residual(u)
    for _ in range(system.max_newton):
        rnorm = np.linalg.norm(r)
        if rnorm <= tol:
            v, a = kinematics(u)
            for vec in (u, v, a):
                vec[dofs] = 0.0
            return SimState(u=u, v=v, a=a, t=state.t + dt)
        K = assemble_stiffness(system.mesh, system.params, u, system.pre, anchored=True)
        J = (system.M / (b * dt * dt) + system.C * (g / (b * dt)) + K).tocsc()
        delta = spla.splu(J).solve(-r)
        delta[dofs] = 0.0
        # Armijo backtracking on phi(s) = 0.5|r|^2; phi'(0) = -2 phi(0)
        s = 1.0
        phi0 = 0.5 * rnorm * rnorm
        accepted = False
        while s >= 1e-12:
            u_try = u + s * delta
            r_try = residual(u_try)
            if 0.5 * float(r_try @ r_try) <= phi0 * (1.0 - 2e-4 * s):
                u, r = u_try, r_try
                accepted = True
                break
            s *= 0.5
        if not accepted:
            raise ConvergenceError("Newmark inner Newton line search failed",
                                   residual=float(rnorm))
    raise ConvergenceError(
        f"Newmark inner Newton did not converge in {system.max_newton} iterations",
        residual=float(np.linalg.norm(r)))


def write_trajectory_csv(stream, times, tracked_nodes, displacements,
                         header_lines=()) -> None:
    """Trajectory output: one `t,node,ux,uy,uz` row per tracked node per step."""
    for line in header_lines:
        stream.write(f"# {line}\n")
    stream.write("t,node,ux,uy,uz\n")
    for t, u in zip(times, displacements):
        x = u.reshape(-1, 3)
        for node in tracked_nodes:
            p = x[node]
            stream.write(f"{t:.10g},{node},{p[0]:.10g},{p[1]:.10g},{p[2]:.10g}\n")
