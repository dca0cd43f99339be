"""Runtime warping: learned per-node correction of a pre-factorized linear
solve, plus the modal-warping (MW) and rotation-strain-warping (RSW)
geometric baselines and a method-comparison harness.

Each step: (1) external forces are un-rotated per node by the cached local
rotation of the previous step, (2) one back-substitution advances the linear
state, (3) every node's (u_lin, w) pair is canonicalized, fed through the
network, and the output (minus the rest-state calibration offset) is rotated
back and added to the linear displacement. No factorization happens during
stepping.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import (ConvergenceError, IntegrationScheme, LinearSystem,
                       RayleighDamping, SimState, build_linear_system,
                       build_nonlinear_system, step_linear_implicit,
                       step_newmark_nonlinear)
from .features import (ForceField, StaticFeatureSet, align_batch,
                       assemble_features_batch, force_vector, geodesic_all,
                       static_features)
from .material import MaterialParams
from .mesh import TetMesh, node_adjacency
from .net import MlpNetwork, forward_batch
from .registration import (gradient_operator, rotations_from_vectors,
                           rotation_vectors_from_displacement)

# Composite Simpson intervals for the modal-warp average-rotation integral.
# 32 intervals cannot reach the 1e-10 oracle tolerance at |w| = pi, so the
# fixed rule uses 512 (error ~ |w|^4 / (180 * 512^4)).
MW_SIMPSON_INTERVALS = 512


class ExtrapolationWarning(UserWarning):
    """A runtime feature fell outside the trained range."""


@dataclass
class WarpContext:
    """Per-simulation runtime bundle for learned warping."""

    mesh: TetMesh
    system: LinearSystem
    net: MlpNetwork
    static: StaticFeatureSet
    field_descr: ForceField
    grad_op: sp.csr_matrix
    poisson: float
    rest_offset: np.ndarray            # (n, 3) network output at rest features
    rotation_cache: np.ndarray         # (n, 3, 3)
    free_mask: np.ndarray              # (n,) bool, False at anchors
    geo: object = None
    extrapolation_zmax: float = 6.0
    extrapolation_events: int = 0
    warn_on_extrapolation: bool = True

    @property
    def dt(self) -> float:
        return self.system.dt

    def reset(self) -> SimState:
        self.rotation_cache = np.broadcast_to(
            np.eye(3), (self.mesh.n_nodes, 3, 3)).copy()
        return SimState.rest(self.mesh.n_nodes)

    def update_field(self, field_descr: ForceField) -> None:
        """Re-derive direction-dependent features (and the rest calibration)
        for a new field orientation; the geodesic part is direction-free."""
        self.field_descr = field_descr
        self.static = static_features(self.mesh, field_descr, geo=self.geo)
        self.rest_offset = _rest_outputs(self.net, self.static, self.poisson)

    def correct(self, u_lin: np.ndarray):
        """O(n) learned correction of a linear displacement.

        Returns (u_corrected flat (3n,), w (n,3)).
        """
        w = rotation_vectors_from_displacement(self.grad_op, u_lin)
        U = u_lin.reshape(-1, 3)
        u_mag, w_mag, angle, Q = align_batch(U, w)
        X = assemble_features_batch(u_mag, w_mag, angle, self.static, self.poisson)
        Z = self.net.scaler.transform(X)
        over = np.abs(Z).max(axis=1) > self.extrapolation_zmax
        if np.any(over):
            self.extrapolation_events += int(np.count_nonzero(over))
            if self.warn_on_extrapolation:
                warnings.warn(
                    f"{int(np.count_nonzero(over))} node feature(s) outside the "
                    "trained range; extrapolating", ExtrapolationWarning)
        Y = forward_batch(self.net.weights, Z, self.net.spec.activation)
        Y = Y - self.rest_offset
        delta = np.einsum("npq,np->nq", Q, Y)      # Q^T y per node
        u = U + np.where(self.free_mask[:, None], delta, 0.0)
        u[~self.free_mask] = 0.0
        return u.ravel(), w


def _rest_outputs(net: MlpNetwork, static: StaticFeatureSet, poisson: float) -> np.ndarray:
    n = len(static.g)
    zeros = np.zeros(n)
    X = assemble_features_batch(zeros, zeros, zeros, static, poisson)
    return forward_batch(net.weights, net.scaler.transform(X), net.spec.activation)


def build_warp_context(mesh: TetMesh, params: MaterialParams, net: MlpNetwork,
                       field_descr: ForceField, dt: float,
                       scheme: IntegrationScheme = IntegrationScheme.NEWMARK,
                       damping: RayleighDamping = RayleighDamping(),
                       density: float = 1000.0) -> WarpContext:
    """Assemble the linear system once and precompute all per-node statics."""
    adjacency = node_adjacency(mesh)
    system = build_linear_system(mesh, params.as_linear(), dt, scheme, damping, density)
    grad_op = gradient_operator(mesh, adjacency)
    geo = geodesic_all(mesh, adjacency)
    static = static_features(mesh, field_descr, adjacency, geo)
    rest_offset = _rest_outputs(net, static, params.poisson)
    free = np.ones(mesh.n_nodes, dtype=bool)
    if mesh.anchors:
        free[mesh.anchor_array()] = False
    ctx = WarpContext(mesh=mesh, system=system, net=net, static=static,
                      field_descr=field_descr, grad_op=grad_op,
                      poisson=params.poisson, rest_offset=rest_offset,
                      rotation_cache=np.broadcast_to(np.eye(3),
                                                     (mesh.n_nodes, 3, 3)).copy(),
                      free_mask=free, geo=geo)
    return ctx


def deepwarp_step(ctx: WarpContext, state: SimState, f_ext: np.ndarray,
                  dt: float | None = None):
    """One warped step: un-rotate forces, one linear solve, learned fix.

    Returns (next linear SimState, corrected nonlinear displacement (3n,)).
    """
    if dt is not None and abs(dt - ctx.dt) > 1e-15:
        raise ValueError(f"step dt {dt} does not match the prefactorized dt {ctx.dt}")
    f = np.einsum("nqp,nq->np", ctx.rotation_cache, f_ext.reshape(-1, 3)).ravel()
    new_state = step_linear_implicit(ctx.system, state, f)
    u, w = ctx.correct(new_state.u)
    R = rotations_from_vectors(w)
    R[~ctx.free_mask] = np.eye(3)
    ctx.rotation_cache = R
    return new_state, u


def run_deepwarp(ctx: WarpContext, steps: int, f_ext: np.ndarray | None = None):
    """Drive a fresh simulation for ``steps`` steps under a constant load."""
    if f_ext is None:
        f_ext = force_vector(ctx.mesh, ctx.field_descr)
    state = ctx.reset()
    out = []
    for _ in range(steps):
        state, u = deepwarp_step(ctx, state, f_ext)
        out.append(u)
    return out


# ---------------------------------------------------------------------------
# geometric warping baselines
# ---------------------------------------------------------------------------

def _simpson_weights(n_intervals: int) -> tuple[np.ndarray, np.ndarray]:
    if n_intervals % 2:
        raise ValueError("composite Simpson needs an even interval count")
    s = np.linspace(0.0, 1.0, n_intervals + 1)
    w = np.ones(n_intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= (1.0 / n_intervals) / 3.0
    return s, w


def mw_average_rotation(w: np.ndarray,
                        n_intervals: int = MW_SIMPSON_INTERVALS) -> np.ndarray:
    """Average rotation int_0^1 exp(s [w]x) ds by fixed Simpson quadrature.

    The integrand is I + sin(s t)/t [w]x + (1 - cos(s t))/t^2 [w]x^2 for
    t = |w|, so the quadrature acts on the two scalar coefficient functions.
    """
    w = np.asarray(w, dtype=np.float64)
    t = float(np.linalg.norm(w))
    s, wt = _simpson_weights(n_intervals)
    if t < 1e-12:
        K = _skew(w)
        c1 = float(wt @ s)                  # -> 1/2 as t -> 0
        c2 = float(wt @ (0.5 * s * s))      # -> 1/6
        return np.eye(3) + c1 * K + c2 * (K @ K)
    K = _skew(w / t)
    c1 = float(wt @ np.sin(s * t))
    c2 = float(wt @ (1.0 - np.cos(s * t)))
    return np.eye(3) + c1 * K + c2 * (K @ K)


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def mw_warp(mesh: TetMesh, u_lin: np.ndarray,
            grad_op: sp.csr_matrix | None = None) -> np.ndarray:
    """Modal warping: per node, apply the averaged-rotation transform to u_lin."""
    grad_op = grad_op if grad_op is not None else gradient_operator(mesh)
    w = rotation_vectors_from_displacement(grad_op, u_lin)
    U = u_lin.reshape(-1, 3)
    t = np.linalg.norm(w, axis=1)
    s, wt = _simpson_weights(MW_SIMPSON_INTERVALS)
    small = t < 1e-12
    t_safe = np.where(small, 1.0, t)
    axis = np.where(small[:, None], w, w / t_safe[:, None])
    st = s[None, :] * t_safe[:, None]
    c1 = np.where(small, float(wt @ s), np.sin(st) @ wt)
    c2 = np.where(small, float(wt @ (0.5 * s * s)), (1.0 - np.cos(st)) @ wt)
    K = np.zeros((len(U), 3, 3))
    K[:, 0, 1] = -axis[:, 2]
    K[:, 0, 2] = axis[:, 1]
    K[:, 1, 0] = axis[:, 2]
    K[:, 1, 2] = -axis[:, 0]
    K[:, 2, 0] = -axis[:, 1]
    K[:, 2, 1] = axis[:, 0]
    W = np.eye(3) + c1[:, None, None] * K + c2[:, None, None] * (K @ K)
    out = np.einsum("npq,nq->np", W, U)
    if mesh.anchors:
        out[mesh.anchor_array()] = 0.0
    return out.ravel()


def rsw_warp(mesh: TetMesh, u_lin: np.ndarray,
             grad_op: sp.csr_matrix | None = None) -> np.ndarray:
    """Rotation-strain warping via an anchored global least-squares fit.

    Per node the target gradient is exp([w]x)(S + I) - I; the displacement
    reconstructing those gradients is the minimizer of
    sum_i |G_i(u) - Ghat_i|^2 with anchored nodes pinned at zero.
    """
    if not mesh.anchors:
        raise ValueError("rotation-strain warp requires anchors")
    grad_op = grad_op if grad_op is not None else gradient_operator(mesh)
    G = (grad_op @ u_lin).reshape(-1, 3, 3)
    S = 0.5 * (G + np.swapaxes(G, 1, 2))
    w = 0.5 * np.stack([G[:, 2, 1] - G[:, 1, 2],
                        G[:, 0, 2] - G[:, 2, 0],
                        G[:, 1, 0] - G[:, 0, 1]], axis=1)
    R = rotations_from_vectors(w)
    Ghat = R @ (S + np.eye(3)) - np.eye(3)

    free = np.ones(3 * mesh.n_nodes, dtype=bool)
    free[(mesh.anchor_array()[:, None] * 3 + np.arange(3)).ravel()] = False
    E = grad_op[:, free]
    A = (E.T @ E).tocsc()
    b = E.T @ Ghat.reshape(-1)
    try:
        sol = spla.splu(A).solve(b)
    except RuntimeError as exc:
        raise ValueError(f"rotation-strain fit is singular (insufficient anchors): {exc}")
    u = np.zeros(3 * mesh.n_nodes)
    u[free] = sol
    return u


# ---------------------------------------------------------------------------
# method comparison
# ---------------------------------------------------------------------------

@dataclass
class MethodSummary:
    method: str
    mean_rel_l2: float
    max_rel_l2: float
    dominant_frequency: float


@dataclass
class ComparisonReport:
    rows: list[tuple[str, int, float]] = field(default_factory=list)
    summaries: list[MethodSummary] = field(default_factory=list)
    trajectories: dict[str, np.ndarray] = field(default_factory=dict)
    times: np.ndarray | None = None
    tracked_node: int = 0
    completed: bool = True
    note: str | None = None


def dominant_frequency(signal: np.ndarray, dt: float, pad_factor: int = 8) -> float:
    """Peak non-DC frequency of a scalar signal via the real FFT.

    Zero-padding interpolates the spectrum so the peak is located more finely
    than the raw 1/T bin width.
    """
    x = np.asarray(signal, dtype=np.float64)
    x = x - x.mean()
    n = max(int(pad_factor) * len(x), len(x))
    spec = np.abs(np.fft.rfft(x, n=n))
    if len(spec) < 2 or spec.max() <= 1e-14 * max(np.abs(x).max(), 1e-300) * len(x):
        return 0.0
    k = 1 + int(np.argmax(spec[1:]))
    return float(np.fft.rfftfreq(n, dt)[k])


def compare_methods(mesh: TetMesh, params: MaterialParams, field_descr: ForceField,
                    net: MlpNetwork | None, steps: int, dt: float,
                    damping: RayleighDamping = RayleighDamping(),
                    density: float = 1000.0, tracked_node: int | None = None,
                    methods: tuple[str, ...] = ("linear", "mw", "rsw", "deepwarp"),
                    scheme: IntegrationScheme = IntegrationScheme.NEWMARK
                    ) -> ComparisonReport:
    """Run ground truth plus the requested methods on one force script.

    Emits per-step relative L2 errors against the nonlinear reference and the
    tracked node's trajectory per method. Ground-truth divergence yields a
    partial report flagged ``completed=False``.
    """
    if "deepwarp" in methods and net is None:
        raise ValueError("deepwarp method requires a trained network")
    report = ComparisonReport()
    f_ext = force_vector(mesh, field_descr, density)
    adjacency = node_adjacency(mesh)
    grad_op = gradient_operator(mesh, adjacency)

    nsys = build_nonlinear_system(mesh, params, damping, density)
    gt_states = []
    state = SimState.rest(mesh.n_nodes)
    gt = []
    try:
        for _ in range(steps):
            state = step_newmark_nonlinear(nsys, state, f_ext, dt)
            gt.append(state.u.copy())
            gt_states.append(state)
    except ConvergenceError as exc:
        report.completed = False
        report.note = f"ground truth diverged after {len(gt)} steps: {exc}"
    n_ok = len(gt)
    if n_ok == 0:
        return report
    gt_arr = np.array(gt)
    report.trajectories["groundtruth"] = gt_arr

    lin_system = build_linear_system(mesh, params.as_linear(), dt, scheme,
                                     damping, density)
    lin_state = SimState.rest(mesh.n_nodes)
    lin = []
    for _ in range(n_ok):
        lin_state = step_linear_implicit(lin_system, lin_state, f_ext)
        lin.append(lin_state.u.copy())

    outputs: dict[str, list[np.ndarray]] = {}
    if "linear" in methods:
        outputs["linear"] = lin
    if "mw" in methods:
        outputs["mw"] = [mw_warp(mesh, u, grad_op) for u in lin]
    if "rsw" in methods:
        outputs["rsw"] = [rsw_warp(mesh, u, grad_op) for u in lin]
    if "deepwarp" in methods:
        ctx = build_warp_context(mesh, params, net, field_descr, dt, scheme,
                                 damping, density)
        outputs["deepwarp"] = run_deepwarp(ctx, n_ok, f_ext)

    if tracked_node is None:
        amp = np.linalg.norm(gt_arr.reshape(n_ok, -1, 3), axis=2).max(axis=0)
        tracked_node = int(np.argmax(amp))
    report.tracked_node = tracked_node

    for name, traj in outputs.items():
        arr = np.array(traj)
        report.trajectories[name] = arr
        errs = []
        for k in range(n_ok):
            denom = max(float(np.linalg.norm(gt_arr[k])), 1e-30)
            rel = float(np.linalg.norm(arr[k] - gt_arr[k])) / denom
            report.rows.append((name, k, rel))
            errs.append(rel)
        comp = _dominant_component(arr, tracked_node)
        report.summaries.append(MethodSummary(
            method=name, mean_rel_l2=float(np.mean(errs)),
            max_rel_l2=float(np.max(errs)),
            dominant_frequency=dominant_frequency(comp, dt)))
    gt_comp = _dominant_component(gt_arr, tracked_node)
    report.summaries.append(MethodSummary(
        method="groundtruth", mean_rel_l2=0.0, max_rel_l2=0.0,
        dominant_frequency=dominant_frequency(gt_comp, dt)))
    report.times = dt * np.arange(1, n_ok + 1)
    return report


def _dominant_component(traj: np.ndarray, node: int) -> np.ndarray:
    """Trajectory component of a node with the largest variance."""
    sig = traj[:, 3 * node:3 * node + 3]
    return sig[:, int(np.argmax(sig.var(axis=0)))]


def time_correction(ctx: WarpContext, u_lin: np.ndarray, repeats: int = 5) -> float:
    """Median wall time of the O(n) warp correction, for scaling audits."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        ctx.correct(u_lin)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
