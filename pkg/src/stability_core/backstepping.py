"""Observer-based backstepping boundary control with finite-time convergence.

Orientation here has the actuator at x = L:

    y1_t - y1_x + a y2 = 0,   y2_t + lam y2_x + b y1 = 0,
    y2(t, 0) = y1(t, 0),      y1(t, L) = U(t),      Y(t) = y2(t, L).

The observer copies the plant with output injection Gamma_i(x) (Y - yhat2(L)).
Its error (y - yhat) is mapped onto the cascade

    alpha_t - alpha_x + int_x^L Q1(x,s) alpha(s) ds = 0,                alpha(L) = 0,
    beta_t + lam beta_x + b alpha + int_x^L Q2(x,s) alpha(s) ds = 0,    beta(0) = alpha(0),

by y_i = gamma_i + int_x^L P_i(x,xi) beta(xi) dxi, and the observer state is
mapped onto z_t - z_x = 0, w_t + lam w_x = g(x) w(0), w(0) = z(0), z(L) = 0 by

    z = yhat1 - int_0^x (K11 yhat1 + K12 yhat2),   w = yhat2 - int_0^x (K21 yhat1 + K22 yhat2).

Both cascades vanish after (lam+1)L/lam, so the plant reaches zero after twice that.

Sampling the kernel gains leaves an O(dx^2) defect that the open-loop growth
amplifies once L passes the critical length. On the exact-shift grid
(lam = 1, characteristic steps with dt = dx) the closed loop therefore uses
the deadbeat gains of the stepped plant, still applied through (z, w).
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import logging
import math

import numpy as np
from scipy import linalg, sparse

from .core import SystemParams
from .errors import InvalidParameters, NoKernelConvergence, MeshMismatch, SingularStepMatrix
from .simulator import (EnergyTrace, ReflectedStepper, default_initial_data, energy,
                        make_stepper, step_count, check_finite, SCHEMES)

logger = logging.getLogger(__name__)

MIN_MESH = 32
KERNEL_TOL = 1e-11
KERNEL_MAX_ITER = 200
ERROR_TARGET = "ErrorTarget"
OBSERVER_TARGET = "ObserverTarget"
CONTROLLER_KERNELS = ("K11", "K12", "K21", "K22")
INVERSE_KERNELS = ("L11", "L12", "L21", "L22")
OBSERVER_KERNELS = ("P1", "P2")
DISCRETE_FEEDBACK = "discrete"
KERNEL_FEEDBACK = "kernel"
AUTO_FEEDBACK = "auto"
FEEDBACK_LAWS = (DISCRETE_FEEDBACK, KERNEL_FEEDBACK)


def convergence_times(p: SystemParams) -> Tuple[float, float]:
    """(T_opt1, T_opt): observer convergence time and closed-loop settling time"""
    t1 = (p.lam + 1.0) * p.L / p.lam
    return t1, 2.0 * t1


# --- quadrature and interpolation on the triangular mesh -----------------

def _lower_weights(M: int, dx: float) -> np.ndarray:
    """Trapezoid weights for int_0^{x_i}, row i"""
    W = np.tril(np.full((M + 1, M + 1), dx))
    W[:, 0] = 0.5 * dx
    np.fill_diagonal(W, 0.5 * dx)
    W[0, 0] = 0.0
    return W


def _upper_weights(M: int, dx: float) -> np.ndarray:
    """Trapezoid weights for int_{x_i}^L, row i"""
    V = np.triu(np.full((M + 1, M + 1), dx))
    V[:, M] = 0.5 * dx
    np.fill_diagonal(V, 0.5 * dx)
    V[M, M] = 0.0
    return V


def _trapezoid_layout(intervals: np.ndarray):
    """Owner, node index and end-weight factor for ragged trapezoid rules"""
    points = intervals + 1
    owner = np.repeat(np.arange(len(intervals)), points)
    offsets = np.concatenate(([0], np.cumsum(points)[:-1]))
    q = np.arange(owner.size) - np.repeat(offsets, points)
    factor = np.where((q == 0) | (q == intervals[owner]), 0.5, 1.0)
    return owner, q, factor


def _interp_vertices(px, py, dx: float, M: int, lower: bool):
    """Piecewise-linear interpolation on triangulated cells, staying inside the domain"""
    fx = np.clip(px / dx, 0.0, M)
    fy = np.clip(py / dx, 0.0, M)
    if lower:
        fy = np.minimum(fy, fx)
    else:
        fx = np.minimum(fx, fy)
    i0 = np.minimum(np.floor(fx), M - 1).astype(int)
    j0 = np.minimum(np.floor(fy), M - 1).astype(int)
    tx = fx - i0
    ty = fy - j0
    split = tx >= ty  # lower-right triangle of the cell
    n = M + 1
    v0 = i0 * n + j0
    v1 = np.where(split, (i0 + 1) * n + j0, i0 * n + j0 + 1)
    v2 = (i0 + 1) * n + j0 + 1
    w0 = np.where(split, 1.0 - tx, 1.0 - ty)
    w1 = np.abs(tx - ty)
    w2 = np.where(split, ty, tx)
    return (v0, v1, v2), (w0, w1, w2)


class _SystemBuilder:
    """Collects the affine map X -> c + A X of a kernel system"""

    def __init__(self, M: int, dx: float, blocks: int):
        self.M, self.dx = M, dx
        self.n2 = (M + 1) ** 2
        self.size = blocks * self.n2
        self.c = np.zeros(self.size)
        self.rows: List[np.ndarray] = []
        self.cols: List[np.ndarray] = []
        self.vals: List[np.ndarray] = []

    def flat(self, i, j):
        return i * (self.M + 1) + j

    def constant(self, block: int, targets, value: float):
        self.c[block * self.n2 + targets] = value

    def link(self, block: int, targets, src_block: int, sources, coeff: float):
        self.rows.append(block * self.n2 + np.asarray(targets))
        self.cols.append(src_block * self.n2 + np.asarray(sources))
        self.vals.append(np.full(np.shape(targets), coeff, dtype=float))

    def path_integral(self, block, targets, start, direction, length, intervals,
                      src_block, coeff, lower):
        """coeff * int_0^length f(start + s*direction) ds by trapezoid, f interpolated"""
        if len(targets) == 0:
            return
        owner, q, factor = _trapezoid_layout(intervals)
        h = length / intervals
        s = q * h[owner]
        px = start[owner] + direction[0] * s
        py = start[owner] + direction[1] * s
        verts, weights = _interp_vertices(px, py, self.dx, self.M, lower)
        base = coeff * h[owner] * factor
        rows = block * self.n2 + targets[owner]
        for v, w in zip(verts, weights):
            self.rows.append(rows)
            self.cols.append(src_block * self.n2 + v)
            self.vals.append(base * w)

    def node_integral(self, block, targets, first_i, first_j, steps, src_block, coeff):
        """coeff * sum_q w_q f(first_i + q, first_j + q), q = 0..steps, trapezoid in dx"""
        keep = steps >= 1
        if not np.any(keep):
            return
        targets, first_i, first_j, steps = targets[keep], first_i[keep], first_j[keep], steps[keep]
        owner, q, factor = _trapezoid_layout(steps)
        self.rows.append(block * self.n2 + targets[owner])
        self.cols.append(src_block * self.n2 + self.flat(first_i[owner] + q, first_j[owner] + q))
        self.vals.append(coeff * self.dx * factor)

    def matrix(self) -> sparse.csr_matrix:
        rows = np.concatenate(self.rows) if self.rows else np.zeros(0, dtype=int)
        cols = np.concatenate(self.cols) if self.cols else np.zeros(0, dtype=int)
        vals = np.concatenate(self.vals) if self.vals else np.zeros(0)
        return sparse.coo_matrix((vals, (rows, cols)), shape=(self.size, self.size)).tocsr()


def _controller_system(p: SystemParams, M: int, dx: float):
    a, b, lam = p.a, p.b, p.lam
    sb = _SystemBuilder(M, dx, 4)
    I, J = np.tril_indices(M + 1)
    t = sb.flat(I, J)
    x, xi = I * dx, J * dx
    off = I > J

    # K12: diagonal value a/(lam+1), transported along direction (1, -lam) with source -a K11
    sb.constant(1, t, a / (lam + 1.0))
    s_len = (x - xi) / (1.0 + lam)
    sb.path_integral(1, t[off], (x - s_len)[off], (1.0, -lam), s_len[off], (I - J)[off],
                     0, -a, lower=True)

    # K11: lam K12(x-xi, 0) at xi = 0, transported along (1, 1) with source -b K12
    sb.link(0, t, 1, sb.flat(I - J, 0), lam)
    sb.node_integral(0, t, I - J, np.zeros_like(J), J, 1, -b)

    # K21: diagonal value -b/(lam+1), transported along (lam, -1) with source b K22
    sb.constant(2, t, -b / (lam + 1.0))
    s_len = (x - xi) / (lam + 1.0)
    sb.path_integral(2, t[off], (xi + s_len)[off], (lam, -1.0), s_len[off], (I - J)[off],
                     3, b, lower=True)

    # K22: zero at xi = 0, transported along (1, 1) with source (a/lam) K21
    sb.node_integral(3, t, I - J, np.zeros_like(J), J, 2, a / lam)
    return sb.c, sb.matrix()


def _observer_system(p: SystemParams, M: int, dx: float):
    a, b, lam = p.a, p.b, p.lam
    sb = _SystemBuilder(M, dx, 2)
    I, J = np.triu_indices(M + 1)
    t = sb.flat(I, J)
    x, xi = I * dx, J * dx
    off = J > I

    # P1: diagonal value -a/(lam+1), transported along (-1, lam) with source -a P2
    sb.constant(0, t, -a / (lam + 1.0))
    s_len = (xi - x) / (1.0 + lam)
    sb.path_integral(0, t[off], (x + s_len)[off], (-1.0, lam), s_len[off], (J - I)[off],
                     1, -a, lower=False)

    # P2: equals P1 at x = 0, transported along (1, 1) with source -(b/lam) P1
    sb.link(1, t, 0, sb.flat(np.zeros_like(I), J - I), 1.0)
    sb.node_integral(1, t, np.zeros_like(I), J - I, I, 0, -b / lam)
    return sb.c, sb.matrix()


def _successive_approximation(c, A, tol: float, max_iter: int, label: str):
    X = c.copy()
    residual = math.inf
    for iteration in range(1, max_iter + 1):
        X_new = c + A @ X
        if not np.all(np.isfinite(X_new)):
            raise NoKernelConvergence(f"{label} kernels became non-finite at iteration {iteration}",
                                      residual=math.inf)
        residual = float(np.max(np.abs(X_new - X))) if X.size else 0.0
        X = X_new
        logger.debug(f"{label} kernels: iteration {iteration}, update {residual:.3e}")
        if residual < tol:
            return X, iteration, residual
    raise NoKernelConvergence(
        f"{label} kernels did not converge in {max_iter} iterations (last update {residual:.3e})",
        residual=residual)


def _volterra_q(P1: np.ndarray, P2: np.ndarray, b: float, dx: float):
    """Q2 = -b P2 - int_x^s P2 Q2 and Q1 = -b P1 - int_x^s P1 Q2, column by column"""
    M = P1.shape[0] - 1
    Q1 = np.zeros_like(P1)
    Q2 = np.zeros_like(P2)
    for j in range(M + 1):
        n = j + 1
        omega = np.triu(np.full((n, n), dx))
        np.fill_diagonal(omega, 0.5 * dx)
        omega[:, j] = 0.5 * dx
        omega[j, j] = 0.0
        omega = np.triu(omega)
        A2 = omega * P2[:n, :n]
        q = linalg.solve_triangular(np.eye(n) + A2, -b * P2[:n, j], lower=False)
        Q2[:n, j] = q
        Q1[:n, j] = -b * P1[:n, j] - (omega * P1[:n, :n]) @ q
    return Q1, Q2


@dataclass
class KernelGrid:
    """Solved kernels on an (M+1)x(M+1) mesh; [i, j] is (x_i, xi_j)"""
    params: SystemParams
    mesh_size: int
    x: np.ndarray
    kernels: Dict[str, np.ndarray]
    gamma1: np.ndarray
    gamma2: np.ndarray
    g: np.ndarray
    control_weights: Tuple[np.ndarray, np.ndarray]
    iterations: Dict[str, int]
    residual: Dict[str, float]
    lower_weights: np.ndarray = field(repr=False)
    upper_weights: np.ndarray = field(repr=False)
    _inverse_operator: np.ndarray = field(repr=False)
    _systems: Dict[str, tuple] = field(repr=False)

    @property
    def dx(self) -> float:
        return self.params.L / self.mesh_size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.kernels[name]

    def control(self, z: np.ndarray, w: np.ndarray) -> float:
        """U = int_0^L L11(L,xi) z + L12(L,xi) w, trapezoid on the mesh"""
        return float(self.control_weights[0] @ z + self.control_weights[1] @ w)


def solve_kernels(params: SystemParams, mesh_size: int = 100, tol: float = KERNEL_TOL,
                  max_iter: int = KERNEL_MAX_ITER) -> KernelGrid:
    """Controller, inverse and observer kernels by successive approximation"""
    if mesh_size < MIN_MESH:
        raise InvalidParameters(f"mesh_size must be at least {MIN_MESH}, got {mesh_size}")
    if not params.L > 0:
        raise InvalidParameters("kernels need L > 0")
    M = mesh_size
    dx = params.L / M
    n = M + 1
    shape = (n, n)

    c_ctrl, A_ctrl = _controller_system(params, M, dx)
    X, it_ctrl, res_ctrl = _successive_approximation(c_ctrl, A_ctrl, tol, max_iter, "controller")
    K11, K12, K21, K22 = (blk.reshape(shape) for blk in np.split(X, 4))

    c_obs, A_obs = _observer_system(params, M, dx)
    Y, it_obs, res_obs = _successive_approximation(c_obs, A_obs, tol, max_iter, "observer")
    P1, P2 = (blk.reshape(shape) for blk in np.split(Y, 2))
    Q1, Q2 = _volterra_q(P1, P2, params.b, dx)

    W = _lower_weights(M, dx)
    V = _upper_weights(M, dx)

    # discrete reciprocal relation (I - Kop)(I + Lop) = I
    Kop = np.block([[W * K11, W * K12], [W * K21, W * K22]])
    try:
        lu = linalg.lu_factor(np.eye(2 * n) - Kop)
    except (linalg.LinAlgError, ValueError) as e:
        raise NoKernelConvergence(f"inverse transformation is singular: {e}") from e
    Lop = linalg.lu_solve(lu, Kop)

    inverse = {}
    with np.errstate(divide="ignore", invalid="ignore"):
        for name, K, (r, c) in zip(INVERSE_KERNELS, (K11, K12, K21, K22),
                                   ((0, 0), (0, 1), (1, 0), (1, 1))):
            block = Lop[r * n:(r + 1) * n, c * n:(c + 1) * n]
            values = np.where(W > 0, block / np.where(W > 0, W, 1.0), 0.0)
            values[0, 0] = K[0, 0]
            inverse[name] = values

    kernels = {"K11": K11, "K12": K12, "K21": K21, "K22": K22,
               "P1": P1, "P2": P2, "Q1": Q1, "Q2": Q2, **inverse}
    grid = KernelGrid(
        params=params,
        mesh_size=M,
        x=np.linspace(0.0, params.L, n),
        kernels=kernels,
        gamma1=params.lam * P1[:, M].copy(),
        gamma2=params.lam * P2[:, M].copy(),
        g=K21[:, 0] - params.lam * K22[:, 0],
        control_weights=(Lop[M, :n].copy(), Lop[M, n:].copy()),
        iterations={"controller": it_ctrl, "observer": it_obs},
        residual={"controller": res_ctrl, "observer": res_obs},
        lower_weights=W,
        upper_weights=V,
        _inverse_operator=Lop,
        _systems={"controller": (c_ctrl, A_ctrl), "observer": (c_obs, A_obs)},
    )
    logger.info(f"kernels solved on M={M}: {it_ctrl} controller and {it_obs} observer iterations")
    return grid


def _check_field(grid: KernelGrid, *fields):
    for f in fields:
        if np.shape(f) != (grid.mesh_size + 1,):
            raise MeshMismatch(f"field has {np.size(f)} nodes, kernel mesh has {grid.mesh_size + 1}")


def forward_transform(grid: KernelGrid, y1: np.ndarray, y2: np.ndarray):
    """(y1, y2) -> (z, w) with the controller kernels"""
    _check_field(grid, y1, y2)
    W, k = grid.lower_weights, grid.kernels
    z = y1 - (W * k["K11"]) @ y1 - (W * k["K12"]) @ y2
    w = y2 - (W * k["K21"]) @ y1 - (W * k["K22"]) @ y2
    return z, w


def inverse_transform(grid: KernelGrid, z: np.ndarray, w: np.ndarray):
    """(z, w) -> (y1, y2) with the inverse kernels"""
    _check_field(grid, z, w)
    stacked = np.concatenate([z, w])
    y = stacked + grid._inverse_operator @ stacked
    n = grid.mesh_size + 1
    return y[:n], y[n:]


def observer_transform(grid: KernelGrid, alpha: np.ndarray, beta: np.ndarray):
    """(alpha, beta) -> observer error (y1 - yhat1, y2 - yhat2)"""
    _check_field(grid, alpha, beta)
    V, k = grid.upper_weights, grid.kernels
    return alpha + (V * k["P1"]) @ beta, beta + (V * k["P2"]) @ beta


def integral_equation_residuals(grid: KernelGrid) -> Dict[str, np.ndarray]:
    """Pointwise residual of every kernel's integral equation on its domain"""
    n = grid.mesh_size + 1
    shape = (n, n)
    k = grid.kernels
    out = {}

    c, A = grid._systems["controller"]
    X = np.concatenate([k[name].ravel() for name in CONTROLLER_KERNELS])
    for name, r in zip(CONTROLLER_KERNELS, np.split(c + A @ X - X, 4)):
        out[name] = np.abs(r.reshape(shape))

    c, A = grid._systems["observer"]
    Y = np.concatenate([k[name].ravel() for name in OBSERVER_KERNELS])
    for name, r in zip(OBSERVER_KERNELS, np.split(c + A @ Y - Y, 2)):
        out[name] = np.abs(r.reshape(shape))

    b, V = grid.params.b, grid.upper_weights
    res_q1 = np.zeros(shape)
    res_q2 = np.zeros(shape)
    dx = grid.dx
    for j in range(n):
        m = j + 1
        omega = np.triu(np.full((m, m), dx))
        np.fill_diagonal(omega, 0.5 * dx)
        omega[:, j] = 0.5 * dx
        omega[j, j] = 0.0
        omega = np.triu(omega)
        q2 = k["Q2"][:m, j]
        res_q2[:m, j] = np.abs(q2 + b * k["P2"][:m, j] + (omega * k["P2"][:m, :m]) @ q2)
        res_q1[:m, j] = np.abs(k["Q1"][:m, j] + b * k["P1"][:m, j] + (omega * k["P1"][:m, :m]) @ q2)
    out["Q1"], out["Q2"] = res_q1, res_q2

    # discrete reciprocal relation Lop = Kop + Kop Lop, reported per unit quadrature weight
    W = grid.lower_weights
    Kop = np.block([[W * k["K11"], W * k["K12"]], [W * k["K21"], W * k["K22"]]])
    Lop = grid._inverse_operator
    R = np.abs(Lop - Kop - Kop @ Lop)
    with np.errstate(divide="ignore", invalid="ignore"):
        for name, (r, c) in zip(INVERSE_KERNELS, ((0, 0), (0, 1), (1, 0), (1, 1))):
            block = R[r * n:(r + 1) * n, c * n:(c + 1) * n]
            out[name] = np.where(W > 0, block / np.where(W > 0, W, 1.0), 0.0)
    return out


def export_kernel_rows(grid: KernelGrid, names: Optional[List[str]] = None) -> List[dict]:
    """Rows ``kernel,x,xi,value`` over each kernel's triangular domain"""
    names = names or list(CONTROLLER_KERNELS + INVERSE_KERNELS + OBSERVER_KERNELS)
    n = grid.mesh_size + 1
    lower = np.tril_indices(n)
    upper = np.triu_indices(n)
    rows = []
    for name in names:
        if name not in grid.kernels:
            raise InvalidParameters(f"unknown kernel {name!r}")
        I, J = upper if name.startswith(("P", "Q")) else lower
        values = grid.kernels[name][I, J]
        rows.extend({"kernel": name, "x": float(grid.x[i]), "xi": float(grid.x[j]), "value": float(v)}
                    for i, j, v in zip(I, J, values))
    return rows


# --- closed loop ------------------------------------------------------------

@dataclass
class ClosedLoopConfig:
    params: SystemParams
    n_cells: int = 100
    kernel_mesh_size: Optional[int] = None
    t_final: Optional[float] = None
    dt: Optional[float] = None
    scheme: str = "characteristic"
    initial: Optional[Tuple[np.ndarray, np.ndarray]] = None
    observer_initial: Optional[Tuple[np.ndarray, np.ndarray]] = None
    feedback: str = AUTO_FEEDBACK

    def __post_init__(self):
        if self.n_cells < 4:
            raise InvalidParameters(f"n_cells must be at least 4, got {self.n_cells}")
        if not self.params.L > 0:
            raise InvalidParameters("closed loop needs L > 0")
        if self.scheme not in SCHEMES:
            raise InvalidParameters(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.feedback not in FEEDBACK_LAWS + (AUTO_FEEDBACK,):
            raise InvalidParameters(
                f"unknown feedback {self.feedback!r}; choose from {FEEDBACK_LAWS + (AUTO_FEEDBACK,)}")
        if self.kernel_mesh_size is None:
            self.kernel_mesh_size = self.n_cells
        if self.kernel_mesh_size != self.n_cells:
            raise MeshMismatch(
                f"kernel mesh {self.kernel_mesh_size} differs from simulation grid {self.n_cells}")
        if self.t_final is not None and not self.t_final > 0:
            raise InvalidParameters("t_final must be positive")
        if self.dt is not None and not self.dt > 0:
            raise InvalidParameters("dt must be positive")
        if self.feedback == DISCRETE_FEEDBACK and not self.exact_shift:
            raise InvalidParameters(
                "discrete feedback needs characteristic stepping with lambda = 1 and dt = L/n_cells")

    @property
    def exact_shift(self) -> bool:
        """True when both families move exactly one node per step"""
        dx = self.params.L / self.n_cells
        return (self.scheme == "characteristic"
                and abs(self.params.lam - 1.0) <= 1e-12
                and abs(self.time_step - dx) <= 1e-12 * dx)

    @property
    def feedback_law(self) -> str:
        if self.feedback != AUTO_FEEDBACK:
            return self.feedback
        return DISCRETE_FEEDBACK if self.exact_shift else KERNEL_FEEDBACK

    @property
    def time_step(self) -> float:
        if self.dt is not None:
            return self.dt
        dx = self.params.L / self.n_cells
        if self.scheme == "implicit":
            return dx
        return dx / max(1.0, self.params.lam)

    @property
    def horizon(self) -> float:
        if self.t_final is not None:
            return self.t_final
        return 1.2 * convergence_times(self.params)[1]


@dataclass
class ClosedLoopResult:
    plant: EnergyTrace
    error: EnergyTrace
    control: np.ndarray
    t_opt1: float
    t_opt: float
    plant_state: Tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)
    observer_state: Tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)
    feedback: str = KERNEL_FEEDBACK

    def rows(self) -> List[dict]:
        return [{"t": float(t), "E_plant": float(ep), "E_error": float(ee), "U": float(u)}
                for t, ep, ee, u in zip(self.plant.times, self.plant.energies,
                                        self.error.energies, self.control)]


# --- discrete feedback on the exact-shift grid ------------------------------

def _independent_nodes(n: int) -> np.ndarray:
    """Positions in the stacked (y1, y2) vector, leaving out y2(0) = y1(0)"""
    return np.concatenate([np.arange(n), n + np.arange(1, n)])


def one_step_map(stepper: ReflectedStepper) -> Tuple[np.ndarray, np.ndarray]:
    """(A, b) with s' = A s + b U for the state s on the independent nodes

    s holds y1 at every node, y1(L) being the previous control value, then y2
    away from x = 0. The stepper must have zero gain at x = 0.
    """
    n = stepper.n_cells + 1
    nodes = _independent_nodes(n)
    size = nodes.size

    def lift(s):
        full = np.zeros(2 * n)
        full[nodes] = s
        full[n] = s[0]
        return full[:n], full[n:]

    def project(y1, y2):
        return np.concatenate([y1, y2])[nodes]

    A = np.empty((size, size))
    unit = np.zeros(size)
    for j in range(size):
        unit[j] = 1.0
        A[:, j] = project(*stepper.step(*lift(unit), 0.0))
        unit[j] = 0.0
    b = project(*stepper.step(*lift(unit), 1.0))
    return A, b


def _inverse_krylov_row(A: np.ndarray, b: np.ndarray, label: str) -> np.ndarray:
    """Last row of [b, A b, ..., A^(m-1) b]^-1"""
    m = b.size
    krylov = np.empty((m, m))
    column = b
    for j in range(m):
        krylov[:, j] = column
        column = A @ column
    last = np.zeros(m)
    last[-1] = 1.0
    try:
        return linalg.solve(krylov.T, last)
    except (linalg.LinAlgError, ValueError) as e:
        raise SingularStepMatrix(f"{label} chain is singular on this grid: {e}") from e


@dataclass
class DiscreteFeedback:
    """Control functional and output injection that make the stepped loop nilpotent

    ``control_weights`` act on the transformed estimate (z, w) the way
    ``KernelGrid.control_weights`` do. After each prediction step the observer
    adds ``injection`` times the innovation Y - yhat2(L). The estimation error
    vanishes within ``observer_steps + 1`` steps and the plant within a further
    ``controller_steps``.
    """
    control_weights: Tuple[np.ndarray, np.ndarray]
    injection: Tuple[np.ndarray, np.ndarray]
    observer_steps: int
    controller_steps: int

    def control(self, z: np.ndarray, w: np.ndarray) -> float:
        return float(self.control_weights[0] @ z + self.control_weights[1] @ w)


def discrete_feedback(stepper: ReflectedStepper, kernels: KernelGrid) -> DiscreteFeedback:
    """Deadbeat gains of the stepped plant by Ackermann's formula"""
    n = stepper.n_cells + 1
    if kernels.mesh_size != stepper.n_cells:
        raise MeshMismatch(f"kernel mesh {kernels.mesh_size} differs from simulation grid {stepper.n_cells}")
    nodes = _independent_nodes(n)
    A, b = one_step_map(stepper)
    size = b.size

    # U' = f . s' closes the loop as s' = (A + b k) s with k = f A / (1 - f . b)
    kappa = _inverse_krylov_row(A, b, "control")
    for _ in range(size - 1):
        kappa = kappa @ A
    kappa = -kappa
    denom = 1.0 + kappa @ b
    if abs(denom) < 1e-14:
        raise SingularStepMatrix("deadbeat control functional is singular for this grid")
    f = np.zeros(2 * n)
    f[nodes] = kappa / denom
    weights = f + f @ kernels._inverse_operator

    # the error has y1(L) = 0; Y = y2(L) is the last independent node
    keep = np.arange(size) != n - 1
    Ae = A[np.ix_(keep, keep)]
    m = Ae.shape[0]
    gain = _inverse_krylov_row(Ae.T, Ae[-1, :].copy(), "observer")
    for _ in range(m):
        gain = Ae @ gain
    injection = np.zeros(2 * n)
    injection[nodes[keep]] = gain
    injection[n] = injection[0]

    logger.debug(f"deadbeat gains on {size} nodes: |f| {np.abs(f).max():.3e}, |G| {np.abs(gain).max():.3e}")
    return DiscreteFeedback(
        control_weights=(weights[:n], weights[n:]),
        injection=(injection[:n], injection[n:]),
        observer_steps=m,
        controller_steps=size,
    )


def reflected_initial_data(L: float, n_cells: int) -> Tuple[np.ndarray, np.ndarray]:
    """Default data mapped to the actuator-at-L orientation; y2(0) = y1(0) and y1(L) = 0"""
    state = default_initial_data(L, n_cells)
    return state.u[::-1].copy(), state.v[::-1].copy()


def _field_pair(pair, n: int, label: str):
    y1, y2 = (np.array(f, dtype=float) for f in pair)
    if y1.shape != (n,) or y2.shape != (n,):
        raise MeshMismatch(f"{label} must have {n} nodes")
    return y1, y2


def run_closed_loop(cfg: ClosedLoopConfig, kernels: Optional[KernelGrid] = None) -> ClosedLoopResult:
    """Co-simulate plant and observer under the output-feedback backstepping law

    The control is applied from the forward transform of the estimate. With
    ``feedback="kernel"`` its weights are L11(L, .), L12(L, .) and the observer
    injects Gamma_i; with ``feedback="discrete"`` both come from
    :func:`discrete_feedback`, so the stepped loop settles exactly.
    """
    p = cfg.params.with_(k=0.0)
    n = cfg.n_cells + 1
    if kernels is None:
        kernels = solve_kernels(p, cfg.kernel_mesh_size)
    elif kernels.mesh_size != cfg.n_cells:
        raise MeshMismatch(f"kernel mesh {kernels.mesh_size} differs from simulation grid {cfg.n_cells}")
    elif kernels.params.triple != p.triple or kernels.params.L != p.L:
        raise InvalidParameters("kernels were solved for different parameters")

    dt = cfg.time_step
    stepper = ReflectedStepper(make_stepper(p, cfg.n_cells, dt, cfg.scheme))
    x = stepper.x
    zeros = np.zeros(n)

    y1, y2 = _field_pair(cfg.initial, n, "initial data") if cfg.initial is not None \
        else reflected_initial_data(p.L, cfg.n_cells)
    h1, h2 = _field_pair(cfg.observer_initial, n, "observer data") if cfg.observer_initial is not None \
        else (zeros.copy(), zeros.copy())

    law_name = cfg.feedback_law
    if law_name == DISCRETE_FEEDBACK:
        law = discrete_feedback(stepper, kernels)
        gains = None
        rE1, rE2 = law.injection
        scale = 1.0
    else:
        law = kernels
        gains = (kernels.gamma1, kernels.gamma2)
        # trapezoidal injection: the new innovation enters through the unit response
        rE1, rE2 = stepper.step(zeros, zeros, 0.0, None, gains)
        scale = 1.0 + stepper.output(rE2)

    def control_of(f1, f2):
        return law.control(*forward_transform(kernels, f1, f2))

    # every step is affine in the new control value and innovation
    rU1, rU2 = stepper.step(zeros, zeros, 1.0)
    F_rU = control_of(rU1, rU2)
    F_rE = control_of(rE1, rE2)
    if abs(1.0 - F_rU) < 1e-14 or abs(scale) < 1e-14:
        raise SingularStepMatrix("closed-loop step is singular for this grid")

    n_steps = step_count(cfg.horizon, dt)
    times = np.arange(n_steps + 1) * dt
    e_plant = np.empty(n_steps + 1)
    e_error = np.empty(n_steps + 1)
    control = np.empty(n_steps + 1)
    e_plant[0] = energy(x, y1, y2)
    e_error[0] = energy(x, y1 - h1, y2 - h2)
    control[0] = control_of(h1, h2)
    innovation = stepper.output(y2) - stepper.output(h2)

    for step in range(1, n_steps + 1):
        P1_, P2_ = stepper.step(y1, y2, 0.0)
        old = None if gains is None else (gains[0] * innovation, gains[1] * innovation)
        O1, O2 = stepper.step(h1, h2, 0.0, old, None)
        eps = (stepper.output(P2_) - stepper.output(O2)) / scale
        U = (control_of(O1, O2) + eps * F_rE) / (1.0 - F_rU)

        y1, y2 = P1_ + U * rU1, P2_ + U * rU2
        h1, h2 = O1 + U * rU1 + eps * rE1, O2 + U * rU2 + eps * rE2
        check_finite(y1, y2, step)
        check_finite(h1, h2, step)

        innovation = eps
        e_plant[step] = energy(x, y1, y2)
        e_error[step] = energy(x, y1 - h1, y2 - h2)
        control[step] = U

    t_opt1, t_opt = convergence_times(p)
    logger.info(f"closed loop ({law_name}): {n_steps} steps, "
                f"E_plant {e_plant[0]:.3e} -> {e_plant[-1]:.3e}")
    return ClosedLoopResult(
        plant=EnergyTrace(times, e_plant),
        error=EnergyTrace(times, e_error),
        control=control,
        t_opt1=t_opt1,
        t_opt=t_opt,
        plant_state=(y1, y2),
        observer_state=(h1, h2),
        feedback=law_name,
    )


# --- target systems ---------------------------------------------------------

@dataclass
class CascadeTrace(EnergyTrace):
    """Total energy plus the energies of the first and second cascade components"""
    first: Optional[np.ndarray] = None
    second: Optional[np.ndarray] = None
    vanish_times: Tuple[float, float] = (math.nan, math.nan)


def run_target_system(which: str, params: SystemParams, n_cells: int = 100,
                      t_final: Optional[float] = None,
                      kernels: Optional[KernelGrid] = None,
                      initial: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> CascadeTrace:
    """Simulate a target cascade along characteristics with explicit non-local terms"""
    if which not in (ERROR_TARGET, OBSERVER_TARGET):
        raise InvalidParameters(f"which must be {ERROR_TARGET} or {OBSERVER_TARGET}, got {which!r}")
    if not params.L > 0:
        raise InvalidParameters("target systems need L > 0")
    if n_cells < 4:
        raise InvalidParameters(f"n_cells must be at least 4, got {n_cells}")
    if kernels is None:
        kernels = solve_kernels(params, max(n_cells, MIN_MESH))
    if kernels.mesh_size != n_cells:
        raise MeshMismatch(f"kernel mesh {kernels.mesh_size} differs from simulation grid {n_cells}")

    lam, L, b = params.lam, params.L, params.b
    n = n_cells + 1
    x = kernels.x
    dx = L / n_cells
    dt = dx / max(1.0, lam)
    first_dep = np.clip(x + dt, 0.0, L)      # leftward component, speed 1
    second_dep = np.clip(x - lam * dt, 0.0, L)  # rightward component, speed lam
    vanish = (L, L + L / lam)
    horizon = t_final if t_final is not None else 1.5 * vanish[1]

    c1, c2 = _field_pair(initial, n, "initial data") if initial is not None \
        else reflected_initial_data(L, n_cells)
    V = kernels.upper_weights
    q1_op = V * kernels["Q1"]
    q2_op = V * kernels["Q2"]
    g = kernels.g

    n_steps = step_count(horizon, dt)
    times = np.arange(n_steps + 1) * dt
    first = np.empty(n_steps + 1)
    second = np.empty(n_steps + 1)
    first[0] = energy(x, c1, np.zeros(n))
    second[0] = energy(x, np.zeros(n), c2)

    for step in range(1, n_steps + 1):
        if which == ERROR_TARGET:
            rate1 = -(q1_op @ c1)
            rate2 = -(b * c1 + q2_op @ c1)
            new1 = np.interp(first_dep, x, c1) + dt * np.interp(first_dep, x, rate1)
            new1[-1] = 0.0
            new2 = np.interp(second_dep, x, c2) + dt * np.interp(second_dep, x, rate2)
            new2[0] = new1[0]
        else:
            new1 = np.interp(first_dep, x, c1)
            new1[-1] = 0.0
            new2 = (np.interp(second_dep, x, c2)
                    + 0.5 * dt * (np.interp(second_dep, x, g) * c2[0] + g * new1[0]))
            new2[0] = new1[0]
        check_finite(new1, new2, step)
        c1, c2 = new1, new2
        first[step] = energy(x, c1, np.zeros(n))
        second[step] = energy(x, np.zeros(n), c2)

    return CascadeTrace(times=times, energies=first + second, first=first, second=second,
                        vanish_times=vanish)
