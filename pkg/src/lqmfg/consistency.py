"""Mean-field consistency: contraction constants, the offset BSDE on the
common-noise tree, the map g -> y_g, Picard iteration, and the decoupling
field construction for deterministic common-noise diffusions.

Vectors on a tree level are stored row-wise, shape ``(n_nodes, d)``; a matrix
X acts on them as ``v @ X.T``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec, SemigroupTable, TimeGrid, adjoint_apply, alpha_growth, build_semigroup, stack_norm
from .noise import NoiseTree
from .riccati import (
    LambdaPath,
    RiccatiSolution,
    compute_lambda,
    solve_eta_riccati,
    solve_pi_riccati,
)


class DetDiffViolation(ValueError):
    """The decoupling construction needs D0 = 0 and F0 = 0."""


class PicardNotConverged(ArithmeticError):
    def __init__(self, message: str, residual_history: list[float]):
        super().__init__(message)
        self.residual_history = residual_history


# --- contraction certificate -------------------------------------------------

def operator_norms(spec: ModelSpec) -> dict[str, float]:
    lam, lam0 = spec.lambda_idio, spec.lambda_common
    spectral = lambda X: float(np.linalg.norm(X, 2))  # noqa: E731
    return {
        "B": spectral(spec.B),
        "D": stack_norm(spec.D, lam),
        "D0": stack_norm(spec.D0, lam0),
        "F0": stack_norm(spec.F0, lam0),
        "F1": spectral(spec.F1),
        "F2": stack_norm(spec.F2, lam),
        "M": spectral(spec.M),
        "G": spectral(spec.G),
        "F1hat": spectral(spec.F1hat),
        "F2hat": spectral(spec.F2hat),
    }


@dataclass(frozen=True)
class ContractionCertificate:
    T: float
    M_T: float
    alpha_T: float
    C_pi: float
    C_1: float
    C_2: float
    C_3: float
    operator_norms: dict[str, float]

    @property
    def product(self) -> float:
        if self.C_2 == 0:
            return 0.0
        return self.C_2 * _exp(self.T * self.C_3) if math.isfinite(self.C_2) else math.inf

    @property
    def passes_alpha(self) -> bool:
        return self.alpha_T < 1.0

    @property
    def passes_contraction(self) -> bool:
        return self.passes_alpha and self.product < 1.0

    @property
    def lipschitz_bound(self) -> float:
        """Bound on the contraction factor of the consistency map in the sup-L2 norm."""
        return math.sqrt(self.product)

    def as_dict(self) -> dict:
        return {
            "T": self.T, "M_T": self.M_T, "alpha_T": self.alpha_T, "C_pi": self.C_pi,
            "C_1": self.C_1, "C_2": self.C_2, "C_3": self.C_3, "product": self.product,
            "passes_alpha": self.passes_alpha, "passes_contraction": self.passes_contraction,
            "operator_norms": dict(self.operator_norms),
        }


def _exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def _mul(*factors: float) -> float:
    """Product in which an exact zero beats an overflowed factor (the true value is finite)."""
    if any(f == 0 for f in factors):
        return 0.0
    return math.prod(factors)


def contraction_certificate(spec: ModelSpec, grid: TimeGrid | None = None) -> ContractionCertificate:
    T = spec.T if grid is None else grid.T
    n = operator_norms(spec)
    M_T = _exp(alpha_growth(spec.A) * T)
    MT2 = M_T**2
    C_pi = 2 * MT2 * _exp(8 * T * MT2 * (n["D"] ** 2 + n["D0"] ** 2) * (n["G"] + T * n["M"]))
    alpha_T = 16 * MT2 * T * n["D0"] ** 2
    B4 = n["B"] ** 4
    if alpha_T < 1.0:
        k = 1.0 - alpha_T
        bracket = ((n["G"] * n["F2hat"]) ** 2
                   + 16 * T**2 * ((n["M"] * n["F1hat"]) ** 2
                                  + _mul(C_pi**2, (n["D"] * n["F2"]) ** 2 + (n["D0"] * n["F0"]) ** 2
                                         + n["F1"] ** 2)))
        C_1 = _mul(2 * MT2 / k, _exp(_mul(8 * MT2 / k, C_pi**2, B4)), bracket)
    else:
        C_1 = math.inf
    C_2 = 5 * MT2 * T * (T * (_mul(B4, C_1) + n["F1"] ** 2) + n["F0"] ** 2)
    C_3 = 5 * MT2 * (n["D0"] ** 2 + _mul(T, B4, C_pi**2))
    return ContractionCertificate(T, M_T, alpha_T, C_pi, C_1, C_2, C_3, n)


# --- tree-indexed processes -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class MeanFieldCandidate:
    """A common-noise-adapted process.

    Tree-indexed: ``levels[k]`` holds one vector per depth-k node.
    Path-indexed: ``paths`` has shape (n_paths, n_steps + 1, d).
    """

    grid: TimeGrid
    levels: list[np.ndarray] | None = None
    paths: np.ndarray | None = None

    @property
    def representation(self) -> str:
        return "tree" if self.levels is not None else "paths"

    @classmethod
    def deterministic(cls, tree: NoiseTree, values: np.ndarray) -> "MeanFieldCandidate":
        """Knot-indexed deterministic path, copied onto every node."""
        values = np.asarray(values, dtype=float)
        return cls(tree.grid, [np.tile(values[k], (tree.n_nodes(k), 1)) for k in range(tree.depth + 1)])

    @classmethod
    def zeros(cls, tree: NoiseTree, d: int) -> "MeanFieldCandidate":
        return cls.deterministic(tree, np.zeros((tree.depth + 1, d)))

    @classmethod
    def random(cls, tree: NoiseTree, d: int, rng: np.random.Generator, scale: float = 1.0) -> "MeanFieldCandidate":
        return cls(tree.grid, [scale * rng.standard_normal((tree.n_nodes(k), d)) for k in range(tree.depth + 1)])

    @classmethod
    def random_walk(cls, tree: NoiseTree, d: int, rng: np.random.Generator, scale: float = 1.0) -> "MeanFieldCandidate":
        """Random start plus independent Gaussian steps along every branch.

        Paths are continuous in time, unlike ``random``, which makes these
        candidates closer to the mean fields a Picard sweep actually visits.
        """
        levels = [scale * rng.standard_normal((1, d))]
        step = scale * math.sqrt(tree.grid.dt)
        for k in range(1, tree.depth + 1):
            levels.append(tree.expand(levels[-1]) + step * rng.standard_normal((tree.n_nodes(k), d)))
        return cls(tree.grid, levels)

    def second_moments(self) -> np.ndarray:
        """E|g(t_k)|^2 per knot (exact tree expectation, or path average)."""
        if self.levels is not None:
            return np.array([np.mean(np.sum(v**2, axis=1)) for v in self.levels])
        return np.mean(np.sum(self.paths**2, axis=2), axis=0)

    def sq_norm(self) -> float:
        """sup_k E|g(t_k)|^2."""
        return float(self.second_moments().max())

    def norm(self) -> float:
        return math.sqrt(self.sq_norm())

    def __sub__(self, other: "MeanFieldCandidate") -> "MeanFieldCandidate":
        if self.levels is not None:
            return MeanFieldCandidate(self.grid, [a - b for a, b in zip(self.levels, other.levels)])
        return MeanFieldCandidate(self.grid, paths=self.paths - other.paths)

    def blend(self, other: "MeanFieldCandidate", weight: float) -> "MeanFieldCandidate":
        """(1 - weight) * self + weight * other."""
        return MeanFieldCandidate(self.grid, [(1 - weight) * a + weight * b for a, b in zip(self.levels, other.levels)])

    def on_paths(self, node_index: np.ndarray) -> np.ndarray:
        """Read tree values along node paths of shape (n_paths, n_steps + 1)."""
        return np.stack([self.levels[k][node_index[:, k]] for k in range(node_index.shape[1])], axis=1)

    def mean_path(self) -> np.ndarray:
        if self.levels is not None:
            return np.stack([v.mean(axis=0) for v in self.levels])
        return self.paths.mean(axis=0)

    def to_csv(self, path, tree: NoiseTree) -> None:
        write_tree_csv(path, tree, self.levels)


def write_tree_csv(path, tree: NoiseTree, levels: list[np.ndarray]) -> None:
    d = levels[0].shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "parent_id", "depth"] + [f"v{i}" for i in range(d)])
        for k, vals in enumerate(levels):
            off = tree.node_offset(k)
            poff = tree.node_offset(k - 1) if k > 0 else 0
            parents = tree.parents(k)
            for i, v in enumerate(vals):
                parent = -1 if k == 0 else poff + int(parents[i])
                w.writerow([off + i, parent, k] + [repr(float(x)) for x in v])


@dataclass(frozen=True, eq=False)
class OffsetSolution:
    """q per node (depths 0..n) and q~ per node (depths 0..n-1, shape (nodes, m_common, d)).

    q~ holds the coefficients against the sqrt(lambda0_j)-scaled modes, so the
    martingale increment is ``sum_j sqrt(lambda0_j) q~_j dbeta_j``.
    """

    q: list[np.ndarray]
    q_tilde: list[np.ndarray]


def _check_tree(grid: TimeGrid, tree: NoiseTree, *objs) -> None:
    if tree.grid != grid:
        raise ValueError(f"tree grid {tree.grid} does not match {grid}")
    for obj in objs:
        if obj is not None and obj.grid != grid:
            raise ValueError(f"grid mismatch: {obj.grid} vs {grid}")


def _modes(stack: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply every matrix of a mode stack to row vectors: (n, d) -> (n, m, d)."""
    return np.einsum("jab,nb->nja", stack, v)


def _backward_drift(spec: ModelSpec, P: np.ndarray, q: np.ndarray, g: np.ndarray,
                    q_tilde: np.ndarray) -> np.ndarray:
    """Drift of the offset equation at one level (rows are nodes)."""
    BBt = spec.BBt
    p = _modes(spec.F2, g) + spec.sigma[None]
    p0 = _modes(spec.F0, g) + spec.sigma0[None]
    return (q @ (P @ BBt).T
            - g @ (spec.M @ spec.F1hat).T
            + adjoint_apply(spec.D, spec.lambda_idio, p @ P.T)
            + adjoint_apply(spec.D0, spec.lambda_common, p0 @ P.T - q_tilde)
            + g @ (P @ spec.F1).T)


def _regress_increment(tree: NoiseTree, spec: ModelSpec, child_q: np.ndarray, dt: float) -> np.ndarray:
    """q~_j(v) = E[q(child) dbeta_j | v] / (dt sqrt(lambda0_j))."""
    raw = tree.conditional_times_increment(child_q)
    return raw / (dt * np.sqrt(spec.lambda_common))[None, :, None]


def solve_offset_bsde(spec: ModelSpec, grid: TimeGrid, tree: NoiseTree, pi: RiccatiSolution,
                      g: MeanFieldCandidate, semigroup: SemigroupTable | None = None) -> OffsetSolution:
    _check_tree(grid, tree, pi, g)
    if g.levels is None:
        raise ValueError("solve_offset_bsde needs a tree-indexed candidate")
    S = (semigroup or build_semigroup(spec, grid)).step
    dt = grid.dt
    n = grid.n_steps
    q: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    qt: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    q[n] = g.levels[n] @ (spec.G @ spec.F2hat).T
    for k in range(n - 1, -1, -1):
        Eq = tree.conditional(q[k + 1])
        qt[k] = _regress_increment(tree, spec, q[k + 1], dt)
        f = _backward_drift(spec, pi[k], Eq, g.levels[k], qt[k])
        q[k] = (Eq - dt * f) @ S
    return OffsetSolution(q, qt)


def _forward_step(spec: ModelSpec, tree: NoiseTree, S: np.ndarray, dt: float, P: np.ndarray,
                  y: np.ndarray, g: np.ndarray, q: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step of the conditional mean-field equation onto all children."""
    BBt = spec.BBt
    base = y - dt * (y @ (BBt @ P).T - q @ BBt.T - g @ spec.F1.T)
    coef = _modes(spec.D0, y) + _modes(spec.F0, g) + spec.sigma0[None]
    coef = coef * np.sqrt(spec.lambda_common)[None, :, None]
    noise = np.einsum("nja,bj->nba", coef, tree.branch_increments)
    child = (base[:, None, :] + noise).reshape(-1, y.shape[1])
    return child @ S.T


def mean_field_map(spec: ModelSpec, grid: TimeGrid, tree: NoiseTree, pi: RiccatiSolution,
                   g: MeanFieldCandidate, semigroup: SemigroupTable | None = None,
                   return_offset: bool = False):
    """The consistency map g -> y_g."""
    semigroup = semigroup or build_semigroup(spec, grid)
    off = solve_offset_bsde(spec, grid, tree, pi, g, semigroup)
    S, dt = semigroup.step, grid.dt
    y = [np.asarray(spec.xi_bar, dtype=float)[None, :]]
    for k in range(grid.n_steps):
        y.append(_forward_step(spec, tree, S, dt, pi[k], y[k], g.levels[k], off.q[k]))
    out = MeanFieldCandidate(grid, y)
    return (out, off) if return_offset else out


def measure_lipschitz(spec: ModelSpec, grid: TimeGrid, tree: NoiseTree, pi: RiccatiSolution,
                      g1: MeanFieldCandidate, g2: MeanFieldCandidate,
                      semigroup: SemigroupTable | None = None) -> float:
    """sup_k E|Yg1 - Yg2|^2 / sup_k E|g1 - g2|^2 (squared-norm ratio)."""
    semigroup = semigroup or build_semigroup(spec, grid)
    y1 = mean_field_map(spec, grid, tree, pi, g1, semigroup)
    y2 = mean_field_map(spec, grid, tree, pi, g2, semigroup)
    return (y1 - y2).sq_norm() / (g1 - g2).sq_norm()


@dataclass
class FixedPointResult:
    xbar: MeanFieldCandidate
    offset: OffsetSolution
    pi: RiccatiSolution
    tree: NoiseTree
    iterations: int
    residual_history: list[float]
    ratios: list[float]

    @property
    def measured_ratio(self) -> float:
        """Largest observed contraction factor between successive residuals."""
        return max(self.ratios) if self.ratios else 0.0


def picard_fixed_point(spec: ModelSpec, grid: TimeGrid, tree: NoiseTree, pi: RiccatiSolution,
                       g0: MeanFieldCandidate | None = None, tol: float = 1e-8,
                       max_iter: int = 100, damping: float = 1.0) -> FixedPointResult:
    """Iterate g <- (1 - damping) g + damping Y(g) until sup_k E|g_new - g|^2 <= tol^2."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    semigroup = build_semigroup(spec, grid)
    g = g0 if g0 is not None else MeanFieldCandidate.zeros(tree, spec.d_state)
    history: list[float] = []
    ratios: list[float] = []
    for it in range(1, max_iter + 1):
        y, off = mean_field_map(spec, grid, tree, pi, g, semigroup, return_offset=True)
        new = y if damping == 1.0 else g.blend(y, damping)
        res = (new - g).norm()
        if history and history[-1] > 1e3 * np.finfo(float).eps:
            ratios.append(res / history[-1])
        history.append(res)
        g = new
        if res <= tol:
            if damping != 1.0:
                off = solve_offset_bsde(spec, grid, tree, pi, g, semigroup)
            return FixedPointResult(g, off, pi, tree, it, history, ratios)
    raise PicardNotConverged(
        f"Picard iteration did not reach tol={tol:g} in {max_iter} iterations "
        f"(last residual {history[-1]:.3g})", history)


# --- decoupling construction ----------------------------------------------------

def is_det_diff(spec: ModelSpec) -> bool:
    return not np.any(spec.D0) and not np.any(spec.F0)


def _require_det_diff(spec: ModelSpec) -> None:
    if not is_det_diff(spec):
        raise DetDiffViolation(
            "the decoupling construction requires a deterministic common-noise diffusion "
            "(det-diff: D0 = 0 and F0 = 0); use the Picard solver on a certified horizon instead"
        )


def _idio_source(spec: ModelSpec, P: np.ndarray) -> np.ndarray:
    """D* P sigma = sum_j lambda_j D_j^T P sigma_j."""
    return adjoint_apply(spec.D, spec.lambda_idio, spec.sigma @ P.T)


def solve_varsigma(spec: ModelSpec, grid: TimeGrid, pi: RiccatiSolution,
                   eta: RiccatiSolution) -> tuple[np.ndarray, np.ndarray]:
    """Backward RK4 for the deterministic part of the decoupled offset.

    Returns (varsigma, varsigma_tilde) with shapes (n+1, d) and (n+1, m_common, d);
    the second is identically zero because every coefficient is deterministic.
    """
    _require_det_diff(spec)
    A, BBt = spec.A, spec.BBt
    n, dt = grid.n_steps, grid.dt

    def rhs(v, s):
        P, E = pi.at(s), eta.at(s)
        return -(A.T @ v - P @ BBt @ v - E @ BBt @ v - _idio_source(spec, P))

    vs = np.zeros((n + 1, spec.d_state))
    v = vs[n].copy()
    for k in range(n - 1, -1, -1):
        s = float(k + 1)
        k1 = rhs(v, s)
        k2 = rhs(v - 0.5 * dt * k1, s - 0.5)
        k3 = rhs(v - 0.5 * dt * k2, s - 0.5)
        k4 = rhs(v - dt * k3, s - 1.0)
        v = v - (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        vs[k] = v
    return vs, np.zeros((n + 1, spec.m_common, spec.d_state))


@dataclass
class DecoupledSolution:
    pi: RiccatiSolution
    lam: LambdaPath
    eta: RiccatiSolution
    varsigma: np.ndarray
    varsigma_tilde: np.ndarray
    xbar: MeanFieldCandidate
    q_tilde_knots: np.ndarray  # (n+1, m_common, d)
    offset: OffsetSolution
    tree: NoiseTree


def solve_decoupled(spec: ModelSpec, grid: TimeGrid, tree: NoiseTree) -> DecoupledSolution:
    _require_det_diff(spec)
    _check_tree(grid, tree)
    pi = solve_pi_riccati(spec, grid, include_common_diffusion=True)
    lam = compute_lambda(spec, pi)
    eta = solve_eta_riccati(spec, grid, pi, lam)
    vs, vs_tilde = solve_varsigma(spec, grid, pi, eta)
    S = build_semigroup(spec, grid).step
    dt, BBt = grid.dt, spec.BBt
    sig0 = spec.sigma0 * np.sqrt(spec.lambda_common)[:, None]
    noise = tree.branch_increments @ sig0  # (branching, d)
    x = [np.asarray(spec.xi_bar, dtype=float)[None, :]]
    for k in range(grid.n_steps):
        Phi = BBt @ (eta[k] + pi[k]) - spec.F1
        base = x[k] - dt * (x[k] @ Phi.T - vs[k] @ BBt.T)
        x.append((base[:, None, :] + noise[None]).reshape(-1, spec.d_state) @ S.T)
    xbar = MeanFieldCandidate(grid, x)
    q = [-(x[k] @ eta[k].T) + vs[k] for k in range(grid.n_steps + 1)]
    qt_knots = np.stack([vs_tilde[k] - spec.sigma0 @ eta[k].T for k in range(grid.n_steps + 1)])
    qt = [np.broadcast_to(qt_knots[k], (tree.n_nodes(k),) + qt_knots[k].shape).copy()
          for k in range(grid.n_steps)]
    return DecoupledSolution(pi, lam, eta, vs, vs_tilde, xbar, qt_knots, OffsetSolution(q, qt), tree)


# --- residuals ------------------------------------------------------------------

@dataclass
class ResidualReport:
    """Defects of the discretized consistency system.

    The headline defects use the fixed-point norm, sup over knots of the exact
    tree root-mean-square; the ``*_max`` fields are maxima over single nodes
    and localize isolated errors.
    """

    forward_defect: float
    backward_defect: float
    martingale_defect: float
    forward_max: float
    backward_max: float
    martingale_max: float
    dt: float

    def as_dict(self) -> dict:
        return {"forward_defect": self.forward_defect, "backward_defect": self.backward_defect,
                "martingale_defect": self.martingale_defect, "forward_max": self.forward_max,
                "backward_max": self.backward_max, "martingale_max": self.martingale_max, "dt": self.dt}


def fbsee_residual(spec: ModelSpec, grid: TimeGrid, tree: NoiseTree, pi: RiccatiSolution,
                   xbar: MeanFieldCandidate, q, q_tilde=None) -> ResidualReport:
    """Plug a candidate (xbar, q, q~) into the discretized forward and backward equations.

    ``q`` is a list of per-level arrays or an OffsetSolution (then q_tilde is
    taken from it).  Forward and backward residuals are divided by dt, the
    martingale residual (child deviation from E[q+|v] + q~ dbeta) by sqrt(dt).
    """
    if isinstance(q, OffsetSolution):
        q, q_tilde = q.q, q.q_tilde
    _check_tree(grid, tree, pi, xbar)
    S = build_semigroup(spec, grid).step
    dt, n = grid.dt, grid.n_steps
    x = xbar.levels
    fwd, bwd, mart = [], [], []
    for k in range(n):
        pred = _forward_step(spec, tree, S, dt, pi[k], x[k], x[k], q[k])
        fwd.append(np.linalg.norm(x[k + 1] - pred, axis=1) / dt)
        Eq = tree.conditional(q[k + 1])
        f = _backward_drift(spec, pi[k], Eq, x[k], q_tilde[k])
        bwd.append(np.linalg.norm(q[k] - (Eq - dt * f) @ S, axis=1) / dt)
        scaled = q_tilde[k] * np.sqrt(spec.lambda_common)[None, :, None]
        jumps = np.einsum("nja,bj->nba", scaled, tree.branch_increments).reshape(-1, spec.d_state)
        mart.append(np.linalg.norm(q[k + 1] - tree.expand(Eq) - jumps, axis=1) / math.sqrt(dt))
    bwd.append(np.linalg.norm(q[n] - x[n] @ (spec.G @ spec.F2hat).T, axis=1) / dt)

    def rms(levels):
        return max(float(np.sqrt(np.mean(v**2))) for v in levels)

    def peak(levels):
        return max(float(v.max()) for v in levels)

    return ResidualReport(rms(fwd), rms(bwd), rms(mart), peak(fwd), peak(bwd), peak(mart), dt)
