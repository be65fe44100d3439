"""N-player Monte Carlo: equilibrium feedback, deviations, costs and rate fits."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .model import ModelSpec, TimeGrid, step_propagator
from .noise import substream

_STREAM_SIM = 7


class SimulationError(ArithmeticError):
    pass


def feedback_control(pi, q_value: np.ndarray, x: np.ndarray, k: int, B: np.ndarray) -> np.ndarray:
    """u = -B^T (Pi(t_k) x - q).  Works row-wise on stacked states."""
    P = pi[k] if not isinstance(pi, np.ndarray) or pi.ndim == 3 else pi
    return -(x @ P.T - q_value) @ B


@dataclass(frozen=True)
class Deviation:
    """A strategy for agent 1: ``rule(k, x, q, u_eq) -> u`` on row-stacked replicas."""

    name: str
    rule: Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, k, x, q, u_eq):
        return self.rule(k, x, q, u_eq)


def zero_control() -> Deviation:
    return Deviation("zero", lambda k, x, q, u: np.zeros_like(u))


def scaled_equilibrium(delta: float) -> Deviation:
    return Deviation(f"scaled({1 + delta:g})", lambda k, x, q, u: (1.0 + delta) * u)


def equilibrium() -> Deviation:
    return Deviation("equilibrium", lambda k, x, q, u: u)


def parse_deviation(text: str) -> Deviation:
    """'zero', 'equilibrium' or 'scaled:<delta>'."""
    if text == "zero":
        return zero_control()
    if text == "equilibrium":
        return equilibrium()
    if text.startswith("scaled:"):
        return scaled_equilibrium(float(text.split(":", 1)[1]))
    raise ValueError(f"unknown deviation {text!r}")


@dataclass(frozen=True, eq=False)
class AgentEnsemble:
    N: int
    paths: np.ndarray  # (n_mc, N, n_steps + 1, d)
    controls: np.ndarray  # (n_mc, N, n_steps + 1, d_ctrl)
    average: np.ndarray  # empirical average state, (n_mc, n_steps + 1, d)
    xbar: np.ndarray  # mean field along each replica's common path
    node_index: np.ndarray  # (n_mc, n_steps + 1)
    common_increments: np.ndarray  # sign-quantized, (n_mc, n_steps, m_common)
    seed: int
    strategy_tags: tuple[str, ...]
    coupling: str

    @property
    def n_mc(self) -> int:
        return self.paths.shape[0]

    @property
    def common_paths(self) -> np.ndarray:
        """Cumulative common-noise record, (n_mc, n_steps + 1, m_common)."""
        z = np.zeros_like(self.common_increments[:, :1])
        return np.concatenate([z, np.cumsum(self.common_increments, axis=1)], axis=1)


def _sqrt_psd(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def _draw(spec: ModelSpec, grid: TimeGrid, N: int, seed: int, replica: int):
    """Initial states and increments of one replica.

    Agent i draws from substream (seed, replica, i + 1) and the common noise
    from (seed, replica, 0), so a path depends on (seed, replica, agent) only.
    """
    d, n = spec.d_state, grid.n_steps
    root = _sqrt_psd(spec.xi_cov)
    xi = np.empty((N, d))
    dW = np.empty((N, n, spec.m_idio))
    for i in range(N):
        rng = substream(seed, _STREAM_SIM, replica, i + 1)
        xi[i] = spec.xi_bar + root @ rng.standard_normal(d)
        dW[i] = rng.standard_normal((n, spec.m_idio)) * np.sqrt(grid.dt)
    # common noise lives on the tree: a Gaussian draw quantized to its sign
    z0 = substream(seed, _STREAM_SIM, replica, 0).standard_normal((n, spec.m_common))
    dW0 = np.where(z0 < 0, -1.0, 1.0) * np.sqrt(grid.dt)
    return xi, dW, dW0


def _run_block(spec, grid, N, seed, replicas, solution, deviation, coupling, S):
    n, dt, d = grid.n_steps, grid.dt, spec.d_state
    draws = [_draw(spec, grid, N, seed, r) for r in replicas]
    X = np.stack([x for x, _, _ in draws])
    dW = np.stack([w for _, w, _ in draws])
    dW0 = np.stack([w for _, _, w in draws])
    tree = solution.tree
    nodes = tree.node_path(tree.branch_of(dW0))
    q_levels, xbar_levels = solution.offset.q, solution.xbar.levels
    B, F1 = spec.B, spec.F1
    sq_lam = np.sqrt(spec.lambda_idio)
    sq_lam0 = np.sqrt(spec.lambda_common)
    R = len(replicas)
    paths = np.empty((R, N, n + 1, d))
    controls = np.empty((R, N, n + 1, spec.d_ctrl))
    avg = np.empty((R, n + 1, d))
    xb = np.empty((R, n + 1, d))
    paths[:, :, 0] = X
    for k in range(n + 1):
        q = q_levels[k][nodes[:, k]]
        xb[:, k] = xbar_levels[k][nodes[:, k]]
        avg[:, k] = X.mean(axis=1)
        coupled = avg[:, k] if coupling == "empirical" else xb[:, k]
        u = -(X @ solution.pi[k].T - q[:, None, :]) @ B
        if deviation is not None:
            u[:, 0] = deviation(k, X[:, 0], q, u[:, 0].copy())
        controls[:, :, k] = u
        if k == n:
            break
        drift = u @ B.T + (coupled @ F1.T)[:, None, :]
        coef = (np.einsum("jab,rnb->rnja", spec.D, X)
                + np.einsum("jab,rb->rja", spec.F2, coupled)[:, None]
                + spec.sigma[None, None])
        idio = np.einsum("rnja,j,rnj->rna", coef, sq_lam, dW[:, :, k, :])
        coef0 = (np.einsum("jab,rnb->rnja", spec.D0, X)
                 + np.einsum("jab,rb->rja", spec.F0, coupled)[:, None]
                 + spec.sigma0[None, None])
        common = np.einsum("rnja,j,rj->rna", coef0, sq_lam0, dW0[:, k, :])
        with np.errstate(over="ignore", invalid="ignore"):
            X = (X + dt * drift + idio + common) @ S.T
        bad = ~np.all(np.isfinite(X), axis=(1, 2))
        if bad.any():
            r = replicas[int(np.argmax(bad))]
            raise SimulationError(f"non-finite state in replica {r} at step {k + 1}")
        paths[:, :, k + 1] = X
    return paths, controls, avg, xb, nodes, dW0


def simulate_n_player(spec: ModelSpec, grid: TimeGrid, N: int, n_mc: int, seed: int, solution,
                      deviation: Deviation | None = None, coupling: str = "empirical",
                      workers: int = 1, block: int = 64) -> AgentEnsemble:
    """Simulate N agents over n_mc replicas, each replica sharing one common path.

    ``solution`` is a solved mean field (Picard or decoupled result) exposing
    ``pi``, ``xbar``, ``offset`` and ``tree``.  With ``coupling="limit"`` the
    empirical average in the dynamics is replaced by the mean field, giving
    independent agents of the limiting game on the same noise draws.
    Draws are keyed by (seed, replica, agent), so output does not depend on
    ``workers`` or ``block``.
    """
    if coupling not in ("empirical", "limit"):
        raise ValueError(f"coupling must be 'empirical' or 'limit', got {coupling!r}")
    if solution.tree.grid != grid:
        raise ValueError("solution and simulation grids differ")
    S = step_propagator(spec, grid)
    blocks = [list(range(i, min(i + block, n_mc))) for i in range(0, n_mc, block)]

    def run(reps):
        return _run_block(spec, grid, N, seed, reps, solution, deviation, coupling, S)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    paths, controls, avg, xb, nodes, dW0 = (np.concatenate(p) for p in zip(*parts))
    tags = ((deviation.name if deviation is not None else "equilibrium"),) + ("equilibrium",) * (N - 1)
    return AgentEnsemble(N, paths, controls, avg, xb, nodes, dW0, int(seed), tags, coupling)


@dataclass
class CostReport:
    mean_cost: float
    std_error: float
    running_tracking: float
    control_energy: float
    terminal_tracking: float
    per_replica: np.ndarray = field(repr=False)


def _trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n_steps + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return w


def estimate_cost(spec: ModelSpec, grid: TimeGrid, ensemble: AgentEnsemble, agent_index: int = 0,
                  reference: str = "empirical") -> CostReport:
    """Trapezoidal cost of one agent, averaged over replicas.

    ``reference`` picks the population term in the tracking costs: the
    empirical average ("empirical") or the mean field ("mean_field").
    """
    if not 0 <= agent_index < ensemble.N:
        raise IndexError(f"agent_index {agent_index} out of range for N = {ensemble.N}")
    if reference == "empirical":
        ref = ensemble.average
    elif reference == "mean_field":
        ref = ensemble.xbar
    else:
        raise ValueError(f"unknown reference {reference!r}")
    x = ensemble.paths[:, agent_index]
    u = ensemble.controls[:, agent_index]
    y = x - ref @ spec.F1hat.T
    w = _trapezoid_weights(grid)
    running = np.einsum("rka,ab,rkb,k->r", y, spec.M, y, w)
    energy = np.einsum("rka,rka,k->r", u, u, w)
    yT = x[:, -1] - ref[:, -1] @ spec.F2hat.T
    terminal = np.einsum("ra,ab,rb->r", yT, spec.G, yT)
    total = running + energy + terminal
    n_mc = len(total)
    se = float(total.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    return CostReport(float(total.mean()), se, float(running.mean()), float(energy.mean()),
                      float(terminal.mean()), total)


@dataclass
class RateFit:
    Ns: list[int]
    values: list[float]
    slope: float
    intercept: float
    r_squared: float
    std_errors: list[float] | None = None


def fit_rate(Ns: Sequence[int], values: Sequence[float], std_errors: Sequence[float] | None = None) -> RateFit:
    """Least squares on (log N, log value)."""
    Ns = [int(n) for n in Ns]
    values = [float(v) for v in values]
    if len(Ns) < 4 or len(Ns) != len(values):
        raise ValueError("need at least 4 (N, value) pairs")
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("Ns must be strictly increasing")
    if any(v <= 0 for v in values):
        raise ValueError("rate fit needs positive values")
    res = stats.linregress(np.log(Ns), np.log(values))
    return RateFit(Ns, values, float(res.slope), float(res.intercept), float(res.rvalue**2),
                   None if std_errors is None else [float(s) for s in std_errors])


def mean_field_error(ensemble: AgentEnsemble) -> tuple[float, float]:
    """sup_k E|xbar(t_k) - x^(N)(t_k)|^2 and its standard error at the maximizing knot."""
    err = np.sum((ensemble.xbar - ensemble.average) ** 2, axis=2)  # (n_mc, n+1)
    means = err.mean(axis=0)
    k = int(np.argmax(means))
    n_mc = err.shape[0]
    se = float(err[:, k].std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    return float(means[k]), se


def average_state_error_experiment(spec: ModelSpec, grid: TimeGrid, Ns: Sequence[int], n_mc: int,
                                   seed: int, solution, workers: int = 1) -> RateFit:
    values, ses = [], []
    for N in Ns:
        ens = simulate_n_player(spec, grid, N, n_mc, seed, solution, workers=workers)
        v, se = mean_field_error(ens)
        values.append(v)
        ses.append(se)
    return fit_rate(Ns, values, ses)


@dataclass
class NashRow:
    N: int
    J_eq: float
    J_eq_se: float
    J_inf: float
    J_inf_se: float
    gap: float
    gap_se: float
    deviations: dict[str, dict[str, float]]


@dataclass
class NashExperiment:
    gap_fit: RateFit | None
    per_N: list[NashRow]
    mode: str


def epsilon_nash_experiment(spec: ModelSpec, grid: TimeGrid, Ns: Sequence[int], n_mc: int, seed: int,
                            solution, deviation: Deviation | Sequence[Deviation] | None = None,
                            mode: str = "limit-gap", workers: int = 1) -> NashExperiment:
    """Cost gap |J_inf - J_N| of agent 1 and, in "defect" mode, Nash defects.

    Every run for one N reuses the same noise draws (paired paths).  The
    defect of a deviation is max(0, J_eq - J_dev) with pooled standard error
    sqrt(se_eq^2 + se_dev^2).  The gap is fitted against N in both modes.
    """
    if mode not in ("limit-gap", "defect"):
        raise ValueError(f"mode must be 'limit-gap' or 'defect', got {mode!r}")
    if isinstance(deviation, Deviation):
        deviation = [deviation]
    deviation = list(deviation or [])
    if mode == "defect" and not deviation:
        raise ValueError("defect mode needs at least one deviation")
    rows = []
    for N in Ns:
        eq = simulate_n_player(spec, grid, N, n_mc, seed, solution, workers=workers)
        lim = simulate_n_player(spec, grid, N, n_mc, seed, solution, coupling="limit", workers=workers)
        J_eq = estimate_cost(spec, grid, eq, 0, "empirical")
        J_inf = estimate_cost(spec, grid, lim, 0, "mean_field")
        diff = J_inf.per_replica - J_eq.per_replica
        gap_se = float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
        devs = {}
        for dev in deviation if mode == "defect" else []:
            ens = simulate_n_player(spec, grid, N, n_mc, seed, solution, deviation=dev, workers=workers)
            J_dev = estimate_cost(spec, grid, ens, 0, "empirical")
            pooled = float(np.hypot(J_eq.std_error, J_dev.std_error))
            devs[dev.name] = {"J_dev": J_dev.mean_cost, "J_dev_se": J_dev.std_error,
                              "defect": max(0.0, J_eq.mean_cost - J_dev.mean_cost), "pooled_se": pooled}
        rows.append(NashRow(N, J_eq.mean_cost, J_eq.std_error, J_inf.mean_cost, J_inf.std_error,
                            abs(J_inf.mean_cost - J_eq.mean_cost), gap_se, devs))
    gaps = [r.gap for r in rows]
    fit = None
    if len(rows) >= 4 and all(g > 0 for g in gaps):
        fit = fit_rate([r.N for r in rows], gaps, [r.gap_se for r in rows])
    return NashExperiment(fit, rows, mode)
