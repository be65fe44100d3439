"""Backward operator Riccati solves: Pi, the decoupling field eta, and R."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ModelSpec, TimeGrid, congruence, yosida

BLOWUP_NORM = 1e12
SYM_TOL = 1e-12


class RiccatiBlowUp(ArithmeticError):
    def __init__(self, kind: str, time: float):
        super().__init__(f"{kind} Riccati solution blew up (norm > {BLOWUP_NORM:g}) near t = {time:.6g}")
        self.kind = kind
        self.time = time


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    grid: TimeGrid
    values: np.ndarray  # (n_steps + 1, d, d)
    derivatives: np.ndarray  # time derivative at each knot, same shape
    kind: str  # "Pi", "Eta", "EtaN" or "R"
    symmetric: bool = True
    yosida_n: float | None = None
    include_common_diffusion: bool = True
    substeps: int = 1

    def __getitem__(self, k: int) -> np.ndarray:
        return self.values[k]

    def at(self, s: float) -> np.ndarray:
        """Value at fractional knot position ``s`` by cubic Hermite interpolation.

        Accurate to O(dt^4), matching the integrator, so midpoint
        coefficients do not degrade the order of dependent solves.
        """
        k = int(np.floor(s))
        if k >= self.grid.n_steps:
            return self.values[-1]
        theta = s - k
        if theta == 0.0:
            return self.values[k]
        h = self.grid.dt
        p0, p1 = self.values[k], self.values[k + 1]
        m0, m1 = self.derivatives[k], self.derivatives[k + 1]
        t2, t3 = theta * theta, theta**3
        return ((2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + theta) * h * m0
                + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * h * m1)

    def sup_norm(self) -> float:
        return float(max(np.linalg.norm(v, 2) for v in self.values))

    def to_csv(self, path) -> None:
        d = self.values.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"m_{i}_{j}" for i in range(d) for j in range(d)])
            for t, v in zip(self.grid.times, self.values):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in v.ravel()])


@dataclass(frozen=True, eq=False)
class LambdaPath:
    grid: TimeGrid
    values: np.ndarray

    def __getitem__(self, k: int) -> np.ndarray:
        return self.values[k]


def _integrate_backward(rhs: Callable[[np.ndarray, float], np.ndarray], terminal: np.ndarray,
                        grid: TimeGrid, symmetric: bool, kind: str) -> tuple[np.ndarray, np.ndarray, int]:
    """Classical RK4 from t = T down to 0; ``rhs(X, s)`` takes knot position s."""
    for substeps in (1, 2):
        try:
            values = _rk4(rhs, terminal, grid, symmetric, kind, substeps)
        except RiccatiBlowUp:
            if substeps == 2:
                raise
            continue
        derivs = np.stack([rhs(values[k], float(k)) for k in range(grid.n_steps + 1)])
        return values, derivs, substeps
    raise AssertionError("unreachable")


def _rk4(rhs, terminal, grid, symmetric, kind, substeps):
    n = grid.n_steps
    h = grid.dt / substeps
    ds = 1.0 / substeps
    values = np.empty((n + 1,) + terminal.shape)
    X = np.array(terminal, dtype=float)
    values[n] = X
    for k in range(n - 1, -1, -1):
        for i in range(substeps):
            s = k + 1 - i * ds
            k1 = rhs(X, s)
            k2 = rhs(X - 0.5 * h * k1, s - 0.5 * ds)
            k3 = rhs(X - 0.5 * h * k2, s - 0.5 * ds)
            k4 = rhs(X - h * k3, s - ds)
            X = X - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if symmetric:
                X = 0.5 * (X + X.T)
            if not np.all(np.isfinite(X)) or np.abs(X).max() > BLOWUP_NORM:
                raise RiccatiBlowUp(kind, (s - ds) * grid.dt)
        values[k] = X
    return values


def _diffusion_congruence(spec: ModelSpec, P: np.ndarray, include_common: bool) -> np.ndarray:
    out = congruence(spec.D, spec.lambda_idio, P)
    if include_common:
        out = out + congruence(spec.D0, spec.lambda_common, P)
    return out


def solve_pi_riccati(spec: ModelSpec, grid: TimeGrid, include_common_diffusion: bool = True) -> RiccatiSolution:
    A, BBt, M = spec.A, spec.BBt, spec.M

    def rhs(P, s):
        return -(A.T @ P + P @ A - P @ BBt @ P + _diffusion_congruence(spec, P, include_common_diffusion) + M)

    values, derivs, sub = _integrate_backward(rhs, spec.G, grid, True, "Pi")
    return RiccatiSolution(grid, values, derivs, "Pi", True, None, include_common_diffusion, sub)


def lambda_at(spec: ModelSpec, P: np.ndarray) -> np.ndarray:
    """D* P F2 + P F1 - M F1hat for a single Riccati value P."""
    return congruence(spec.D, spec.lambda_idio, P, right=spec.F2) + P @ spec.F1 - spec.M @ spec.F1hat


def compute_lambda(spec: ModelSpec, pi: RiccatiSolution) -> LambdaPath:
    if pi.kind != "Pi":
        raise ValueError(f"compute_lambda needs a Pi solution, got {pi.kind}")
    return LambdaPath(pi.grid, np.stack([lambda_at(spec, P) for P in pi.values]))


def _is_sym(X: np.ndarray) -> bool:
    return bool(np.abs(X - X.T).max(initial=0.0) <= SYM_TOL * max(1.0, np.abs(X).max(initial=0.0)))


def _coefficients(pi: RiccatiSolution, lam: LambdaPath, spec: ModelSpec, s: float):
    if float(s).is_integer():
        k = int(s)
        return pi.values[k], lam.values[k]
    P = pi.at(s)
    return P, lambda_at(spec, P)


def solve_eta_riccati(spec: ModelSpec, grid: TimeGrid, pi: RiccatiSolution, lam: LambdaPath,
                      yosida_n: float | None = None) -> RiccatiSolution:
    """Decoupling-field Riccati; uses the Yosida approximant of A when ``yosida_n`` is set."""
    _check_grid(grid, pi, lam)
    A = spec.A if yosida_n is None else yosida(spec, yosida_n)[1]
    BBt, F1 = spec.BBt, spec.F1
    terminal = -spec.G @ spec.F2hat
    # symmetry is preserved by the flow only when every forcing term is symmetric
    symmetric = (_is_sym(terminal) and not np.any(F1) and all(_is_sym(L) for L in lam.values))

    def rhs(E, s):
        P, L = _coefficients(pi, lam, spec, s)
        return -(E @ (A - BBt @ P) + (A.T - P @ BBt) @ E + E @ F1 - E @ BBt @ E + L)

    kind = "Eta" if yosida_n is None else "EtaN"
    values, derivs, sub = _integrate_backward(rhs, terminal, grid, symmetric, kind)
    return RiccatiSolution(grid, values, derivs, kind, symmetric, yosida_n, pi.include_common_diffusion, sub)


def solve_r_riccati(spec: ModelSpec, grid: TimeGrid, lam: LambdaPath, pi: RiccatiSolution) -> RiccatiSolution:
    """Auxiliary Riccati whose difference with Pi is eta (when F1 = 0)."""
    _check_grid(grid, pi, lam)
    A, BBt, M = spec.A, spec.BBt, spec.M
    terminal = spec.G - spec.G @ spec.F2hat
    symmetric = _is_sym(terminal) and all(_is_sym(L) for L in lam.values)

    def rhs(R, s):
        P, L = _coefficients(pi, lam, spec, s)
        return -(R @ A + A.T @ R - R @ BBt @ R + L
                 + _diffusion_congruence(spec, P, pi.include_common_diffusion) + M)

    values, derivs, sub = _integrate_backward(rhs, terminal, grid, symmetric, "R")
    return RiccatiSolution(grid, values, derivs, "R", symmetric, None, pi.include_common_diffusion, sub)


def _check_grid(grid: TimeGrid, pi: RiccatiSolution, lam: LambdaPath) -> None:
    if pi.grid != grid or lam.grid != grid:
        raise ValueError("Pi, Lambda and the requested grid must coincide")


@dataclass
class AssumptionReport:
    f1_zero: bool
    f2_zero: bool
    terminal_min_eig: float
    lambda_min_eigs: np.ndarray
    det_diff: bool
    notes: list[str] = field(default_factory=list)

    @property
    def terminal_psd(self) -> bool:
        return self.terminal_min_eig >= -1e-10

    @property
    def lambda_psd(self) -> bool:
        return bool(np.all(self.lambda_min_eigs >= -1e-10))

    @property
    def passes(self) -> bool:
        return self.f1_zero and self.terminal_psd and self.lambda_psd

    def as_dict(self) -> dict:
        return {
            "f1_zero": self.f1_zero, "f2_zero": self.f2_zero,
            "terminal_min_eig": self.terminal_min_eig, "terminal_psd": self.terminal_psd,
            "lambda_min_eig": float(self.lambda_min_eigs.min()), "lambda_psd": self.lambda_psd,
            "det_diff": self.det_diff, "passes": self.passes, "notes": list(self.notes),
        }


def _min_sym_eig(X: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (X + X.T)).min())


def check_uniqueness_assumptions(spec: ModelSpec, lam: LambdaPath) -> AssumptionReport:
    notes = []
    f1_zero = not np.any(spec.F1)
    f2_zero = not np.any(spec.F2)
    if not f1_zero and f2_zero:
        notes.append("F1 != 0 but F2 = 0: the diffusion coefficient carries no mean-field coupling")
    det_diff = not np.any(spec.D0) and not np.any(spec.F0)
    return AssumptionReport(
        f1_zero=f1_zero,
        f2_zero=f2_zero,
        terminal_min_eig=_min_sym_eig(-spec.G @ spec.F2hat),
        lambda_min_eigs=np.array([_min_sym_eig(L) for L in lam.values]),
        det_diff=det_diff,
        notes=notes,
    )
