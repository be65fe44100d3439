"""Truncated model data, time grids, semigroups and Yosida approximants.

All Hilbert-space objects live on a finite orthonormal truncation: operators
are matrices, and operators acting into Hilbert-Schmidt spaces over a noise
space are stored as *mode stacks* (one matrix or vector per retained noise
mode).  The eigenvalue scaling ``sqrt(lambda_j)`` is applied where the stacks
are used, never baked into the stored arrays.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.linalg
import yaml

PSD_TOL = 1e-10


class ModelError(ValueError):
    """Raised for malformed model data that cannot even be validated."""


class SemigroupError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    T: float

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be positive, got {self.n_steps}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.n_steps * factor, self.T)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Galerkin-truncated linear-quadratic game with common noise.

    Mode stacks have shape ``(m, d_state, d_state)`` for operator stacks and
    ``(m, d_state)`` for the additive diffusions; ``m`` may be zero.
    """

    d_state: int
    d_ctrl: int
    A: np.ndarray
    B: np.ndarray
    F1: np.ndarray
    D: np.ndarray
    F2: np.ndarray
    sigma: np.ndarray
    D0: np.ndarray
    F0: np.ndarray
    sigma0: np.ndarray
    M: np.ndarray
    G: np.ndarray
    F1hat: np.ndarray
    F2hat: np.ndarray
    lambda_idio: np.ndarray
    lambda_common: np.ndarray
    xi_bar: np.ndarray
    xi_cov: np.ndarray
    T: float
    name: str = field(default="model", compare=False)

    @property
    def m_idio(self) -> int:
        return len(self.lambda_idio)

    @property
    def m_common(self) -> int:
        return len(self.lambda_common)

    @property
    def BBt(self) -> np.ndarray:
        return self.B @ self.B.T

    @classmethod
    def build(cls, d_state: int, d_ctrl: int, m_idio: int = 0, m_common: int = 0,
              T: float = 1.0, **kwargs) -> "ModelSpec":
        """Create a model with every unspecified operator set to zero.

        ``lambda_idio``/``lambda_common`` default to ones, ``G``/``M`` to zero.
        Scalars and nested lists are accepted anywhere an array is expected.
        """
        d, k = d_state, d_ctrl
        defaults: dict[str, Any] = {
            "A": np.zeros((d, d)), "B": np.zeros((d, k)), "F1": np.zeros((d, d)),
            "D": np.zeros((m_idio, d, d)), "F2": np.zeros((m_idio, d, d)),
            "sigma": np.zeros((m_idio, d)),
            "D0": np.zeros((m_common, d, d)), "F0": np.zeros((m_common, d, d)),
            "sigma0": np.zeros((m_common, d)),
            "M": np.zeros((d, d)), "G": np.zeros((d, d)),
            "F1hat": np.zeros((d, d)), "F2hat": np.zeros((d, d)),
            "lambda_idio": np.ones(m_idio), "lambda_common": np.ones(m_common),
            "xi_bar": np.zeros(d), "xi_cov": np.zeros((d, d)),
        }
        unknown = set(kwargs) - set(defaults) - {"name"}
        if unknown:
            raise ModelError(f"unknown model fields: {sorted(unknown)}")
        values = {}
        for key, default in defaults.items():
            raw = kwargs.get(key)
            values[key] = default if raw is None else _coerce(raw, default.shape)
        return cls(d_state=int(d_state), d_ctrl=int(d_ctrl), T=float(T),
                   name=kwargs.get("name", "model"), **values)

    def replace(self, **changes) -> "ModelSpec":
        coerced = {}
        for key, value in changes.items():
            if key in ("T", "name", "d_state", "d_ctrl"):
                coerced[key] = value
            else:
                coerced[key] = np.asarray(value, dtype=float)
        return dataclasses.replace(self, **coerced)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name, "d_state": self.d_state, "d_ctrl": self.d_ctrl,
            "m_idio": self.m_idio, "m_common": self.m_common, "T": self.T,
        }
        for f in dataclasses.fields(self):
            if f.name in out:
                continue
            out[f.name] = np.asarray(getattr(self, f.name)).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelSpec":
        data = dict(data)
        try:
            d_state = int(data.pop("d_state"))
            d_ctrl = int(data.pop("d_ctrl"))
            T = float(data.pop("T"))
        except KeyError as exc:
            raise ModelError(f"model config is missing required key {exc}") from None
        m_idio = data.pop("m_idio", None)
        m_common = data.pop("m_common", None)
        if m_idio is None:
            m_idio = len(data.get("lambda_idio", []))
        if m_common is None:
            m_common = len(data.get("lambda_common", []))
        return cls.build(d_state, d_ctrl, int(m_idio), int(m_common), T, **data)

    @classmethod
    def load(cls, path: str | Path) -> "ModelSpec":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ModelError(f"{path}: expected a mapping at top level")
        if "model" in data and isinstance(data["model"], dict):
            data = data["model"]
        data.setdefault("name", Path(path).stem)
        return cls.from_dict(data)


def _coerce(raw, shape) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.shape != shape and arr.size == int(np.prod(shape)):
        # scalar / flat shorthand, mostly for one-dimensional problems
        arr = arr.reshape(shape)
    return arr


def validate_model(spec: ModelSpec) -> list[str]:
    """Return the list of violated invariants; an empty list means valid."""
    problems: list[str] = []
    d, k = spec.d_state, spec.d_ctrl
    if d < 1 or k < 1:
        problems.append(f"d_state and d_ctrl must be positive, got {d}, {k}")
        return problems
    if spec.B.shape != (d, k):
        problems.append(f"dimension mismatch: B has shape {spec.B.shape}, expected {(d, k)}")
    for name in ("A", "F1", "M", "G", "F1hat", "F2hat", "xi_cov"):
        arr = getattr(spec, name)
        if arr.shape != (d, d):
            problems.append(f"dimension mismatch: {name} has shape {arr.shape}, expected {(d, d)}")
    if spec.xi_bar.shape != (d,):
        problems.append(f"dimension mismatch: xi_bar has shape {spec.xi_bar.shape}, expected {(d,)}")
    if spec.lambda_idio.ndim != 1 or spec.lambda_common.ndim != 1:
        problems.append("lambda_idio and lambda_common must be 1-d")
        return problems
    m, m0 = len(spec.lambda_idio), len(spec.lambda_common)
    for name, count in (("D", m), ("F2", m), ("D0", m0), ("F0", m0)):
        arr = getattr(spec, name)
        if arr.shape != (count, d, d):
            problems.append(f"dimension mismatch: {name} has shape {arr.shape}, expected {(count, d, d)}")
    for name, count in (("sigma", m), ("sigma0", m0)):
        arr = getattr(spec, name)
        if arr.shape != (count, d):
            problems.append(f"dimension mismatch: {name} has shape {arr.shape}, expected {(count, d)}")
    if problems:
        return problems

    for name in ("M", "G", "xi_cov"):
        arr = getattr(spec, name)
        if not np.allclose(arr, arr.T, atol=PSD_TOL, rtol=0):
            problems.append(f"{name} not symmetric")
            continue
        lo = float(np.linalg.eigvalsh(arr).min())
        if lo < -PSD_TOL:
            problems.append(f"{name} not PSD (min eigenvalue {lo:.3g})")
    for name in ("lambda_idio", "lambda_common"):
        lam = getattr(spec, name)
        if np.any(lam <= 0):
            problems.append(f"{name} entries must be strictly positive")
    for f in dataclasses.fields(spec):
        if f.name in ("name", "d_state", "d_ctrl"):
            continue
        if not np.all(np.isfinite(np.asarray(getattr(spec, f.name), dtype=float))):
            problems.append(f"{f.name} contains non-finite values")
    if not spec.T > 0:
        problems.append("T must be positive")
    return problems


def alpha_growth(A: np.ndarray) -> float:
    """max(0, numerical abscissa of A); gives ||exp(tA)|| <= exp(alpha t)."""
    sym = 0.5 * (A + A.T)
    return max(0.0, float(np.linalg.eigvalsh(sym).max(initial=0.0)))


@dataclass(frozen=True, eq=False)
class SemigroupTable:
    grid: TimeGrid
    matrices: np.ndarray  # (n_steps + 1, d, d)
    alpha_growth: float
    M_A: float = 1.0

    @property
    def M_T(self) -> float:
        return self.M_A * float(np.exp(self.alpha_growth * self.grid.T))

    @property
    def step(self) -> np.ndarray:
        """S(dt), the one-step propagator."""
        return self.matrices[1]

    def __getitem__(self, k: int) -> np.ndarray:
        return self.matrices[k]


def build_semigroup(spec: ModelSpec, grid: TimeGrid) -> SemigroupTable:
    A = spec.A
    mats = np.empty((grid.n_steps + 1, spec.d_state, spec.d_state))
    for k, t in enumerate(grid.times):
        S = scipy.linalg.expm(t * A)
        if not np.all(np.isfinite(S)):
            cond = np.linalg.cond(A) if np.all(np.isfinite(A)) else np.inf
            raise SemigroupError(
                f"matrix exponential failed at t={t:.6g} (cond(A) ~ {cond:.3g}, "
                f"||A|| = {np.linalg.norm(A, 2):.3g})"
            )
        mats[k] = S
    mats.setflags(write=False)
    return SemigroupTable(grid, mats, alpha_growth(A))


def step_propagator(spec: ModelSpec, grid: TimeGrid) -> np.ndarray:
    """S(dt) alone, for callers that never need later knots."""
    S = scipy.linalg.expm(grid.dt * spec.A)
    if not np.all(np.isfinite(S)):
        raise SemigroupError(f"matrix exponential failed at t={grid.dt:.6g} (||A|| = {np.linalg.norm(spec.A, 2):.3g})")
    return S


def yosida(spec: ModelSpec, n: float) -> tuple[np.ndarray, np.ndarray]:
    """Resolvent J_n = n (nI - A)^-1 and Yosida approximant A_n = A J_n."""
    d = spec.d_state
    shifted = n * np.eye(d) - spec.A
    try:
        J = n * np.linalg.inv(shifted)
    except np.linalg.LinAlgError:
        raise ModelError(f"nI - A is singular for n = {n}") from None
    if not np.all(np.isfinite(J)) or np.linalg.cond(shifted) > 1e14:
        raise ModelError(f"nI - A is numerically singular for n = {n}")
    return J, spec.A @ J


# --- mode-stack contractions ------------------------------------------------

def stack_norm(stack: np.ndarray, lam: np.ndarray) -> float:
    """sqrt(sum_j lam_j ||X_j||_2^2); the Hilbert-Schmidt-valued operator norm used for constants."""
    if len(lam) == 0:
        return 0.0
    norms = np.array([np.linalg.norm(X, 2) if X.ndim == 2 else np.linalg.norm(X) for X in stack])
    return float(np.sqrt(np.sum(lam * norms**2)))


def congruence(stack: np.ndarray, lam: np.ndarray, P: np.ndarray,
               right: np.ndarray | None = None) -> np.ndarray:
    """sum_j lam_j X_j^T P Y_j with Y = X unless ``right`` is given."""
    right = stack if right is None else right
    if len(lam) == 0:
        return np.zeros_like(P)
    return np.einsum("j,jba,bc,jcd->ad", lam, stack, P, right)


def adjoint_apply(stack: np.ndarray, lam: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """D* applied to per-mode vectors: sum_j lam_j D_j^T v_j.

    ``vecs`` has shape (..., m, d); returns (..., d).
    """
    if len(lam) == 0:
        return np.zeros(vecs.shape[:-2] + (stack.shape[-1],))
    return np.einsum("j,jba,...jb->...a", lam, stack, vecs)
