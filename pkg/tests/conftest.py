import numpy as np
import pytest

from lqmfg.model import ModelSpec

ACCEPTANCE_LINES: list[str] = []


def demo_spec(T: float = 1.0, b: float = 0.5, **overrides) -> ModelSpec:
    """Two-state, one-control model with one idiosyncratic and one common mode (det-diff)."""
    kw = dict(
        A=[[-0.5, 0.2], [-0.2, -0.3]], B=[[b], [0.4 * b]], F1=np.diag([0.3, 0.1]),
        D=[np.diag([0.2, 0.1])], F2=[0.1 * np.eye(2)], sigma=[[0.3, 0.1]], sigma0=[[0.2, -0.1]],
        M=np.eye(2), G=np.eye(2), F1hat=0.5 * np.eye(2), F2hat=0.5 * np.eye(2),
        xi_bar=[1.0, -0.5], xi_cov=0.1 * np.eye(2), name="demo",
    )
    kw.update(overrides)
    return ModelSpec.build(2, 1, m_idio=1, m_common=1, T=T, **kw)


def certified_spec() -> ModelSpec:
    return demo_spec(T=0.5, b=0.3)


def random_psd(rng, d, scale=1.0):
    X = rng.standard_normal((d, d))
    return scale * (X @ X.T) / d


def random_spec(rng, d=2, k=1, m=1, m0=1, T=1.0, scale=0.3, det_diff=False) -> ModelSpec:
    def mat(*shape):
        return scale * rng.standard_normal(shape)

    return ModelSpec.build(
        d, k, m_idio=m, m_common=m0, T=T,
        A=mat(d, d) - np.eye(d), B=mat(d, k) + 0.5 * np.eye(d, k), F1=mat(d, d),
        D=mat(m, d, d), F2=mat(m, d, d), sigma=mat(m, d),
        D0=np.zeros((m0, d, d)) if det_diff else mat(m0, d, d),
        F0=np.zeros((m0, d, d)) if det_diff else mat(m0, d, d), sigma0=mat(m0, d),
        M=random_psd(rng, d), G=random_psd(rng, d), F1hat=mat(d, d), F2hat=mat(d, d),
        lambda_idio=rng.uniform(0.2, 1.0, m), lambda_common=rng.uniform(0.2, 1.0, m0),
        xi_bar=rng.standard_normal(d), xi_cov=random_psd(rng, d, 0.1),
    )


def uniqueness_spec(rng, d=2, k=1, T=1.0) -> ModelSpec:
    """Random model meeting the sufficient conditions for the eta = R - Pi split.

    D = F2 = F1 = 0; F1hat <= 0 commutes with M; F2hat <= 0 commutes with G.
    """
    Q1, _ = np.linalg.qr(rng.standard_normal((d, d)))
    Q2, _ = np.linalg.qr(rng.standard_normal((d, d)))
    M = Q1 @ np.diag(rng.uniform(0.2, 1.5, d)) @ Q1.T
    F1hat = Q1 @ np.diag(-rng.uniform(0.0, 1.0, d)) @ Q1.T
    G = Q2 @ np.diag(rng.uniform(0.2, 1.5, d)) @ Q2.T
    F2hat = Q2 @ np.diag(-rng.uniform(0.0, 1.0, d)) @ Q2.T
    return ModelSpec.build(
        d, k, m_idio=1, m_common=1, T=T,
        A=0.3 * rng.standard_normal((d, d)) - 0.5 * np.eye(d), B=0.5 * rng.standard_normal((d, k)),
        sigma=0.3 * rng.standard_normal((1, d)), D0=0.2 * rng.standard_normal((1, d, d)),
        sigma0=0.3 * rng.standard_normal((1, d)),
        M=0.5 * (M + M.T), G=0.5 * (G + G.T), F1hat=0.5 * (F1hat + F1hat.T), F2hat=0.5 * (F2hat + F2hat.T),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
