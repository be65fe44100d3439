import math

import numpy as np
import pytest

from lqmfg.model import (ModelError, ModelSpec, TimeGrid, alpha_growth, adjoint_apply, build_semigroup,
                         congruence, stack_norm, validate_model, yosida)

from conftest import demo_spec, random_spec


# --- validate_model -----------------------------------------------------------

def test_validate_flags_non_psd_G():
    spec = ModelSpec.build(2, 1, m_idio=1, G=np.diag([1.0, -0.5]))
    report = validate_model(spec)
    assert any("G not PSD" in r for r in report)


def test_validate_all_zero_model_is_valid():
    spec = ModelSpec.build(2, 1, m_idio=1, lambda_idio=[1.0])
    assert validate_model(spec) == []


def test_validate_flags_control_dimension_mismatch():
    spec = ModelSpec.build(2, 1, m_idio=1, B=np.ones((2, 2)))
    report = validate_model(spec)
    assert any("dimension mismatch" in r and "B" in r for r in report)


def test_validate_flags_asymmetric_and_nonpositive_lambda():
    spec = ModelSpec.build(2, 1, m_idio=1, M=[[1.0, 0.5], [0.0, 1.0]], lambda_idio=[0.0])
    report = validate_model(spec)
    assert any("M not symmetric" in r for r in report)
    assert any("lambda_idio" in r for r in report)


def test_validate_flags_nonfinite_entries():
    spec = ModelSpec.build(1, 1, A=[[np.nan]])
    assert any("A contains non-finite" in r for r in validate_model(spec))


def test_empty_mode_stacks_are_legal():
    spec = ModelSpec.build(2, 1)
    assert spec.m_idio == 0 and spec.m_common == 0
    assert validate_model(spec) == []
    assert stack_norm(spec.D, spec.lambda_idio) == 0.0
    assert np.array_equal(congruence(spec.D, spec.lambda_idio, np.eye(2)), np.zeros((2, 2)))


def test_unknown_field_rejected():
    with pytest.raises(ModelError, match="unknown"):
        ModelSpec.build(1, 1, Z=1.0)


def test_dict_round_trip_and_yaml_load(tmp_path):
    spec = demo_spec()
    again = ModelSpec.from_dict(spec.to_dict())
    for name in ("A", "B", "D", "sigma0", "lambda_common", "xi_cov"):
        assert np.array_equal(getattr(spec, name), getattr(again, name))
    import yaml

    path = tmp_path / "m.yaml"
    path.write_text(yaml.safe_dump({"model": spec.to_dict()}))
    loaded = ModelSpec.load(path)
    assert np.array_equal(loaded.F2, spec.F2) and loaded.T == spec.T


def test_missing_required_key():
    with pytest.raises(ModelError, match="d_state"):
        ModelSpec.from_dict({"d_ctrl": 1, "T": 1.0})


# --- semigroup ---------------------------------------------------------------

def test_zero_generator_semigroup_is_identity():
    spec = ModelSpec.build(3, 1)
    table = build_semigroup(spec, TimeGrid(5, 1.0))
    for k in range(6):
        assert np.array_equal(table[k], np.eye(3))
    assert table.M_T == 1.0


def test_diagonal_generator():
    spec = ModelSpec.build(2, 1, A=np.diag([-1.0, -2.0]))
    table = build_semigroup(spec, TimeGrid(4, 1.0))
    assert np.allclose(table[4], np.diag([math.exp(-1), math.exp(-2)]), rtol=1e-14, atol=0)
    assert table.M_T == 1.0


def _series_exp(X, terms=60):
    out = np.eye(len(X))
    term = np.eye(len(X))
    for k in range(1, terms):
        term = term @ X / k
        out = out + term
    return out


def test_rotation_matches_power_series():
    spec = ModelSpec.build(2, 1, A=[[0.0, 1.0], [-1.0, 0.0]], T=math.pi / 2)
    table = build_semigroup(spec, TimeGrid(1, math.pi / 2))
    oracle = _series_exp(spec.A * math.pi / 2)
    assert np.abs(table[1] - oracle).max() <= 1e-10
    assert np.allclose(table[1], [[0.0, 1.0], [-1.0, 0.0]], atol=1e-12)


def test_semigroup_property_and_growth_bound(rng):
    for _ in range(5):
        spec = random_spec(rng, d=3, scale=0.8)
        grid = TimeGrid(12, 2.0)
        table = build_semigroup(spec, grid)
        a = alpha_growth(spec.A)
        for j in range(0, 7):
            for k in range(0, 6):
                lhs, rhs = table[j + k], table[j] @ table[k]
                assert np.linalg.norm(lhs - rhs, 2) <= 1e-8 * max(1.0, np.linalg.norm(lhs, 2))
        for k, t in enumerate(grid.times):
            assert np.linalg.norm(table[k], 2) <= math.exp(t * a) * (1 + 1e-12)


# --- Yosida --------------------------------------------------------------------

def test_yosida_zero_generator():
    J, An = yosida(ModelSpec.build(2, 1), 5.0)
    assert np.allclose(J, np.eye(2)) and np.allclose(An, 0)


def test_yosida_scalar_resolvent():
    J, An = yosida(ModelSpec.build(1, 1, A=[[-2.0]]), 2.0)
    assert J[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert An[0, 0] == pytest.approx(-1.0, abs=1e-15)


def test_yosida_converges_and_resolvent_bound(rng):
    spec = random_spec(rng, d=3, scale=0.8)
    x = rng.standard_normal(3)
    x /= np.linalg.norm(x)
    a = alpha_growth(spec.A)
    errs = []
    for n in (10, 100, 1000):
        J, An = yosida(spec, n)
        errs.append(np.linalg.norm(An @ x - spec.A @ x))
        assert np.linalg.norm(J, 2) <= n / (n - a) * (1 + 1e-12)
    assert errs[0] > errs[1] > errs[2]


def test_yosida_singular_shift():
    with pytest.raises(ModelError, match="singular"):
        yosida(ModelSpec.build(1, 1, A=[[3.0]]), 3.0)


# --- mode stacks -------------------------------------------------------------------

def test_stack_contractions_match_loops(rng):
    m, d = 3, 4
    stack = rng.standard_normal((m, d, d))
    right = rng.standard_normal((m, d, d))
    lam = rng.uniform(0.1, 1.0, m)
    P = rng.standard_normal((d, d))
    vecs = rng.standard_normal((5, m, d))
    loop = sum(lam[j] * stack[j].T @ P @ right[j] for j in range(m))
    assert np.allclose(congruence(stack, lam, P, right), loop, atol=1e-13)
    loop_adj = np.stack([sum(lam[j] * stack[j].T @ v[j] for j in range(m)) for v in vecs])
    assert np.allclose(adjoint_apply(stack, lam, vecs), loop_adj, atol=1e-13)
    norms = [np.linalg.norm(X, 2) for X in stack]
    assert stack_norm(stack, lam) == pytest.approx(math.sqrt(sum(l * n**2 for l, n in zip(lam, norms))))


def test_time_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        TimeGrid(0, 1.0)
    with pytest.raises(ValueError):
        TimeGrid(4, 0.0)
    assert TimeGrid(4, 2.0).refined().dt == 0.25
