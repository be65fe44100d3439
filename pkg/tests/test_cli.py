import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from lqmfg.cli import dispatch, load_config, ConfigError

from conftest import certified_spec


def write_model(path, spec):
    path.write_text(yaml.safe_dump(spec.to_dict()))
    return path


def write_config(tmp_path, spec, **sections):
    write_model(tmp_path / "model.yaml", spec)
    cfg = {"model": "model.yaml", "grid": {"n_steps": 6}, "output": {"directory": "out"}}
    cfg.update(sections)
    path = tmp_path / "ok.cfg"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_certify_on_certified_model(tmp_path):
    cfg = write_config(tmp_path, certified_spec())
    assert dispatch(["mfg", "certify", "--config", str(cfg)]) == 0
    data = json.loads((tmp_path / "out" / "certificate.json").read_text())
    assert data["passes_contraction"] is True
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert "certificate.json" in manifest["files"] and len(manifest["config_hash"]) == 64


def test_certify_strict_fails_on_long_horizon(tmp_path):
    cfg = write_config(tmp_path, certified_spec().replace(T=3.0))
    assert dispatch(["mfg", "certify", "--config", str(cfg)]) == 0
    assert dispatch(["mfg", "certify", "--config", str(cfg), "--strict"]) == 1


def test_validate_names_non_psd_G(tmp_path, capsys):
    cfg = write_config(tmp_path, certified_spec().replace(G=np.diag([1.0, -0.5])))
    assert dispatch(["model", "validate", "--config", str(cfg)]) == 1
    assert "G not PSD" in capsys.readouterr().err
    report = json.loads((tmp_path / "out" / "validation.json").read_text())
    assert report["valid"] is False


def test_solvers_refuse_invalid_models(tmp_path):
    cfg = write_config(tmp_path, certified_spec().replace(G=np.diag([1.0, -0.5])))
    assert dispatch(["mfg", "solve", "--config", str(cfg)]) == 1


def test_decoupled_needs_det_diff(tmp_path, capsys):
    spec = certified_spec().replace(D0=np.array([[[0.1, 0.0], [0.0, 0.1]]]))
    cfg = write_config(tmp_path, spec)
    assert dispatch(["mfg", "solve", "--method", "decoupled", "--config", str(cfg)]) == 2
    assert "det-diff" in capsys.readouterr().err


def test_picard_nonconvergence_is_numerical_failure(tmp_path):
    cfg = write_config(tmp_path, certified_spec(), picard={"tol": 1e-14, "max_iter": 2})
    assert dispatch(["mfg", "solve", "--config", str(cfg)]) == 2


def test_usage_errors_exit_64(tmp_path):
    cfg = write_config(tmp_path, certified_spec())
    assert dispatch(["mfg", "bogus"]) == 64
    assert dispatch(["mfg", "certify", "--config", str(cfg), "--nope"]) == 64
    assert dispatch(["mfg", "certify"]) == 64
    assert dispatch(["mfg", "simulate", "--config", str(cfg)]) == 64  # no seed anywhere


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.cfg")
    cfg = write_config(tmp_path, certified_spec(), picard={"tol": -1.0})
    assert dispatch(["mfg", "certify", "--config", str(cfg)]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text(yaml.safe_dump({"model": "model.yaml", "grid": {"steps": 3}}))
    with pytest.raises(ConfigError, match="unknown keys"):
        load_config(bad)


def test_riccati_and_residual_outputs(tmp_path):
    cfg = write_config(tmp_path, certified_spec())
    for kind in ("pi", "eta", "r"):
        assert dispatch(["riccati", "solve", "--kind", kind, "--steps", "12", "--config", str(cfg)]) == 0
        lines = (tmp_path / "out" / f"riccati_{kind}.csv").read_text().splitlines()
        assert lines[0].startswith("t,m_0_0") and len(lines) == 14
    assert dispatch(["mfg", "residual", "--method", "decoupled", "--config", str(cfg)]) == 0
    data = json.loads((tmp_path / "out" / "residual.json").read_text())
    assert data["forward_defect"] <= 1e-12


def test_reruns_are_byte_identical_and_manifest_complete(tmp_path):
    cfg = write_config(tmp_path, certified_spec(),
                       simulate={"Ns": [2, 4, 8, 16], "n_mc": 20, "seed": 5, "deviation": "zero,scaled:0.2"})
    out = tmp_path / "out"
    commands = [["mfg", "solve"], ["mfg", "simulate", "--deviation", "zero"],
                ["mfg", "rates", "--experiment", "avg-error"], ["mfg", "rates", "--experiment", "eps-nash"]]
    snapshots = []
    for _ in range(2):
        for c in commands:
            assert dispatch(c + ["--config", str(cfg)]) == 0
        snapshots.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
    assert snapshots[0] == snapshots[1]
    manifest = json.loads((out / "manifest.json").read_text())
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert on_disk == set(manifest["files"])
    assert manifest["seed"] == 5
    header = (out / "rates_avg-error.csv").read_text().splitlines()[0]
    assert header == "N,estimate,std_error"
    assert (out / "rates_avg-error_fit.csv").read_text().splitlines()[0] == "slope,intercept,r_squared"


def test_output_directory_from_environment(tmp_path, monkeypatch):
    write_model(tmp_path / "model.yaml", certified_spec())
    monkeypatch.setenv("LQMFG_OUTPUT_DIR", str(tmp_path / "envout"))
    assert dispatch(["mfg", "certify", "--model", str(tmp_path / "model.yaml")]) == 0
    assert (tmp_path / "envout" / "certificate.json").is_file()


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path, certified_spec(), simulate={"Ns": [4], "n_mc": 5, "seed": 1})
    assert dispatch(["mfg", "simulate", "--config", str(cfg), "--seed", "9", "--N", "3"]) == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["seed"] == 9
    rows = (tmp_path / "out" / "simulate_costs.csv").read_text().splitlines()
    assert rows[0].startswith("agent,strategy,mean_cost") and len(rows) == 4


# --- report -------------------------------------------------------------------------------

def test_report_with_only_a_certificate(tmp_path):
    cfg = write_config(tmp_path, certified_spec())
    assert dispatch(["mfg", "certify", "--config", str(cfg)]) == 0
    assert dispatch(["report", str(tmp_path / "out")]) == 0
    text = (tmp_path / "out" / "summary.md").read_text()
    assert "## Contraction certificate" in text and "| passes_contraction | true |" in text


def test_report_flags_cn_rate(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"files": ["rates_avg-error_fit.csv"], "seed": 1}))
    (tmp_path / "rates_avg-error_fit.csv").write_text("slope,intercept,r_squared\n-0.98,0.1,0.99\n")
    assert dispatch(["report", str(tmp_path)]) == 0
    assert "consistent with C/N" in (tmp_path / "summary.md").read_text()
    (tmp_path / "rates_avg-error_fit.csv").write_text("slope,intercept,r_squared\n-0.5,0.1,0.99\n")
    dispatch(["report", str(tmp_path)])
    assert "not consistent with C/N" in (tmp_path / "summary.md").read_text()


def test_report_on_empty_directory(tmp_path):
    assert dispatch(["report", str(tmp_path)]) == 1


def test_report_plots(tmp_path):
    cfg = write_config(tmp_path, certified_spec(), simulate={"Ns": [2, 4, 8, 16], "n_mc": 10, "seed": 2})
    assert dispatch(["riccati", "solve", "--config", str(cfg)]) == 0
    assert dispatch(["mfg", "rates", "--experiment", "avg-error", "--config", str(cfg)]) == 0
    assert dispatch(["report", str(tmp_path / "out"), "--plots"]) == 0
    for name in ("rate_avg-error.svg", "pi_eigenvalues.svg"):
        assert (tmp_path / "out" / name).read_text().lstrip().startswith("<?xml")
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert {"summary.md", "rate_avg-error.svg", "pi_eigenvalues.svg"} <= set(manifest["files"])


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lqmfg", "mfg", "nothing"], capture_output=True, text=True)
    assert proc.returncode == 64 and "usage" in proc.stderr
