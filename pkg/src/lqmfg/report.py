"""Collate a run directory into ``summary.md`` with optional SVG plots."""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
CN_TOLERANCE = 0.25  # |slope + 1| for the C/N flag
SQRT_N_SLOPE = -0.35  # gap slopes at or below this are flagged as C/sqrt(N) or faster


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _table(header: list[str], rows: list[list]) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return out


def _num(x) -> str:
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, (int, float)):
        return f"{x:.6g}"
    return str(x)


def rate_flag(experiment: str, slope: float) -> str:
    if experiment == "avg-error":
        return "consistent with C/N" if abs(slope + 1.0) <= CN_TOLERANCE else "not consistent with C/N"
    return ("consistent with C/sqrt(N) or faster" if slope <= SQRT_N_SLOPE
            else "slower than C/sqrt(N)")


def _plot_rate(run_dir: Path, experiment: str, slope: float, intercept: float) -> str | None:
    data = run_dir / f"rates_{experiment}.csv"
    if not data.is_file():
        return None
    _, rows = _read_csv(data)
    N = np.array([float(r[0]) for r in rows])
    est = np.array([float(r[1]) for r in rows])
    se = np.array([float(r[2]) for r in rows])
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "lqmfg"
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(N, est, yerr=se, fmt="o", label="estimate")
    ax.plot(N, np.exp(intercept) * N**slope, "-", label=f"fit, slope {slope:.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel(experiment)
    ax.legend()
    name = f"rate_{experiment}.svg"
    fig.savefig(run_dir / name, format="svg", metadata={"Date": None})
    plt.close(fig)
    return name


def _plot_pi(run_dir: Path) -> str | None:
    data = run_dir / "riccati_pi.csv"
    if not data.is_file():
        return None
    _, rows = _read_csv(data)
    vals = np.array([[float(c) for c in r] for r in rows])
    t = vals[:, 0]
    d = int(round(np.sqrt(vals.shape[1] - 1)))
    mats = vals[:, 1:].reshape(-1, d, d)
    eig = np.linalg.eigvalsh(0.5 * (mats + mats.transpose(0, 2, 1)))
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "lqmfg"
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(t, eig)
    ax.set_xlabel("t")
    ax.set_ylabel("eigenvalues of Pi(t)")
    name = "pi_eigenvalues.svg"
    fig.savefig(run_dir / name, format="svg", metadata={"Date": None})
    plt.close(fig)
    return name


def write_report(run_dir: Path, plots: bool = False) -> int:
    """Write summary.md into ``run_dir``; returns the process exit code."""
    manifest_path = run_dir / MANIFEST
    if not manifest_path.is_file():
        print(f"report: no {MANIFEST} in {run_dir}", file=sys.stderr)
        return 1
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    plots = plots or bool(manifest.get("config", {}).get("emit_plots", False))
    lines = ["# Run summary", "", f"- config hash: `{manifest.get('config_hash')}`",
             f"- seed: {manifest.get('seed')}", ""]
    written: list[str] = []

    cert = run_dir / "certificate.json"
    if cert.is_file():
        data = json.loads(cert.read_text())
        lines += ["## Contraction certificate", ""]
        keys = ["T", "M_T", "alpha_T", "C_pi", "C_1", "C_2", "C_3", "product", "passes_alpha",
                "passes_contraction"]
        lines += _table(["quantity", "value"], [[k, _num(data[k])] for k in keys if k in data])
        lines.append("")

    res = run_dir / "residual.json"
    if res.is_file():
        data = json.loads(res.read_text())
        lines += ["## Residuals", ""]
        lines += _table(["defect", "value"], [[k, _num(v)] for k, v in sorted(data.items())])
        lines.append("")

    solve = run_dir / "solve.json"
    if solve.is_file():
        data = json.loads(solve.read_text())
        lines += ["## Solve", ""]
        lines += [f"- method: {data.get('method')}"]
        if "iterations" in data:
            lines += [f"- Picard iterations: {data['iterations']}",
                      f"- measured contraction ratio: {_num(data['measured_ratio'])}"]
        lines.append("")

    for experiment in ("avg-error", "eps-nash"):
        fit = run_dir / f"rates_{experiment}_fit.csv"
        if not fit.is_file():
            continue
        _, rows = _read_csv(fit)
        slope, intercept, r2 = (float(x) for x in rows[0])
        lines += [f"## Rate fit: {experiment}", "",
                  f"- slope {slope:.4f}, intercept {intercept:.4f}, r^2 {r2:.4f}",
                  f"- {rate_flag(experiment, slope)}", ""]
        if plots:
            name = _plot_rate(run_dir, experiment, slope, intercept)
            if name:
                written.append(name)

    defects = run_dir / "nash_defects.csv"
    if defects.is_file():
        header, rows = _read_csv(defects)
        lines += ["## Nash defects", ""]
        idx = {h: i for i, h in enumerate(header)}
        table = []
        for r in rows:
            pooled = float(r[idx["pooled_se"]])
            defect = float(r[idx["defect"]])
            ratio = defect / pooled if pooled > 0 else 0.0
            table.append([r[idx["N"]], r[idx["deviation"]], _num(defect), _num(pooled), f"{ratio:.2f}"])
        lines += _table(["N", "deviation", "defect", "pooled SE", "defect / SE"], table)
        lines.append("")

    if plots:
        name = _plot_pi(run_dir)
        if name:
            written.append(name)

    (run_dir / "summary.md").write_text("\n".join(lines) + "\n")
    written.append("summary.md")
    files = set(manifest.get("files", [])) | set(written)
    manifest["files"] = sorted(files)
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {run_dir / 'summary.md'}")
    return 0
