"""Manufactured-solution convergence of the drift-diffusion solver under
mesh refinement, using the packaged ``h_sweep`` configuration.  Tables and
plots are written to ``demo_out/h_sweep``.

    python demos/limit_convergence.py
"""
from pathlib import Path

from apdg.studies import default_config_path, emit_outputs, load_config, run_study


def main():
    cfg = load_config(default_config_path("h_sweep"), "h_sweep")
    res = run_study(cfg)
    for row in res.rows:
        print(f"beta={row['beta']} n_x={row['n_x']:3d}  err_rho={row['err_rho']:.3e}  err_J={row['err_J']:.3e}")
    for f in res.fits:
        print(f"{f.name}: slope {f.slope:.3f} (R^2 {f.r2:.4f})")
    for c in res.checks:
        print(f"{'ok  ' if c.passed else 'FAIL'} {c.name}")
    paths = emit_outputs(res, cfg, Path("demo_out") / "h_sweep")
    print("written:", ", ".join(str(p) for p in paths.values()))


if __name__ == "__main__":
    main()
