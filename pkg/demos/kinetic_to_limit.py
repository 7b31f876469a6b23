"""Run the kinetic scheme for decreasing eps and compare its density with the
discrete drift-diffusion system built with three choices of coefficients.

Only the ``kinetic_limit`` coefficients are the exact eps -> 0 limit of the
kinetic discretization; the other two sit a temperature defect away from it,
so their error stops decreasing once eps is small.

    python demos/kinetic_to_limit.py
"""
import math

import numpy as np

from apdg.drift_diffusion import THETA_USES, assemble_dd, initial_dd_state, run_dd
from apdg.kinetic import FieldPreset, ProblemData, assemble, initial_state, make_phase_space, moments, run
from apdg.maxwellian import build_root_maxwellian, symmetric_velocity_mesh


def main():
    data = ProblemData(theta=1.0, omega=FieldPreset("linear", 1.0, 0.5),
                       E=FieldPreset("sinusoid", 0.2, 0.3, 2), rho0=FieldPreset("sinusoid", 0.0, 1.0, 1))
    n_x, n_v, T = 8, 16, 0.05
    L = 6.0 * math.sqrt(data.theta)
    M = build_root_maxwellian(symmetric_velocity_mesh(L, n_v), data.theta)
    spaces = make_phase_space(data.domain, n_x, 1, L, n_v)
    Mx = spaces.x.mass()
    beta = 1
    print(f"beta={beta}, n_x={n_x}, n_v={n_v}, T={T}, theta_h={M.theta_h:.6f}")
    print(f"{'eps':>8} " + " ".join(f"{tu:>14}" for tu in THETA_USES))
    for eps in (1e-2, 1e-3, 1e-4, 1e-5):
        dt = 0.1 * min(spaces.x.mesh.h, math.sqrt(eps))
        n = int(math.ceil(T / dt))
        dt = T / n
        ops = assemble(spaces, M, data, beta, eps)
        hist = run(initial_state(data, M, spaces, eps, beta), ops, dt, n)
        rho_k = [moments(s, ops)[0].coefficients for s in hist[1:]]
        errs = []
        for tu in THETA_USES:
            dd = assemble_dd(spaces.x, M, data, beta, tu)
            dh = run_dd(initial_dd_state(dd, data.rho0_at), dd, dt, n)
            sq = [float((r - s.rho.broken_coefficients) @ Mx @ (r - s.rho.broken_coefficients))
                  for r, s in zip(rho_k, dh[1:])]
            errs.append(math.sqrt(dt * np.sum(sq)))
        print(f"{eps:8.0e} " + " ".join(f"{e:14.3e}" for e in errs))


if __name__ == "__main__":
    main()
