#!/usr/bin/env python3
"""Smoke test for the apjko Python extension.

Builds the cdylib with cargo if needed, copies it next to this script as an
importable module, and exercises the main types and operations.
"""

import math
import shutil
import subprocess
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
ROOT = HERE.parent


def ensure_module():
    target = HERE / "apjko.so"
    built = ROOT / "target" / "release" / "libapjko.so"
    if not built.exists():
        subprocess.run(
            ["cargo", "build", "--release", "-p", "apjko-py"],
            cwd=ROOT,
            check=True,
        )
    if not target.exists() or built.stat().st_mtime > target.stat().st_mtime:
        shutil.copy2(built, target)
    sys.path.insert(0, str(HERE))


def approx(a, b, tol):
    return abs(a - b) <= tol


def main():
    ensure_module()
    import apjko

    checks = []

    def check(name, ok, detail=""):
        checks.append((name, ok))
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")

    # quadrature
    nodes, weights = apjko.gauss_legendre(2)
    s3 = math.sqrt(3.0)
    check(
        "gauss_legendre(2)",
        approx(nodes[0], (3 - s3) / 6, 1e-12) and approx(sum(weights), 1.0, 1e-12),
        f"nodes={nodes}",
    )

    # Landau kernel
    a = apjko.landau_a([1.0, 0.0], gamma=0.0)
    check("landau_a projector", approx(a[0][0], 0.0, 1e-15) and approx(a[1][1], 1.0, 1e-14))

    # Maxwellian
    m0 = apjko.maxwellian(1.0, [0.0, 0.0], 1.0, [0.0, 0.0])
    check("maxwellian at the peak", approx(m0, 1.0 / (2 * math.pi), 1e-12))

    # sampling + moments
    ens = apjko.bi_maxwellian(12800, seed=1234)
    rho, u, t, e, h = ens.moments()
    check(
        "bi-Maxwellian moments",
        approx(rho, 1.0, 1e-12) and abs(u[0]) < 0.05 and approx(t, 1.0, 0.05),
        f"rho={rho:.3f} u=({u[0]:.3f},{u[1]:.3f}) T={t:.3f}",
    )

    # heat-lab oracle
    check(
        "gaussian_jko_std_oracle",
        approx(apjko.gaussian_jko_std_oracle(1.0, 1.0), (1 + math.sqrt(5)) / 2, 1e-12),
    )

    # one implicit collision step at epsilon = 1
    small = apjko.bi_maxwellian(256, seed=7)
    _, u_before, _, e_before, h_before = small.moments()
    loss0, loss1 = apjko.collision_step(
        small, operator="landau", epsilon=1.0, dt=0.01, t0=10, t_max=20, layers=3, width=8, seed=3
    )
    _, u_after, _, e_after, h_after = small.moments()
    mom_drift = max(abs(u_after[k] - u_before[k]) for k in range(2))
    check(
        "collision_step trains and conserves",
        loss1 < loss0 and mom_drift < 1e-8 and abs(e_after - e_before) / e_before < 1e-4,
        f"loss {loss0:.2e}->{loss1:.2e} mom drift {mom_drift:.1e}",
    )
    check("collision_step dissipates entropy", h_after <= h_before + 1e-3 * abs(h_before))

    # Riemann reference
    rows = apjko.exact_riemann_profile(1.0, 1.0, 0.125, 0.25, time=0.1, n_points=50)
    left_ok = approx(rows[0][1], 1.0, 1e-12)
    right_ok = approx(rows[-1][1], 0.125, 1e-12)
    monotone = all(rows[i][1] >= rows[i + 1][1] - 1e-9 for i in range(len(rows) - 1))
    check("exact_riemann_profile", left_ok and right_ok and monotone)

    failed = [name for name, ok in checks if not ok]
    print(f"\n{len(checks) - len(failed)}/{len(checks)} checks passed")
    if failed:
        sys.exit(1)


if __name__ == "__main__":
    main()
