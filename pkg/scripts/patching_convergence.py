"""Refinement study for the ring field patched across |x| = 1.

The elliptic branch outside the unit circle and the hyperbolic branch inside
glue continuously along the seam. This script measures (a) the order of the
finite-difference divergence residual away from the seam, and (b) how fast
the one-sided radial derivatives agree across it.

Usage: python scripts/patching_convergence.py [--base 192] [--levels 3]
"""

import argparse
import math

import numpy as np

from streamfields import (
    GridSpec,
    divergence_residual,
    extremal,
    fit_order,
    radial_log,
    region_map,
    synthesize,
    synthesize_at_points,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--base", type=int, default=192, help="coarsest cells per axis")
    ap.add_argument("--levels", type=int, default=3, help="refinement levels")
    args = ap.parse_args()

    model = extremal()
    d = radial_log()
    policy = region_map([("1 - sqrt(x1^2 + x2^2)", 2)], default_id=1, dim=2)

    grids = [GridSpec((-1.8, -1.8), (1.8, 1.8), (args.base * 2 ** i,) * 2)
             for i in range(args.levels)]
    print("divergence residual outside r = 1.35:")
    levels = []
    for g in grids:
        sol = synthesize(model, d, policy, g)
        r = np.sqrt((sol.points ** 2).sum(axis=1))
        rep = divergence_residual(sol, extra_bad=r <= 1.35)  # keep the far field
        levels.append((g.spacing()[0], rep.max_norm))
        print(f"  {g.cells[0]:>4d} cells  h = {g.spacing()[0]:.5f}  "
              f"max |div(rho w)| = {rep.max_norm:.4e}")
    order, at_floor = fit_order(levels)
    print("residuals at rounding floor" if at_floor else f"fitted order: {order:.3f}")

    print("\none-sided radial derivatives across the seam (direction theta = 0.37):")
    theta = 0.37
    e = np.array([math.cos(theta), math.sin(theta)])
    w0 = np.array([-e[1], e[0]])  # common limit of both branches at r = 1
    for k in (5, 6, 7, 8):
        h = 0.5 ** k
        wp = synthesize_at_points(model, d, policy, (1 + h) * e[None, :]).w[0]
        wm = synthesize_at_points(model, d, policy, (1 - h) * e[None, :]).w[0]
        gap = np.abs((wp - w0) / h - (w0 - wm) / h).max()
        print(f"  h = 1/{2 ** k:<4d} |D+ - D-| = {gap:.3e}   (5h = {5 * h:.3e})")


if __name__ == "__main__":
    main()
