"""Time-step refinement tables: knock-out Monte Carlo bias and barrier-delta hedge error.

    python3 scripts/convergence.py [--paths 20000] [--seed 0]
"""
import argparse
import math

import numpy as np

from artifact import paths as P
from artifact.deflator import price_increasing_profit
from artifact.hedging import barrier_delta_strategy, wealth_process
from artifact.pricers import Payoff, bs_barrier_call


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    m = P.ReflectedGBM(100, 80, 0.05, 0.2)
    g = Payoff.call(100.0)
    ref = bs_barrier_call(1.0, 100, 80, 100, 0.2)
    print(f"reflected GBM call, closed form {ref:.4f}")
    print(f"{'dt':>8} {'bridge':>7} {'price':>9} {'se':>7} {'z':>6}")
    for dt in (1e-2, 1e-3):
        for bridge in (False, True):
            est = price_increasing_profit(m, g, args.paths, P.TimeGrid.from_dt(1.0, dt), args.seed, bridge=bridge)
            print(f"{dt:>8.0e} {str(bridge):>7} {est.price:>9.4f} {est.std_error:>7.4f} {est.z_score(ref):>6.2f}")

    print("\nbarrier-delta hedge, RMS terminal error (expected to scale like sqrt(dt))")
    print(f"{'dt':>8} {'rms':>9} {'rms/sqrt(dt)':>13}")
    strat = barrier_delta_strategy(80, 100, 1.0, 0.2)
    x0 = ref
    n = min(args.paths, 4000)
    for dt in (4e-3, 1e-3, 2.5e-4):
        b = P.simulate_batch(m, P.TimeGrid.from_dt(1.0, dt), args.seed, np.arange(n))
        err = wealth_process(b, strat, x0)[:, -1] - g(b.values[:, -1])
        rms = math.sqrt(np.mean(err ** 2))
        print(f"{dt:>8.1e} {rms:>9.4f} {rms / math.sqrt(dt):>13.3f}")


if __name__ == "__main__":
    main()
