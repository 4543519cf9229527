"""Tiny training budgets: backward schemes with batch norm collapse, the forward scheme does not.

Backward networks with batch normalisation start from an output near zero and
move toward the price level only slowly, so 1/64 of the usual budget leaves
them far below the reference. DBSDE starts its scalar price from the mean
discounted payoff and stays close.
"""

from deepbsde.harness import desk_market, desk_solver, median_pe
from deepbsde.oracle import mc_price
from deepbsde.solvers import solve

market = desk_market()
ref = mc_price(market, 100_000, 1000, seed=0).price
base = desk_solver().replace(batch_norm=True, iters_forward=125, iters_first=250, iters_rest=47)
print(f"MC reference {ref:.3f}")
for method in ("DBSDE", "DBDP1", "DBDP2", "DS"):
    run = solve(base.replace(method=method, seed=3), market)
    print(f"{method:6s} {run.price:8.3f}  ({median_pe(run.price, ref):+.1f}%)")
