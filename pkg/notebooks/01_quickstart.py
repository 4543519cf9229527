"""Price a five-asset best-of call three ways and compare.

Run with ``python notebooks/01_quickstart.py``; takes about a minute on one core.
"""

from deepbsde.harness import desk_market, desk_solver, median_pe
from deepbsde.models import feller_check
from deepbsde.oracle import mc_price
from deepbsde.solvers import solve

market = desk_market()
print(f"market: d={market.d} s0={market.s0} K={market.strike:.4f} Feller={feller_check(market)}")

# Monte Carlo reference on a fine grid
ref = mc_price(market, n_paths=100_000, n_steps=1000, seed=0)
print(f"MC reference      {ref.price:8.3f} +- {ref.std_error:.3f}")

# forward scheme: one shot over the whole path
fwd = solve(desk_solver().replace(method="DBSDE", seed=1), market)
print(f"DBSDE             {fwd.price:8.3f}  ({median_pe(fwd.price, ref.price):+.2f}%)")

# a backward scheme on a coarse grid: the gap is mostly Euler bias
bwd = solve(desk_solver().replace(method="DBDP1", n_steps=5, lr_decay=True, seed=1), market)
print(f"DBDP1 (N=5)       {bwd.price:8.3f}  ({median_pe(bwd.price, ref.price):+.2f}%)")
