"""Seed spread of DBDP1 against batch size, with a 1/sqrt(batch) fit.

A reduced version of the batch-size experiment: 8 seeds per batch size so it
finishes in a few minutes. Pass ``--runs 20`` for the acceptance-sized run.
"""

import argparse

from deepbsde.harness import (ExperimentSpec, desk_market, desk_solver, format_table,
                              run_experiment, sqrt_scaling_fit)

parser = argparse.ArgumentParser()
parser.add_argument("--runs", type=int, default=8)
parser.add_argument("--output-dir", default="out/notebook_batch")
args = parser.parse_args()

batches = [4, 16, 64]
spec = ExperimentSpec("BatchSize", batches, methods=["DBDP1"], runs_per_setting=args.runs,
                      market=desk_market(), solver=desk_solver().replace(n_steps=5, lr_decay=True))
result = run_experiment(spec, args.output_dir, progress=lambda r: print(".", end="", flush=True))
print()
print(format_table(result.rows))

slope, r2 = sqrt_scaling_fit([r.iqr for r in result.rows], batches)
print(f"IQR ~ {slope:.3f}/sqrt(batch) + c, R^2 = {r2:.3f}")
