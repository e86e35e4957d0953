"""A small Monte Carlo study.

Each replication draws a fresh dataset from its own random stream, so the
summary below does not change with the number of worker processes.  The
full study uses R=200; 20 replications keep this script fast.
"""
from msqm.montecarlo import StudyConfig, run_monte_carlo, stderr_progress

study = StudyConfig(R=20, n=2000, cells=("ipw:T", "icr:T", "dr:TT", "dr:FT"), qs=(0.5,), seed=11)
summary = run_monte_carlo(study, workers=2, progress=stderr_progress)

print(summary.to_csv())
for cell in study.cells:
    print(cell, "percent bias", summary.percent_bias(cell, 0.5).round(2),
          "coverage", summary.wald_coverage(cell, 0.5))
