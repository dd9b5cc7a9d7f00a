"""
How long should a campaign take?
================================

Every attempt has to wait until its offset has passed, so covering a
window costs on average half its length per attempt.  This explains why
probing the whole 172 ms boot is hopeless while the 4.42 ms before the
flash probe is quick.
"""

import numpy as np

from voltfi import Budget, ParamGrid, Strategy, estimate_full_pass
from voltfi.search import BernoulliTarget, expected_time_to_success, mean_ci, run_campaign

for label, window in (("whole boot", 172_000_000), ("before QSPI probe", 4_420_000)):
    e = estimate_full_pass(window, 20, 1)
    print(f"{label:>18}: {e.num_offsets:>9} offsets, {e.total_min:10.2f} min ({e.total_days:.2f} days)")

# %%
# Cheap attempts beat reliable ones.  A 1% glitch costing 10 ms needs
# about a second on average; a 10% glitch costing 333 ms needs over three.
grid = ParamGrid(0, 1_000_000, 20, (11_320,))
for p, cost in ((0.01, 10_000_000), (0.10, 333_000_000)):
    times = np.array([run_campaign(grid, Strategy.random(), None, BernoulliTarget(p, cost),
                                   budget=Budget(attempts=10_000), seed=s, record_rig=False)
                      .stats.time_to_first_success for s in range(400)]) / 1e9
    m, hw = mean_ci(times)
    print(f"p={p:<5} cost={cost / 1e6:>5.0f} ms  measured {m:.2f} +- {hw:.2f} s, "
          f"predicted {expected_time_to_success(p, cost) / 1e9:.2f} s")
