"""
Does a short crowbar pulse corrupt arithmetic?
=============================================

Before aiming at a boot ROM we check that the rail model behaves like a
real board: short pulses do nothing, a band of lengths corrupts results,
and anything longer crashes the core.
"""

import numpy as np

from voltfi import GlitchPulse, RailConfig, resolve_rail
from voltfi.boot import run_fixture

rail = RailConfig()

# The rail alone: sweep the pulse length and look at the regime and the
# per-instruction fault probability.
lengths = np.arange(9_000, 14_001, 250)
for n in lengths:
    out = resolve_rail(GlitchPulse(0, int(n)), rail)
    print(f"{n:>6} ns  {out.kind.value:<13} p={out.fault_probability:.2f}")

# %%
# Now run the add-loop fixture under each length.  Every run prints 2000
# running sums over UART; a corrupted sum shows the glitch landed.
rows = []
for n in lengths[::2]:
    runs = [run_fixture("ADD_LOOP", GlitchPulse(2_000, int(n)), rail, seed) for seed in range(20)]
    corrupted = sum(r.corrupted for r in runs)
    crashed = sum(r.state.value == "CRASHED" for r in runs)
    rows.append((int(n), corrupted, crashed))
    print(f"{n:>6} ns  corrupted {corrupted:>2}/20  crashed {crashed:>2}/20")

first_corrupt = next(n for n, c, _ in rows if c)
first_crash = next(n for n, _, k in rows if k)
print(f"\ncorruption starts at {first_corrupt} ns, crashes at {first_crash} ns")

# %%
# A board with heavy decoupling swallows the pulse.  With 14 us of
# attenuation even the longest pulse leaves the core untouched.
damped = RailConfig(decoupling_attenuation_ns=14_000)
print("attenuated rail corrupts:",
      any(run_fixture("ADD_LOOP", GlitchPulse(2_000, 13_900), damped, s).corrupted for s in range(20)))
