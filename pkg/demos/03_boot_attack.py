"""
Glitching the boot ROM into download mode
=========================================

A full run against the synthetic device: random search over the first
4.42 ms of boot, narrowing once two glitches work, then using the opened
loader to dump the protected ROM and the fuse keys, and finally
decrypting the first-stage bootloader with what we captured.
"""

import numpy as np

from voltfi import Budget, ParamGrid, RailConfig, RigConfig, Strategy, generate_device
from voltfi.attack import decrypt_captured_mb1, extract, replay_attempt
from voltfi.search import run_campaign

bundle = generate_device()
image = bundle.image
rail = RailConfig()

grid = ParamGrid(0, 4_420_000, 20, (11_300, 11_320, 11_340))
res = run_campaign(grid, Strategy.narrowing_after(2), rail, image,
                   budget=Budget(attempts=200_000, stop_after_successes=3), seed=3)
print(res.stats.summary())

phase0 = sum(a.phase == 0 for a in res.attempts)
phase1 = len(res.attempts) - phase0
print(f"{phase0} attempts before narrowing, {phase1} after")

wins = [a for a in res.attempts if a.success]
print("successful offsets:", [a.offset_ns for a in wins])
print("narrowed window:", res.workers[0].traversal.grid.lo_ns, "..", res.workers[0].traversal.grid.hi_ns, "ns")

# %%
# Replay the winning attempt to get a machine sitting at the loader prompt,
# then feed it the dump payloads.
machine, boot = replay_attempt(image, rail, RigConfig(), res.seed, wins[0])
print("prompt reached:", boot.success)
loot = extract(machine)
print("iROM identical to the generated one:", loot.irom == image.irom_bytes)
print("FEK1", loot.fek1.hex())

# %%
# The key blob at the end of the ROM is encrypted under FEK1 and the MB1
# image under the key it carries, wrapped once more under a key derived
# from FEK2.  All of that is now in our hands.
plain = decrypt_captured_mb1(loot, image.mb1_image)
print("MB1 decrypted correctly:", plain == bundle.mb1_plaintext)
print("first bytes:", np.frombuffer(plain[:16], dtype=np.uint8))
