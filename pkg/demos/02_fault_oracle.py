"""
Which single faults open the UART loader?
=========================================

The fuse check guarding the hidden download mode has two fuse reads and
two branches.  Enumerating every single skip or branch inversion on its
clean execution path tells us exactly where a glitch must land.
"""

from voltfi import build_fixture, fault_path_oracle, generate_device, DeviceSpec

check = build_fixture("LISTING2")
for site in sorted(fault_path_oracle(check, "NvBootUartDownload")):
    print(f"step {site.step:>3}  {site.source}:{site.line:<3} {site.effect}")

# %%
# The same question against the full synthetic boot ROM.  The hits sit on
# the same source lines, only the step numbers change because the boot
# path runs a lot of code first.
image = generate_device().image
sites = sorted(fault_path_oracle(image, "NvBootUartDownload"))
print(f"\nboot ROM: {len(sites)} exploitable single faults")
for s in sites:
    print(f"  step {s.step:>3}  {s.source}:{s.line:<3} {s.effect}")

# %%
# The hardened variant reads each fuse twice, compares against a magic
# constant three times and keeps its exit paths apart.  No single fault
# reaches the loader, not even a one-bit corruption of an ALU result.
hard = fault_path_oracle(build_fixture("FUSECHECK_HARDENED"), "NvBootUartDownload", include_corrupt=True)
hard_rom = fault_path_oracle(generate_device(DeviceSpec(hardened=True)).image, "NvBootUartDownload",
                             include_corrupt=True)
print(f"\nhardened fixture: {len(hard)} sites, hardened boot ROM: {len(hard_rom)} sites")
