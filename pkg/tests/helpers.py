"""Shared test constants and helpers."""

from pathlib import Path

from voltfi.boot import run_boot
from voltfi.rail import GlitchPulse

GOLDEN = Path(__file__).parent / "golden"

# Offset the campaigns converge on for the default device; well inside the
# susceptible stretch of the fuse check.
HOT_PULSE = GlitchPulse(2_633_800, 11_320)


def boot_to_prompt(image, rail, pulse=HOT_PULSE, seeds=range(5000)):
    """Machine sitting at the loader prompt, found by scanning seeds."""
    for seed in seeds:
        m = image.make_machine()
        if run_boot(m, image, pulse, rail, seed).success:
            return m
    raise AssertionError("no seed reached the prompt")
