"""Simulation toolkit for crowbar voltage-glitch attacks on a secure boot ROM.

The pieces, bottom up: a supply-rail model (:mod:`voltfi.rail`), a small
instruction-set machine with a fault injector (:mod:`voltfi.machine`), the
synthetic boot ROM and device generator (:mod:`voltfi.firmware`), boot
classification and the fault-path oracle (:mod:`voltfi.boot`), the crypto
engine (:mod:`voltfi.crypto`), an emulated glitch controller
(:mod:`voltfi.rig`), the parameter search (:mod:`voltfi.search`), the UART
payload codec (:mod:`voltfi.payload`) and the post-glitch extraction steps
(:mod:`voltfi.attack`).
"""

from .attack import Extraction, decrypt_captured_mb1, extract, replay_attempt
from .boot import BootOutcome, BootResult, FaultSite, fault_path_oracle, run_boot, run_fixture, uart_download
from .firmware import BootImage, DeviceBundle, DeviceSpec, build_fixture, generate_device
from .machine import Effect, Machine, MachineState, Mode
from .payload import PayloadError, UartHeader, UartPayload, build_dump_payload, decode, encode
from .rail import GlitchPulse, RailConfig, Susceptibility, resolve_rail
from .rig import GlitchRig, RigConfig, RigController
from .search import (Budget, CampaignStats, ParamGrid, Strategy, StrategyKind, Traversal, estimate_full_pass,
                     run_campaign)

__version__ = "0.1.0"

__all__ = [
    "BootImage", "BootOutcome", "BootResult", "Budget", "CampaignStats", "DeviceBundle", "DeviceSpec",
    "Effect", "Extraction", "FaultSite", "GlitchPulse", "GlitchRig", "Machine", "MachineState", "Mode",
    "ParamGrid", "PayloadError", "RailConfig", "RigConfig", "RigController", "Strategy", "StrategyKind",
    "Susceptibility", "Traversal", "UartHeader", "UartPayload", "build_dump_payload", "build_fixture",
    "decode", "decrypt_captured_mb1", "encode", "estimate_full_pass", "extract", "fault_path_oracle",
    "generate_device", "replay_attempt", "resolve_rail", "run_boot", "run_campaign", "run_fixture",
    "uart_download",
]
