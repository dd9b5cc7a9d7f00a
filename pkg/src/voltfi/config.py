"""Campaign configuration files (TOML).

One file fully determines a campaign::

    seed = 1
    workers = 1

    [rail]                      # RailConfig fields
    decoupling_attenuation_ns = 0

    [rig]                       # RigConfig fields
    tick_ns = 20
    jitter_max_ns = 0

    [image]                     # either a generated bundle ...
    path = "device"
    # ... or generator parameters (DeviceSpec fields)
    # seed = 0
    # hardened = false

    [grid]
    lo_ns = 0
    hi_ns = 4_420_000
    step_ns = 20
    lengths_ns = [11_300, 11_320, 11_340]

    [strategy]
    kind = "NARROWING"
    successes_required = 2
    tolerance_ns = 25_000

    [budget]
    attempts = 200_000
    stop_after_successes = 3    # two to narrow on, one more inside the narrowed window

    [feasibility]               # only used by the feasibility command
    lengths_ns = [9_000, 9_500, ...]   # or lo_ns / hi_ns / step_ns
    trials = 20
    offset_ns = 2_000

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .firmware import DeviceBundle, DeviceSpec, generate_device
from .rail import GlitchPulse, RailConfig
from .rig import RigConfig
from .search import Budget, ParamGrid, Strategy

TOP_KEYS = {"seed", "workers", "rail", "rig", "image", "grid", "strategy", "budget", "feasibility"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeasibilityConfig:
    lengths_ns: tuple[int, ...] = tuple(range(9_000, 14_001, 500))
    trials: int = 20
    offset_ns: int = 2_000

    @classmethod
    def from_dict(cls, d: dict) -> "FeasibilityConfig":
        d = dict(d)
        if "lengths_ns" in d:
            lengths = tuple(int(x) for x in d.pop("lengths_ns"))
        elif {"lo_ns", "hi_ns", "step_ns"} <= set(d):
            lengths = tuple(range(d.pop("lo_ns"), d.pop("hi_ns") + 1, d.pop("step_ns")))
        else:
            lengths = cls.lengths_ns
        cfg = cls(lengths, **d)
        if not cfg.lengths_ns or cfg.trials < 1 or cfg.offset_ns < 0:
            raise ValueError("feasibility needs lengths, trials >= 1 and offset_ns >= 0")
        return cfg


@dataclass(frozen=True)
class CampaignConfig:
    rail: RailConfig = field(default_factory=RailConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    image_path: Path | None = None
    device: DeviceSpec = field(default_factory=DeviceSpec)
    grid: ParamGrid = field(default_factory=lambda: ParamGrid(0, 4_420_000, 20, (11_300, 11_320, 11_340)))
    strategy: Strategy = field(default_factory=lambda: Strategy.narrowing_after(2))
    budget: Budget = field(default_factory=lambda: Budget(attempts=200_000, stop_after_successes=3))
    seed: int = 0
    workers: int = 1
    feasibility: FeasibilityConfig = field(default_factory=FeasibilityConfig)

    def load_bundle(self) -> DeviceBundle:
        if self.image_path is not None:
            return DeviceBundle.load(self.image_path)
        return generate_device(self.device)

    def with_overrides(self, seed: int | None = None, workers: int | None = None) -> "CampaignConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if workers is not None:
            changes["workers"] = workers
        cfg = replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.grid.tick_ns != self.rig.tick_ns:
            raise ConfigError("grid and rig tick differ")
        longest = max(self.grid.lengths_ns)
        for off in (self.grid.lo_ns, self.grid.hi_ns):
            if not self.rig.pulse_fits(GlitchPulse(off, longest)):
                raise ConfigError("grid lies outside the rig's offset/length bounds")
        if self.image_path is not None and not (Path(self.image_path) / "manifest.json").exists():
            raise ConfigError(f"image bundle {self.image_path} has no manifest.json")


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def from_dict(doc: dict, base_dir: Path | None = None) -> CampaignConfig:
    extra = set(doc) - TOP_KEYS
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    base_dir = base_dir or Path.cwd()
    try:
        rail = RailConfig.from_dict(_section(doc, "rail"))
        rig_d = dict(_section(doc, "rig"))
        grid_d = dict(_section(doc, "grid"))
        if "tick_ns" in rig_d:
            grid_d.setdefault("tick_ns", rig_d["tick_ns"])
        rig = RigConfig.from_dict(rig_d)
        defaults = CampaignConfig()
        grid = ParamGrid.from_dict({**defaults.grid.to_dict(), **grid_d}) if grid_d else defaults.grid
        strat_d = _section(doc, "strategy")
        strategy = Strategy.from_dict(strat_d) if strat_d else defaults.strategy
        budget_d = _section(doc, "budget")
        budget = Budget(**budget_d) if budget_d else defaults.budget
        image_d = dict(_section(doc, "image"))
        path = image_d.pop("path", None)
        image_path = None
        if path is not None:
            if image_d:
                raise ConfigError("[image] takes either path or generator parameters, not both")
            image_path = Path(path) if Path(path).is_absolute() else base_dir / path
        device = DeviceSpec.from_dict(image_d)
        feas = FeasibilityConfig.from_dict(_section(doc, "feasibility"))
        cfg = CampaignConfig(rail, rig, image_path, device, grid, strategy, budget,
                             int(doc.get("seed", 0)), int(doc.get("workers", 1)), feas)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def load_config(path) -> CampaignConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc, path.parent)
