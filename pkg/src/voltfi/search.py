"""Glitch parameter search: grids, traversal strategies, campaigns and statistics."""

from __future__ import annotations

import hashlib
import json
import math
import random
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .boot import BootOutcome, BootResult, run_boot, run_fixture
from .rail import GlitchPulse, RailConfig
from .rig import GlitchRig, RigConfig, RigController

NS_PER_S = 1_000_000_000


# -- grid ---------------------------------------------------------------------

@dataclass(frozen=True)
class ParamGrid:
    """Offsets ``lo_ns, lo_ns + step_ns, ... <= hi_ns`` crossed with ``lengths_ns``.

    Points are numbered offset-major: index ``i`` is offset ``i // len(lengths)``
    and length ``i % len(lengths)``.
    """

    lo_ns: int
    hi_ns: int
    step_ns: int
    lengths_ns: tuple[int, ...]
    tick_ns: int = 20

    def __post_init__(self):
        object.__setattr__(self, "lengths_ns", tuple(int(x) for x in self.lengths_ns))
        if self.step_ns <= 0:
            raise ValueError("step_ns must be > 0")
        if self.lo_ns > self.hi_ns or self.lo_ns < 0:
            raise ValueError("need 0 <= lo_ns <= hi_ns")
        if not self.lengths_ns:
            raise ValueError("at least one length is required")
        values = (self.lo_ns, self.hi_ns, self.step_ns) + self.lengths_ns
        if any(v % self.tick_ns for v in values):
            raise ValueError(f"grid values must be multiples of the {self.tick_ns} ns tick")
        if any(v <= 0 for v in self.lengths_ns):
            raise ValueError("lengths must be > 0")

    @property
    def n_offsets(self) -> int:
        return (self.hi_ns - self.lo_ns) // self.step_ns + 1

    @property
    def size(self) -> int:
        return self.n_offsets * len(self.lengths_ns)

    def offsets(self) -> np.ndarray:
        return self.lo_ns + self.step_ns * np.arange(self.n_offsets, dtype=np.int64)

    def point(self, index: int) -> GlitchPulse:
        if not 0 <= index < self.size:
            raise IndexError(index)
        o, k = divmod(index, len(self.lengths_ns))
        return GlitchPulse(self.lo_ns + o * self.step_ns, self.lengths_ns[k])

    def __iter__(self):
        return (self.point(i) for i in range(self.size))

    def contains(self, pulse: GlitchPulse) -> bool:
        d = pulse.offset_ns - self.lo_ns
        return (0 <= d and pulse.offset_ns <= self.hi_ns and d % self.step_ns == 0
                and pulse.length_ns in self.lengths_ns)

    def narrowed(self, successes, tolerance_ns: int) -> "ParamGrid":
        """Shrink to [min - tol, max + tol] around the successful offsets.

        The result is clamped to this grid and snapped onto its offset
        lattice; lengths become the distinct successful lengths.
        """
        if not successes:
            raise ValueError("cannot narrow without successes")
        offs = [p.offset_ns for p in successes]
        lo = max(self.lo_ns, min(offs) - tolerance_ns)
        hi = min(self.hi_ns, max(offs) + tolerance_ns)
        lo = self.lo_ns + -(-(lo - self.lo_ns) // self.step_ns) * self.step_ns
        hi = self.lo_ns + (hi - self.lo_ns) // self.step_ns * self.step_ns
        lengths = tuple(sorted({p.length_ns for p in successes}))
        return ParamGrid(lo, hi, self.step_ns, lengths, self.tick_ns)

    def to_dict(self) -> dict:
        return {"lo_ns": self.lo_ns, "hi_ns": self.hi_ns, "step_ns": self.step_ns,
                "lengths_ns": list(self.lengths_ns), "tick_ns": self.tick_ns}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamGrid":
        return cls(d["lo_ns"], d["hi_ns"], d["step_ns"], tuple(d["lengths_ns"]), d.get("tick_ns", 20))


# -- strategies ---------------------------------------------------------------

class StrategyKind(Enum):
    EXHAUSTIVE = "EXHAUSTIVE"
    RANDOM = "RANDOM"
    NARROWING = "NARROWING"


@dataclass(frozen=True)
class Narrowing:
    successes_required: int = 10
    tolerance_ns: int = 25_000

    def __post_init__(self):
        if self.successes_required < 1 or self.tolerance_ns < 0:
            raise ValueError("successes_required must be >= 1 and tolerance_ns >= 0")


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    narrowing: Narrowing | None = None

    def __post_init__(self):
        if (self.kind is StrategyKind.NARROWING) != (self.narrowing is not None):
            raise ValueError("narrowing parameters are required for, and only for, NARROWING")

    @classmethod
    def exhaustive(cls) -> "Strategy":
        return cls(StrategyKind.EXHAUSTIVE)

    @classmethod
    def random(cls) -> "Strategy":
        return cls(StrategyKind.RANDOM)

    @classmethod
    def narrowing_after(cls, successes_required: int = 10, tolerance_ns: int = 25_000) -> "Strategy":
        return cls(StrategyKind.NARROWING, Narrowing(successes_required, tolerance_ns))

    @classmethod
    def from_dict(cls, d: dict) -> "Strategy":
        kind = StrategyKind(d["kind"].upper())
        extra = set(d) - {"kind", "successes_required", "tolerance_ns"}
        if extra:
            raise ValueError(f"unknown strategy keys: {sorted(extra)}")
        if kind is StrategyKind.NARROWING:
            return cls(kind, Narrowing(d.get("successes_required", 10), d.get("tolerance_ns", 25_000)))
        if len(d) > 1:
            raise ValueError("narrowing parameters are only valid with kind NARROWING")
        return cls(kind)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.narrowing:
            d.update(asdict(self.narrowing))
        return d


class GridExhausted(Exception):
    pass


class Traversal:
    """Mutable strategy state.

    RANDOM draws a fresh permutation of the grid per epoch (seeded by
    ``(seed, phase, epoch)``) and walks it without replacement.  With
    ``stride`` > 1 several workers share one permutation, worker ``w``
    taking positions ``w, w + stride, ...``.
    """

    def __init__(self, grid: ParamGrid, strategy: Strategy, seed: int, worker: int = 0, stride: int = 1):
        self.grid = grid
        self.strategy = strategy
        self.seed = seed
        self.worker = worker
        self.stride = stride
        self.epoch = 0
        self.phase = 0
        self.position = worker
        self.successes: list[GlitchPulse] = []
        self._perm = None

    def _permutation(self) -> np.ndarray:
        if self._perm is None:
            rng = np.random.default_rng([self.seed, self.phase, self.epoch])
            self._perm = rng.permutation(self.grid.size)
        return self._perm

    def next_pulse(self) -> GlitchPulse:
        if self.strategy.kind is StrategyKind.EXHAUSTIVE:
            if self.position >= self.grid.size:
                raise GridExhausted("every grid point has been visited")
            idx = self.position
        else:
            if self.position >= self.grid.size:
                self.epoch += 1
                self.position = self.worker % max(self.grid.size, 1)
                self._perm = None
            idx = int(self._permutation()[self.position])
        self.position += self.stride
        return self.grid.point(idx)

    def record(self, pulse: GlitchPulse, success: bool) -> bool:
        """Note an outcome; returns True when this call narrowed the grid."""
        if not success:
            return False
        self.successes.append(pulse)
        nar = self.strategy.narrowing
        if nar is None or self.phase > 0 or len(self.successes) < nar.successes_required:
            return False
        self.grid = self.grid.narrowed(self.successes, nar.tolerance_ns)
        self.phase = 1
        self.epoch = 0
        self.position = self.worker % self.grid.size
        self._perm = None
        return True

    def state(self) -> dict:
        return {"grid": self.grid.to_dict(), "strategy": self.strategy.to_dict(), "seed": self.seed,
                "worker": self.worker, "stride": self.stride, "epoch": self.epoch, "phase": self.phase,
                "position": self.position,
                "successes": [[p.offset_ns, p.length_ns] for p in self.successes]}

    @classmethod
    def from_state(cls, st: dict) -> "Traversal":
        t = cls(ParamGrid.from_dict(st["grid"]), Strategy.from_dict(st["strategy"]), st["seed"],
                st["worker"], st["stride"])
        t.epoch, t.phase, t.position = st["epoch"], st["phase"], st["position"]
        t.successes = [GlitchPulse(o, n) for o, n in st["successes"]]
        return t


def next_pulse(traversal: Traversal) -> GlitchPulse:
    return traversal.next_pulse()


# -- estimator ----------------------------------------------------------------

@dataclass(frozen=True)
class FullPassEstimate:
    num_offsets: int
    avg_attempt_ns: float
    total_ns: float

    @property
    def total_s(self) -> float:
        return self.total_ns / NS_PER_S

    @property
    def total_min(self) -> float:
        return self.total_s / 60

    @property
    def total_days(self) -> float:
        return self.total_s / 86_400


def estimate_full_pass(window_ns: int, step_ns: int, lengths_count: int = 1) -> FullPassEstimate:
    """Time to visit every offset once when each attempt waits for its own offset."""
    if step_ns <= 0:
        raise ValueError("step_ns must be > 0")
    n = window_ns // step_ns
    avg = window_ns / 2
    return FullPassEstimate(n, avg, n * avg * lengths_count)


# -- targets ------------------------------------------------------------------

@dataclass(frozen=True)
class AttemptResult:
    outcome: str
    success: bool
    duration_ns: int


def prompt_seen(result: BootResult) -> bool:
    return result.success


class BootTarget:
    """Boots a synthetic device once per attempt.

    A failed attempt costs the time until the pulse has ended (the operator
    resets as soon as the glitch is over); a successful one costs the time at
    which the prompt was read.  Crashes and detector shutdowns add
    ``crash_recovery_ns``.
    """

    def __init__(self, image, rail: RailConfig, success_predicate=prompt_seen, crash_recovery_ns: int = 0):
        self.image = image
        self.rail = rail
        self.success_predicate = success_predicate or prompt_seen
        self.crash_recovery_ns = crash_recovery_ns
        self.last_machine = None
        self.last_result: BootResult | None = None

    def attempt(self, pulse: GlitchPulse, seed: int, start_delay_ns: int) -> AttemptResult:
        m = self.image.make_machine()
        r = run_boot(m, self.image, pulse, self.rail, seed, start_ns=start_delay_ns)
        self.last_machine, self.last_result = m, r
        ok = bool(self.success_predicate(r))
        if ok:
            dur = r.end_ns
        else:
            dur = pulse.offset_ns + pulse.length_ns
            if r.kind in (BootOutcome.CRASHED, BootOutcome.DETECT_SHUTDOWN):
                dur += self.crash_recovery_ns
        return AttemptResult(r.kind.value, ok, dur)


class FixtureTarget:
    def __init__(self, name: str, rail: RailConfig):
        self.name = name
        self.rail = rail

    def attempt(self, pulse: GlitchPulse, seed: int, start_delay_ns: int) -> AttemptResult:
        r = run_fixture(self.name, pulse, self.rail, seed)
        return AttemptResult(r.state.value, r.reached_target, pulse.offset_ns + pulse.length_ns)


class BernoulliTarget:
    """Abstract target: succeeds with probability ``p``; every attempt costs ``cost_ns``."""

    def __init__(self, p: float, cost_ns: int):
        if not 0 < p <= 1 or cost_ns <= 0:
            raise ValueError("need 0 < p <= 1 and cost_ns > 0")
        self.p = p
        self.cost_ns = cost_ns

    def attempt(self, pulse: GlitchPulse, seed: int, start_delay_ns: int) -> AttemptResult:
        ok = random.Random(seed).random() < self.p
        return AttemptResult("SUCCESS" if ok else "FAIL", ok, self.cost_ns)


# -- campaign -----------------------------------------------------------------

@dataclass(frozen=True)
class Budget:
    attempts: int | None = None
    sim_time_ns: int | None = None
    stop_after_successes: int | None = 1

    def __post_init__(self):
        if self.attempts is None and self.sim_time_ns is None and self.stop_after_successes is None:
            raise ValueError("campaign needs some stopping rule")
        if self.attempts is not None and self.attempts <= 0:
            raise ValueError("attempt budget must be > 0")


@dataclass(frozen=True)
class Attempt:
    worker: int
    index: int
    offset_ns: int
    length_ns: int
    outcome: str
    success: bool
    attempt_ns: int
    sim_time_ns: int
    phase: int
    rig: tuple[str, ...] = ()

    def to_json(self) -> str:
        d = {"type": "attempt", "worker": self.worker, "index": self.index, "offset_ns": self.offset_ns,
             "length_ns": self.length_ns, "outcome": self.outcome, "success": self.success,
             "attempt_ns": self.attempt_ns, "sim_time": self.sim_time_ns, "phase": self.phase}
        if self.rig:
            d["rig"] = list(self.rig)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Attempt":
        return cls(d.get("worker", 0), d["index"], d["offset_ns"], d["length_ns"], d["outcome"],
                   d["success"], d.get("attempt_ns", 0), d["sim_time"], d.get("phase", 0),
                   tuple(d.get("rig", ())))


@dataclass(frozen=True)
class CampaignStats:
    attempts: int
    successes: int
    crashes: int
    normals: int
    hangs: int
    detections: int
    success_rate: float
    time_to_first_success: int | None
    attempts_to_first_success: int | None
    attempts_per_simulated_second: float
    sim_time_ns: int

    def summary(self) -> str:
        ttfs = "n/a" if self.time_to_first_success is None else f"{self.time_to_first_success / NS_PER_S:.3f} s"
        return (f"attempts {self.attempts}, successes {self.successes} "
                f"(rate {self.success_rate:.3%}), crashes {self.crashes}, normal boots {self.normals}, "
                f"hangs {self.hangs}, detected {self.detections}\n"
                f"time to first success {ttfs} "
                f"(after {self.attempts_to_first_success} attempts), "
                f"{self.attempts_per_simulated_second:.1f} attempts per simulated second, "
                f"simulated time {self.sim_time_ns / NS_PER_S:.3f} s")


def compute_stats(attempts: list[Attempt]) -> CampaignStats:
    n = len(attempts)
    counts: dict[str, int] = {}
    for a in attempts:
        counts[a.outcome] = counts.get(a.outcome, 0) + 1
    succ = [a for a in attempts if a.success]
    first = min(succ, key=lambda a: (a.sim_time_ns, a.worker, a.index)) if succ else None
    per_worker_end: dict[int, int] = {}
    for a in attempts:
        per_worker_end[a.worker] = max(per_worker_end.get(a.worker, 0), a.sim_time_ns)
    span = max(per_worker_end.values(), default=0)
    return CampaignStats(
        attempts=n,
        successes=len(succ),
        crashes=counts.get("CRASHED", 0),
        normals=counts.get("NORMAL_BOOT", 0),
        hangs=counts.get("HANG", 0),
        detections=counts.get("DETECT_SHUTDOWN", 0),
        success_rate=len(succ) / n if n else 0.0,
        time_to_first_success=first.sim_time_ns if first else None,
        attempts_to_first_success=first.index + 1 if first else None,
        attempts_per_simulated_second=n / (span / NS_PER_S) if span else 0.0,
        sim_time_ns=span,
    )


def derive_seed(*parts: int) -> int:
    """64-bit seed for one attempt, derived from the campaign seed and its coordinates."""
    raw = struct.pack(f"<{len(parts)}Q", *(p & 0xFFFF_FFFF_FFFF_FFFF for p in parts))
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


@dataclass
class WorkerState:
    worker: int
    next_index: int
    traversal: Traversal
    rig_clock_ns: int = 0
    sim_time_ns: int = 0
    successes: int = 0
    done: bool = False
    exhausted: bool = False

    def to_dict(self) -> dict:
        return {"worker": self.worker, "next_index": self.next_index, "strategy": self.traversal.state(),
                "rig_clock_ns": self.rig_clock_ns, "sim_time_ns": self.sim_time_ns,
                "successes": self.successes, "done": self.done, "exhausted": self.exhausted}

    @classmethod
    def from_dict(cls, d: dict) -> "WorkerState":
        return cls(d["worker"], d["next_index"], Traversal.from_state(d["strategy"]), d["rig_clock_ns"],
                   d["sim_time_ns"], d["successes"], d["done"], d.get("exhausted", False))


@dataclass
class CampaignResult:
    stats: CampaignStats
    attempts: list[Attempt]
    workers: list[WorkerState]
    seed: int
    target: object = field(default=None, repr=False)

    @property
    def succeeded(self) -> bool:
        return self.stats.successes > 0

    def checkpoint(self) -> dict:
        return {"type": "checkpoint", "seed": self.seed, "workers": [w.to_dict() for w in self.workers]}


def _worker_budget(budget: Budget, worker: int, workers: int) -> Budget:
    if budget.attempts is None:
        return budget
    share = budget.attempts // workers + (1 if worker < budget.attempts % workers else 0)
    return Budget(max(share, 1), budget.sim_time_ns, budget.stop_after_successes)


def _run_worker(target, state: WorkerState, budget: Budget, rig_config: RigConfig, seed: int,
                record_rig: bool) -> tuple[WorkerState, list[Attempt]]:
    rig = GlitchRig(rig_config)
    rig.clock_ns = state.rig_clock_ns
    ctrl = RigController(rig)
    trav = state.traversal
    hold_ns = rig_config.reset_hold_ticks * rig_config.tick_ns
    log: list[Attempt] = []
    while True:
        if budget.attempts is not None and state.next_index >= budget.attempts:
            break
        if budget.sim_time_ns is not None and state.sim_time_ns >= budget.sim_time_ns:
            break
        if budget.stop_after_successes is not None and state.successes >= budget.stop_after_successes:
            break
        try:
            pulse = trav.next_pulse()
        except Exception:
            state.exhausted = True
            break
        i = state.next_index
        mark = len(rig.received)
        ctrl.configure(pulse)
        ctrl.arm()
        rig.reseed_jitter(derive_seed(seed, state.worker, i, 1))
        trig = ctrl.fire()
        res = target.attempt(pulse, derive_seed(seed, state.worker, i, 0), trig.start_delay_ns)
        cost = hold_ns + trig.start_delay_ns + res.duration_ns
        rig.advance(cost - hold_ns)
        state.sim_time_ns += cost
        phase = trav.phase
        trav.record(pulse, res.success)
        state.successes += res.success
        frames = tuple(f.hex() for f in rig.received[mark:]) if record_rig else ()
        del rig.received[mark:]
        log.append(Attempt(state.worker, i, pulse.offset_ns, pulse.length_ns, res.outcome, res.success,
                           cost, state.sim_time_ns, phase, frames))
        state.next_index += 1
    state.rig_clock_ns = rig.clock_ns
    state.done = True
    return state, log


def _worker_entry(args):
    return _run_worker(*args)


def run_campaign(grid: ParamGrid, strategy: Strategy, rail: RailConfig | None, image,
                 success_predicate=prompt_seen, budget: Budget | None = None, *, seed: int = 0,
                 workers: int = 1, rig_config: RigConfig | None = None, log_path=None,
                 checkpoint_path=None, resume: dict | None = None, record_rig: bool = True,
                 crash_recovery_ns: int = 0) -> CampaignResult:
    """Reset, glitch and classify until the budget or the success quota runs out.

    ``image`` is a :class:`~voltfi.firmware.BootImage` or any object with an
    ``attempt(pulse, seed, start_delay_ns)`` method.  Fixed ``seed`` and
    ``workers`` give a byte-identical log.
    """
    budget = budget or Budget(attempts=10_000)
    rig_config = rig_config or RigConfig(tick_ns=grid.tick_ns)
    if rig_config.tick_ns != grid.tick_ns:
        raise ValueError("grid and rig disagree on the tick")
    for p in (grid.point(0), grid.point(grid.size - 1)):
        if not rig_config.pulse_fits(GlitchPulse(p.offset_ns, max(grid.lengths_ns))):
            raise ValueError("grid exceeds the rig's offset/length bounds")
    target = image if hasattr(image, "attempt") else BootTarget(image, rail, success_predicate, crash_recovery_ns)

    if resume is not None:
        seed = resume["seed"]
        states = [WorkerState.from_dict(d) for d in resume["workers"]]
        for s in states:
            s.done = False
        workers = len(states)
    else:
        states = [WorkerState(w, 0, Traversal(grid, strategy, seed, w, workers)) for w in range(workers)]

    jobs = [(target, s, _worker_budget(budget, s.worker, workers), rig_config, seed, record_rig) for s in states]
    if workers == 1:
        results = [_run_worker(*jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_worker_entry, jobs))

    previous: list[Attempt] = []
    if resume is not None and log_path is not None and Path(log_path).exists():
        starts = {s.worker: s.next_index for s in states}
        previous = [a for a in read_log(log_path) if a.index < starts.get(a.worker, 0)]
    new = sorted((a for _, log in results for a in log), key=lambda a: (a.worker, a.index))
    merged = sorted(previous + new, key=lambda a: (a.worker, a.index))
    final_states = [s for s, _ in results]
    if log_path is not None:
        write_log(log_path, merged)
    res = CampaignResult(compute_stats(merged), merged, final_states, seed, target)
    if checkpoint_path is not None:
        Path(checkpoint_path).write_text(json.dumps(res.checkpoint(), sort_keys=True, indent=1) + "\n")
    return res


def write_log(path, attempts) -> None:
    with open(path, "w") as fh:
        for a in attempts:
            fh.write(a.to_json() + "\n")


def read_log(path) -> list[Attempt]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: not JSON ({exc.msg})") from None
            if d.get("type", "attempt") == "attempt":
                try:
                    out.append(Attempt.from_dict(d))
                except KeyError as exc:
                    raise ValueError(f"{path}:{n}: attempt record lacks {exc}") from None
    return out


def load_checkpoint(path) -> dict:
    d = json.loads(Path(path).read_text())
    if d.get("type") != "checkpoint":
        raise ValueError(f"{path} is not a checkpoint")
    return d


def success_histogram(attempts, bins: int = 20):
    offs = np.array([a.offset_ns for a in attempts if a.success], dtype=np.int64)
    if offs.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0)
    lo, hi = int(offs.min()), int(offs.max())
    if lo == hi:
        return np.array([offs.size]), np.array([lo, lo], dtype=float)
    return np.histogram(offs, bins=min(bins, len(np.unique(offs))), range=(lo, hi))


def length_frequencies(attempts) -> dict[int, int]:
    """Success count per pulse length, most frequent first."""
    freq: dict[int, int] = {}
    for a in attempts:
        if a.success:
            freq[a.length_ns] = freq.get(a.length_ns, 0) + 1
    return dict(sorted(freq.items(), key=lambda kv: (-kv[1], kv[0])))


def expected_time_to_success(p: float, cost_ns: float) -> float:
    """Mean time until the first success for independent attempts."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    return cost_ns / p


def mean_ci(values, z: float = 1.96) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return float(arr.mean()) if arr.size else math.nan, math.nan
    return float(arr.mean()), float(z * arr.std(ddof=1) / math.sqrt(arr.size))
