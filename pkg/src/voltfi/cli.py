"""Command-line front end.

Exit status: 0 success, 1 configuration or input error, 2 budget exhausted
without a success.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import payload as pl
from .attack import ExtractionError, decrypt_captured_mb1, extract, replay_attempt
from .boot import fault_path_oracle, run_fixture
from .config import CampaignConfig, ConfigError, load_config
from .crypto.engine import CryptoEngineError
from .firmware import FIXTURES, DeviceSpec, build_fixture, generate_device
from .rail import GlitchPulse, resolve_rail
from .search import (NS_PER_S, compute_stats, derive_seed, estimate_full_pass, length_frequencies, load_checkpoint,
                     read_log, run_campaign, success_histogram)

EXIT_OK, EXIT_CONFIG, EXIT_EXHAUSTED = 0, 1, 2


def _config(args) -> CampaignConfig:
    cfg = load_config(args.config) if args.config else CampaignConfig()
    return cfg.with_overrides(seed=args.seed, workers=args.workers)


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- feasibility ---------------------------------------------------------------

def feasibility_report(cfg: CampaignConfig) -> dict:
    """Sweep the pulse length over the add-loop fixture."""
    rows = []
    for length in cfg.feasibility.lengths_ns:
        pulse = GlitchPulse(cfg.feasibility.offset_ns, length)
        corrupt = crash = detect = 0
        for trial in range(cfg.feasibility.trials):
            r = run_fixture("ADD_LOOP", pulse, cfg.rail, derive_seed(cfg.seed, length, trial))
            state = r.state.value
            crash += state == "CRASHED"
            detect += state == "DETECT_SHUTDOWN"
            corrupt += r.corrupted and state not in ("CRASHED", "DETECT_SHUTDOWN")
        kind = resolve_rail(pulse, cfg.rail).kind
        rows.append({"length_ns": length, "rail": kind.value, "trials": cfg.feasibility.trials,
                     "corrupted": corrupt, "crashed": crash, "detected": detect})
    first = lambda key: next((r["length_ns"] for r in rows if r[key]), None)  # noqa: E731
    return {"seed": cfg.seed, "offset_ns": cfg.feasibility.offset_ns, "rows": rows,
            "min_corruption_ns": first("corrupted"), "min_crash_ns": first("crashed")}


def render_feasibility(rep: dict) -> str:
    lines = [f"add-loop sweep at offset {rep['offset_ns']} ns, seed {rep['seed']}",
             f"{'length_ns':>10} {'rail':>12} {'corrupted':>10} {'crashed':>8} {'detected':>9}"]
    for r in rep["rows"]:
        lines.append(f"{r['length_ns']:>10} {r['rail']:>12} {r['corrupted']:>6}/{r['trials']:<3} "
                     f"{r['crashed']:>8} {r['detected']:>9}")
    fmt = lambda v: "none" if v is None else f"{v} ns ({v / 1000:.2f} us)"  # noqa: E731
    lines.append(f"shortest length with corruption: {fmt(rep['min_corruption_ns'])}")
    lines.append(f"shortest length with a crash:     {fmt(rep['min_crash_ns'])}")
    return "\n".join(lines)


def cmd_feasibility(args) -> int:
    cfg = _config(args)
    rep = feasibility_report(cfg)
    text = render_feasibility(rep)
    print(text)
    if args.out_dir:
        out = _out_dir(args)
        (out / "feasibility.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        (out / "feasibility.txt").write_text(text + "\n")
    return EXIT_OK


# -- attack --------------------------------------------------------------------

def cmd_attack(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    bundle = cfg.load_bundle()
    resume = load_checkpoint(args.resume) if args.resume else None
    log_path, ckpt_path = out / "attempts.jsonl", out / "checkpoint.json"
    res = run_campaign(cfg.grid, cfg.strategy, cfg.rail, bundle.image, budget=cfg.budget, seed=cfg.seed,
                       workers=cfg.workers, rig_config=cfg.rig, log_path=log_path,
                       checkpoint_path=ckpt_path, resume=resume)
    lines = [res.stats.summary()]
    code = EXIT_OK
    winners = [a for a in res.attempts if a.success]
    if not winners:
        lines.append("budget exhausted without reaching the loader prompt")
        code = EXIT_EXHAUSTED
    else:
        first = min(winners, key=lambda a: (a.sim_time_ns, a.worker, a.index))
        lines.append(f"first success: worker {first.worker} attempt {first.index} "
                     f"offset {first.offset_ns} ns length {first.length_ns} ns")
        machine, boot = replay_attempt(bundle.image, cfg.rail, cfg.rig, res.seed, first)
        if not boot.success:
            raise RuntimeError("replay of the winning attempt did not reach the prompt")
        ex = extract(machine)
        (out / "irom_dump.bin").write_bytes(ex.irom)
        (out / "fek_dump.bin").write_bytes(ex.fek_block)
        (out / "fuse_dump.bin").write_bytes(ex.fuse_block)
        plain = decrypt_captured_mb1(ex, bundle.image.mb1_image)
        (out / "mb1_decrypted.bin").write_bytes(plain)
        irom_ok = ex.irom == bundle.image.irom_bytes
        mb1_ok = plain == bundle.mb1_plaintext
        lines.append(f"captured iROM matches generated image: {irom_ok}")
        lines.append(f"FEK1 {ex.fek1.hex()}  FEK2(test) {ex.fek2_testkey.hex()}")
        lines.append(f"decrypted MB1 matches generated plaintext: {mb1_ok}")
        if not (irom_ok and mb1_ok):
            code = EXIT_CONFIG
    text = "\n".join(lines)
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return code


# -- generate ------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.config:
        spec = load_config(args.config).device
    else:
        spec = DeviceSpec()
    changes = spec.__dict__ | ({"seed": args.seed} if args.seed is not None else {})
    if args.hardened:
        changes["hardened"] = True
    try:
        spec = DeviceSpec.from_dict(changes)
        bundle = generate_device(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    path = bundle.save(_out_dir(args))
    print(f"wrote device bundle (seed {spec.seed}) to {path}")
    return EXIT_OK


# -- report --------------------------------------------------------------------

def render_report(attempts, window_ns: int, step_ns: int, lengths_count: int) -> str:
    st = compute_stats(attempts)
    lines = [st.summary()]
    counts, edges = success_histogram(attempts)
    if len(counts):
        lines.append("successful offsets:")
        peak = max(counts)
        for c, lo, hi in zip(counts, edges, edges[1:]):
            bar = "#" * (0 if peak == 0 else round(30 * c / peak))
            lines.append(f"  {lo:>12.0f} .. {hi:>12.0f} ns {c:>5} {bar}")
        freq = length_frequencies(attempts)
        lines.append("successes per length: " + ", ".join(f"{k} ns x{v}" for k, v in freq.items()))
    single = estimate_full_pass(window_ns, step_ns, 1)
    lines.append(f"estimate: {single.num_offsets} offsets, mean attempt {single.avg_attempt_ns / 1000:.1f} us, "
                 f"≈ {single.total_min:.2f} min single pass ({single.total_days:.3f} days)")
    full = estimate_full_pass(window_ns, step_ns, lengths_count)
    if lengths_count > 1:
        lines.append(f"with {lengths_count} lengths per offset: ≈ {full.total_min:.2f} min")
    if st.sim_time_ns:
        lines.append(f"simulated time spent: {st.sim_time_ns / NS_PER_S / 60:.2f} min "
                     f"({100 * st.sim_time_ns / full.total_ns:.1f}% of a full pass)")
    return "\n".join(lines)


def cmd_report(args) -> int:
    path = Path(args.log)
    if path.is_dir():
        path = path / "attempts.jsonl"
    if not path.exists():
        raise ConfigError(f"log {path} not found")
    try:
        attempts = read_log(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    lengths = args.lengths or len({a.length_ns for a in attempts}) or 1
    print(render_report(attempts, args.window_ns, args.step_ns, lengths))
    return EXIT_OK


# -- payload -------------------------------------------------------------------

def _int(s: str) -> int:
    return int(s, 0)


def cmd_payload(args) -> int:
    if args.action == "encode":
        code = Path(args.code).read_bytes()
        wire = pl.encode(pl.UartHeader(args.entry, len(code)), code)
        Path(args.out).write_bytes(wire)
        print(f"{len(wire)} bytes, checksum 0x{pl.checksum(wire[:-4]):08x}")
    elif args.action == "decode":
        try:
            p = pl.decode(Path(args.file).read_bytes())
        except pl.PayloadError as exc:
            print(f"rejected: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps({"entry_addr": p.header.entry_addr, "code_length": p.header.code_length,
                          "ids": list(p.header.ids), "checksum": f"0x{p.checksum:08x}"}, sort_keys=True))
        if args.code_out:
            Path(args.code_out).write_bytes(p.code)
    else:
        try:
            p = pl.build_dump_payload(args.start, args.count, args.uart)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        Path(args.out).write_bytes(p.to_bytes())
        print(f"dump of 0x{args.start:08x}+0x{args.count:x}: {len(p.to_bytes())} bytes -> {args.out}")
    return EXIT_OK


# -- oracle --------------------------------------------------------------------

def cmd_oracle(args) -> int:
    if args.fixture:
        if args.fixture.upper() not in FIXTURES:
            raise ConfigError(f"unknown fixture {args.fixture}; choose from {', '.join(FIXTURES)}")
        target = build_fixture(args.fixture)
        label = args.label or target.target_label
        if label is None:
            raise ConfigError(f"fixture {target.name} has no target label; pass --label")
    else:
        cfg = _config(args)
        target, label = cfg.load_bundle().image, args.label or "NvBootUartDownload"
    sites = sorted(fault_path_oracle(target, label, include_corrupt=args.include_corrupt))
    print(json.dumps([s.to_dict() for s in sites], indent=1, sort_keys=True))
    return EXIT_OK


# -- wiring --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="campaign TOML file")
    common.add_argument("--seed", type=_int, help="override the campaign seed")
    common.add_argument("--workers", type=int, help="override the worker count")
    common.add_argument("--out-dir", help="directory for logs and artifacts")
    common.add_argument("--resume", help="checkpoint file to continue from")

    p = argparse.ArgumentParser(prog="voltfi", description="Voltage-glitch campaign simulator")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("feasibility", parents=[common], help="pulse-length sweep on the add loop")
    sub.add_parser("attack", parents=[common], help="glitch, dump and decrypt")
    g = sub.add_parser("generate", parents=[common], help="write a synthetic device bundle")
    g.add_argument("--hardened", action="store_true", help="use the redundant fuse check")
    r = sub.add_parser("report", parents=[common], help="summarise an attempt log")
    r.add_argument("log", help="attempts.jsonl or the directory holding it")
    r.add_argument("--window-ns", type=int, default=4_420_000)
    r.add_argument("--step-ns", type=int, default=20)
    r.add_argument("--lengths", type=int, default=0, help="lengths per offset (default: from the log)")

    pp = sub.add_parser("payload", help="UART payload tools")
    psub = pp.add_subparsers(dest="action", required=True)
    e = psub.add_parser("encode")
    e.add_argument("--entry", type=_int, required=True)
    e.add_argument("--code", required=True, help="raw code file")
    e.add_argument("--out", required=True)
    d = psub.add_parser("decode")
    d.add_argument("file")
    d.add_argument("--code-out")
    b = psub.add_parser("build-dump")
    b.add_argument("--start", type=_int, required=True)
    b.add_argument("--count", type=_int, required=True)
    b.add_argument("--uart", type=_int, default=pl.mm.UART_TX_ADDR)
    b.add_argument("--out", required=True)

    o = sub.add_parser("oracle", parents=[common], help="enumerate single faults reaching a label")
    o.add_argument("--fixture", help="fixture name instead of the configured device")
    o.add_argument("--label", help="target label")
    o.add_argument("--include-corrupt", action="store_true")
    return p


COMMANDS = {"feasibility": cmd_feasibility, "attack": cmd_attack, "generate": cmd_generate,
            "report": cmd_report, "payload": cmd_payload, "oracle": cmd_oracle}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, OSError, CryptoEngineError, ExtractionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
