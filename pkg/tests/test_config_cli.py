import json
import textwrap

import pytest

from voltfi import payload as pl
from voltfi.cli import EXIT_CONFIG, EXIT_EXHAUSTED, EXIT_OK, feasibility_report, main
from voltfi.config import CampaignConfig, ConfigError, load_config
from voltfi.firmware import generate_device
from voltfi.rail import RailConfig
from voltfi.search import StrategyKind, read_log


def write_cfg(tmp_path, body: str, name: str = "campaign.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(body))
    return p


NARROW = """
    seed = 5
    [grid]
    lo_ns = 2_585_200
    hi_ns = 2_634_800
    step_ns = 20
    lengths_ns = [11_300, 11_320, 11_340]
    [strategy]
    kind = "RANDOM"
    [budget]
    attempts = 400
"""


# -- config ------------------------------------------------------------------------

def test_defaults_mirror_attack_parameters():
    cfg = CampaignConfig()
    assert (cfg.grid.lo_ns, cfg.grid.hi_ns, cfg.grid.step_ns) == (0, 4_420_000, 20)
    assert cfg.grid.lengths_ns == (11_300, 11_320, 11_340)
    assert cfg.strategy.kind is StrategyKind.NARROWING


def test_load_full_config(tmp_path):
    p = write_cfg(tmp_path, """
        seed = 7
        workers = 2
        [rail]
        decoupling_attenuation_ns = 100
        [rig]
        jitter_max_ns = 40
        [image]
        seed = 3
        hardened = true
        [grid]
        lo_ns = 1_000
        hi_ns = 2_000
        step_ns = 40
        lengths_ns = [11_320]
        [strategy]
        kind = "NARROWING"
        successes_required = 4
        tolerance_ns = 1_000
        [budget]
        attempts = 10
        stop_after_successes = 2
        [feasibility]
        lo_ns = 10_000
        hi_ns = 12_000
        step_ns = 1_000
        trials = 3
    """)
    cfg = load_config(p)
    assert (cfg.seed, cfg.workers) == (7, 2)
    assert cfg.rail.decoupling_attenuation_ns == 100 and cfg.rig.jitter_max_ns == 40
    assert cfg.device.seed == 3 and cfg.device.hardened
    assert cfg.grid.step_ns == 40 and cfg.strategy.narrowing.successes_required == 4
    assert cfg.budget.attempts == 10 and cfg.feasibility.lengths_ns == (10_000, 11_000, 12_000)


@pytest.mark.parametrize("body", [
    "colour = 1\n",
    "[grid]\nlo_ns = 5\n",
    "[strategy]\nkind = \"SIDEWAYS\"\n",
    "[strategy]\nkind = \"RANDOM\"\nsuccesses_required = 3\n",
    "workers = 0\n",
    "[rig]\nmax_offset_ticks = 10\n",
    "[image]\npath = \"nowhere\"\n",
    "[image]\npath = \"x\"\nseed = 1\n",
    "[budget]\nattempts = 0\n",
    "seed = [\n",
])
def test_bad_configs_raise(tmp_path, body):
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path, body))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    assert main(["attack", "--config", str(tmp_path / "absent.toml")]) == EXIT_CONFIG


def test_bundle_path_is_relative_to_config(tmp_path, bundle):
    bundle.save(tmp_path / "dev")
    cfg = load_config(write_cfg(tmp_path, '[image]\npath = "dev"\n'))
    assert cfg.load_bundle().image.irom_bytes == bundle.image.irom_bytes


# -- attack -------------------------------------------------------------------------

def test_attack_narrow_window_succeeds(tmp_path, bundle, capsys):
    out = tmp_path / "out"
    assert main(["attack", "--config", str(write_cfg(tmp_path, NARROW)), "--out-dir", str(out)]) == EXIT_OK
    assert (out / "irom_dump.bin").read_bytes() == bundle.image.irom_bytes
    assert (out / "mb1_decrypted.bin").read_bytes() == bundle.mb1_plaintext
    assert (out / "fek_dump.bin").read_bytes()[:16] == bundle.image.fek.fek1
    assert "captured iROM matches generated image: True" in capsys.readouterr().out
    assert read_log(out / "attempts.jsonl")[-1].success


def test_attack_hardened_exhausts(tmp_path):
    body = NARROW.replace("[budget]", "[image]\nhardened = true\n[budget]")
    out = tmp_path / "out"
    assert main(["attack", "--config", str(write_cfg(tmp_path, body)), "--out-dir", str(out)]) == EXIT_EXHAUSTED
    assert "budget exhausted" in (out / "report.txt").read_text()
    assert not (out / "irom_dump.bin").exists()
    assert len(read_log(out / "attempts.jsonl")) == 400


def test_attack_away_from_window_exhausts(tmp_path):
    body = NARROW.replace("lo_ns = 2_585_200", "lo_ns = 0").replace("hi_ns = 2_634_800", "hi_ns = 1_000_000")
    code = main(["attack", "--config", str(write_cfg(tmp_path, body)), "--out-dir", str(tmp_path / "o")])
    assert code == EXIT_EXHAUSTED


def test_attack_is_repeatable_and_seed_overridable(tmp_path):
    cfg = str(write_cfg(tmp_path, NARROW))
    for d in ("a", "b"):
        main(["attack", "--config", cfg, "--out-dir", str(tmp_path / d), "--seed", "9"])
    for name in ("attempts.jsonl", "checkpoint.json", "irom_dump.bin", "mb1_decrypted.bin", "report.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert json.loads((tmp_path / "a" / "checkpoint.json").read_text())["seed"] == 9


def test_attack_resume(tmp_path):
    body = NARROW.replace("attempts = 400", "attempts = 400\nstop_after_successes = 2")
    cfg = str(write_cfg(tmp_path, body))
    main(["attack", "--config", cfg, "--out-dir", str(tmp_path / "full")])
    short = write_cfg(tmp_path, body.replace("attempts = 400", "attempts = 5"), "short.toml")
    main(["attack", "--config", str(short), "--out-dir", str(tmp_path / "part")])
    code = main(["attack", "--config", cfg, "--out-dir", str(tmp_path / "part"),
                 "--resume", str(tmp_path / "part" / "checkpoint.json")])
    assert code == EXIT_OK
    assert (tmp_path / "part" / "attempts.jsonl").read_bytes() == (tmp_path / "full" / "attempts.jsonl").read_bytes()


# -- generate ------------------------------------------------------------------------

def test_generate_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["generate", "--seed", "4", "--out-dir", str(tmp_path / d)]) == EXIT_OK
    for name in ("irom.bin", "mb1.bin", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "irom.bin").read_bytes() == generate_device(
        load_config(write_cfg(tmp_path, "[image]\nseed = 4\n")).device).image.irom_bytes


def test_generate_hardened_differs(tmp_path):
    main(["generate", "--out-dir", str(tmp_path / "soft")])
    main(["generate", "--hardened", "--out-dir", str(tmp_path / "hard")])
    assert (tmp_path / "soft" / "irom.bin").read_bytes() != (tmp_path / "hard" / "irom.bin").read_bytes()


# -- report --------------------------------------------------------------------------

def test_report_empty_log(tmp_path, capsys):
    (tmp_path / "attempts.jsonl").write_text("")
    assert main(["report", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "attempts 0, successes 0" in out and "≈ 8.14 min single pass" in out


def test_report_counts(tmp_path, capsys):
    lines = [{"type": "attempt", "index": i, "offset_ns": 2_630_000 + 20 * i, "length_ns": 11_320,
              "outcome": o, "success": o == "UART_PROMPT", "sim_time": 1000 * (i + 1)}
             for i, o in enumerate(["NORMAL_BOOT", "UART_PROMPT", "CRASHED", "UART_PROMPT"])]
    (tmp_path / "log.jsonl").write_text("".join(json.dumps(x) + "\n" for x in lines))
    assert main(["report", str(tmp_path / "log.jsonl")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "attempts 4, successes 2" in out and "crashes 1" in out and "11320 ns x2" in out


def test_report_missing_or_corrupt(tmp_path):
    assert main(["report", str(tmp_path / "none.jsonl")]) == EXIT_CONFIG
    (tmp_path / "bad.jsonl").write_text("garbage\n")
    assert main(["report", str(tmp_path / "bad.jsonl")]) == EXIT_CONFIG


# -- payload and oracle --------------------------------------------------------------

def test_payload_cli_roundtrip(tmp_path, capsys):
    (tmp_path / "code.bin").write_bytes(b"\x01\x02")
    assert main(["payload", "encode", "--entry", "0", "--code", str(tmp_path / "code.bin"),
                 "--out", str(tmp_path / "p.bin")]) == EXIT_OK
    assert "checksum 0xfffffffa" in capsys.readouterr().out
    assert main(["payload", "decode", str(tmp_path / "p.bin"), "--code-out", str(tmp_path / "c2.bin")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["code_length"] == 2
    assert (tmp_path / "c2.bin").read_bytes() == b"\x01\x02"
    raw = bytearray((tmp_path / "p.bin").read_bytes())
    raw[3] ^= 1
    (tmp_path / "p.bin").write_bytes(bytes(raw))
    assert main(["payload", "decode", str(tmp_path / "p.bin")]) == EXIT_CONFIG


def test_build_dump_cli(tmp_path):
    out = tmp_path / "dump.bin"
    assert main(["payload", "build-dump", "--start", "0x10000", "--count", "0x1200", "--out", str(out)]) == EXIT_OK
    assert out.read_bytes() == pl.build_dump_payload(0x10000, 0x1200).to_bytes()
    assert main(["payload", "build-dump", "--start", "0", "--count", "4", "--out", str(out)]) == EXIT_CONFIG


def test_oracle_cli(capsys):
    assert main(["oracle", "--fixture", "LISTING2"]) == EXIT_OK
    sites = json.loads(capsys.readouterr().out)
    assert {(s["line"], s["effect"]) for s in sites} >= {(3, "SKIP"), (11, "BRANCH_INVERT")}
    assert main(["oracle", "--fixture", "FUSECHECK_HARDENED", "--include-corrupt"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == []
    assert main(["oracle", "--fixture", "NOPE"]) == EXIT_CONFIG


# -- feasibility ---------------------------------------------------------------------

def test_feasibility_thresholds():
    rep = feasibility_report(CampaignConfig())
    assert rep["min_corruption_ns"] is not None and rep["min_corruption_ns"] < 13_000
    assert rep["min_crash_ns"] == 13_000
    assert all(r["crashed"] == 0 for r in rep["rows"] if r["length_ns"] < 13_000)


def test_feasibility_attenuated_rail_never_corrupts():
    cfg = CampaignConfig(rail=RailConfig(decoupling_attenuation_ns=14_000))
    rep = feasibility_report(cfg)
    assert rep["min_corruption_ns"] is None and rep["min_crash_ns"] is None


def test_feasibility_cli_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["feasibility", "--seed", "3", "--out-dir", str(tmp_path / d)]) == EXIT_OK
    assert (tmp_path / "a" / "feasibility.json").read_bytes() == (tmp_path / "b" / "feasibility.json").read_bytes()


def test_detector_config_gives_only_shutdowns(tmp_path):
    body = NARROW + "[rail]\ndetector_enabled = true\n"
    out = tmp_path / "o"
    assert main(["attack", "--config", str(write_cfg(tmp_path, body)), "--out-dir", str(out)]) == EXIT_EXHAUSTED
    assert {a.outcome for a in read_log(out / "attempts.jsonl")} == {"DETECT_SHUTDOWN"}


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "voltfi", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "feasibility" in r.stdout
