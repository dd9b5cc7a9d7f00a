import pytest
from hypothesis import given, strategies as st

from voltfi.rail import (DEFAULT_SUSCEPTIBILITY, GlitchPulse, RailConfig, RailKind, Susceptibility,
                         effective_stress, resolve_rail)

ticks = st.integers(min_value=1, max_value=1_000)


def test_effective_stress_examples():
    assert effective_stress(GlitchPulse(0, 11_320), RailConfig()) == 11_320
    assert effective_stress(GlitchPulse(0, 3_000), RailConfig(decoupling_attenuation_ns=3_000)) == 0
    # independent scalar check of the subtraction
    length, atten = 11_340, 500
    assert effective_stress(GlitchPulse(0, length), RailConfig(decoupling_attenuation_ns=atten)) == length - atten
    assert length - atten == 10_840


def test_resolve_examples():
    assert resolve_rail(GlitchPulse(0, 14_000), RailConfig()).kind is RailKind.CRASH
    none = resolve_rail(GlitchPulse(0, 3_000), RailConfig(decoupling_attenuation_ns=3_000))
    assert none.kind is RailKind.NONE and none.fault_probability == 0 and none.stress_window is None
    det = resolve_rail(GlitchPulse(0, 11_320), RailConfig(detector_enabled=True))
    assert det.kind is RailKind.DETECTED


def test_fault_window_placement():
    out = resolve_rail(GlitchPulse(2_000, 11_320), RailConfig(), trigger_time=500)
    assert out.kind is RailKind.FAULT_WINDOW
    assert out.stress_window == (2_500, 2_500 + 11_320)
    assert out.fault_probability == pytest.approx(0.9)


def test_boundaries_exact():
    rail = RailConfig()
    assert resolve_rail(GlitchPulse(0, 9_980), rail).kind is RailKind.NONE
    assert resolve_rail(GlitchPulse(0, 10_000), rail).kind is RailKind.FAULT_WINDOW
    assert resolve_rail(GlitchPulse(0, 12_980), rail).kind is RailKind.FAULT_WINDOW
    assert resolve_rail(GlitchPulse(0, 13_000), rail).kind is RailKind.CRASH


def test_susceptibility_ramp():
    s = DEFAULT_SUSCEPTIBILITY
    assert s(9_999) == 0 and s(10_000) == 0
    assert s(10_650) == pytest.approx(0.45)
    assert s(11_300) == pytest.approx(0.9) and s(12_900) == pytest.approx(0.9)


@pytest.mark.parametrize("kwargs", [
    {"fault_min_ns": 0}, {"fault_min_ns": 13_000, "crash_min_ns": 13_000}, {"decoupling_attenuation_ns": -1},
    {"susceptibility": Susceptibility(((5_000, 0.5),))},
])
def test_rail_config_rejects(kwargs):
    with pytest.raises(ValueError):
        RailConfig(**kwargs)


@pytest.mark.parametrize("points", [(), ((2, 0.1), (1, 0.2)), ((1, 0.5), (2, 0.4)), ((1, 1.5),)])
def test_susceptibility_rejects(points):
    with pytest.raises(ValueError):
        Susceptibility(points)


def test_pulse_validation():
    with pytest.raises(ValueError):
        GlitchPulse(0, 0)
    with pytest.raises(ValueError):
        GlitchPulse(-20, 20)
    with pytest.raises(ValueError):
        GlitchPulse(10, 20).check_ticks(20)


def test_rail_dict_roundtrip():
    rail = RailConfig(decoupling_attenuation_ns=40, detector_enabled=True)
    assert RailConfig.from_dict(rail.to_dict()) == rail


@given(ticks, ticks, st.integers(min_value=0, max_value=20_000))
def test_stress_monotone_in_length(a, b, atten):
    rail = RailConfig(decoupling_attenuation_ns=atten)
    lo, hi = sorted((a, b))
    assert effective_stress(GlitchPulse(0, 20 * lo), rail) <= effective_stress(GlitchPulse(0, 20 * hi), rail)


@given(st.integers(min_value=1, max_value=2_000), st.integers(min_value=0, max_value=5_000),
       st.integers(min_value=0, max_value=10**9))
def test_regime_partition(length_ticks, atten_ticks, trigger):
    rail = RailConfig(decoupling_attenuation_ns=20 * atten_ticks)
    pulse = GlitchPulse(20, 20 * length_ticks)
    out = resolve_rail(pulse, rail, trigger)
    s = effective_stress(pulse, rail)
    expect = (RailKind.NONE if s < rail.fault_min_ns
              else RailKind.CRASH if s >= rail.crash_min_ns else RailKind.FAULT_WINDOW)
    assert out.kind is expect
    assert 0.0 <= out.fault_probability <= 1.0
    assert (out.stress_window is None) == (expect is RailKind.NONE)
    assert resolve_rail(pulse, rail, trigger) == out
