import numpy as np
import pytest

from hybridloc.ceda import (
    ComponentMeasurement, as_array, estimate_components, estimate_noise_std, matched_filter,
    write_measurements_csv,
)
from hybridloc.likelihood import LhfParams, sigma_d
from hybridloc.scenario import PropagationComponent
from hybridloc.signal import SPEED_OF_LIGHT, BasebandSignal, rrc_pulse, synthesize

PULSE = rrc_pulse()
NS = 81


def _on_grid(k, u):
    return PropagationComponent(k * PULSE.ts * SPEED_OF_LIGHT, u)


def test_matched_filter_pure_noise_is_finite():
    s = synthesize([], NS, PULSE.ts, 1.0, np.random.default_rng(0), PULSE)
    delays, stat = matched_filter(s, PULSE)
    assert np.all(np.isfinite(stat)) and len(delays) == len(stat)


def test_matched_filter_peak_equals_amplitude():
    s = synthesize([_on_grid(40, 50.0)], NS, PULSE.ts, 1.0, pulse=PULSE, noise=False, phases=[1.0])
    delays, stat = matched_filter(s, PULSE)
    g = int(np.argmax(stat))
    assert stat[g] == pytest.approx(50.0, rel=1e-9)
    assert delays[g] == pytest.approx(40 * PULSE.ts, abs=1e-15)


def test_two_separated_components_give_equal_peaks():
    comps = [_on_grid(10, 30.0), _on_grid(50, 30.0)]
    s = synthesize(comps, NS, PULSE.ts, 1.0, pulse=PULSE, noise=False, phases=[0.0, 2.0])
    delays, stat = matched_filter(s, PULSE)
    i1 = np.argmin(np.abs(delays - 10 * PULSE.ts))
    i2 = np.argmin(np.abs(delays - 50 * PULSE.ts))
    assert stat[i1] == pytest.approx(30.0, rel=1e-3)
    assert stat[i2] == pytest.approx(30.0, rel=1e-3)


def test_noise_free_components_recovered():
    comps = [PropagationComponent(4.3, 40.0), PropagationComponent(11.9, 15.0, 1)]
    s = synthesize(comps, NS, PULSE.ts, 1.0, pulse=PULSE, noise=False, phases=[0.4, 2.2])
    out = sorted(estimate_components(s, PULSE), key=lambda m: m.z_d)
    assert len(out) == 2
    assert out[0].z_d == pytest.approx(4.3, abs=0.01)
    assert out[1].z_d == pytest.approx(11.9, abs=0.01)
    assert out[0].z_u == pytest.approx(40.0, rel=0.01)


def test_measurement_contract():
    rng = np.random.default_rng(3)
    for _ in range(50):
        comps = [PropagationComponent(d, u) for d, u in zip(rng.uniform(1, 29, 3), rng.uniform(1, 60, 3))]
        s = synthesize(comps, NS, PULSE.ts, 1.0, rng, PULSE)
        for m in estimate_components(s, PULSE, gamma=2.0):
            assert 0.0 <= m.z_d <= 30.0
            assert m.z_u >= 2.0


def test_los_at_one_meter_calibration():
    u = 10 ** (38 / 20)
    rng = np.random.default_rng(11)
    errs = []
    for _ in range(500):
        s = synthesize([PropagationComponent(1.0, u)], NS, PULSE.ts, 1.0, rng, PULSE)
        z = [m.z_d for m in estimate_components(s, PULSE)]
        if z:
            errs.append(min(z, key=lambda d: abs(d - 1.0)) - 1.0)
    assert len(errs) / 500 >= 0.99
    assert np.mean(np.abs(errs)) <= 2 * sigma_d(u, LhfParams())


def test_false_alarm_rate_matches_rayleigh_tail():
    # noise-only magnitudes are Rayleigh with P(|r| > gamma) = exp(-gamma^2);
    # over NS roughly independent samples that gives NS * exp(-4) ~ 1.48 exceedances
    rng = np.random.default_rng(5)
    counts = [len(estimate_components(synthesize([], NS, PULSE.ts, 1.0, rng, PULSE), PULSE))
              for _ in range(1000)]
    expected = NS * np.exp(-4.0)
    assert 0.5 * expected <= np.mean(counts) <= 1.5 * expected


def test_deterministic_output():
    s = synthesize([PropagationComponent(7.0, 20.0)], NS, PULSE.ts, 1.0, np.random.default_rng(2), PULSE)
    assert estimate_components(s, PULSE) == estimate_components(s, PULSE)


def test_noise_estimate():
    rng = np.random.default_rng(4)
    est = [estimate_noise_std(BasebandSignal(2.0 / np.sqrt(2) * (rng.standard_normal(NS)
           + 1j * rng.standard_normal(NS)), PULSE.ts, 2.0)) for _ in range(300)]
    assert np.mean(est) == pytest.approx(2.0, rel=0.05)


def test_invalid_gamma():
    s = synthesize([], NS, PULSE.ts, 1.0, np.random.default_rng(0), PULSE)
    with pytest.raises(ValueError):
        estimate_components(s, PULSE, gamma=0.0)


def test_csv_and_array(tmp_path):
    ms = [ComponentMeasurement(1.5, 3.0), ComponentMeasurement(2.5, 4.0)]
    np.testing.assert_array_equal(as_array(ms), [[1.5, 3.0], [2.5, 4.0]])
    assert as_array([]).shape == (0, 2)
    write_measurements_csv(tmp_path / "m.csv", [(0, 3, 1, ms)])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "realization,n,j,m,z_d_m,z_u"
    assert lines[2] == "0,3,1,2,2.5,4.0"
