import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmeloc.errors import InconsistentAngles, NoPeak, OutOfRange, SchemaError
from mmeloc.geometry import RigidTransform
from mmeloc.radar import (SPEED_OF_LIGHT, ChirpConfig, RadarTracker, direction_vector, estimate_aoa,
                          peak_phase_difference, preliminary_location, range_fft, read_if_binary,
                          update_translation, write_if_binary)
from mmeloc.sim import ScenarioConfig, generate, noiseless

CFG = ChirpConfig(slope=3.0e13)


def tone(f, cfg=CFG, amp=1.0, phase=0.0):
    n = np.arange(cfg.samples_per_chirp)
    return amp * np.exp(1j * (2 * np.pi * f * n / cfg.sample_rate + phase))


def test_chirp_invariants():
    with pytest.raises(ValueError):
        ChirpConfig(slope=-1)
    with pytest.raises(ValueError):
        ChirpConfig(sample_rate=1e6)  # below twice the IF at max range
    with pytest.raises(ValueError):
        ChirpConfig(antenna_spacing=0.01)


def test_range_fft_pure_tone():
    f, D = range_fft(tone(1.0e6), CFG)
    assert f == pytest.approx(1.0e6, rel=1e-3)
    assert D == pytest.approx(5.0, abs=SPEED_OF_LIGHT / (2 * CFG.bandwidth))
    assert D == pytest.approx(SPEED_OF_LIGHT * f / (2 * CFG.slope))


def test_range_fft_zero_signal():
    with pytest.raises(NoPeak):
        range_fft(np.zeros(256, complex), CFG)


def test_range_fft_two_tones():
    res = CFG.sample_rate / CFG.samples_per_chirp
    s = tone(1.0e6) + tone(1.2e6)
    f1, _ = range_fft(s, CFG)
    assert range_fft(s, CFG)[0] == f1  # deterministic
    assert min(abs(f1 - 1.0e6), abs(f1 - 1.2e6)) < res
    f_big, _ = range_fft(tone(1.0e6) + tone(1.2e6, amp=1.5), CFG)
    assert abs(f_big - 1.2e6) < res
    f_small, _ = range_fft(tone(1.0e6, amp=1.5) + tone(1.2e6), CFG)
    assert abs(f_small - 1.0e6) < res


def test_range_fft_tie_goes_to_lower_frequency():
    # two tones placed symmetrically on the FFT grid have identical peaks
    nfft = 256 * 16
    df = CFG.sample_rate / nfft
    s = tone(200 * df) + tone(600 * df)
    f, _ = range_fft(s, CFG)
    assert f == pytest.approx(200 * df, abs=df / 10)


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 20.0))
def test_range_resolution_bound(D):
    _, est = range_fft(tone(CFG.if_frequency(D)), CFG)
    assert abs(est - D) <= SPEED_OF_LIGHT / (2 * CFG.bandwidth)


def test_estimate_aoa_examples():
    assert estimate_aoa(0.0, CFG) == pytest.approx(np.pi / 2)
    assert estimate_aoa(np.pi / 2, CFG) == pytest.approx(np.pi / 3)
    with pytest.raises(OutOfRange):
        estimate_aoa(3.2, CFG)


def test_phase_difference_recovers_angle():
    k = 2 * np.pi * CFG.antenna_spacing / CFG.wavelength
    for theta in (0.4, 1.0, np.pi / 2, 2.2):
        ref = tone(1.0e6, phase=0.3)
        other = ref * np.exp(1j * k * np.cos(theta))
        assert estimate_aoa(peak_phase_difference(ref, other, CFG), CFG) == pytest.approx(theta, abs=1e-9)


def test_direction_vector_examples():
    assert np.allclose(direction_vector(np.pi / 2, np.pi / 2), [0, 0, 1])
    assert np.allclose(direction_vector(np.pi / 3, np.pi / 3), [0.5, 0.5, np.sqrt(0.5)])
    with pytest.raises(InconsistentAngles):
        direction_vector(0.0, np.pi / 3)


@given(st.floats(0, np.pi), st.floats(0, np.pi))
def test_direction_vector_unit(tx, ty):
    if np.cos(tx) ** 2 + np.cos(ty) ** 2 > 1:
        return
    assert abs(np.linalg.norm(direction_vector(tx, ty)) - 1) <= 1e-12


def test_preliminary_location():
    up = np.array([0, 0, 1.0])
    assert np.allclose(preliminary_location(5, up, RigidTransform()), [0, 0, 5])
    T = RigidTransform(np.eye(3), [0.1, 0, 0])
    P = preliminary_location(5, up, T)
    assert np.allclose(P, [0.1, 0, 5])
    assert np.linalg.norm(P - T.translation) == pytest.approx(5)


def test_update_translation():
    t, U = update_translation([0, 0, 5], [1, 2, 3], [1, 2, 3])
    assert np.allclose(U, 0) and np.allclose(t, [0, 0, 5])
    t, U = update_translation([0, 0, 5], [0, 0, 4.9], [0, 0, 5])
    assert np.allclose(t, [0, 0, 4.9])


def test_noiseless_chain_reproduces_truth():
    sc = generate(noiseless(ScenarioConfig(duration=0.5, seed=1)))
    tr = RadarTracker(sc.calibration.radar_to_camera)
    first = None
    for fr in sc.radar:
        (m,) = tr.measure(fr)
        tr.associate(m)
        truth = sc.truth.interpolate([fr.t])[0]
        assert np.allclose(m.P_E, truth, atol=1e-9)
        first = truth if first is None else first
        assert np.allclose(tr.t_EO - first, truth - first, atol=1e-9)


def test_raw_if_tracker_within_resolution():
    sc = generate(noiseless(ScenarioConfig(duration=0.05, seed=1, raw_if=True)))
    chirp = sc.config.chirp_config()
    tr = RadarTracker(sc.calibration.radar_to_camera, chirp)
    for fr in sc.radar:
        (m,) = tr.measure(fr)
        truth = sc.truth.interpolate([fr.t])[0]
        # direction from exact phase differences; range limited by FFT resolution
        assert np.linalg.norm(m.P_E - truth) <= chirp.range_resolution + 1e-6


def test_if_binary_roundtrip(tmp_path):
    sc = generate(ScenarioConfig(duration=0.02, seed=1, raw_if=True))
    chirp = sc.config.chirp_config()
    path = tmp_path / "radar_if.bin"
    write_if_binary(path, sc.radar, chirp)
    fs, K, n, recs = read_if_binary(path)
    assert (fs, K, n) == (chirp.sample_rate, chirp.slope, chirp.samples_per_chirp)
    for fr in sc.radar:
        for j in range(len(fr.points)):
            assert np.allclose(recs[fr.t][j], fr.if_samples[j], atol=1e-6)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(SchemaError):
        read_if_binary(path)
