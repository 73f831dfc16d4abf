import json

import numpy as np
import pytest

from mmeloc.errors import DroneOutOfView, InvalidConfig, SchemaError
from mmeloc.geometry import default_calibration
from mmeloc.radar import range_fft
from mmeloc.sim import (LABEL_DRONE, ScenarioConfig, _disk_crossings, generate, generate_trajectory,
                        hub_offsets, load_scenario, noiseless, save_scenario, synthesize_events,
                        synthesize_imu, synthesize_radar)


def test_hover_trajectory_is_constant():
    tr = generate_trajectory(ScenarioConfig(trajectory_kind="hover", hover_position=(0, 0, 5), seed=9))
    assert np.allclose(tr.position, [0, 0, 5]) and np.allclose(tr.velocity, 0)


def test_descent_monotone_and_ends_on_pad():
    cfg = ScenarioConfig(start_position=(0, 0, 8), pad_position=(0, 0, 0.1))
    tr = generate_trajectory(cfg)
    assert np.all(np.diff(tr.position[:, 2]) <= 0)
    assert np.linalg.norm(tr.position[-1] - [0, 0, 0.1]) <= 0.05
    assert np.all(np.diff(tr.t) > 0)
    assert np.allclose(np.diff(tr.t), 1000)  # 1 kHz


@pytest.mark.parametrize("kind", ["descent", "square_spiral", "hover"])
def test_velocity_acceleration_match_finite_differences(kind):
    tr = generate_trajectory(ScenarioConfig(trajectory_kind=kind))
    s = tr.t * 1e-6
    v_fd = np.gradient(tr.position, s, axis=0)
    a_fd = np.gradient(tr.velocity, s, axis=0)
    scale_v = max(np.abs(tr.velocity).max(), 1e-9)
    scale_a = max(np.abs(tr.acceleration).max(), 1e-9)
    inner = slice(1, -1)
    assert np.abs(v_fd[inner] - tr.velocity[inner]).max() <= 1e-3 * scale_v + 1e-12
    assert np.abs(a_fd[inner] - tr.acceleration[inner]).max() <= 1e-3 * scale_a + 1e-12


def test_same_seed_identical_outputs():
    a = generate(ScenarioConfig(seed=5, duration=0.3))
    b = generate(ScenarioConfig(seed=5, duration=0.3))
    for f in ("t", "x", "y", "p", "label"):
        assert np.array_equal(getattr(a.events, f), getattr(b.events, f))
    assert [fr.points for fr in a.radar] == [fr.points for fr in b.radar]
    assert np.array_equal(a.imu.acc, b.imu.acc)
    assert np.array_equal(a.truth.position, b.truth.position)


def test_events_sorted_and_in_bounds(short_scenario):
    ev = short_scenario.events
    K = short_scenario.calibration.intrinsics
    assert np.all(np.diff(ev.t) >= 0)
    assert ev.x.min() >= 0 and ev.x.max() < K.width
    assert ev.y.min() >= 0 and ev.y.max() < K.height
    assert set(np.unique(ev.p)) <= {-1, 1}


def test_hover_events_confined_to_disks():
    cfg = ScenarioConfig(trajectory_kind="hover", background_noise_rate=0, duration=0.2, seed=2)
    tr = generate_trajectory(cfg)
    K = default_calibration().intrinsics
    ev = synthesize_events(tr, cfg, K)
    assert np.all(ev.label == LABEL_DRONE)
    hubs = np.asarray(cfg.hover_position) + hub_offsets(cfg)
    c = np.column_stack([K.fx * hubs[:, 0] / hubs[:, 2] + K.cx, K.fy * hubs[:, 1] / hubs[:, 2] + K.cy])
    r = K.fx * cfg.propeller_radius / hubs[:, 2]
    d = np.hypot(ev.x[:, None] - c[None, :, 0], ev.y[:, None] - c[None, :, 1])
    # pixel centers within the disk radius plus rounding of the hub center
    assert np.all((d <= r[None, :] + 1.0).any(axis=1))
    owner = d.argmin(axis=1)
    assert set(owner.tolist()) == set(range(len(hubs)))


def test_hexacopter_has_six_disks():
    cfg = ScenarioConfig(trajectory_kind="hover", background_noise_rate=0, duration=0.1, drone_arm_count=6)
    assert len(hub_offsets(cfg)) == 6
    ev = synthesize_events(generate_trajectory(cfg), cfg)
    assert len(ev) > 0


def test_zero_propeller_rate_gives_no_drone_events():
    cfg = ScenarioConfig(propeller_rate=0, duration=0.2)
    ev = synthesize_events(generate_trajectory(cfg), cfg)
    assert not np.any(ev.label == LABEL_DRONE)


def test_drone_polarity_balanced_per_window(short_scenario):
    ev = short_scenario.events
    d = ev.label == LABEL_DRONE
    t, p = ev.t[d], ev.p[d]
    for t0 in range(0, int(t.max()) - 10_000, 10_000):
        m = (t >= t0) & (t < t0 + 10_000)
        frac = (p[m] > 0).mean()
        assert 0.4 <= frac <= 0.6, (t0, frac)


def test_background_unipolar(short_scenario):
    ev = short_scenario.events
    bg = ev.label != LABEL_DRONE
    assert (ev.p[bg] > 0).mean() >= 0.9


def test_disk_kernel_matches_brute_force():
    # with emit probability 1 the swept-wedge kernel must fire exactly the
    # pixels whose blade-arrival wait falls inside the step
    rng = np.random.default_rng(0)
    n = 40
    t0 = np.arange(n) * 1e-3
    uc = 300 + rng.uniform(-0.5, 0.5, n).cumsum()
    vc = 200 + rng.uniform(-0.5, 0.5, n).cumsum()
    r_px = np.full(n, 9.3)
    for omega_s in (2 * np.pi * 60, -2 * np.pi * 60):
        for blades in (2, 3):
            sector = 2 * np.pi / blades
            tc, px, py = _disk_crossings(uc, vc, r_px, t0, 11, omega_s, 0.7, sector, blades, 1e-3, 1.0, 1)
            got = set(zip(np.round(tc * 1e9).astype(np.int64).tolist(), px.astype(int).tolist(),
                          py.astype(int).tolist()))
            want = set()
            g = np.arange(-11, 12)
            gx, gy = np.meshgrid(g, g)
            for s in range(n):
                X, Y = np.rint(uc[s]) + gx.ravel(), np.rint(vc[s]) + gy.ravel()
                du, dv = X - uc[s], Y - vc[s]
                ins = du * du + dv * dv <= r_px[s] ** 2
                wait = np.mod(np.sign(omega_s) * (np.arctan2(dv, du) - (omega_s * t0[s] + 0.7)), sector) / abs(omega_s)
                hit = ins & (wait < 1e-3)
                want |= set(zip(np.round((t0[s] + wait[hit]) * 1e9).astype(np.int64).tolist(),
                                X[hit].astype(int).tolist(), Y[hit].astype(int).tolist()))
            assert got == want


def test_out_of_view_raises():
    cfg = ScenarioConfig(trajectory_kind="hover", hover_position=(20, 0, 2), duration=0.1)
    with pytest.raises(DroneOutOfView):
        synthesize_events(generate_trajectory(cfg), cfg)


def test_noiseless_boresight_radar():
    cal = default_calibration()
    # put the drone 5 m along the radar boresight, i.e. 5 m above the radar origin
    p = cal.radar_to_camera.translation + [0, 0, 5]
    cfg = noiseless(ScenarioConfig(trajectory_kind="hover", hover_position=tuple(p), duration=0.05))
    frames = synthesize_radar(generate_trajectory(cfg), cfg, cal.radar_to_camera)
    assert len(frames) == 11  # 200 Hz over 50 ms, both ends
    for fr in frames:
        assert len(fr.points) == 1
        pt = fr.points[0]
        assert pt.D == pytest.approx(5.0, abs=1e-12)
        assert pt.theta_x == pytest.approx(np.pi / 2) and pt.theta_y == pytest.approx(np.pi / 2)


def test_raw_if_tone_frequency():
    cal = default_calibration()
    p = cal.radar_to_camera.translation + [0, 0, 5]
    cfg = noiseless(ScenarioConfig(trajectory_kind="hover", hover_position=tuple(p), duration=0.01,
                                   raw_if=True, chirp={"slope": 3.0e13}))
    fr = synthesize_radar(generate_trajectory(cfg), cfg, cal.radar_to_camera)[0]
    chirp = cfg.chirp_config()
    f_if, D = range_fft(fr.if_samples[0, 0], chirp)
    # 2 K D / c with c rounded to 3e8 gives 1.0 MHz; the exact c shifts it by 0.07%
    assert f_if == pytest.approx(1.0e6, rel=2e-3)
    assert D == pytest.approx(5.0, abs=chirp.range_resolution / 2)


def test_ghost_rate_monte_carlo():
    cfg = ScenarioConfig(trajectory_kind="hover", duration=4.995, seed=11)  # 1000 frames
    frames = synthesize_radar(generate_trajectory(cfg), cfg)
    assert len(frames) == 1000
    ghosts = np.array([sum(p.label == "ghost" for p in fr.points) for fr in frames])
    assert ghosts.mean() == pytest.approx(3.0, abs=0.2)
    for fr in frames:
        for p in fr.points:
            assert p.D > 0 and np.cos(p.theta_x) ** 2 + np.cos(p.theta_y) ** 2 <= 1 + 1e-12


def test_imu_hover_and_bias():
    cfg = noiseless(ScenarioConfig(trajectory_kind="hover", duration=1.0))
    assert np.allclose(synthesize_imu(generate_trajectory(cfg), cfg).acc, 0)
    cfg = ScenarioConfig(trajectory_kind="hover", duration=4.995, imu_bias=(0.1, 0, 0), seed=4)
    imu = synthesize_imu(generate_trajectory(cfg), cfg)
    assert len(imu) == 1000
    assert np.allclose(imu.acc.mean(axis=0), [0.1, 0, 0], atol=0.005)


def test_imu_double_integration_matches_displacement():
    cfg = noiseless(ScenarioConfig(duration=1.0))
    tr = generate_trajectory(cfg)
    imu = synthesize_imu(tr, cfg)
    s = imu.t * 1e-6
    dt = np.diff(s)[:, None]
    v = np.vstack([tr.velocity[0], tr.velocity[0] + np.cumsum(0.5 * (imu.acc[1:] + imu.acc[:-1]) * dt, axis=0)])
    p = tr.position[0] + np.sum(0.5 * (v[1:] + v[:-1]) * dt, axis=0)
    assert np.linalg.norm(p - tr.interpolate([imu.t[-1]])[0]) <= 1e-3


def test_config_validation_and_roundtrip():
    for bad in (dict(duration=0), dict(drone_arm_count=5), dict(trajectory_kind="loop")):
        with pytest.raises(InvalidConfig):
            ScenarioConfig(**bad).validate()
    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_dict({"seed": 1, "warp_speed": 9})
    cfg = ScenarioConfig(seed=8, spiral_radius=(1.0, 0.5))
    assert ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()


def test_files_roundtrip(tmp_path):
    sc = generate(ScenarioConfig(seed=6, duration=0.2))
    save_scenario(sc, tmp_path)
    for name in ("events.csv", "radar.csv", "imu.csv", "truth.csv", "scenario.json"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "events.csv").read_text().splitlines()[0] == "t_us,x,y,polarity,label"
    assert (tmp_path / "radar.csv").read_text().splitlines()[0] == "t_us,point_idx,D_m,theta_x_rad,theta_y_rad,label"
    assert (tmp_path / "imu.csv").read_text().splitlines()[0] == "t_us,ax,ay,az"
    assert (tmp_path / "truth.csv").read_text().splitlines()[0] == "t_us,px,py,pz,vx,vy,vz"
    back = load_scenario(tmp_path)
    assert np.array_equal(back.events.t, sc.events.t) and np.array_equal(back.events.label, sc.events.label)
    assert [fr.points for fr in back.radar] == [fr.points for fr in sc.radar]
    assert np.array_equal(back.imu.acc, sc.imu.acc)
    assert np.array_equal(back.truth.position, sc.truth.position)
    assert back.config.seed == 6


def test_missing_file_is_schema_error(tmp_path):
    save_scenario(generate(ScenarioConfig(seed=6, duration=0.1)), tmp_path)
    (tmp_path / "radar.csv").unlink()
    with pytest.raises(SchemaError) as ei:
        load_scenario(tmp_path)
    assert ei.value.path.endswith("radar.csv")
