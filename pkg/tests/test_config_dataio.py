import math

import numpy as np
import pytest

from plnav.config import ConfigError, dump_scenario, load_config, parse_config, with_seed
from plnav.dataio import (
    DATA_FILES,
    IMU_HEADER,
    DataFormatError,
    load_dataset,
    read_fgo,
    read_ls,
    write_dataset,
    write_fgo,
    write_ls,
)
from plnav.pipeline import solve_ls_epochs
from plnav.sim import Circle, FigureEight, ScenarioConfig, default_paper_scenarios


# ---------------------------------------------------------------- config


def test_empty_config_gives_defaults():
    scen, solver = parse_config("")
    assert scen.duration == 80.0 and isinstance(scen.trajectory, Circle)
    assert len(scen.satellites) == 4 and scen.pseudolites == ()
    assert solver.fixed_sigma_p is None


def test_example_config():
    text = """
scenario:
  name: GPS+2PL
  seed: 3
  trajectory: {type: figure_eight, scale: 50.0, period: 60.0}
  pseudolites: [PL01, PL02]
  imu_noise: {gyro_noise_density: 1.0e-4}
solver:
  fixed_sigma_p: 2.0
  optimizer: {max_iterations: 30}
"""
    scen, solver = parse_config(text)
    assert scen.seed == 3 and scen.trajectory == FigureEight(50.0, 60.0)
    assert [p.id for p in scen.pseudolites] == ["PL01", "PL02"]
    assert scen.noise.gyro_noise_density == 1e-4 and scen.noise.sample_rate == 200.0
    assert solver.fixed_sigma_p == 2.0 and solver.optimizer.max_iterations == 30


@pytest.mark.parametrize("text, field", [
    ("scenario: {durations: 5}", "scenario.durations"),
    ("scenario: {duration: 0}", "scenario.duration"),
    ("scenario: {duration: -1}", "scenario.duration"),
    ("scenario: {seed: -2}", "scenario.seed"),
    ("scenario: {seed: 1.5}", "scenario.seed"),
    ("scenario: {pr_sigma: abc}", "scenario.pr_sigma"),
    ("scenario: {trajectory: {type: spiral}}", "scenario.trajectory.type"),
    ("scenario: {trajectory: {type: circle, period: 3}}", "scenario.trajectory.period"),
    ("scenario: {pseudolites: [PL09]}", "scenario.pseudolites[0]"),
    ("scenario: {pseudolites: [{id: X, enu: [1, 2]}]}", "scenario.pseudolites[0].enu"),
    ("scenario: {satellites: [{id: G1, azimuth: 0.1}]}", "scenario.satellites[0]"),
    ("scenario: {imu_noise: {gyro_noise_density: 0}}", "scenario.imu_noise"),
    ("scenario: {add_noise: 1}", "scenario.add_noise"),
    ("solver: {fixed_sigma_p: -1}", "solver.fixed_sigma_p"),
    ("solver: {optimizer: {max_iterations: 0}}", "solver.optimizer.max_iterations"),
    ("solver: {optimizer: {damping: 1}}", "solver.optimizer.damping"),
    ("solver: {prior: {bogus: 1}}", "solver.prior.bogus"),
    ("other: {}", "other"),
    ("scenario: [1, 2]", "scenario"),
    ("scenario: {duration: .nan}", "scenario.duration"),
])
def test_invalid_entries_name_their_field(text, field):
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert e.value.field == field


def test_malformed_yaml():
    with pytest.raises(ConfigError) as e:
        parse_config("scenario: {duration: [")
    assert e.value.field == "config"


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    assert load_config(None)[0] == ScenarioConfig(satellites=default_paper_scenarios()[0].satellites)


def test_dump_round_trip():
    for cfg in default_paper_scenarios(seed=5):
        text = dump_scenario(cfg)
        back, _ = parse_config(text)
        assert back == cfg
        assert dump_scenario(back) == text


def test_dump_round_trip_custom():
    cfg = ScenarioConfig(name="x", seed=9, trajectory=FigureEight(33.3, 47.0), pr_sigma=0.1 + 0.2,
                         elevation_mask=math.radians(7.3), satellites=default_paper_scenarios()[0].satellites)
    assert parse_config(dump_scenario(cfg))[0] == cfg


def test_with_seed():
    cfg = default_paper_scenarios()[2]
    assert with_seed(cfg, 42).seed == 42 and with_seed(cfg, 42).pseudolites == cfg.pseudolites


# ---------------------------------------------------------------- dataset files


@pytest.fixture(scope="module")
def written(tmp_path_factory, noisy_datasets):
    ds = noisy_datasets["GPS+PL01"]
    out = tmp_path_factory.mktemp("ds")
    paths = write_dataset(ds, out)
    return ds, out, paths


def test_dataset_files_and_headers(written):
    _, out, paths = written
    assert {p.name for p in paths} == set(DATA_FILES) | {"scenario.yaml"}
    assert (out / "imu.csv").read_text().splitlines()[0] == ",".join(IMU_HEADER)
    assert len((out / "imu.csv").read_text().splitlines()) == 1 + 16000
    assert (out / "rover_obs.csv").read_text().splitlines()[0] == "epoch,tx_id,kind,range,sigma"
    assert (out / "truth.csv").read_text().splitlines()[0] == "t,x,y,z,vx,vy,vz,qw,qx,qy,qz"
    assert (out / "transmitters.csv").read_text().splitlines()[0] == "epoch,tx_id,kind,x,y,z,clock"


def test_dataset_round_trip_is_lossless(written):
    ds, out, _ = written
    back = load_dataset(out)
    assert back.config == ds.config
    assert np.array_equal(back.imu.t, ds.imu.t)
    assert np.array_equal(back.imu.gyro, ds.imu.gyro) and np.array_equal(back.imu.accel, ds.imu.accel)
    assert np.array_equal(back.epochs, ds.epochs)
    assert back.rover_obs == ds.rover_obs and back.base_obs == ds.base_obs
    for a, b in zip(back.transmitters, ds.transmitters):
        assert [t.id for t in a] == [t.id for t in b]
        assert all(np.array_equal(x.position, y.position) for x, y in zip(a, b))
    assert np.array_equal(back.truth.position, ds.truth.position)
    assert np.abs(back.truth.rotation - ds.truth.rotation).max() < 1e-15


def test_loaded_dataset_solves_identically(written):
    ds, out, _ = written
    a = solve_ls_epochs(ds)
    b = solve_ls_epochs(load_dataset(out))
    assert all(np.array_equal(x.position, y.position) for x, y in zip(a, b))


def test_missing_or_bad_files(tmp_path, written):
    _, out, _ = written
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path)
    bad = tmp_path / "bad"
    bad.mkdir()
    for name in ("scenario.yaml",) + DATA_FILES:
        (bad / name).write_text((out / name).read_text())
    (bad / "imu.csv").write_text("t,wx,wy\n1,2,3\n")
    with pytest.raises(DataFormatError) as e:
        load_dataset(bad)
    assert "imu.csv" in e.value.path
    (bad / "imu.csv").write_text((out / "imu.csv").read_text().replace("\n1,", "\nx,", 1))
    with pytest.raises(DataFormatError):
        load_dataset(bad)
    (bad / "imu.csv").write_text((out / "imu.csv").read_text())
    (bad / "truth.csv").unlink()
    assert load_dataset(bad).truth is None
    with pytest.raises(DataFormatError):
        load_dataset(bad, require_truth=True)


def test_ls_csv_round_trip(tmp_path, noisy_datasets):
    sols = solve_ls_epochs(noisy_datasets["GPS"])
    write_ls(tmp_path / "ls.csv", sols)
    back = read_ls(tmp_path / "ls.csv")
    for a, b in zip(sols, back):
        assert a.epoch == b.epoch and np.array_equal(a.position, b.position) and a.clock == b.clock
        assert np.array_equal(a.covariance, b.covariance) and a.dop == b.dop
        assert (a.converged, a.iterations, a.n_obs) == (b.converged, b.iterations, b.n_obs)


def test_fgo_csv_round_trip(tmp_path, clean_datasets):
    states = clean_datasets["GPS"].truth.states()[::400]
    write_fgo(tmp_path / "fgo.csv", states)
    back = read_fgo(tmp_path / "fgo.csv")
    assert len(back) == len(states)
    for a, b in zip(states, back):
        assert np.array_equal(a.position, b.position) and np.array_equal(a.velocity, b.velocity)
        assert np.abs(a.rotation - b.rotation).max() < 1e-14
        assert a.epoch == b.epoch
