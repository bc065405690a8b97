import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from ssmpc import bench
from ssmpc import plant as pl


# -- reference ----------------------------------------------------------------------

def test_zero_amplitude_reference_is_constant():
    eq = pl.equilibrium_observable(pl.PlantConfig())
    ref = bench.make_reference(bench.ReferenceSpec(resp_amplitude=0.0, card_amplitude=0.0), eq)
    assert np.all(ref.observables == eq)
    assert len(ref) == int(round(16.0 / 0.02)) + 1


def test_reference_is_periodic_in_the_respiratory_period():
    spec = bench.ReferenceSpec(card_amplitude=0.0)
    t = np.linspace(0, 8, 57)
    assert np.allclose(spec.offset(t + 1 / spec.resp_frequency), spec.offset(t), atol=1e-15)


def test_reference_peak_to_peak_along_direction():
    spec = bench.ReferenceSpec(card_amplitude=0.0, resp_phase=0.3)
    ref = bench.make_reference(spec, np.zeros(3), dt=0.01)
    p = ref.observables[:, :3]
    d = np.array(spec.resp_direction)
    s = p @ d
    assert s.max() - s.min() == pytest.approx(2 * spec.resp_amplitude, rel=1e-4)
    assert np.allclose(p - np.outer(s, d), 0, atol=1e-15)
    # both tracked points move together
    assert np.array_equal(ref.observables[:, 3:], p)


def test_reference_spec_validation():
    assert np.linalg.norm(bench.ReferenceSpec().card_direction) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        bench.ReferenceSpec(resp_frequency=0.0)
    with pytest.raises(ValueError):
        bench.ReferenceSpec(card_amplitude=-1e-3)
    with pytest.raises(ValueError):
        bench.make_reference(bench.ReferenceSpec(), np.zeros(4))


# -- configuration -------------------------------------------------------------------

def test_flat_config_parsing(tmp_path):
    cfg = bench.config_from_flat({"seed": 3, "plant.joint_stiffness": [0.06, 0.05], "mpc.horizon": 20,
                                  "reference.duration": 4.0, "train.decay_count": 6})
    assert cfg.seed == 3 and cfg.plant.joint_stiffness == (0.06, 0.05)
    assert cfg.mpc_config().horizon == 20 and cfg.reference.duration == 4.0 and cfg.train.decay_count == 6
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"mpc.horizon": 20}))
    assert bench.load_config(path).mpc_config().horizon == 20
    for bad in ({"plant.bogus": 1}, {"nosection": 1}, {"solver.x": 1}):
        with pytest.raises(ValueError):
            bench.config_from_flat(bad)


def test_digest_tracks_config_changes():
    a = bench.BenchConfig()
    assert a.digest() == bench.BenchConfig().digest()
    assert a.digest() != a.replace(seed=1).digest()


# -- the benchmark -------------------------------------------------------------------

def test_report_structure(bench_report):
    assert set(bench_report.controllers) == set(bench.CONTROLLERS)
    assert set(bench_report.open_loop) == set(bench.CONTROLLERS)
    for entry in bench_report.controllers.values():
        assert entry["mean_error_mm"] >= 0 and entry["max_error_mm"] >= entry["mean_error_mm"]
        assert entry["completed"]


def test_controllers_share_one_config(bench_report):
    digests = {e["config_digest"] for e in bench_report.controllers.values()}
    assert digests == {bench_report.config_digest}


def test_koopman_is_worse_on_heldout_decays(bench_report):
    ol = bench_report.open_loop
    assert ol["LK-MPC"]["decay_nrmse_mean"] > ol["SSM-MPC"]["decay_nrmse_mean"]


def test_export_and_reload(tmp_path, bench_report):
    files = bench.export_report(bench_report, tmp_path)
    assert bench.load_report(tmp_path) == bench_report
    for name in bench.CONTROLLERS:
        rows = (tmp_path / f"{bench._slug(name)}.csv").read_text().splitlines()
        assert len(rows) == int(round(16.0 / 0.02)) + 1 + 1  # header
    svg = tmp_path / "tracking_error.svg"
    assert svg in files
    assert ET.parse(svg).getroot().tag.endswith("svg")


def test_export_reports_path_on_failure(tmp_path, bench_report):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        bench.export_report(bench_report, blocker / "sub", plot=False)


def _strip_timing(path):
    return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def repeat_report(bench_cfg):
    return bench.run_benchmark(bench_cfg, open_loop=False)


def test_benchmark_is_deterministic(tmp_path, bench_report, repeat_report):
    again = repeat_report
    bench.export_report(bench_report, tmp_path / "a", plot=False)
    bench.export_report(again, tmp_path / "b", plot=False)
    for name in bench.CONTROLLERS:
        f = f"{bench._slug(name)}.csv"
        assert _strip_timing(tmp_path / "a" / f) == _strip_timing(tmp_path / "b" / f)


def test_design_agnostic_reports_are_deterministic(design_reports, repeat_report):
    a, b = design_reports
    assert set(a.controllers) == set(b.controllers) == {"SSM-MPC", "SSM-MPC cross"}
    assert a.plant_tag != b.plant_tag
    # variant A's matched run uses the same model and plant as the three-way benchmark
    assert a.mean_error("SSM-MPC") == repeat_report.mean_error("SSM-MPC")
