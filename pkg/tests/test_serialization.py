"""Round-trip and determinism tests for the on-disk artifact formats."""

import json
import math

import numpy as np
import pytest

from flowlab.flows import gaussian_density, heat_flow, schrodinger_bridge
from flowlab.functionals import assemble_series
from flowlab.grid import Grid
from flowlab.report import CheckReport
from flowlab.serialization import (
    SerializationError,
    load_trajectory,
    read_field,
    read_reports,
    read_series_csv,
    save_trajectory,
    write_field,
    write_reports,
    write_series_csv,
)

GRID = Grid((14.0,), (128,))


@pytest.fixture(scope="module")
def heat_traj():
    return heat_flow(gaussian_density(GRID, 7.0, 1.1), 1.0, 0.5, 17)


@pytest.fixture(scope="module")
def heat_series(heat_traj):
    return assemble_series(heat_traj)


@pytest.fixture(scope="module")
def plane_series():
    grid = Grid((12.0, 12.0), (32, 32))
    rho0 = gaussian_density(grid, (5.0, 7.0), (0.9, 1.3))
    return assemble_series(heat_flow(rho0, 1.0, 0.3, 9))


class TestFieldFiles:
    @pytest.mark.parametrize("shape", [(64,), (12, 9), (6, 5, 4)])
    def test_round_trip_bit_exact(self, tmp_path, shape):
        rng = np.random.default_rng(3)
        values = rng.standard_normal(shape)
        path = tmp_path / "snap.field"
        write_field(path, values)
        back = read_field(path)
        assert back.shape == shape
        assert back.dtype == np.float64
        assert np.array_equal(back, values)

    def test_rewrite_is_byte_identical(self, tmp_path):
        values = np.random.default_rng(5).standard_normal((33, 7))
        a, b = tmp_path / "a.field", tmp_path / "b.field"
        write_field(a, values)
        write_field(b, read_field(a))
        assert a.read_bytes() == b.read_bytes()

    def test_header_is_sixteen_bytes(self, tmp_path):
        path = tmp_path / "one.field"
        write_field(path, np.arange(10.0))
        assert path.stat().st_size == 16 + 8 * 10

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.field"
        write_field(path, np.arange(4.0))
        raw = bytearray(path.read_bytes())
        raw[:2] = b"XX"
        path.write_bytes(bytes(raw))
        with pytest.raises(SerializationError, match="magic"):
            read_field(path)

    def test_rejects_truncated_payload(self, tmp_path):
        path = tmp_path / "short.field"
        write_field(path, np.arange(8.0))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(SerializationError, match="payload"):
            read_field(path)

    def test_rejects_high_rank_input(self, tmp_path):
        with pytest.raises(SerializationError, match="1-3"):
            write_field(tmp_path / "r4.field", np.zeros((2, 2, 2, 2)))

    def test_rejects_inconsistent_axis_sizes(self, tmp_path):
        path = tmp_path / "axes.field"
        write_field(path, np.zeros((3, 4)))
        raw = bytearray(path.read_bytes())
        raw[12:16] = (9).to_bytes(4, "little")  # dim=2 but N_3 nonzero
        path.write_bytes(bytes(raw))
        with pytest.raises(SerializationError, match="axis sizes"):
            read_field(path)


class TestTrajectoryDirectories:
    def test_round_trip_bit_exact(self, tmp_path, heat_traj):
        save_trajectory(heat_traj, tmp_path / "run")
        back = load_trajectory(tmp_path / "run")
        assert np.array_equal(back.times, heat_traj.times)
        assert np.array_equal(back.density_stack(), heat_traj.density_stack())
        assert np.array_equal(back.phase_stack(), heat_traj.phase_stack())
        assert back.family == heat_traj.family
        assert back.truncated is None
        assert back.grid == heat_traj.grid
        assert np.array_equal(back.drift, heat_traj.drift)
        assert back.coefficients.descriptor() == heat_traj.coefficients.descriptor()
        assert back.stamps == heat_traj.stamps

    def test_resave_is_byte_identical(self, tmp_path, heat_traj):
        first = save_trajectory(heat_traj, tmp_path / "one")
        second = save_trajectory(load_trajectory(first), tmp_path / "two")
        names = sorted(p.name for p in first.iterdir())
        assert names == sorted(p.name for p in second.iterdir())
        for name in names:
            assert (first / name).read_bytes() == (second / name).read_bytes(), name

    def test_loaded_trajectory_reproduces_functionals(self, tmp_path, heat_traj):
        save_trajectory(heat_traj, tmp_path / "run")
        original = assemble_series(heat_traj)
        reloaded = assemble_series(load_trajectory(tmp_path / "run"))
        assert np.array_equal(reloaded.entropy, original.entropy)
        assert np.array_equal(reloaded.t_plus, original.t_plus)

    def test_bridge_boundary_record_survives(self, tmp_path):
        traj = schrodinger_bridge(
            gaussian_density(GRID, 6.0, 0.8), gaussian_density(GRID, 8.0, 1.0),
            1.0, 1.0, 9)
        save_trajectory(traj, tmp_path / "bridge")
        back = load_trajectory(tmp_path / "bridge")
        assert back.boundary == traj.boundary
        assert back.diagnostics.keys() == traj.diagnostics.keys()

    def test_rejects_foreign_metadata(self, tmp_path):
        run = tmp_path / "junk"
        run.mkdir()
        (run / "metadata.json").write_text(json.dumps({"kind": "picnic"}))
        with pytest.raises(SerializationError, match="trajectory"):
            load_trajectory(run)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(SerializationError, match="missing"):
            load_trajectory(tmp_path / "nowhere")


class TestSeriesCsv:
    def test_header_layout(self, tmp_path, heat_series):
        path = tmp_path / "series.csv"
        write_series_csv(path, heat_series)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# functional-series schema=1 dim=1")
        assert lines[1] == "t,E,O,S_00,I_00,Tplus_00,Tminus_00,Emat_00"
        assert len(lines) == 2 + heat_series.samples

    def test_round_trip_exact(self, tmp_path, heat_series):
        path = tmp_path / "series.csv"
        write_series_csv(path, heat_series)
        table = read_series_csv(path)
        assert table["dim"] == 1
        assert table["sigma"] == heat_series.sigma
        assert np.array_equal(table["times"], heat_series.times)
        assert np.array_equal(table["entropy"], heat_series.entropy)
        assert np.array_equal(table["energy"], heat_series.energy)
        assert np.array_equal(table["matrices"]["S"], heat_series.production)
        assert np.array_equal(table["matrices"]["I"], heat_series.fisher)
        assert np.array_equal(table["matrices"]["Tplus"], heat_series.t_plus)
        assert np.array_equal(table["matrices"]["Tminus"], heat_series.t_minus)
        assert np.array_equal(table["matrices"]["Emat"],
                              heat_series.matrix_energy_path())

    def test_two_dimensional_upper_triangle(self, tmp_path, plane_series):
        path = tmp_path / "plane.csv"
        write_series_csv(path, plane_series)
        header = path.read_text().splitlines()[1]
        assert header.split(",")[:3] == ["t", "E", "O"]
        assert ",S_00,S_01,S_11," in header
        table = read_series_csv(path)
        back = table["matrices"]["Tplus"]
        assert np.array_equal(back, np.swapaxes(back, 1, 2))
        assert np.array_equal(back, plane_series.t_plus)

    def test_rewrite_is_byte_identical(self, tmp_path, heat_series):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_series_csv(a, heat_series)
        write_series_csv(b, heat_series)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_missing_preamble(self, tmp_path):
        path = tmp_path / "bare.csv"
        path.write_text("t,E,O\n0.0,1.0,2.0\n")
        with pytest.raises(SerializationError, match="preamble"):
            read_series_csv(path)

    def test_rejects_header_dim_mismatch(self, tmp_path, heat_series):
        path = tmp_path / "series.csv"
        write_series_csv(path, heat_series)
        lines = path.read_text().splitlines()
        lines[0] = lines[0].replace("dim=1", "dim=2")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SerializationError, match="header"):
            read_series_csv(path)

    def test_rejects_ragged_row(self, tmp_path, heat_series):
        path = tmp_path / "series.csv"
        write_series_csv(path, heat_series)
        path.write_text(path.read_text() + "0.1,0.2\n")
        with pytest.raises(SerializationError, match="fields"):
            read_series_csv(path)


class TestReportFiles:
    def _reports(self):
        passing = CheckReport.evaluate(
            "demo_pass", worst_margin=0.25, tolerance=1e-6, hypotheses_ok=True,
            hypotheses={"stamped": True}, witness={"time": 0.5},
            metrics={"directions": 9})
        failing = CheckReport.evaluate(
            "demo_fail", worst_margin=-math.inf, tolerance=1e-6,
            hypotheses_ok=True, hypotheses={}, witness={"check": "pole"},
            notes=["eigenvalue reached the comparison pole"])
        refused = CheckReport.evaluate(
            "demo_refused", worst_margin=math.nan, tolerance=1e-6,
            hypotheses_ok=False, hypotheses={"resolved": False},
            notes=["refused: under-resolved input"])
        return [passing, failing, refused]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "reports.json"
        reports = self._reports()
        write_reports(path, reports)
        back = read_reports(path)
        assert [r.name for r in back] == ["demo_pass", "demo_fail", "demo_refused"]
        assert back[0].passed and not back[1].passed and not back[2].passed
        assert back[1].worst_margin == -math.inf
        assert math.isnan(back[2].worst_margin)
        assert back[2].hypotheses_ok is False
        assert [r.to_dict() for r in back] == [r.to_dict() for r in reports]

    def test_rewrite_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        write_reports(a, self._reports())
        write_reports(b, read_reports(a))
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_non_array(self, tmp_path):
        path = tmp_path / "obj.json"
        path.write_text("{}")
        with pytest.raises(SerializationError, match="array"):
            read_reports(path)
