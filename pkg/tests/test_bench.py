"""Tests for the PCA baseline, external adapter and benchmark reporting."""

import csv
import json
import shlex
import sys
from dataclasses import replace

import numpy as np
import pytest

from vemreg.bench import (
    FAILURE_ERROR_DEG,
    METHODS,
    BenchRecord,
    _method_runner,
    evaluate_method,
    external_align,
    load_manifest,
    overlap_bin,
    pca_align,
    report,
    run_benchmark,
    write_records_csv,
    write_report_csv,
)
from vemreg.config import GlobalConfig
from vemreg.errors import DegenerateInputError, NotFoundError, ScanFormatError, ValidationError, VemregError
from vemreg.geometry import rotation_error_deg

IDENTITY_SCRIPT = """
import json, sys
paths = sys.stdin.read().split()
assert len(paths) == 2
print(json.dumps({"q": [1.0, 0.0, 0.0, 0.0], "t": [0.0, 0.0, 0.0]}))
"""

FAILING_SCRIPT = """
import sys
sys.stderr.write("no solution\\n")
sys.exit(3)
"""


def script_command(tmp_path, name, source):
    path = tmp_path / name
    path.write_text(source)
    return f"{shlex.quote(sys.executable)} {shlex.quote(str(path))}"


def record(method, overlap, error, seconds=1.0):
    return BenchRecord(f"pair_{overlap}", method, overlap, error, seconds)


class TestPcaAlign:
    """Tests for the weighted principal-axes baseline."""

    def test_recovers_rigid_motion(self, paraboloid_scan, paraboloid_motion):
        """The right sign pattern is picked by the metric."""
        moved = paraboloid_scan.transformed(paraboloid_motion)
        estimate = pca_align(paraboloid_scan, moved)
        assert rotation_error_deg(estimate, paraboloid_motion.inverse()) < 1e-3
        np.testing.assert_allclose(estimate.translation, paraboloid_motion.inverse().translation, atol=1e-4)

    def test_planar_scan_is_degenerate(self, plane_scan):
        """A flat wall has no third principal axis."""
        wall = plane_scan()
        with pytest.raises(DegenerateInputError) as exc:
            pca_align(wall, wall)
        assert exc.value.message == "degenerate principal axes"


class TestExternalAlign:
    """Tests for the external-binary adapter."""

    def test_parses_stdout(self, tmp_path):
        """Scan paths go in on stdin and the transform comes back as JSON."""
        command = script_command(tmp_path, "identity.py", IDENTITY_SCRIPT)
        T = external_align(tmp_path / "a.ply", tmp_path / "b.ply", command)
        np.testing.assert_array_equal(T.rotation, [1.0, 0.0, 0.0, 0.0])

    def test_nonzero_exit(self, tmp_path):
        """A failing binary reports its status."""
        command = script_command(tmp_path, "fail.py", FAILING_SCRIPT)
        with pytest.raises(VemregError) as exc:
            external_align(tmp_path / "a.ply", tmp_path / "b.ply", command)
        assert exc.value.error_type == "external_error"
        assert "no solution" in exc.value.details["stderr"]

    def test_requires_command(self, tmp_path):
        """No command configured is a validation error."""
        with pytest.raises(ValidationError):
            external_align(tmp_path / "a.ply", tmp_path / "b.ply", None)


class TestReport:
    """Tests for overlap binning and the success table."""

    @pytest.mark.parametrize(
        "overlap,expected",
        [(0.0, 0), (0.05, 0), (0.1, 1), (0.3, 3), (0.35, 3), (0.99, 9), (1.0, 9)],
    )
    def test_overlap_bin(self, overlap, expected):
        """Bins are 10 points wide and 100% falls in the top bin."""
        assert overlap_bin(overlap) == expected

    def test_rows_and_percentages(self):
        """Rows are sorted by method then bin with success in percent."""
        records = [
            record("vem-pso", 0.12, 2.0),
            record("vem-pso", 0.18, 45.0),
            record("vem-pso", 0.55, 1.0),
            record("pca", 0.12, 90.0),
            record("pca", 0.55, 3.0, seconds=3.0),
        ]
        table = report(records)
        keys = [(row.method, row.bin_low, row.bin_high) for row in table.rows]
        assert keys == [("pca", 10, 20), ("pca", 50, 60), ("vem-pso", 10, 20), ("vem-pso", 50, 60)]
        assert [row.n for row in table.rows] == [1, 1, 2, 1]
        assert [row.success_pct for row in table.rows] == [0.0, 100.0, 50.0, 100.0]
        assert table.overall_success["vem-pso"] == pytest.approx(200.0 / 3.0)
        assert table.mean_runtime["pca"] == pytest.approx(2.0)

    def test_empty_bin_for_one_method(self):
        """A bin one method never hit gets n = 0 and 0%."""
        table = report([record("a", 0.15, 1.0), record("b", 0.75, 1.0)])
        row = next(r for r in table.rows if r.method == "a" and r.bin_low == 70)
        assert row.n == 0
        assert row.success_pct == 0.0
        assert row.mean_time_s is None

    def test_rejects_empty(self):
        """A report needs records."""
        with pytest.raises(ValidationError):
            report([])

    def test_report_csv(self, tmp_path):
        """Deterministic runs write NA in place of timings."""
        table = report([record("pca", 0.42, 4.0), record("pca", 0.47, 40.0)])
        timed, fixed = tmp_path / "timed.csv", tmp_path / "fixed.csv"
        write_report_csv(table, timed)
        write_report_csv(table, fixed, deterministic=True)
        timed_rows = list(csv.reader(timed.open()))
        assert timed_rows[0] == ["method", "bin_low", "bin_high", "n", "success_pct", "mean_time_s", "successes"]
        assert timed_rows[1] == ["pca", "40", "50", "2", "50.0000", "1.0000", "1"]
        assert list(csv.reader(fixed.open()))[1][5] == "NA"

    def test_records_csv(self, tmp_path):
        """One row per trial with the success flag."""
        path = tmp_path / "records.csv"
        write_records_csv([record("pca", 0.42, 4.0)], path, deterministic=True)
        rows = list(csv.reader(path.open()))
        assert rows[1][:5] == ["pair_0.42", "pca", "0.42", "4.000000", "1"]
        assert rows[1][5] == "NA"

    def test_report_matches_recount_from_records(self, tmp_path):
        """n, successes and success_pct recount exactly from the records CSV."""
        rng = np.random.default_rng(11)
        records = [
            record(method, float(overlap), float(error))
            for method in ("pca", "vem-pso")
            for overlap, error in zip(rng.uniform(0.05, 0.95, 60), rng.uniform(0.0, 25.0, 60))
        ]
        records += [record("pca", 0.3, 9.99), record("vem-pso", 0.7, 10.0)]
        report_path, records_path = tmp_path / "report.csv", tmp_path / "records.csv"
        write_report_csv(report(records), report_path, deterministic=True)
        write_records_csv(records, records_path, deterministic=True)

        counts: dict[tuple[str, int], list[int]] = {}
        with records_path.open() as f:
            for row in csv.DictReader(f):
                key = (row["method"], 10 * min(int(float(row["overlap_ratio"]) * 10), 9))
                tally = counts.setdefault(key, [0, 0])
                tally[0] += 1
                tally[1] += row["success"] == "1"

        with report_path.open() as f:
            rows = list(csv.DictReader(f))
        assert sum(int(row["n"]) for row in rows) == len(records)
        for row in rows:
            n, successes = counts.get((row["method"], int(row["bin_low"])), [0, 0])
            assert int(row["n"]) == n
            assert int(row["successes"]) == successes
            assert row["success_pct"] == f"{100.0 * successes / n if n else 0.0:.4f}"


class TestRunBenchmark:
    """End-to-end harness runs on a saved pair."""

    def test_pca_and_failing_adapter(self, tmp_path, paraboloid_manifest):
        """Successful and failed methods both produce records."""
        cfg = GlobalConfig(jobs=1, external_command=script_command(tmp_path, "fail.py", FAILING_SCRIPT))
        records, table = run_benchmark(paraboloid_manifest, ["pca", "external-adapter"], cfg)
        by_method = {r.method: r for r in records}
        assert by_method["pca"].success
        assert by_method["pca"].rotation_error_deg < 1e-2
        assert by_method["external-adapter"].rotation_error_deg == FAILURE_ERROR_DEG
        assert "status 3" in by_method["external-adapter"].error
        assert table.overall_success == {"external-adapter": 0.0, "pca": 100.0}

    def test_unknown_method_checked_first(self, tmp_path):
        """Method names are validated before the manifest is read."""
        with pytest.raises(ValidationError) as exc:
            run_benchmark(tmp_path / "missing.json", ["icp"])
        assert exc.value.details["method"] == "icp"

    @pytest.mark.parametrize("method", METHODS)
    def test_advertised_methods_have_runners(self, method):
        """Every advertised method resolves to a runner."""
        assert callable(_method_runner(method, GlobalConfig(external_command="true")))


class TestEvaluateMethod:
    """Tests for running one method over a list of pairs."""

    def test_records_follow_pair_order(self, paraboloid_manifest):
        """A pair with a missing scan fails without stopping the others."""
        (spec,) = load_manifest(paraboloid_manifest)
        broken = replace(spec, pair_id="pair_0001", scan_2="missing.ply")
        records = evaluate_method("pca", [broken, spec], GlobalConfig(jobs=2), paraboloid_manifest.parent)
        assert [r.pair_id for r in records] == ["pair_0001", "pair_0000"]
        assert records[0].rotation_error_deg == FAILURE_ERROR_DEG
        assert "missing.ply" in records[0].error
        assert records[1].success


class TestLoadManifest:
    """Tests for manifest parsing."""

    def test_round_trip(self, paraboloid_manifest, paraboloid_motion):
        """Written manifests read back."""
        (spec,) = load_manifest(paraboloid_manifest)
        assert spec.pair_id == "pair_0000"
        assert rotation_error_deg(spec.gt_transform, paraboloid_motion.inverse()) < 1e-6

    def test_missing(self, tmp_path):
        """A missing manifest is not-found."""
        with pytest.raises(NotFoundError):
            load_manifest(tmp_path / "manifest.json")

    def test_not_a_list(self, tmp_path):
        """A manifest must be a JSON list."""
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"pairs": []}))
        with pytest.raises(ScanFormatError):
            load_manifest(path)
