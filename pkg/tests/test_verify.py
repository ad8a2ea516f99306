import numpy as np
import pytest

from latte.verify import CHECKS, TOLERANCES, format_table, parse_tol_overrides, run_verify, write_report


@pytest.mark.parametrize("precision", ["f64", "f32"])
def test_every_check_passes(precision):
    results = run_verify(precision)
    assert [r.name for r in results] == list(CHECKS)
    failed = [(r.name, r.measured, r.note) for r in results if not r.passed]
    assert not failed


def test_fault_injection_trips_stabilization():
    results = {r.name: r for r in run_verify("f32", break_stabilization=True)}
    assert not results["stabilized_scan_finite"].passed
    assert results["unshifted_recursion_overflows"].passed
    assert results["unshifted_recursion_overflows"].measured > 0
    others = [n for n, r in results.items() if n != "stabilized_scan_finite" and not r.passed]
    assert not others


def test_tolerance_overrides():
    assert parse_tol_overrides("scan_vs_bruteforce=1e-3, stream_equals_scan_bitwise=0") == {
        "scan_vs_bruteforce": 1e-3, "stream_equals_scan_bitwise": 0.0}
    assert parse_tol_overrides("") == {}
    with pytest.raises(ValueError):
        parse_tol_overrides("no_such_check=1")
    with pytest.raises(ValueError):
        parse_tol_overrides("scan_vs_bruteforce")
    # an impossible tolerance makes the check fail rather than being ignored
    r = run_verify("f64", tol_overrides={"scan_vs_bruteforce": -1.0}, only={"scan_vs_bruteforce"})
    assert len(r) == 1 and not r[0].passed


def test_report_and_table(tmp_path):
    results = run_verify("f64", only={"softmax_row_stochastic", "stream_equals_scan_bitwise"})
    path = tmp_path / "r.csv"
    write_report(str(path), results, "d1g")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_digest=d1g"
    assert lines[1] == "check_name,status,measured,tolerance"
    assert len(lines) == 4
    assert format_table(results).endswith("2/2 checks passed")


def test_tolerance_table_covers_checks():
    assert set(TOLERANCES) == set(CHECKS)
    assert all(len(v) == 2 and all(np.isfinite(v)) for v in TOLERANCES.values())
