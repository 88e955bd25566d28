from __future__ import annotations

import itertools

import numpy as np
import pytest

from mrs_microstack.scenario import load_scenario, parse_scenario, resolve_scenario_path
from mrs_microstack.sim import log_columns, run

HEADON = resolve_scenario_path("two_uav_headon").read_text()


def short_headon(duration: float = 6.0) -> str:
    return HEADON.replace("duration: 45.0", f"duration: {duration}")


def read_log(path):
    lines = path.read_text().splitlines()
    header = lines[1].split(",")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:]])
    return lines[0], header, rows


@pytest.fixture(scope="module")
def headon_runs(tmp_path_factory):
    out = {}
    for enabled in (True, False):
        text = HEADON if enabled else HEADON.replace("enabled: true", "enabled: false")
        d = tmp_path_factory.mktemp(f"headon_{enabled}")
        out[enabled] = (run(parse_scenario(text, "two_uav_headon"), d), d)
    return out


def test_runs_are_byte_identical(tmp_path):
    sc = parse_scenario(short_headon(), "short")
    run(sc, tmp_path / "a")
    run(sc, tmp_path / "b")
    for name in ("uav1.csv", "uav2.csv", "report.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_the_run(tmp_path):
    a = run(parse_scenario(short_headon(), "a"), tmp_path / "a")
    b = run(parse_scenario(short_headon().replace("seed: 7", "seed: 8"), "b"), tmp_path / "b")
    assert a.uavs[0].estimate_rmse != b.uavs[0].estimate_rmse


def test_log_schema(tmp_path):
    sc = parse_scenario(short_headon(2.0), "schema")
    rep = run(sc, tmp_path)
    comment, header, rows = read_log(tmp_path / "uav1.csv")
    assert comment.startswith("# mrs_microstack uav log v")
    assert header == log_columns(4)
    assert rows.shape == (rep.ticks, len(header))
    assert np.array_equal(rows[:, 0], np.arange(rep.ticks))
    assert np.allclose(rows[:, 1], 0.01 * np.arange(rep.ticks))
    assert np.allclose(np.linalg.norm(rows[:, 5:9], axis=1), 1.0)


def test_report_matches_logs(headon_runs):
    for rep, d in headon_runs.values():
        pos = [read_log(d / f"uav{u.uav_id}.csv")[2][:, 2:5] for u in rep.uavs]
        post_hoc = min(np.linalg.norm(a - b, axis=1).min() for a, b in itertools.combinations(pos, 2))
        assert rep.min_separation == pytest.approx(post_hoc, abs=1e-9)
        assert rep.counts_consistent()
        assert (d / "report.txt").read_text() == rep.to_text()


def test_headon_avoidance(headon_runs):
    r_min = load_scenario("two_uav_headon").avoidance.r_min
    on, _ = headon_runs[True]
    off, _ = headon_runs[False]
    assert on.min_separation >= r_min
    assert off.min_separation < r_min
    assert all(u.mission_status == "DONE" for u in on.uavs)
    assert all(e <= 0.5 for u in on.uavs for e in u.waypoint_errors)


def test_flocking_scenario_short(tmp_path):
    text = resolve_scenario_path("flocking_five").read_text().replace("duration: 30.0", "duration: 5.0")
    rep = run(parse_scenario(text, "flock"), tmp_path)
    assert rep.min_separation >= 1.5
    assert all(u.mission_status == "FLOCKING" for u in rep.uavs)
    assert all(u.estimate_rmse < 0.5 for u in rep.uavs)
