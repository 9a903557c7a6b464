"""Scenario handling, plant/measurement generation, end-to-end runs, export.

The runs here stay tiny (n=2, K<=3) so the suite stays fast; the full desk
scenario is exercised by the acceptance tests.
"""

import csv
import math
import random

import numpy as np
import pytest

from zonocrypt import phe, protocol, sets, sim


CONTAIN_EPS = 1e-9 + 2.0 ** -44


def unit_rows(m, n, seed):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(m, n))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def tiny_scenario(variant="p1-zono", m=3, K=3, groups=None, **kw):
    H = unit_rows(m, 2, seed=404)
    sensors = [(H[i:i + 1], np.array([0.1])) for i in range(m)]
    args = dict(
        model=sets.SystemModel(np.eye(2), 0.01 * np.eye(2)),
        sensors=sensors, groups=groups, horizon=K,
        initial_center=np.zeros(2), initial_half_widths=np.array([2.0, 2.0]),
        key_bits=512, frac_bits=48, variant=variant, swap=False,
        refresh=True, seed=5, q=5, max_constraints=None,
    )
    args.update(kw)
    return sim.Scenario(**args)


@pytest.fixture(scope="module")
def run_keys(keypair):
    return keypair


# --- scenario plumbing ---


def test_default_scenario_golden():
    sc = sim.default_scenario()
    assert sc.n == 3 and sc.m == 8 and sc.horizon == 100
    assert sc.variant == "p1-zono" and sc.refresh and not sc.swap
    assert sc.key_bits == 512 and sc.frac_bits == 48 and sc.q == 5
    assert sc.groups == [[0, 1, 2, 3], [4, 5, 6, 7]]
    np.testing.assert_array_equal(sc.model.F, np.eye(3))
    np.testing.assert_array_equal(sc.model.Q, 0.01 * np.eye(3))
    np.testing.assert_array_equal(sc.initial_half_widths, [4.0, 4.0, 4.0])
    for H, R in sc.sensors:
        assert H.shape == (1, 3) and R.shape == (1,)
        assert math.isclose(np.linalg.norm(H), 1.0, rel_tol=1e-9)
        assert R[0] == 0.1
    _, errors = sim.validate_scenario(sim.scenario_to_dict(sc))
    assert errors == []


def test_validate_missing_field():
    d = sim.scenario_to_dict(sim.default_scenario())
    del d["model"]["F"]
    sc, errors = sim.validate_scenario(d)
    assert sc is None
    assert any("model.F" in e for e in errors)


def test_validate_collects_all_errors():
    d = sim.scenario_to_dict(sim.default_scenario())
    d["horizon"] = -1
    d["variant"] = "p9-magic"
    d["sensors"][2]["R"] = [-0.1]
    d["frac_bits"] = 200
    sc, errors = sim.validate_scenario(d)
    assert sc is None and len(errors) >= 4
    joined = "\n".join(errors)
    for path in ("horizon", "variant", "sensors[2].R", "frac_bits"):
        assert path in joined


def test_validate_group_partition():
    d = sim.scenario_to_dict(sim.default_scenario())
    d["variant"] = "p2-zono"
    d["groups"] = [[0, 1, 2], [4, 5, 6, 7]]  # sensor 3 unassigned
    _, errors = sim.validate_scenario(d)
    assert any("groups" in e and "3" in e for e in errors)
    d["groups"] = [[0, 1, 2, 3, 3], [4, 5, 6, 7]]
    _, errors = sim.validate_scenario(d)
    assert any("groups" in e for e in errors)


def test_validate_swap_needs_p1_zono():
    d = sim.scenario_to_dict(sim.default_scenario())
    d["variant"] = "p1-cons"
    d["swap"] = True
    _, errors = sim.validate_scenario(d)
    assert any("swap" in e for e in errors)


def test_scenario_dict_roundtrip():
    sc = tiny_scenario()
    sc2, errors = sim.validate_scenario(sim.scenario_to_dict(sc))
    assert errors == []
    np.testing.assert_array_equal(sc2.sensors[1][0], sc.sensors[1][0])
    assert sc2.horizon == sc.horizon and sc2.variant == sc.variant


# --- plant and measurements ---


def test_plant_step_closed_forms():
    rng = np.random.default_rng(0)
    still = sets.SystemModel(np.eye(3), np.zeros((3, 3)))
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(sim.plant_step(x, still, rng), x)
    decay = sets.SystemModel(0.9 * np.eye(3), np.zeros((3, 3)))
    np.testing.assert_allclose(sim.plant_step(np.ones(3), decay, rng),
                               0.9 * np.ones(3))


def test_plant_noise_stays_in_bound():
    model = sets.SystemModel(np.eye(3), 0.01 * np.eye(3))
    rng = np.random.default_rng(7)
    x = np.zeros(3)
    for _ in range(10_000):
        nxt = sim.plant_step(x, model, rng)
        assert np.all(np.abs(nxt - x) <= 0.01 + 1e-12)


def test_measure_strip_contains_state():
    H = unit_rows(1, 3, seed=3)
    R = np.array([0.1])
    rng = np.random.default_rng(8)
    x = np.array([0.3, -0.5, 0.2])
    for _ in range(1000):
        y = sim.measure(x, H, R, rng)
        assert np.all(np.abs(H @ x - y) <= R + 1e-15)
    y0 = sim.measure(x, H, np.array([1e-15]), rng)
    np.testing.assert_allclose(y0, H @ x, atol=1e-12)


def test_draw_initial_inside_box():
    sc = tiny_scenario()
    rng = np.random.default_rng(9)
    box = sc.initial_set(cons=False)
    for _ in range(100):
        x0 = sim.draw_initial(sc, rng)
        assert np.all(np.abs(x0 - sc.initial_center)
                      <= sc.initial_half_widths + 1e-12)
    assert isinstance(box, sets.Zonotope)
    assert isinstance(sc.initial_set(cons=True), sets.ConsZonotope)


# --- end-to-end runs ---


def check_trace(result, K, truth=True):
    trace = result.trace
    assert len(trace) == K + 1
    assert [row.k for row in trace] == list(range(K + 1))
    for row in trace:
        assert np.all(row.lower <= row.upper + 1e-12)
        assert np.all(row.lower - 1e-9 <= row.estimate)
        assert np.all(row.estimate <= row.upper + 1e-9)
        if truth:
            assert sets.contains(row.set, row.x, eps=CONTAIN_EPS)
            assert np.isfinite(row.error)
        assert row.fp_error <= 1e-8
    assert trace[0].fp_error == 0.0


def test_run_k0(run_keys):
    sc = tiny_scenario(K=0)
    result = sim.run(sc, keys=run_keys)
    check_trace(result, 0)
    row = result.trace[0]
    np.testing.assert_array_equal(row.lower, [-2.0, -2.0])
    np.testing.assert_array_equal(row.upper, [2.0, 2.0])


def test_run_p1_zono_mini(run_keys):
    sc = tiny_scenario(K=3)
    result = sim.run(sc, keys=run_keys)
    check_trace(result, 3)
    assert result.transcript.meta["variant"] == "p1-zono"
    kinds = [r["kind"] for r in result.transcript.records
             if r["type"] == "message"]
    assert kinds.count("Result") == 3 and kinds.count("Refresh") == 3


@pytest.mark.parametrize("variant", ["p1-zono", "p1-cons", "p2-zono",
                                     "p2-cons"])
def test_run_all_variants(run_keys, variant):
    sc = tiny_scenario(variant=variant, m=4, K=2,
                       groups=[[0, 1], [2, 3]])
    result = sim.run(sc, keys=run_keys)
    check_trace(result, 2)
    for row in result.trace[1:]:
        assert row.aggregator_ms >= 0 and row.query_ms >= 0


def test_run_reproducible(tmp_path, run_keys):
    sc = tiny_scenario(K=2)
    a = sim.run(sc, keys=run_keys)
    b = sim.run(sc, keys=run_keys)
    assert a.transcript.to_jsonl() == b.transcript.to_jsonl()
    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    sim.export_trace(a.trace, dir_a)
    sim.export_trace(b.trace, dir_b)
    for name in ("bounds.csv", "error.csv", "fp_error.csv"):
        assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes()


def test_refresh_off_overflow_names_step(run_keys):
    sc = tiny_scenario(K=6, refresh=False)
    with pytest.raises(protocol.ProtocolError, match="step 5"):
        sim.run(sc, keys=run_keys)


def test_swap_run_still_encloses(run_keys):
    sc = tiny_scenario(K=2, swap=True)
    result = sim.run(sc, keys=run_keys)
    check_trace(result, 2)
    assert result.transcript.coins("shuffle")


# --- export ---


def test_export_schema(tmp_path, run_keys):
    sc = tiny_scenario(K=2)
    result = sim.run(sc, keys=run_keys)
    out = tmp_path / "t"
    paths = sim.export_trace(result.trace, out)
    with open(paths["bounds"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "dim", "lower", "true", "upper"]
    assert len(rows) == 1 + 3 * 2  # (K+1) steps x n dims
    with open(paths["error"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "error"] and len(rows) == 4
    with open(paths["fp_error"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "fp_error"] and len(rows) == 4


def test_export_timing_table(tmp_path, run_keys):
    traces = {}
    for variant in ("p1-zono", "p1-cons", "p2-zono", "p2-cons"):
        sc = tiny_scenario(variant=variant, m=4, K=1,
                           groups=[[0, 1], [2, 3]])
        traces[variant] = sim.run(sc, keys=run_keys).trace
    path = tmp_path / "timing.csv"
    sim.export_timing(traces, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["variant", "sensor_ms", "aggregator_ms", "query_ms"]
    assert [r[0] for r in rows[1:]] == ["p1-zono", "p1-cons", "p2-zono",
                                        "p2-cons"]
    for r in rows[1:]:
        assert all(float(v) >= 0.0 for v in r[1:])


# --- replay ---


def test_replay_matches_original(tmp_path, run_keys):
    sc = tiny_scenario(K=2)
    original = sim.run(sc, keys=run_keys)
    csv_path = tmp_path / "log.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "i", "y", "h1", "h2", "r"])
        for rec in original.transcript.records:
            if rec["type"] == "input" and rec["name"] == "y":
                i = int(rec["role"].split(":")[1])
                H, R = sc.sensors[i]
                w.writerow([rec["k"], i, rec["value"][0],
                            H[0, 0], H[0, 1], R[0]])
    replayed = sim.replay(sc, csv_path, keys=run_keys)
    assert len(replayed.trace) == 3
    for row, orig in zip(replayed.trace, original.trace):
        assert np.all(np.isnan(row.x))
        assert math.isnan(row.error)
        np.testing.assert_array_equal(row.lower, orig.lower)
        np.testing.assert_array_equal(row.upper, orig.upper)


def test_replay_rejects_patchy_log(tmp_path, run_keys):
    sc = tiny_scenario(K=2)
    csv_path = tmp_path / "log.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "i", "y", "h1", "h2", "r"])
        w.writerow([1, 0, 0.1, 1.0, 0.0, 0.1])  # sensors 1, 2 missing
    with pytest.raises(sim.ReplayError, match="sensor"):
        sim.replay(sc, csv_path, keys=run_keys)
