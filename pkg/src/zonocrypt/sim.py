"""Desk-scale simulator: plant, measurements, bus loop, metrics export.

A run executes the selected protocol variant over an in-memory synchronous
bus for K rounds and, in lockstep, a plaintext reference pipeline fed the
same measurements and the same recorded coins. The trace pairs each round's
decrypted set with the true state it is guaranteed to enclose.
"""

from __future__ import annotations

import csv
import dataclasses
import importlib.resources
import json
import logging
import math
import random
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encsets, phe, protocol, sets

log = logging.getLogger(__name__)

# rng stream ids under the master seed
_STREAM_PLANT = 11
_STREAM_MEAS = 22
_STREAM_INIT = 33
_STREAM_AGG = 44


class ReplayError(Exception):
    pass


@dataclass
class Scenario:
    model: sets.SystemModel
    sensors: list
    groups: list | None
    horizon: int
    initial_center: np.ndarray
    initial_half_widths: np.ndarray
    key_bits: int = 512
    frac_bits: int = 48
    variant: str = "p1-zono"
    swap: bool = False
    refresh: bool = True
    seed: int = 1
    q: int = 5
    max_constraints: int | None = None

    @property
    def n(self) -> int:
        return len(self.initial_center)

    @property
    def m(self) -> int:
        return len(self.sensors)

    @property
    def d(self) -> int:
        return len(self.groups) if self.groups else 0

    def initial_set(self, cons: bool):
        G = np.diag(np.asarray(self.initial_half_widths, dtype=float))
        c = np.asarray(self.initial_center, dtype=float)
        if cons:
            return sets.ConsZonotope(c, G, np.zeros((0, self.n)),
                                     np.zeros(0))
        return sets.Zonotope(c, G)

    def config(self) -> protocol.ProtocolConfig:
        return protocol.ProtocolConfig(
            variant=self.variant, swap=self.swap, refresh=self.refresh,
            q=self.q, max_constraints=self.max_constraints)


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "model": {"F": np.asarray(sc.model.F).tolist(),
                  "Q": np.asarray(sc.model.Q).tolist()},
        "sensors": [{"H": np.asarray(H).tolist(),
                     "R": np.asarray(R).tolist()} for H, R in sc.sensors],
        "groups": sc.groups,
        "horizon": sc.horizon,
        "initial": {"center": np.asarray(sc.initial_center).tolist(),
                    "half_widths":
                        np.asarray(sc.initial_half_widths).tolist()},
        "key_bits": sc.key_bits,
        "frac_bits": sc.frac_bits,
        "variant": sc.variant,
        "swap": sc.swap,
        "refresh": sc.refresh,
        "seed": sc.seed,
        "q": sc.q,
        "max_constraints": sc.max_constraints,
    }


def _parse_matrix(value, path, errors, rows=None, cols=None):
    try:
        M = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        errors.append(f"{path}: not a numeric matrix")
        return None
    if M.ndim != 2:
        errors.append(f"{path}: expected a 2-d matrix")
        return None
    if rows is not None and M.shape[0] != rows:
        errors.append(f"{path}: expected {rows} rows, got {M.shape[0]}")
        return None
    if cols is not None and M.shape[1] != cols:
        errors.append(f"{path}: expected {cols} columns, got {M.shape[1]}")
        return None
    return M


def _parse_vector(value, path, errors, length=None):
    try:
        v = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        errors.append(f"{path}: not a numeric vector")
        return None
    if v.ndim != 1:
        errors.append(f"{path}: expected a flat vector")
        return None
    if length is not None and v.shape[0] != length:
        errors.append(f"{path}: expected length {length}, got {v.shape[0]}")
        return None
    return v


def validate_scenario(source) -> tuple[Scenario | None, list[str]]:
    """Parse and fully check a scenario; returns every problem found."""
    if isinstance(source, (str, Path)):
        try:
            with open(source, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            return None, [f"scenario file: {e}"]
    else:
        data = source
    if not isinstance(data, dict):
        return None, ["scenario: expected a JSON object"]
    errors: list[str] = []

    initial = data.get("initial")
    center = half = None
    if not isinstance(initial, dict):
        errors.append("initial: missing or not an object")
    else:
        center = _parse_vector(initial.get("center"), "initial.center",
                               errors)
        half = _parse_vector(initial.get("half_widths"),
                             "initial.half_widths", errors)
        if center is not None and half is not None and \
                len(center) != len(half):
            errors.append("initial.half_widths: length differs from center")
            half = None
        if half is not None and np.any(half < 0):
            errors.append("initial.half_widths: must be nonnegative")
    n = len(center) if center is not None else None

    model = None
    mdl = data.get("model")
    if not isinstance(mdl, dict):
        errors.append("model: missing or not an object")
    else:
        if "F" not in mdl:
            errors.append("model.F: missing")
        if "Q" not in mdl:
            errors.append("model.Q: missing")
        F = _parse_matrix(mdl.get("F"), "model.F", errors, rows=n, cols=n) \
            if "F" in mdl else None
        Q = _parse_matrix(mdl.get("Q"), "model.Q", errors, rows=n) \
            if "Q" in mdl else None
        if F is not None and Q is not None:
            model = sets.SystemModel(F, Q)

    sensors = []
    raw_sensors = data.get("sensors")
    if not isinstance(raw_sensors, list):
        errors.append("sensors: missing or not a list")
        raw_sensors = []
    for i, entry in enumerate(raw_sensors):
        if not isinstance(entry, dict):
            errors.append(f"sensors[{i}]: expected an object")
            continue
        H = _parse_matrix(entry.get("H"), f"sensors[{i}].H", errors, cols=n)
        rows = H.shape[0] if H is not None else None
        R = _parse_vector(entry.get("R"), f"sensors[{i}].R", errors,
                          length=rows)
        if R is not None and np.any(R <= 0):
            errors.append(f"sensors[{i}].R: radii must be positive")
            R = None
        if H is not None and R is not None:
            sensors.append((H, R))
        else:
            sensors.append(None)

    horizon = data.get("horizon")
    if not isinstance(horizon, int) or isinstance(horizon, bool) or \
            horizon < 0:
        errors.append("horizon: must be a nonnegative integer")
        horizon = 0

    key_bits = data.get("key_bits", 512)
    if not isinstance(key_bits, int) or key_bits < phe.MIN_KEY_BITS:
        errors.append(f"key_bits: must be an integer >= {phe.MIN_KEY_BITS}")
    frac_bits = data.get("frac_bits", 48)
    if not isinstance(frac_bits, int) or frac_bits < 8:
        errors.append("frac_bits: must be an integer >= 8")
    elif isinstance(key_bits, int) and 3 * frac_bits + 32 > key_bits - 2:
        errors.append(f"frac_bits: {frac_bits} leaves no headroom at "
                      f"{key_bits}-bit keys (need 3*f + 32 <= bits - 2)")

    variant = data.get("variant", "p1-zono")
    if variant not in protocol.VARIANTS:
        errors.append(f"variant: unknown {variant!r}, pick one of "
                      f"{', '.join(protocol.VARIANTS)}")
    swap = bool(data.get("swap", False))
    if swap and variant != "p1-zono":
        errors.append("swap: mitigation applies to variant p1-zono only")
    refresh = bool(data.get("refresh", True))

    groups = data.get("groups")
    if groups is not None:
        flat = []
        if not (isinstance(groups, list)
                and all(isinstance(g, list) for g in groups)):
            errors.append("groups: expected a list of sensor-index lists")
            groups = None
        else:
            for j, g in enumerate(groups):
                if not g:
                    errors.append(f"groups[{j}]: empty group")
                flat.extend(g)
            want = set(range(len(raw_sensors)))
            if sorted(flat) != sorted(set(flat)):
                errors.append("groups: a sensor appears more than once")
            missing = want - set(flat)
            extra = set(flat) - want
            if missing:
                errors.append(f"groups: sensors {sorted(missing)} unassigned")
            if extra:
                errors.append(f"groups: unknown sensor indices "
                              f"{sorted(extra)}")
    if variant in ("p2-zono", "p2-cons") and groups is None:
        errors.append("groups: required for the group-based variants")

    seed = data.get("seed", 1)
    if not isinstance(seed, int) or isinstance(seed, bool):
        errors.append("seed: must be an integer")
    q = data.get("q", 5)
    if not isinstance(q, int) or q < 1:
        errors.append("q: reduction order must be a positive integer")
    mc = data.get("max_constraints")
    if mc is not None and (not isinstance(mc, int) or mc < 1):
        errors.append("max_constraints: must be a positive integer or null")

    if errors or any(s is None for s in sensors) or model is None:
        return None, errors
    return Scenario(
        model=model, sensors=sensors, groups=groups, horizon=horizon,
        initial_center=center, initial_half_widths=half,
        key_bits=key_bits, frac_bits=frac_bits, variant=variant, swap=swap,
        refresh=refresh, seed=seed, q=q, max_constraints=mc), []


def default_scenario() -> Scenario:
    text = importlib.resources.files("zonocrypt").joinpath(
        "data/default_scenario.json").read_text(encoding="utf-8")
    sc, errors = validate_scenario(json.loads(text))
    if errors:
        raise RuntimeError(f"bundled scenario invalid: {errors}")
    return sc


# --- plant and measurements ---


def plant_step(x, model: sets.SystemModel, rng: np.random.Generator):
    x = np.asarray(x, dtype=float)
    noise = model.Q @ rng.uniform(-1.0, 1.0, model.Q.shape[1])
    return model.F @ x + noise


def measure(x, H, R, rng: np.random.Generator):
    H = np.asarray(H, dtype=float)
    R = np.asarray(R, dtype=float)
    return H @ np.asarray(x, dtype=float) + rng.uniform(-1.0, 1.0,
                                                        R.shape[0]) * R


def draw_initial(scenario: Scenario, rng: np.random.Generator):
    half = np.asarray(scenario.initial_half_widths, dtype=float)
    return np.asarray(scenario.initial_center, dtype=float) + \
        rng.uniform(-1.0, 1.0, scenario.n) * half


# --- traces ---


@dataclass
class TraceRecord:
    k: int
    x: np.ndarray
    set: object
    lower: np.ndarray
    upper: np.ndarray
    estimate: np.ndarray
    error: float
    fp_error: float
    sensor_ms: float = 0.0
    aggregator_ms: float = 0.0
    query_ms: float = 0.0


@dataclass
class RunResult:
    scenario: Scenario
    trace: list
    transcript: protocol.Transcript
    keys: phe.PaillierKeyPair


def _point_estimate(S, cons: bool):
    return sets.chebyshev_center(S) if cons else S.c.copy()


class _Reference:
    """Plaintext twin of the protocol pipeline.

    Consumes the same measurements and the coins recorded by the encrypted
    run, so the only divergence left to measure is the fixed-point codec.
    """

    def __init__(self, scenario: Scenario, cfg, S0):
        self.sc = scenario
        self.cfg = cfg
        self.prior = S0

    def _coin(self, transcript, name, k):
        for rec in transcript.coins(name):
            if rec["k"] == k:
                return rec["value"]
        raise protocol.ProtocolError(f"missing {name} coins for step {k}")

    def _reduce(self, S):
        if self.cfg.cons:
            mc = self.cfg.max_constraints
            if mc is None:
                mc = 3 * S.dim
            return sets.reduce_order_cons(S, self.cfg.q, mc)
        return sets.reduce_order(S, self.cfg.q)

    def step(self, k, ys, transcript):
        sc, cfg = self.sc, self.cfg
        if cfg.p2:
            locals_ = []
            for members in sc.groups:
                strips = [sets.Strip(sc.sensors[i][0], ys[i],
                                     sc.sensors[i][1]) for i in members]
                if not strips:
                    locals_.append(self.prior)
                elif cfg.cons:
                    locals_.append(sets.intersect_conszono_strips(
                        self.prior, strips))
                else:
                    lam = sets.compute_lambda(self.prior, strips)
                    locals_.append(sets.intersect_zono_strips(
                        self.prior, strips, lam))
            if len(locals_) == 1:
                fused = locals_[0]
            elif cfg.cons:
                fused = sets.intersect_conszonos(locals_)
            else:
                fused = sets.intersect_zonos_weighted(
                    locals_, sets.compute_weights(locals_))
            result = sets.time_update(fused, sc.model, cfg.q)
            self.prior = self._reduce(result)
            return result

        strips = [sets.Strip(H, ys[i], R)
                  for i, (H, R) in enumerate(sc.sensors)]
        S = self.prior
        if strips:
            if cfg.cons:
                lam = protocol.gain_from_coins(
                    self._coin(transcript, "lambda", k))
                S = sets.intersect_conszono_strips(S, strips, lam)
            else:
                lam = sets.compute_lambda(S, strips)
                S = sets.intersect_zono_strips(S, strips, lam)
        result = sets.time_update(S, sc.model, cfg.q)
        if cfg.swap:
            perm = np.asarray(self._coin(transcript, "shuffle", k),
                              dtype=int)
            result = sets.Zonotope(result.c, result.G[:, perm])
        self.prior = self._reduce(result) if cfg.refresh else result
        return result


def _build_meta(scenario: Scenario) -> dict:
    return {
        "variant": scenario.variant, "swap": scenario.swap,
        "refresh": scenario.refresh, "n": scenario.n, "m": scenario.m,
        "sensor_rows": [int(H.shape[0]) for H, _ in scenario.sensors],
        "groups": scenario.groups, "seed": scenario.seed,
        "key_bits": scenario.key_bits, "frac_bits": scenario.frac_bits,
        "horizon": scenario.horizon, "q": scenario.q,
        "max_constraints": scenario.max_constraints,
    }


def run(scenario: Scenario, *, keys: phe.PaillierKeyPair | None = None,
        external: dict | None = None) -> RunResult:
    """Execute the configured protocol over the bus for the full horizon.

    `external` replaces generated measurements with recorded ones
    ({"ys": {k: [y_i ...]}}); the true state is then unknown and reported
    as NaN.
    """
    cfg = scenario.config()
    if keys is None:
        keys = phe.keygen(scenario.key_bits,
                          rng=random.Random(f"{scenario.seed}:keygen"))
    pk = keys.public
    codec = phe.FixedPointCodec(pk.n, frac_bits=scenario.frac_bits)
    transcript = protocol.Transcript(_build_meta(scenario))
    seed = scenario.seed

    mgrs: list[protocol.GroupManager] = []
    sensor_nodes: list[protocol.SensorNode] = []
    if cfg.p2:
        mgrs = [
            protocol.GroupManager(
                j, [(i, *scenario.sensors[i]) for i in members], pk, codec,
                cfg, random.Random(f"{seed}:group:{j}"))
            for j, members in enumerate(scenario.groups)
        ]
        expected = len(mgrs)
    else:
        sensor_nodes = [
            protocol.SensorNode(i, H, R, pk, codec,
                                random.Random(f"{seed}:sensor:{i}"),
                                swap=cfg.swap)
            for i, (H, R) in enumerate(scenario.sensors)
        ]
        expected = len(sensor_nodes)
    agg = protocol.Aggregator(pk, codec, scenario.model, cfg, expected,
                              rng=random.Random(f"{seed}:agg"),
                              nprng=np.random.default_rng(
                                  [seed, _STREAM_AGG]))
    query = protocol.QueryNode(keys, codec, cfg,
                               rng=random.Random(f"{seed}:query"),
                               group_roles=tuple(m.role for m in mgrs))

    S0 = scenario.initial_set(cfg.cons)
    for msg in query.init_messages(S0, transcript):
        if cfg.p2:
            mgrs[int(msg.receiver.split(":")[1])].receive(msg)
        else:
            agg.receive(msg)

    blind = external is not None
    if blind:
        x = np.full(scenario.n, math.nan)
        K = scenario.horizon
    else:
        x = draw_initial(scenario,
                         np.random.default_rng([seed, _STREAM_INIT]))
        K = scenario.horizon
    plant_rng = np.random.default_rng([seed, _STREAM_PLANT])
    meas_rng = np.random.default_rng([seed, _STREAM_MEAS])
    ref = _Reference(scenario, cfg, S0)

    hull0 = sets.interval_hull(S0)
    est0 = _point_estimate(S0, cfg.cons)
    err0 = math.nan if blind else float(np.linalg.norm(est0 - x))
    trace = [TraceRecord(0, x.copy(), S0, hull0.lower, hull0.upper, est0,
                         err0, 0.0)]

    for k in range(1, K + 1):
        if blind:
            ys = external["ys"][k]
        else:
            ys = [measure(x, H, R, meas_rng) for H, R in scenario.sensors]
        try:
            if cfg.p2:
                t0 = time.perf_counter()
                emitted = [m.step(k, {i: ys[i] for i in members}, transcript)
                           for m, members in zip(mgrs, scenario.groups)]
                t1 = time.perf_counter()
                result = agg.step_p2(k, emitted, transcript)
                t2 = time.perf_counter()
                S, outgoing = query.step(k, result, transcript)
                t3 = time.perf_counter()
                for msg, mgr in zip(outgoing, mgrs):
                    mgr.receive(msg)
                sensor_ms = 1000.0 * (t1 - t0) / max(len(mgrs), 1)
            else:
                t0 = time.perf_counter()
                emitted = [node.step(k, ys[i], transcript)
                           for i, node in enumerate(sensor_nodes)]
                t1 = time.perf_counter()
                result = agg.step_p1(k, emitted, transcript)
                t2 = time.perf_counter()
                S, outgoing = query.step(k, result, transcript)
                t3 = time.perf_counter()
                for msg in outgoing:
                    agg.receive(msg)
                sensor_ms = 1000.0 * (t1 - t0) / max(len(sensor_nodes), 1)
        except phe.ScaleOverflowError as e:
            raise protocol.ProtocolError(
                f"scale budget exhausted at step {k}: {e}; "
                f"enable refresh or shorten the horizon") from e

        ref_S = ref.step(k, ys, transcript)
        if not blind:
            x = plant_step(x, scenario.model, plant_rng)
        est = _point_estimate(S, cfg.cons)
        est_ref = _point_estimate(ref_S, cfg.cons)
        hull = sets.interval_hull(S)
        err = math.nan if blind else float(np.linalg.norm(est - x))
        fp = float(np.linalg.norm(est - est_ref))
        trace.append(TraceRecord(
            k, x.copy(), S, hull.lower, hull.upper, est, err, fp,
            sensor_ms=sensor_ms, aggregator_ms=1000.0 * (t2 - t1),
            query_ms=1000.0 * (t3 - t2)))
        log.debug("step %d: err=%.3g fp=%.3g", k, err, fp)
    return RunResult(scenario, trace, transcript, keys)


# --- export ---


def _fmt(v) -> str:
    return repr(float(v))


def export_trace(trace, out_dir) -> dict:
    """Write the plot-ready CSVs; returns {name: path}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(trace[0].lower)
    paths = {"bounds": out / "bounds.csv", "error": out / "error.csv",
             "fp_error": out / "fp_error.csv"}
    with open(paths["bounds"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "dim", "lower", "true", "upper"])
        for row in trace:
            for d in range(n):
                w.writerow([row.k, d, _fmt(row.lower[d]), _fmt(row.x[d]),
                            _fmt(row.upper[d])])
    with open(paths["error"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "error"])
        for row in trace:
            w.writerow([row.k, _fmt(row.error)])
    with open(paths["fp_error"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "fp_error"])
        for row in trace:
            w.writerow([row.k, _fmt(row.fp_error)])
    return {name: str(p) for name, p in paths.items()}


def export_timing(traces: dict, path) -> str:
    """Per-entity mean wall time in ms, one row per variant."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "sensor_ms", "aggregator_ms", "query_ms"])
        for variant, trace in traces.items():
            rounds = trace[1:]
            if rounds:
                cols = [sum(r.sensor_ms for r in rounds) / len(rounds),
                        sum(r.aggregator_ms for r in rounds) / len(rounds),
                        sum(r.query_ms for r in rounds) / len(rounds)]
            else:
                cols = [0.0, 0.0, 0.0]
            w.writerow([variant] + [f"{c:.3f}" for c in cols])
    return str(path)


# --- replay ---


def load_replay_log(path, scenario: Scenario) -> dict:
    """Parse a (k, i, y, H-row, R) CSV into per-step measurement lists."""
    n, m = scenario.n, scenario.m
    for i, (H, _) in enumerate(scenario.sensors):
        if H.shape[0] != 1:
            raise ReplayError(f"replay supports single-row sensors only; "
                              f"sensor {i} has {H.shape[0]} rows")
    want_header = ["k", "i", "y"] + [f"h{j + 1}" for j in range(n)] + ["r"]
    by_step: dict[int, dict[int, np.ndarray]] = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != want_header:
            raise ReplayError(f"replay header must be "
                              f"{','.join(want_header)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(want_header):
                raise ReplayError(f"line {lineno}: wrong column count")
            k, i = int(row[0]), int(row[1])
            if not 0 <= i < m:
                raise ReplayError(f"line {lineno}: unknown sensor {i}")
            if k < 1:
                raise ReplayError(f"line {lineno}: steps start at 1")
            H, R = scenario.sensors[i]
            h_row = np.array([float(v) for v in row[3:3 + n]])
            if not np.allclose(h_row, H[0], atol=1e-9) or \
                    abs(float(row[-1]) - R[0]) > 1e-9:
                raise ReplayError(f"line {lineno}: sensor {i} model differs "
                                  f"from the scenario")
            by_step.setdefault(k, {})[i] = np.array([float(row[2])])
    if not by_step:
        raise ReplayError("replay log holds no measurements")
    K = max(by_step)
    ys = {}
    for k in range(1, K + 1):
        got = by_step.get(k, {})
        missing = [i for i in range(m) if i not in got]
        if missing:
            raise ReplayError(f"step {k}: missing sensor(s) {missing}")
        ys[k] = [got[i] for i in range(m)]
    return ys


def replay(scenario: Scenario, csv_path, *,
           keys: phe.PaillierKeyPair | None = None) -> RunResult:
    ys = load_replay_log(csv_path, scenario)
    sc = dataclasses.replace(scenario, horizon=max(ys))
    return run(sc, keys=keys, external={"ys": ys})
