"""Role state machines, transcripts, and mechanical privacy audits.

Oracle strategy: every encrypted round is replayed in plaintext with the
same measurements and the same recorded coins; the decrypted results must
match within codec tolerance and the plain arrays must match exactly.
"""

import copy
import json
import math
import random

import numpy as np
import pytest

from zonocrypt import encsets, phe, protocol, sets


CODEC_TOL = 1e-9  # generous vs 2^-44 worst case on these magnitudes


@pytest.fixture
def model2():
    return sets.SystemModel(np.array([[1.0, 0.05], [0.0, 1.0]]),
                            0.01 * np.eye(2))


SENSOR_SPECS = [
    (np.array([[1.0, 0.0]]), np.array([0.1])),
    (np.array([[0.0, 1.0]]), np.array([0.1])),
    (np.array([[0.6, 0.8]]), np.array([0.2])),
]


def make_cfg(variant, **kw):
    return protocol.ProtocolConfig(variant=variant, **kw)


def make_transcript(variant, m=3, n=2, d=None, swap=False, refresh=True):
    meta = {
        "variant": variant, "swap": swap, "refresh": refresh,
        "n": n, "m": m, "sensor_rows": [1] * m,
        "groups": None if d is None else [[0, 1], [2]][:d],
        "seed": 7, "key_bits": 512, "frac_bits": 48, "horizon": 1,
    }
    return protocol.Transcript(meta)


def prior_zono():
    return sets.Zonotope(np.zeros(2), 2.0 * np.eye(2))


def prior_cons():
    Z = prior_zono()
    return sets.ConsZonotope(Z.c, Z.G, np.zeros((0, 2)), np.zeros(0))


def measurements(x, seed):
    rng = np.random.default_rng(seed)
    ys = []
    for H, R in SENSOR_SPECS:
        v = rng.uniform(-1.0, 1.0, R.shape[0]) * R
        ys.append(H @ x + v)
    return ys


def build_p1(pk, sk, codec, model, cfg, seed=11):
    tr = make_transcript(cfg.variant, swap=cfg.swap, refresh=cfg.refresh)
    sensors = [
        protocol.SensorNode(i, H, R, pk, codec,
                            random.Random(f"{seed}:s:{i}"), swap=cfg.swap)
        for i, (H, R) in enumerate(SENSOR_SPECS)
    ]
    agg = protocol.Aggregator(pk, codec, model, cfg, expected=len(sensors),
                              rng=random.Random(f"{seed}:agg"),
                              nprng=np.random.default_rng([seed, 1]))
    keys = phe.PaillierKeyPair(public=pk, private=sk)
    query = protocol.QueryNode(keys, codec, cfg,
                               rng=random.Random(f"{seed}:q"))
    return tr, sensors, agg, query


def p1_round(k, ys, tr, sensors, agg, query):
    msgs = [s.step(k, y, tr) for s, y in zip(sensors, ys)]
    result = agg.step_p1(k, msgs, tr)
    plain, outgoing = query.step(k, result, tr)
    for msg in outgoing:
        agg.receive(msg)
    return plain, result


# --- messages and transcripts ---


def test_message_validation(pk, codec):
    enc = encsets.encrypt_vector(pk, codec, np.array([1.0]), random.Random(0))
    with pytest.raises(ValueError):
        protocol.Message("Telegram", "sensor:0", "aggregator", 1,
                         {"enc_y": enc}, {"enc_y": protocol.TAG_PRIVATE})
    with pytest.raises(ValueError):
        protocol.Message("EncStrip", "sensor:0", "aggregator", 1,
                         {"enc_y": enc}, {})  # untagged field
    with pytest.raises(ValueError):
        protocol.Message("EncStrip", "sensor:0", "aggregator", 1,
                         {"enc_y": enc}, {"enc_y": "secret-ish"})


def test_sensor_step_roundtrip(pk, sk, codec):
    tr = make_transcript("p1-zono")
    H, R = SENSOR_SPECS[2]
    node = protocol.SensorNode(2, H, R, pk, codec, random.Random(3))
    y = np.array([0.25])
    msg = node.step(1, y, tr)
    assert msg.kind == "EncStrip"
    assert msg.sender == "sensor:2" and msg.receiver == "aggregator"
    assert msg.tags == {"enc_y": protocol.TAG_PRIVATE,
                        "H": protocol.TAG_PUBLIC,
                        "R": protocol.TAG_PUBLIC}
    np.testing.assert_array_equal(msg.payload["H"], H)
    np.testing.assert_array_equal(msg.payload["R"], R)
    dec = encsets.decrypt_vector(sk, codec, msg.payload["enc_y"])
    assert abs(dec[0] - 0.25) <= 2.0 ** -48
    rec = [r for r in tr.records if r["type"] == "message"]
    assert len(rec) == 1 and rec[0]["kind"] == "EncStrip"
    assert "enc" in rec[0]["payload"]["enc_y"]


def test_sensor_swap_seals_radius(pk, sk, codec):
    tr = make_transcript("p1-zono", swap=True)
    H, R = SENSOR_SPECS[0]
    node = protocol.SensorNode(0, H, R, pk, codec, random.Random(3), swap=True)
    msg = node.step(1, np.array([0.5]), tr)
    assert isinstance(msg.payload["R"], protocol.Sealed)
    np.testing.assert_array_equal(msg.payload["R"].value, R)
    assert msg.tags["R"] == protocol.TAG_PRIVATE
    rec = [r for r in tr.records if r["type"] == "message"][0]
    assert rec["payload"]["R"] == {"sealed": True}
    assert "0.1" not in json.dumps(rec["payload"]["R"])


def test_p1_zono_round_matches_plain(pk, sk, codec, model2):
    cfg = make_cfg("p1-zono")
    tr, sensors, agg, query = build_p1(pk, sk, codec, model2, cfg)
    S0 = prior_zono()
    for msg in query.init_messages(S0, tr):
        agg.receive(msg)
    x = np.array([0.4, -0.3])
    ys = measurements(x, seed=5)
    plain, result = p1_round(1, ys, tr, sensors, agg, query)

    strips = [sets.Strip(H, y, R)
              for (H, R), y in zip(SENSOR_SPECS, ys)]
    lam = sets.compute_lambda(S0, strips)
    ref = sets.time_update(sets.intersect_zono_strips(S0, strips, lam),
                           model2, cfg.q)
    np.testing.assert_array_equal(plain.G, ref.G)
    np.testing.assert_allclose(plain.c, ref.c, atol=CODEC_TOL)
    assert result.payload["enc_c"].scale_exp == 3


def test_p1_no_strips_time_update_only(pk, sk, codec, model2):
    cfg = make_cfg("p1-zono")
    tr = make_transcript("p1-zono", m=0)
    agg = protocol.Aggregator(pk, codec, model2, cfg, expected=0,
                              rng=random.Random(1),
                              nprng=np.random.default_rng(1))
    S0 = prior_zono()
    enc0 = encsets.encrypt_zono(pk, codec, S0, random.Random(2))
    agg.state = enc0
    result = agg.step_p1(1, [], tr)
    dec = encsets.decrypt_zono(sk, codec, protocol.enc_set_from_payload(
        result.payload, cons=False))
    ref = sets.time_update(S0, model2, cfg.q)
    np.testing.assert_array_equal(dec.G, ref.G)
    np.testing.assert_allclose(dec.c, ref.c, atol=CODEC_TOL)


def test_p1_stalls_on_missing_strips(pk, sk, codec, model2):
    cfg = make_cfg("p1-zono")
    tr, sensors, agg, query = build_p1(pk, sk, codec, model2, cfg)
    for msg in query.init_messages(prior_zono(), tr):
        agg.receive(msg)
    ys = measurements(np.zeros(2), seed=5)
    msgs = [sensors[0].step(1, ys[0], tr)]
    with pytest.raises(protocol.StallError, match="step 1"):
        agg.step_p1(1, msgs, tr)


def test_p1_cons_round_random_gain(pk, sk, codec, model2):
    cfg = make_cfg("p1-cons")
    tr, sensors, agg, query = build_p1(pk, sk, codec, model2, cfg)
    C0 = prior_cons()
    for msg in query.init_messages(C0, tr):
        agg.receive(msg)
    x = np.array([-0.2, 0.6])
    ys = measurements(x, seed=6)
    plain, result = p1_round(1, ys, tr, sensors, agg, query)

    coins = [r for r in tr.records
             if r["type"] == "coins" and r["name"] == "lambda"]
    assert len(coins) == 1 and coins[0]["role"] == "aggregator"
    lam = protocol.gain_from_coins(coins[0]["value"])
    assert all(np.all(np.abs(L) <= 1.0) for L in lam.blocks)

    strips = [sets.Strip(H, y, R)
              for (H, R), y in zip(SENSOR_SPECS, ys)]
    ref = sets.time_update(sets.intersect_conszono_strips(C0, strips, lam),
                           model2, cfg.q)
    np.testing.assert_array_equal(plain.G, ref.G)
    np.testing.assert_array_equal(plain.A, ref.A)
    np.testing.assert_allclose(plain.c, ref.c, atol=CODEC_TOL)
    np.testing.assert_allclose(plain.b, ref.b, atol=CODEC_TOL)
    assert sets.contains(plain, x, eps=1e-6)


def test_swap_emits_column_permutation(pk, sk, codec, model2):
    ys = measurements(np.array([0.1, 0.1]), seed=9)
    results = {}
    for swap in (False, True):
        cfg = make_cfg("p1-zono", swap=swap)
        tr, sensors, agg, query = build_p1(pk, sk, codec, model2, cfg)
        for msg in query.init_messages(prior_zono(), tr):
            agg.receive(msg)
        plain, _ = p1_round(1, ys, tr, sensors, agg, query)
        results[swap] = (plain, tr)
    G_plain, G_swap = results[False][0].G, results[True][0].G
    perms = [r for r in results[True][1].records
             if r["type"] == "coins" and r["name"] == "shuffle"]
    assert len(perms) == 1
    perm = np.array(perms[0]["value"], dtype=int)
    np.testing.assert_array_equal(G_plain[:, perm], G_swap)
    np.testing.assert_allclose(results[True][0].c, results[False][0].c,
                               atol=CODEC_TOL)


def test_query_refresh_message(pk, sk, codec, model2):
    cfg = make_cfg("p1-zono")
    tr, sensors, agg, query = build_p1(pk, sk, codec, model2, cfg)
    for msg in query.init_messages(prior_zono(), tr):
        agg.receive(msg)
    ys = measurements(np.zeros(2), seed=10)
    msgs = [s.step(1, y, tr) for s, y in zip(sensors, ys)]
    result = agg.step_p1(1, msgs, tr)
    plain, outgoing = query.step(1, result, tr)
    assert len(outgoing) == 1
    refresh = outgoing[0]
    assert refresh.kind == "Refresh" and refresh.receiver == "aggregator"
    assert refresh.payload["enc_c"].scale_exp == 1
    dec = encsets.decrypt_zono(sk, codec, protocol.enc_set_from_payload(
        refresh.payload, cons=False))
    ref = sets.reduce_order(plain, cfg.q)
    np.testing.assert_array_equal(dec.G, ref.G)
    np.testing.assert_allclose(dec.c, ref.c, atol=CODEC_TOL)

    cfg_off = make_cfg("p1-zono", refresh=False)
    tr2, sensors2, agg2, query2 = build_p1(pk, sk, codec, model2, cfg_off)
    for msg in query2.init_messages(prior_zono(), tr2):
        agg2.receive(msg)
    msgs2 = [s.step(1, y, tr2) for s, y in zip(sensors2, ys)]
    result2 = agg2.step_p1(1, msgs2, tr2)
    _, outgoing2 = query2.step(1, result2, tr2)
    assert outgoing2 == []


@pytest.mark.parametrize("variant", ["p1-zono", "p1-cons"])
def test_refresh_on_off_trajectories_agree(pk, sk, codec, model2, variant):
    # no constraint elimination on the ON path at this budget, so the
    # plain arrays stay identical and only codec noise separates the modes
    histories = {}
    for refresh in (True, False):
        cfg = make_cfg(variant, refresh=refresh, max_constraints=50)
        tr, sensors, agg, query = build_p1(pk, sk, codec, model2, cfg,
                                           seed=21)
        S0 = prior_cons() if cfg.cons else prior_zono()
        for msg in query.init_messages(S0, tr):
            agg.receive(msg)
        hist = []
        for k in range(1, 4):
            ys = measurements(np.array([0.3, -0.1]), seed=100 + k)
            plain, _ = p1_round(k, ys, tr, sensors, agg, query)
            hist.append(plain)
        histories[refresh] = hist
    for on, off in zip(histories[True], histories[False]):
        np.testing.assert_array_equal(on.G, off.G)
        np.testing.assert_allclose(on.c, off.c, atol=1e-9)
        if hasattr(on, "A"):
            np.testing.assert_array_equal(on.A, off.A)
            np.testing.assert_allclose(on.b, off.b, atol=1e-9)


# --- protocol 2 ---


def build_p2(pk, sk, codec, model, cfg, seed=31):
    groups = [[0, 1], [2]]
    tr = make_transcript(cfg.variant, d=2)
    mgrs = [
        protocol.GroupManager(
            j, [(i, *SENSOR_SPECS[i]) for i in members], pk, codec, cfg,
            random.Random(f"{seed}:g:{j}"))
        for j, members in enumerate(groups)
    ]
    agg = protocol.Aggregator(pk, codec, model, cfg, expected=len(groups),
                              rng=random.Random(f"{seed}:agg"),
                              nprng=np.random.default_rng([seed, 2]))
    keys = phe.PaillierKeyPair(public=pk, private=sk)
    query = protocol.QueryNode(keys, codec, cfg,
                               rng=random.Random(f"{seed}:q"),
                               group_roles=tuple(m.role for m in mgrs))
    return tr, groups, mgrs, agg, query


def p2_round(k, ys, tr, groups, mgrs, agg, query):
    emitted = [m.step(k, {i: ys[i] for i in members}, tr)
               for m, members in zip(mgrs, groups)]
    result = agg.step_p2(k, emitted, tr)
    plain, outgoing = query.step(k, result, tr)
    for msg, mgr in zip(outgoing, mgrs):
        mgr.receive(msg)
    return plain, emitted, outgoing


def test_p2_zono_round_matches_plain(pk, sk, codec, model2):
    cfg = make_cfg("p2-zono")
    tr, groups, mgrs, agg, query = build_p2(pk, sk, codec, model2, cfg)
    S0 = prior_zono()
    for msg in query.init_messages(S0, tr):
        mgrs[int(msg.receiver.split(":")[1])].receive(msg)
    x = np.array([0.4, -0.3])
    ys = measurements(x, seed=41)
    plain, emitted, outgoing = p2_round(1, ys, tr, groups, mgrs, agg, query)

    locals_ = []
    for members in groups:
        strips = [sets.Strip(SENSOR_SPECS[i][0], ys[i], SENSOR_SPECS[i][1])
                  for i in members]
        lam = sets.compute_lambda(S0, strips)
        locals_.append(sets.intersect_zono_strips(S0, strips, lam))
    w = sets.compute_weights(locals_)
    ref = sets.time_update(sets.intersect_zonos_weighted(locals_, w),
                           model2, cfg.q)
    np.testing.assert_array_equal(plain.G, ref.G)
    np.testing.assert_allclose(plain.c, ref.c, atol=CODEC_TOL)

    for msg, local in zip(emitted, locals_):
        dec = encsets.decrypt_zono(sk, codec, protocol.enc_set_from_payload(
            msg.payload, cons=False))
        np.testing.assert_array_equal(dec.G, local.G)
        np.testing.assert_allclose(dec.c, local.c, atol=CODEC_TOL)

    assert [m.kind for m in outgoing] == ["InitSet", "InitSet"]
    assert outgoing[0].tags["c"] == protocol.TAG_PUBLIC
    np.testing.assert_allclose(mgrs[0].prior.c, plain.c, atol=CODEC_TOL)


def test_p2_single_group_skips_diffusion(pk, sk, codec, model2):
    cfg = make_cfg("p2-zono")
    tr = make_transcript("p2-zono", d=1)
    mgr = protocol.GroupManager(0, [(i, *SENSOR_SPECS[i]) for i in (0, 1, 2)],
                                pk, codec, cfg, random.Random(4))
    mgr.receive_plain(prior_zono())
    agg = protocol.Aggregator(pk, codec, model2, cfg, expected=1,
                              rng=random.Random(5),
                              nprng=np.random.default_rng(5))
    ys = measurements(np.zeros(2), seed=51)
    emitted = mgr.step(1, {i: ys[i] for i in (0, 1, 2)}, tr)
    result = agg.step_p2(1, [emitted], tr)
    assert result.payload["enc_c"].scale_exp == 2  # no diffusion rescale
    dec = encsets.decrypt_zono(sk, codec, protocol.enc_set_from_payload(
        result.payload, cons=False))
    local = encsets.decrypt_zono(sk, codec, protocol.enc_set_from_payload(
        emitted.payload, cons=False))
    ref = sets.time_update(local, model2, cfg.q)
    np.testing.assert_array_equal(dec.G, ref.G)
    np.testing.assert_allclose(dec.c, ref.c, atol=CODEC_TOL)


def test_p2_group_zero_measurements_reemits_prior(pk, sk, codec, model2):
    cfg = make_cfg("p2-zono")
    tr = make_transcript("p2-zono", d=1)
    mgr = protocol.GroupManager(0, [], pk, codec, cfg, random.Random(4))
    S0 = prior_zono()
    mgr.receive_plain(S0)
    msg = mgr.step(1, {}, tr)
    dec = encsets.decrypt_zono(sk, codec, protocol.enc_set_from_payload(
        msg.payload, cons=False))
    np.testing.assert_array_equal(dec.G, S0.G)
    np.testing.assert_allclose(dec.c, S0.c, atol=CODEC_TOL)


def test_p2_cons_round_matches_plain(pk, sk, codec, model2):
    cfg = make_cfg("p2-cons")
    tr, groups, mgrs, agg, query = build_p2(pk, sk, codec, model2, cfg)
    C0 = prior_cons()
    for msg in query.init_messages(C0, tr):
        mgrs[int(msg.receiver.split(":")[1])].receive(msg)
    x = np.array([0.4, -0.3])
    ys = measurements(x, seed=61)
    plain, emitted, _ = p2_round(1, ys, tr, groups, mgrs, agg, query)

    locals_ = []
    for members in groups:
        strips = [sets.Strip(SENSOR_SPECS[i][0], ys[i], SENSOR_SPECS[i][1])
                  for i in members]
        locals_.append(sets.intersect_conszono_strips(C0, strips))
    ref = sets.time_update(sets.intersect_conszonos(locals_), model2, cfg.q)
    np.testing.assert_array_equal(plain.G, ref.G)
    np.testing.assert_array_equal(plain.A, ref.A)
    np.testing.assert_allclose(plain.c, ref.c, atol=CODEC_TOL)
    np.testing.assert_allclose(plain.b, ref.b, atol=CODEC_TOL)
    assert sets.contains(plain, x, eps=1e-6)


# --- transcripts: determinism, round trip, confinement ---


def run_mini(pk, sk, codec, model, seed):
    cfg = make_cfg("p1-cons")
    tr, sensors, agg, query = build_p1(pk, sk, codec, model, cfg, seed=seed)
    for msg in query.init_messages(prior_cons(), tr):
        agg.receive(msg)
    for k in (1, 2):
        ys = measurements(np.array([0.3, -0.1]), seed=200 + k)
        p1_round(k, ys, tr, sensors, agg, query)
    return tr, sensors, agg, query


def test_transcript_byte_determinism(pk, sk, codec, model2):
    a, *_ = run_mini(pk, sk, codec, model2, seed=77)
    b, *_ = run_mini(pk, sk, codec, model2, seed=77)
    c, *_ = run_mini(pk, sk, codec, model2, seed=78)
    assert a.to_jsonl() == b.to_jsonl()
    assert a.to_jsonl() != c.to_jsonl()


def test_transcript_roundtrip(tmp_path, pk, sk, codec, model2):
    tr, *_ = run_mini(pk, sk, codec, model2, seed=77)
    path = tmp_path / "t.jsonl"
    tr.save(path)
    loaded = protocol.Transcript.load(path)
    assert loaded.meta == tr.meta
    assert loaded.records == tr.records


def test_serializer_rejects_private_key(pk, sk, codec):
    with pytest.raises(TypeError):
        protocol.serialize_value(sk)
    tr = make_transcript("p1-zono")
    msg = protocol.Message("Result", "aggregator", "query", 1,
                           {"G": np.eye(2)}, {"G": protocol.TAG_PUBLIC})
    object.__setattr__(msg, "payload", {"G": sk})
    with pytest.raises(TypeError):
        tr.add_message(msg)


def _holds_private_key(obj, depth=0):
    if isinstance(obj, phe.PaillierPrivateKey):
        return True
    if depth > 4:
        return False
    if isinstance(obj, phe.PaillierKeyPair):
        return obj.private is not None
    if isinstance(obj, dict):
        return any(_holds_private_key(v, depth + 1) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return any(_holds_private_key(v, depth + 1) for v in obj)
    if hasattr(obj, "__dict__"):
        return any(_holds_private_key(v, depth + 1)
                   for v in vars(obj).values())
    return False


def test_private_key_confined_to_query(pk, sk, codec, model2):
    tr, sensors, agg, query = run_mini(pk, sk, codec, model2, seed=79)
    for node in [*sensors, agg]:
        assert not _holds_private_key(node)
    assert _holds_private_key(query)


def test_aggregator_view_minimality(pk, sk, codec, model2):
    tr, *_ = run_mini(pk, sk, codec, model2, seed=80)
    allowed = {"enc_c", "enc_b", "enc_y", "G", "A", "H", "R"}
    view = tr.view("aggregator")
    recvs = [r for r in view if r["type"] == "message"]
    assert recvs, "aggregator received nothing"
    for r in recvs:
        assert set(r["payload"]) <= allowed
        for field, tag in r["tags"].items():
            if tag == protocol.TAG_PRIVATE:
                v = r["payload"][field]
                assert isinstance(v, dict) and ("enc" in v or "sealed" in v)


# --- privacy audits ---


def audit_over(pk, sk, codec, model2, variant, coalition, swap=False):
    cfg = make_cfg(variant, swap=swap)
    if variant.startswith("p1"):
        tr, sensors, agg, query = build_p1(pk, sk, codec, model2, cfg)
        S0 = prior_cons() if cfg.cons else prior_zono()
        for msg in query.init_messages(S0, tr):
            agg.receive(msg)
        ys = measurements(np.zeros(2), seed=90)
        p1_round(1, ys, tr, sensors, agg, query)
    else:
        tr, groups, mgrs, agg, query = build_p2(pk, sk, codec, model2, cfg)
        S0 = prior_cons() if cfg.cons else prior_zono()
        for msg in query.init_messages(S0, tr):
            mgrs[int(msg.receiver.split(":")[1])].receive(msg)
        ys = measurements(np.zeros(2), seed=90)
        p2_round(1, ys, tr, groups, mgrs, agg, query)
    tr.meta["swap"] = swap
    return protocol.privacy_audit(tr, coalition), tr


def test_audit_sensor_only_coalition(pk, sk, codec, model2):
    report, _ = audit_over(pk, sk, codec, model2, "p1-zono",
                           ["sensor:0", "sensor:1"])
    assert report.passed and report.wire_ok and report.view_ok
    assert report.condition_holds is None


def test_audit_p1_rank_condition(pk, sk, codec, model2):
    # m=3, p=1, n=2: one colluding sensor leaves 2 rows, not > 2
    ok, _ = audit_over(pk, sk, codec, model2, "p1-zono", ["query"])
    assert ok.condition == "m_r*p > n"
    assert ok.condition_holds and ok.details["m_r"] == 3
    bad, _ = audit_over(pk, sk, codec, model2, "p1-zono",
                        ["query", "sensor:0"])
    assert bad.details == {"m_r": 2, "p": 1, "n": 2, "rows": 2}
    assert bad.condition_holds is False and not bad.passed


def test_audit_p2_rank_condition(pk, sk, codec, model2):
    ok, _ = audit_over(pk, sk, codec, model2, "p2-zono", ["query"])
    assert ok.condition == "d_r > 1"
    assert ok.condition_holds and ok.details["d_r"] == 2
    bad, _ = audit_over(pk, sk, codec, model2, "p2-zono",
                        ["query", "group:0"])
    assert bad.details["d_r"] == 1
    assert bad.condition_holds is False and not bad.passed


@pytest.mark.parametrize("variant,swap", [
    ("p1-cons", False), ("p2-cons", False), ("p1-zono", True),
])
def test_audit_unconditional_modes(pk, sk, codec, model2, variant, swap):
    coalition = (["query", "sensor:0", "sensor:1"] if variant != "p2-cons"
                 else ["query", "group:0"])
    report, _ = audit_over(pk, sk, codec, model2, variant, coalition,
                           swap=swap)
    assert report.condition.startswith("unconditional")
    assert report.condition_holds and report.passed


def test_audit_flags_tampered_wire(pk, sk, codec, model2):
    report, tr = audit_over(pk, sk, codec, model2, "p1-zono", ["query"])
    assert report.wire_ok
    tampered = copy.deepcopy(tr)
    for r in tampered.records:
        if r["type"] == "message" and r["kind"] == "EncStrip":
            r["payload"]["enc_y"] = [0.123]  # leaked plaintext
            break
    flagged = protocol.privacy_audit(tampered, ["sensor:1"])
    assert not flagged.wire_ok and not flagged.passed


def test_audit_flags_key_material_in_payload(pk, sk, codec, model2):
    _, tr = audit_over(pk, sk, codec, model2, "p1-zono", ["query"])
    tampered = copy.deepcopy(tr)
    for r in tampered.records:
        if r["type"] == "message" and r["kind"] == "Result":
            r["payload"]["sk"] = {"p": 11, "q": 13}
            r["tags"]["sk"] = protocol.TAG_PUBLIC
            break
    flagged = protocol.privacy_audit(tampered, ["query"])
    assert not flagged.sk_confined and not flagged.passed


def test_audit_unknown_coalition_member(pk, sk, codec, model2):
    _, tr = audit_over(pk, sk, codec, model2, "p1-zono", ["query"])
    with pytest.raises(ValueError):
        protocol.privacy_audit(tr, ["query", "sensor:9"])


def test_random_gain_bounds_and_determinism():
    g1 = protocol.random_gain(np.random.default_rng(5), 3, [1, 2, 1])
    g2 = protocol.random_gain(np.random.default_rng(5), 3, [1, 2, 1])
    assert [L.shape for L in g1.blocks] == [(3, 1), (3, 2), (3, 1)]
    for a, b in zip(g1.blocks, g2.blocks):
        np.testing.assert_array_equal(a, b)
        assert np.all(np.abs(a) <= 1.0)
