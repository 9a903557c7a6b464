"""Multi-party estimation roles, transcripts, and privacy audits.

Two protocols share the same cast. In the first, every sensor sends an
encrypted strip to an aggregator that folds all of them into an encrypted
prior. In the second, group managers intersect in plaintext, encrypt their
local result, and the aggregator only fuses. A query node holds the sole
decryption key; everything it sends back (refresh re-encryptions, plaintext
broadcasts) is part of the protocol and shows up in the transcript.

Audits are mechanical: they scan recorded views for mistagged or leaked
fields and evaluate the published collusion conditions. They are evidence
checks, not cryptographic simulators.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import encsets, phe, sets

log = logging.getLogger(__name__)

TAG_PUBLIC = "plaintext-public"
TAG_PRIVATE = "ciphertext-private"
TAGS = (TAG_PUBLIC, TAG_PRIVATE)

MESSAGE_KINDS = ("InitSet", "EncStrip", "EncSet", "Result", "Refresh")
VARIANTS = ("p1-zono", "p1-cons", "p2-zono", "p2-cons")

ROLE_AGGREGATOR = "aggregator"
ROLE_QUERY = "query"


class ProtocolError(Exception):
    pass


class StallError(ProtocolError):
    """A round is missing expected messages; the step cannot complete."""


@dataclass(frozen=True)
class Sealed:
    """Transport-sealed value: usable by the receiver, opaque on the record.

    Models point-to-point confidentiality for a plaintext parameter that
    must not enter the shared transcript (the swap-mitigated strip radius).
    """

    value: Any


@dataclass(frozen=True)
class ProtocolConfig:
    variant: str
    swap: bool = False
    refresh: bool = True
    q: int = 5
    max_constraints: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.swap and self.variant != "p1-zono":
            raise ValueError("swap mitigation applies to p1-zono only")
        if self.q < 1:
            raise ValueError("reduction order must be >= 1")

    @property
    def cons(self) -> bool:
        return self.variant.endswith("-cons")

    @property
    def p2(self) -> bool:
        return self.variant.startswith("p2")


@dataclass(frozen=True)
class Message:
    kind: str
    sender: str
    receiver: str
    k: int
    payload: dict
    tags: dict

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if set(self.tags) != set(self.payload):
            raise ValueError("every payload field needs exactly one tag")
        for name, tag in self.tags.items():
            if tag not in TAGS:
                raise ValueError(f"bad tag {tag!r} on field {name!r}")


def serialize_value(v):
    """JSON-safe form of a payload value; ciphertexts become base64 blobs,
    sealed values become bare markers, key material is refused outright."""
    if isinstance(v, (phe.PaillierPrivateKey, phe.PaillierKeyPair)):
        raise TypeError("private key material must never enter a transcript")
    if isinstance(v, Sealed):
        return {"sealed": True}
    if isinstance(v, phe.EncVector):
        return {"enc": {
            "scale_exp": v.scale_exp,
            "cts": [base64.b64encode(v.scalar(i).to_bytes()).decode("ascii")
                    for i in range(len(v))],
        }}
    if isinstance(v, sets.LambdaGain):
        return [np.asarray(L, dtype=float).tolist() for L in v.blocks]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer, np.floating, np.bool_)):
        return v.item()
    if isinstance(v, dict):
        return {str(kk): serialize_value(vv) for kk, vv in v.items()}
    if isinstance(v, (list, tuple)):
        return [serialize_value(vv) for vv in v]
    if v is None or isinstance(v, (bool, int, float, str)):
        return v
    raise TypeError(f"cannot record value of type {type(v).__name__}")


class Transcript:
    """Append-only record of messages, inputs, and coin draws.

    Values are serialized at append time, so the in-memory records are the
    same objects that land on disk and determinism is a byte property.
    """

    def __init__(self, meta: dict):
        self.meta = dict(meta)
        self.records: list[dict] = []

    def add_message(self, msg: Message) -> dict:
        rec = {
            "type": "message", "kind": msg.kind, "sender": msg.sender,
            "receiver": msg.receiver, "k": msg.k,
            "payload": {name: serialize_value(v)
                        for name, v in msg.payload.items()},
            "tags": dict(msg.tags),
        }
        self.records.append(rec)
        return rec

    def add_input(self, role: str, k: int, name: str, value) -> dict:
        rec = {"type": "input", "role": role, "k": k, "name": name,
               "value": serialize_value(value)}
        self.records.append(rec)
        return rec

    def add_coins(self, role: str, k: int, name: str, value) -> dict:
        rec = {"type": "coins", "role": role, "k": k, "name": name,
               "value": serialize_value(value)}
        self.records.append(rec)
        return rec

    def view(self, role: str) -> list[dict]:
        """Everything the role saw: messages addressed to it, its own
        inputs, its own coins."""
        out = []
        for r in self.records:
            if r["type"] == "message" and r["receiver"] == role:
                out.append(r)
            elif r["type"] in ("input", "coins") and r["role"] == role:
                out.append(r)
        return out

    def coins(self, name: str) -> list[dict]:
        return [r for r in self.records
                if r["type"] == "coins" and r["name"] == name]

    def to_jsonl(self) -> str:
        head = {"type": "meta", **serialize_value(self.meta)}
        lines = [json.dumps(head, sort_keys=True, separators=(",", ":"))]
        lines += [json.dumps(r, sort_keys=True, separators=(",", ":"))
                  for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "Transcript":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or lines[0].get("type") != "meta":
            raise ProtocolError("transcript must start with a meta record")
        meta = {k: v for k, v in lines[0].items() if k != "type"}
        tr = cls(meta)
        tr.records = lines[1:]
        return tr


# --- payload helpers ---


def unseal(v):
    return v.value if isinstance(v, Sealed) else v


def set_payload(es) -> tuple[dict, dict]:
    if isinstance(es, encsets.EncConsZonotope):
        payload = {"enc_c": es.enc_c, "G": es.G, "A": es.A,
                   "enc_b": es.enc_b}
        tags = {"enc_c": TAG_PRIVATE, "G": TAG_PUBLIC, "A": TAG_PUBLIC,
                "enc_b": TAG_PRIVATE}
    else:
        payload = {"enc_c": es.enc_c, "G": es.G}
        tags = {"enc_c": TAG_PRIVATE, "G": TAG_PUBLIC}
    return payload, tags


def enc_set_from_payload(payload: dict, cons: bool):
    G = np.asarray(payload["G"], dtype=float)
    if cons:
        return encsets.EncConsZonotope(
            payload["enc_c"], G, np.asarray(payload["A"], dtype=float),
            payload["enc_b"])
    return encsets.EncZonotope(payload["enc_c"], G)


def plain_payload(S) -> tuple[dict, dict]:
    if isinstance(S, sets.ConsZonotope):
        payload = {"c": S.c, "G": S.G, "A": S.A, "b": S.b}
    else:
        payload = {"c": S.c, "G": S.G}
    return payload, {name: TAG_PUBLIC for name in payload}


def plain_set_from_payload(payload: dict, cons: bool):
    c = np.asarray(payload["c"], dtype=float)
    G = np.asarray(payload["G"], dtype=float)
    if cons:
        return sets.ConsZonotope(c, G, np.asarray(payload["A"], dtype=float),
                                 np.asarray(payload["b"], dtype=float))
    return sets.Zonotope(c, G)


def random_gain(nprng: np.random.Generator, n: int,
                rows: Sequence[int]) -> sets.LambdaGain:
    """Gain blocks drawn i.i.d. uniform on [-1, 1], one per strip."""
    return sets.LambdaGain(tuple(nprng.uniform(-1.0, 1.0, (n, p))
                                 for p in rows))


def gain_from_coins(value) -> sets.LambdaGain:
    return sets.LambdaGain(tuple(np.asarray(L, dtype=float) for L in value))


# --- roles ---


class SensorNode:
    """Holds one measurement model row block and the public key."""

    def __init__(self, sensor_id: int, H, R, pk, codec, rng, swap=False):
        self.sensor_id = sensor_id
        self.role = f"sensor:{sensor_id}"
        self.H = np.asarray(H, dtype=float)
        self.R = np.asarray(R, dtype=float)
        self.pk = pk
        self.codec = codec
        self.rng = rng
        self.swap = swap

    def step(self, k: int, y, transcript: Transcript) -> Message:
        y = np.asarray(y, dtype=float)
        transcript.add_input(self.role, k, "y", y)
        enc_y = encsets.encrypt_vector(self.pk, self.codec, y, self.rng)
        if self.swap:
            payload = {"enc_y": enc_y, "H": self.H, "R": Sealed(self.R)}
            tags = {"enc_y": TAG_PRIVATE, "H": TAG_PUBLIC, "R": TAG_PRIVATE}
        else:
            payload = {"enc_y": enc_y, "H": self.H, "R": self.R}
            tags = {"enc_y": TAG_PRIVATE, "H": TAG_PUBLIC, "R": TAG_PUBLIC}
        msg = Message("EncStrip", self.role, ROLE_AGGREGATOR, k, payload,
                      tags)
        transcript.add_message(msg)
        return msg


class GroupManager:
    """Runs the plaintext strip intersection for its sensors, then encrypts.

    The prior arrives in plaintext from the query each round; the group's
    measurements never leave the group in any form.
    """

    def __init__(self, group_id: int, sensors, pk, codec,
                 cfg: ProtocolConfig, rng):
        self.group_id = group_id
        self.role = f"group:{group_id}"
        self.sensors = [(sid, np.asarray(H, dtype=float),
                         np.asarray(R, dtype=float)) for sid, H, R in sensors]
        self.pk = pk
        self.codec = codec
        self.cfg = cfg
        self.rng = rng
        self.prior = None

    def receive(self, msg: Message) -> None:
        if msg.kind != "InitSet":
            raise ProtocolError(f"group cannot consume {msg.kind}")
        self.receive_plain(plain_set_from_payload(msg.payload, self.cfg.cons))

    def receive_plain(self, S) -> None:
        self.prior = S

    def step(self, k: int, measurements: dict, transcript: Transcript
             ) -> Message:
        if self.prior is None:
            raise ProtocolError(f"{self.role}: no prior to intersect")
        expected = {sid for sid, _, _ in self.sensors}
        if set(measurements) != expected:
            raise StallError(
                f"step {k}: {self.role} expected measurements for "
                f"{sorted(expected)}, got {sorted(measurements)}")
        strips = []
        for sid, H, R in self.sensors:
            y = np.asarray(measurements[sid], dtype=float)
            transcript.add_input(self.role, k, f"y:{sid}", y)
            strips.append(sets.Strip(H, y, R))
        if not strips:
            local = self.prior
        elif self.cfg.cons:
            local = sets.intersect_conszono_strips(self.prior, strips)
        else:
            lam = sets.compute_lambda(self.prior, strips)
            local = sets.intersect_zono_strips(self.prior, strips, lam)
        if self.cfg.cons:
            es = encsets.encrypt_cons(self.pk, self.codec, local, self.rng)
        else:
            es = encsets.encrypt_zono(self.pk, self.codec, local, self.rng)
        payload, tags = set_payload(es)
        msg = Message("EncSet", self.role, ROLE_AGGREGATOR, k, payload, tags)
        transcript.add_message(msg)
        return msg


class Aggregator:
    """Encrypted-domain measurement/diffusion and time updates.

    Never sees a plaintext center or measurement; all gains and weights are
    functions of the plain generator data riding along with the ciphertexts.
    """

    def __init__(self, pk, codec, model: sets.SystemModel,
                 cfg: ProtocolConfig, expected: int, rng,
                 nprng: np.random.Generator):
        self.pk = pk
        self.codec = codec
        self.model = model
        self.cfg = cfg
        self.expected = expected
        self.rng = rng
        self.nprng = nprng
        self.state = None

    def receive(self, msg: Message) -> None:
        if msg.kind not in ("InitSet", "Refresh"):
            raise ProtocolError(f"aggregator cannot consume {msg.kind}")
        self.state = enc_set_from_payload(msg.payload, self.cfg.cons)

    def step_p1(self, k: int, strip_msgs: Sequence[Message],
                transcript: Transcript) -> Message:
        if len(strip_msgs) != self.expected:
            raise StallError(f"step {k}: expected {self.expected} strips, "
                             f"got {len(strip_msgs)}")
        if self.state is None:
            raise ProtocolError("aggregator has no prior set")
        enc_strips = [
            encsets.EncStrip(m.payload["enc_y"],
                             np.asarray(m.payload["H"], dtype=float),
                             np.asarray(unseal(m.payload["R"]), dtype=float))
            for m in strip_msgs
        ]
        state = self.state
        if enc_strips:
            if self.cfg.cons:
                lam = random_gain(self.nprng, state.dim,
                                  [es.R.shape[0] for es in enc_strips])
                transcript.add_coins(ROLE_AGGREGATOR, k, "lambda", lam)
                state = encsets.enc_meas_update_cons(
                    self.pk, self.codec, state, enc_strips, lam)
            else:
                state = encsets.enc_meas_update_zono(
                    self.pk, self.codec, state, enc_strips)
        state = encsets.enc_time_update(self.pk, self.codec, state,
                                        self.model, self.cfg.q)
        if self.cfg.swap:
            perm = self.nprng.permutation(state.G.shape[1])
            transcript.add_coins(ROLE_AGGREGATOR, k, "shuffle", perm)
            state = encsets.EncZonotope(state.enc_c, state.G[:, perm])
        self.state = state
        log.debug("p1 step %d: result scale %d", k, state.enc_c.scale_exp)
        payload, tags = set_payload(state)
        msg = Message("Result", ROLE_AGGREGATOR, ROLE_QUERY, k, payload, tags)
        transcript.add_message(msg)
        return msg

    def step_p2(self, k: int, eset_msgs: Sequence[Message],
                transcript: Transcript) -> Message:
        if len(eset_msgs) != self.expected:
            raise StallError(f"step {k}: expected {self.expected} group "
                             f"sets, got {len(eset_msgs)}")
        esets = [enc_set_from_payload(m.payload, self.cfg.cons)
                 for m in eset_msgs]
        if len(esets) == 1:
            fused = esets[0]
        elif self.cfg.cons:
            fused = encsets.enc_diffusion_cons(self.pk, self.codec, esets)
        else:
            w = sets.compute_weights(
                [sets.Zonotope(np.zeros(E.dim), E.G) for E in esets])
            fused = encsets.enc_diffusion_zono(self.pk, self.codec, esets, w)
        out = encsets.enc_time_update(self.pk, self.codec, fused, self.model,
                                      self.cfg.q)
        log.debug("p2 step %d: result scale %d", k, out.enc_c.scale_exp)
        payload, tags = set_payload(out)
        msg = Message("Result", ROLE_AGGREGATOR, ROLE_QUERY, k, payload, tags)
        transcript.add_message(msg)
        return msg


class QueryNode:
    """Sole holder of the decryption key."""

    def __init__(self, keys: phe.PaillierKeyPair, codec,
                 cfg: ProtocolConfig, rng, group_roles: tuple = ()):
        if keys.private is None:
            raise ValueError("query node needs the private key")
        self.role = ROLE_QUERY
        self.keys = keys
        self.codec = codec
        self.cfg = cfg
        self.rng = rng
        self.group_roles = tuple(group_roles)

    def _reduce(self, S):
        if self.cfg.cons:
            mc = self.cfg.max_constraints
            if mc is None:
                mc = 3 * S.dim
            return sets.reduce_order_cons(S, self.cfg.q, mc)
        return sets.reduce_order(S, self.cfg.q)

    def init_messages(self, S0, transcript: Transcript) -> list[Message]:
        """Plant the initial prior: encrypted for the aggregator-centric
        protocol, plaintext to each group for the group-centric one."""
        out = []
        if self.cfg.p2:
            payload, tags = plain_payload(S0)
            for role in self.group_roles:
                msg = Message("InitSet", self.role, role, 0, dict(payload),
                              dict(tags))
                transcript.add_message(msg)
                out.append(msg)
        else:
            if self.cfg.cons:
                es = encsets.encrypt_cons(self.keys.public, self.codec, S0,
                                          self.rng)
            else:
                es = encsets.encrypt_zono(self.keys.public, self.codec, S0,
                                          self.rng)
            payload, tags = set_payload(es)
            msg = Message("InitSet", self.role, ROLE_AGGREGATOR, 0, payload,
                          tags)
            transcript.add_message(msg)
            out.append(msg)
        return out

    def step(self, k: int, result: Message, transcript: Transcript):
        """Decrypt the round result; hand back the next prior if the
        variant calls for one. Returns (decrypted set, outgoing messages)."""
        if result.kind != "Result":
            raise ProtocolError(f"query cannot consume {result.kind}")
        es = enc_set_from_payload(result.payload, self.cfg.cons)
        if self.cfg.cons:
            S = encsets.decrypt_cons(self.keys.private, self.codec, es)
        else:
            S = encsets.decrypt_zono(self.keys.private, self.codec, es)
        outgoing = []
        if self.cfg.p2:
            reduced = self._reduce(S)
            payload, tags = plain_payload(reduced)
            for role in self.group_roles:
                msg = Message("InitSet", self.role, role, k, dict(payload),
                              dict(tags))
                transcript.add_message(msg)
                outgoing.append(msg)
        elif self.cfg.refresh:
            reduced = self._reduce(S)
            if self.cfg.cons:
                es2 = encsets.encrypt_cons(self.keys.public, self.codec,
                                           reduced, self.rng)
            else:
                es2 = encsets.encrypt_zono(self.keys.public, self.codec,
                                           reduced, self.rng)
            payload, tags = set_payload(es2)
            msg = Message("Refresh", self.role, ROLE_AGGREGATOR, k, payload,
                          tags)
            transcript.add_message(msg)
            outgoing.append(msg)
        return S, outgoing


# --- audits ---


@dataclass
class AuditReport:
    coalition: tuple
    variant: str
    swap: bool
    wire_ok: bool
    view_ok: bool
    sk_confined: bool
    condition: str
    condition_holds: bool | None
    details: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (self.wire_ok and self.view_ok and self.sk_confined
                and self.condition_holds is not False)

    def render(self) -> str:
        lines = [
            f"coalition: {', '.join(self.coalition) or '(none)'}",
            f"variant: {self.variant}" + (" +swap" if self.swap else ""),
            f"wire check: {'ok' if self.wire_ok else 'VIOLATION'}",
            f"coalition view check: {'ok' if self.view_ok else 'VIOLATION'}",
            f"key confinement: {'ok' if self.sk_confined else 'VIOLATION'}",
            f"collusion condition: {self.condition}",
        ]
        if self.condition_holds is None:
            lines.append("condition evaluation: not applicable "
                         "(query not in coalition)")
        else:
            for name, val in self.details.items():
                lines.append(f"  {name} = {val}")
            lines.append("condition evaluation: "
                         + ("holds" if self.condition_holds else "FAILS"))
        lines += [f"note: {n}" for n in self.notes]
        lines.append(f"verdict: {'PASS' if self.passed else 'FLAGGED'}")
        return "\n".join(lines)


def _is_protected(value) -> bool:
    return isinstance(value, dict) and ("enc" in value or "sealed" in value)


def _looks_like_key_material(name, value) -> bool:
    if name in ("sk", "private_key"):
        return True
    if isinstance(value, dict):
        keys = set(value)
        return {"p", "q"} <= keys or {"lam", "mu"} <= keys
    return False


def _known_roles(meta) -> set:
    roles = {ROLE_QUERY, ROLE_AGGREGATOR}
    roles |= {f"sensor:{i}" for i in range(meta.get("m", 0))}
    groups = meta.get("groups") or []
    roles |= {f"group:{j}" for j in range(len(groups))}
    return roles


def privacy_audit(transcript: Transcript, coalition: Sequence[str]
                  ) -> AuditReport:
    """Mechanical audit of a recorded run against a colluding coalition.

    Checks, in order: (a) every field tagged ciphertext-private is actually
    opaque on the wire, globally and in the coalition's received view;
    (b) no payload carries key material; (c) the published collusion
    condition for the recorded variant, evaluated for this coalition.
    """
    meta = transcript.meta
    coalition = tuple(coalition)
    known = _known_roles(meta)
    unknown = [r for r in coalition if r not in known]
    if unknown:
        raise ValueError(f"unknown coalition members: {unknown}")
    variant = meta["variant"]
    swap = bool(meta.get("swap", False))
    notes = []

    msgs = [r for r in transcript.records if r["type"] == "message"]
    if not msgs:
        raise ProtocolError("incomplete transcript: no messages recorded")

    def private_leaks(records):
        leaks = []
        for r in records:
            for name, tag in r["tags"].items():
                if tag == TAG_PRIVATE and not _is_protected(
                        r["payload"].get(name)):
                    leaks.append((r["kind"], r["sender"], name))
            if r["kind"] == "EncStrip" and r["tags"].get("enc_y") != \
                    TAG_PRIVATE:
                leaks.append((r["kind"], r["sender"], "enc_y:mistagged"))
        return leaks

    wire_leaks = private_leaks(msgs)
    wire_ok = not wire_leaks
    for kind, sender, name in wire_leaks:
        notes.append(f"private field {name!r} exposed in {kind} "
                     f"from {sender}")

    if ROLE_QUERY in coalition:
        view_ok = True  # the query is entitled to the decrypted results
    else:
        view_ok = not private_leaks(
            [r for r in msgs if r["receiver"] in coalition])

    sk_confined = True
    for r in msgs:
        for name, value in r["payload"].items():
            if _looks_like_key_material(name, value):
                sk_confined = False
                notes.append(f"key-material field {name!r} in {r['kind']} "
                             f"from {r['sender']}")

    # collusion conditions per variant
    if variant == "p1-cons":
        condition = "unconditional (constrained update hides the center)"
        holds, details = True, {}
    elif variant == "p2-cons":
        condition = "unconditional (constrained fusion hides the centers)"
        holds, details = True, {}
    elif variant == "p1-zono" and swap:
        condition = "unconditional (swap mitigation: radii withheld, " \
                    "generators shuffled)"
        holds, details = True, {}
    elif variant == "p1-zono":
        condition = "m_r*p > n"
        if ROLE_QUERY not in coalition:
            holds, details = None, {}
        else:
            rows_all = meta["sensor_rows"]
            colluding = {int(r.split(":")[1]) for r in coalition
                         if r.startswith("sensor:")}
            remaining = [p for i, p in enumerate(rows_all)
                         if i not in colluding]
            rows = int(sum(remaining))
            p_uniform = rows_all[0] if len(set(rows_all)) == 1 else None
            details = {"m_r": len(remaining), "p": p_uniform,
                       "n": meta["n"], "rows": rows}
            holds = rows > meta["n"]
    else:  # p2-zono
        condition = "d_r > 1"
        if ROLE_QUERY not in coalition:
            holds, details = None, {}
        else:
            d = len(meta.get("groups") or [])
            colluding = {r for r in coalition if r.startswith("group:")}
            d_r = d - len(colluding)
            details = {"d": d, "d_r": d_r}
            holds = d_r > 1

    return AuditReport(coalition=coalition, variant=variant, swap=swap,
                       wire_ok=wire_ok, view_ok=view_ok,
                       sk_confined=sk_confined, condition=condition,
                       condition_holds=holds, details=details, notes=notes)
