"""Set operations with encrypted centers and offsets.

Only the position information of a set is sensitive here: centers c, offsets
b and measurements y travel as Paillier ciphertext vectors, while the shape
arrays G, A, H, R stay plain.  Every operation computes its plain arrays by
calling the plaintext set module on zero-centered twins, so the shape path
is bit-identical with and without encryption; the ciphertext path mirrors
the same linear algebra homomorphically.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import phe, sets
from .phe import EncVector, ScaleMismatchError, ScaleOverflowError


@dataclass(frozen=True)
class EncZonotope:
    enc_c: EncVector
    G: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G", np.asarray(self.G, dtype=float))
        if len(self.enc_c) != self.G.shape[0]:
            raise ValueError("encrypted center length != generator rows")

    @property
    def dim(self) -> int:
        return self.G.shape[0]


@dataclass(frozen=True)
class EncConsZonotope:
    enc_c: EncVector
    G: np.ndarray
    A: np.ndarray
    enc_b: EncVector

    def __post_init__(self):
        object.__setattr__(self, "G", np.asarray(self.G, dtype=float))
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        if len(self.enc_c) != self.G.shape[0]:
            raise ValueError("encrypted center length != generator rows")
        if self.A.shape[1] != self.G.shape[1]:
            raise ValueError("constraint columns != factor count")
        if len(self.enc_b) != self.A.shape[0]:
            raise ValueError("encrypted offset length != constraint rows")

    @property
    def dim(self) -> int:
        return self.G.shape[0]


@dataclass(frozen=True)
class EncStrip:
    enc_y: EncVector
    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", np.asarray(self.H, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        if len(self.enc_y) != self.H.shape[0] or self.R.shape[0] != self.H.shape[0]:
            raise ValueError("strip rows disagree")


EncSet = Union[EncZonotope, EncConsZonotope]


# --- ciphertext vector helpers ---


def encrypt_vector(pk, codec, x, rng) -> EncVector:
    x = np.asarray(x, dtype=float).reshape(-1)
    return EncVector(tuple(phe.raw_encrypt(pk, codec.encode(v), rng=rng) for v in x),
                     scale_exp=1)


def decrypt_vector(sk, codec, v: EncVector) -> np.ndarray:
    return np.array([codec.decode(phe.raw_decrypt(sk, ct), v.scale_exp)
                     for ct in v.cts], dtype=float)


def align_scale(pk, codec, v: EncVector, target: int) -> EncVector:
    """Lift a vector to a higher scale by multiplying with encoded 1.0."""
    if v.scale_exp > target:
        raise ScaleMismatchError(
            f"cannot lower scale {v.scale_exp} to {target}")
    one = codec.align_factor()
    out = v
    while out.scale_exp < target:
        cts = tuple(phe.mul_plain(pk, one, out.scalar(j),
                                  max_scale_exp=codec.max_scale_exp).ct
                    for j in range(len(out)))
        out = EncVector(cts, out.scale_exp + 1)
    return out


def vec_add(pk, a: EncVector, b: EncVector) -> EncVector:
    if len(a) != len(b):
        raise ValueError(f"vector lengths {len(a)} and {len(b)} differ")
    if a.scale_exp != b.scale_exp:
        raise ScaleMismatchError(
            f"cannot add vectors at scales {a.scale_exp} and {b.scale_exp}")
    return EncVector(tuple(x * y % pk.n_sq for x, y in zip(a.cts, b.cts)),
                     a.scale_exp)


def vec_sub(pk, a: EncVector, b: EncVector) -> EncVector:
    neg = EncVector(tuple(phe.neg_ct(pk, b.scalar(j)).ct for j in range(len(b))),
                    b.scale_exp)
    return vec_add(pk, a, neg)


def vec_concat(*vs: EncVector) -> EncVector:
    scales = {v.scale_exp for v in vs if len(v)}
    if len(scales) > 1:
        raise ScaleMismatchError(f"cannot concatenate scales {sorted(scales)}")
    scale = scales.pop() if scales else vs[0].scale_exp
    return EncVector(tuple(ct for v in vs for ct in v.cts), scale)


def matvec(pk, codec, M, v: EncVector) -> EncVector:
    """Encrypted M @ v for a plain matrix M; raises past the scale budget."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[1] != len(v):
        raise ValueError(f"matrix shape {M.shape} incompatible with vector {len(v)}")
    out_scale = v.scale_exp + 1
    if out_scale > codec.max_scale_exp:
        raise ScaleOverflowError(
            f"scale {out_scale} exceeds budget {codec.max_scale_exp}; refresh required")
    cts = []
    for i in range(M.shape[0]):
        acc = 1  # multiplicative identity: an unobfuscated encryption of zero
        for j in range(M.shape[1]):
            if M[i, j] == 0.0:
                continue
            term = phe.mul_plain(pk, codec.encode(M[i, j]), v.scalar(j),
                                 max_scale_exp=codec.max_scale_exp)
            acc = acc * term.ct % pk.n_sq
        cts.append(acc)
    return EncVector(tuple(cts), out_scale)


def _scale_by(pk, codec, w: float, v: EncVector) -> EncVector:
    k = codec.encode(w)
    return EncVector(tuple(phe.mul_plain(pk, k, v.scalar(j),
                                         max_scale_exp=codec.max_scale_exp).ct
                           for j in range(len(v))),
                     v.scale_exp + 1)


def _common_scale(pk, codec, vs: Sequence[EncVector]) -> list[EncVector]:
    target = max(v.scale_exp for v in vs)
    return [align_scale(pk, codec, v, target) for v in vs]


# --- selective encryption of sets and strips ---


def encrypt_zono(pk, codec, Z: sets.Zonotope, rng) -> EncZonotope:
    return EncZonotope(encrypt_vector(pk, codec, Z.c, rng), Z.G.copy())


def decrypt_zono(sk, codec, EZ: EncZonotope) -> sets.Zonotope:
    return sets.Zonotope(decrypt_vector(sk, codec, EZ.enc_c), EZ.G.copy())


def encrypt_cons(pk, codec, C: sets.ConsZonotope, rng) -> EncConsZonotope:
    return EncConsZonotope(encrypt_vector(pk, codec, C.c, rng), C.G.copy(),
                           C.A.copy(), encrypt_vector(pk, codec, C.b, rng))


def decrypt_cons(sk, codec, EC: EncConsZonotope) -> sets.ConsZonotope:
    b = decrypt_vector(sk, codec, EC.enc_b) if len(EC.enc_b) else np.zeros(0)
    return sets.ConsZonotope(decrypt_vector(sk, codec, EC.enc_c), EC.G.copy(),
                             EC.A.copy(), b)


def encrypt_strip(pk, codec, s: sets.Strip, rng) -> EncStrip:
    return EncStrip(encrypt_vector(pk, codec, s.y, rng), s.H.copy(), s.R.copy())


def _plain_strips(enc_strips: Sequence[EncStrip]) -> list[sets.Strip]:
    return [sets.Strip(es.H, np.zeros(es.H.shape[0]), es.R) for es in enc_strips]


# --- encrypted filter steps ---


def enc_meas_update_zono(pk, codec, EZ: EncZonotope,
                         enc_strips: Sequence[EncStrip],
                         lam: sets.LambdaGain | None = None) -> EncZonotope:
    """Strip intersection with an encrypted center and measurements.

    The gain must come from plain quantities only (G, H, R); by default the
    optimal gain is computed from exactly those.
    """
    n = EZ.dim
    strips0 = _plain_strips(enc_strips)
    zero = sets.Zonotope(np.zeros(n), EZ.G)
    if lam is None:
        lam = sets.compute_lambda(zero, strips0)
    plain = sets.intersect_zono_strips(zero, strips0, lam)

    vecs = _common_scale(pk, codec, [EZ.enc_c] + [es.enc_y for es in enc_strips])
    c_al, ys = vecs[0], vecs[1:]
    M = np.eye(n)
    for es, L in zip(enc_strips, lam.blocks):
        M = M - L @ es.H
    acc = matvec(pk, codec, M, c_al)
    for L, y in zip(lam.blocks, ys):
        acc = vec_add(pk, acc, matvec(pk, codec, L, y))
    return EncZonotope(acc, plain.G)


def enc_meas_update_cons(pk, codec, EC: EncConsZonotope,
                         enc_strips: Sequence[EncStrip],
                         lam: sets.LambdaGain) -> EncConsZonotope:
    """Exact strip intersection on an encrypted constrained set.

    The gain is a free parameter of the representation and must be chosen
    independently of the ciphertexts (the callers draw it at random).
    """
    n = EC.dim
    strips0 = _plain_strips(enc_strips)
    zero = sets.ConsZonotope(np.zeros(n), EC.G, EC.A, np.zeros(EC.A.shape[0]))
    plain = sets.intersect_conszono_strips(zero, strips0, lam)

    vecs = _common_scale(pk, codec, [EC.enc_c] + [es.enc_y for es in enc_strips])
    c_al, ys = vecs[0], vecs[1:]
    M = np.eye(n)
    for es, L in zip(enc_strips, lam.blocks):
        M = M - L @ es.H
    acc = matvec(pk, codec, M, c_al)
    for L, y in zip(lam.blocks, ys):
        acc = vec_add(pk, acc, matvec(pk, codec, L, y))

    # new offset rows y_j - H_j c, one per strip row, at scale c+1
    new_blocks = []
    for es, y in zip(enc_strips, ys):
        Hc = matvec(pk, codec, es.H, c_al)
        new_blocks.append(vec_sub(pk, align_scale(pk, codec, y, Hc.scale_exp), Hc))
    target_b = max([EC.enc_b.scale_exp] + [blk.scale_exp for blk in new_blocks])
    parts = [align_scale(pk, codec, EC.enc_b, target_b)]
    parts += [align_scale(pk, codec, blk, target_b) for blk in new_blocks]
    return EncConsZonotope(acc, plain.G, plain.A, vec_concat(*parts))


def enc_time_update(pk, codec, ES: EncSet, model: sets.SystemModel, q: int) -> EncSet:
    """Propagate, add noise generators, reduce order; center stays encrypted.

    For constrained sets only the joint generator reduction runs here; the
    offsets cannot be folded without decrypting, so constraint elimination
    waits for the next plaintext refresh.
    """
    enc_c = matvec(pk, codec, model.F, ES.enc_c)
    if isinstance(ES, EncConsZonotope):
        zero = sets.ConsZonotope(np.zeros(ES.dim), ES.G, ES.A,
                                 np.zeros(ES.A.shape[0]))
        twin = sets.time_update(zero, model, q)
        return EncConsZonotope(enc_c, twin.G, twin.A, ES.enc_b)
    twin = sets.time_update(sets.Zonotope(np.zeros(ES.dim), ES.G), model, q)
    return EncZonotope(enc_c, twin.G)


def enc_diffusion_zono(pk, codec, EZs: Sequence[EncZonotope],
                       weights: sets.WeightVector) -> EncZonotope:
    """Weighted fusion with encrypted centers; weights from plain radii."""
    if abs(float(weights.w.sum()) - 1.0) > 1e-9:
        raise ValueError("diffusion weights must be normalized to sum 1")
    twin = sets.intersect_zonos_weighted(
        [sets.Zonotope(np.zeros(E.dim), E.G) for E in EZs], weights)
    vecs = _common_scale(pk, codec, [E.enc_c for E in EZs])
    acc = None
    for wj, v in zip(weights.w, vecs):
        term = _scale_by(pk, codec, float(wj), v)
        acc = term if acc is None else vec_add(pk, acc, term)
    return EncZonotope(acc, twin.G)


def enc_diffusion_cons(pk, codec, ECs: Sequence[EncConsZonotope]) -> EncConsZonotope:
    """Exact fusion of encrypted constrained sets (first center kept)."""
    if len(ECs) < 2:
        raise ValueError("diffusion needs at least two sets")
    twin = sets.intersect_conszonos(
        [sets.ConsZonotope(np.zeros(E.dim), E.G, E.A, np.zeros(E.A.shape[0]))
         for E in ECs])
    cs = _common_scale(pk, codec, [E.enc_c for E in ECs])
    diffs = [vec_sub(pk, cj, cs[0]) for cj in cs[1:]]
    target_b = max([E.enc_b.scale_exp for E in ECs] + [d.scale_exp for d in diffs])
    parts = [align_scale(pk, codec, E.enc_b, target_b) for E in ECs]
    parts += [align_scale(pk, codec, d, target_b) for d in diffs]
    return EncConsZonotope(ECs[0].enc_c, twin.G, twin.A, vec_concat(*parts))
