"""Two-party BB84 session engine with pluggable source, channel, detector.

The protocol runs as two message-driven state machines exchanging tagged
wire messages; the transport (in-process pump here, framed sockets in
netchan) only moves bytes.  One session: hello exchange, |Omega| signal
emissions, then the classical announcements in fixed order: Bob's bases;
Alice's bases and test-half choice R; Bob's key subset S; Alice's test
bits; Bob's error rate and verdict; Bob's permutation, code choice, and
encrypted syndrome; a keyed confirmation hash; done or abort.

Randomness is split into named streams derived from one master seed
(emission coins, subset choices, channel noise, detector outcomes, and the
pre-shared secret pool), so a run is reproducible bit-for-bit and two
processes given the same seed produce identical transcripts.

Error rates and sizes follow the 4N(1+epsilon) layout: Alice's test half R
has size |Omega|/2, the test set T needs at least N matched bases, the key
set S is exactly N positions sampled from the complement.  With detector
efficiency below one, |Omega| is scaled by 1/efficiency^2 so both T and S
stay feasible.
"""

from __future__ import annotations

import collections
import hashlib
import math
import random
import struct
from dataclasses import dataclass, field

import numpy as np

from .codes import (
    DecodingFailure,
    LinearCode,
    code_from_descriptor,
    rec_hamming,
    rec_identity,
    rec_repetition,
    rec_verbatim,
)
from .gf2 import BitVec

WIRE_VERSION = 1

TAG_HELLO = 0x01
TAG_QSIGNAL = 0x02
TAG_BASES_B = 0x03
TAG_BASES_A_AND_R = 0x04
TAG_SUBSET_S = 0x05
TAG_TEST_BITS = 0x06
TAG_DELTA_DECISION = 0x07
TAG_PERM = 0x08
TAG_CODE = 0x09
TAG_SYNDROME_ENC = 0x0A
TAG_KEY_CONFIRM = 0x0B
TAG_ABORT = 0x0C
TAG_DONE = 0x0D

TAG_NAMES = {
    TAG_HELLO: "HELLO",
    TAG_QSIGNAL: "QSIGNAL",
    TAG_BASES_B: "BASES_B",
    TAG_BASES_A_AND_R: "BASES_A_AND_R",
    TAG_SUBSET_S: "SUBSET_S",
    TAG_TEST_BITS: "TEST_BITS",
    TAG_DELTA_DECISION: "DELTA_DECISION",
    TAG_PERM: "PERM",
    TAG_CODE: "CODE",
    TAG_SYNDROME_ENC: "SYNDROME_ENC",
    TAG_KEY_CONFIRM: "KEY_CONFIRM",
    TAG_ABORT: "ABORT",
    TAG_DONE: "DONE",
}
_NAME_TAGS = {v: k for k, v in TAG_NAMES.items()}

# announcements that belong to the replayable transcript, in protocol order
TRANSCRIPT_TAGS = (
    TAG_BASES_B,
    TAG_BASES_A_AND_R,
    TAG_SUBSET_S,
    TAG_TEST_BITS,
    TAG_DELTA_DECISION,
    TAG_PERM,
    TAG_CODE,
    TAG_SYNDROME_ENC,
    TAG_KEY_CONFIRM,
    TAG_ABORT,
)

ROLE_ALICE = 0
ROLE_BOB = 1

CONFIRM_KEY_BITS = 128
CONFIRM_MAC_BYTES = 8

ABORT_SOURCE = "source_noncompliant"
ABORT_SIFT = "sift_failed"
ABORT_DELTA = "delta_exceeded"
ABORT_RECONCILE = "reconcile_failed"
ABORT_CONFIRM = "key_confirm_failed"
ABORT_POOL = "pool_exhausted"
ABORT_VERSION = "version_mismatch"
ABORT_PHASE = "phase_order"
ABORT_TRANSPORT = "transport_failure"

SOURCE_TOLERANCE = 1e-10


class ProtocolError(RuntimeError):
    pass


class ReplayMismatch(ProtocolError):
    """A re-run diverged from the recorded transcript."""


class PoolExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class WireMessage:
    tag: int
    payload: bytes

    def name(self) -> str:
        return TAG_NAMES.get(self.tag, f"TAG_{self.tag:02X}")


# ---------------------------------------------------------------------------
# randomness plumbing


def stream_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{master}|{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


class SecretPool:
    """Deterministic pre-shared secret bits, consumed strictly in order.

    Both parties build the pool from the same seed and must take bits in
    the same sequence; running out is a protocol abort, not an exception
    escaping to the caller.
    """

    def __init__(self, seed: int, nbits: int) -> None:
        if nbits < 0:
            raise ValueError("pool size cannot be negative")
        blocks = []
        for counter in range((nbits + 255) // 256):
            blocks.append(hashlib.sha256(f"{seed}|pool|{counter}".encode()).digest())
        raw = b"".join(blocks)[: (nbits + 7) // 8]
        self._value = int.from_bytes(raw, "little") & ((1 << nbits) - 1 if nbits else 0)
        self.capacity = nbits
        self.offset = 0

    def remaining(self) -> int:
        return self.capacity - self.offset

    def take(self, nbits: int) -> BitVec:
        if nbits > self.remaining():
            raise PoolExhausted(f"need {nbits} bits, {self.remaining()} left")
        out = (self._value >> self.offset) & ((1 << nbits) - 1 if nbits else 0)
        self.offset += nbits
        return BitVec(nbits, out)


# ---------------------------------------------------------------------------
# source models

_KET = {
    (0, 0): np.array([1.0, 0.0], dtype=np.complex128),  # |0>
    (0, 1): np.array([0.0, 1.0], dtype=np.complex128),  # |1>
    (1, 0): np.array([1.0, 1.0], dtype=np.complex128) / math.sqrt(2),  # |+>
    (1, 1): np.array([1.0, -1.0], dtype=np.complex128) / math.sqrt(2),  # |->
}


def _bb84_state(a: int, g: int) -> np.ndarray:
    k = _KET[(a, g)]
    return np.outer(k, k.conj())


class SourceModel:
    """Base: a table of emitted states rho(a, g) with joint weights p(a, g).

    Subclasses fill `probs` (2x2, rows indexed by basis, p[a,0]+p[a,1]=1/2)
    and `emission` (2x2 object array of density matrices over the emitted
    space).  The signal the receiver measures is always the first qubit of
    the emitted space; compliant models emit exactly one qubit.
    """

    kind = "abstract"

    def __init__(self, probs: np.ndarray, emission: list[list[np.ndarray]]) -> None:
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (2, 2) or np.any(probs < 0):
            raise ValueError("need nonnegative joint weights p[a][g]")
        for a in range(2):
            if abs(probs[a].sum() - 0.5) > 1e-12:
                raise ValueError("basis choice must be an unbiased coin")
        self.probs = probs
        self.emission = emission

    def emit(self, a: int, g: int, rng=None) -> np.ndarray:
        return self.emission[a][g]

    def key_bit_probability(self, a: int) -> float:
        """P(g = 1 | sent basis = a)."""
        return float(2.0 * self.probs[a][1])

    def averaged_state(self, a: int) -> np.ndarray:
        acc = np.zeros_like(self.emission[a][0])
        for g in range(2):
            acc = acc + 2.0 * self.probs[a][g] * self.emission[a][g]
        return acc


class PerfectSource(SourceModel):
    """Textbook BB84 states; `bias` skews the key bit, not the basis."""

    kind = "perfect"

    def __init__(self, bias: float = 0.5) -> None:
        if not 0.0 < bias < 1.0:
            raise ValueError("bias must sit strictly inside (0, 1)")
        probs = np.array([[1 - bias, bias], [1 - bias, bias]]) / 2.0
        emission = [[_bb84_state(a, g) for g in range(2)] for a in range(2)]
        super().__init__(probs, emission)
        self.bias = bias


class RotatedZSource(SourceModel):
    """BB84 states sent through a fixed rotation about the z axis.

    The per-state tilt is visible to the receiver, but the key-averaged
    emission is still the maximally mixed state for either basis, so the
    source stays admissible.
    """

    kind = "rotated_z"

    def __init__(self, theta: float, bias: float = 0.5) -> None:
        if not 0.0 < bias < 1.0:
            raise ValueError("bias must sit strictly inside (0, 1)")
        rz = np.diag(
            [np.exp(-0.5j * theta), np.exp(0.5j * theta)]
        ).astype(np.complex128)
        probs = np.array([[1 - bias, bias], [1 - bias, bias]]) / 2.0
        emission = [
            [rz @ _bb84_state(a, g) @ rz.conj().T for g in range(2)] for a in range(2)
        ]
        super().__init__(probs, emission)
        self.theta = theta
        self.bias = bias


class EntangledSource(SourceModel):
    """Signal qubit born from measuring half of a fixed entangled pair.

    The helper qubit is measured in the Z basis for a=0 and in a basis
    tilted by phi off X for a=1; the outcome is the key bit.  Whatever phi
    is, the unmeasured half averages to the same marginal, which is the
    whole point of realizing the source this way.
    """

    kind = "entangled"

    def __init__(self, phi: float = 0.0) -> None:
        pair = np.zeros(4, dtype=np.complex128)
        pair[0b00] = 1 / math.sqrt(2)
        pair[0b11] = 1 / math.sqrt(2)
        rho_pair = np.outer(pair, pair.conj())

        def helper_projector(axis_angle: float, outcome: int) -> np.ndarray:
            # measurement axis in the x-z plane, tilted off +z by axis_angle
            v = np.array(
                [math.cos(axis_angle / 2.0), math.sin(axis_angle / 2.0)],
                dtype=np.complex128,
            )
            if outcome == 1:
                v = np.array(
                    [-math.sin(axis_angle / 2.0), math.cos(axis_angle / 2.0)],
                    dtype=np.complex128,
                )
            return np.outer(v, v.conj())

        probs = np.zeros((2, 2))
        emission = [[None, None], [None, None]]
        angles = {0: 0.0, 1: math.pi / 2.0 + phi}
        for a in range(2):
            for g in range(2):
                proj = np.kron(helper_projector(angles[a], g), np.eye(2))
                sub = proj @ rho_pair @ proj
                weight = float(np.trace(sub).real)
                probs[a][g] = 0.5 * weight
                reduced = sub.reshape(2, 2, 2, 2)
                collapsed = np.einsum("asat->st", reduced) / weight
                emission[a][g] = collapsed
        super().__init__(probs, emission)
        self.phi = phi


class LeakyTwoCopySource(SourceModel):
    """Non-compliant: sometimes emits an identical second copy to the side.

    The emitted space is two qubits (signal plus leak); the basis-averaged
    emissions differ between the two bases, so the compliance gate must
    reject this model before any signal leaves.
    """

    kind = "leaky_two_copy"

    def __init__(self, leak_prob: float = 0.5) -> None:
        if not 0.0 <= leak_prob <= 1.0:
            raise ValueError("leak probability must sit in [0, 1]")
        vacuum = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.complex128)
        probs = np.full((2, 2), 0.25)
        emission = [[None, None], [None, None]]
        for a in range(2):
            for g in range(2):
                sig = _bb84_state(a, g)
                emission[a][g] = (1.0 - leak_prob) * np.kron(vacuum, sig) + (
                    leak_prob
                ) * np.kron(sig, sig)
        super().__init__(probs, emission)
        self.leak_prob = leak_prob


def check_basis_independence(source: SourceModel) -> float:
    """Trace distance between the two basis-averaged emitted states."""
    diff = source.averaged_state(0) - source.averaged_state(1)
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh(diff))))


def basis_flip_invariance(source: SourceModel) -> float:
    """Gap between what leaves the lab for untested positions under the
    written protocol (opposite-basis emission) and under the plain variant
    (same-basis emission), maximized over the announced basis label.

    Zero exactly when the source is basis-independent, which is what makes
    the two protocol variants indistinguishable from outside.
    """
    worst = 0.0
    for a in range(2):
        diff = source.averaged_state(1 - a) - source.averaged_state(a)
        worst = max(worst, 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(diff)))))
    return worst


def source_from_config(cfg: dict) -> SourceModel:
    kind = cfg.get("kind", "perfect")
    if kind == "perfect":
        return PerfectSource(bias=cfg.get("bias", 0.5))
    if kind == "rotated_z":
        return RotatedZSource(cfg["theta"], bias=cfg.get("bias", 0.5))
    if kind == "entangled":
        return EntangledSource(phi=cfg.get("phi", 0.0))
    if kind == "leaky_two_copy":
        return LeakyTwoCopySource(leak_prob=cfg.get("leak_prob", 0.5))
    raise ValueError(f"unknown source kind {kind!r}")


# ---------------------------------------------------------------------------
# channel and detector models


class ChannelModel:
    """Stateless transform of a batch of single-qubit states; rng injected."""

    kind = "abstract"

    def apply_batch(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class IdentityChannel(ChannelModel):
    kind = "identity"

    def apply_batch(self, states, rng):
        return states


class DepolarizingChannel(ChannelModel):
    kind = "depolarizing"

    def __init__(self, p: float) -> None:
        if not 0.0 <= p <= 1.0:
            raise ValueError("depolarizing weight must sit in [0, 1]")
        self.p = p

    def apply_batch(self, states, rng):
        eye = np.eye(2, dtype=np.complex128) / 2.0
        return (1.0 - self.p) * states + self.p * eye[None, :, :]


class InterceptResendChannel(ChannelModel):
    """Measures every signal in a random basis and forwards the eigenstate."""

    kind = "intercept_resend"

    def apply_batch(self, states, rng):
        m = states.shape[0]
        eve_basis = rng.integers(0, 2, size=m)
        p_one = np.where(
            eve_basis == 0,
            states[:, 1, 1].real,
            0.5 * (1.0 - 2.0 * states[:, 0, 1].real),
        )
        outcome = (rng.random(m) < p_one).astype(np.int64)
        lut = np.array(
            [[_bb84_state(a, g) for g in range(2)] for a in range(2)]
        )
        return lut[eve_basis, outcome]


class CustomUnitaryChannel(ChannelModel):
    """Couples each signal to a fresh ancilla with a fixed 4x4 unitary and
    discards the ancilla (index layout: signal is the low bit)."""

    kind = "custom"

    def __init__(self, unitary: np.ndarray) -> None:
        u = np.asarray(unitary, dtype=np.complex128)
        if u.shape != (4, 4) or np.max(np.abs(u @ u.conj().T - np.eye(4))) > 1e-10:
            raise ValueError("need a 4x4 unitary")
        self.unitary = u

    def apply_batch(self, states, rng):
        m = states.shape[0]
        full = np.zeros((m, 4, 4), dtype=np.complex128)
        full[:, 0:2, 0:2] = states  # ancilla starts in |0> (high bit clear)
        rolled = np.einsum("ij,mjk,lk->mil", self.unitary, full, self.unitary.conj())
        view = rolled.reshape(m, 2, 2, 2, 2)  # (anc, sig, anc', sig')
        return np.einsum("masat->mst", view)


def channel_from_config(cfg: dict) -> ChannelModel:
    kind = cfg.get("kind", "identity")
    if kind == "identity":
        return IdentityChannel()
    if kind == "depolarizing":
        return DepolarizingChannel(cfg["p"])
    if kind == "intercept_resend":
        return InterceptResendChannel()
    if kind == "custom":
        return CustomUnitaryChannel(np.asarray(cfg["unitary"], dtype=np.complex128))
    raise ValueError(f"unknown channel kind {kind!r}")


@dataclass(frozen=True)
class DetectorModel:
    """Measures sigma_z for basis 0 and sigma_x for basis 1; a detection
    succeeds with the same efficiency in either basis, and failures are
    reported as null outcomes rather than folded into the bit stream."""

    efficiency: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("efficiency must sit in (0, 1]")

    def measure_batch(
        self, states: np.ndarray, bases: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Returns (outcomes h, detected mask); h is only meaningful where
        detected.  Draw order (nulls first, then outcomes) is part of the
        determinism contract."""
        m = states.shape[0]
        detected = rng.random(m) < self.efficiency
        p_one = np.where(
            bases == 0,
            states[:, 1, 1].real,
            0.5 * (1.0 - 2.0 * states[:, 0, 1].real),
        )
        outcomes = (rng.random(m) < p_one).astype(np.uint8)
        return outcomes, detected


# ---------------------------------------------------------------------------
# session configuration


@dataclass(frozen=True)
class SessionConfig:
    n: int
    epsilon: float = 0.05
    delta_max: float = 0.109
    source: SourceModel = field(default_factory=PerfectSource)
    channel: ChannelModel = field(default_factory=IdentityChannel)
    detector: DetectorModel = field(default_factory=DetectorModel)
    code_policy: str = "hamming_blocks"
    seed: int = 0
    pool_bits: int | None = None
    rec_target_fail: float = 1e-4

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("need at least one key bit")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.delta_max < 0.5:
            raise ValueError("delta_max must sit in (0, 1/2)")
        if self.n > 0xFFFF:
            raise ValueError("key size beyond the wire format")

    @property
    def omega_size(self) -> int:
        eff = self.detector.efficiency
        half = math.ceil(2.0 * self.n * (1.0 + self.epsilon) / (eff * eff))
        return 2 * half

    @property
    def pool_capacity(self) -> int:
        return self.pool_bits if self.pool_bits is not None else 4 * self.n + 512

    def pa_code(self) -> LinearCode:
        policy = self.code_policy
        if ":" in policy:
            family, params = policy.split(":", 1)
            desc = f"{family}:n={self.n},{params}"
        else:
            desc = f"{policy}:n={self.n}"
        code = code_from_descriptor(desc)
        if code.k < 1:
            raise ValueError(f"code policy {policy!r} leaves no key bits")
        return code


# ---------------------------------------------------------------------------
# payload codecs


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def _unpack_bits(blob: bytes, count: int) -> np.ndarray:
    arr = np.frombuffer(blob, dtype=np.uint8)
    return np.unpackbits(arr, count=count, bitorder="little")


def encode_hello(cfg: SessionConfig, role: int) -> bytes:
    return struct.pack(
        ">HBIddI",
        WIRE_VERSION,
        role,
        cfg.n,
        cfg.epsilon,
        cfg.delta_max,
        cfg.omega_size,
    )


def decode_hello(payload: bytes) -> dict:
    version, role, n, epsilon, delta_max, omega = struct.unpack(">HBIddI", payload)
    return {
        "version": version,
        "role": role,
        "n": n,
        "epsilon": epsilon,
        "delta_max": delta_max,
        "omega": omega,
    }


def encode_qsignal(index: int, state: np.ndarray) -> bytes:
    head = struct.pack(">IB", index, 0)
    body = state.astype(np.complex128).view(np.float64).astype(">f8").tobytes()
    return head + body


def decode_qsignal(payload: bytes) -> tuple[int, np.ndarray]:
    index, flag = struct.unpack(">IB", payload[:5])
    if flag != 0:
        raise ProtocolError("unexpected null signal on the wire")
    flat = np.frombuffer(payload[5:], dtype=">f8").astype(np.float64)
    return index, flat.view(np.complex128).reshape(2, 2)


def encode_bases_b(symbols: np.ndarray) -> bytes:
    return struct.pack(">I", len(symbols)) + bytes(symbols.astype(np.uint8).tolist())


def decode_bases_b(payload: bytes) -> np.ndarray:
    (count,) = struct.unpack(">I", payload[:4])
    body = np.frombuffer(payload[4:], dtype=np.uint8)
    if body.size != count:
        raise ProtocolError("basis announcement length mismatch")
    return body.copy()


def encode_bases_a_and_r(a_bits: np.ndarray, r_mask: np.ndarray) -> bytes:
    count = len(a_bits)
    return struct.pack(">I", count) + _pack_bits(a_bits) + _pack_bits(r_mask)


def decode_bases_a_and_r(payload: bytes) -> tuple[np.ndarray, np.ndarray]:
    (count,) = struct.unpack(">I", payload[:4])
    span = (count + 7) // 8
    body = payload[4:]
    if len(body) != 2 * span:
        raise ProtocolError("basis/subset announcement length mismatch")
    return _unpack_bits(body[:span], count), _unpack_bits(body[span:], count)


def encode_mask(mask: np.ndarray) -> bytes:
    return struct.pack(">I", len(mask)) + _pack_bits(mask)


def decode_mask(payload: bytes) -> np.ndarray:
    (count,) = struct.unpack(">I", payload[:4])
    return _unpack_bits(payload[4:], count)


def encode_test_bits(bits: np.ndarray) -> bytes:
    return struct.pack(">I", len(bits)) + _pack_bits(bits)


def decode_test_bits(payload: bytes) -> np.ndarray:
    (count,) = struct.unpack(">I", payload[:4])
    return _unpack_bits(payload[4:], count)


def encode_delta(delta: float, proceed: bool) -> bytes:
    return struct.pack(">dB", delta, 1 if proceed else 0)


def decode_delta(payload: bytes) -> tuple[float, bool]:
    delta, flag = struct.unpack(">dB", payload)
    return delta, flag == 1


def encode_perm(perm: list[int]) -> bytes:
    return struct.pack(">I", len(perm)) + b"".join(
        struct.pack(">H", p) for p in perm
    )


def decode_perm(payload: bytes) -> list[int]:
    (count,) = struct.unpack(">I", payload[:4])
    body = payload[4:]
    if len(body) != 2 * count:
        raise ProtocolError("permutation length mismatch")
    return [struct.unpack(">H", body[2 * i : 2 * i + 2])[0] for i in range(count)]


def encode_syndrome(descriptor: str, syndrome_enc: BitVec) -> bytes:
    desc = descriptor.encode()
    return (
        struct.pack(">H", len(desc))
        + desc
        + struct.pack(">I", syndrome_enc.n)
        + syndrome_enc.to_bytes()
    )


def decode_syndrome(payload: bytes) -> tuple[str, BitVec]:
    (dlen,) = struct.unpack(">H", payload[:2])
    desc = payload[2 : 2 + dlen].decode()
    (bitlen,) = struct.unpack(">I", payload[2 + dlen : 6 + dlen])
    return desc, BitVec.from_bytes(payload[6 + dlen :], bitlen)


def encode_confirm(mac: bytes) -> bytes:
    return struct.pack(">B", len(mac)) + mac


def decode_confirm(payload: bytes) -> bytes:
    (length,) = struct.unpack(">B", payload[:1])
    return payload[1 : 1 + length]


# ---------------------------------------------------------------------------
# transcript


@dataclass(frozen=True)
class TranscriptRecord:
    step: str
    sender: str
    payload: bytes


class Transcript:
    """Ordered record of every classical announcement, byte-exact."""

    def __init__(self) -> None:
        self.records: list[TranscriptRecord] = []

    def append(self, step: str, sender: str, payload: bytes) -> None:
        self.records.append(TranscriptRecord(step, sender, payload))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Transcript) and self.records == other.records

    def __len__(self) -> int:
        return len(self.records)

    def to_text(self) -> str:
        lines = []
        for rec in self.records:
            body = rec.payload.hex() if rec.payload else "-"
            lines.append(f"{rec.step} {rec.sender} {body}")
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> Transcript:
        out = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            step, sender, body = line.split(" ", 2)
            payload = b"" if body == "-" else bytes.fromhex(body)
            out.append(step, sender, payload)
        return out


# ---------------------------------------------------------------------------
# sifting, estimation, reconciliation helpers


@dataclass(frozen=True)
class SiftResult:
    test_set: tuple[int, ...]
    key_set: tuple[int, ...] | None
    abort_reason: str | None


def sift(a_bits, b_symbols, r_mask, n: int, rng) -> SiftResult:
    """Split announced positions into the test set T and the key set S.

    T is every position of the test half where the bases agree; S is n
    positions sampled uniformly (with the supplied rng) from the untested
    half where the receiver's basis matches the opposite of the announced
    one -- that opposite basis being what was actually sent there.  Null
    detections match nothing.  Aborts when either set comes up short.
    """
    test = []
    candidates = []
    for i, (a, b, in_r) in enumerate(zip(a_bits, b_symbols, r_mask)):
        if b == 2:
            continue
        if in_r:
            if a == b:
                test.append(i)
        else:
            if (1 - a) == b:
                candidates.append(i)
    if len(test) < n or len(candidates) < n:
        return SiftResult(tuple(test), None, ABORT_SIFT)
    key_set = tuple(sorted(rng.sample(candidates, n)))
    return SiftResult(tuple(test), key_set, None)


def estimate_error(sender_bits, receiver_bits) -> float:
    """Fraction of positions that disagree; with all-zero sender bits this
    is plain one-counting, which is the adversarial-preparation variant."""
    if len(sender_bits) != len(receiver_bits):
        raise ValueError("test records differ in length")
    if len(sender_bits) == 0:
        raise ValueError("cannot estimate an error rate from nothing")
    mism = sum(1 for x, y in zip(sender_bits, receiver_bits) if int(x) != int(y))
    return mism / len(sender_bits)


def _block_failure(n_block: int, radius: int, p: float, blocks: int) -> float:
    if blocks == 0:
        return 0.0
    q = 1.0 - sum(
        math.comb(n_block, w) * p**w * (1.0 - p) ** (n_block - w)
        for w in range(radius + 1)
    )
    return 1.0 - (1.0 - q) ** blocks


def choose_reconciliation_code(
    n: int, delta_obs: float, epsilon: float, target_fail: float
) -> LinearCode:
    """Cheapest shipped syndrome code whose estimated miss rate at error
    probability min(delta_obs + epsilon, 0.49) stays under the target.

    Candidates: no correction at all, single-error blocks of seven,
    odd-length majority blocks, and a verbatim fallback that always works.
    Leftover tail bits ride along verbatim in every block family.
    """
    p = min(delta_obs + epsilon, 0.49)
    candidates: list[tuple[int, LinearCode]] = []
    if _block_failure(n, 0, p, 1) <= target_fail:
        candidates.append((0, rec_identity(n)))
    if _block_failure(7, 1, p, n // 7) <= target_fail:
        candidates.append((3 * (n // 7) + n % 7, rec_hamming(n)))
    for inner in range(3, 26, 2):
        if inner > n:
            break
        if _block_failure(inner, (inner - 1) // 2, p, n // inner) <= target_fail:
            tau = (inner - 1) * (n // inner) + n % inner
            candidates.append((tau, rec_repetition(n, inner)))
    candidates.append((n, rec_verbatim(n)))
    candidates.sort(key=lambda pair: pair[0])
    return candidates[0][1]


def randomize_key(y: BitVec, rng) -> tuple[BitVec, BitVec]:
    """Refresh a key with a fresh uniform pad: returns (w, w + y).

    Whatever the distribution of y, the sum is uniform; announcing w later
    lets the peer shift to the same refreshed key.
    """
    w = BitVec.random(y.n, rng)
    return w, w + y


def _confirm_mac(confirm_key: BitVec, kappa: BitVec) -> bytes:
    material = confirm_key.to_bytes() + kappa.to_bytes()
    return hashlib.sha256(material).digest()[:CONFIRM_MAC_BYTES]


# ---------------------------------------------------------------------------
# run statistics

STATS_FIELDS = (
    "run_id",
    "n",
    "epsilon",
    "delta_max",
    "delta",
    "t_size",
    "s_size",
    "r",
    "tau",
    "confirm_bits",
    "key_rate_net",
    "abort_reason",
)


@dataclass
class RunStats:
    n: int
    epsilon: float
    delta_max: float
    delta: float | None = None
    t_size: int | None = None
    s_size: int | None = None
    r: int | None = None
    tau: int | None = None
    confirm_bits: int | None = None
    abort_reason: str | None = None
    code_descriptor: str | None = None
    rec_descriptor: str | None = None

    @property
    def key_rate_net(self) -> float | None:
        if self.r is None or self.tau is None or self.confirm_bits is None:
            return None
        return (self.r - self.tau - self.confirm_bits) / self.n

    def as_row(self, run_id) -> list:
        rate = self.key_rate_net
        return [
            run_id,
            self.n,
            self.epsilon,
            self.delta_max,
            "" if self.delta is None else repr(self.delta),
            "" if self.t_size is None else self.t_size,
            "" if self.s_size is None else self.s_size,
            "" if self.r is None else self.r,
            "" if self.tau is None else self.tau,
            "" if self.confirm_bits is None else self.confirm_bits,
            "" if rate is None else f"{rate:.6f}",
            self.abort_reason or "",
        ]


# ---------------------------------------------------------------------------
# party state machines


class _Session:
    """Shared plumbing: phase tracking, transcript, terminal handling."""

    role_name = "?"

    def __init__(self, cfg: SessionConfig) -> None:
        self.cfg = cfg
        self.transcript = Transcript()
        self.stats = RunStats(n=cfg.n, epsilon=cfg.epsilon, delta_max=cfg.delta_max)
        self.final_key: BitVec | None = None
        self.abort_reason: str | None = None
        self.done = False
        self.phase = "hello"
        self.pool = SecretPool(stream_seed(cfg.seed, "pool"), cfg.pool_capacity)

    @property
    def aborted(self) -> bool:
        return self.abort_reason is not None

    @property
    def terminal(self) -> bool:
        return self.done or self.aborted

    def _record(self, tag: int, sender: str, payload: bytes) -> None:
        if tag in TRANSCRIPT_TAGS:
            self.transcript.append(TAG_NAMES[tag], sender, payload)

    def _fail(self, reason: str, announce: bool = True) -> list[WireMessage]:
        self.abort_reason = reason
        self.stats.abort_reason = reason
        self.final_key = None
        self.phase = "dead"
        if announce:
            msg = WireMessage(TAG_ABORT, reason.encode())
            self._record(TAG_ABORT, self.role_name, msg.payload)
            return [msg]
        return []

    def _accept_abort(self, msg: WireMessage) -> list[WireMessage]:
        reason = msg.payload.decode() or ABORT_TRANSPORT
        self._record(TAG_ABORT, self.peer_name, msg.payload)
        self.abort_reason = reason
        self.stats.abort_reason = reason
        self.final_key = None
        self.phase = "dead"
        return []

    def _check_hello(self, msg: WireMessage, expect_role: int) -> str | None:
        try:
            hello = decode_hello(msg.payload)
        except struct.error:
            return ABORT_VERSION
        if hello["version"] != WIRE_VERSION or hello["role"] != expect_role:
            return ABORT_VERSION
        if (
            hello["n"] != self.cfg.n
            or hello["omega"] != self.cfg.omega_size
            or abs(hello["epsilon"] - self.cfg.epsilon) > 0.0
            or abs(hello["delta_max"] - self.cfg.delta_max) > 0.0
        ):
            return ABORT_VERSION
        return None

    def on_message(self, msg: WireMessage) -> list[WireMessage]:
        if self.terminal:
            return []
        if msg.tag == TAG_ABORT:
            return self._accept_abort(msg)
        handler = getattr(self, f"_phase_{self.phase}", None)
        if handler is None:
            return self._fail(ABORT_PHASE)
        return handler(msg)


class AliceSession(_Session):
    """Sender side: emits the quantum signals and corrects toward the
    receiver's sifted key in step nine."""

    role_name = "alice"
    peer_name = "bob"

    def __init__(self, cfg: SessionConfig) -> None:
        super().__init__(cfg)
        self._emit_rng = np.random.default_rng(stream_seed(cfg.seed, "alice|emit"))
        self._choice_rng = random.Random(stream_seed(cfg.seed, "alice|choice"))
        self.a_bits: np.ndarray | None = None
        self.b_symbols: np.ndarray | None = None
        self.g_bits: np.ndarray | None = None
        self.r_mask: np.ndarray | None = None
        self.test_set: tuple[int, ...] = ()
        self.key_set: tuple[int, ...] = ()
        self.perm: list[int] | None = None
        self.pa_code: LinearCode | None = None
        self.kappa: BitVec | None = None

    def start(self) -> list[WireMessage]:
        if check_basis_independence(self.cfg.source) > SOURCE_TOLERANCE:
            return self._fail(ABORT_SOURCE)
        self.phase = "hello"
        return [WireMessage(TAG_HELLO, encode_hello(self.cfg, ROLE_ALICE))]

    def _phase_hello(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_HELLO:
            return self._fail(ABORT_PHASE)
        bad = self._check_hello(msg, ROLE_BOB)
        if bad:
            return self._fail(bad)
        return self._emit_signals()

    def _emit_signals(self) -> list[WireMessage]:
        cfg = self.cfg
        m = cfg.omega_size
        src = cfg.source
        rng = self._emit_rng
        self.a_bits = rng.integers(0, 2, size=m).astype(np.uint8)
        r_index = self._choice_rng.sample(range(m), m // 2)
        self.r_mask = np.zeros(m, dtype=np.uint8)
        self.r_mask[r_index] = 1
        # the basis actually keyed into the source: a for tested positions,
        # its opposite for the rest
        sent_basis = np.where(self.r_mask == 1, self.a_bits, 1 - self.a_bits)
        p_one = np.array([src.key_bit_probability(0), src.key_bit_probability(1)])
        self.g_bits = (rng.random(m) < p_one[sent_basis]).astype(np.uint8)
        lut = np.array(
            [[src.emit(a, g) for g in range(2)] for a in range(2)]
        )
        states = lut[sent_basis, self.g_bits]
        blob = states.reshape(m, 4).view(np.float64).astype(">f8").tobytes()
        out = []
        for i in range(m):
            head = struct.pack(">IB", i, 0)
            out.append(WireMessage(TAG_QSIGNAL, head + blob[64 * i : 64 * (i + 1)]))
        self.phase = "await_bases"
        return out

    def _phase_await_bases(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_BASES_B:
            return self._fail(ABORT_PHASE)
        self._record(TAG_BASES_B, "bob", msg.payload)
        b_symbols = decode_bases_b(msg.payload)
        if b_symbols.size != self.cfg.omega_size:
            return self._fail(ABORT_PHASE)
        self.b_symbols = b_symbols
        payload = encode_bases_a_and_r(self.a_bits, self.r_mask)
        self._record(TAG_BASES_A_AND_R, "alice", payload)
        # T is now public knowledge; S arrives from the peer next
        self.test_set = tuple(
            i
            for i in range(self.cfg.omega_size)
            if self.r_mask[i] and b_symbols[i] == self.a_bits[i]
        )
        self.stats.t_size = len(self.test_set)
        self.phase = "await_subset"
        return [WireMessage(TAG_BASES_A_AND_R, payload)]

    def _phase_await_subset(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_SUBSET_S:
            return self._fail(ABORT_PHASE)
        self._record(TAG_SUBSET_S, "bob", msg.payload)
        mask = decode_mask(msg.payload)
        key_set = tuple(int(i) for i in np.nonzero(mask)[0])
        ok = len(key_set) == self.cfg.n and all(
            not self.r_mask[i] and self.b_symbols[i] == 1 - self.a_bits[i]
            for i in key_set
        )
        if len(self.test_set) < self.cfg.n or not ok:
            return self._fail(ABORT_SIFT)
        self.key_set = key_set
        self.stats.s_size = len(key_set)
        g_test = np.array([self.g_bits[i] for i in self.test_set], dtype=np.uint8)
        payload = encode_test_bits(g_test)
        self._record(TAG_TEST_BITS, "alice", payload)
        self.phase = "await_delta"
        return [WireMessage(TAG_TEST_BITS, payload)]

    def _phase_await_delta(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_DELTA_DECISION:
            return self._fail(ABORT_PHASE)
        self._record(TAG_DELTA_DECISION, "bob", msg.payload)
        delta, proceed = decode_delta(msg.payload)
        self.stats.delta = delta
        if not proceed:
            return self._fail(ABORT_DELTA, announce=False)
        self.phase = "await_perm"
        return []

    def _phase_await_perm(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_PERM:
            return self._fail(ABORT_PHASE)
        self._record(TAG_PERM, "bob", msg.payload)
        perm = decode_perm(msg.payload)
        if sorted(perm) != list(range(self.cfg.n)):
            return self._fail(ABORT_PHASE)
        self.perm = perm
        self.phase = "await_code"
        return []

    def _phase_await_code(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_CODE:
            return self._fail(ABORT_PHASE)
        self._record(TAG_CODE, "bob", msg.payload)
        try:
            code = code_from_descriptor(msg.payload.decode())
        except ValueError:
            return self._fail(ABORT_PHASE)
        if code.n != self.cfg.n:
            return self._fail(ABORT_PHASE)
        self.pa_code = code
        self.stats.r = code.k
        self.stats.code_descriptor = code.descriptor()
        self.phase = "await_syndrome"
        return []

    def _phase_await_syndrome(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_SYNDROME_ENC:
            return self._fail(ABORT_PHASE)
        self._record(TAG_SYNDROME_ENC, "bob", msg.payload)
        desc, enc = decode_syndrome(msg.payload)
        try:
            rec = code_from_descriptor(desc)
        except ValueError:
            return self._fail(ABORT_PHASE)
        if rec.n != self.cfg.n or enc.n != rec.n - rec.k:
            return self._fail(ABORT_PHASE)
        self.stats.rec_descriptor = desc
        self.stats.tau = enc.n
        try:
            otp = self.pool.take(enc.n)
        except PoolExhausted:
            return self._fail(ABORT_POOL)
        target = enc + otp
        word = BitVec.from_bits(
            [int(self.g_bits[i]) for i in self.key_set]
        ).permute(self.perm)
        try:
            self.kappa = rec.correct_with_syndrome(word, target)
        except DecodingFailure:
            return self._fail(ABORT_RECONCILE)
        self.phase = "await_confirm"
        return []

    def _phase_await_confirm(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_KEY_CONFIRM:
            return self._fail(ABORT_PHASE)
        self._record(TAG_KEY_CONFIRM, "bob", msg.payload)
        their_mac = decode_confirm(msg.payload)
        try:
            confirm_key = self.pool.take(CONFIRM_KEY_BITS)
        except PoolExhausted:
            return self._fail(ABORT_POOL)
        self.stats.confirm_bits = CONFIRM_KEY_BITS
        if _confirm_mac(confirm_key, self.kappa) != their_mac:
            return self._fail(ABORT_CONFIRM)
        self.final_key = self.pa_code.coset_key(self.kappa)
        self.done = True
        self.phase = "finished"
        return [WireMessage(TAG_DONE, b"")]


class BobSession(_Session):
    """Receiver side: measures, runs the verification test, and owns the
    sifted key the final key is taken from."""

    role_name = "bob"
    peer_name = "alice"

    def __init__(self, cfg: SessionConfig) -> None:
        super().__init__(cfg)
        self._quantum_rng = np.random.default_rng(
            stream_seed(cfg.seed, "bob|quantum")
        )
        self._choice_rng = random.Random(stream_seed(cfg.seed, "bob|choice"))
        self._signal_payloads: list[bytes | None] = [None] * cfg.omega_size
        self._received = 0
        self.b_symbols: np.ndarray | None = None
        self.h_bits: np.ndarray | None = None
        self.test_set: tuple[int, ...] = ()
        self.key_set: tuple[int, ...] = ()
        self.kappa: BitVec | None = None

    def start(self) -> list[WireMessage]:
        return []

    def _phase_hello(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_HELLO:
            return self._fail(ABORT_PHASE)
        bad = self._check_hello(msg, ROLE_ALICE)
        if bad:
            return self._fail(bad)
        self.phase = "collect"
        return [WireMessage(TAG_HELLO, encode_hello(self.cfg, ROLE_BOB))]

    def _phase_collect(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_QSIGNAL:
            return self._fail(ABORT_PHASE)
        index, flag = struct.unpack(">IB", msg.payload[:5])
        if not 0 <= index < self.cfg.omega_size or flag != 0:
            return self._fail(ABORT_PHASE)
        if self._signal_payloads[index] is not None:
            return self._fail(ABORT_PHASE)
        self._signal_payloads[index] = msg.payload[5:]
        self._received += 1
        if self._received < self.cfg.omega_size:
            return []
        return self._measure_all()

    def _measure_all(self) -> list[WireMessage]:
        m = self.cfg.omega_size
        blob = b"".join(self._signal_payloads)  # type: ignore[arg-type]
        states = (
            np.frombuffer(blob, dtype=">f8")
            .astype(np.float64)
            .view(np.complex128)
            .reshape(m, 2, 2)
        )
        rng = self._quantum_rng
        bases = rng.integers(0, 2, size=m).astype(np.uint8)
        outcomes, detected = self.cfg.detector.measure_batch(states, bases, rng)
        self.h_bits = outcomes
        self.b_symbols = np.where(detected, bases, np.uint8(2)).astype(np.uint8)
        payload = encode_bases_b(self.b_symbols)
        self._record(TAG_BASES_B, "bob", payload)
        self.phase = "await_bases_a"
        return [WireMessage(TAG_BASES_B, payload)]

    def _phase_await_bases_a(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_BASES_A_AND_R:
            return self._fail(ABORT_PHASE)
        self._record(TAG_BASES_A_AND_R, "alice", msg.payload)
        a_bits, r_mask = decode_bases_a_and_r(msg.payload)
        if a_bits.size != self.cfg.omega_size:
            return self._fail(ABORT_PHASE)
        result = sift(a_bits, self.b_symbols, r_mask, self.cfg.n, self._choice_rng)
        self.stats.t_size = len(result.test_set)
        if result.abort_reason:
            return self._fail(result.abort_reason)
        self.test_set = result.test_set
        self.key_set = result.key_set
        self.stats.s_size = len(result.key_set)
        mask = np.zeros(self.cfg.omega_size, dtype=np.uint8)
        mask[list(result.key_set)] = 1
        payload = encode_mask(mask)
        self._record(TAG_SUBSET_S, "bob", payload)
        self.phase = "await_test_bits"
        return [WireMessage(TAG_SUBSET_S, payload)]

    def _phase_await_test_bits(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_TEST_BITS:
            return self._fail(ABORT_PHASE)
        self._record(TAG_TEST_BITS, "alice", msg.payload)
        g_test = decode_test_bits(msg.payload)
        if g_test.size != len(self.test_set):
            return self._fail(ABORT_PHASE)
        h_test = [int(self.h_bits[i]) for i in self.test_set]
        delta = estimate_error(g_test.tolist(), h_test)
        self.stats.delta = delta
        proceed = delta <= self.cfg.delta_max
        payload = encode_delta(delta, proceed)
        self._record(TAG_DELTA_DECISION, "bob", payload)
        out = [WireMessage(TAG_DELTA_DECISION, payload)]
        if not proceed:
            self._fail(ABORT_DELTA, announce=False)
            return out
        return out + self._announce_key_material(delta)

    def _announce_key_material(self, delta: float) -> list[WireMessage]:
        cfg = self.cfg
        out = []
        perm = list(range(cfg.n))
        self._choice_rng.shuffle(perm)
        payload = encode_perm(perm)
        self._record(TAG_PERM, "bob", payload)
        out.append(WireMessage(TAG_PERM, payload))

        pa = cfg.pa_code()
        self.stats.r = pa.k
        self.stats.code_descriptor = pa.descriptor()
        payload = pa.descriptor().encode()
        self._record(TAG_CODE, "bob", payload)
        out.append(WireMessage(TAG_CODE, payload))

        self.kappa = BitVec.from_bits(
            [int(self.h_bits[i]) for i in self.key_set]
        ).permute(perm)
        rec = choose_reconciliation_code(
            cfg.n, delta, cfg.epsilon, cfg.rec_target_fail
        )
        syndrome = rec.syndrome(self.kappa)
        self.stats.rec_descriptor = rec.descriptor()
        self.stats.tau = syndrome.n
        try:
            otp = self.pool.take(syndrome.n)
            confirm_key = self.pool.take(CONFIRM_KEY_BITS)
        except PoolExhausted:
            return out + self._fail(ABORT_POOL)
        self.stats.confirm_bits = CONFIRM_KEY_BITS
        payload = encode_syndrome(rec.descriptor(), syndrome + otp)
        self._record(TAG_SYNDROME_ENC, "bob", payload)
        out.append(WireMessage(TAG_SYNDROME_ENC, payload))

        payload = encode_confirm(_confirm_mac(confirm_key, self.kappa))
        self._record(TAG_KEY_CONFIRM, "bob", payload)
        out.append(WireMessage(TAG_KEY_CONFIRM, payload))
        self.final_key = pa.coset_key(self.kappa)
        self.phase = "await_done"
        return out

    def _phase_await_done(self, msg: WireMessage) -> list[WireMessage]:
        if msg.tag != TAG_DONE:
            return self._fail(ABORT_PHASE)
        self.done = True
        self.phase = "finished"
        return []


# ---------------------------------------------------------------------------
# in-process execution


@dataclass
class ProtocolResult:
    alice_key: BitVec | None
    bob_key: BitVec | None
    transcript: Transcript
    stats: RunStats
    alice: AliceSession
    bob: BobSession

    @property
    def aborted(self) -> bool:
        return self.stats.abort_reason is not None


def _apply_channel_to_signals(
    messages: list[WireMessage], channel: ChannelModel, rng: np.random.Generator
) -> list[WireMessage]:
    if not messages:
        return messages
    heads = [m.payload[:5] for m in messages]
    blob = b"".join(m.payload[5:] for m in messages)
    states = (
        np.frombuffer(blob, dtype=">f8")
        .astype(np.float64)
        .view(np.complex128)
        .reshape(len(messages), 2, 2)
    )
    out_states = channel.apply_batch(states, rng)
    out_blob = out_states.reshape(len(messages), 4).view(np.float64).astype(">f8").tobytes()
    return [
        WireMessage(TAG_QSIGNAL, heads[i] + out_blob[64 * i : 64 * (i + 1)])
        for i in range(len(messages))
    ]


def run_protocol(cfg: SessionConfig) -> ProtocolResult:
    """Execute one full session in-process; the configured channel plays
    the adversary/noise between the two state machines."""
    alice = AliceSession(cfg)
    bob = BobSession(cfg)
    eve_rng = np.random.default_rng(stream_seed(cfg.seed, "eve|channel"))

    queue: collections.deque[tuple[str, WireMessage]] = collections.deque(
        ("alice", m) for m in alice.start()
    )
    queue.extend(("bob", m) for m in bob.start())
    guard = 0
    while queue:
        guard += 1
        if guard > 16 * cfg.omega_size + 256:
            raise ProtocolError("message pump did not terminate")
        sender, msg = queue.popleft()
        receiver = bob if sender == "alice" else alice
        if msg.tag == TAG_QSIGNAL and sender == "alice":
            # batch all queued signals through the channel in one shot
            batch = [msg]
            while queue and queue[0][1].tag == TAG_QSIGNAL:
                batch.append(queue.popleft()[1])
            replies: list[WireMessage] = []
            for out in _apply_channel_to_signals(batch, cfg.channel, eve_rng):
                replies = receiver.on_message(out)
                if replies:
                    break
            queue.extend((receiver.role_name, m) for m in replies)
            continue
        queue.extend((receiver.role_name, m) for m in receiver.on_message(msg))

    if alice.stats.abort_reason and not bob.stats.abort_reason:
        stats = alice.stats
    else:
        stats = bob.stats
    return ProtocolResult(
        alice_key=alice.final_key,
        bob_key=bob.final_key,
        transcript=alice.transcript,
        stats=stats,
        alice=alice,
        bob=bob,
    )


def replay_protocol(cfg: SessionConfig, transcript: Transcript) -> ProtocolResult:
    """Re-run the deterministic machines and require every announcement to
    match the recorded transcript byte-for-byte."""
    result = run_protocol(cfg)
    if result.transcript != transcript:
        ours = result.transcript.records
        theirs = transcript.records
        for i in range(max(len(ours), len(theirs))):
            a = ours[i] if i < len(ours) else None
            b = theirs[i] if i < len(theirs) else None
            if a != b:
                raise ReplayMismatch(f"record {i}: produced {a}, transcript has {b}")
        raise ReplayMismatch("transcript mismatch")
    return result


# ---------------------------------------------------------------------------
# adversarial-preparation variant, sampled classically


def run_protocol3(
    attack: np.ndarray,
    n: int,
    code: LinearCode,
    *,
    epsilon: float = 0.05,
    delta_max: float = 0.109,
    seed: int = 0,
) -> tuple[BitVec | None, str | None, float | None]:
    """Classical sampling of the adversary-prepares variant: fixed sender
    bits, Z-basis verification on the tested half, X-basis key generation
    on the rest.  Returns (final key or None, abort reason, observed rate).
    """
    attack = np.asarray(attack, dtype=np.complex128)
    chi = attack[:, 0]
    rho = np.outer(chi, chi.conj()).reshape(2, 2, 2, 2)
    sigma = np.einsum("asat->st", rho)  # receiver's qubit
    p_z = float(sigma[1, 1].real)
    p_x = float(0.5 * (1.0 - 2.0 * sigma[0, 1].real))

    rng = np.random.default_rng(stream_seed(seed, "protocol3"))
    choice = random.Random(stream_seed(seed, "protocol3|choice"))
    m = 2 * math.ceil(2.0 * n * (1.0 + epsilon))
    r_mask = np.zeros(m, dtype=bool)
    r_mask[choice.sample(range(m), m // 2)] = True
    bases = rng.integers(0, 2, size=m)
    errs = rng.random(m) < np.where(bases == 0, p_z, p_x)

    test = [i for i in range(m) if r_mask[i] and bases[i] == 0]
    candidates = [i for i in range(m) if not r_mask[i] and bases[i] == 1]
    if len(test) < n or len(candidates) < n:
        return None, ABORT_SIFT, None
    delta = float(np.mean([errs[i] for i in test]))
    if delta > delta_max:
        return None, ABORT_DELTA, delta
    key_set = sorted(choice.sample(candidates, n))
    perm = list(range(n))
    choice.shuffle(perm)
    kappa = BitVec.from_bits([int(errs[i]) for i in key_set]).permute(perm)
    if code.n != n:
        raise ValueError("code length must match the key size")
    return code.coset_key(kappa), None, delta
