"""Desk-scale BB84 laboratory: GF(2) codes, a small quantum simulator,
rate bounds, a two-party session engine, and a framed TCP transport."""

from __future__ import annotations

from .bounds import (
    binary_entropy,
    empirical_sampling_check,
    key_rate,
    key_rate_threshold,
    leakage_bound,
    mayers_rate,
    sampling_bound,
)
from .codes import (
    BlockCode,
    CorrectableSet,
    DecodingFailure,
    LinearCode,
    code_from_descriptor,
    hamming,
    hamming_blocks,
    repetition,
    repetition_blocks,
)
from .gf2 import BitVec, GF2Matrix
from .netchan import PartyOutcome, eve_proxy, open_listener, serve_party
from .protocol import (
    AliceSession,
    BobSession,
    DepolarizingChannel,
    DetectorModel,
    EntangledSource,
    IdentityChannel,
    InterceptResendChannel,
    LeakyTwoCopySource,
    PerfectSource,
    ProtocolResult,
    RotatedZSource,
    RunStats,
    SessionConfig,
    Transcript,
    check_basis_independence,
    replay_protocol,
    run_protocol,
    run_protocol3,
    stream_seed,
)
from .qsim import (
    DensityMatrix,
    SecurityReport,
    StateVector,
    audit_protocol3,
    build_key_circuit,
    extract_final_key,
    fidelity,
    von_neumann_entropy,
)

__all__ = [
    "AliceSession",
    "BitVec",
    "BlockCode",
    "BobSession",
    "CorrectableSet",
    "DecodingFailure",
    "DensityMatrix",
    "DepolarizingChannel",
    "DetectorModel",
    "EntangledSource",
    "GF2Matrix",
    "IdentityChannel",
    "InterceptResendChannel",
    "LeakyTwoCopySource",
    "LinearCode",
    "PartyOutcome",
    "PerfectSource",
    "ProtocolResult",
    "RotatedZSource",
    "RunStats",
    "SecurityReport",
    "SessionConfig",
    "StateVector",
    "Transcript",
    "audit_protocol3",
    "binary_entropy",
    "build_key_circuit",
    "check_basis_independence",
    "code_from_descriptor",
    "empirical_sampling_check",
    "eve_proxy",
    "extract_final_key",
    "fidelity",
    "hamming",
    "hamming_blocks",
    "key_rate",
    "key_rate_threshold",
    "leakage_bound",
    "mayers_rate",
    "open_listener",
    "repetition",
    "repetition_blocks",
    "replay_protocol",
    "run_protocol",
    "run_protocol3",
    "sampling_bound",
    "serve_party",
    "stream_seed",
    "von_neumann_entropy",
]

__version__ = "0.1.0"
