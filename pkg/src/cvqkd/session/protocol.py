"""Alice and Bob endpoints: the per-block post-processing state machine.

Block ``k`` runs, in wire order:

    A -> B  ESTIMATION_DATA     disclosed subset (seed + 16-bit codes)
    B -> A  ESTIMATION_RESULT*  estimate, public calibration, sifting choices
    B -> A  PLANE_DISCLOSE / SYNDROME, one per frame and plane, LSB plane first
    B -> A  BCH_SYNDROME*
    A -> B  PA_PARAMS*          hash seed and output length
    A -> B  VERIFY_SAMPLE*      sample seed and sampled key bits
    B -> A  VERIFY_RESULT*
    A -> B  AUTH_REKEY*         commit; both top up the auth pool and store the key

(* tagged.) Either side may send ABORT instead of its next message; the
block then yields no key on either side. A delivered block is a complete
half-duplex exchange, so both endpoints saw its frames in the same order.
An aborted block is not: each side logs its own ABORT, and frames already in
flight are dropped unread. The session transcript therefore hashes each
delivered block's frames but only the id of an aborted one, which keeps the
two endpoints' digests equal.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import struct
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .. import estimation as est_mod
from ..channel_sim import QuadratureBlock, calibration_frames, generate_block
from ..estimation import EstimationError, EstimationResult, SecurityAbort
from ..model_core import Calibration, LeakageLedger, calibrate, normalize
from ..privacy_amp import KeyAbort, amplify, discard, final_length, sample_positions
from ..reconciliation import multilevel as ml
from ..reconciliation.bch import BchCode, bch_cleanup, bob_syndromes, pack_syndromes, unpack_syndromes
from ..reconciliation.discretize import N_PLANES, to_planes
from ..reconciliation.rate_table import DISCLOSE
from ..rng import StrongRandom
from ..security_bound import SecurityQuantities
from .auth import KEY_BYTES, AuthPool, BlockAuthenticator, TagMismatch
from .config import SessionConfig
from .keystore import KeyStore, KeyStoreRecord
from .messages import (
    AUTHENTICATED,
    Message,
    MsgType,
    ProtocolError,
    PlanePayload,
    pack_bits,
    unpack_bits,
)
from .transport import Transport

log = logging.getLogger(__name__)

SESSION_BLOCK = 2**64 - 1  # block id used for session-level aborts
_DISCLOSE_HEAD = struct.Struct(">QdI")
_CAL = struct.Struct(">dddI")  # n0, v_el_raw, eta, key pulse count
_PA = struct.Struct(">QI")
_SAMPLE = struct.Struct(">QI")
_HELLO = struct.Struct(">32s16s")


class PeerAbort(RuntimeError):
    pass


class SessionAborted(RuntimeError):
    pass


class ConfigMismatch(RuntimeError):
    pass


class LocalAbort(RuntimeError):
    pass


class Quarantine(RuntimeError):
    """Verification failed; both sides already know, so no ABORT is sent."""


BLOCK_ERRORS = (ProtocolError, TagMismatch, SecurityAbort, KeyAbort, EstimationError,
                LocalAbort, LookupError)


@dataclass
class BlockResult:
    block_id: int
    delivered: bool
    reason: str = ""
    key_bits: int = 0
    epsilon_hat: float = math.nan
    delta_i_estimate: float = math.nan  # from the estimate at the configured beta
    delta_i: float = math.nan  # with the measured beta
    beta: float = math.nan
    n_key_pulses: int = 0
    n_frames: int = 0
    frame_failures: int = 0
    bch_corrected: int = 0
    ledger: dict = field(default_factory=dict)
    wire_bits: int = 0
    sifting_bits: int = 0
    messages: dict = field(default_factory=dict)
    wall_s: dict = field(default_factory=dict)


class LinkSimulator:
    """Deterministic source of the optical data for every block.

    Each endpoint only reads its own half of a block; the cache lets two
    in-process endpoints share one simulation.
    """

    def __init__(self, config: SessionConfig):
        self.config = config
        lo, dark = calibration_frames(
            config.link, seed=config.seed, n_samples=config.calibration_samples, n0=config.n0
        )
        self.calibration = calibrate(lo, dark, config.link.eta)
        self._lock = threading.Lock()
        self._cached = lru_cache(maxsize=2)(self._generate)

    def _block(self, k: int) -> QuadratureBlock:
        with self._lock:  # both endpoints ask for the same block at once
            return self._cached(k)

    def block_seed(self, k: int) -> int:
        return StrongRandom((self.config.seed, k), "block").seed64()

    def _generate(self, k: int) -> QuadratureBlock:
        c = self.config
        return generate_block(
            c.link, c.noise_script, self.block_seed(k), c.n_pulses, c.n0, start_pulse=k * c.n_pulses
        )

    def alice_view(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        b = self._block(k)
        return b.alice_x, b.alice_p

    def bob_view(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        b = self._block(k)
        return b.bob_choice, b.bob_value


def protocol_seed(config: SessionConfig, k: int, label: str) -> int:
    return StrongRandom((config.seed, k), label).seed64()


def frame_layout(n_key: int, frame_pulses: int) -> tuple[int, int]:
    """(frame length, frame count); leftover key pulses are dropped."""
    frame = min(frame_pulses, n_key)
    if frame <= 0:
        raise LocalAbort("no key pulses")
    return frame, n_key // frame


def secret_length(config: SessionConfig, sq: SecurityQuantities, ledger: LeakageLedger,
                  n_used: int, label_entropy: float) -> tuple[float, int, int, SecurityQuantities]:
    """Measured beta, delivered key length and hash output length.

    The hash output also covers the verification sample and the bits that go
    back into the authentication pool; both come out before delivery.
    """
    leak = ledger.reconciliation_bits + ledger.bch_bits
    beta = ml.measured_beta(label_entropy, leak, n_used, sq.i_ab)
    sq_final = dataclasses.replace(sq, beta=beta)
    planned = ledger.snapshot()
    planned.add("verification_bits", config.verify_sample)
    length = final_length(n_used, sq_final, planned)
    return beta, length, length + config.verify_sample + 8 * KEY_BYTES, sq_final


class Endpoint:
    role = ""
    peer = ""
    config_timeout: float | None = 600.0

    def __init__(self, config: SessionConfig, sim: LinkSimulator, keystore: KeyStore | None = None,
                 psk: bytes | None = None, record_frames: bool = False):
        self.config = config
        self.sim = sim
        self.keystore = keystore if keystore is not None else KeyStore()
        if psk is None:
            psk = StrongRandom(config.seed, "pre-shared-key").bytes(config.psk_bits // 8)
        self.pool = AuthPool(psk)
        self.transport: Transport | None = None
        self.transcript = hashlib.sha256()
        self._block_hash = hashlib.sha256()
        self.frames: list[bytes] | None = [] if record_frames else None
        self.committed: dict[int, bytes] = {}  # pool state at the start of each block
        self._auth: BlockAuthenticator | None = None
        self._block = -1
        self._result: BlockResult | None = None

    # wire helpers

    def _record(self, direction: bytes, msg: Message) -> None:
        raw = msg.encode()
        self._block_hash.update(direction + len(raw).to_bytes(4, "big") + raw)
        if self.frames is not None:
            self.frames.append(direction + raw)
        if self._result is not None and msg.block_id == self._block:
            self._result.wire_bits += msg.wire_bits
            name = msg.type.name
            self._result.messages[name] = self._result.messages.get(name, 0) + 1

    def send(self, kind: MsgType, payload: bytes = b"") -> None:
        msg = Message(kind, self._block, payload)
        if kind in AUTHENTICATED:
            msg = self._auth.sign(msg)
        self.transport.send(msg)
        self._auth.observe(msg)
        self._record(self.role[:1].upper().encode(), msg)

    def recv(self, *kinds: MsgType) -> Message:
        while True:
            msg = self.transport.recv(timeout=self.config_timeout)
            if msg.block_id == SESSION_BLOCK and msg.type == MsgType.ABORT:
                raise SessionAborted(msg.payload.decode(errors="replace"))
            if msg.block_id < self._block:
                continue  # leftovers of a block the peer already abandoned
            if msg.block_id > self._block:
                raise ProtocolError(f"message for future block {msg.block_id}")
            self._record(self.peer[:1].upper().encode(), msg)
            if msg.type == MsgType.ABORT:
                raise PeerAbort(msg.payload.decode(errors="replace"))
            if msg.type not in kinds:
                want = "/".join(k.name for k in kinds)
                raise ProtocolError(f"expected {want}, got {msg.type.name}")
            if msg.type in AUTHENTICATED:
                self._auth.check(msg)
            self._auth.observe(msg)
            return msg

    # session plumbing

    def hello(self, next_block: int) -> int:
        """Exchange config digests and agree on the block to resume from."""
        digest = self.config.digest()
        scheme = self.config.auth_scheme.encode()[:16].ljust(16, b"\0")
        msg = Message(MsgType.HELLO, next_block, _HELLO.pack(digest, scheme))
        self.transport.send(msg)
        reply = self.transport.recv(timeout=self.config_timeout)
        if reply.type != MsgType.HELLO or len(reply.payload) != _HELLO.size:
            raise ProtocolError("expected HELLO")
        peer_digest, _ = _HELLO.unpack(reply.payload)
        if peer_digest != digest:
            self.transport.send(Message(MsgType.ABORT, SESSION_BLOCK, b"config mismatch"))
            raise ConfigMismatch("peer runs a different configuration")
        return min(next_block, reply.block_id)

    def session_abort(self, reason: str) -> None:
        try:
            self.transport.send(Message(MsgType.ABORT, SESSION_BLOCK, reason.encode()[:200]))
        except Exception:  # noqa: BLE001 - best effort on the way out
            pass

    def run_block(self, k: int) -> BlockResult:
        self._block = k
        if k in self.committed:
            self.pool.restore(self.committed[k])  # redo after a reconnect
        else:
            self.committed[k] = self.pool.state()
            for old in [b for b in self.committed if b < k - 2]:
                del self.committed[old]
        ledger = LeakageLedger()
        self._result = BlockResult(k, False)
        self._block_hash = hashlib.sha256()
        self._auth = BlockAuthenticator(self.pool.take(ledger))
        t0 = time.perf_counter()
        try:
            self._run(k, ledger)
        except PeerAbort as exc:
            self._result.reason = f"peer: {exc}"
        except Quarantine as exc:
            self._result.reason = f"quarantined: {exc}"
        except BLOCK_ERRORS as exc:
            if isinstance(exc, TagMismatch):
                log.error("ALARM block %d: %s", k, exc)
            self._result.reason = f"{type(exc).__name__}: {exc}"
            self.send(MsgType.ABORT, str(exc).encode()[:200])
        res = self._result
        block_id = k.to_bytes(8, "big")
        if res.delivered:
            self.transcript.update(b"K" + block_id + self._block_hash.digest())
        else:
            self.transcript.update(b"X" + block_id)
        res.ledger = ledger.as_dict()
        res.wall_s["total"] = time.perf_counter() - t0
        if not res.delivered:
            log.info("%s block %d aborted (%s)", self.role, k, res.reason)
        self._result = None
        return res

    def _store(self, k: int, key: np.ndarray, sq: SecurityQuantities, eps_hat: float) -> None:
        res = self._result
        res.delivered = True
        res.key_bits = int(key.size)
        if k in self.keystore:
            return
        period = self.config.emission_s / self.config.duty.duty
        self.keystore.append(KeyStoreRecord(k, (k + 1) * period, key, sq.delta_i, eps_hat))

    def _run(self, k: int, ledger: LeakageLedger) -> None:
        raise NotImplementedError


class Alice(Endpoint):
    role = "alice"
    peer = "bob"

    def _run(self, k: int, ledger: LeakageLedger) -> None:
        cfg, res = self.config, self._result
        x, p = self.sim.alice_view(k)
        n = x.size

        # parameter estimation: reveal a random subset of the modulation
        disc_seed = protocol_seed(cfg, k, "disclosure")
        disclosed, key_idx = est_mod.split_indices(n, cfg.disclose_fraction, disc_seed)
        full_range = est_mod.QUANT_RANGE_SIGMAS * math.sqrt(cfg.link.v_a)
        cx = est_mod.quantize(x[disclosed], full_range)
        cp = est_mod.quantize(p[disclosed], full_range)
        payload = (_DISCLOSE_HEAD.pack(disc_seed, full_range, disclosed.size)
                   + cx.astype(">u2").tobytes() + cp.astype(">u2").tobytes())
        ledger.add("estimation_bits", 2 * est_mod.QUANT_BITS * disclosed.size)
        self.send(MsgType.ESTIMATION_DATA, payload)

        msg = self.recv(MsgType.ESTIMATION_RESULT)
        est, cal, choices = _parse_estimation_result(msg.payload, key_idx.size)
        res.sifting_bits = int(key_idx.size)
        res.epsilon_hat = est.epsilon_hat
        if not est_mod.check_modulation(est, cfg.link.v_a):
            raise LocalAbort(f"modulation variance estimate {est.v_a_hat:.3f} is off")
        sq = est_mod.agree_security(est, cal, cfg.link.beta)
        res.delta_i_estimate = sq.delta_i
        values = np.where(choices.astype(bool), p[key_idx], x[key_idx])

        # reverse reconciliation, frame by frame
        t0 = time.perf_counter()
        channel = ml.ChannelModel.from_estimate(est, cal)
        frame, n_frames = frame_layout(key_idx.size, cfg.frame_pulses)
        plan = ml.ReconciliationPlan.for_channel(channel, frame, cfg.code_seed)
        res.n_key_pulses, res.n_frames = frame * n_frames, n_frames
        pieces = []
        for f in range(n_frames):
            msgs = [self._recv_plane(f, level, plan) for level in range(N_PLANES)]
            sl = slice(f * frame, (f + 1) * frame)
            if cfg.reconciliation == "oracle":
                out = self._oracle(k, key_idx[sl], cal, plan, msgs, ledger)
            else:
                out = ml.alice_reconcile(values[sl], plan, channel, msgs, ledger)
            res.frame_failures += int(not out.success)
            pieces.append(out.key_bits())
        key_bits = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.uint8)

        msg = self.recv(MsgType.BCH_SYNDROME)
        code = BchCode()
        n_chunks = int.from_bytes(msg.payload[:4], "big")
        if n_chunks != len(code.chunks(key_bits.size)):
            raise ProtocolError("BCH chunk count does not match the key material")
        bch = bch_cleanup(key_bits, unpack_syndromes(msg.payload[4:], n_chunks, code), code, ledger)
        res.bch_corrected = bch.corrected
        res.wall_s["reconciliation"] = time.perf_counter() - t0
        if not bch.success:
            raise LocalAbort(f"BCH could not clean {len(bch.failed_chunks)} chunk(s)")

        # privacy amplification and verification
        t0 = time.perf_counter()
        beta, length, out_len, sq_final = secret_length(
            cfg, sq, ledger, res.n_key_pulses, plan.label_entropy)
        res.beta, res.delta_i = beta, sq_final.delta_i
        pa_seed = protocol_seed(cfg, k, "privacy-amplification")
        self.send(MsgType.PA_PARAMS, _PA.pack(pa_seed, out_len))
        final = amplify(bch.bits, out_len, pa_seed)
        res.wall_s["privacy_amplification"] = time.perf_counter() - t0

        v_seed = protocol_seed(cfg, k, "verification")
        pos = sample_positions(out_len, cfg.verify_sample, v_seed)
        ledger.add("verification_bits", cfg.verify_sample)
        self.send(MsgType.VERIFY_SAMPLE, _SAMPLE.pack(v_seed, pos.size) + pack_bits(final[pos]))
        msg = self.recv(MsgType.VERIFY_RESULT)
        if msg.payload != b"\x01":
            raise Quarantine("verification sample mismatch")
        rest = discard(final, pos)
        refill, key = rest[: 8 * KEY_BYTES], rest[8 * KEY_BYTES:]
        assert key.size == length
        self.send(MsgType.AUTH_REKEY)
        self.pool.refill(np.packbits(refill).tobytes())
        self._store(k, key, sq_final, est.epsilon_hat)

    def _recv_plane(self, frame: int, level: int, plan: ml.ReconciliationPlan) -> ml.PlaneMessage:
        disclosed = plan.entry.rates[level] == DISCLOSE
        kind = MsgType.PLANE_DISCLOSE if disclosed else MsgType.SYNDROME
        msg = self.recv(MsgType.PLANE_DISCLOSE, MsgType.SYNDROME)
        pp = PlanePayload.decode(msg.payload)
        if msg.type != kind or (pp.frame, pp.level) != (frame, level):
            raise ProtocolError(
                f"expected {kind.name} for frame {frame} plane {level}, "
                f"got {msg.type.name} for frame {pp.frame} plane {pp.level}")
        if (pp.code_seed, pp.table_version) != (plan.code_seed, plan.table_version):
            raise ProtocolError("peer uses a different code seed or rate table")
        want = plan.n if disclosed else plan.code(level).m
        if pp.bits.size != want:
            raise ProtocolError("plane message has the wrong size")
        return ml.PlaneMessage(level, disclosed, pp.bits)

    def _oracle(self, k, idx, cal, plan, msgs, ledger) -> ml.ReconciliationOutcome:
        # simulation shortcut: read Bob's labels instead of decoding
        _, bob_value = self.sim.bob_view(k)
        codes = ml.bob_labels(normalize(bob_value[idx], cal), plan)
        leaked = sum(m.n_bits for m in msgs)
        ledger.add("reconciliation_bits", leaked)
        coded = plan.coded_levels
        return ml.ReconciliationOutcome(
            to_planes(codes), True, {}, {lv: True for lv in coded}, leaked,
            plan.label_entropy, plan.n, coded)


class Bob(Endpoint):
    role = "bob"
    peer = "alice"

    def _run(self, k: int, ledger: LeakageLedger) -> None:
        cfg, res = self.config, self._result
        choice, value = self.sim.bob_view(k)
        cal = self.sim.calibration
        n = value.size

        msg = self.recv(MsgType.ESTIMATION_DATA)
        disc_seed, full_range, n_disc = _DISCLOSE_HEAD.unpack(msg.payload[: _DISCLOSE_HEAD.size])
        disclosed, key_idx = est_mod.split_indices(n, cfg.disclose_fraction, disc_seed)
        body = msg.payload[_DISCLOSE_HEAD.size:]
        if n_disc != disclosed.size or len(body) != 4 * n_disc:
            raise ProtocolError("disclosure does not match the agreed subset size")
        codes = np.frombuffer(body, dtype=">u2").astype(np.uint16)
        disclosure = est_mod.Disclosure(disclosed, key_idx, codes[:n_disc], codes[n_disc:],
                                        full_range)
        ledger.add("estimation_bits", disclosure.message_bits)
        est = est_mod.estimate_from_disclosure(disclosure, choice, value, cal, cfg.link.beta)
        est = EstimationResult.from_bytes(est.to_bytes())  # exactly what Alice will see
        res.epsilon_hat = est.epsilon_hat
        sq = est_mod.agree_security(est, cal, cfg.link.beta)
        res.delta_i_estimate = sq.delta_i

        sift = choice[key_idx]
        res.sifting_bits = int(key_idx.size)
        self.send(MsgType.ESTIMATION_RESULT,
                  est.to_bytes() + _CAL.pack(cal.n0, cal.v_el_raw, cal.eta, key_idx.size)
                  + pack_bits(sift))

        t0 = time.perf_counter()
        channel = ml.ChannelModel.from_estimate(est, cal)
        frame, n_frames = frame_layout(key_idx.size, cfg.frame_pulses)
        plan = ml.ReconciliationPlan.for_channel(channel, frame, cfg.code_seed)
        res.n_key_pulses, res.n_frames = frame * n_frames, n_frames
        snu = normalize(value[key_idx], cal)
        pieces = []
        for f in range(n_frames):
            labels = ml.bob_labels(snu[f * frame:(f + 1) * frame], plan)
            for m in ml.bob_messages(labels, plan):
                kind = MsgType.PLANE_DISCLOSE if m.disclosed else MsgType.SYNDROME
                ledger.add("reconciliation_bits", m.n_bits)
                pp = PlanePayload(f, m.level, plan.code_seed, plan.table_version, m.bits)
                self.send(kind, pp.encode())
            pieces.append(ml.key_material(to_planes(labels), plan.coded_levels))
        key_bits = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.uint8)
        code = BchCode()
        syn = bob_syndromes(key_bits, code)
        ledger.add("bch_bits", code.syndrome_bits * len(syn))
        self.send(MsgType.BCH_SYNDROME, len(syn).to_bytes(4, "big") + pack_syndromes(syn, code))
        res.wall_s["reconciliation"] = time.perf_counter() - t0

        beta, length, out_len, sq_final = secret_length(
            cfg, sq, ledger, res.n_key_pulses, plan.label_entropy)
        res.beta, res.delta_i = beta, sq_final.delta_i
        msg = self.recv(MsgType.PA_PARAMS)
        pa_seed, peer_len = _PA.unpack(msg.payload)
        if peer_len != out_len:
            raise ProtocolError(f"hash output length {peer_len} disagrees with {out_len}")
        t0 = time.perf_counter()
        final = amplify(key_bits, out_len, pa_seed)
        res.wall_s["privacy_amplification"] = time.perf_counter() - t0

        msg = self.recv(MsgType.VERIFY_SAMPLE)
        v_seed, n_sample = _SAMPLE.unpack(msg.payload[: _SAMPLE.size])
        if n_sample != cfg.verify_sample:
            raise ProtocolError("verification sample size differs from the configuration")
        pos = sample_positions(out_len, n_sample, v_seed)
        theirs = unpack_bits(msg.payload[_SAMPLE.size:], n_sample)
        ledger.add("verification_bits", n_sample)
        ok = bool(np.array_equal(theirs, final[pos]))
        self.send(MsgType.VERIFY_RESULT, b"\x01" if ok else b"\x00")
        if not ok:
            raise Quarantine("verification sample mismatch")
        self.recv(MsgType.AUTH_REKEY)
        rest = discard(final, pos)
        refill, key = rest[: 8 * KEY_BYTES], rest[8 * KEY_BYTES:]
        self.pool.refill(np.packbits(refill).tobytes())
        self._store(k, key, sq_final, est.epsilon_hat)

def _parse_estimation_result(payload: bytes, n_key: int):
    size = EstimationResult._FMT.size
    if len(payload) < size + _CAL.size:
        raise ProtocolError("truncated estimation result")
    est = EstimationResult.from_bytes(payload[:size])
    n0, v_el_raw, eta, n_sifted = _CAL.unpack(payload[size: size + _CAL.size])
    if n_sifted != n_key:
        raise ProtocolError("sifting list length does not match the key subset")
    choices = unpack_bits(payload[size + _CAL.size:], n_key)
    return est, Calibration(n0, v_el_raw, eta), choices
