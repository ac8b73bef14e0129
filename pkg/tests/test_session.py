import logging
import math
import socket
import threading

import numpy as np
import pytest

from cvqkd import estimation
from cvqkd.estimation import EstimationResult
from cvqkd.model_core import REFERENCE, LEDGER_CATEGORIES, LeakageLedger
from cvqkd.reconciliation.bch import BchCode, BchOutcome
from cvqkd.session import protocol
from cvqkd.session.auth import AuthError, AuthPool, BlockAuthenticator, TagMismatch
from cvqkd.session.config import SessionConfig
from cvqkd.session.duty import FIELD_DUTY, SINGLE_CORE_DUTY, DutyModel
from cvqkd.session.keystore import KeyStore, KeyStoreRecord
from cvqkd.session.messages import (
    AUTH_TAG_BYTES,
    AUTHENTICATED,
    HEADER,
    PLANE_HEAD,
    Message,
    MsgType,
    PlanePayload,
    ProtocolError,
    decode,
    pack_bits,
    unpack_bits,
)
from cvqkd.session.protocol import ConfigMismatch
from cvqkd.session.runner import (
    LoopbackHub,
    predicted_rate,
    run_session,
    simulate,
    stats_from_json,
    stats_to_json,
    throughput_report,
)
from cvqkd.session.transport import FaultyTransport, TransportClosed

SMALL = SessionConfig(n_blocks=3, n_pulses=200_000, calibration_samples=1_000_000,
                      reconciliation="oracle")


def _pad(n_bits):
    return -n_bits % 8


# messages


def test_message_round_trip():
    for kind in MsgType:
        tag = b"\x07" * AUTH_TAG_BYTES if kind in AUTHENTICATED else b""
        msg = Message(kind, 12345, b"payload", tag)
        raw = msg.encode()
        assert raw[:1] == bytes([int(kind)])
        assert int.from_bytes(raw[9:13], "big") == 7
        assert decode(raw) == msg
        assert msg.wire_bits == 8 * len(raw)


def test_catalogue_tags():
    assert [int(k) for k in MsgType] == list(range(1, 12))


def test_message_rejections():
    raw = Message(MsgType.SYNDROME, 1, b"abc").encode()
    with pytest.raises(ProtocolError):
        decode(b"\x7f" + raw[1:])  # unknown type
    with pytest.raises(ProtocolError):
        decode(raw + b"x")  # length field disagrees
    with pytest.raises(ProtocolError):
        decode(raw[:-1])
    with pytest.raises(ProtocolError):
        decode(raw[:5])
    with pytest.raises(ProtocolError):
        Message(MsgType.PA_PARAMS, 1, b"x").encode()  # untagged authenticated type
    with pytest.raises(ProtocolError):
        Message(MsgType.PA_PARAMS, 1, b"x", b"short")


def test_plane_payload_round_trip():
    bits = np.random.default_rng(0).integers(0, 2, 1001).astype(np.uint8)
    pp = PlanePayload(3, 2, 99, 1, bits)
    back = PlanePayload.decode(pp.encode())
    assert (back.frame, back.level, back.code_seed, back.table_version) == (3, 2, 99, 1)
    assert np.array_equal(back.bits, bits)
    with pytest.raises(ProtocolError):
        PlanePayload.decode(pp.encode()[:5])
    with pytest.raises(ProtocolError):
        PlanePayload.decode(pp.encode()[:-1])
    with pytest.raises(ProtocolError):
        unpack_bits(pack_bits(bits), 2000)


# authentication


def test_auth_pool_budget():
    pool = AuthPool(bytes(range(40)))
    led = LeakageLedger()
    assert pool.take(led) == bytes(range(16))
    assert led.auth_bits == 128
    pool.take(led)
    with pytest.raises(AuthError):
        pool.take(led)  # 8 bytes left
    pool.refill(b"\x00" * 8)
    assert len(pool.take()) == 16
    with pytest.raises(AuthError):
        AuthPool(b"\x00" * 15)


def test_tag_detects_tampering_and_history():
    key = b"k" * 16
    alice, bob = BlockAuthenticator(key), BlockAuthenticator(key)
    first = Message(MsgType.ESTIMATION_DATA, 4, b"data")
    alice.observe(first)
    bob.observe(first)
    signed = alice.sign(Message(MsgType.PA_PARAMS, 4, b"seed"))
    bob.check(signed)
    with pytest.raises(TagMismatch):
        bob.check(Message(signed.type, 4, b"seeD", signed.auth_tag))
    with pytest.raises(TagMismatch):
        bob.check(Message(signed.type, 5, b"seed", signed.auth_tag))
    # a different earlier frame changes every later tag
    other = BlockAuthenticator(key)
    other.observe(Message(MsgType.ESTIMATION_DATA, 4, b"dat4"))
    with pytest.raises(TagMismatch):
        other.check(signed)
    with pytest.raises(TagMismatch):
        BlockAuthenticator(b"x" * 16).check(signed)


def test_auth_overhead_is_negligible():
    assert 128 / 150_000 == pytest.approx(0.00085, abs=1e-5)


# duty model and configuration


def test_duty_model():
    assert SINGLE_CORE_DUTY.duty == pytest.approx(5 / 34)
    assert SINGLE_CORE_DUTY.duty < 0.2
    assert 1 / SINGLE_CORE_DUTY.duty == pytest.approx(6.8)
    assert FIELD_DUTY.duty / SINGLE_CORE_DUTY.duty == pytest.approx(2.1)
    assert DutyModel(worker_count=50, contention=0.0).duty == 1.0
    assert DutyModel(reconciliation_s=0, pa_s=0, comm_s=0).duty == 1.0
    with pytest.raises(ValueError):
        DutyModel(pa_s=-1)
    with pytest.raises(ValueError):
        DutyModel(worker_count=0)


def test_config_round_trip(tmp_path):
    cfg = SMALL.with_(noise_positions=(0.0, 1e6), noise_epsilons=(0.01, 0.05))
    path = tmp_path / "cfg.json"
    cfg.save(path)
    assert SessionConfig.load(path) == cfg
    assert cfg.digest() == SessionConfig.load(path).digest()
    assert cfg.digest() != cfg.with_(seed=1).digest()
    assert cfg.digest() != cfg.with_(auth_scheme="other").digest()
    assert cfg.noise_script.peak() == 0.05
    with pytest.raises(ValueError):
        SessionConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        SessionConfig(reconciliation="cascade")
    with pytest.raises(ValueError):
        SessionConfig(disclose_fraction=1.0)


# key store


def test_keystore(tmp_path):
    store = KeyStore(tmp_path / "ks")
    key = np.random.default_rng(1).integers(0, 2, 1234).astype(np.uint8)
    store.append(KeyStoreRecord(0, 1.5, key, 0.15, 0.01))
    store.append(KeyStoreRecord(2, 3.0, key[:100], 0.14, 0.02))
    with pytest.raises(ValueError):
        store.append(KeyStoreRecord(2, 4.0, key, 0.1, 0.0))
    again = KeyStore(tmp_path / "ks")
    assert len(again) == 2 and 2 in again and 1 not in again
    recs = again.records()
    assert np.array_equal(recs[0].key, key) and recs[1].key.size == 100
    lines = again.export_hex().splitlines()
    assert lines[0].split()[:2] == ["0", "1234"]
    assert bytes.fromhex(lines[0].split()[2]) == np.packbits(key).tobytes()
    index = (tmp_path / "ks" / "index.jsonl").read_text()
    assert np.packbits(key).tobytes().hex()[:32] not in index
    mem = KeyStore()
    mem.append(KeyStoreRecord(0, 1.5, key, 0.15, 0.01))
    assert mem.raw_bytes() == again.raw_bytes()[: len(mem.raw_bytes())]


# end-to-end sessions


def _keys(store):
    return {r.block_id: r.key for r in store.records()}


def _assert_consistent(res):
    """Both sides agree on every block and hold identical keys for delivered ones."""
    a_keys, b_keys = _keys(res.alice_endpoint.keystore), _keys(res.bob_endpoint.keystore)
    assert set(a_keys) == set(b_keys)
    for a, b in zip(res.alice.blocks, res.bob.blocks):
        assert a.delivered == b.delivered
        assert (a.block_id in a_keys) == a.delivered
        if a.delivered:
            assert np.array_equal(a_keys[a.block_id], b_keys[a.block_id])
            assert a.key_bits == b.key_bits == a_keys[a.block_id].size
    assert res.alice_endpoint.keystore.raw_bytes() == res.bob_endpoint.keystore.raw_bytes()
    assert res.alice.transcript_digest == res.bob.transcript_digest


@pytest.fixture(scope="module")
def smoke():
    cfg = SessionConfig(n_blocks=5, reconciliation="oracle")
    return simulate(cfg, record_frames=True)


def test_five_block_smoke(smoke):
    _assert_consistent(smoke)
    delivered = smoke.alice.delivered
    assert len(delivered) >= 4
    for b in delivered:
        assert 100_000 <= b.key_bits <= 200_000
        assert b.n_key_pulses == 1_000_000
        assert b.ledger["estimation_bits"] == 32_000_000
        assert b.ledger["auth_bits"] == 128
        assert b.ledger["verification_bits"] == 200
    assert smoke.alice.transcript_digest == smoke.bob.transcript_digest


def test_delivered_length_accounting(smoke):
    for b in smoke.alice.delivered:
        # hash output = key + verification sample + auth refill; margin comes off the key
        assert b.key_bits == math.floor(b.n_key_pulses * b.delta_i) - 200 - 128 - 64


def _audit(frames, k):
    content = dict.fromkeys(("estimation", "sifting", "reconciliation", "bch", "verification"), 0)
    fixed = 0
    wire = 0
    for raw in frames:
        msg = decode(raw[1:])
        if msg.block_id != k:
            continue
        wire += msg.wire_bits
        fixed += 8 * HEADER.size + 8 * len(msg.auth_tag)
        p = msg.payload
        t = msg.type
        if t == MsgType.ESTIMATION_DATA:
            n = protocol._DISCLOSE_HEAD.unpack(p[: protocol._DISCLOSE_HEAD.size])[2]
            content["estimation"] += 32 * n
            fixed += 8 * protocol._DISCLOSE_HEAD.size
        elif t == MsgType.ESTIMATION_RESULT:
            n = protocol._CAL.unpack(p[EstimationResult._FMT.size:][: protocol._CAL.size])[3]
            content["sifting"] += n
            fixed += 8 * (EstimationResult._FMT.size + protocol._CAL.size) + _pad(n)
        elif t in (MsgType.SYNDROME, MsgType.PLANE_DISCLOSE):
            n = PLANE_HEAD.unpack(p[: PLANE_HEAD.size])[4]
            content["reconciliation"] += n
            fixed += 8 * PLANE_HEAD.size + _pad(n)
        elif t == MsgType.BCH_SYNDROME:
            chunks = int.from_bytes(p[:4], "big")
            code = BchCode()
            content["bch"] += chunks * code.syndrome_bits
            fixed += 32 + chunks * _pad(code.syndrome_bits)
        elif t == MsgType.VERIFY_SAMPLE:
            n = protocol._SAMPLE.unpack(p[: protocol._SAMPLE.size])[1]
            content["verification"] += n
            fixed += 8 * protocol._SAMPLE.size + _pad(n)
        else:
            fixed += 8 * len(p)  # PA_PARAMS, VERIFY_RESULT, AUTH_REKEY, ABORT
    return wire, content, fixed


def test_conservation_audit(smoke):
    for side in ("alice", "bob"):
        stats = getattr(smoke, side)
        frames = getattr(smoke, f"{side}_endpoint").frames
        for b in stats.blocks:
            wire, content, fixed = _audit(frames, b.block_id)
            assert wire == b.wire_bits
            assert content["estimation"] == b.ledger["estimation_bits"]
            assert content["reconciliation"] == b.ledger["reconciliation_bits"]
            assert content["bch"] == b.ledger["bch_bits"]
            assert content["verification"] == b.ledger["verification_bits"]
            assert content["sifting"] == b.sifting_bits
            ledger_bits = sum(b.ledger[c] for c in LEDGER_CATEGORIES if c != "auth_bits")
            assert b.wire_bits == ledger_bits + b.sifting_bits + fixed


def test_ldpc_session_matches_oracle_session():
    ldpc = simulate(SMALL.with_(reconciliation="ldpc", n_blocks=2))
    oracle = simulate(SMALL.with_(n_blocks=2))
    _assert_consistent(ldpc)
    assert ldpc.alice_endpoint.keystore.raw_bytes() == oracle.alice_endpoint.keystore.raw_bytes()
    assert all(b.frame_failures == 0 for b in ldpc.alice.blocks)


def test_identical_seeds_identical_sessions():
    one = simulate(SMALL, record_frames=True)
    two = simulate(SMALL, record_frames=True)
    assert one.alice.transcript_digest == two.alice.transcript_digest
    assert one.alice.transcript_digest == one.bob.transcript_digest
    assert one.alice_endpoint.frames == two.alice_endpoint.frames
    assert one.alice_endpoint.keystore.raw_bytes() == two.alice_endpoint.keystore.raw_bytes()
    other = simulate(SMALL.with_(seed=1))
    assert other.alice.transcript_digest != one.alice.transcript_digest


# fault injection: every abort path leaves no key on either side


def _only_block_lost(res, k, reason_a=None, reason_b=None):
    _assert_consistent(res)
    for a, b in zip(res.alice.blocks, res.bob.blocks):
        if a.block_id == k:
            assert not a.delivered and not b.delivered
            if reason_a:
                assert reason_a in a.reason
            if reason_b:
                assert reason_b in b.reason
        else:
            assert a.delivered
    return res


def _wrap(target_role, fault):
    def wrap(role, attempt, end):
        return FaultyTransport(end, fault) if role == target_role and attempt == 0 else end
    return wrap


def test_reordered_planes_abort_the_block():
    state = {"held": None, "done": False}
    planes = (MsgType.SYNDROME, MsgType.PLANE_DISCLOSE)

    def fault(i, msg):
        if msg.block_id == 1 and msg.type in planes and not state["done"]:
            if state["held"] is None:
                state["held"] = msg
                return []
            state["done"] = True
            return [msg, state["held"]]
        return [msg]

    res = simulate(SMALL, wrap=_wrap("bob", fault))
    _only_block_lost(res, 1, "ProtocolError", "peer")


def test_tampered_tagged_message_raises_alarm(caplog):
    def fault(i, msg):
        if msg.block_id == 1 and msg.type == MsgType.PA_PARAMS:
            payload = bytes([msg.payload[0] ^ 1]) + msg.payload[1:]
            return [Message(msg.type, msg.block_id, payload, msg.auth_tag)]
        return [msg]

    with caplog.at_level(logging.ERROR):
        res = simulate(SMALL, wrap=_wrap("alice", fault))
    _only_block_lost(res, 1, "peer", "TagMismatch")
    assert any("ALARM" in r.message for r in caplog.records)


def test_tampered_untagged_message_caught_by_next_tag():
    def fault(i, msg):
        if msg.block_id == 2 and msg.type == MsgType.ESTIMATION_DATA:
            payload = msg.payload[:-1] + bytes([msg.payload[-1] ^ 0x80])
            return [Message(msg.type, msg.block_id, payload)]
        return [msg]

    res = simulate(SMALL, wrap=_wrap("alice", fault))
    _only_block_lost(res, 2, "TagMismatch", "peer")


def test_negative_secret_fraction_aborts():
    cfg = SMALL.with_(link=REFERENCE.with_(t=0.2, epsilon=0.2), n_blocks=2)
    res = simulate(cfg)
    _assert_consistent(res)
    for a, b in zip(res.alice.blocks, res.bob.blocks):
        assert not a.delivered and not b.delivered
        assert "SecurityAbort" in b.reason
    assert len(res.alice_endpoint.keystore) == 0


def test_modulation_check_failure_aborts(monkeypatch):
    real = estimation.check_modulation
    calls = {"n": 0}

    def flaky(est, v_a, n_sigma=5.0):
        calls["n"] += 1
        return real(est, v_a, n_sigma) and calls["n"] != 2

    monkeypatch.setattr(estimation, "check_modulation", flaky)
    _only_block_lost(simulate(SMALL), 1, "LocalAbort", "peer")


def test_bch_failure_aborts(monkeypatch):
    real = protocol.bch_cleanup

    def failing(bits, syn, code, ledger):
        out = real(bits, syn, code, ledger)
        if failing.block == 0:
            out = BchOutcome(out.bits, out.corrected, [0])
        failing.block += 1
        return out

    failing.block = 0
    monkeypatch.setattr(protocol, "bch_cleanup", failing)
    _only_block_lost(simulate(SMALL), 0, "BCH", "peer")


def test_residual_error_is_quarantined(monkeypatch):
    real = protocol.bch_cleanup

    def corrupt(bits, syn, code, ledger):
        out = real(bits, syn, code, ledger)
        if corrupt.block == 2:
            out.bits[17] ^= 1  # an error the cleanup stage missed
        corrupt.block += 1
        return out

    corrupt.block = 0
    monkeypatch.setattr(protocol, "bch_cleanup", corrupt)
    _only_block_lost(simulate(SMALL), 2, "quarantined", "quarantined")


def test_oversized_deductions_abort_every_block():
    res = simulate(SMALL.with_(verify_sample=50_000, n_blocks=2))
    _assert_consistent(res)
    for a, b in zip(res.alice.blocks, res.bob.blocks):
        assert "KeyAbort" in a.reason and "KeyAbort" in b.reason


def test_transport_loss_resumes_the_interrupted_block():
    def fault(i, msg):
        if msg.block_id == 1 and msg.type == MsgType.AUTH_REKEY:
            fault.inner.close()
            raise TransportClosed("link dropped")
        return [msg]

    def wrap(role, attempt, end):
        if role == "alice" and attempt == 0:
            fault.inner = end
            return FaultyTransport(end, fault)
        return end

    res = simulate(SMALL, wrap=wrap)
    baseline = simulate(SMALL)
    assert res.alice.reconnects == res.bob.reconnects == 1
    _assert_consistent(res)
    assert len(res.alice.delivered) == SMALL.n_blocks
    assert res.alice_endpoint.keystore.raw_bytes() == baseline.alice_endpoint.keystore.raw_bytes()
    assert res.alice_endpoint.pool.state() == baseline.alice_endpoint.pool.state()
    assert res.bob_endpoint.pool.state() == baseline.bob_endpoint.pool.state()


def test_config_mismatch_refuses_to_start():
    hub = LoopbackHub()
    errors = {}

    def worker(role, cfg):
        try:
            run_session(cfg, role, hub.connector(role))
        except Exception as exc:  # noqa: BLE001
            errors[role] = exc

    threads = [threading.Thread(target=worker, args=("alice", SMALL)),
               threading.Thread(target=worker, args=("bob", SMALL.with_(seed=9)))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=60)
    assert isinstance(errors["alice"], ConfigMismatch)
    assert isinstance(errors["bob"], ConfigMismatch)


def test_short_psk_is_a_startup_error():
    with pytest.raises(AuthError):
        simulate(SMALL, psk=b"\x00" * 8)


def test_pool_is_replenished_from_keys(smoke):
    # each delivered block spends 128 bits and returns 128 bits
    for ep in (smoke.alice_endpoint, smoke.bob_endpoint):
        assert ep.pool.available_bits == SessionConfig().psk_bits
    assert smoke.alice_endpoint.pool.state() == smoke.bob_endpoint.pool.state()


# drift and reporting


def test_excess_noise_spike_dips_the_rate():
    n = SMALL.n_pulses
    cfg = SMALL.with_(n_blocks=6, noise_positions=(0.0, 2 * n - 1, 2 * n, 4 * n - 1, 4 * n),
                      noise_epsilons=(0.01, 0.01, 0.1, 0.1, 0.01))
    res = simulate(cfg)
    _assert_consistent(res)
    eps = np.array([b.epsilon_hat for b in res.alice.blocks])
    keys = np.array([b.key_bits for b in res.alice.blocks])
    calm, spike = [0, 1, 4, 5], [2, 3]
    assert eps[spike].min() > eps[calm].max()
    assert keys[spike].max() < keys[calm].min()
    report = throughput_report(res.alice, rate_window_s=1e-9, eps_window=1)
    assert np.corrcoef(report.rates, report.eps)[0, 1] < -0.8


def test_throughput_report(smoke):
    one = throughput_report(smoke.alice, SINGLE_CORE_DUTY)
    three = throughput_report(smoke.alice, FIELD_DUTY)
    assert three.processing_rate / one.processing_rate == pytest.approx(2.1)
    assert one.optical_rate == pytest.approx(three.optical_rate)
    assert one.duty == pytest.approx(5 / 34)
    assert one.n_blocks == 5 and one.n_delivered == len(smoke.alice.delivered)
    assert 0.8 < one.processing_rate / predicted_rate(SessionConfig(), SINGLE_CORE_DUTY,
                                                      one.mean_beta) < 1.05
    rows = one.time_series_csv().splitlines()
    assert rows[0] == "time_s,rate_bits_per_s,epsilon_hat" and len(rows) == 6
    assert "\t" in one.time_series_csv("\t")
    with pytest.raises(ValueError):
        throughput_report(type(smoke.alice)("alice", SessionConfig()))


def test_stats_json_round_trip(smoke):
    back = stats_from_json(stats_to_json(smoke.alice))
    assert back.transcript_digest == smoke.alice.transcript_digest
    assert [b.key_bits for b in back.blocks] == [b.key_bits for b in smoke.alice.blocks]
    assert back.config == smoke.alice.config


@pytest.mark.slow
def test_ten_thousand_block_soak():
    cfg = SessionConfig(n_blocks=10_000, n_pulses=100_000, frame_pulses=50_000,
                        reconciliation="oracle", calibration_samples=10_000_000)
    res = simulate(cfg)
    assert len(res.alice.blocks) == len(res.bob.blocks) == 10_000
    assert res.alice_endpoint.keystore.raw_bytes() == res.bob_endpoint.keystore.raw_bytes()
    assert res.alice.transcript_digest == res.bob.transcript_digest
    report = throughput_report(res.alice)
    ratio = report.processing_rate / report.predicted_rate
    print(f"soak: {report.n_delivered} delivered, rate/prediction {ratio:.3f}")
    assert abs(ratio - 1) < 0.2


# command line


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_cli_curves(capsys):
    from cvqkd.cli import main

    assert main(["curves", "waterfall"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0].startswith("loss_db,distance_km")
    assert len(rows) > 2
    assert main(["curves", "excess-noise"]) == 0
    rows = capsys.readouterr().out.splitlines()
    rates = [float(r.split(",")[1]) for r in rows[1:]]
    assert rates[0] > 0 and all(b <= a for a, b in zip(rates, rates[1:]))
    assert main(["curves", "range"]) == 0
    assert "max_distance_km" in capsys.readouterr().out


def test_cli_simulate_report_export(tmp_path, capsys):
    from cvqkd.cli import main

    cfg_path = tmp_path / "cfg.json"
    SMALL.save(cfg_path)
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(cfg_path), "--blocks", "2", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "key stores identical: True" in text
    assert main(["report", str(out / "alice" / "stats.json"),
                 "--timeseries", str(tmp_path / "ts.tsv"), "--delimiter", "\t"]) == 0
    assert (tmp_path / "ts.tsv").read_text().count("\t") == 3 * 2  # header plus two blocks, three columns
    capsys.readouterr()
    assert main(["export", str(out / "alice")]) == 0
    alice_hex = capsys.readouterr().out
    assert main(["export", str(out / "bob")]) == 0
    assert capsys.readouterr().out == alice_hex
    assert len(alice_hex.splitlines()) == 2


def test_cli_endpoints_over_tcp(tmp_path):
    from cvqkd.cli import main

    cfg_path = tmp_path / "cfg.json"
    SMALL.with_(n_blocks=2).save(cfg_path)
    port = str(_free_port())
    codes = {}
    bob = threading.Thread(target=lambda: codes.setdefault("bob", main(
        ["bob", "--config", str(cfg_path), "--port", port, "--out", str(tmp_path / "b")])))
    bob.start()
    codes["alice"] = main(["alice", "--config", str(cfg_path), "--port", port,
                           "--out", str(tmp_path / "a")])
    bob.join(timeout=120)
    assert codes == {"alice": 0, "bob": 0}
    a, b = KeyStore(tmp_path / "a" / "keys"), KeyStore(tmp_path / "b" / "keys")
    assert len(a) == 2 and a.raw_bytes() == b.raw_bytes()
