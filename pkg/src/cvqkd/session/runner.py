"""Session driver, loopback simulation and throughput reporting."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..security_bound import holevo_bound
from .config import SessionConfig
from .duty import DutyModel
from .keystore import KeyStore
from .protocol import Alice, BlockResult, Bob, Endpoint, LinkSimulator
from .transport import LoopbackTransport, Transport, TransportClosed

log = logging.getLogger(__name__)

MAX_RECONNECTS = 5


@dataclass
class SessionStats:
    role: str
    config: SessionConfig
    blocks: list[BlockResult] = field(default_factory=list)
    reconnects: int = 0
    transcript_digest: str = ""

    @property
    def delivered(self) -> list[BlockResult]:
        return [b for b in self.blocks if b.delivered]

    @property
    def key_bits(self) -> int:
        return sum(b.key_bits for b in self.blocks)


def run_session(
    config: SessionConfig,
    role: str,
    connect: Callable[[int], Transport],
    sim: LinkSimulator | None = None,
    keystore: KeyStore | None = None,
    psk: bytes | None = None,
    record_frames: bool = False,
    endpoint: Endpoint | None = None,
) -> SessionStats:
    """Run ``config.n_blocks`` blocks as ``role``.

    ``connect(attempt)`` returns a fresh transport; it is called again after
    a transport failure, and the endpoints resume from the first block that
    either side has not finished.
    """
    if endpoint is None:
        sim = sim or LinkSimulator(config)
        cls = {"alice": Alice, "bob": Bob}[role]
        endpoint = cls(config, sim, keystore, psk, record_frames)
    stats = SessionStats(role, config)
    done = 0  # blocks this side has finished
    attempt = 0
    while True:
        try:
            endpoint.transport = connect(attempt)
            k = endpoint.hello(done)
            while k < config.n_blocks:
                result = endpoint.run_block(k)
                if k < len(stats.blocks):
                    stats.blocks[k] = result
                else:
                    stats.blocks.append(result)
                k += 1
                done = k
            break
        except TransportClosed as exc:
            attempt += 1
            stats.reconnects += 1
            log.warning("%s: transport lost (%s); reconnecting", role, exc)
            if endpoint.transport is not None:
                endpoint.transport.close()
            if attempt > MAX_RECONNECTS:
                raise
        except BaseException as exc:
            if endpoint.transport is not None:
                endpoint.session_abort(f"{type(exc).__name__}: {exc}")
            raise
    endpoint.transport.close()
    stats.transcript_digest = endpoint.transcript.hexdigest()
    return stats


class LoopbackHub:
    """Hands out matching loopback ends, one fresh pair per connection attempt."""

    def __init__(self, wrap: Callable[[str, int, Transport], Transport] | None = None):
        self._lock = threading.Lock()
        self._pairs: dict[int, tuple[LoopbackTransport, LoopbackTransport]] = {}
        self._wrap = wrap

    def connector(self, role: str) -> Callable[[int], Transport]:
        side = 0 if role == "alice" else 1

        def connect(attempt: int) -> Transport:
            with self._lock:
                pair = self._pairs.setdefault(attempt, LoopbackTransport.pair())
            end = pair[side]
            return self._wrap(role, attempt, end) if self._wrap else end

        return connect


@dataclass
class SimulationResult:
    alice: SessionStats
    bob: SessionStats
    alice_endpoint: Endpoint
    bob_endpoint: Endpoint


def simulate(
    config: SessionConfig,
    out_dir=None,
    wrap: Callable[[str, int, Transport], Transport] | None = None,
    record_frames: bool = False,
    psk: bytes | None = None,
) -> SimulationResult:
    """Run both endpoints in-process over a loopback link (one thread each)."""
    sim = LinkSimulator(config)
    stores = {}
    for role in ("alice", "bob"):
        path = None if out_dir is None else f"{out_dir}/{role}"
        stores[role] = KeyStore(path)
    endpoints = {
        "alice": Alice(config, sim, stores["alice"], psk, record_frames),
        "bob": Bob(config, sim, stores["bob"], psk, record_frames),
    }
    hub = LoopbackHub(wrap)
    results: dict[str, SessionStats] = {}
    errors: dict[str, BaseException] = {}

    def worker(role):
        try:
            results[role] = run_session(config, role, hub.connector(role),
                                        endpoint=endpoints[role])
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors[role] = exc

    threads = [threading.Thread(target=worker, args=(r,), name=r) for r in ("alice", "bob")]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise next(iter(errors.values()))
    return SimulationResult(results["alice"], results["bob"], endpoints["alice"], endpoints["bob"])


# throughput


def block_period(config: SessionConfig, duty: DutyModel) -> float:
    """Simulated seconds per block once the post-processing bottleneck is included."""
    return config.emission_s / duty.duty


def predicted_rate(config: SessionConfig, duty: DutyModel, beta: float | None = None) -> float:
    """Asymptotic key rate (bit/s) after duty cycle and the disclosed fraction.

    ``beta`` overrides the configured efficiency, e.g. with the value the
    reconciliation actually achieved.
    """
    link = config.link if beta is None else config.link.with_(beta=beta)
    di = holevo_bound(link).delta_i
    key_fraction = 1.0 - config.disclose_fraction
    return max(di, 0.0) * config.link.pulse_rate_hz * key_fraction * duty.duty


def _floating_mean(t: np.ndarray, y: np.ndarray, window: float) -> np.ndarray:
    out = np.empty_like(y)
    lo = 0
    for i in range(t.size):
        while t[i] - t[lo] >= window:
            lo += 1
        out[i] = y[lo:i + 1].mean()
    return out


@dataclass
class ThroughputReport:
    n_blocks: int
    n_delivered: int
    duty: float
    worker_count: int
    speedup: float
    optical_rate: float  # every pulse post-processed
    processing_rate: float  # limited by the post-processing duty
    predicted_rate: float  # bound at the measured beta
    mean_beta: float
    mean_epsilon_hat: float
    times: np.ndarray = field(repr=False)
    rates: np.ndarray = field(repr=False)
    rate_avg: np.ndarray = field(repr=False)
    eps: np.ndarray = field(repr=False)
    eps_avg: np.ndarray = field(repr=False)

    def summary(self) -> str:
        return "\n".join([
            f"blocks               {self.n_blocks} ({self.n_delivered} delivered)",
            f"workers              {self.worker_count} (speed-up {self.speedup:.2f}x)",
            f"duty factor          {self.duty:.3f}",
            f"optical-limited rate {self.optical_rate / 1e3:.2f} kbit/s",
            f"processing-limited   {self.processing_rate / 1e3:.2f} kbit/s",
            f"predicted (bound)    {self.predicted_rate / 1e3:.2f} kbit/s at beta {self.mean_beta:.3f}",
            f"mean eps_hat         {self.mean_epsilon_hat:.4f}",
        ])

    def time_series_csv(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["time_s", "rate_bits_per_s", "epsilon_hat"])
        for t, r, e in zip(self.times, self.rate_avg, self.eps_avg):
            w.writerow([f"{t:.3f}", f"{r:.3f}", f"{e:.6f}"])
        return buf.getvalue()


def throughput_report(
    stats: SessionStats,
    duty: DutyModel | None = None,
    rate_window_s: float = 3600.0,
    eps_window: int = 100,
) -> ThroughputReport:
    """Key-rate figures and floating-average time series for a finished session.

    The rate series averages over ``rate_window_s`` of simulated time; the
    excess-noise series over the last ``eps_window`` blocks that produced an
    estimate.
    """
    if not stats.blocks:
        raise ValueError("the session has no completed blocks")
    cfg = stats.config
    duty = duty or cfg.duty
    period = block_period(cfg, duty)
    keys = np.array([b.key_bits for b in stats.blocks], dtype=np.float64)
    times = period * (np.arange(len(keys)) + 1.0)
    rates = keys / period
    eps = np.array([b.epsilon_hat for b in stats.blocks])
    eps_filled = eps.copy()
    have = np.isfinite(eps)
    if have.any():
        # carry the last estimate through blocks that aborted before estimating
        idx = np.where(have, np.arange(eps.size), 0)
        np.maximum.accumulate(idx, out=idx)
        eps_filled = np.where(np.isfinite(eps[idx]), eps[idx], np.nan)
    eps_avg = np.array([
        np.nanmean(eps_filled[max(0, i - eps_window + 1): i + 1])
        if np.isfinite(eps_filled[max(0, i - eps_window + 1): i + 1]).any() else math.nan
        for i in range(eps.size)
    ])
    betas = np.array([b.beta for b in stats.blocks if np.isfinite(b.beta)])
    mean_beta = float(betas.mean()) if betas.size else cfg.link.beta
    total_time = period * len(keys)
    processing_rate = keys.sum() / total_time
    return ThroughputReport(
        n_blocks=len(keys),
        n_delivered=int((keys > 0).sum()),
        duty=duty.duty,
        worker_count=duty.worker_count,
        speedup=duty.speedup,
        optical_rate=processing_rate / duty.duty,
        processing_rate=processing_rate,
        predicted_rate=predicted_rate(cfg, duty, mean_beta),
        mean_beta=mean_beta,
        mean_epsilon_hat=float(np.nanmean(eps)) if have.any() else math.nan,
        times=times,
        rates=rates,
        rate_avg=_floating_mean(times, rates, rate_window_s),
        eps=eps,
        eps_avg=eps_avg,
    )


# persistence


def stats_to_json(stats: SessionStats) -> str:
    def clean(v):
        return None if isinstance(v, float) and not math.isfinite(v) else v

    blocks = [{k: clean(v) for k, v in dataclasses.asdict(b).items()} for b in stats.blocks]
    return json.dumps({
        "role": stats.role,
        "config": stats.config.to_dict(),
        "reconnects": stats.reconnects,
        "transcript_digest": stats.transcript_digest,
        "blocks": blocks,
    }, indent=1)


def stats_from_json(text: str) -> SessionStats:
    d = json.loads(text)
    blocks = []
    for b in d["blocks"]:
        b = {k: (math.nan if v is None else v) for k, v in b.items()}
        blocks.append(BlockResult(**b))
    return SessionStats(d["role"], SessionConfig.from_dict(d["config"]), blocks,
                        d["reconnects"], d["transcript_digest"])
