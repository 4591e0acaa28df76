"""
Touch-triggered authentication session.

The authenticatee starts a session once its sensor sees a touch. Both parties then
handshake, optionally secure the channel, synchronize clocks, sample the same
window on their own clocks and exchange what they sensed. In full mode the
authenticatee commits to its trace before the authenticator discloses its own,
so nobody can answer with a copy of the authenticator's signal.
"""

import base64
import hashlib
import hmac
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from detector import Decision, DetectorConfig, Outcome, SignalTooShortError, TraceMismatchError, detect, gate
from netsim import (
    MAX_PAYLOAD_BYTES,
    AdversaryPolicy,
    Channel,
    IntegrityError,
    NetworkSimulator,
    PayloadTooLargeError,
    SimClock,
    StepTimeout,
    key_exchange,
    sync_to_reading,
)
from signal_model import (
    ROLE_AUTHENTICATOR,
    ROLE_INVALID,
    ROLE_VALID,
    ClockOffsetError,
    ScenarioError,
    ScenarioSpec,
    Trace,
    capture_window,
    synthesize_scenario,
)

logger = logging.getLogger(__name__)

AUTHENTICATOR = 'authenticator'
AUTHENTICATEE = 'authenticatee'

DEFAULT_NONCE_BITS = 256
DEFAULT_SYNC_RESIDUAL = 0.001
DEFAULT_INITIAL_CLOCK_ERROR = 0.05
DEFAULT_TOUCH_HEAD = 0.2
DEFAULT_WINDOW_LEAD = 0.25
DEFAULT_WINDOW_START = 1.0
# Scenario time kept after the sampling window ends.
TRAILING_MARGIN = 1.0
# JSON keys, timing fields and the base64 nonce around an encoded trace.
MESSAGE_OVERHEAD_BYTES = 512


class CommitmentError(ValueError):
    """Raised when a commitment nonce has the wrong length"""


class CommitmentMismatchError(CommitmentError):
    """Raised when a revealed trace does not open the held commitment"""


class MalformedMessageError(ValueError):
    """Raised for protocol messages that do not decode to the expected type"""


class SecurityMode(str, Enum):
    FULL_H2H = 'full'
    LIGHTWEIGHT = 'lightweight'


class SessionOutcome(str, Enum):
    ACCEPTED = 'ACCEPTED'
    REJECTED = 'REJECTED'
    ABORTED_SECURITY = 'ABORTED_SECURITY'
    ABORTED_TIMEOUT = 'ABORTED_TIMEOUT'


class Phase(IntEnum):
    IDLE = 0
    HANDSHAKE = 1
    SECURED = 2
    SYNCED = 3
    SAMPLING = 4
    COMMITTED = 5
    REVEALED = 6
    DECIDED = 7


class MessageType(str, Enum):
    HELLO = 'HELLO'
    HELLO_ACK = 'HELLO_ACK'
    KEY_SHARE = 'KEY_SHARE'
    SYNC = 'SYNC'
    SYNC_ACK = 'SYNC_ACK'
    WINDOW = 'WINDOW'
    COMMIT = 'COMMIT'
    SIGNAL = 'SIGNAL'
    REVEAL = 'REVEAL'
    TRACE = 'TRACE'
    RESULT = 'RESULT'


class Strategy(str, Enum):
    HONEST = 'honest'
    # Impostor device that answers with whatever authenticator signal it has seen.
    ECHO = 'echo'


@dataclass(frozen=True)
class Commitment:
    digest: bytes
    nonce: bytes = b''


def _digest(payload: bytes, nonce: bytes) -> bytes:
    return hashlib.sha256(payload + nonce).digest()


def commit(payload: bytes, nonce: bytes, nonce_bits: int = DEFAULT_NONCE_BITS) -> Commitment:
    if len(nonce) * 8 != nonce_bits:
        raise CommitmentError(f'nonce has {len(nonce) * 8} bits, expected {nonce_bits}')
    return Commitment(_digest(payload, nonce), nonce)


def verify_commit(c: Union[Commitment, bytes], payload: bytes, nonce: bytes) -> bool:
    digest = c.digest if isinstance(c, Commitment) else c
    return hmac.compare_digest(digest, _digest(payload, nonce))


def new_nonce(rng: np.random.Generator, nonce_bits: int = DEFAULT_NONCE_BITS) -> bytes:
    return rng.bytes(nonce_bits // 8)


def encode_trace(trace: Trace) -> Dict[str, Any]:
    samples = np.asarray(trace.samples, dtype='<f8').tobytes()
    return {
        'start_time': float(trace.start_time),
        'sample_rate': float(trace.sample_rate),
        'samples': base64.b64encode(samples).decode('ascii'),
    }


def decode_trace(data: Any) -> Trace:
    try:
        samples = np.frombuffer(base64.b64decode(data['samples'], validate=True), dtype='<f8')
        return Trace(float(data['start_time']), float(data['sample_rate']), samples.copy())
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedMessageError(f'bad trace: {e}') from e


def encode_message(kind: MessageType, **fields: Any) -> bytes:
    body = dict(fields, type=kind.value)
    return json.dumps(body, sort_keys=True, separators=(',', ':')).encode('utf-8')


def decode_message(payload: bytes, expected: MessageType) -> Dict[str, Any]:
    try:
        message = json.loads(payload.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedMessageError(f'undecodable {expected.value} message') from e
    if not isinstance(message, dict) or message.get('type') != expected.value:
        got = message.get('type') if isinstance(message, dict) else type(message).__name__
        raise MalformedMessageError(f'expected {expected.value}, got {got}')
    return message


def _field(message: Dict[str, Any], name: str) -> Any:
    if name not in message:
        raise MalformedMessageError(f'{message.get("type")} lacks {name!r}')
    return message[name]


def _number_field(message: Dict[str, Any], name: str) -> float:
    value = _field(message, name)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise MalformedMessageError(f'{message.get("type")} field {name!r} is not a finite number: {value!r}')
    return float(value)


def _bytes_field(message: Dict[str, Any], name: str) -> bytes:
    try:
        return base64.b64decode(_field(message, name), validate=True)
    except (TypeError, ValueError) as e:
        raise MalformedMessageError(f'{name!r} is not base64') from e


@dataclass(frozen=True)
class SessionConfig:
    """
    `sampling_window=None` samples [1.0, 1.0 + signal length) unless the handshake
    runs late, in which case the window starts `window_lead_seconds` after the
    authenticator announces it.
    """

    detector_cfg: DetectorConfig
    sampling_window: Optional[Tuple[float, float]] = None
    security_mode: SecurityMode = SecurityMode.FULL_H2H
    commitment_nonce_bits: int = DEFAULT_NONCE_BITS
    sync_residual_seconds: float = DEFAULT_SYNC_RESIDUAL
    initial_clock_error_seconds: float = DEFAULT_INITIAL_CLOCK_ERROR
    touch_head_seconds: float = DEFAULT_TOUCH_HEAD
    window_lead_seconds: float = DEFAULT_WINDOW_LEAD

    def __post_init__(self):
        object.__setattr__(self, 'security_mode', SecurityMode(self.security_mode))
        t1, t2 = self.window
        if t2 <= t1:
            raise ValueError('sampling window must satisfy t2 > t1')
        if abs((t2 - t1) - self.detector_cfg.signal_length_seconds) > 1e-9:
            raise ValueError('sampling window length must equal the detector signal length')
        if self.commitment_nonce_bits <= 0 or self.commitment_nonce_bits % 8:
            raise ValueError('commitment_nonce_bits must be a positive multiple of 8')
        if self.sync_residual_seconds < 0 or self.initial_clock_error_seconds < 0:
            raise ValueError('clock errors must be >= 0')
        if self.touch_head_seconds <= 0:
            raise ValueError('touch_head_seconds must be > 0')
        if self.trace_message_bytes > MAX_PAYLOAD_BYTES:
            raise ValueError(
                f'a {self.detector_cfg.signal_length_seconds:g} s trace needs {self.trace_message_bytes} bytes, '
                f'above the {MAX_PAYLOAD_BYTES}-byte message bound'
            )

    @property
    def trace_message_bytes(self) -> int:
        """Upper bound on the size of a message carrying one captured trace"""
        samples = self.detector_cfg.window_samples + 1
        return 4 * math.ceil(8 * samples / 3) + MESSAGE_OVERHEAD_BYTES

    @property
    def window(self) -> Tuple[float, float]:
        if self.sampling_window is not None:
            return float(self.sampling_window[0]), float(self.sampling_window[1])
        length = self.detector_cfg.signal_length_seconds
        return DEFAULT_WINDOW_START, DEFAULT_WINDOW_START + length

    def with_detector(self, detector_cfg: DetectorConfig) -> 'SessionConfig':
        window = self.sampling_window
        if window is not None and abs((window[1] - window[0]) - detector_cfg.signal_length_seconds) > 1e-9:
            window = (window[0], window[0] + detector_cfg.signal_length_seconds)
        return replace(self, detector_cfg=detector_cfg, sampling_window=window)


@dataclass
class PartyState:
    """Protocol progress of one party; phases only move forward"""

    party_id: str
    phase: Phase = Phase.IDLE
    trace: Optional[Trace] = None
    peer_digest: Optional[bytes] = None
    decision: Optional[Decision] = None

    def advance(self, phase: Phase):
        if self.phase == Phase.DECIDED:
            raise ValueError(f'{self.party_id} already decided')
        if phase < self.phase:
            raise ValueError(f'{self.party_id} cannot go back from {self.phase.name} to {phase.name}')
        self.phase = phase


AuthenticatorState = PartyState
AuthenticateeState = PartyState


@dataclass
class SessionResult:
    outcome: SessionOutcome
    score: Optional[float] = None
    decision: Optional[Decision] = None
    clock_offsets: Dict[str, float] = field(default_factory=dict)
    window: Optional[Tuple[float, float]] = None
    phases: Dict[str, Phase] = field(default_factory=dict)
    reason: str = ''


def touch_trigger(trace_head: Trace, gate_std_volts: float, head_seconds: float = DEFAULT_TOUCH_HEAD) -> bool:
    """A touch shows up as the sensed potential rising above the gate"""
    if trace_head.duration + 1e-12 < head_seconds:
        raise ValueError(f'touch detection needs {head_seconds} s of samples, got {trace_head.duration:g} s')
    return gate(trace_head.head(head_seconds), gate_std_volts)


def session_scenario(scenario: ScenarioSpec, cfg: SessionConfig) -> ScenarioSpec:
    """The scenario stretched to cover the sampling window plus a trailing margin"""
    _, t2 = cfg.window
    return scenario.with_length(t2 + TRAILING_MARGIN - scenario.start_time)


def _default_placement(scenario: ScenarioSpec, strategy: Strategy) -> str:
    role = ROLE_INVALID if strategy == Strategy.ECHO else ROLE_VALID
    placements = scenario.placements_with_role(role)
    if not placements:
        raise ValueError(f'scenario has no {role} placement for the authenticatee')
    return placements[0].placement_id


class _Session:
    def __init__(self, sim: NetworkSimulator, cfg: SessionConfig, scenario: ScenarioSpec,
                 adversary: AdversaryPolicy, authenticatee_placement: Optional[str],
                 strategy: Optional[Strategy], naive: bool):
        self.sim = sim
        self.cfg = cfg
        self.full = cfg.security_mode == SecurityMode.FULL_H2H
        self.naive = naive
        self.adversary = adversary
        if strategy is None:
            strategy = Strategy.ECHO if adversary.colluding_authenticatee else Strategy.HONEST
        self.strategy = Strategy(strategy)

        authenticators = scenario.placements_with_role(ROLE_AUTHENTICATOR)
        if not authenticators:
            raise ValueError('scenario has no authenticator placement')
        self.authenticator_placement = authenticators[0].placement_id
        self.authenticatee_placement = authenticatee_placement or _default_placement(scenario, self.strategy)

        traces = synthesize_scenario(session_scenario(scenario, cfg))
        self.raw = {
            AUTHENTICATOR: traces[self.authenticator_placement],
            AUTHENTICATEE: traces[self.authenticatee_placement],
        }
        self.channel = Channel(sim, AUTHENTICATEE, AUTHENTICATOR, adversary)
        error = cfg.initial_clock_error_seconds
        self.clocks = {
            AUTHENTICATOR: SimClock(AUTHENTICATOR),
            AUTHENTICATEE: SimClock(AUTHENTICATEE, float(sim.rng.uniform(-error, error)) if error else 0.0),
        }
        self.states = {AUTHENTICATOR: PartyState(AUTHENTICATOR), AUTHENTICATEE: PartyState(AUTHENTICATEE)}
        # Each party samples the window it chose or was told; nothing else is shared.
        self.windows: Dict[str, Optional[Tuple[float, float]]] = {AUTHENTICATOR: None, AUTHENTICATEE: None}
        self.touched: Optional[bool] = None
        self.security_failure: Optional[str] = None
        self.timed_out: Optional[str] = None

    def _advance(self, party: str, phase: Phase):
        self.states[party].advance(phase)
        self.sim.log(party, 'phase', phase.name)

    def _send(self, party: str, kind: MessageType, **fields: Any):
        clock = self.clocks[party]
        self.channel.send(party, encode_message(kind, **fields), label=f'type={kind.value}',
                          sent_at=clock.local_time(self.sim.now))

    def _receive(self, party: str, kind: MessageType):
        envelope = yield from self.channel.receive(party)
        return decode_message(envelope.payload, kind)

    def _capture(self, party: str) -> Trace:
        t1, t2 = self.windows[party]
        try:
            return capture_window(self.raw[party], self.clocks[party].offset_seconds, t1, t2)
        except (ScenarioError, ClockOffsetError) as e:
            raise MalformedMessageError(f'window [{t1:g}, {t2:g}) was not recorded: {e}') from e

    def _wait_until_local(self, party: str, local_time: float):
        wake = self.clocks[party].true_time(local_time)
        yield self.sim.env.timeout(max(0.0, wake - self.sim.now))

    def _guard(self, party: str, body):
        try:
            yield from body
        except StepTimeout as e:
            self.timed_out = self.timed_out or f'{party}: {e}'
        except (IntegrityError, MalformedMessageError, CommitmentError, PayloadTooLargeError) as e:
            self.security_failure = self.security_failure or f'{party}: {e}'
            self.sim.log(party, 'abort', type(e).__name__)

    def authenticator(self):
        me = AUTHENTICATOR
        self._advance(me, Phase.HANDSHAKE)
        yield from self._receive(me, MessageType.HELLO)
        self._send(me, MessageType.HELLO_ACK)
        if self.full:
            yield from key_exchange(self.channel, me, initiator=False)
            self._advance(me, Phase.SECURED)

        self._send(me, MessageType.SYNC, local_time=self.clocks[me].local_time(self.sim.now))
        yield from self._receive(me, MessageType.SYNC_ACK)
        self._advance(me, Phase.SYNCED)

        cfg_t1, cfg_t2 = self.cfg.window
        t1 = max(cfg_t1, self.clocks[me].local_time(self.sim.now) + self.cfg.window_lead_seconds)
        t2 = t1 + (cfg_t2 - cfg_t1)
        self.windows[me] = (t1, t2)
        self._send(me, MessageType.WINDOW, t1=t1, t2=t2)

        self._advance(me, Phase.SAMPLING)
        yield from self._wait_until_local(me, t2)
        s = self._capture(me)
        self.states[me].trace = s

        if self.naive:
            self._send(me, MessageType.SIGNAL, trace=encode_trace(s))
            message = yield from self._receive(me, MessageType.TRACE)
            s_prime = decode_trace(_field(message, 'trace'))
        elif self.full:
            message = yield from self._receive(me, MessageType.COMMIT)
            self.states[me].peer_digest = _bytes_field(message, 'digest')
            self._advance(me, Phase.COMMITTED)
            self._send(me, MessageType.SIGNAL, trace=encode_trace(s))
            message = yield from self._receive(me, MessageType.REVEAL)
            reveal = _field(message, 'trace')
            nonce = _bytes_field(message, 'nonce')
            payload = json.dumps(reveal, sort_keys=True, separators=(',', ':')).encode('utf-8')
            if not verify_commit(self.states[me].peer_digest, payload, nonce):
                raise CommitmentMismatchError('revealed trace does not match the commitment')
            s_prime = decode_trace(reveal)
            self._advance(me, Phase.REVEALED)
        else:
            message = yield from self._receive(me, MessageType.TRACE)
            s_prime = decode_trace(_field(message, 'trace'))

        decision = self._detect(s, s_prime)
        self.states[me].decision = decision
        self._advance(me, Phase.DECIDED)
        self._send(me, MessageType.RESULT, accepted=decision.accepted)

    def _detect(self, s: Trace, s_prime: Trace) -> Decision:
        try:
            return detect(self.cfg.detector_cfg, s, s_prime)
        except (TraceMismatchError, SignalTooShortError) as e:
            raise MalformedMessageError(f'unusable trace: {e}') from e

    def authenticatee(self):
        me = AUTHENTICATEE
        head = self.cfg.touch_head_seconds
        if self.strategy == Strategy.HONEST:
            self.touched = touch_trigger(self.raw[me], self.cfg.detector_cfg.gate_std_volts, head)
        else:
            self.touched = True
        yield self.sim.env.timeout(head)
        if not self.touched:
            self.sim.log(me, 'idle', 'no touch detected')
            return

        self._advance(me, Phase.HANDSHAKE)
        self._send(me, MessageType.HELLO)
        yield from self._receive(me, MessageType.HELLO_ACK)
        if self.full:
            yield from key_exchange(self.channel, me, initiator=True)
            self._advance(me, Phase.SECURED)

        message = yield from self._receive(me, MessageType.SYNC)
        # The reading left the authenticator one link latency ago.
        reading = _number_field(message, 'local_time') + self.sim.latency
        sync_to_reading(self.clocks[me], reading, self.sim.now, self.cfg.sync_residual_seconds, self.sim.rng)
        self._send(me, MessageType.SYNC_ACK, local_time=self.clocks[me].local_time(self.sim.now))
        self._advance(me, Phase.SYNCED)

        message = yield from self._receive(me, MessageType.WINDOW)
        t1, t2 = _number_field(message, 't1'), _number_field(message, 't2')
        if abs((t2 - t1) - self.cfg.detector_cfg.signal_length_seconds) > 1e-9:
            raise MalformedMessageError(f'window [{t1:g}, {t2:g}) does not span the agreed signal length')
        self.windows[me] = (t1, t2)
        self._advance(me, Phase.SAMPLING)
        yield from self._wait_until_local(me, t2)
        own = self._capture(me)
        self.states[me].trace = own

        if self.naive:
            message = yield from self._receive(me, MessageType.SIGNAL)
            s = decode_trace(_field(message, 'trace'))
            answer = s if self.strategy == Strategy.ECHO else own
            self._send(me, MessageType.TRACE, trace=encode_trace(answer))
        elif self.full:
            encoded = encode_trace(own)
            payload = json.dumps(encoded, sort_keys=True, separators=(',', ':')).encode('utf-8')
            nonce = new_nonce(self.sim.rng, self.cfg.commitment_nonce_bits)
            commitment = commit(payload, nonce, self.cfg.commitment_nonce_bits)
            self._send(me, MessageType.COMMIT, digest=base64.b64encode(commitment.digest).decode('ascii'))
            self._advance(me, Phase.COMMITTED)
            message = yield from self._receive(me, MessageType.SIGNAL)
            if self.strategy == Strategy.ECHO:
                # Already bound to `own`; echoing the signal cannot open the commitment.
                encoded = _field(message, 'trace')
            self._send(me, MessageType.REVEAL, trace=encoded,
                       nonce=base64.b64encode(nonce).decode('ascii'))
            self._advance(me, Phase.REVEALED)
        else:
            self._send(me, MessageType.TRACE, trace=encode_trace(own))

        message = yield from self._receive(me, MessageType.RESULT)
        self._advance(me, Phase.DECIDED)
        self.sim.log(me, 'result', f'accepted={bool(_field(message, "accepted"))}')

    def run(self) -> SessionResult:
        self.sim.process(self._guard(AUTHENTICATOR, self.authenticator()))
        self.sim.process(self._guard(AUTHENTICATEE, self.authenticatee()))
        self.sim.run()
        return self._result()

    def _result(self) -> SessionResult:
        decision = self.states[AUTHENTICATOR].decision
        if not self.touched:
            outcome, reason, decision = SessionOutcome.REJECTED, 'no touch detected', None
        elif self.security_failure:
            outcome, reason, decision = SessionOutcome.ABORTED_SECURITY, self.security_failure, None
        elif decision is not None:
            outcome = SessionOutcome.ACCEPTED if decision.outcome == Outcome.ACCEPT else SessionOutcome.REJECTED
            reason = decision.outcome.value
        else:
            outcome, reason = SessionOutcome.ABORTED_TIMEOUT, self.timed_out or 'session did not finish'

        self.sim.log('session', 'outcome', f'{outcome.value} reason={reason}')
        return SessionResult(
            outcome=outcome,
            score=decision.score if decision is not None else None,
            decision=decision,
            clock_offsets={party: clock.offset_seconds for party, clock in self.clocks.items()},
            window=self.windows[AUTHENTICATOR],
            phases={party: state.phase for party, state in self.states.items()},
            reason=reason,
        )


def run_session(sim: NetworkSimulator, cfg: SessionConfig, scenario: ScenarioSpec,
                adversary: Optional[AdversaryPolicy] = None, authenticatee_placement: Optional[str] = None,
                strategy: Optional[Strategy] = None) -> SessionResult:
    """
    Run one authentication session to completion on `sim`.

    Traces come from `scenario` (its own seed); protocol randomness and the
    transcript belong to `sim`. A colluding adversary swaps in the echo impostor
    on the first invalid placement unless a placement or strategy is given.
    """
    session = _Session(sim, cfg, scenario, adversary or AdversaryPolicy(),
                       authenticatee_placement, strategy, naive=False)
    return session.run()


def naive_session(sim: NetworkSimulator, cfg: SessionConfig, scenario: ScenarioSpec,
                  adversary: Optional[AdversaryPolicy] = None, authenticatee_placement: Optional[str] = None,
                  strategy: Optional[Strategy] = None) -> SessionResult:
    """Session in which the authenticatee answers the disclosed signal with its trace, no commitment"""
    session = _Session(sim, cfg, scenario, adversary or AdversaryPolicy(),
                       authenticatee_placement, strategy, naive=True)
    return session.run()


class RejectionGuard:
    """
    Throttles authenticatees that keep getting rejected: every rejection freezes
    further attempts for `freeze_seconds`, and `ban_after` consecutive rejections
    ban the device. An acceptance clears the count.
    """

    def __init__(self, freeze_seconds: float = 5.0, ban_after: int = 10):
        if freeze_seconds < 0 or ban_after < 1:
            raise ValueError('freeze_seconds must be >= 0 and ban_after >= 1')
        self.freeze_seconds = freeze_seconds
        self.ban_after = ban_after
        self._rejections: Dict[str, int] = {}
        self._frozen_until: Dict[str, float] = {}
        self.banned = set()

    def allow(self, device_id: str, now: float) -> bool:
        if device_id in self.banned:
            return False
        return now >= self._frozen_until.get(device_id, float('-inf'))

    def record(self, device_id: str, outcome: SessionOutcome, now: float):
        if outcome == SessionOutcome.ACCEPTED:
            self._rejections.pop(device_id, None)
            self._frozen_until.pop(device_id, None)
            return
        if outcome != SessionOutcome.REJECTED:
            return
        count = self._rejections.get(device_id, 0) + 1
        self._rejections[device_id] = count
        self._frozen_until[device_id] = now + self.freeze_seconds
        if count >= self.ban_after:
            self.banned.add(device_id)
            logger.info('banned %s after %d consecutive rejections', device_id, count)
