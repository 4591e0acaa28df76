"""
Discrete-event two-party channel with an adversary in full control of the link.

The secure channel is an ideal authenticated-encryption pipe: sealed payloads
travel as random ciphertext the adversary can only measure, and every ciphertext
opens exactly once, so tampering, forgery and replay are all detected by the
receiver.
"""

import base64
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Union

import numpy as np
import simpy

logger = logging.getLogger(__name__)

MAX_PAYLOAD_BYTES = 64 * 1024
TAG_BYTES = 16
KEY_SHARE_BYTES = 32
DEFAULT_LATENCY = 0.005
DEFAULT_STEP_TIMEOUT = 2.0
MAX_DRIFT = 1e-3

ADVERSARY = 'adversary'


class ChannelClosedError(RuntimeError):
    """Raised when sending on a closed channel"""


class PayloadTooLargeError(ValueError):
    """Raised for payloads above the per-message bound"""


class IntegrityError(RuntimeError):
    """Raised by a receiver whose secure envelope fails to open"""


class StepTimeout(RuntimeError):
    """Raised when no envelope arrives within the step timeout"""


class AdversaryMode(str, Enum):
    NONE = 'none'
    PASSIVE_EAVESDROP = 'eavesdrop'
    DROP = 'drop'
    MODIFY = 'modify'
    FORGE = 'forge'
    REPLAY = 'replay'


@dataclass(frozen=True)
class Envelope:
    sender: str
    receiver: str
    payload: bytes
    sent_at: float
    channel_secure: bool = False
    seq: int = 0
    sender_seq: int = 0


ForgeSource = Callable[[List[Envelope], Envelope], bytes]


@dataclass(frozen=True)
class AdversaryPolicy:
    """
    What the adversary does to the envelopes it targets.

    `target_predicate=None` targets every envelope. `forge_payload_source` receives
    everything observed so far plus the envelope being replaced. A policy with
    `colluding_authenticatee` also controls the authenticatee device itself.
    """

    mode: AdversaryMode = AdversaryMode.NONE
    target_predicate: Optional[Callable[[Envelope], bool]] = None
    forge_payload_source: Optional[ForgeSource] = None
    colluding_authenticatee: bool = False

    def targets(self, envelope: Envelope) -> bool:
        if self.mode == AdversaryMode.NONE:
            return False
        return self.target_predicate is None or bool(self.target_predicate(envelope))

    @classmethod
    def none(cls) -> 'AdversaryPolicy':
        return cls()

    @classmethod
    def echo_mitm(cls) -> 'AdversaryPolicy':
        """Eavesdrops on the link and drives a colluding authenticatee that echoes what it hears"""
        return cls(mode=AdversaryMode.PASSIVE_EAVESDROP, colluding_authenticatee=True)


def from_party(party_id: str, sender_seq: Optional[int] = None) -> Callable[[Envelope], bool]:
    """Predicate matching envelopes sent by `party_id`, optionally only its n-th (0-based)"""
    def predicate(envelope: Envelope) -> bool:
        if envelope.sender != party_id:
            return False
        return sender_seq is None or envelope.sender_seq == sender_seq
    return predicate


@dataclass
class SimClock:
    party_id: str
    offset_seconds: float = 0.0
    drift: float = 0.0

    def __post_init__(self):
        if abs(self.drift) > MAX_DRIFT:
            raise ValueError(f'clock drift {self.drift} exceeds {MAX_DRIFT}')

    def offset_at(self, true_time: float) -> float:
        return self.offset_seconds + self.drift * true_time

    def local_time(self, true_time: float) -> float:
        return true_time + self.offset_at(true_time)

    def true_time(self, local_time: float) -> float:
        return (local_time - self.offset_seconds) / (1.0 + self.drift)


def sync_to_reading(follower: SimClock, reference_reading: float, now: float,
                    residual_error_seconds: float, rng: np.random.Generator):
    """
    Set the follower's clock to a reference reading taken at true time `now`,
    leaving a residual error of exactly ±residual (seeded sign). Drift is kept.
    """
    if residual_error_seconds < 0:
        raise ValueError('residual_error_seconds must be >= 0')
    sign = 1.0 if rng.random() < 0.5 else -1.0
    target = reference_reading + sign * residual_error_seconds
    follower.offset_seconds = target - now - follower.drift * now


def sync_clocks(a: SimClock, b: SimClock, residual_error_seconds: float, rng: np.random.Generator,
                now: float = 0.0):
    """Set b's clock to a's, leaving a residual error of exactly ±residual (seeded sign)"""
    b.drift = a.drift
    sync_to_reading(b, a.local_time(now), now, residual_error_seconds, rng)


@dataclass(frozen=True)
class TranscriptEvent:
    time: float
    actor: str
    event: str
    detail: str

    def line(self) -> str:
        return f'{self.time:.6f},{self.actor},{self.event},{self.detail}'


class NetworkSimulator:
    """Owns the simpy environment, the seeded randomness and the transcript of one run"""

    def __init__(self, seed: int = 0, latency: float = DEFAULT_LATENCY,
                 step_timeout: float = DEFAULT_STEP_TIMEOUT):
        if latency < 0:
            raise ValueError('latency must be >= 0')
        if step_timeout <= 0:
            raise ValueError('step_timeout must be > 0')
        self.seed = seed
        self.latency = latency
        self.step_timeout = step_timeout
        self.env = simpy.Environment()
        self.rng = np.random.default_rng(seed)
        self.transcript: List[TranscriptEvent] = []

    @property
    def now(self) -> float:
        return float(self.env.now)

    def log(self, actor: str, event: str, detail: str = ''):
        self.transcript.append(TranscriptEvent(self.now, actor, event, detail))
        logger.debug('%.6f %s %s %s', self.now, actor, event, detail)

    def events(self, actor: Optional[str] = None, event: Optional[str] = None) -> List[TranscriptEvent]:
        return [e for e in self.transcript
                if (actor is None or e.actor == actor) and (event is None or e.event == event)]

    def transcript_lines(self) -> List[str]:
        return [e.line() for e in self.transcript]

    def write_transcript(self, path: Union[str, Path]):
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write('time,actor,event,detail\n')
            for line in self.transcript_lines():
                handle.write(line + '\n')

    def process(self, generator):
        return self.env.process(generator)

    def run(self, until=None):
        self.env.run(until=until)


class Channel:
    """
    Bidirectional link between two parties.

    Delivery takes a constant latency, so non-dropped envelopes arrive in the
    order they were sent. Each party switches to sealed traffic once it has
    completed the key exchange.
    """

    def __init__(self, sim: NetworkSimulator, party_a: str, party_b: str,
                 policy: Optional[AdversaryPolicy] = None):
        self.sim = sim
        self.env = sim.env
        self.parties = (party_a, party_b)
        self.policy = policy or AdversaryPolicy()
        self.inboxes: Dict[str, simpy.Store] = {party_a: simpy.Store(sim.env), party_b: simpy.Store(sim.env)}
        self.open = True
        self.observations: List[Envelope] = []
        self.endpoint_authenticated = True
        self._secured: Set[str] = set()
        self._altered: Set[int] = set()
        self._sealed: Dict[bytes, bytes] = {}
        self._seq = 0
        self._sender_seq = {party_a: 0, party_b: 0}

    def peer(self, party: str) -> str:
        a, b = self.parties
        if party not in self.parties:
            raise ValueError(f'{party!r} is not an endpoint of this channel')
        return b if party == a else a

    def is_secure(self, party: str) -> bool:
        return party in self._secured

    def mark_secure(self, party: str, peer_share: Optional[Envelope] = None):
        """Switch `party` to sealed traffic, keyed with the share it received"""
        self._secured.add(party)
        self.sim.log(party, 'secure', f'peer_share_seq={peer_share.seq}' if peer_share is not None else '')
        if peer_share is not None and peer_share.seq in self._altered:
            self.endpoint_authenticated = False
            self.sim.log(ADVERSARY, 'impersonate', f'{party} keyed with a substituted share')

    def close(self):
        self.open = False

    def _seal(self, payload: bytes) -> bytes:
        ciphertext = self.sim.rng.bytes(len(payload) + TAG_BYTES)
        self._sealed[ciphertext] = payload
        return ciphertext

    def _open(self, ciphertext: bytes) -> bytes:
        if ciphertext not in self._sealed:
            raise IntegrityError('secure envelope failed authentication (tampered, forged or replayed)')
        return self._sealed.pop(ciphertext)

    def send(self, sender: str, payload: bytes, label: str = '', sent_at: Optional[float] = None) -> Envelope:
        """Queue a payload for the peer; the adversary acts on it at delivery time"""
        if not self.open:
            raise ChannelClosedError('channel is closed')
        if len(payload) > MAX_PAYLOAD_BYTES:
            raise PayloadTooLargeError(f'payload of {len(payload)} bytes exceeds {MAX_PAYLOAD_BYTES}')
        receiver = self.peer(sender)
        secure = self.is_secure(sender)
        envelope = Envelope(
            sender=sender,
            receiver=receiver,
            payload=self._seal(payload) if secure else bytes(payload),
            sent_at=self.sim.now if sent_at is None else sent_at,
            channel_secure=secure,
            seq=self._seq,
            sender_seq=self._sender_seq[sender],
        )
        self._seq += 1
        self._sender_seq[sender] += 1
        detail = f'secure={secure} len={len(payload)}'
        self.sim.log(sender, 'send', f'{label} {detail}' if label else detail)
        self.env.process(self._deliver(envelope))
        return envelope

    def _observe(self, envelope: Envelope):
        self.observations.append(envelope)
        if envelope.channel_secure:
            detail = f'ciphertext len={len(envelope.payload)}'
        else:
            encoded = base64.b64encode(envelope.payload).decode('ascii')
            detail = f'plaintext len={len(envelope.payload)} payload={encoded}'
        self.sim.log(ADVERSARY, 'observe', detail)

    def _forged_payload(self, envelope: Envelope) -> bytes:
        source = self.policy.forge_payload_source
        if source is not None:
            return bytes(source(list(self.observations), envelope))
        return self.sim.rng.bytes(max(len(envelope.payload), 1))

    def _flip_byte(self, payload: bytes) -> bytes:
        if not payload:
            return b'\x00'
        altered = bytearray(payload)
        index = int(self.sim.rng.integers(len(altered)))
        altered[index] ^= 0xFF
        return bytes(altered)

    def _deliver(self, envelope: Envelope):
        yield self.env.timeout(self.sim.latency)
        inbox = self.inboxes[envelope.receiver]
        if not self.policy.targets(envelope):
            yield inbox.put(envelope)
            return

        self._observe(envelope)
        mode = self.policy.mode
        if mode == AdversaryMode.DROP:
            self.sim.log(ADVERSARY, 'drop', f'from={envelope.sender} seq={envelope.seq}')
            return
        if mode == AdversaryMode.MODIFY:
            altered = (self._forged_payload(envelope) if self.policy.forge_payload_source
                       else self._flip_byte(envelope.payload))
            envelope = replace(envelope, payload=altered)
            self._altered.add(envelope.seq)
            self.sim.log(ADVERSARY, 'modify', f'from={envelope.sender} seq={envelope.seq}')
        elif mode == AdversaryMode.FORGE:
            envelope = replace(envelope, payload=self._forged_payload(envelope))
            self._altered.add(envelope.seq)
            self.sim.log(ADVERSARY, 'forge', f'from={envelope.sender} seq={envelope.seq}')
        yield inbox.put(envelope)
        if mode == AdversaryMode.REPLAY:
            self.sim.log(ADVERSARY, 'replay', f'from={envelope.sender} seq={envelope.seq}')
            yield inbox.put(envelope)

    def receive(self, party: str, timeout: Optional[float] = None):
        """
        simpy process step: wait for the next envelope addressed to `party`.

        Returns the envelope with its payload opened. Raises StepTimeout when nothing
        arrives in time and IntegrityError for secure envelopes that do not open or
        plaintext arriving once the receiver is secured.
        """
        wait = self.sim.step_timeout if timeout is None else timeout
        get = self.inboxes[party].get()
        result = yield get | self.env.timeout(wait)
        if get not in result:
            get.cancel()
            self.sim.log(party, 'timeout', f'waited={wait:g}')
            raise StepTimeout(f'{party} received nothing within {wait:g} s')

        envelope: Envelope = result[get]
        if envelope.channel_secure:
            envelope = replace(envelope, payload=self._open(envelope.payload))
        elif self.is_secure(party):
            raise IntegrityError('plaintext envelope on a secured channel')
        self.sim.log(party, 'recv', f'from={envelope.sender} secure={envelope.channel_secure} '
                                    f'len={len(envelope.payload)}')
        return envelope


def key_exchange(channel: Channel, party: str, initiator: bool):
    """
    simpy process step: swap key shares with the peer and switch to sealed traffic.

    No certificate is checked, so a substituted share of the right size is accepted;
    the channel records the endpoint as unauthenticated.
    """
    share = channel.sim.rng.bytes(KEY_SHARE_BYTES)
    if initiator:
        channel.send(party, share, label='type=KEY_SHARE')
        envelope = yield from channel.receive(party)
    else:
        envelope = yield from channel.receive(party)
        channel.send(party, share, label='type=KEY_SHARE')
    if len(envelope.payload) != KEY_SHARE_BYTES:
        raise IntegrityError(f'key share of {len(envelope.payload)} bytes')
    channel.mark_secure(party, peer_share=envelope)
    return True


def _guarded(channel: Channel, party: str, step):
    try:
        return (yield from step)
    except (StepTimeout, IntegrityError) as e:
        channel.sim.log(party, 'abort', type(e).__name__)
        return False


def establish_secure_channel(sim: NetworkSimulator, channel: Channel, initiator: str, responder: str):
    """
    simpy process: both endpoints run the key exchange.

    Returns True once both are secured, False when either side times out or
    rejects its peer's share.
    """
    first = sim.process(_guarded(channel, initiator, key_exchange(channel, initiator, True)))
    second = sim.process(_guarded(channel, responder, key_exchange(channel, responder, False)))
    yield first & second
    established = bool(first.value) and bool(second.value)
    sim.log('channel', 'established' if established else 'failed', f'endpoint_authenticated={channel.endpoint_authenticated}')
    return established
