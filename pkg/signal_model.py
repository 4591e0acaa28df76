"""
iBEP signal synthesis.

Seeded generation of induced body electric potential traces for the
authenticator and the authenticatee sensors of a scenario. Every body carries a
mains-frequency carrier (fundamental plus harmonics) whose phase performs a slow
random walk; sensors on the same body share that carrier in proportion to their
coupling, sensors on different bodies do not.
"""

import logging
import math
from dataclasses import dataclass, field as dataclass_field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

try:
    from scipy import signal as sp_signal
    SCIPY_AVAILABLE = True
except ImportError:
    SCIPY_AVAILABLE = False
    sp_signal = None

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 500.0
DEFAULT_GRID_FREQUENCY = 50.0
DEFAULT_HARMONICS: Tuple[Tuple[int, float], ...] = ((1, 1.0), (2, 0.15), (3, 0.08))
DEFAULT_BASE_AMPLITUDE = 0.3
DEFAULT_NOISE_STD = 0.02
DEFAULT_PHASE_DIFFUSION = 20.0

# Random processes are generated on a grid padded by this much on both sides so
# that clock offsets and mimicry delays never read outside the generated span.
PAD_SECONDS = 1.0

ROLE_AUTHENTICATOR = "authenticator"
ROLE_VALID = "valid"
ROLE_INVALID = "invalid"
ROLES = (ROLE_AUTHENTICATOR, ROLE_VALID, ROLE_INVALID)

INTERFERER_TONE = "additive_tone"
INTERFERER_BURST = "broadband_burst"
INTERFERER_KINDS = (INTERFERER_TONE, INTERFERER_BURST)

_STREAM_BODY = 1
_STREAM_PLACEMENT = 2
_STREAM_INTERFERER = 3
_STREAM_MIMIC = 4


class ScenarioError(ValueError):
    """Raised when a scenario violates its type invariants"""


class ClockOffsetError(ValueError):
    """Raised when a clock offset cannot be applied to a trace"""


@dataclass(frozen=True, eq=False)
class Trace:
    """Uniformly sampled voltage time series"""

    start_time: float
    sample_rate: float
    samples: np.ndarray

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ScenarioError(f"sample_rate must be > 0, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration

    def times(self) -> np.ndarray:
        return self.start_time + np.arange(len(self.samples), dtype=np.float64) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "Trace":
        return Trace(self.start_time, self.sample_rate, samples)

    def head(self, seconds: float) -> "Trace":
        """First `seconds` of the trace"""
        n = int(round(seconds * self.sample_rate))
        return Trace(self.start_time, self.sample_rate, self.samples[:n])

    def tail(self, seconds: float) -> "Trace":
        """Trailing `seconds` of the trace"""
        n = int(round(seconds * self.sample_rate))
        skipped = max(len(self.samples) - n, 0)
        return Trace(self.start_time + skipped / self.sample_rate, self.sample_rate, self.samples[skipped:])

    def window(self, t1: float, t2: float) -> "Trace":
        """Samples whose timestamps fall in [t1, t2)"""
        n = int(round((t2 - t1) * self.sample_rate))
        first = int(math.ceil(round((t1 - self.start_time) * self.sample_rate, 6)))
        if first < 0 or first + n > len(self.samples):
            raise ScenarioError(
                f"window [{t1:.4f}, {t2:.4f}) is not covered by trace "
                f"[{self.start_time:.4f}, {self.end_time:.4f})"
            )
        return Trace(self.start_time + first / self.sample_rate, self.sample_rate, self.samples[first:first + n])


@dataclass(frozen=True)
class FieldSpec:
    """Ambient mains electric field seen by every body in the scenario"""

    grid_frequency: float = DEFAULT_GRID_FREQUENCY
    harmonic_amplitudes: Tuple[Tuple[int, float], ...] = DEFAULT_HARMONICS
    base_amplitude_volts: float = DEFAULT_BASE_AMPLITUDE
    phase_diffusion: float = DEFAULT_PHASE_DIFFUSION

    def validate(self, sample_rate: float):
        if self.grid_frequency <= 0:
            raise ScenarioError("grid_frequency must be > 0")
        orders = [int(k) for k, _ in self.harmonic_amplitudes]
        if 1 not in orders:
            raise ScenarioError("harmonic index 1 must be present")
        for k, amplitude in self.harmonic_amplitudes:
            if int(k) < 1:
                raise ScenarioError(f"harmonic index must be >= 1, got {k}")
            if amplitude < 0:
                raise ScenarioError(f"harmonic {k} has negative relative amplitude")
            if k * self.grid_frequency >= sample_rate / 2:
                raise ScenarioError(
                    f"harmonic {k} ({k * self.grid_frequency:g} Hz) is at or above Nyquist for {sample_rate:g} sps"
                )
        if self.base_amplitude_volts < 0:
            raise ScenarioError("base_amplitude_volts must be >= 0")
        if self.phase_diffusion < 0:
            raise ScenarioError("phase_diffusion must be >= 0")


@dataclass(frozen=True)
class MimicSpec:
    """Movement copied from another body, seen with a delay"""

    body_id: str
    delay_seconds: float = 0.2
    envelope_noise_std: float = 0.1


@dataclass(frozen=True)
class MovementSpec:
    envelope_band: Tuple[float, float] = (0.5, 2.0)
    envelope_depth: float = 0.3
    mimic_of: Optional[MimicSpec] = None

    def validate(self):
        low, high = self.envelope_band
        if not 0 <= self.envelope_depth <= 1:
            raise ScenarioError("envelope_depth must be in [0, 1]")
        if not 0 <= low < high:
            raise ScenarioError(f"envelope_band must satisfy 0 <= low < high, got {self.envelope_band}")
        if self.mimic_of is not None:
            if self.mimic_of.delay_seconds < 0:
                raise ScenarioError("mimic delay_seconds must be >= 0")
            if self.mimic_of.envelope_noise_std < 0:
                raise ScenarioError("mimic envelope_noise_std must be >= 0")


@dataclass(frozen=True)
class BodySpec:
    """
    One human body in the field.

    `amplitude_volts=None` takes the field's base amplitude; `carrier_phase=None`
    draws the phase uniformly per seed. `amplitude_jitter` is the sigma of a
    per-seed lognormal factor on the amplitude.
    """

    body_id: str
    amplitude_volts: Optional[float] = None
    carrier_phase: Optional[float] = None
    movement_envelope: Optional[MovementSpec] = None
    amplitude_jitter: float = 0.0

    def validate(self):
        if self.amplitude_volts is not None and self.amplitude_volts < 0:
            raise ScenarioError(f"body {self.body_id}: amplitude_volts must be >= 0")
        if self.amplitude_jitter < 0:
            raise ScenarioError(f"body {self.body_id}: amplitude_jitter must be >= 0")
        if self.movement_envelope is not None:
            self.movement_envelope.validate()


@dataclass(frozen=True)
class PlacementSpec:
    """A sensor touching a body"""

    placement_id: str
    body_id: str
    role: str = ROLE_VALID
    location_gain: float = 1.0
    phase_offset: float = 0.0
    phase_flip: bool = False
    noise_std: float = DEFAULT_NOISE_STD
    coupling: float = 0.99
    dc_offset_volts: float = 0.0

    def validate(self):
        if self.role not in ROLES:
            raise ScenarioError(f"placement {self.placement_id}: unknown role {self.role!r}")
        if not 0 <= self.coupling <= 1:
            raise ScenarioError(f"placement {self.placement_id}: coupling must be in [0, 1]")
        if self.location_gain <= 0:
            raise ScenarioError(f"placement {self.placement_id}: location_gain must be > 0")
        if self.noise_std < 0:
            raise ScenarioError(f"placement {self.placement_id}: noise_std must be >= 0")


@dataclass(frozen=True)
class InterfererSpec:
    """
    Additive interference.

    Tones sit at `frequency`; bursts are Gaussian noise low-passed at `frequency`.
    Both are switched on for `duty_cycle` of every `period_seconds`. An empty
    `targets` applies the same waveform to every placement (common mode).
    """

    kind: str = INTERFERER_TONE
    frequency: float = 85.0
    amplitude_volts: float = 0.0
    duty_cycle: float = 1.0
    period_seconds: float = 1.0
    targets: Tuple[str, ...] = ()

    def validate(self):
        if self.kind not in INTERFERER_KINDS:
            raise ScenarioError(f"unknown interferer kind {self.kind!r}")
        if self.amplitude_volts < 0:
            raise ScenarioError("interferer amplitude_volts must be >= 0")
        if not 0 < self.duty_cycle <= 1:
            raise ScenarioError("interferer duty_cycle must be in (0, 1]")
        if self.period_seconds <= 0:
            raise ScenarioError("interferer period_seconds must be > 0")
        if self.frequency < 0:
            raise ScenarioError("interferer frequency must be >= 0")


@dataclass(frozen=True)
class ScenarioSpec:
    field: FieldSpec = dataclass_field(default_factory=FieldSpec)
    bodies: Tuple[BodySpec, ...] = ()
    placements: Tuple[PlacementSpec, ...] = ()
    clock_offset_seconds: Dict[str, float] = dataclass_field(default_factory=dict)
    interferers: Tuple[InterfererSpec, ...] = ()
    seed: int = 0
    length_seconds: float = 1.0
    sample_rate: float = DEFAULT_SAMPLE_RATE
    start_time: float = 0.0

    def body(self, body_id: str) -> BodySpec:
        for body in self.bodies:
            if body.body_id == body_id:
                return body
        raise ScenarioError(f"unknown body {body_id!r}")

    def placement(self, placement_id: str) -> PlacementSpec:
        for placement in self.placements:
            if placement.placement_id == placement_id:
                return placement
        raise ScenarioError(f"unknown placement {placement_id!r}")

    def placements_with_role(self, role: str) -> List[PlacementSpec]:
        return [p for p in self.placements if p.role == role]

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return replace(self, seed=int(seed))

    def with_length(self, length_seconds: float) -> "ScenarioSpec":
        return replace(self, length_seconds=float(length_seconds))

    def validate(self):
        """Check every type invariant, raising ScenarioError on the first violation"""
        if self.length_seconds <= 0:
            raise ScenarioError(f"length_seconds must be > 0, got {self.length_seconds}")
        if self.sample_rate <= 0:
            raise ScenarioError("sample_rate must be > 0")
        if self.seed < 0:
            raise ScenarioError("seed must be a non-negative integer")
        if int(round(self.length_seconds * self.sample_rate)) < 1:
            raise ScenarioError("length_seconds is shorter than one sample period")
        self.field.validate(self.sample_rate)

        body_ids = [b.body_id for b in self.bodies]
        if len(set(body_ids)) != len(body_ids):
            raise ScenarioError("body ids must be unique")
        for body in self.bodies:
            body.validate()
            mimic = body.movement_envelope.mimic_of if body.movement_envelope else None
            if mimic is not None:
                victim = self.body(mimic.body_id)
                if victim.movement_envelope is None:
                    raise ScenarioError(f"body {body.body_id} mimics {victim.body_id}, which does not move")
                if victim.movement_envelope.mimic_of is not None:
                    raise ScenarioError("a mimic cannot copy another mimic")

        placement_ids = [p.placement_id for p in self.placements]
        if len(set(placement_ids)) != len(placement_ids):
            raise ScenarioError("placement ids must be unique")
        for placement in self.placements:
            placement.validate()
            if placement.body_id not in body_ids:
                raise ScenarioError(
                    f"placement {placement.placement_id} references unknown body {placement.body_id!r}"
                )

        max_delay = max(
            (b.movement_envelope.mimic_of.delay_seconds
             for b in self.bodies
             if b.movement_envelope and b.movement_envelope.mimic_of),
            default=0.0,
        )
        for placement_id, offset in self.clock_offset_seconds.items():
            if placement_id not in placement_ids:
                raise ScenarioError(f"clock offset for unknown placement {placement_id!r}")
            if abs(offset) + max_delay > PAD_SECONDS:
                raise ScenarioError(f"clock offset {offset} plus mimic delay exceeds {PAD_SECONDS} s")
        if max_delay > PAD_SECONDS:
            raise ScenarioError(f"mimic delay exceeds {PAD_SECONDS} s")

        for interferer in self.interferers:
            interferer.validate()
            for target in interferer.targets:
                if target not in placement_ids:
                    raise ScenarioError(f"interferer targets unknown placement {target!r}")


def derive_seed(master_seed: int, *key: int) -> int:
    """Deterministic child seed for (master_seed, key...)"""
    sequence = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def _stream(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key)))


def band_limited_noise(low: float, high: float, n: int, sample_rate: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Unit-peak noise whose spectrum is flat inside [low, high] Hz and zero elsewhere"""
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spectrum = np.zeros(len(freqs), dtype=np.complex128)
    band = (freqs >= low) & (freqs <= high)
    phases = rng.uniform(0.0, 2.0 * np.pi, len(freqs))
    spectrum[band] = np.exp(1j * phases[band])
    noise = np.fft.irfft(spectrum, n)
    peak = np.max(np.abs(noise)) if n else 0.0
    if peak == 0:
        return np.zeros(n)
    return noise / peak


def _carrier(field_spec: FieldSpec, tau: np.ndarray, phase: np.ndarray) -> np.ndarray:
    omega = 2.0 * np.pi * field_spec.grid_frequency
    wave = np.zeros_like(tau)
    for k, amplitude in field_spec.harmonic_amplitudes:
        if amplitude:
            wave += amplitude * np.sin(omega * k * tau + phase)
    return wave


class _BodyState:
    """Per-seed draws of one body on the padded grid"""

    def __init__(self, amplitude: float, phase: float, walk: np.ndarray, envelope: np.ndarray, depth: float):
        self.amplitude = amplitude
        self.phase = phase
        self.walk = walk
        self.envelope = envelope
        self.depth = depth


def _phase_walk(diffusion: float, n: int, sample_rate: float, rng: np.random.Generator) -> np.ndarray:
    steps = rng.standard_normal(n)
    if diffusion == 0:
        return np.zeros(n)
    return np.cumsum(steps * math.sqrt(diffusion / sample_rate))


def _draw_bodies(spec: ScenarioSpec, t_pad: np.ndarray) -> Dict[str, _BodyState]:
    fs = spec.sample_rate
    n_pad = len(t_pad)
    states: Dict[str, _BodyState] = {}
    mimics: List[Tuple[int, BodySpec]] = []

    for index, body in enumerate(spec.bodies):
        rng = _stream(spec.seed, _STREAM_BODY, index)
        z = rng.standard_normal()
        drawn_phase = rng.uniform(0.0, 2.0 * np.pi)
        median = spec.field.base_amplitude_volts if body.amplitude_volts is None else body.amplitude_volts
        amplitude = median * math.exp(body.amplitude_jitter * z)
        phase = drawn_phase if body.carrier_phase is None else float(body.carrier_phase)
        walk = _phase_walk(spec.field.phase_diffusion, n_pad, fs, rng)

        movement = body.movement_envelope
        if movement is None:
            envelope, depth = np.zeros(n_pad), 0.0
        else:
            low, high = movement.envelope_band
            envelope = band_limited_noise(low, high, n_pad, fs, rng)
            depth = movement.envelope_depth
            if movement.mimic_of is not None:
                mimics.append((index, body))
        states[body.body_id] = _BodyState(amplitude, phase, walk, envelope, depth)

    # Mimics copy the victim's movement with a lag, plus their own imprecision.
    for index, body in mimics:
        mimic = body.movement_envelope.mimic_of
        victim = states[mimic.body_id]
        rng = _stream(spec.seed, _STREAM_MIMIC, index)
        low, high = body.movement_envelope.envelope_band
        copied = np.interp(t_pad - mimic.delay_seconds, t_pad, victim.envelope)
        jitter = band_limited_noise(low, high, n_pad, fs, rng) * mimic.envelope_noise_std
        states[body.body_id].envelope = np.clip(copied + jitter, -1.0, 1.0)

    return states


def synthesize_scenario(spec: ScenarioSpec) -> Dict[str, Trace]:
    """Synthesize one trace per placement; identical specs give bit-identical traces"""
    spec.validate()
    fs = spec.sample_rate
    n = int(round(spec.length_seconds * fs))
    pad = int(math.ceil(PAD_SECONDS * fs))
    t = spec.start_time + np.arange(n, dtype=np.float64) / fs
    t_pad = spec.start_time + np.arange(-pad, n + pad, dtype=np.float64) / fs

    bodies = _draw_bodies(spec, t_pad)
    traces: Dict[str, Trace] = {}

    for index, placement in enumerate(spec.placements):
        rng = _stream(spec.seed, _STREAM_PLACEMENT, index)
        body = bodies[placement.body_id]
        offset = float(spec.clock_offset_seconds.get(placement.placement_id, 0.0))
        tau = t - offset

        walk = np.interp(tau, t_pad, body.walk)
        envelope = 1.0 + body.depth * np.interp(tau, t_pad, body.envelope)
        common = _carrier(spec.field, tau, body.phase + walk + placement.phase_offset)

        private_phase = rng.uniform(0.0, 2.0 * np.pi)
        private_walk = np.interp(tau, t_pad, _phase_walk(spec.field.phase_diffusion, len(t_pad), fs, rng))
        private = _carrier(spec.field, tau, private_phase + private_walk)
        noise = rng.standard_normal(n) * placement.noise_std

        rho = placement.coupling
        body_part = body.amplitude * envelope * (rho * common + math.sqrt(1.0 - rho * rho) * private)
        if placement.phase_flip:
            body_part = -body_part
        samples = placement.location_gain * body_part + placement.dc_offset_volts + noise
        traces[placement.placement_id] = Trace(spec.start_time, fs, samples)

    for index, interferer in enumerate(spec.interferers):
        seed = derive_seed(spec.seed, _STREAM_INTERFERER, index)
        targets = interferer.targets or tuple(traces)
        for placement_id in targets:
            traces[placement_id] = add_interferer(traces[placement_id], interferer, seed)

    logger.debug("synthesized %d traces of %d samples (seed=%d)", len(traces), n, spec.seed)
    return traces


def apply_clock_offset(trace: Trace, offset: float) -> Trace:
    """
    Resample the trace as seen by a clock running `offset` seconds ahead.

    Output sample n holds the input value at t_n - offset: whole-sample shift plus
    linear interpolation for the remainder. Samples whose source falls outside the
    input are dropped, at most ceil(|offset| * sample_rate) of them.
    """
    if offset == 0:
        return trace
    if abs(offset) >= trace.duration:
        raise ClockOffsetError(f"offset {offset} s is not shorter than trace duration {trace.duration} s")

    fs = trace.sample_rate
    x = trace.samples
    n = len(x)
    shift = round(abs(offset) * fs, 9)
    whole = int(math.floor(shift))
    frac = shift - whole
    drop = int(math.ceil(shift))

    if offset > 0:
        idx = np.arange(drop, n)
        y = x[idx - whole] if frac == 0 else (1.0 - frac) * x[idx - whole] + frac * x[idx - whole - 1]
        return Trace(trace.start_time + drop / fs, fs, y)

    idx = np.arange(0, n - drop)
    y = x[idx + whole] if frac == 0 else (1.0 - frac) * x[idx + whole] + frac * x[idx + whole + 1]
    return Trace(trace.start_time, fs, y)


def _on_schedule(t: np.ndarray, interferer: InterfererSpec, rng: np.random.Generator) -> np.ndarray:
    period = interferer.period_seconds
    lead = rng.uniform(0.0, period)
    return ((t + lead) % period) < interferer.duty_cycle * period


def add_interferer(trace: Trace, interferer: InterfererSpec, seed: int) -> Trace:
    """Samplewise sum of the trace and the interferer waveform drawn from `seed`"""
    interferer.validate()
    if interferer.amplitude_volts == 0:
        return trace

    rng = np.random.default_rng(int(seed))
    t = trace.times()
    on = _on_schedule(t, interferer, rng)

    if interferer.kind == INTERFERER_TONE:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.sin(2.0 * np.pi * interferer.frequency * t + phase)
    else:
        wave = rng.standard_normal(len(t))
        nyquist = trace.sample_rate / 2.0
        if SCIPY_AVAILABLE and 0 < interferer.frequency < nyquist:
            sos = sp_signal.butter(4, interferer.frequency, btype="low", fs=trace.sample_rate, output="sos")
            wave = sp_signal.sosfilt(sos, wave)
        spread = np.std(wave)
        if spread > 0:
            wave = wave / spread

    return trace.with_samples(trace.samples + interferer.amplitude_volts * wave * on)


def align_pair(x: Trace, y: Trace) -> Tuple[Trace, Trace]:
    """Restrict two traces on the same sample grid to their common time span"""
    if x.sample_rate != y.sample_rate:
        raise ScenarioError("traces have different sample rates")
    start = max(x.start_time, y.start_time)
    end = min(x.end_time, y.end_time)
    if end <= start:
        raise ScenarioError("traces do not overlap")
    n = int(math.floor(round((end - start) * x.sample_rate, 6)))
    return x.window(start, start + n / x.sample_rate), y.window(start, start + n / y.sample_rate)


def capture_window(trace: Trace, clock_offset: float, t1: float, t2: float) -> Trace:
    """Samples a device with the given clock error records for [t1, t2) on its own clock"""
    return apply_clock_offset(trace, clock_offset).window(t1, t2)
