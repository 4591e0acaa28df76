import logging
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from detector import DetectorConfig
from signal_model import (
    DEFAULT_NOISE_STD,
    INTERFERER_BURST,
    INTERFERER_TONE,
    ROLE_AUTHENTICATOR,
    ROLE_INVALID,
    ROLE_VALID,
    BodySpec,
    FieldSpec,
    InterfererSpec,
    MimicSpec,
    MovementSpec,
    PlacementSpec,
    ScenarioError,
    ScenarioSpec,
)

logger = logging.getLogger(__name__)

WEARER = 'wearer'
BYSTANDER = 'bystander'
ATTACKER = 'attacker'

AUTHENTICATOR = 'authenticator'
VALID = 'valid'
INVALID = 'invalid'

# Peak carrier amplitude per environment; outdoors sits below the 0.06 V gate.
ENVIRONMENT_AMPLITUDES = {
    'lab': 0.3,
    'home': 0.2,
    'office': 0.15,
    'outdoors': 0.02,
}

# site -> (coupling, location_gain, phase_flip)
PROXIMITY_SITES = {
    'palm': (0.99, 1.0, False),
    'wrist': (0.97, 0.9, False),
    'forearm': (0.96, 0.85, True),
    'elbow': (0.93, 0.8, False),
    'head': (0.85, 0.6, False),
}

# kind -> (location_gain, coupling, noise_std). Partial implants carry a weak 50 Hz
# component; full implants see the equipotential body and read almost pure noise.
IMPLANT_KINDS = {
    'partial': (0.05 / 0.3, 0.9, 0.005),
    'full': (0.01, 0.0, 0.012),
}
# Gate low enough to pass a 0.1 V peak-to-peak partial implant.
IMPLANT_GATE_STD = 0.02

# condition -> (location_gain, coupling, noise_std) of the authenticator held in that hand.
# Wet skin lowers the contact impedance.
SKIN_CONDITIONS = {
    'dry': (1.0, 0.99, DEFAULT_NOISE_STD),
    'wet': (1.2, 0.995, DEFAULT_NOISE_STD / 2),
}


def _moving(depth: float = 0.3) -> MovementSpec:
    return MovementSpec(envelope_band=(0.5, 2.0), envelope_depth=depth)


def default_scenario(seed: int = 0, length_seconds: float = 1.0) -> ScenarioSpec:
    """Calibrated pair on the wearer's palm plus one bystander"""
    return ScenarioSpec(
        field=FieldSpec(),
        bodies=(
            BodySpec(WEARER, movement_envelope=_moving(), amplitude_jitter=0.25),
            BodySpec(BYSTANDER, movement_envelope=_moving(), amplitude_jitter=0.5),
        ),
        placements=(
            PlacementSpec(AUTHENTICATOR, WEARER, role=ROLE_AUTHENTICATOR, coupling=0.99),
            PlacementSpec(VALID, WEARER, role=ROLE_VALID, coupling=0.99),
            PlacementSpec(INVALID, BYSTANDER, role=ROLE_INVALID, coupling=0.0),
        ),
        seed=seed,
        length_seconds=length_seconds,
    )


def _with_placement(spec: ScenarioSpec, placement_id: str, **changes) -> ScenarioSpec:
    placements = tuple(
        replace(p, **changes) if p.placement_id == placement_id else p for p in spec.placements
    )
    return replace(spec, placements=placements)


def _with_body(spec: ScenarioSpec, body_id: str, **changes) -> ScenarioSpec:
    bodies = tuple(replace(b, **changes) if b.body_id == body_id else b for b in spec.bodies)
    return replace(spec, bodies=bodies)


def wearer_scenarios(n_wearers: int = 5, seed: int = 0) -> List[Tuple[str, ScenarioSpec]]:
    """One scenario per simulated wearer, each with its own amplitude, movement and contact gain"""
    if n_wearers < 1:
        raise ScenarioError('n_wearers must be >= 1')
    rng = np.random.default_rng(seed)
    wearers = []
    for index in range(n_wearers):
        amplitude = float(0.3 * np.exp(rng.normal(0.0, 0.25)))
        depth = float(rng.uniform(0.1, 0.5))
        gain = float(rng.uniform(0.7, 1.3))
        spec = default_scenario(seed=seed)
        spec = _with_body(spec, WEARER, amplitude_volts=amplitude, movement_envelope=_moving(depth))
        spec = _with_placement(spec, VALID, location_gain=gain)
        wearers.append((f'wearer-{index + 1}', spec))
    return wearers


def environment_scenario(name: str) -> ScenarioSpec:
    if name not in ENVIRONMENT_AMPLITUDES:
        raise ScenarioError(f'unknown environment {name!r}; choose from {sorted(ENVIRONMENT_AMPLITUDES)}')
    spec = default_scenario()
    return replace(spec, field=replace(spec.field, base_amplitude_volts=ENVIRONMENT_AMPLITUDES[name]))


def proximity_scenario(site: str) -> ScenarioSpec:
    """Authenticatee placed at `site` while the authenticator stays at the palm"""
    if site not in PROXIMITY_SITES:
        raise ScenarioError(f'unknown site {site!r}; choose from {sorted(PROXIMITY_SITES)}')
    coupling, gain, flip = PROXIMITY_SITES[site]
    return _with_placement(default_scenario(), VALID, coupling=coupling, location_gain=gain, phase_flip=flip)


def heterogeneous_scenario() -> ScenarioSpec:
    """Authenticatee built on different hardware: own DC line, gain and noise floor"""
    spec = default_scenario()
    spec = _with_placement(spec, VALID, dc_offset_volts=0.5, location_gain=1.4, noise_std=0.03)
    return _with_placement(spec, INVALID, dc_offset_volts=0.5, location_gain=1.4, noise_std=0.03)


def implant_scenario(kind: str) -> ScenarioSpec:
    if kind not in IMPLANT_KINDS:
        raise ScenarioError(f'unknown implant kind {kind!r}; choose from {sorted(IMPLANT_KINDS)}')
    gain, coupling, noise = IMPLANT_KINDS[kind]
    spec = _with_placement(default_scenario(), VALID, location_gain=gain, coupling=coupling, noise_std=noise)
    return _with_placement(spec, INVALID, location_gain=gain, noise_std=noise)


def skin_moisture_scenario(condition: str) -> ScenarioSpec:
    """Authenticator and valid authenticatee held in one hand, dry or wet"""
    if condition not in SKIN_CONDITIONS:
        raise ScenarioError(f'unknown skin condition {condition!r}; choose from {sorted(SKIN_CONDITIONS)}')
    gain, coupling, noise = SKIN_CONDITIONS[condition]
    return _with_placement(default_scenario(), AUTHENTICATOR, location_gain=gain, coupling=coupling, noise_std=noise)


def mimicry_scenario(delay_seconds: float = 0.2, envelope_noise_std: float = 0.1) -> ScenarioSpec:
    """The invalid authenticatee is worn by an attacker copying the wearer's movements"""
    spec = default_scenario()
    attacker_movement = MovementSpec(
        envelope_band=(0.5, 2.0),
        envelope_depth=0.3,
        mimic_of=MimicSpec(WEARER, delay_seconds, envelope_noise_std),
    )
    bodies = spec.bodies + (BodySpec(ATTACKER, movement_envelope=attacker_movement, amplitude_jitter=0.5),)
    spec = replace(spec, bodies=bodies)
    return _with_placement(spec, INVALID, body_id=ATTACKER)


def interference_scenario(name: str) -> ScenarioSpec:
    """
    Appliance: switched-mode supply noise on every sensor. Phone call: intermittent
    bursts at the authenticatee only. Tone: 85 Hz injection into the power network.
    """
    spec = default_scenario()
    if name == 'appliance':
        interferer = InterfererSpec(INTERFERER_BURST, frequency=200.0, amplitude_volts=0.1)
    elif name == 'phone-call':
        interferer = InterfererSpec(
            INTERFERER_BURST, frequency=200.0, amplitude_volts=0.2,
            duty_cycle=0.3, period_seconds=2.0, targets=(VALID,),
        )
    elif name == 'tone':
        interferer = InterfererSpec(INTERFERER_TONE, frequency=85.0, amplitude_volts=0.3)
    else:
        raise ScenarioError(f'unknown interference {name!r}; choose from appliance, phone-call, tone')
    return replace(spec, interferers=(interferer,))


def pure_carrier_scenario(offset_seconds: float = 0.0, length_seconds: float = 2.0) -> ScenarioSpec:
    """Noiseless stationary 50 Hz carrier shared by the pair; `offset_seconds` shifts the authenticatee clock"""
    field = FieldSpec(harmonic_amplitudes=((1, 1.0),), phase_diffusion=0.0)
    offsets = {VALID: offset_seconds} if offset_seconds else {}
    return ScenarioSpec(
        field=field,
        bodies=(BodySpec(WEARER), BodySpec(BYSTANDER)),
        placements=(
            PlacementSpec(AUTHENTICATOR, WEARER, role=ROLE_AUTHENTICATOR, coupling=1.0, noise_std=0.0),
            PlacementSpec(VALID, WEARER, role=ROLE_VALID, coupling=1.0, noise_std=0.0),
            PlacementSpec(INVALID, BYSTANDER, role=ROLE_INVALID, coupling=0.0, noise_std=0.0),
        ),
        clock_offset_seconds=offsets,
        length_seconds=length_seconds,
    )


PRESETS: Dict[str, Callable[[], ScenarioSpec]] = {
    'default': default_scenario,
    'heterogeneous': heterogeneous_scenario,
    'mimicry': mimicry_scenario,
    'pure-carrier': pure_carrier_scenario,
}
PRESETS.update({name: (lambda n=name: environment_scenario(n)) for name in ENVIRONMENT_AMPLITUDES})
PRESETS.update({site: (lambda s=site: proximity_scenario(s)) for site in PROXIMITY_SITES})
PRESETS.update({f'implant-{kind}': (lambda k=kind: implant_scenario(k)) for kind in IMPLANT_KINDS})
PRESETS.update({name: (lambda n=name: interference_scenario(n)) for name in ('appliance', 'phone-call', 'tone')})
PRESETS.update({f'skin-{c}': (lambda c=c: skin_moisture_scenario(c)) for c in SKIN_CONDITIONS})

# Presets whose sensors need a different detector gate.
PRESET_GATES: Dict[str, float] = {f'implant-{kind}': IMPLANT_GATE_STD for kind in IMPLANT_KINDS}

# Families take the run seed so seeded per-member draws follow --seed.
FAMILIES: Dict[str, Callable[[int], List[Tuple[str, ScenarioSpec]]]] = {
    'wearers': lambda seed: wearer_scenarios(seed=seed),
    'environments': lambda seed: [(name, environment_scenario(name)) for name in ENVIRONMENT_AMPLITUDES],
    'proximity': lambda seed: [(site, proximity_scenario(site)) for site in PROXIMITY_SITES],
    'skin-moisture': lambda seed: [(c, skin_moisture_scenario(c)) for c in SKIN_CONDITIONS],
}


def preset(name: str, seed: Optional[int] = None) -> ScenarioSpec:
    if name not in PRESETS:
        raise ScenarioError(f'unknown preset {name!r}; choose from {sorted(PRESETS)}')
    spec = PRESETS[name]()
    return spec if seed is None else spec.with_seed(seed)


def preset_detector(name: Optional[str], cfg: DetectorConfig) -> DetectorConfig:
    """`cfg` with any detector setting the named preset requires"""
    if name in PRESET_GATES:
        return cfg.with_gate(PRESET_GATES[name])
    return cfg
