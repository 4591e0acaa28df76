"""
Scenario documents and trace files.

A scenario document is YAML whose sections mirror the scenario dataclasses field
for field. Unknown keys are errors, never silently dropped.
"""

import logging
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd
import yaml

from signal_model import (
    BodySpec,
    FieldSpec,
    InterfererSpec,
    MimicSpec,
    MovementSpec,
    PlacementSpec,
    ScenarioError,
    ScenarioSpec,
    Trace,
)

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.12g'
TRACE_COLUMNS = ['t_seconds', 'volts']

PathLike = Union[str, Path]


class ScenarioConfigError(ValueError):
    """Raised for malformed scenario documents and overrides"""


def _check_keys(section: str, data: Any, cls) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise ScenarioConfigError(f'{section}: expected a mapping, got {type(data).__name__}')
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ScenarioConfigError(f'{section}: unknown key(s) {", ".join(map(str, unknown))}')
    return dict(data)


def _harmonics(value: Any) -> tuple:
    if isinstance(value, dict):
        pairs = value.items()
    elif isinstance(value, list):
        try:
            pairs = [(item[0], item[1]) for item in value]
        except (TypeError, IndexError, KeyError):
            raise ScenarioConfigError('field.harmonic_amplitudes: expected [k, amplitude] pairs')
    else:
        raise ScenarioConfigError('field.harmonic_amplitudes: expected a mapping or a list of pairs')
    return tuple(sorted((int(k), float(a)) for k, a in pairs))


def _field(data: Any) -> FieldSpec:
    data = _check_keys('field', data, FieldSpec)
    if 'harmonic_amplitudes' in data:
        data['harmonic_amplitudes'] = _harmonics(data['harmonic_amplitudes'])
    return FieldSpec(**data)


def _movement(section: str, data: Any) -> Optional[MovementSpec]:
    if data is None:
        return None
    data = _check_keys(section, data, MovementSpec)
    if 'envelope_band' in data:
        data['envelope_band'] = tuple(float(v) for v in data['envelope_band'])
    if data.get('mimic_of') is not None:
        data['mimic_of'] = MimicSpec(**_check_keys(f'{section}.mimic_of', data['mimic_of'], MimicSpec))
    return MovementSpec(**data)


def _body(index: int, data: Any) -> BodySpec:
    section = f'bodies.{index}'
    data = _check_keys(section, data, BodySpec)
    if 'movement_envelope' in data:
        data['movement_envelope'] = _movement(f'{section}.movement_envelope', data['movement_envelope'])
    return BodySpec(**data)


def _interferer(index: int, data: Any) -> InterfererSpec:
    data = _check_keys(f'interferers.{index}', data, InterfererSpec)
    if 'targets' in data:
        data['targets'] = tuple(data['targets'] or ())
    return InterfererSpec(**data)


def _as_list(section: str, value: Any) -> List[Any]:
    if value is None:
        return []
    if not isinstance(value, list):
        raise ScenarioConfigError(f'{section}: expected a list')
    return value


def scenario_from_document(document: Dict[str, Any]) -> ScenarioSpec:
    """Build and validate a ScenarioSpec from a parsed document"""
    data = _check_keys('scenario', document or {}, ScenarioSpec)
    try:
        if 'field' in data:
            data['field'] = _field(data['field'])
        data['bodies'] = tuple(_body(i, b) for i, b in enumerate(_as_list('bodies', data.get('bodies'))))
        data['placements'] = tuple(
            PlacementSpec(**_check_keys(f'placements.{i}', p, PlacementSpec))
            for i, p in enumerate(_as_list('placements', data.get('placements')))
        )
        data['interferers'] = tuple(
            _interferer(i, item) for i, item in enumerate(_as_list('interferers', data.get('interferers')))
        )
        offsets = data.get('clock_offset_seconds') or {}
        if not isinstance(offsets, dict):
            raise ScenarioConfigError('clock_offset_seconds: expected a mapping')
        data['clock_offset_seconds'] = {str(k): float(v) for k, v in offsets.items()}
        spec = ScenarioSpec(**data)
        spec.validate()
    except ScenarioError as e:
        raise ScenarioConfigError(str(e)) from e
    except TypeError as e:
        raise ScenarioConfigError(f'missing or mistyped field: {e}') from e
    return spec


def scenario_to_document(spec: ScenarioSpec) -> Dict[str, Any]:
    """Plain-data view of a scenario, loadable by scenario_from_document"""
    document = asdict(spec)
    for section in ('bodies', 'placements', 'interferers'):
        document[section] = list(document[section])
    document['field']['harmonic_amplitudes'] = [[int(k), float(a)] for k, a in spec.field.harmonic_amplitudes]
    for body in document['bodies']:
        movement = body.get('movement_envelope')
        if movement is not None:
            movement['envelope_band'] = list(movement['envelope_band'])
    for interferer in document['interferers']:
        interferer['targets'] = list(interferer['targets'])
    return document


def _parse_override(override: str):
    key, sep, raw = override.partition('=')
    if not sep or not key.strip():
        raise ScenarioConfigError(f'override {override!r} is not of the form key.path=value')
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ScenarioConfigError(f'override {override!r}: {e}') from e
    return key.strip().split('.'), value


def apply_overrides(document: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """
    Apply `dotted.path=value` overrides in place; list elements are addressed by
    index, e.g. `bodies.0.amplitude_volts=0.2`. Values are parsed as YAML scalars.
    """
    for override in overrides:
        path, value = _parse_override(override)
        node: Any = document
        for depth, part in enumerate(path):
            last = depth == len(path) - 1
            where = '.'.join(path[:depth + 1])
            if isinstance(node, list):
                try:
                    index = int(part)
                    node[index]
                except (ValueError, IndexError):
                    raise ScenarioConfigError(f'override {override!r}: no list element at {where}')
                if last:
                    node[index] = value
                else:
                    node = node[index]
            elif isinstance(node, dict):
                if last:
                    node[part] = value
                else:
                    if node.get(part) is None:
                        node[part] = {}
                    node = node[part]
            else:
                raise ScenarioConfigError(f'override {override!r}: {where} is not a section')
        logger.debug('override %s=%r', '.'.join(path), value)
    return document


def load_document(path: PathLike) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            document = yaml.safe_load(handle)
    except yaml.YAMLError as e:
        raise ScenarioConfigError(f'{path}: {e}') from e
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ScenarioConfigError(f'{path}: top level must be a mapping')
    return document


def load_scenario(path: Optional[PathLike] = None, overrides: Iterable[str] = (),
                  base: Optional[ScenarioSpec] = None) -> ScenarioSpec:
    """Read a scenario file (or start from `base`), apply overrides, validate"""
    if path is not None:
        document = load_document(path)
    elif base is not None:
        document = scenario_to_document(base)
    else:
        raise ScenarioConfigError('either a scenario path or a base scenario is required')
    return scenario_from_document(apply_overrides(document, overrides))


def dump_scenario(spec: ScenarioSpec, path: PathLike):
    with open(path, 'w', encoding='utf-8') as handle:
        yaml.safe_dump(scenario_to_document(spec), handle, sort_keys=False)


def write_frame(frame: pd.DataFrame, path: PathLike):
    """CSV with at least 12 significant digits, no index"""
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def trace_frame(trace: Trace) -> pd.DataFrame:
    return pd.DataFrame({'t_seconds': trace.times(), 'volts': trace.samples}, columns=TRACE_COLUMNS)


def write_trace(trace: Trace, path: PathLike):
    write_frame(trace_frame(trace), path)


def read_trace(path: PathLike, sample_rate: Optional[float] = None) -> Trace:
    """Load a `t_seconds,volts` CSV; the sample rate is inferred from the time column unless given"""
    frame = pd.read_csv(path)
    if list(frame.columns) != TRACE_COLUMNS:
        raise ScenarioConfigError(f'{path}: expected columns {",".join(TRACE_COLUMNS)}')
    if frame.empty:
        raise ScenarioConfigError(f'{path}: trace file has no samples')
    times = frame['t_seconds'].to_numpy(dtype=np.float64)
    if sample_rate is None:
        if len(times) < 2:
            raise ScenarioConfigError(f'{path}: cannot infer the sample rate from one sample')
        sample_rate = float(round(1.0 / float(np.median(np.diff(times))), 6))
    return Trace(float(times[0]), float(sample_rate), frame['volts'].to_numpy(dtype=np.float64))
