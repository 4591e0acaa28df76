"""
touchauth command-line interface.

    touchauth roc --seed 7 --trials 500 --alpha-bound 0.02 --out results/
    touchauth session --seed 7 --adversary echo-mitm --transcript --out results/

All randomness derives from --seed, so rerunning a command reproduces its outputs
byte for byte.
"""

import argparse
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

import scenarios
from detector import ContactDetector, DetectorConfig, Metric
from evaluation import (
    DEFAULT_ALPHA_BOUND,
    DEFAULT_TRIALS,
    EmptyClassError,
    ExperimentHarness,
    NoFeasibleThresholdError,
    ScenarioRoleError,
    trial_seed,
)
from netsim import AdversaryMode, AdversaryPolicy, NetworkSimulator
from protocol import RejectionGuard, SecurityMode, SessionConfig, naive_session, run_session
from scenario_io import ScenarioConfigError, dump_scenario, load_scenario, write_frame, write_trace
from signal_model import ROLE_AUTHENTICATOR, ROLE_INVALID, ROLE_VALID, ScenarioError, ScenarioSpec, synthesize_scenario

logger = logging.getLogger('touchauth')

COMMANDS = ('synth', 'detect', 'roc', 'sweep', 'session', 'attack')
ADVERSARIES = ('none', 'eavesdrop', 'drop', 'modify', 'forge', 'replay', 'echo-mitm')
DEFAULT_LENGTHS = '0.5,1,2,3,4,5'
DEFAULT_ATTACK_LENGTHS = '0.1,0.25,0.5,1,2'
SESSION_COLUMNS = ['seed', 'mode', 'adversary', 'outcome', 'score']
# Simulated time between consecutive session attempts, for the rejection guard.
SESSION_SPACING = 10.0

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Raised for command-line combinations that cannot run"""


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f'must be a positive integer, got {text}')
    return value


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError('seed must be an unsigned 64-bit integer')
    return value


def _confidence(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f'confidence must lie in (0, 1), got {text}')
    return value


def _lengths(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'not a comma-separated list of seconds: {text}')
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError('signal lengths must be positive')
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='touchauth', description='Same-body contact authentication experiments')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--scenario', type=Path, help='YAML scenario document')
    parser.add_argument('--preset',
                        help='built-in scenario (or family for roc: wearers, environments, proximity, skin-moisture)')
    parser.add_argument('--seed', type=_seed, required=True)
    parser.add_argument('--out', type=Path, default=Path('out'))
    parser.add_argument('--trials', type=_positive_int, default=DEFAULT_TRIALS)
    parser.add_argument('--alpha-bound', type=float, action='append', dest='alpha_bounds')
    parser.add_argument('--length', type=float, help='signal length in seconds')
    parser.add_argument('--lengths', type=_lengths, help='comma-separated signal lengths for sweep and attack')
    parser.add_argument('--metric', choices=[m.value for m in Metric], default=Metric.APCC.value)
    parser.add_argument('--eta', type=float, help='fixed threshold instead of calibrating at the first alpha bound')
    parser.add_argument('--confidence', type=_confidence,
                        help='calibrate so the alpha bound holds at this confidence (Clopper-Pearson)')
    parser.add_argument('--gate', type=float, help='signal-strength gate in volts (std); presets may set their own')
    parser.add_argument('--transcript', action='store_true', help='write one transcript per session')
    parser.add_argument('--override', action='append', default=[], metavar='KEY=VALUE')
    parser.add_argument('--mode', choices=[m.value for m in SecurityMode], default=SecurityMode.FULL_H2H.value)
    parser.add_argument('--adversary', choices=ADVERSARIES, default='none')
    parser.add_argument('--naive', action='store_true', help='session without the commitment exchange')
    parser.add_argument('--guard', action='store_true', help='block authenticatees frozen or banned after rejections')
    parser.add_argument('--workers', type=_positive_int, default=int(os.getenv('TOUCHAUTH_WORKERS', '1')))
    parser.add_argument('--log-level', default=os.getenv('TOUCHAUTH_LOG_LEVEL', 'WARNING'))
    return parser


def configure_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr,
        force=True,
    )


def resolve_scenario(args, default_preset: str = 'default') -> ScenarioSpec:
    if args.scenario is not None:
        spec = load_scenario(args.scenario, args.override)
    else:
        spec = load_scenario(None, args.override, base=scenarios.preset(args.preset or default_preset))
    spec = spec.with_seed(args.seed)
    if args.length is not None:
        spec = spec.with_length(args.length)
    return spec


def _alpha_bounds(args) -> List[float]:
    bounds = args.alpha_bounds or [DEFAULT_ALPHA_BOUND]
    for bound in bounds:
        if not 0 <= bound <= 1:
            raise UsageError(f'--alpha-bound must lie in [0, 1], got {bound}')
    return bounds


def _detector(args, scenario: ScenarioSpec) -> DetectorConfig:
    length = args.length if args.length is not None else 1.0
    cfg = DetectorConfig(metric=Metric(args.metric), signal_length_seconds=length,
                         sample_rate=scenario.sample_rate)
    if args.gate is not None:
        return cfg.with_gate(args.gate)
    return scenarios.preset_detector(args.preset, cfg) if args.scenario is None else cfg


def _threshold(args, scenario: ScenarioSpec, cfg: DetectorConfig) -> DetectorConfig:
    if args.eta is not None:
        return cfg.with_eta(args.eta)
    harness = ExperimentHarness(cfg, args.trials, args.seed, args.workers)
    return harness.calibrate(scenario, _alpha_bounds(args)[0], args.confidence)


def _prepare(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    scenario = resolve_scenario(args)
    out = _prepare(args.out)
    traces = synthesize_scenario(scenario)
    for placement_id, trace in traces.items():
        write_trace(trace, out / f'{placement_id}.csv')
    dump_scenario(scenario, out / 'scenario.yaml')
    print(f'wrote {len(traces)} traces of {scenario.length_seconds:g} s to {out}')
    return EXIT_OK


def cmd_detect(args) -> int:
    scenario = resolve_scenario(args)
    cfg = _threshold(args, scenario, _detector(args, scenario))
    traces = synthesize_scenario(scenario.with_length(max(scenario.length_seconds, cfg.signal_length_seconds)))

    authenticator = scenario.placements_with_role(ROLE_AUTHENTICATOR)
    if not authenticator:
        raise ScenarioRoleError('scenario has no authenticator placement')
    s = traces[authenticator[0].placement_id]
    others = [p.placement_id for p in scenario.placements if p.role in (ROLE_VALID, ROLE_INVALID)]

    detector = ContactDetector(cfg)
    decisions = detector.decide_many((s, traces[p]) for p in others)
    # Rows follow the scenario's placement order, as listed on stdout.
    write_frame(detector.decision_rows(decisions), _prepare(args.out) / 'decisions.csv')
    for placement_id, decision in zip(others, decisions):
        print(f'{placement_id}: {decision.outcome.value} score={decision.score}')
    return EXIT_OK


def cmd_roc(args) -> int:
    out = _prepare(args.out)
    if args.preset in scenarios.FAMILIES and args.scenario is None:
        named = [(name, load_scenario(None, args.override, base=spec).with_seed(args.seed))
                 for name, spec in scenarios.FAMILIES[args.preset](args.seed)]
        first = named[0][1]
        harness = ExperimentHarness(_detector(args, first), args.trials, args.seed, args.workers)
        write_frame(harness.roc_by_scenario(named), out / 'roc.csv')
        print(f'wrote per-scenario ROC for {len(named)} scenarios to {out / "roc.csv"}')
        return EXIT_OK

    scenario = resolve_scenario(args)
    harness = ExperimentHarness(_detector(args, scenario), args.trials, args.seed, args.workers)
    curve = harness.roc_curve(scenario)
    write_frame(curve.to_frame(), out / 'roc.csv')
    write_frame(harness.sdr_report(scenario), out / 'sdr.csv')
    summary = harness.threshold_summary(curve, _alpha_bounds(args))
    for row in summary.itertuples(index=False):
        print(f'alpha<={row.alpha_bound:g}: eta={row.eta:.6g} alpha={row.alpha:.4f} beta={row.beta:.4f} '
              f'expected_attempts={row.expected_attempts:g}')
    return EXIT_OK


def cmd_sweep(args) -> int:
    scenario = resolve_scenario(args)
    harness = ExperimentHarness(_detector(args, scenario), args.trials, args.seed, args.workers)
    lengths = args.lengths or _lengths(DEFAULT_LENGTHS)
    frame = harness.beta_vs_length(scenario, lengths, _alpha_bounds(args)[0])
    write_frame(frame, _prepare(args.out) / 'beta_vs_length.csv')
    for row in frame.itertuples(index=False):
        print(f'length={row.length_s:g}s beta={row.beta:.4f}')
    return EXIT_OK


def adversary_policy(name: str) -> AdversaryPolicy:
    if name == 'echo-mitm':
        return AdversaryPolicy.echo_mitm()
    return AdversaryPolicy(mode=AdversaryMode(name))


def cmd_session(args) -> int:
    scenario = resolve_scenario(args)
    cfg = _detector(args, scenario)
    try:
        SessionConfig(detector_cfg=cfg)
    except ValueError as e:
        raise UsageError(str(e)) from e
    cfg = _threshold(args, scenario, cfg)
    session_cfg = SessionConfig(detector_cfg=cfg, security_mode=SecurityMode(args.mode))
    policy = adversary_policy(args.adversary)
    runner = naive_session if args.naive else run_session

    out = _prepare(args.out)
    if args.transcript:
        _prepare(out / 'transcripts')
    guard = RejectionGuard()
    device = 'authenticatee'
    rows = []
    for index in range(args.trials):
        seed = trial_seed(args.seed, index)
        now = index * SESSION_SPACING
        if args.guard and not guard.allow(device, now):
            rows.append((seed, args.mode, args.adversary, 'BLOCKED', None))
            continue
        sim = NetworkSimulator(seed)
        result = runner(sim, session_cfg, scenario.with_seed(seed), policy)
        guard.record(device, result.outcome, now)
        rows.append((seed, args.mode, args.adversary, result.outcome.value, result.score))
        if args.transcript:
            sim.write_transcript(out / 'transcripts' / f'session_{index}.txt')

    frame = pd.DataFrame(rows, columns=SESSION_COLUMNS)
    write_frame(frame, out / 'sessions.csv')
    counts = Counter(frame['outcome'])
    print(' '.join(f'{outcome}={counts[outcome]}' for outcome in sorted(counts)))
    if guard.banned:
        print(f'banned: {", ".join(sorted(guard.banned))}')
    return EXIT_OK


def cmd_attack(args) -> int:
    attack = resolve_scenario(args, default_preset='mimicry')
    clean = scenarios.default_scenario().with_seed(args.seed)
    harness = ExperimentHarness(_detector(args, attack), args.trials, args.seed, args.workers)
    lengths = args.lengths or _lengths(DEFAULT_ATTACK_LENGTHS)
    reference = args.length if args.length is not None else 1.0
    frame = harness.mimicry_far(attack, clean, lengths, _alpha_bounds(args)[0], reference_length=reference)
    write_frame(frame, _prepare(args.out) / 'mimicry.csv')
    for row in frame.itertuples(index=False):
        print(f'length={row.length_s:g}s far={row.far:.4f}')
    return EXIT_OK


HANDLERS = {
    'synth': cmd_synth,
    'detect': cmd_detect,
    'roc': cmd_roc,
    'sweep': cmd_sweep,
    'session': cmd_session,
    'attack': cmd_attack,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return HANDLERS[args.command](args)
    except (ScenarioConfigError, ScenarioError, UsageError, ScenarioRoleError) as e:
        logger.error('%s', e)
        return EXIT_USAGE
    except FileNotFoundError as e:
        logger.error('%s', e)
        return EXIT_USAGE
    except (EmptyClassError, NoFeasibleThresholdError, OSError, RuntimeError, ValueError) as e:
        logger.error('%s', e)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
