"""Experiment harness + headless CLI for bbpeel.

The library modules (code, circuit, dem, sampler, decoder, theory, streaming) stay
silent apart from optional log callbacks. This module owns orchestration, the
structured event envelope, exit codes, config loading/validation and report files.
`bbpeel.py` is a thin dispatcher over `headless_main`.
"""
from __future__ import annotations
import os, sys, csv, json, time, uuid, shlex, importlib.util, dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from bbpeel_code import (BBCode, REGISTRY, get_code, parse_code_spec, load_code_specs, format_code_spec,
                         min_logical_weight, stopping_distance, syndrome_code_generator)
from bbpeel_circuit import NoiseModel, build_memory_circuit
from bbpeel_dem import (Dem, build_dem, export_dem, import_dem, fault_graph, write_degree_csv,
                        predicted_fault_count, weight2_fraction, dem_from_stim)
from bbpeel_decoder import DecoderConfig, PeelDecoder, PeelMode, PeelPredicate, hot_path_blocks
from bbpeel_errors import (BBPeelError, Canceled, ConfigError, CountMismatch, NonIntegral, ParseError)
from bbpeel_sampler import ShotSource, measure_alpha, write_sampler_stats_csv, fit_lambda_linearity, ALPHA_REFERENCE
from bbpeel_stats import wilson_interval, per_cycle, percentiles
from bbpeel_streaming import StreamingConfig, stream_decode, ratio_study, write_ratio_csv
from bbpeel_theory import (KappaResult, GammaMeasurement, TheoryParams, a_eff_of, classify_collisions,
                           write_collision_csv, theory_params, predict_peel, fit_gamma_eff, tp_grid, random_graph_baseline,
                           theory_report)

__version__ = "1.0.0"

# ---------------- Exit Codes & Schema ----------------
# Stable semantics for automation / CI integration.
SCHEMA_VERSION = 1
EXIT_SUCCESS = 0
EXIT_GENERIC_FAILURE = 1
EXIT_CHECK_FAILED = 2
EXIT_DEPENDENCY_MISSING = 12
EXIT_CANCELED = 15
EXIT_CONFIG_ERROR = 16

MODES = ('code', 'circuit', 'dem', 'decode', 'sweep', 'theory', 'collisions', 'stream', 'bench', 'repro-kunlun')
BP_MODES = ('bench', 'repro-kunlun')          # always run the BP-only arm
REPORT_BASENAME = 'bbpeel_report'
ALLOC_CHECK_SHOTS = 500                       # bench: shots traced for live allocations


def _tool_version() -> str:
    try:
        vpath = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'VERSION.txt')
        if os.path.exists(vpath):
            with open(vpath, 'r', encoding='utf-8') as vf:
                return vf.read().strip() or __version__
    except Exception:
        pass
    return __version__


def _module_available(name: str) -> bool:
    try: return importlib.util.find_spec(name) is not None
    except Exception: return False


def _json_default(o):
    if isinstance(o, Enum): return o.value
    if isinstance(o, np.integer): return int(o)
    if isinstance(o, np.floating): return float(o)
    if isinstance(o, np.ndarray): return o.tolist()
    if dataclasses.is_dataclass(o): return asdict(o)
    return str(o)


# ---------------- Configuration ----------------
@dataclass
class ExperimentConfig:
    mode: str = 'decode'
    code: str = 'gross-144'
    code_spec: Optional[str] = None           # "name l m A=<poly> B=<poly>" overrides the registry name
    dem_file: Optional[str] = None            # decode an exported DEM instead of building one
    rounds: int = 12
    p: float = 0.001
    p_grid: Optional[List[float]] = None
    shots: int = 10_000
    seed: int = 0
    basis: str = 'Z'
    opposite_basis_noise: bool = False
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    compare_bp: bool = False
    workers: int = 1
    warmup: int = 200                         # bench only
    window_rounds: int = 2                    # stream only
    commit_rounds: int = 1
    ratio: bool = False                       # stream: windowed vs whole-block ratio study over the p grid
    baseline_trials: int = 0                  # theory: random-graph A0 baseline (0 disables, else >= 5)
    fit_grid: bool = False                    # theory: gamma fit over the (T, p) grid
    mode_study: bool = False                  # theory: every peel mode under both predicates
    ds_bound: int = 64                        # code: stopping-distance weight bound
    crosscheck: bool = False                  # dem: compare against stim's own model
    strict: bool = False                      # fault-count mismatch raises instead of warning
    per_shot: bool = False
    out: Optional[str] = None
    json_logs: bool = False
    events_file: Optional[str] = None
    progress_mode: str = 'plain'

    def grid(self) -> List[float]:
        return [float(x) for x in self.p_grid] if self.p_grid is not None else [float(self.p)]

    def noise(self, p: float) -> NoiseModel:
        return NoiseModel(p, opposite_basis_noise=self.opposite_basis_noise)

    def validate(self) -> 'ExperimentConfig':
        if self.mode not in MODES: raise ConfigError(f'unknown mode {self.mode!r}')
        if self.shots < 1: raise ConfigError('shots must be >= 1')
        if self.p_grid is not None and len(self.p_grid) == 0: raise ConfigError('p grid must be nonempty')
        for p in self.grid():
            if not (0.0 <= p <= 0.1): raise ConfigError(f'p must lie in [0, 0.1] (got {p})')
        if self.rounds < 1: raise ConfigError('rounds must be >= 1')
        if self.basis not in ('X', 'Z'): raise ConfigError(f'basis must be X or Z (got {self.basis!r})')
        if self.workers < 1: raise ConfigError('workers must be >= 1')
        if self.warmup < 0: raise ConfigError('warmup must be >= 0')
        if self.baseline_trials and self.baseline_trials < 5: raise ConfigError('baseline trials must be 0 or >= 5')
        if self.progress_mode not in ('plain', 'rich'): raise ConfigError(f'unknown progress mode {self.progress_mode!r}')
        try: self.decoder.peel_mode()
        except ValueError: raise ConfigError(f'unknown peel mode {self.decoder.mode!r}') from None
        try: self.decoder.peel_predicate()
        except ValueError: raise ConfigError(f'unknown peel predicate {self.decoder.predicate!r}') from None
        if self.mode == 'stream':
            try: StreamingConfig(total_rounds=self.rounds, window_rounds=self.window_rounds,
                                 commit_rounds=self.commit_rounds).validate()
            except ValueError as e: raise ConfigError(str(e)) from None
        return self

    def as_dict(self) -> dict:
        """Config for reports; output plumbing is left out so reports stay byte-identical across runs."""
        d = asdict(self)
        for k in ('out', 'json_logs', 'events_file', 'progress_mode'):
            d.pop(k, None)
        return d


_INT = {'type': 'integer'}
_BOOL = {'type': 'boolean'}
_OPT_STR = {'type': ['string', 'null']}

_DECODER_SCHEMA: Dict[str, Any] = {
    'type': 'object',
    'additionalProperties': False,
    'properties': {
        'mode': {'enum': [m.value for m in PeelMode]},
        'predicate': {'enum': [m.value for m in PeelPredicate]},
        'pair_max_weight': {'type': 'integer', 'minimum': 1},
        'pair_top_k': {'type': 'integer', 'minimum': 1},
        'bp_iters': {'type': 'integer', 'minimum': 1},
        'bp_scale': {'type': 'number', 'exclusiveMinimum': 0, 'maximum': 1},
        'osd_sweep_width': {'type': 'integer', 'minimum': 0},
        'use_peel': _BOOL, 'use_pairs': _BOOL,
    },
}

# decoder block key -> argparse dest; use_* keys map onto the inverted --no-* flags
_DECODER_ARGS = {'mode': 'peel_mode', 'predicate': 'peel_predicate', 'pair_max_weight': 'pair_max_weight',
                 'pair_top_k': 'pair_top_k', 'bp_iters': 'bp_iters', 'bp_scale': 'bp_scale',
                 'osd_sweep_width': 'osd_order', 'use_peel': 'no_peel', 'use_pairs': 'no_pairs'}
# deprecated top-level spellings of decoder settings
_FLAT_DECODER_KEYS = {'peel_mode': 'mode', 'pair_max_weight': 'pair_max_weight', 'pair_top_k': 'pair_top_k',
                      'bp_iters': 'bp_iters', 'bp_scale': 'bp_scale', 'osd_order': 'osd_sweep_width'}

CONFIG_SCHEMA: Dict[str, Any] = {
    '$schema': 'https://json-schema.org/draft/2020-12/schema',
    'title': 'bbpeel experiment config',
    'type': 'object',
    'required': ['schema'],
    'additionalProperties': False,
    'properties': {
        'schema': {'const': SCHEMA_VERSION},
        'code': {'type': 'string', 'minLength': 1},
        'code_spec': _OPT_STR,
        'dem_file': _OPT_STR,
        'rounds': {'type': 'integer', 'minimum': 1},
        'p': {'type': 'number', 'minimum': 0, 'maximum': 0.1},
        'p_grid': {'oneOf': [
            {'type': 'array', 'minItems': 1, 'items': {'type': 'number', 'minimum': 0, 'maximum': 0.1}},
            {'type': 'string', 'minLength': 1}, {'type': 'null'}]},
        'shots': {'type': 'integer', 'minimum': 1},
        'seed': {'type': 'integer', 'minimum': 0},
        'basis': {'enum': ['X', 'Z']},
        'opposite_basis_noise': _BOOL,
        'decoder': _DECODER_SCHEMA,
        # deprecated aliases of the decoder block
        **{flat: _DECODER_SCHEMA['properties'][key] for flat, key in _FLAT_DECODER_KEYS.items()},
        'no_peel': _BOOL, 'no_pairs': _BOOL, 'compare_bp': _BOOL,
        'workers': {'type': 'integer', 'minimum': 1},
        'warmup': {'type': 'integer', 'minimum': 0},
        'window_rounds': {'type': 'integer', 'minimum': 1},
        'commit_rounds': {'type': 'integer', 'minimum': 1},
        'ratio': _BOOL,
        'baseline_trials': {'type': 'integer', 'minimum': 0},
        'fit_grid': _BOOL, 'mode_study': _BOOL,
        'ds_bound': {'type': 'integer', 'minimum': 1},
        'crosscheck': _BOOL, 'strict': _BOOL, 'per_shot': _BOOL, 'check': _BOOL, 'json_logs': _BOOL,
        'out': _OPT_STR, 'events_file': _OPT_STR,
        'progress': {'enum': ['plain', 'rich']},
        'report': {'enum': ['json', 'md', None]},
    },
}


def validate_config(data: dict) -> dict:
    """Validate a loaded config mapping against CONFIG_SCHEMA; ConfigError on failure."""
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = '/'.join(str(x) for x in e.absolute_path) or '<root>'
        raise ConfigError(f'config {where}: {e.message}') from e
    return data


def config_to_args(data: dict) -> Tuple[Dict[str, Any], List[str]]:
    """Map a validated config mapping onto argparse dests; also returns deprecation notes.

    The nested `decoder` block wins over the deprecated flat decoder keys.
    """
    out: Dict[str, Any] = {}
    notes: List[str] = []
    for k, v in data.items():
        if k in ('schema', 'decoder'):
            continue
        if k in _FLAT_DECODER_KEYS:
            notes.append(f"'{k}' is deprecated; use decoder.{_FLAT_DECODER_KEYS[k]}")
        out[k] = v
    for k, v in (data.get('decoder') or {}).items():
        dest = _DECODER_ARGS[k]
        out[dest] = (not v) if k.startswith('use_') else v
    return out, notes


def _load_config_file(path: str, strict: bool = False) -> dict:
    """JSON (or YAML when PyYAML is importable). Best effort unless strict."""
    if not path or not os.path.exists(path):
        if strict: raise ConfigError(f'config file not found: {path}')
        return {}
    try:
        if path.lower().endswith(('.yml', '.yaml')):
            try:
                import yaml  # type: ignore
                with open(path, 'r', encoding='utf-8') as f: data = yaml.safe_load(f) or {}
                if isinstance(data, dict): return data
            except ImportError:
                if strict: raise ConfigError('YAML config requires PyYAML') from None
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, ValueError) as e:
        if strict: raise ConfigError(f'cannot read config {path}: {e}') from e
        return {}
    if not isinstance(data, dict):
        if strict: raise ConfigError(f'config {path} must hold a mapping')
        return {}
    return data


def _parse_grid(val) -> Optional[List[float]]:
    if val is None or val == '': return None
    if isinstance(val, (list, tuple)): return [float(x) for x in val]
    try: return [float(x) for x in str(val).split(',') if x.strip()]
    except ValueError: raise ConfigError(f'bad p grid {val!r}') from None


# ---------------- Callbacks & events ----------------
class RunCallbacks:
    """Interface for CLI / embedding progress integration (all optional)."""
    def log(self, message: str): ...  # pragma: no cover - interface stub
    def phase(self, phase: str, pct: int): ...
    def progress(self, done: int, total: int): ...
    def is_canceled(self) -> bool: return False  # cooperative cancel poll


class RichCallbacks(RunCallbacks):  # pragma: no cover - UI layer exercised indirectly
    def __init__(self):
        self._rich_available = False
        self._progress = None
        self._tasks: Dict[str, Any] = {}
        self._current: Optional[str] = None
        try:
            from rich.progress import Progress, BarColumn, TextColumn, TimeElapsedColumn
            self._Progress = Progress
            self._columns = [
                TextColumn("[bold cyan]{task.fields[phase]:>18}[/]"),
                BarColumn(),
                TextColumn("{task.percentage:>5.1f}%"),
                TimeElapsedColumn(),
                TextColumn("[green]{task.fields[extra]}[/]"),
            ]
            self._rich_available = True
        except Exception:
            pass
    def start(self):
        if self._rich_available:
            self._progress = self._Progress(*self._columns, transient=False)
            self._progress.start()
    def stop(self):
        if self._progress:
            try: self._progress.stop()
            except Exception: pass
    def log(self, message: str):
        if self._progress:
            try: self._progress.console.print(message, markup=False, highlight=False); return
            except Exception: pass
        print(message)
    def _ensure_task(self, phase: str):
        if not self._progress: return
        if phase not in self._tasks:
            try: self._tasks[phase] = self._progress.add_task(description="", total=100, phase=phase, extra="")
            except Exception: pass
    def phase(self, phase: str, pct: int):
        self._current = phase
        if not self._progress: return
        self._ensure_task(phase)
        tid = self._tasks.get(phase)
        if tid is not None:
            try: self._progress.update(tid, completed=max(0, min(100, pct)))
            except Exception: pass
    def progress(self, done: int, total: int):
        if not self._progress or self._current is None: return
        tid = self._tasks.get(self._current)
        if tid is not None and total:
            try: self._progress.update(tid, completed=100.0 * done / total, extra=f'{done}/{total}')
            except Exception: pass


def _invoke(cb, name: str, *a):
    if cb is None: return
    fn = getattr(cb, name, None)
    if callable(fn):
        try: fn(*a)
        except Exception: pass


def _canceled(cb) -> bool:
    fn = getattr(cb, 'is_canceled', None)
    try: return bool(fn()) if callable(fn) else False
    except Exception: return False


class EventLog:
    """NDJSON event envelope. Silent unless json_logs or events_file is set."""

    def __init__(self, json_logs: bool = False, events_file: Optional[str] = None, callbacks: Optional[RunCallbacks] = None):
        self.json_logs = json_logs
        self.events_file = events_file
        self.callbacks = callbacks
        self.run_id = uuid.uuid4().hex
        self.seq = 0
        self.tool_version = _tool_version()

    @property
    def enabled(self) -> bool:
        return bool(self.json_logs or self.events_file)

    def __call__(self, event: str, **data) -> Optional[dict]:
        if not self.enabled:
            return None
        self.seq += 1
        payload = {
            'event': event,
            'ts': datetime.now(timezone.utc).isoformat(),
            'seq': self.seq,
            'run_id': self.run_id,
            'schema_version': SCHEMA_VERSION,
            'tool_version': self.tool_version,
            **data,
        }
        try: line = json.dumps(payload, default=_json_default)
        except Exception: return None
        if self.json_logs:
            _invoke(self.callbacks, 'log', line)
        if self.events_file:
            try:
                with open(self.events_file, 'a', encoding='utf-8') as ef:
                    ef.write(line + '\n')
            except Exception:
                pass
        return payload


def _emit(events: Optional[EventLog], event: str, **data):
    if events is not None:
        events(event, **data)


class _Phase:
    """phase_start / phase_end events plus the callbacks phase bar; records elapsed seconds."""
    def __init__(self, name: str, callbacks, events, timings: Optional[Dict[str, float]] = None):
        self.name, self.callbacks, self.events, self.timings = name, callbacks, events, timings
        self.extra: Dict[str, Any] = {}
    def __enter__(self):
        self.t0 = time.perf_counter()
        _invoke(self.callbacks, 'phase', self.name, 0)
        _emit(self.events, 'phase_start', phase=self.name)
        return self
    def __exit__(self, exc_type, exc, tb):
        dt = round(time.perf_counter() - self.t0, 3)
        if self.timings is not None: self.timings[self.name] = dt
        if exc_type is None:
            _invoke(self.callbacks, 'phase', self.name, 100)
            _emit(self.events, 'phase_end', phase=self.name, seconds=dt, **self.extra)
        return False


# ---------------- Code / DEM resolution ----------------
def resolve_code(cfg: ExperimentConfig) -> BBCode:
    if cfg.code_spec:
        return parse_code_spec(cfg.code_spec)
    if os.path.isfile(cfg.code):
        codes = load_code_specs(cfg.code)
        if not codes: raise ConfigError(f'no code specs in {cfg.code}')
        return codes[0]
    try: return get_code(cfg.code)
    except KeyError as e: raise ConfigError(str(e.args[0] if e.args else e)) from None


def build_experiment_dem(code: BBCode, rounds: int, p: float, basis: str = 'Z', opposite_basis_noise: bool = False,
                         strict: bool = False, events: Optional[EventLog] = None,
                         log: Optional[Callable[[str], None]] = None) -> Dem:
    circuit = build_memory_circuit(code, rounds, basis, NoiseModel(p, opposite_basis_noise=opposite_basis_noise))
    dem = build_dem(circuit, strict=strict, log=log)
    if events is not None and events.enabled:
        events('dem_built', code=code.name, T=rounds, p=p, faults=len(dem.faults), detectors=dem.num_detectors,
               observables=dem.num_observables, expected=dem.expected_faults, dem_hash=dem.content_hash())
        if dem.count_ok is False:
            events('count_mismatch', expected=dem.expected_faults, actual=len(dem.faults))
    return dem


def _dem_for(cfg: ExperimentConfig, code: Optional[BBCode], p: float, events, log, rounds: Optional[int] = None) -> Dem:
    if cfg.dem_file:
        with open(cfg.dem_file, 'r', encoding='utf-8') as f:
            return import_dem(f.read())
    return build_experiment_dem(code, rounds or cfg.rounds, p, cfg.basis, cfg.opposite_basis_noise, cfg.strict, events, log)


def _out_path(cfg: ExperimentConfig, name: str) -> Optional[str]:
    if not cfg.out: return None
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


# ---------------- Shot loop ----------------
@dataclass(frozen=True)
class ShotRecord:
    shot: int
    phase: str
    peeled: int
    residual_w: int
    obs_pred: int
    obs_true: int
    ns: int = 0

    @property
    def fail(self) -> bool:
        return self.obs_pred != self.obs_true


def bp_only(decoder: DecoderConfig) -> DecoderConfig:
    """The comparison arm: same BP/OSD knobs, peeling and pair search switched off."""
    return dataclasses.replace(decoder, use_peel=False, use_pairs=False)


def _decode_shots(src: ShotSource, dec: PeelDecoder, seed: int, start: int, stop: int) -> List[ShotRecord]:
    out: List[ShotRecord] = []
    clock = time.perf_counter_ns
    for i in range(start, stop):
        shot = src.shot(seed, i)
        t0 = clock()
        res = dec.decode_active(shot.syndrome)
        dt = clock() - t0
        out.append(ShotRecord(i, res.phase.value, res.peel_stats.peeled, res.residual_after_peel,
                              res.predicted_observables, shot.true_observables, dt))
    return out


_ARM: Optional[Tuple[ShotSource, PeelDecoder]] = None


def _init_arm(dem: Dem, decoder: DecoderConfig) -> None:
    global _ARM
    _ARM = (ShotSource(dem), PeelDecoder(dem, decoder))


def _decode_span(span: Tuple[int, int, int]) -> List[ShotRecord]:
    src, dec = _ARM  # type: ignore[misc]
    return _decode_shots(src, dec, *span)


def run_arm(dem: Dem, decoder: DecoderConfig, shots: int, seed: int = 0, workers: int = 1,
            callbacks: Optional[RunCallbacks] = None, start: int = 0) -> List[ShotRecord]:
    """Decode shots start..start+shots-1. Shot i depends only on (seed, i), so results do not depend on workers."""
    out: List[ShotRecord] = []
    stop = start + shots
    if workers > 1 and shots >= 4 * workers:
        chunk = max(64, shots // (workers * 8))
        spans = [(seed, a, min(a + chunk, stop)) for a in range(start, stop, chunk)]
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_arm, initargs=(dem, decoder)) as ex:
            futs = [ex.submit(_decode_span, s) for s in spans]
            for fut in futs:
                if _canceled(callbacks):
                    for f in futs: f.cancel()
                    raise Canceled('run canceled')
                out.extend(fut.result())
                _invoke(callbacks, 'progress', len(out), shots)
        return out
    src = ShotSource(dem); dec = PeelDecoder(dem, decoder)
    step = max(1, shots // 100)
    for a in range(start, stop, step):
        if _canceled(callbacks):
            raise Canceled('run canceled')
        out.extend(_decode_shots(src, dec, seed, a, min(a + step, stop)))
        _invoke(callbacks, 'progress', len(out), shots)
    return out


# ---------------- Reports ----------------
@dataclass
class LerReport:
    code: str
    p: float
    rounds: int
    arm: str
    shots: int
    failures: int
    ler: float
    interval: Tuple[float, float]
    ler_per_cycle: float
    cycle_interval: Tuple[float, float]
    phase_fractions: Dict[str, float]
    full_clear: int = 0           # shots with nothing left after peeling
    dem_hash: str = ''

    @property
    def lo(self) -> float: return self.interval[0]
    @property
    def hi(self) -> float: return self.interval[1]

    def overlaps(self, other: 'LerReport') -> bool:
        return self.lo <= other.hi and other.lo <= self.hi

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatencyReport:
    arm: str
    p: float
    shots: int
    percentiles_ns: Dict[str, float]
    alloc_free: Optional[bool] = None
    speedup: Optional[float] = None        # BP-only p50 / greedy p50
    samples_ns: List[int] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        d = asdict(self); d.pop('samples_ns', None)
        return d


def summarize_arm(records: Sequence[ShotRecord], code: str, p: float, rounds: int, arm: str, dem_hash: str = '') -> LerReport:
    shots = len(records)
    failures = sum(r.fail for r in records)
    lo, hi = wilson_interval(failures, shots)
    ler = failures / shots if shots else 0.0
    counts = {'peel': 0, 'pair': 0, 'bp': 0}
    for r in records:
        counts[r.phase] = counts.get(r.phase, 0) + 1
    fractions = {k: (v / shots if shots else 0.0) for k, v in counts.items()}
    full = sum(1 for r in records if r.residual_w == 0)
    return LerReport(code, p, rounds, arm, shots, failures, ler, (lo, hi), per_cycle(ler, rounds),
                     (per_cycle(lo, rounds), per_cycle(hi, rounds)), fractions, full, dem_hash)


def latency_of(records: Sequence[ShotRecord], arm: str, p: float) -> LatencyReport:
    ns = [r.ns for r in records]
    return LatencyReport(arm, p, len(ns), percentiles(ns), samples_ns=ns)


def write_ler_csv(reports: Sequence[LerReport], path: str) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        wr = csv.writer(f)
        wr.writerow(['code', 'p', 'T', 'arm', 'shots', 'failures', 'ler', 'ler_lo', 'ler_hi', 'ler_cycle',
                     'peel_frac', 'pair_frac', 'bp_frac'])
        for r in reports:
            fr = r.phase_fractions
            wr.writerow([r.code, r.p, r.rounds, r.arm, r.shots, r.failures, f'{r.ler:.6g}', f'{r.lo:.6g}',
                         f'{r.hi:.6g}', f'{r.ler_per_cycle:.6g}', f"{fr.get('peel', 0):.4f}",
                         f"{fr.get('pair', 0):.4f}", f"{fr.get('bp', 0):.4f}"])


def write_shot_csv(records: Sequence[ShotRecord], path: str) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        wr = csv.writer(f)
        wr.writerow(['shot', 'phase', 'peeled', 'residual_w', 'obs_pred', 'obs_true', 'fail'])
        for r in records:
            wr.writerow([r.shot, r.phase, r.peeled, r.residual_w, r.obs_pred, r.obs_true, int(r.fail)])


def write_latency_csv(reports: Sequence[LatencyReport], path: str) -> None:
    keys = sorted({k for r in reports for k in r.percentiles_ns}, key=lambda s: float(s[1:]))
    with open(path, 'w', newline='', encoding='utf-8') as f:
        wr = csv.writer(f)
        wr.writerow(['arm', 'p', 'shots'] + [f'{k}_ns' for k in keys] + ['alloc_free', 'speedup'])
        for r in reports:
            wr.writerow([r.arm, r.p, r.shots] + [f'{r.percentiles_ns.get(k, float("nan")):.0f}' for k in keys]
                        + ['' if r.alloc_free is None else int(r.alloc_free),
                           '' if r.speedup is None else f'{r.speedup:.3f}'])


# ---------------- Experiments ----------------
@dataclass
class SweepResult:
    ler: List[LerReport]
    latency: List[LatencyReport]
    dem_hashes: Dict[str, str]
    records: Dict[str, List[ShotRecord]] = field(default_factory=dict, repr=False)   # "<p>/<arm>" -> shots
    timings: Dict[str, float] = field(default_factory=dict)

    def arm(self, name: str) -> List[LerReport]:
        return [r for r in self.ler if r.arm == name]


def run_sweep(cfg: ExperimentConfig, callbacks: Optional[RunCallbacks] = None,
              events: Optional[EventLog] = None) -> SweepResult:
    """For each p: sample, decode with greedy (and BP-only when compare_bp), record failures, phases and timings."""
    cfg.validate()
    log = lambda m: _invoke(callbacks, 'log', m)
    code = None if cfg.dem_file else resolve_code(cfg)
    result = SweepResult([], [], {})
    grid = cfg.grid()
    for p in grid:
        with _Phase(f'dem p={p:g}', callbacks, events, result.timings):
            dem = _dem_for(cfg, code, p, events, log)
        name = code.name if code is not None else str(dem.provenance.get('code', 'dem'))
        rounds = int(dem.provenance.get('T', cfg.rounds))
        h = dem.content_hash(); result.dem_hashes[repr(p)] = h
        arms = [('greedy', cfg.decoder)]
        if cfg.compare_bp or cfg.mode in BP_MODES:
            arms.append(('bp', bp_only(cfg.decoder)))
        lat: Dict[str, LatencyReport] = {}
        for arm, dcfg in arms:
            with _Phase(f'{arm} p={p:g}', callbacks, events, result.timings) as ph:
                recs = run_arm(dem, dcfg, cfg.shots, cfg.seed, cfg.workers, callbacks)
                rep = summarize_arm(recs, name, p, rounds, arm, h)
                ph.extra = {'failures': rep.failures, 'ler': rep.ler, 'arm': arm}
            result.ler.append(rep)
            lat[arm] = latency_of(recs, arm, p); result.latency.append(lat[arm])
            if cfg.per_shot: result.records[f'{p!r}/{arm}'] = recs
            log(f"[{arm}] {name} p={p:g}: LER {rep.ler:.4%} [{rep.lo:.4%}, {rep.hi:.4%}]  "
                f"per-cycle {rep.ler_per_cycle:.4%}  peel {rep.phase_fractions.get('peel', 0):.1%}")
        if 'bp' in lat:
            g50 = lat['greedy'].percentiles_ns.get('p50') or 0.0
            b50 = lat['bp'].percentiles_ns.get('p50') or 0.0
            lat['greedy'].speedup = (b50 / g50) if g50 > 0 else None
    return result


@dataclass
class KunlunReport:
    p: float
    rounds: int
    shots: int
    greedy: LerReport
    bp: LerReport
    ordering_ok: bool
    dem_hash: str = ''

    def as_dict(self) -> dict:
        return {'p': self.p, 'T': self.rounds, 'shots': self.shots, 'greedy': self.greedy.as_dict(),
                'bp': self.bp.as_dict(), 'ordering_ok': self.ordering_ok, 'dem_hash': self.dem_hash}


def kunlun_repro(shots: int, seed: int = 0, p: Optional[float] = None, rounds: Optional[int] = None,
                 decoder: Optional[DecoderConfig] = None, workers: int = 1, callbacks: Optional[RunCallbacks] = None,
                 events: Optional[EventLog] = None) -> KunlunReport:
    """Simulated [[18,4,4]] memory experiment at the registry noise point; greedy vs BP-OSD per-cycle LER."""
    entry = REGISTRY['kunlun-18']
    p0, t0 = entry.noise_point or (0.003, 12)
    p = p0 if p is None else p; rounds = t0 if rounds is None else rounds
    cfg = ExperimentConfig(mode='repro-kunlun', code=entry.name, rounds=rounds, p=p, shots=shots, seed=seed,
                           decoder=decoder or DecoderConfig(), compare_bp=True, workers=workers)
    res = run_sweep(cfg, callbacks, events)
    greedy, bp = res.arm('greedy')[0], res.arm('bp')[0]
    ok = greedy.ler_per_cycle <= bp.ler_per_cycle or greedy.overlaps(bp)
    return KunlunReport(p, rounds, shots, greedy, bp, ok, greedy.dem_hash)


def _time_arm(dec: PeelDecoder, shots) -> List[int]:
    clock = time.perf_counter_ns
    out = []
    for s in shots:
        t0 = clock(); dec.decode_active(s.syndrome); out.append(clock() - t0)
    return out


def bench(cfg: ExperimentConfig, callbacks: Optional[RunCallbacks] = None,
          events: Optional[EventLog] = None) -> List[LatencyReport]:
    """Single-worker latency of greedy and BP-only arms on one shot stream, after warmup."""
    cfg.validate()
    log = lambda m: _invoke(callbacks, 'log', m)
    code = None if cfg.dem_file else resolve_code(cfg)
    p = cfg.grid()[0]
    with _Phase('dem', callbacks, events):
        dem = _dem_for(cfg, code, p, events, log)
    src = ShotSource(dem)
    stream = [src.shot(cfg.seed, i) for i in range(cfg.warmup + cfg.shots)]
    warm, timed = stream[:cfg.warmup], stream[cfg.warmup:]
    with _Phase('bench greedy', callbacks, events):
        greedy = PeelDecoder(dem, cfg.decoder)
        for s in warm: greedy.decode_active(s.syndrome)
        g_ns = _time_arm(greedy, timed)
        blocks = hot_path_blocks(greedy, [s.syndrome for s in timed[:ALLOC_CHECK_SHOTS]], cfg.decoder.peel_mode())
        log(f'[bench] peel hot path: {blocks} live blocks left after {min(len(timed), ALLOC_CHECK_SHOTS)} shots')
        g = LatencyReport('greedy', p, len(g_ns), percentiles(g_ns), blocks == 0, None, g_ns)
    out = [g]
    with _Phase('bench bp', callbacks, events):
        bp = PeelDecoder(dem, bp_only(cfg.decoder))
        for s in warm: bp.decode_active(s.syndrome)
        b_ns = _time_arm(bp, timed)
        out.append(LatencyReport('bp', p, len(b_ns), percentiles(b_ns), None, None, b_ns))
    g50, b50 = g.percentiles_ns['p50'], out[1].percentiles_ns['p50']
    g.speedup = b50 / g50 if g50 > 0 else None
    return out


@dataclass(frozen=True)
class PeelMeasurement:
    mode: str
    shots: int
    cleared: int
    kappa: KappaResult
    predicate: str = 'decoder'

    @property
    def rate(self) -> float:
        return self.cleared / self.shots if self.shots else 0.0

    def as_dict(self) -> dict:
        lo, hi = wilson_interval(self.cleared, self.shots)
        return {'mode': self.mode, 'predicate': self.predicate, 'shots': self.shots, 'cleared': self.cleared,
                'rate': self.rate, 'interval': [lo, hi],
                'kappa': {'pure': self.kappa.pure, 'total': self.kappa.total, 'value': self.kappa.kappa}}


def measure_peel(dem: Dem, shots: int, seed: int = 0, mode: str = 'queue', trace: bool = True,
                 callbacks: Optional[RunCallbacks] = None, predicate: str = 'decoder') -> PeelMeasurement:
    """Full-clear rate of peeling alone, with unblock events tallied for kappa (queue mode traces).

    predicate='truth' judges ambiguity against each shot's triggered faults instead of the syndrome alone.
    """
    use_truth = PeelPredicate(predicate) is PeelPredicate.TRUTH
    src = ShotSource(dem); dec = PeelDecoder(dem)
    cleared = pure = total = 0
    step = max(1, shots // 100)
    for i in range(shots):
        if i % step == 0:
            if _canceled(callbacks): raise Canceled('run canceled')
            _invoke(callbacks, 'progress', i, shots)
        tr: Optional[list] = [] if trace else None
        shot = src.shot(seed, i)
        _, residual, _ = dec.peel_active(shot.syndrome, mode, tr, shot.triggered if use_truth else None)
        cleared += not residual
        if tr:
            total += len(tr); pure += sum(1 for ev in tr if ev.pure)
    return PeelMeasurement(PeelMode(mode).value, shots, cleared, KappaResult(pure, total), PeelPredicate(predicate).value)


@dataclass(frozen=True)
class ModeStudyRow:
    predicate: str
    mode: str
    rate: float
    cleared: int
    shots: int
    A_eff: Optional[float]


def peel_mode_study(dem: Dem, code: BBCode, T: int, p: float, params: TheoryParams, shots: int, seed: int = 0,
                    callbacks: Optional[RunCallbacks] = None) -> List[ModeStudyRow]:
    """Full-clear rate and effective collision factor for every (predicate, mode) on one shot stream."""
    rows = []
    for pred in PeelPredicate:
        for mode in PeelMode:
            m = measure_peel(dem, shots, seed, mode.value, trace=False, callbacks=callbacks, predicate=pred.value)
            a = a_eff_of(GammaMeasurement(code.n, p, T, m.rate, shots), params) if 0.0 < m.rate < 1.0 else None
            rows.append(ModeStudyRow(pred.value, mode.value, m.rate, m.cleared, shots, a))
    return rows


def mode_ordering_holds(rows: Sequence[ModeStudyRow]) -> bool:
    """Single pass <= queue <= batch within each predicate."""
    order = [m.value for m in PeelMode]
    for pred in PeelPredicate:
        rates = {r.mode: r.cleared for r in rows if r.predicate == pred.value}
        seq = [rates[m] for m in order if m in rates]
        if any(a > b for a, b in zip(seq, seq[1:])):
            return False
    return True


# ---------------- Verb runners ----------------
@dataclass
class VerbOutcome:
    results: Dict[str, Any]
    checks: Dict[str, bool] = field(default_factory=dict)
    dem_hash: Optional[str] = None
    dem_hashes: Optional[Dict[str, str]] = None
    files: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)


def _registry_entry(code: BBCode):
    return REGISTRY.get(code.name)


def _verb_code(cfg, callbacks, events) -> VerbOutcome:
    log = lambda m: _invoke(callbacks, 'log', m)
    code = resolve_code(cfg)
    res: Dict[str, Any] = dict(code.describe()); res['spec'] = format_code_spec(code)
    checks: Dict[str, bool] = {}
    with _Phase('stopping distance', callbacks, events):
        for kind in ('checks', 'relations'):
            ds = stopping_distance(syndrome_code_generator(code, cfg.basis, kind), cfg.ds_bound, seed=cfg.seed)
            res[f'd_s_{kind}'] = {'value': ds.value, 'exact': ds.exact, 'method': ds.method}
    if code.n <= 32:
        res['min_logical_weight'] = min_logical_weight(code, cfg.basis, max_weight=min(8, code.n))
    entry = _registry_entry(code)
    if entry is not None:
        res['registry'] = asdict(entry)
        checks['registry_nk'] = (code.n, code.k) == (entry.n, entry.k)
        rel = res['d_s_relations']
        if entry.d_s is not None and rel['exact'] and rel['value'] is not None:
            checks['registry_d_s'] = rel['value'] == entry.d_s
    log(f"{res['spec']}  [[{code.n},{code.k},{code.declared_d if code.declared_d is not None else '?'}]] w={code.w}")
    log(f"  d_S(checks)={res['d_s_checks']['value']}  d_S(relations)={res['d_s_relations']['value']}"
        + (f"  min logical weight={res['min_logical_weight']}" if 'min_logical_weight' in res else ''))
    return VerbOutcome(res, checks)


def _verb_circuit(cfg, callbacks, events) -> VerbOutcome:
    log = lambda m: _invoke(callbacks, 'log', m)
    code = resolve_code(cfg)
    p = cfg.grid()[0]
    circ = build_memory_circuit(code, cfg.rounds, cfg.basis, cfg.noise(p))
    res = {'code': code.name, 'T': cfg.rounds, 'p': p, 'basis': cfg.basis, 'qubits': circ.num_qubits,
           'measurements': circ.num_measurements, 'detectors': circ.num_detectors,
           'observables': circ.num_observables, 'noisy_cnots_per_round': circ.noisy_cnot_count(),
           'schedule': circ.schedule.describe(), 'schedule_digest': circ.schedule.digest()}
    files = []
    path = _out_path(cfg, 'circuit.stim')
    if path:
        with open(path, 'w', encoding='utf-8') as f: f.write(circ.to_text())
        files.append(path)
    checks = {'detector_count': circ.num_detectors == (code.n // 2) * (cfg.rounds + 1)}
    log(f"circuit {code.name} T={cfg.rounds}: {circ.num_qubits} qubits, {circ.num_measurements} measurements, "
        f"{circ.num_detectors} detectors, schedule {res['schedule']}")
    return VerbOutcome(res, checks, files=files)


def _verb_dem(cfg, callbacks, events) -> VerbOutcome:
    log = lambda m: _invoke(callbacks, 'log', m)
    code = resolve_code(cfg)
    p = cfg.grid()[0]
    timings: Dict[str, float] = {}
    with _Phase('dem', callbacks, events, timings):
        dem = _dem_for(cfg, code, p, events, log)
    with _Phase('fault graph', callbacks, events, timings):
        graph = fault_graph(dem)
    h = dem.content_hash()
    hist = dem.weight_histogram()
    nf = len(dem.faults)
    res: Dict[str, Any] = {'code': code.name, 'T': cfg.rounds, 'p': p, 'faults': nf, 'expected_faults': dem.expected_faults,
                           'detectors': dem.num_detectors, 'observables': dem.num_observables,
                           'undetectable': len(dem.undetectable), 'weight_histogram': {str(k): v for k, v in hist.items()},
                           'weight2_fraction': (hist.get(2, 0) / nf) if nf else 0.0,
                           'weight2_fraction_analytic': weight2_fraction(code.w, cfg.rounds),
                           'mean_degree': graph.mean_degree, 'components': graph.num_components,
                           'degree_histogram': {str(k): v for k, v in graph.degree_histogram().items()},
                           'dem_hash': h}
    checks: Dict[str, bool] = {'graph_symmetric': graph.is_symmetric()}
    if dem.count_ok is not None: checks['fault_count'] = bool(dem.count_ok)
    checks['detector_count'] = dem.num_detectors == (code.n // 2) * (cfg.rounds + 1)
    entry = _registry_entry(code)
    if entry is not None:
        checks['connectivity'] = (graph.num_components == 1) == entry.connected
    files = []
    for name, writer in (('dem.dem', None), ('degrees.csv', 'deg')):
        path = _out_path(cfg, name)
        if not path: continue
        if writer is None:
            with open(path, 'w', encoding='utf-8') as f: f.write(export_dem(dem))
        else:
            write_degree_csv(graph, dem, path)
        files.append(path)
    if p > 0:
        with _Phase('alpha', callbacks, events, timings):
            stats = measure_alpha(dem, cfg.shots, cfg.seed, n=code.n, T=cfg.rounds, p=p)
        res['sampler'] = stats.as_dict()
        if code.w == 3 and stats.alpha_deviates:
            _emit(events, 'alpha_deviation', alpha=stats.alpha, reference=ALPHA_REFERENCE)
            log(f'[alpha] measured {stats.alpha:.4f} deviates from {ALPHA_REFERENCE}; downstream theory uses the measured value')
        path = _out_path(cfg, 'sampler_stats.csv')
        if path: write_sampler_stats_csv([stats], path); files.append(path)
    if cfg.p_grid is not None and len(cfg.grid()) >= 2:
        slope, intercept, r2 = fit_lambda_linearity(
            lambda q: build_experiment_dem(code, cfg.rounds, q, cfg.basis, cfg.opposite_basis_noise), cfg.grid())
        res['lambda_fit'] = {'slope': slope, 'intercept': intercept, 'r2': r2}
        checks['lambda_linear'] = r2 >= 0.999
    if cfg.crosscheck:
        circ = build_memory_circuit(code, cfg.rounds, cfg.basis, cfg.noise(p))
        ref = dem_from_stim(circ)
        ours = {(f.detectors, f.observables) for f in dem.faults}
        theirs = {(f.detectors, f.observables) for f in ref.faults}
        res['crosscheck'] = {'stim_faults': len(ref.faults), 'only_ours': len(ours - theirs), 'only_stim': len(theirs - ours)}
        checks['stim_crosscheck'] = ours == theirs
    log(f"dem {code.name} T={cfg.rounds} p={p:g}: {nf} faults (expected {dem.expected_faults}), "
        f"{dem.num_detectors} detectors, mean degree {graph.mean_degree:.2f}, {graph.num_components} component"
        f"{'' if graph.num_components == 1 else 's'}, hash {h[:12]}")
    return VerbOutcome(res, checks, dem_hash=h, files=files, timings=timings)


def _sweep_outcome(cfg, res: SweepResult) -> VerbOutcome:
    files = []
    path = _out_path(cfg, 'sweep.csv')
    if path: write_ler_csv(res.ler, path); files.append(path)
    path = _out_path(cfg, 'latency.csv')
    if path: write_latency_csv(res.latency, path); files.append(path)
    if cfg.per_shot:
        for key, recs in res.records.items():
            p_txt, arm = key.split('/')
            path = _out_path(cfg, f'shots_{arm}_p{p_txt}.csv')
            if path: write_shot_csv(recs, path); files.append(path)
    checks: Dict[str, bool] = {}
    greedy = {r.p: r for r in res.arm('greedy')}
    for r in res.arm('bp'):
        g = greedy.get(r.p)
        if g is not None: checks[f'ci_overlap p={r.p:g}'] = g.overlaps(r)
    out = {'ler': [r.as_dict() for r in res.ler]}
    if len(res.dem_hashes) == 1:
        return VerbOutcome(out, checks, dem_hash=next(iter(res.dem_hashes.values())), files=files, timings=res.timings)
    return VerbOutcome(out, checks, dem_hashes=dict(res.dem_hashes), files=files, timings=res.timings)


def _verb_decode(cfg, callbacks, events) -> VerbOutcome:
    cfg.per_shot = True
    return _sweep_outcome(cfg, run_sweep(cfg, callbacks, events))


def _verb_sweep(cfg, callbacks, events) -> VerbOutcome:
    return _sweep_outcome(cfg, run_sweep(cfg, callbacks, events))


def _verb_collisions(cfg, callbacks, events) -> VerbOutcome:
    log = lambda m: _invoke(callbacks, 'log', m)
    code = resolve_code(cfg)
    p = cfg.grid()[0]
    timings: Dict[str, float] = {}
    dem = _dem_for(cfg, code, p, events, log)
    graph = fault_graph(dem)
    with _Phase('collisions', callbacks, events, timings):
        rep = classify_collisions(dem, graph, workers=cfg.workers)
    files = []
    path = _out_path(cfg, 'collisions.csv')
    if path: write_collision_csv(rep, path); files.append(path)
    checks: Dict[str, bool] = {}
    entry = _registry_entry(code)
    if entry is not None and entry.ref_a0 is not None:
        checks['A0_reference'] = abs(rep.A0 - entry.ref_a0) <= 0.015
    log(f'collisions {code.name}: {rep.total_pairs} pairs, A0={rep.A0:.4f}, '
        + ', '.join(f'shared-{k} {r:.1%}' for k, r in rep.bucket_rates().items()))
    return VerbOutcome({'code': code.name, 'collisions': rep.as_dict(), 'mean_degree': graph.mean_degree}, checks,
                       dem_hash=dem.content_hash(), files=files, timings=timings)


def _verb_theory(cfg, callbacks, events) -> VerbOutcome:
    log = lambda m: _invoke(callbacks, 'log', m)
    code = resolve_code(cfg)
    p = cfg.grid()[0]
    timings: Dict[str, float] = {}
    dem = _dem_for(cfg, code, p, events, log)
    graph = fault_graph(dem)
    with _Phase('alpha', callbacks, events, timings):
        stats = measure_alpha(dem, cfg.shots, cfg.seed, n=code.n, T=cfg.rounds, p=p)
    alpha = stats.alpha if stats.alpha is not None else ALPHA_REFERENCE
    if code.w == 3 and stats.alpha_deviates:
        _emit(events, 'alpha_deviation', alpha=stats.alpha, reference=ALPHA_REFERENCE)
        log(f'[alpha] measured {stats.alpha:.4f} deviates from {ALPHA_REFERENCE}; using the measured value')
    with _Phase('collisions', callbacks, events, timings):
        coll = classify_collisions(dem, graph, workers=cfg.workers)
    params = theory_params(dem, graph, alpha, coll.A0, T=cfg.rounds, n=code.n)
    pred = predict_peel(code.n, p, cfg.rounds, params)
    if not pred.valid and p > 0:
        _emit(events, 'validity_warning', lam=pred.lam, value=pred.value)
        log(f'[theory] lambda={pred.lam:.3f} < 2: the peel prediction is outside its validity range')
    mode = cfg.decoder.peel_mode().value
    predicate = cfg.decoder.peel_predicate().value
    with _Phase('peel', callbacks, events, timings):
        meas = measure_peel(dem, cfg.shots, cfg.seed, mode, trace=(mode == 'queue' and predicate == 'decoder'),
                            callbacks=callbacks, predicate=predicate)
    res: Dict[str, Any] = {'code': code.name, 'T': cfg.rounds, 'p': p, 'sampler': stats.as_dict(),
                           'prediction': asdict(pred), 'peel': meas.as_dict()}
    points = [GammaMeasurement(code.n, p, cfg.rounds, meas.rate, meas.shots)] if 0.0 < meas.rate < 1.0 else []
    if cfg.fit_grid:
        with _Phase('gamma grid', callbacks, events, timings):
            for t, q in tp_grid():
                d2 = build_experiment_dem(code, t, q, cfg.basis, cfg.opposite_basis_noise, events=events)
                m2 = measure_peel(d2, cfg.shots, cfg.seed, mode, trace=False, callbacks=callbacks, predicate=predicate)
                if 0.0 < m2.rate < 1.0:
                    points.append(GammaMeasurement(code.n, q, t, m2.rate, m2.shots))
    if points:
        fit = fit_gamma_eff(points, params)
        res['gamma_fit'] = asdict(fit); res['gamma_points'] = [asdict(m) for m in points]
    study: List[ModeStudyRow] = []
    if cfg.mode_study:
        with _Phase('mode study', callbacks, events, timings):
            study = peel_mode_study(dem, code, cfg.rounds, p, params, cfg.shots, cfg.seed, callbacks)
        res['mode_study'] = [asdict(r) for r in study]
        for r in study:
            log(f'  {r.predicate:>7} {r.mode:>6}: P_peel={r.rate:.4f}  A_eff='
                + ('n/a' if r.A_eff is None else f'{r.A_eff:.3f}'))
    if cfg.baseline_trials:
        with _Phase('random baseline', callbacks, events, timings):
            mean, std, values = random_graph_baseline(dem, cfg.baseline_trials, cfg.seed, workers=cfg.workers)
        res['random_baseline'] = {'mean': mean, 'std': std, 'values': values}
    entry = _registry_entry(code)
    ref: Dict[str, float] = {}
    if code.w == 3: ref['alpha'] = ALPHA_REFERENCE
    if entry is not None:
        if entry.ref_a0 is not None: ref['A0'] = entry.ref_a0
        if entry.ref_dbar is not None: ref['dbar'] = entry.ref_dbar
    block, table = theory_report(params, coll, graph, ref)
    res['theory'] = block
    files = []
    path = _out_path(cfg, 'theory.md')
    if path:
        with open(path, 'w', encoding='utf-8') as f: f.write(table)
        files.append(path)
    path = _out_path(cfg, 'collisions.csv')
    if path: write_collision_csv(coll, path); files.append(path)
    checks: Dict[str, bool] = {}
    if meas.kappa.total: checks['kappa_zero'] = meas.kappa.pure == 0
    if pred.valid: checks['prediction_within_2pp'] = abs(pred.value - meas.rate) <= 0.02
    if study: checks['mode_ordering'] = mode_ordering_holds(study)
    log(f'theory {code.name} T={cfg.rounds} p={p:g}: alpha={alpha:.4f} beta={params.beta:.3g} c={params.c:.4f} '
        f'A0={params.A0:.4f} B={params.B:.3f}')
    log(f'  predicted P_peel={pred.value:.4f} (lambda={pred.lam:.2f}{"" if pred.valid else ", invalid"})  '
        f'measured {meas.rate:.4f}  kappa={meas.kappa}')
    log(table.rstrip())
    return VerbOutcome(res, checks, dem_hash=dem.content_hash(), files=files, timings=timings)


def _verb_stream(cfg, callbacks, events) -> VerbOutcome:
    log = lambda m: _invoke(callbacks, 'log', m)
    code = resolve_code(cfg)
    timings: Dict[str, float] = {}
    files = []
    if cfg.ratio:
        with _Phase('ratio study', callbacks, events, timings):
            rows, summary = ratio_study([code.name], cfg.grid(), cfg.shots, cfg.seed, cfg.window_rounds,
                                        cfg.rounds, cfg.decoder, log=log)
        path = _out_path(cfg, 'streaming_ratio.csv')
        if path: write_ratio_csv(rows, path); files.append(path)
        for r in rows:
            log(f'stream {r.code} p={r.p:g} W={r.W}: LER/cycle {r.ler_cycle:.4%} vs {r.ler_cycle_ref:.4%} '
                f'ratio {"n/a" if r.ratio is None else f"{r.ratio:.3f}"}')
        return VerbOutcome({'rows': [asdict(r) for r in rows], 'summary': summary}, {}, files=files, timings=timings)
    out = {}
    for p in cfg.grid():
        scfg = StreamingConfig(code=code.name, total_rounds=cfg.rounds, p=p, window_rounds=cfg.window_rounds,
                               commit_rounds=cfg.commit_rounds, shots=cfg.shots, seed=cfg.seed, basis=cfg.basis,
                               decoder=cfg.decoder)
        with _Phase(f'stream p={p:g}', callbacks, events, timings):
            rep = stream_decode(code, cfg.rounds, p, scfg, log=log,
                                on_shot=lambda i, _r: _invoke(callbacks, 'progress', i + 1, cfg.shots))
        out[repr(p)] = rep.as_dict()
        log(f'stream {code.name} p={p:g} W={cfg.window_rounds}: LER/cycle {rep.ler_per_cycle:.4%}, '
            f'window peel {rep.peel_fraction:.1%}, all-peeled shots {rep.shot_peel_fraction:.1%}, '
            f'{rep.windows} windows, {rep.uncleared_commits} uncleared commits')
    return VerbOutcome({'stream': out}, {}, timings=timings)


def _verb_bench(cfg, callbacks, events) -> VerbOutcome:
    log = lambda m: _invoke(callbacks, 'log', m)
    reps = bench(cfg, callbacks, events)
    g = reps[0]
    files = []
    path = _out_path(cfg, 'latency.csv')
    if path: write_latency_csv(reps, path); files.append(path)
    for r in reps:
        log(f"[bench] {r.arm}: " + '  '.join(f'{k}={v:.0f}ns' for k, v in r.percentiles_ns.items()))
    log(f"[bench] speedup {'n/a' if g.speedup is None else f'{g.speedup:.1f}x'}  peel alloc-free: {g.alloc_free}")
    checks = {'alloc_free': bool(g.alloc_free), 'speedup_20x': g.speedup is not None and g.speedup >= 20.0}
    return VerbOutcome({'latency': [r.as_dict() for r in reps]}, checks)


def _verb_kunlun(cfg, callbacks, events) -> VerbOutcome:
    log = lambda m: _invoke(callbacks, 'log', m)
    rep = kunlun_repro(cfg.shots, cfg.seed, cfg.p_grid[0] if cfg.p_grid else None, cfg.rounds,
                       cfg.decoder, cfg.workers, callbacks, events)
    log(f'[kunlun] p={rep.p:g} T={rep.rounds}: greedy {rep.greedy.ler_per_cycle:.3%}/cycle '
        f'[{rep.greedy.cycle_interval[0]:.3%}, {rep.greedy.cycle_interval[1]:.3%}]  '
        f'BP-OSD {rep.bp.ler_per_cycle:.3%}/cycle [{rep.bp.cycle_interval[0]:.3%}, {rep.bp.cycle_interval[1]:.3%}]')
    return VerbOutcome(rep.as_dict(), {'ordering': rep.ordering_ok}, dem_hash=rep.dem_hash)


_VERBS: Dict[str, Callable[..., VerbOutcome]] = {
    'code': _verb_code, 'circuit': _verb_circuit, 'dem': _verb_dem, 'decode': _verb_decode, 'sweep': _verb_sweep,
    'theory': _verb_theory, 'collisions': _verb_collisions, 'stream': _verb_stream, 'bench': _verb_bench,
    'repro-kunlun': _verb_kunlun,
}


# ---------------- Repro / plan / report ----------------
_REPRO_FLAGS = (
    ('code_spec', '--code-spec'), ('dem_file', '--dem-file'), ('rounds', '--rounds'), ('p', '--p'),
    ('shots', '--shots'), ('seed', '--seed'), ('basis', '--basis'), ('opposite_basis_noise', '--opposite-basis-noise'),
    ('compare_bp', '--compare-bp'), ('workers', '--workers'), ('warmup', '--warmup'),
    ('window_rounds', '--window-rounds'), ('commit_rounds', '--commit-rounds'), ('ratio', '--ratio'),
    ('baseline_trials', '--baseline-trials'), ('fit_grid', '--fit-grid'), ('mode_study', '--mode-study'),
    ('ds_bound', '--ds-bound'),
    ('crosscheck', '--crosscheck'), ('strict', '--strict'), ('per_shot', '--per-shot'),
)
_REPRO_DECODER_FLAGS = (
    ('mode', '--peel-mode'), ('pair_max_weight', '--pair-max-weight'), ('pair_top_k', '--pair-top-k'),
    ('bp_iters', '--bp-iters'), ('bp_scale', '--bp-scale'), ('osd_sweep_width', '--osd-order'),
    ('predicate', '--peel-predicate'),
)


def _build_repro_command_from_config(cfg: ExperimentConfig) -> List[str]:
    """Reproduction command listing only the settings that differ from defaults."""
    cmd = ["python", "bbpeel.py", cfg.mode]
    base = ExperimentConfig(); dbase = DecoderConfig()
    if not cfg.code_spec and cfg.code != base.code:
        cmd.append(f"--code={cfg.code}")
    for attr, flag in _REPRO_FLAGS:
        val = getattr(cfg, attr)
        if val == getattr(base, attr): continue
        if isinstance(val, bool): cmd.append(flag)
        else: cmd.append(f"{flag}={val}")
    if cfg.p_grid:
        cmd.append(f"--p-grid={','.join(repr(float(x)) for x in cfg.p_grid)}")
    for attr, flag in _REPRO_DECODER_FLAGS:
        val = getattr(cfg.decoder, attr)
        if val != getattr(dbase, attr): cmd.append(f"{flag}={val}")
    if not cfg.decoder.use_peel: cmd.append("--no-peel")
    if not cfg.decoder.use_pairs: cmd.append("--no-pairs")
    return cmd


def _plan(cfg: ExperimentConfig) -> Dict[str, Any]:
    issues: List[str] = []
    needs_bp = cfg.compare_bp or cfg.mode in BP_MODES
    if needs_bp and not _module_available('ldpc'): issues.append('ldpc missing (BP-only arm)')
    if cfg.crosscheck and not _module_available('stim'): issues.append('stim missing (crosscheck)')
    if cfg.progress_mode == 'rich' and not _module_available('rich'): issues.append('rich missing (plain progress)')
    plan: Dict[str, Any] = {'mode': cfg.mode, 'T': cfg.rounds, 'basis': cfg.basis, 'p_grid': cfg.grid(),
                            'shots': cfg.shots, 'seed': cfg.seed, 'workers': cfg.workers,
                            'arms': ['greedy'] + (['bp'] if needs_bp else []), 'peel_mode': cfg.decoder.mode}
    if cfg.dem_file:
        plan['dem_file'] = cfg.dem_file
    else:
        code = resolve_code(cfg)
        plan.update(code=code.name, n=code.n, k=code.k, w=code.w, detectors=(code.n // 2) * (cfg.rounds + 1))
        try: plan['predicted_faults'] = predicted_fault_count(code.n, code.w, cfg.rounds)
        except NonIntegral: plan['predicted_faults'] = None
    plan['issues'] = issues or None
    return plan


def _section(title: str) -> str:
    return f"\n## {title}\n"


def write_report(path: str, fmt: str, summary: Dict[str, Any]) -> str:
    if fmt == 'json':
        with open(path, 'w', encoding='utf-8') as rf:
            json.dump(summary, rf, indent=2, sort_keys=True, default=_json_default)
            rf.write('\n')
        return path
    lines = ["# bbpeel Report\n", "\nGenerated: " + datetime.now(timezone.utc).isoformat() + "\n"]
    lines.append(_section('Overview'))
    lines.append(f"Verb: {summary.get('verb')}\nExit Code: {summary.get('exit_code')}\n"
                 f"Tool Version: {summary.get('tool_version')}\n")
    if summary.get('dem_hash'):
        lines.append(f"DEM hash: `{summary['dem_hash']}`\n")
    for p, h in (summary.get('dem_hashes') or {}).items():
        lines.append(f"- DEM hash p={p}: `{h}`\n")
    res = summary.get('results') or {}
    if res.get('ler'):
        lines.append(_section('Logical Error Rates'))
        lines.append("| p | arm | shots | failures | LER | 95% CI | LER/cycle | peel | pair | bp |\n")
        lines.append("|---|---|---|---|---|---|---|---|---|---|\n")
        for r in res['ler']:
            fr = r['phase_fractions']; lo, hi = r['interval']
            lines.append(f"| {r['p']:g} | {r['arm']} | {r['shots']} | {r['failures']} | {r['ler']:.4%} | "
                         f"[{lo:.4%}, {hi:.4%}] | {r['ler_per_cycle']:.4%} | {fr.get('peel', 0):.1%} | "
                         f"{fr.get('pair', 0):.1%} | {fr.get('bp', 0):.1%} |\n")
    other = {k: v for k, v in res.items() if k != 'ler'}
    if other:
        lines.append(_section('Results'))
        lines.append("```json\n" + json.dumps(other, indent=2, sort_keys=True, default=_json_default) + "\n```\n")
    if summary.get('checks'):
        lines.append(_section('Checks'))
        for name, ok in summary['checks'].items():
            lines.append(f"- {name}: {'PASS' if ok else 'FAIL'}\n")
    if summary.get('timings'):
        lines.append(_section('Timings'))
        for k, v in summary['timings'].items():
            lines.append(f"- {k}: {v}s\n")
    lines.append(_section('Config'))
    lines.append("```json\n" + json.dumps(summary.get('config'), indent=2, sort_keys=True, default=_json_default) + "\n```\n")
    if summary.get('reproduce_command'):
        lines.append(_section('Reproduce'))
        lines.append(f"````bash\n{summary['reproduce_command']}\n````\n")
    with open(path, 'w', encoding='utf-8') as rf:
        rf.write(''.join(lines))
    return path


# ---------------- CLI ----------------
def _build_parser():
    import argparse
    parser = argparse.ArgumentParser(prog='bbpeel', description='Greedy peeling decoder and analysis toolkit for bivariate bicycle codes')
    parser.add_argument('verb', choices=MODES, help='What to run')
    parser.add_argument('--print-repro', action='store_true', help='Print reproduction command for given flags and exit')
    parser.add_argument('--dry-run', action='store_true', help='Validate config and dependencies; show the plan without sampling')
    parser.add_argument('--check', action='store_true', help='Exit 2 when an acceptance check fails')
    parser.add_argument('--code', default='gross-144', help='Registry code name or a file of code specs (first line used)')
    parser.add_argument('--code-spec', default=None, help='Inline code spec "name l m A=<poly> B=<poly>"')
    parser.add_argument('--dem-file', default=None, help='Decode an exported DEM file instead of building one')
    parser.add_argument('--rounds', '-T', type=int, default=12, help='Syndrome-extraction rounds T')
    parser.add_argument('--p', type=float, default=0.001, help='Physical error rate')
    parser.add_argument('--p-grid', default=None, help='Comma-separated p values (overrides --p; repro-kunlun takes its first entry)')
    parser.add_argument('--shots', type=int, default=10_000)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--basis', choices=['X', 'Z'], default='Z', help='Memory basis')
    parser.add_argument('--opposite-basis-noise', action='store_true', help='Also apply noise to the opposite-basis extraction')
    parser.add_argument('--peel-mode', choices=[m.value for m in PeelMode], default='queue')
    parser.add_argument('--peel-predicate', choices=[m.value for m in PeelPredicate], default='decoder',
                        help='Judge peel ambiguity against fully-active faults (decoder) or the fired faults (truth); theory only')
    parser.add_argument('--pair-max-weight', type=int, default=6)
    parser.add_argument('--pair-top-k', type=int, default=60)
    parser.add_argument('--bp-iters', type=int, default=30)
    parser.add_argument('--bp-scale', type=float, default=0.8, help='Min-sum scaling factor')
    parser.add_argument('--osd-order', type=int, default=60, help='OSD-CS sweep width')
    parser.add_argument('--no-peel', action='store_true', help='Skip the peeling phase')
    parser.add_argument('--no-pairs', action='store_true', help='Skip pair enumeration')
    parser.add_argument('--compare-bp', action='store_true', help='Also decode every shot with the BP-only arm')
    parser.add_argument('--workers', type=int, default=1, help='Worker processes for shots / collision pairs')
    parser.add_argument('--warmup', type=int, default=200, help='Warmup shots before bench timing')
    parser.add_argument('--window-rounds', type=int, default=2)
    parser.add_argument('--commit-rounds', type=int, default=1)
    parser.add_argument('--ratio', action='store_true', help='stream: windowed / whole-block LER ratio over the p grid')
    parser.add_argument('--baseline-trials', type=int, default=0, help='theory: random-graph A0 trials (>= 5)')
    parser.add_argument('--fit-grid', action='store_true', help='theory: gamma fit over the 15-point (T, p) grid')
    parser.add_argument('--mode-study', action='store_true', help='theory: full-clear rate and A_eff for every peel mode and predicate')
    parser.add_argument('--ds-bound', type=int, default=64, help='code: stopping-distance weight bound')
    parser.add_argument('--crosscheck', action='store_true', help='dem: compare with the model stim builds (needs stim)')
    parser.add_argument('--strict', action='store_true', help='Fault-count mismatch is an error')
    parser.add_argument('--per-shot', action='store_true', help='Write per-shot CSV records')
    parser.add_argument('--out', default=None, help='Output folder for CSV/DEM/report files')
    parser.add_argument('--config', default=None, help='Config file (JSON/YAML, "schema": 1)')
    parser.add_argument('--json-logs', action='store_true', help='Emit machine-readable JSON log lines')
    parser.add_argument('--events-file', default=None, help='Write JSON events additionally to this NDJSON file')
    parser.add_argument('--progress', choices=['plain', 'rich'], default='plain', help='Progress rendering mode (rich requires optional dependency)')
    parser.add_argument('--report', choices=['json', 'md'], default=None, help='Write bbpeel_report.json or bbpeel_report.md')
    return parser


def _config_from_args(args) -> ExperimentConfig:
    dec = DecoderConfig(mode=args.peel_mode, pair_max_weight=args.pair_max_weight, pair_top_k=args.pair_top_k,
                        bp_iters=args.bp_iters, bp_scale=args.bp_scale, osd_sweep_width=args.osd_order,
                        use_peel=not args.no_peel, use_pairs=not args.no_pairs, predicate=args.peel_predicate)
    return ExperimentConfig(
        mode=args.verb, code=args.code, code_spec=args.code_spec, dem_file=args.dem_file, rounds=args.rounds, p=args.p,
        p_grid=_parse_grid(args.p_grid), shots=args.shots, seed=args.seed, basis=args.basis,
        opposite_basis_noise=args.opposite_basis_noise, decoder=dec, compare_bp=args.compare_bp, workers=args.workers,
        warmup=args.warmup, window_rounds=args.window_rounds, commit_rounds=args.commit_rounds, ratio=args.ratio,
        baseline_trials=args.baseline_trials, fit_grid=args.fit_grid, mode_study=args.mode_study,
        ds_bound=args.ds_bound, crosscheck=args.crosscheck, strict=args.strict, per_shot=args.per_shot, out=args.out,
        json_logs=args.json_logs, events_file=args.events_file, progress_mode=args.progress,
    ).validate()


def headless_main(argv: list[str]) -> int:
    """Headless CLI: one verb per run with events, reports and exit codes."""
    parser = _build_parser()
    args = parser.parse_args(argv)

    # Config merge: file values apply only where the command line kept the default
    if args.config:
        try:
            cfg_file = validate_config(_load_config_file(args.config, strict=True))
        except ConfigError as e:
            print(f'[config] {e}')
            return EXIT_CONFIG_ERROR
        defaults = {a.dest: a.default for a in parser._actions if hasattr(a, 'dest')}
        file_args, notes = config_to_args(cfg_file)
        for note in notes:
            print(f'[config] {note}', file=sys.stderr)
        for k, v in file_args.items():
            if not hasattr(args, k):
                continue
            cur = getattr(args, k)
            if cur == defaults.get(k) or cur in (None, ''):
                setattr(args, k, v)

    class CLICallbacks(RunCallbacks):  # pragma: no cover - simple console binding
        def __init__(self): self._last = -1
        def log(self, message: str): print(message)
        def phase(self, phase: str, pct: int):
            self._last = -1
            if not args.json_logs: print(f"[{phase}] {pct}%")
        def progress(self, done: int, total: int):
            if args.json_logs or not total: return
            q = (100 * done // total) // 25
            if q != self._last and 0 < q < 4:
                self._last = q; print(f"  ... {done}/{total}")

    try:
        cfg = _config_from_args(args)
    except (ConfigError, ValueError) as e:
        print(f'[config] {e}')
        return EXIT_CONFIG_ERROR
    if args.print_repro:
        print(shlex.join(_build_repro_command_from_config(cfg)))
        return EXIT_SUCCESS
    if args.dry_run:
        try:
            plan = _plan(cfg)
        except (ConfigError, ParseError, BBPeelError, ValueError) as e:
            print(f'[config] {e}')
            return EXIT_CONFIG_ERROR
        if args.json_logs:
            print(json.dumps({'dry_run_plan': plan}, indent=2, default=_json_default))
        else:
            print('[dry-run] Plan summary:')
            for k, v in plan.items(): print(f"  - {k}: {v}")
        issues = plan.get('issues') or []
        return EXIT_DEPENDENCY_MISSING if any(i.startswith(('ldpc', 'stim')) for i in issues) else EXIT_SUCCESS

    callbacks: RunCallbacks
    rich_context = None
    if cfg.progress_mode == 'rich':
        rc = RichCallbacks()
        if getattr(rc, '_rich_available', False):
            print('[progress-rich] enabled')
            rc.start()
            callbacks = rc
            rich_context = rc
        else:
            print('[progress] rich mode requested but Rich is not installed; falling back to plain output')
            callbacks = CLICallbacks()
    else:
        callbacks = CLICallbacks()
    events = EventLog(cfg.json_logs, cfg.events_file, callbacks)
    events('start', verb=cfg.mode, config=cfg.as_dict())

    outcome: Optional[VerbOutcome] = None
    error: Optional[str] = None
    try:
        outcome = _VERBS[cfg.mode](cfg, callbacks, events)
        exit_code = EXIT_SUCCESS
    except (Canceled, KeyboardInterrupt):
        error = 'canceled'; exit_code = EXIT_CANCELED
    except ImportError as e:
        error = f'missing dependency: {e}'; exit_code = EXIT_DEPENDENCY_MISSING
    except (ConfigError, ParseError) as e:
        error = str(e); exit_code = EXIT_CONFIG_ERROR
    except CountMismatch as e:
        error = str(e); exit_code = EXIT_CHECK_FAILED
    except (BBPeelError, ValueError, OSError) as e:
        error = f'{type(e).__name__}: {e}'; exit_code = EXIT_GENERIC_FAILURE
    finally:
        if rich_context is not None:
            try: rich_context.stop()
            except Exception: pass
    if error:
        print(f'[error] {error}', file=sys.stderr)

    failed = sorted(k for k, ok in (outcome.checks if outcome else {}).items() if not ok)
    if outcome is not None and failed:
        events('check_failed', failed=failed)
        print(f"[check] failed: {', '.join(failed)}")
        if args.check:
            exit_code = EXIT_CHECK_FAILED
    if outcome is not None:
        events('summary', verb=cfg.mode, checks=outcome.checks, dem_hash=outcome.dem_hash,
               dem_hashes=outcome.dem_hashes, files=outcome.files, timings=outcome.timings)
        if not args.json_logs:
            for path in outcome.files: print(f'[out] {path}')

    # Report generation (best effort)
    if args.report:
        try:
            report_path = os.path.join(cfg.out or '.', f'{REPORT_BASENAME}.{args.report}')
            if cfg.out: os.makedirs(cfg.out, exist_ok=True)
            summary = {
                'tool': 'bbpeel',
                'tool_version': _tool_version(),
                'schema_version': SCHEMA_VERSION,
                'verb': cfg.mode,
                'exit_code': exit_code,
                'error': error,
                'config': cfg.as_dict(),
                'dem_hash': outcome.dem_hash if outcome else None,
                'dem_hashes': outcome.dem_hashes if outcome else None,
                'results': outcome.results if outcome else {},
                'checks': outcome.checks if outcome else {},
                'reproduce_command': shlex.join(_build_repro_command_from_config(cfg)),
            }
            if args.report == 'md' and outcome is not None:
                summary['timings'] = outcome.timings
            write_report(report_path, args.report, summary)
            if args.json_logs:
                events('report_generated', path=report_path, format=args.report)
            else:
                print(f"[report] generated {report_path}")
        except Exception as e:
            if args.json_logs:
                events('report_error', error=str(e))
            else:
                print(f"[report] failed: {e}")
    events('summary_final', exit_code=exit_code, verb=cfg.mode, error=error)
    return exit_code


__all__ = [
    '__version__', 'SCHEMA_VERSION', 'EXIT_SUCCESS', 'EXIT_GENERIC_FAILURE', 'EXIT_CHECK_FAILED',
    'EXIT_DEPENDENCY_MISSING', 'EXIT_CANCELED', 'EXIT_CONFIG_ERROR', 'MODES', 'CONFIG_SCHEMA',
    'ExperimentConfig', 'DecoderConfig', 'RunCallbacks', 'RichCallbacks', 'EventLog', 'ShotRecord', 'LerReport',
    'LatencyReport', 'SweepResult', 'KunlunReport', 'PeelMeasurement', 'ModeStudyRow', 'VerbOutcome',
    'validate_config', 'config_to_args', 'peel_mode_study', 'mode_ordering_holds',
    'resolve_code', 'build_experiment_dem', 'bp_only', 'run_arm', 'summarize_arm', 'latency_of', 'run_sweep',
    'kunlun_repro', 'bench', 'measure_peel', 'write_ler_csv', 'write_shot_csv', 'write_latency_csv',
    'write_report', 'headless_main', '_load_config_file', '_build_repro_command_from_config',
]
## End of core harness.
