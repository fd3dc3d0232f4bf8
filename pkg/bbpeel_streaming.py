"""Two-shot sliding-window streaming decoder (commit-and-carry) and the window-size ratio study."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from bbpeel_circuit import NoiseModel, build_memory_circuit
from bbpeel_code import BBCode, get_code, stopping_distance, syndrome_code_generator
from bbpeel_decoder import DecoderConfig, Phase, PeelDecoder
from bbpeel_dem import Dem, Fault, build_dem, export_dem
from bbpeel_errors import WindowDemMismatch
from bbpeel_sampler import ShotSource
from bbpeel_stats import coefficient_of_variation, per_cycle, wilson_interval

MIN_STOPPING_DISTANCE = 4


@dataclass
class StreamingConfig:
    code: str = 'bb-32'
    total_rounds: int = 12
    p: float = 0.001
    window_rounds: int = 2
    commit_rounds: int = 1
    shots: int = 1000
    seed: int = 0
    basis: str = 'Z'
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self) -> None:
        if self.total_rounds < 1:
            raise ValueError('total_rounds must be >= 1')
        if self.window_rounds < 1:
            raise ValueError("window_rounds must be >= 1")
        # a window at least as wide as the block collapses to whole-block decoding
        if self.window_rounds < self.total_rounds and not (1 <= self.commit_rounds < self.window_rounds):
            raise ValueError("need 1 <= commit_rounds < window_rounds")


@dataclass(frozen=True)
class Window:
    start: int                    # first detector layer
    stop: int                     # one past the last detector layer
    kind: str                     # first | bulk | last | single
    dem: Dem
    members: Tuple[int, ...]      # window fault id -> representative full-DEM fault id
    final: bool


@dataclass
class StreamReport:
    shots: int
    failures: int
    ler_total: float
    ler_per_cycle: float
    peel_fraction: float
    shot_peel_fraction: float
    windows: int
    uncleared_commits: int
    interval: Tuple[float, float] = (0.0, 1.0)
    total_rounds: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ShotStream:
    predicted_observables: int
    true_observables: int
    phases: Tuple[Phase, ...]
    commits: Tuple[Tuple[int, Tuple[int, ...]], ...]    # (window start, committed full fault ids)
    uncleared: int

    @property
    def failed(self) -> bool:
        return self.predicted_observables != self.true_observables


def _layer_span(f: Fault, half: int) -> Tuple[int, int]:
    return f.detectors[0] // half, f.detectors[-1] // half


def window_starts(total_rounds: int, window_rounds: int, commit_rounds: int) -> List[int]:
    """Start layers; the last window is the first whose upper edge reaches the final round."""
    if window_rounds >= total_rounds:
        return [0]
    starts = []
    s = 0
    while True:
        starts.append(s)
        if s + window_rounds >= total_rounds:
            return starts
        s += commit_rounds


def build_window(full: Dem, half: int, total_rounds: int, start: int, window_rounds: int, kind: str) -> Window:
    """Translate the full DEM into the window [start, start+W): faults whose first layer lies in the
    window, detectors truncated at the upper edge (the final window keeps the readout layer)."""
    final = start + window_rounds >= total_rounds
    stop = total_rounds + 1 if final else start + window_rounds
    acc: Dict[Tuple[Tuple[int, ...], int], Tuple[float, int]] = {}
    for f in full.faults:
        lo, _ = _layer_span(f, half)
        if not (start <= lo < stop):
            continue
        dets = tuple(d - start * half for d in f.detectors if d < stop * half)
        key = (dets, f.observables)
        prev = acc.get(key)
        if prev is None:
            acc[key] = (f.probability, f.id)
        else:
            q, rep = prev
            p = f.probability
            merged = q * (1 - p) + p * (1 - q)
            # representative: most probable member, lowest id on ties
            best = rep if (full.faults[rep].probability, -rep) >= (p, -f.id) else f.id
            acc[key] = (merged, best)
    items = sorted(acc.items(), key=lambda kv: (kv[0][0][0], len(kv[0][0]), kv[0][1], kv[0][0]))
    faults = tuple(Fault(i, p, dets, mask) for i, ((dets, mask), (p, _)) in enumerate(items))
    members = tuple(rep for _, (_, rep) in items)
    nd = (stop - start) * half
    dem = Dem(faults, nd, full.num_observables, {'window': kind, 'W': stop - start})
    return Window(start, stop, kind, dem, members, final)


def _window_signature(w: Window) -> str:
    return export_dem(Dem(w.dem.faults, w.dem.num_detectors, w.dem.num_observables))


class StreamingDecoder:
    """Commit-and-carry decoding of one full-block DEM through fixed-size windows."""

    def __init__(self, full: Dem, n: int, total_rounds: int, window_rounds: int = 2, commit_rounds: int = 1,
                 decoder: Optional[DecoderConfig] = None):
        self.full = full
        self.half = n // 2
        self.total_rounds = total_rounds
        self.commit_rounds = commit_rounds
        if full.num_detectors != self.half * (total_rounds + 1):
            raise WindowDemMismatch(f'DEM has {full.num_detectors} detectors, stream expects '
                                    f'{self.half * (total_rounds + 1)}')
        starts = window_starts(total_rounds, window_rounds, commit_rounds)
        self.windows: List[Window] = []
        for i, s in enumerate(starts):
            kind = 'single' if len(starts) == 1 else ('first' if i == 0 else ('last' if i == len(starts) - 1 else 'bulk'))
            self.windows.append(build_window(full, self.half, total_rounds, s, window_rounds, kind))
        bulk = [w for w in self.windows if w.kind == 'bulk']
        if bulk:
            ref = _window_signature(bulk[0])
            for w in bulk[1:]:
                if _window_signature(w) != ref:
                    raise WindowDemMismatch(f'bulk window at layer {w.start} differs from layer {bulk[0].start}')
        cfg = decoder or DecoderConfig()
        # one decoder per distinct window model; bulk windows share one
        self._decoders: Dict[int, PeelDecoder] = {}
        shared_bulk: Optional[PeelDecoder] = None
        for idx, w in enumerate(self.windows):
            if w.kind == 'bulk':
                shared_bulk = shared_bulk or PeelDecoder(w.dem, cfg)
                self._decoders[idx] = shared_bulk
            else:
                self._decoders[idx] = PeelDecoder(w.dem, cfg)
        self.sig_masks = full.signature_masks()
        self.obs = full.observable_masks()

    def decode_active(self, active: Sequence[int]) -> Tuple[int, Tuple[Phase, ...], Tuple[Tuple[int, Tuple[int, ...]], ...], int]:
        half = self.half
        stream = 0
        for d in active:
            stream ^= 1 << d
        obs = 0
        phases: List[Phase] = []
        commits: List[Tuple[int, Tuple[int, ...]]] = []
        uncleared = 0
        for idx, w in enumerate(self.windows):
            lo, hi = w.start * half, w.stop * half
            local = [d - lo for d in _bits(stream >> lo << lo, hi)]
            res = self._decoders[idx].decode_active(local)
            phases.append(res.phase)
            chosen = [w.members[f] for f in res.peeled + res.correction]
            if w.final:
                commit = chosen
            else:
                edge = (w.start + self.commit_rounds) * half
                commit = [f for f in chosen if self.full.faults[f].detectors[0] < edge]
            for f in commit:
                stream ^= self.sig_masks[f]; obs ^= self.obs[f]
            commits.append((w.start, tuple(sorted(commit))))
            committed_hi = hi if w.final else (w.start + self.commit_rounds) * half
            if _bits(stream >> lo << lo, committed_hi):
                uncleared += 1
        return obs, tuple(phases), tuple(commits), uncleared


def _bits(mask: int, below: int) -> List[int]:
    """Set bit positions of mask that are < below, ascending."""
    mask &= (1 << below) - 1
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def stream_decode(code: BBCode, total_rounds: int, p: float, config: Optional[StreamingConfig] = None,
                  log: Optional[Callable[[str], None]] = None,
                  on_shot: Optional[Callable[[int, ShotStream], None]] = None) -> StreamReport:
    cfg = config or StreamingConfig(code=code.name, total_rounds=total_rounds, p=p)
    cfg.validate()
    if log:
        ds = stopping_distance(syndrome_code_generator(code, cfg.basis, kind='relations'), weight_bound=16)
        if ds.value is not None and ds.value < MIN_STOPPING_DISTANCE:
            log(f'{code.name}: syndrome-code stopping distance {ds.value} < {MIN_STOPPING_DISTANCE}; '
                'windowed decoding may be unreliable')
    circuit = build_memory_circuit(code, total_rounds, cfg.basis, NoiseModel(p))
    full = build_dem(circuit, log=log)
    sd = StreamingDecoder(full, code.n, total_rounds, cfg.window_rounds, cfg.commit_rounds, cfg.decoder)
    src = ShotSource(full)
    failures = peeled_windows = all_peeled = uncleared = 0
    for i in range(cfg.shots):
        shot = src.shot(cfg.seed, i)
        obs, phases, commits, unc = sd.decode_active(shot.syndrome)
        result = ShotStream(obs, shot.true_observables, phases, commits, unc)
        failures += int(result.failed)
        k = sum(ph is Phase.PEEL for ph in phases)
        peeled_windows += k
        all_peeled += int(k == len(phases))
        uncleared += unc
        if on_shot:
            on_shot(i, result)
    shots = cfg.shots
    ler = failures / shots if shots else 0.0
    nwin = len(sd.windows)
    return StreamReport(shots, failures, ler, per_cycle(ler, total_rounds),
                        peeled_windows / (shots * nwin) if shots else 1.0,
                        all_peeled / shots if shots else 1.0, nwin, uncleared,
                        wilson_interval(failures, shots), total_rounds)


@dataclass(frozen=True)
class RatioRow:
    code: str
    p: float
    W: int
    ler_total: float
    ler_cycle: float
    peel_frac: float
    ler_cycle_ref: float
    ratio: Optional[float]
    ratio_interval: Tuple[Optional[float], Optional[float]]


def ratio_study(codes: Sequence[str], p_grid: Sequence[float], shots: int, seed: int = 0, window_rounds: int = 2,
                reference_rounds: int = 12, decoder: Optional[DecoderConfig] = None,
                log: Optional[Callable[[str], None]] = None) -> Tuple[List[RatioRow], Dict[str, float]]:
    """LER/cycle with W-round windows divided by whole-block LER/cycle, over the same T."""
    rows: List[RatioRow] = []
    for name in codes:
        code = get_code(name)
        for p in p_grid:
            base = dict(code=name, total_rounds=reference_rounds, p=p, shots=shots, seed=seed,
                        decoder=decoder or DecoderConfig())
            win = stream_decode(code, reference_rounds, p, StreamingConfig(window_rounds=window_rounds, **base), log=log)
            ref = stream_decode(code, reference_rounds, p, StreamingConfig(window_rounds=reference_rounds, **base))
            ratio = win.ler_per_cycle / ref.ler_per_cycle if ref.ler_per_cycle > 0 else None
            lo_w, hi_w = (per_cycle(x, reference_rounds) for x in win.interval)
            lo_r, hi_r = (per_cycle(x, reference_rounds) for x in ref.interval)
            interval = (lo_w / hi_r if hi_r > 0 else None, hi_w / lo_r if lo_r > 0 else None)
            rows.append(RatioRow(name, p, window_rounds, win.ler_total, win.ler_per_cycle, win.peel_fraction,
                                 ref.ler_per_cycle, ratio, interval))
    ratios = [r.ratio for r in rows if r.ratio is not None]
    summary = {'mean': float(np.mean(ratios)) if ratios else float('nan'),
               'std': float(np.std(ratios, ddof=1)) if len(ratios) > 1 else 0.0,
               'cv': coefficient_of_variation(ratios), 'points': len(ratios)}
    return rows, summary


def write_ratio_csv(rows: Sequence[RatioRow], path: str) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        wr = csv.writer(f)
        wr.writerow(['code', 'p', 'W', 'ler_total', 'ler_cycle', 'peel_frac', 'ratio_vs_T12'])
        for r in rows:
            wr.writerow([r.code, r.p, r.W, f'{r.ler_total:.6g}', f'{r.ler_cycle:.6g}', f'{r.peel_frac:.4f}',
                         '' if r.ratio is None else f'{r.ratio:.4f}'])


__all__ = [
    'StreamingConfig', 'Window', 'StreamReport', 'ShotStream', 'StreamingDecoder', 'RatioRow', 'window_starts',
    'build_window', 'stream_decode', 'ratio_study', 'write_ratio_csv',
]
