"""Three-phase deferred greedy decoder: peeling, bounded pair enumeration, BP+OSD fallback.

The peel path works on preallocated CSR tables and scratch buffers sized by the DEM.
Scratch state touched by one syndrome is zeroed lazily on the next reset.
"""
from __future__ import annotations

import enum, itertools, tracemalloc
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from bbpeel_dem import Dem, FaultGraph
from bbpeel_errors import SolverFailure


class PeelMode(str, enum.Enum):
    SINGLE_PASS = 'single'
    QUEUE = 'queue'
    BATCH = 'batch'


class PeelPredicate(str, enum.Enum):
    DECODER = 'decoder'     # ambiguity judged against every fully-active fault
    TRUTH = 'truth'         # ambiguity judged against the faults that actually fired


class Phase(str, enum.Enum):
    PEEL = 'peel'
    PAIR = 'pair'
    BP = 'bp'


@dataclass
class DecoderConfig:
    mode: str = 'queue'
    pair_max_weight: int = 6
    pair_top_k: int = 60
    bp_iters: int = 30
    bp_scale: float = 0.8
    osd_sweep_width: int = 60
    use_peel: bool = True
    use_pairs: bool = True
    predicate: str = 'decoder'

    def peel_mode(self) -> PeelMode:
        return PeelMode(self.mode)

    def peel_predicate(self) -> PeelPredicate:
        return PeelPredicate(self.predicate)


@dataclass(frozen=True)
class PeelStats:
    peeled: int = 0
    passes: int = 0
    examined: int = 0
    initial_weight: int = 0
    residual_weight: int = 0


@dataclass(frozen=True)
class UnblockEvent:
    fault: int
    removed: int
    blockers_before: Tuple[int, ...]
    pure: bool


@dataclass(frozen=True)
class DecodeResult:
    predicted_observables: int
    phase: Phase
    peel_stats: PeelStats
    peeled: Tuple[int, ...] = ()
    correction: Tuple[int, ...] = ()     # faults chosen by pair enumeration or BP
    residual_after_peel: int = 0
    success: Optional[bool] = None       # filled by the harness


Syndrome = Union[bytes, bytearray, np.ndarray, Sequence[int]]

# slots in PeelDecoder._cnt
_NTDET, _NTF, _NCHOSEN, _NCHANGED = 0, 1, 2, 3


class PeelDecoder:
    """Per-worker decoding state for one DEM. Not shared between threads."""

    def __init__(self, dem: Dem, config: Optional[DecoderConfig] = None, graph: Optional[FaultGraph] = None):
        self.dem = dem
        self.config = config or DecoderConfig()
        D, N = dem.num_detectors, len(dem.faults)
        self.D, self.N = D, N
        self.sigs: List[Tuple[int, ...]] = [f.detectors for f in dem.faults]
        if graph is not None and len(graph.detector_incidence) == D:
            self.inc: List[Tuple[int, ...]] = list(graph.detector_incidence)
        else:
            lists: List[List[int]] = [[] for _ in range(D)]
            for f in dem.faults:
                for d in f.detectors:
                    lists[d].append(f.id)
            self.inc = [tuple(x) for x in lists]
        self.weight = [len(s) for s in self.sigs]
        self.obs = dem.observable_masks()
        self.prob = [f.probability for f in dem.faults]
        self.sig_masks = dem.signature_masks()
        self._sig_index = self._build_signature_index()
        self._bp = None
        # scratch: small counters live in lists of cached ints, ids in int32 buffers
        self._syn = bytearray(D)
        self._fa = [0] * D               # fully-active faults per detector
        self._ta = [0] * D               # remaining ground-truth faults per detector
        self._dflag = bytearray(D)
        self._tdet = np.zeros(D, dtype=np.int32)
        self._act = [0] * N
        self._full = bytearray(N)
        self._fflag = bytearray(N)
        self._truth = bytearray(N)
        self._tf = np.zeros(N, dtype=np.int32)
        self._inq = bytearray(N)
        self._queue = np.zeros(N + 1, dtype=np.int32)
        self._chosen = bytearray(N)
        self._cseen = bytearray(N)
        self._cstack = np.zeros(N, dtype=np.int32)
        fan = max((len(x) for x in self.inc), default=0) * max(self.weight, default=0)
        self._changed = np.zeros(max(N, fan) + 1, dtype=np.int32)
        self._batch = np.zeros(N, dtype=np.int32)
        self._cnt = np.zeros(4, dtype=np.int64)

    # ---------------- scratch management ----------------
    def reset(self) -> None:
        cnt = self._cnt
        syn, fa, ta, dflag, tdet = self._syn, self._fa, self._ta, self._dflag, self._tdet
        for i in range(cnt[_NTDET]):
            d = tdet[i]; syn[d] = 0; fa[d] = 0; ta[d] = 0; dflag[d] = 0
        act, full, fflag, tf = self._act, self._full, self._fflag, self._tf
        inq, chosen, cseen, truth = self._inq, self._chosen, self._cseen, self._truth
        for i in range(cnt[_NTF]):
            f = tf[i]; act[f] = 0; full[f] = 0; fflag[f] = 0; inq[f] = 0; chosen[f] = 0; cseen[f] = 0; truth[f] = 0
        cnt[:] = 0

    def _touch_det(self, d) -> None:
        if not self._dflag[d]:
            n = self._cnt[_NTDET]
            self._dflag[d] = 1; self._tdet[n] = d; self._cnt[_NTDET] = n + 1

    def _touch_fault(self, f) -> None:
        if not self._fflag[f]:
            n = self._cnt[_NTF]
            self._fflag[f] = 1; self._tf[n] = f; self._cnt[_NTF] = n + 1

    def _set_full(self, f, on: bool) -> None:
        fa = self._fa
        self._full[f] = 1 if on else 0
        delta = 1 if on else -1
        for d in self.sigs[f]:
            fa[d] += delta
        n = self._cnt[_NCHANGED]
        self._changed[n] = f; self._cnt[_NCHANGED] = n + 1

    def load(self, active: Sequence[int], truth: Optional[Sequence[int]] = None) -> int:
        """Reset scratch and load a sparse syndrome (and optionally the faults that produced it)."""
        self.reset()
        syn, act, inc, weight, full = self._syn, self._act, self.inc, self.weight, self._full
        w = 0
        for d in active:
            if d < 0 or d >= self.D:
                raise ValueError(f'detector index {d} out of range')
            if syn[d]:
                continue
            syn[d] = 1; w += 1
            self._touch_det(d)
            for f in inc[d]:
                self._touch_fault(f)
                act[f] += 1
        if truth is not None:
            ta = self._ta
            for f in truth:
                if f < 0 or f >= self.N:
                    raise ValueError(f'fault index {f} out of range')
                if self._truth[f]:
                    continue
                self._truth[f] = 1
                self._touch_fault(f)
                for d in self.sigs[f]:
                    self._touch_det(d); ta[d] += 1
        tf = self._tf
        for i in range(self._cnt[_NTF]):
            f = tf[i]
            if act[f] == weight[f] and not full[f]:
                self._set_full(f, True)
        self._cnt[_NCHANGED] = 0
        return w

    def _toggle(self, d) -> None:
        syn, act, weight, full = self._syn, self._act, self.weight, self._full
        if syn[d]:
            syn[d] = 0
            for g in self.inc[d]:
                if full[g]:
                    self._set_full(g, False)
                act[g] -= 1
        else:
            syn[d] = 1
            self._touch_det(d)
            for g in self.inc[d]:
                self._touch_fault(g)
                act[g] += 1
                if act[g] == weight[g]:
                    self._set_full(g, True)

    # ---------------- predicates ----------------
    def peelable(self, f) -> bool:
        """Fully active, and no other fully-active fault touches any of its detectors."""
        if not self._full[f]:
            return False
        fa = self._fa
        for d in self.sigs[f]:
            if fa[d] != 1:
                return False
        return True

    def truth_peelable(self, f) -> bool:
        """A remaining ground-truth fault, fully active, sharing no detector with another remaining one."""
        if not (self._truth[f] and self._full[f]):
            return False
        ta = self._ta
        for d in self.sigs[f]:
            if ta[d] != 1:
                return False
        return True

    def identifiable(self, f) -> bool:
        """Fully active with at least one detector no other fully-active fault touches."""
        if not self._full[f]:
            return False
        fa = self._fa
        for d in self.sigs[f]:
            if fa[d] == 1:
                return True
        return False

    def _ok(self, f, use_truth: bool) -> bool:
        return self.peelable(f) or (use_truth and self.truth_peelable(f))

    def _blockers(self, f: int) -> Tuple[int, ...]:
        out = set()
        for d in self.sigs[f]:
            for g in self.inc[d]:
                if g != f and self._full[g]:
                    out.add(g)
        return tuple(sorted(out))

    def _peel_one(self, f) -> None:
        self._cnt[_NCHANGED] = 0
        self._chosen[f] ^= 1
        if not self._cseen[f]:
            n = self._cnt[_NCHOSEN]
            self._cseen[f] = 1; self._cstack[n] = f; self._cnt[_NCHOSEN] = n + 1
        if self._truth[f]:
            self._truth[f] = 0
            ta = self._ta
            for d in self.sigs[f]:
                ta[d] -= 1
        for d in self.sigs[f]:
            self._toggle(d)

    def _enqueue(self, f, tail: int) -> int:
        if not self._inq[f]:
            self._inq[f] = 1
            self._queue[tail] = f
            tail = (tail + 1) % (self.N + 1)
        return tail

    # ---------------- phase 1: peeling modes ----------------
    def _single_pass(self, use_truth: bool) -> int:
        """Peel every fault unambiguous at the current syndrome, once. Those faults never overlap."""
        tf, batch = self._tf, self._batch
        k = 0
        for i in range(self._cnt[_NTF]):
            f = tf[i]
            if (self.truth_peelable(f) if use_truth else self.peelable(f)):
                batch[k] = f; k += 1
        for i in range(k):
            self._peel_one(batch[i])
        return self._cnt[_NTF]

    def _drain_queue(self, use_truth: bool, trace: Optional[List[UnblockEvent]]) -> int:
        """Sequential removal with re-check of faults around every flipped detector, to fixpoint."""
        tf, full, fa, queue = self._tf, self._full, self._fa, self._queue
        head = tail = examined = 0
        for i in range(self._cnt[_NTF]):
            f = tf[i]
            if full[f]:
                tail = self._enqueue(f, tail)
        while head != tail:
            f = queue[head]; head = (head + 1) % (self.N + 1)
            self._inq[f] = 0
            examined += 1
            if not self._ok(f, use_truth):
                continue
            watch = self._watch_blocked(int(f)) if trace is not None else None
            self._peel_one(f)
            if watch:
                for h, blockers in watch:
                    if self.peelable(h):
                        trace.append(UnblockEvent(h, int(f), blockers, blockers == (int(f),)))
            for d in self.sigs[f]:
                for g in self.inc[d]:
                    if full[g]:
                        tail = self._enqueue(g, tail)
            changed = self._changed
            for i in range(self._cnt[_NCHANGED]):
                g = changed[i]
                if full[g]:
                    tail = self._enqueue(g, tail); continue
                for d2 in self.sigs[g]:
                    if fa[d2] == 1:
                        for h in self.inc[d2]:
                            if full[h]:
                                tail = self._enqueue(h, tail)
        return examined

    def _batch_step(self) -> int:
        """Remove every identifiable fault at once; detectors shared by two of them flip back on."""
        tf, batch = self._tf, self._batch
        k = 0
        for i in range(self._cnt[_NTF]):
            f = tf[i]
            if self.identifiable(f):
                batch[k] = f; k += 1
        for i in range(k):
            self._peel_one(batch[i])
        return k

    def _residual_weight(self) -> int:
        syn, tdet = self._syn, self._tdet
        w = 0
        for i in range(self._cnt[_NTDET]):
            w += syn[tdet[i]]
        return w

    def peel_active(self, active: Sequence[int], mode: PeelMode = PeelMode.QUEUE,
                    trace: Optional[List[UnblockEvent]] = None,
                    truth: Optional[Sequence[int]] = None) -> Tuple[Tuple[int, ...], Tuple[int, ...], PeelStats]:
        """Peel a sparse syndrome. Returns (chosen faults, residual detectors, stats).

        Each mode starts where the previous one stops: single pass, then the queue to fixpoint,
        then batch removals of identifiable faults each followed by another queue drain.
        Passing `truth` (the faults that fired) judges ambiguity against them instead of
        against every fully-active fault.
        """
        mode = PeelMode(mode)
        use_truth = truth is not None
        w0 = self.load(active, truth)
        passes = 1
        examined = self._single_pass(use_truth)
        if mode is not PeelMode.SINGLE_PASS:
            examined += self._drain_queue(use_truth, trace)
        if mode is PeelMode.BATCH:
            cap = 2 * w0 + 2
            while passes <= cap and self._residual_weight() and self._batch_step():
                passes += 1
                examined += self._drain_queue(use_truth, None)
        return self._result(w0, passes, examined)

    def _result(self, w0: int, passes: int, examined: int):
        chosen, cstack = self._chosen, self._cstack
        picked = sorted(int(cstack[i]) for i in range(self._cnt[_NCHOSEN]) if chosen[cstack[i]])
        syn, tdet = self._syn, self._tdet
        residual = sorted(int(tdet[i]) for i in range(self._cnt[_NTDET]) if syn[tdet[i]])
        return tuple(picked), tuple(residual), PeelStats(len(picked), passes, int(examined), w0, len(residual))

    def _watch_blocked(self, f: int) -> List[Tuple[int, Tuple[int, ...]]]:
        """Blocked faults within two hops of f, with their blockers, before f is removed."""
        seen = set(); out = []
        for d in self.sigs[f]:
            for g in self.inc[d]:
                for d2 in self.sigs[g]:
                    for h in self.inc[d2]:
                        if h == f or h in seen:
                            continue
                        seen.add(h)
                        if self._full[h] and not self.peelable(h):
                            out.append((h, self._blockers(h)))
        return out

    # ---------------- phase 2: pair enumeration ----------------
    def _build_signature_index(self) -> Dict[int, List[int]]:
        idx: Dict[int, List[int]] = {}
        for fid, m in enumerate(self.sig_masks):
            idx.setdefault(m, []).append(fid)
        for ids in idx.values():
            ids.sort(key=lambda i: (-self.prob[i], i))
        return idx

    def _signature_index(self) -> Dict[int, List[int]]:
        return self._sig_index

    def rank_candidates(self, residual: Sequence[int], top_k: int) -> List[int]:
        rmask = 0
        for d in residual:
            rmask |= 1 << d
        cands = {g for d in residual for g in self.inc[d]}

        def key(g):
            covered = bin(self.sig_masks[g] & rmask).count('1')
            return (-covered, self.weight[g] - covered, -self.prob[g], g)
        return sorted(cands, key=key)[:top_k]

    def enumerate_pairs(self, residual: Sequence[int], max_weight: Optional[int] = None,
                        top_k: Optional[int] = None) -> Optional[Tuple[int, ...]]:
        max_weight = self.config.pair_max_weight if max_weight is None else max_weight
        top_k = self.config.pair_top_k if top_k is None else top_k
        if len(residual) > max_weight:
            return None
        if not residual:
            return ()
        rmask = 0
        for d in residual:
            rmask |= 1 << d
        singles = self._signature_index().get(rmask)
        if singles:
            return (singles[0],)
        ranked = self.rank_candidates(residual, top_k)
        sm = self.sig_masks
        for i, a in enumerate(ranked):
            need = rmask ^ sm[a]
            for b in ranked[i + 1:]:
                if sm[b] == need:
                    return (a, b)
        return None

    # ---------------- phase 3: BP + OSD ----------------
    def _bp_decoder(self):
        if self._bp is None:
            from ldpc.bposd_decoder import BpOsdDecoder   # optional at import time
            cfg = self.config
            self._bp = BpOsdDecoder(self.dem.check_matrix(), error_channel=list(self.prob), max_iter=cfg.bp_iters,
                                    bp_method='minimum_sum', ms_scaling_factor=cfg.bp_scale, schedule='serial',
                                    osd_method='osd_cs', osd_order=cfg.osd_sweep_width)
        return self._bp

    def bp_osd(self, active: Sequence[int]) -> Tuple[int, ...]:
        if not active:
            return ()
        dense = np.zeros(self.D, dtype=np.uint8)
        dense[list(active)] = 1
        sol = np.asarray(self._bp_decoder().decode(dense), dtype=np.uint8)
        chosen = tuple(int(f) for f in np.flatnonzero(sol))
        check = 0; rmask = 0
        for f in chosen:
            check ^= self.sig_masks[f]
        for d in active:
            rmask ^= 1 << d
        if check != rmask:
            raise SolverFailure('BP+OSD returned a correction that does not reproduce the syndrome')
        return chosen

    # ---------------- full decode ----------------
    def observables_of(self, faults: Sequence[int]) -> int:
        m = 0
        for f in faults:
            m ^= self.obs[f]
        return m

    def decode_active(self, active: Sequence[int]) -> DecodeResult:
        cfg = self.config
        if cfg.use_peel:
            peeled, residual, stats = self.peel_active(active, cfg.peel_mode())
        else:
            peeled = (); residual = tuple(sorted(set(active))); stats = PeelStats(0, 0, 0, len(residual), len(residual))
        obs = self.observables_of(peeled)
        if not residual:
            return DecodeResult(obs, Phase.PEEL, stats, peeled, (), 0)
        if cfg.use_pairs:
            pair = self.enumerate_pairs(residual)
            if pair is not None:
                return DecodeResult(obs ^ self.observables_of(pair), Phase.PAIR, stats, peeled, pair, len(residual))
        corr = self.bp_osd(residual)
        return DecodeResult(obs ^ self.observables_of(corr), Phase.BP, stats, peeled, corr, len(residual))


def _active_from(syndrome: Syndrome, D: int) -> Tuple[int, ...]:
    arr = np.asarray(bytearray(syndrome) if isinstance(syndrome, (bytes, bytearray)) else syndrome)
    if arr.shape != (D,):
        raise ValueError(f'syndrome length {arr.shape} != num_detectors {D}')
    return tuple(int(d) for d in np.flatnonzero(arr))


def peel(dem: Dem, graph: Optional[FaultGraph], syndrome: Syndrome, mode: PeelMode = PeelMode.QUEUE,
         trace: Optional[List[UnblockEvent]] = None, truth: Optional[Sequence[int]] = None):
    """Functional wrapper over PeelDecoder for a dense syndrome of length num_detectors."""
    st = PeelDecoder(dem, graph=graph)
    return st.peel_active(_active_from(syndrome, dem.num_detectors), mode, trace, truth)


def enumerate_pairs(dem: Dem, residual: Sequence[int], max_weight: int = 6, top_k: int = 60) -> Optional[Tuple[int, ...]]:
    return PeelDecoder(dem).enumerate_pairs(residual, max_weight, top_k)


def bp_osd(dem: Dem, syndrome: Syndrome, config: Optional[DecoderConfig] = None) -> Tuple[int, ...]:
    st = PeelDecoder(dem, config)
    return st.bp_osd(_active_from(syndrome, dem.num_detectors))


def decode(dem: Dem, syndrome: Syndrome, config: Optional[DecoderConfig] = None) -> DecodeResult:
    st = PeelDecoder(dem, config)
    return st.decode_active(_active_from(syndrome, dem.num_detectors))


def brute_force_decode(dem: Dem, active: Sequence[int]) -> Tuple[Tuple[int, ...], float, float]:
    """Most probable fault subset reproducing the syndrome (exhaustive; <= 20 faults).

    Returns (best subset, its probability, runner-up probability).
    """
    N = len(dem.faults)
    if N > 20:
        raise ValueError('brute force limited to 20 faults')
    target = 0
    for d in active:
        target ^= 1 << d
    sm = dem.signature_masks(); pr = dem.probabilities()
    base = float(np.prod(1 - pr))
    odds = pr / (1 - pr)
    best: Tuple[Tuple[int, ...], float] = ((), -1.0)
    second = 0.0
    for r in range(N + 1):
        for subset in itertools.combinations(range(N), r):
            m = 0
            for f in subset:
                m ^= sm[f]
            if m != target:
                continue
            p = base * float(np.prod(odds[list(subset)])) if subset else base
            if p > best[1]:
                second = max(second, best[1]); best = (subset, p)
            elif p > second:
                second = p
    return best[0], max(best[1], 0.0), max(second, 0.0)


def hot_path_blocks(decoder: PeelDecoder, syndromes: Sequence[Sequence[int]], mode: PeelMode = PeelMode.QUEUE,
                    warmup: int = 8) -> int:
    """Heap blocks allocated by this module during a run of peels that are still alive afterwards.

    Zero means the peel loop leaves nothing behind per shot. Temporaries freed before the call
    returns (results, ints) are not counted.
    """
    for s in syndromes[:warmup]:
        decoder.peel_active(s, mode)
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    try:
        before = tracemalloc.take_snapshot()
        for s in syndromes:
            decoder.peel_active(s, mode)
        after = tracemalloc.take_snapshot()
    finally:
        if started:
            tracemalloc.stop()
    only_here = [tracemalloc.Filter(True, __file__)]
    diff = after.filter_traces(only_here).compare_to(before.filter_traces(only_here), 'filename')
    return sum(max(0, s.count_diff) for s in diff)


__all__ = [
    'PeelMode', 'PeelPredicate', 'Phase', 'DecoderConfig', 'PeelStats', 'UnblockEvent', 'DecodeResult', 'PeelDecoder',
    'peel', 'enumerate_pairs', 'bp_osd', 'decode', 'brute_force_decode', 'hot_path_blocks',
]
