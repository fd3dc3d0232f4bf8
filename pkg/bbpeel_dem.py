"""Detector error model: reverse Pauli propagation, merging, fault graph and text I/O."""
from __future__ import annotations

import csv, hashlib, re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from bbpeel_circuit import Circuit
from bbpeel_errors import CountMismatch, NonIntegral, ParseError

DEM_FORMAT_HEADER = '# bbpeel dem v1'


@dataclass(frozen=True)
class Fault:
    id: int
    probability: float
    detectors: Tuple[int, ...]
    observables: int = 0

    @property
    def weight(self) -> int:
        return len(self.detectors)


@dataclass(frozen=True)
class Dem:
    faults: Tuple[Fault, ...]
    num_detectors: int
    num_observables: int
    provenance: Dict[str, object] = field(default_factory=dict)
    undetectable: Tuple[Fault, ...] = ()
    expected_faults: Optional[int] = None

    def __len__(self) -> int:
        return len(self.faults)

    @property
    def count_ok(self) -> Optional[bool]:
        return None if self.expected_faults is None else self.expected_faults == len(self.faults)

    def check_matrix(self) -> sparse.csc_matrix:
        """Detectors x faults incidence (uint8)."""
        rows = [d for f in self.faults for d in f.detectors]
        cols = [f.id for f in self.faults for _ in f.detectors]
        return sparse.csc_matrix((np.ones(len(rows), dtype=np.uint8), (rows, cols)),
                                 shape=(self.num_detectors, len(self.faults)))

    def observable_matrix(self) -> sparse.csc_matrix:
        rows, cols = [], []
        for f in self.faults:
            for b in range(self.num_observables):
                if f.observables >> b & 1:
                    rows.append(b); cols.append(f.id)
        return sparse.csc_matrix((np.ones(len(rows), dtype=np.uint8), (rows, cols)),
                                 shape=(self.num_observables, len(self.faults)))

    def probabilities(self) -> np.ndarray:
        return np.array([f.probability for f in self.faults], dtype=np.float64)

    def observable_masks(self) -> List[int]:
        return [f.observables for f in self.faults]

    def signature_masks(self) -> List[int]:
        """Detector signatures as Python int bitmasks (bit d set for detector d)."""
        out = []
        for f in self.faults:
            m = 0
            for d in f.detectors:
                m |= 1 << d
            out.append(m)
        return out

    def weight_histogram(self) -> Dict[int, int]:
        return dict(sorted(Counter(f.weight for f in self.faults).items()))

    def content_hash(self) -> str:
        return content_hash(export_dem(self))


# ---------------- counting ----------------
def predicted_fault_count(n: int, w: int, T: int) -> int:
    """n(wT + T/2 + 1)."""
    if w < 1 or T < 1 or n < 1:
        raise ValueError('n, w, T must be positive')
    if (n * T) % 2:
        raise NonIntegral(f'n*T/2 is not an integer for n={n}, T={T}')
    return n * w * T + n * T // 2 + n


def weight2_fraction(w: int, T: int) -> float:
    """Analytic share of weight-2 (measurement) faults: (T/2)/(wT + T/2 + 1)."""
    return (T / 2) / (w * T + T / 2 + 1)


# ---------------- build ----------------
def _record_rows(circuit: Circuit) -> Tuple[List[List[int]], int]:
    rows_of: List[List[int]] = [[] for _ in range(circuit.num_measurements)]
    det = 0
    for ins in circuit.instructions:
        if ins.name == 'DETECTOR':
            for r in ins.targets:
                rows_of[r].append(det)
            det += 1
        elif ins.name == 'OBSERVABLE_INCLUDE':
            for r in ins.targets:
                rows_of[r].append(circuit.num_detectors + int(ins.arg))
    return rows_of, det


def _merge(acc: Dict[bytes, float], key: bytes, p: float) -> None:
    q = acc.get(key)
    acc[key] = p if q is None else q * (1 - p) + p * (1 - q)


def build_dem(circuit: Circuit, strict: bool = False, log: Optional[Callable[[str], None]] = None) -> Dem:
    """Propagate every noise component backwards to its (detector signature, observable mask).

    Components of one channel with an identical signature are summed; identical signatures
    from different channels are merged with p1(1-p2) + p2(1-p1).
    """
    D, K = circuit.num_detectors, circuit.num_observables
    R = D + K
    rows_of, ndet = _record_rows(circuit)
    if ndet != D:
        raise ValueError(f'circuit declares {ndet} detectors, header says {D}')
    # sx[q]: rows flipped by a Z error on q; sz[q]: rows flipped by an X error on q
    sx = np.zeros((circuit.num_qubits, R), dtype=bool)
    sz = np.zeros((circuit.num_qubits, R), dtype=bool)
    rec = circuit.num_measurements
    merged: Dict[bytes, float] = {}

    def key_of(row: np.ndarray) -> bytes:
        return np.packbits(row).tobytes()

    for ins in reversed(circuit.instructions):
        name, tg = ins.name, ins.targets
        if name in ('DETECTOR', 'OBSERVABLE_INCLUDE'):
            continue
        if name == 'M':
            rec -= len(tg)
            for off in range(len(tg) - 1, -1, -1):
                q, r = tg[off], rec + off
                rows = rows_of[r]
                if ins.arg and rows:
                    row = np.zeros(R, dtype=bool); row[rows] = True
                    _merge(merged, key_of(row), ins.arg)
                if rows:
                    sz[q, rows] ^= True
        elif name == 'R':
            sx[list(tg)] = False; sz[list(tg)] = False
        elif name == 'H':
            idx = list(tg)
            tmp = sx[idx].copy(); sx[idx] = sz[idx]; sz[idx] = tmp
        elif name == 'CX':
            c = np.array(tg[::2]); t = np.array(tg[1::2])
            sz[c] ^= sz[t]
            sx[t] ^= sx[c]
        elif name == 'X_ERROR':
            for q in tg:
                if sz[q].any():
                    _merge(merged, key_of(sz[q]), ins.arg)
        elif name == 'Z_ERROR':
            for q in tg:
                if sx[q].any():
                    _merge(merged, key_of(sx[q]), ins.arg)
        elif name == 'DEPOLARIZE2':
            share = ins.arg / 15.0
            for a, b in zip(tg[::2], tg[1::2]):
                basis_rows = (sz[a], sx[a], sz[b], sx[b])   # X_a, Z_a, X_b, Z_b
                if not any(r.any() for r in basis_rows):
                    continue
                channel: Dict[bytes, float] = {}
                for combo in range(1, 16):
                    row = np.zeros(R, dtype=bool)
                    for bit in range(4):
                        if combo >> bit & 1:
                            row ^= basis_rows[bit]
                    if row.any():
                        kk = key_of(row)
                        channel[kk] = channel.get(kk, 0.0) + share
                for kk, p in channel.items():
                    _merge(merged, kk, p)
        else:
            raise ValueError(f'unsupported instruction {name}')

    faults: List[Tuple[Tuple[int, ...], int, float]] = []
    silent: List[Tuple[Tuple[int, ...], int, float]] = []
    for kk, p in merged.items():
        row = np.unpackbits(np.frombuffer(kk, dtype=np.uint8), count=R).astype(bool)
        dets = tuple(int(d) for d in np.flatnonzero(row[:D]))
        mask = 0
        for b in np.flatnonzero(row[D:]):
            mask |= 1 << int(b)
        if dets:
            faults.append((dets, mask, p))
        elif mask:
            silent.append((dets, mask, p))
    dem = _assemble(faults, silent, D, K, circuit.provenance())

    expected = None
    if circuit.noise.p > 0:
        try:
            expected = predicted_fault_count(circuit.n, circuit.w, circuit.rounds)
        except NonIntegral:
            expected = None
    dem = Dem(dem.faults, D, K, dem.provenance, dem.undetectable, expected)
    if expected is not None and expected != len(dem.faults):
        if strict:
            raise CountMismatch(expected, len(dem.faults))
        if log:
            log(f'fault count {len(dem.faults)} differs from n(wT+T/2+1) = {expected}')
    return dem


def _sort_key(item):
    dets, mask, _ = item
    return (dets[0] if dets else -1, len(dets), mask, dets)


def _assemble(faults, silent, D: int, K: int, provenance: Dict[str, object]) -> Dem:
    faults = sorted(faults, key=_sort_key)
    silent = sorted(silent, key=lambda it: it[1])
    fs = tuple(Fault(i, float(p), dets, mask) for i, (dets, mask, p) in enumerate(faults))
    us = tuple(Fault(i, float(p), (), mask) for i, (_, mask, p) in enumerate(silent))
    return Dem(fs, D, K, dict(provenance), us)


def dem_from_faults(records: Iterable[Tuple[Sequence[int], int, float]], num_detectors: int,
                    num_observables: int, provenance: Optional[Dict[str, object]] = None) -> Dem:
    """Assemble a Dem from (detectors, mask, p) triples, merging duplicates; used by tests and windows."""
    acc: Dict[Tuple[Tuple[int, ...], int], float] = {}
    for dets, mask, p in records:
        key = (tuple(sorted(int(d) for d in dets)), int(mask))
        q = acc.get(key)
        acc[key] = p if q is None else q * (1 - p) + p * (1 - q)
    faults = [(d, m, p) for (d, m), p in acc.items() if d]
    silent = [(d, m, p) for (d, m), p in acc.items() if not d and m]
    return _assemble(faults, silent, num_detectors, num_observables, provenance or {})


# ---------------- fault graph ----------------
@dataclass(frozen=True)
class FaultGraph:
    adjacency: sparse.csr_matrix = field(repr=False)   # shared-detector counts, zero diagonal
    degrees: np.ndarray = field(repr=False)
    mean_degree: float = 0.0
    num_components: int = 0
    detector_incidence: Tuple[Tuple[int, ...], ...] = field(default=(), repr=False)

    def neighbors(self, fid: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[fid]:a.indptr[fid + 1]]

    def shared(self, f: int, g: int) -> int:
        return int(self.adjacency[f, g])

    def degree_histogram(self) -> Dict[int, int]:
        return dict(sorted(Counter(int(d) for d in self.degrees).items()))

    def is_symmetric(self) -> bool:
        return (self.adjacency != self.adjacency.T).nnz == 0 and not self.adjacency.diagonal().any()


def fault_graph(dem: Dem) -> FaultGraph:
    if not dem.faults:
        raise ValueError('fault graph needs a nonempty Dem')
    h = dem.check_matrix().astype(np.int32)
    shared = (h.T @ h).tocsr()
    shared.setdiag(0); shared.eliminate_zeros(); shared.sort_indices()
    degrees = np.diff(shared.indptr)
    ncomp, _ = connected_components(shared, directed=False)
    hr = h.tocsr(); hr.sort_indices()
    incidence = tuple(tuple(int(x) for x in hr.indices[hr.indptr[d]:hr.indptr[d + 1]])
                      for d in range(dem.num_detectors))
    return FaultGraph(shared, degrees, float(degrees.mean()), int(ncomp), incidence)


def write_degree_csv(graph: FaultGraph, dem: Dem, path: str) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        wr = csv.writer(f)
        wr.writerow(['fault_id', 'weight', 'degree'])
        for flt in dem.faults:
            wr.writerow([flt.id, flt.weight, int(graph.degrees[flt.id])])


# ---------------- text I/O ----------------
def _fault_line(f: Fault) -> str:
    parts = [f'error({f.probability!r})'] + [f'D{d}' for d in f.detectors]
    parts += [f'L{b}' for b in range(f.observables.bit_length()) if f.observables >> b & 1]
    return ' '.join(parts)


def export_dem(dem: Dem) -> str:
    lines = [DEM_FORMAT_HEADER]
    for k, v in sorted(dem.provenance.items()):
        lines.append(f'# {k}={v}')
    lines.append(f'# detectors={dem.num_detectors} observables={dem.num_observables}')
    lines.extend(_fault_line(f) for f in dem.faults)
    lines.extend(_fault_line(f) for f in dem.undetectable)
    return '\n'.join(lines) + '\n'


_ERR_RE = re.compile(r'^error\(([^)]+)\)((?:\s+\S+)*)\s*$')
_INT_FIELDS = ('T', 'detectors', 'observables')


def import_dem(text: str, merge: bool = False) -> Dem:
    """Parse DEM text (own format or flat externally generated models)."""
    provenance: Dict[str, object] = {}
    nd = nk = None
    records: List[Tuple[Tuple[int, ...], int, float]] = []
    max_d, max_l = -1, -1
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line == DEM_FORMAT_HEADER:
            continue
        if line.startswith('#'):
            for tok in line[1:].split():
                if '=' not in tok:
                    continue
                key, val = tok.split('=', 1)
                if key == 'detectors': nd = int(val)
                elif key == 'observables': nk = int(val)
                else: provenance[key] = _coerce(key, val)
            continue
        if line.startswith(('detector', 'logical_observable')):
            for tok in line.split()[1:]:
                if tok.startswith('D') and tok[1:].isdigit(): max_d = max(max_d, int(tok[1:]))
                if tok.startswith('L') and tok[1:].isdigit(): max_l = max(max_l, int(tok[1:]))
            continue
        mt = _ERR_RE.match(line)
        if not mt:
            raise ParseError(no, f'unrecognized record {line!r}')
        try:
            p = float(mt.group(1))
        except ValueError:
            raise ParseError(no, f'bad probability {mt.group(1)!r}')
        if not (0.0 < p < 0.5):
            raise ParseError(no, f'probability {p} outside (0, 0.5)')
        dets: List[int] = []; mask = 0
        for tok in mt.group(2).split():
            if tok.startswith('D') and tok[1:].isdigit():
                dets.append(int(tok[1:]))
            elif tok.startswith('L') and tok[1:].isdigit():
                mask ^= 1 << int(tok[1:])
            else:
                raise ParseError(no, f'unsupported target {tok!r}')
        if len(set(dets)) != len(dets):
            raise ParseError(no, 'repeated detector in one record')
        if dets:
            max_d = max(max_d, max(dets))
        if mask:
            max_l = max(max_l, mask.bit_length() - 1)
        records.append((tuple(sorted(dets)), mask, p))
    D = nd if nd is not None else max_d + 1
    K = nk if nk is not None else max_l + 1
    if max_d >= D or max_l >= K:
        raise ParseError(0, 'record references a detector or observable beyond the declared counts')
    if merge:
        return dem_from_faults(records, D, K, provenance)
    faults = [r for r in records if r[0]]
    silent = [r for r in records if not r[0] and r[1]]
    # keep file order: files written by export_dem are already canonical
    fs = tuple(Fault(i, p, d, m) for i, (d, m, p) in enumerate(faults))
    us = tuple(Fault(i, p, (), m) for i, (_, m, p) in enumerate(silent))
    return Dem(fs, D, K, provenance, us)


def _coerce(key: str, val: str):
    cast = {"T": int, "n": int, "w": int, "p": float}.get(key)
    try:
        return cast(val) if cast else val
    except ValueError:
        return val


def content_hash(text: str) -> str:
    """Git blob style sha1 of the DEM text."""
    data = text.encode('utf-8')
    return hashlib.sha1(b'blob ' + str(len(data)).encode() + b'\0' + data).hexdigest()


def dem_from_stim(circuit: Circuit) -> Dem:
    """Cross-check path: let stim build the model for the exported circuit, then import it."""
    sc = circuit.to_stim()
    model = sc.detector_error_model(decompose_errors=False, flatten_loops=True)
    dem = import_dem(str(model), merge=True)
    return Dem(dem.faults, circuit.num_detectors, circuit.num_observables, circuit.provenance(), dem.undetectable)


__all__ = [
    'Fault', 'Dem', 'FaultGraph', 'predicted_fault_count', 'weight2_fraction', 'build_dem', 'dem_from_faults',
    'fault_graph', 'write_degree_csv', 'export_dem', 'import_dem', 'content_hash', 'dem_from_stim',
]
