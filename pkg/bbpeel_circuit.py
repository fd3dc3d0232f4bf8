"""T-round memory-experiment circuits with a parameterized circuit-level noise model.

Qubit layout: data 0..n-1, X-check ancillas n..n+n/2-1, Z-check ancillas n+n/2..2n-1.
Each round runs the opposite-basis checks first and then the measured-basis checks;
each of these phases is one CNOT layer per term of polyA followed by one per term of polyB.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from bbpeel_code import BBCode
from bbpeel_errors import UnsupportedBasis

NOISE_OPS = ('DEPOLARIZE2', 'X_ERROR', 'Z_ERROR')


@dataclass(frozen=True)
class NoiseModel:
    p: float
    cnot: float = 1.0
    measure: float = 1.0
    reset: float = 1.0
    opposite_basis_noise: bool = False

    def __post_init__(self):
        if not (0.0 <= self.p <= 0.1):
            raise ValueError(f'p must lie in [0, 0.1] (got {self.p})')
        if min(self.cnot, self.measure, self.reset) < 0:
            raise ValueError('noise multipliers must be >= 0')

    @property
    def p_cnot(self) -> float: return self.p * self.cnot
    @property
    def p_measure(self) -> float: return self.p * self.measure
    @property
    def p_reset(self) -> float: return self.p * self.reset


@dataclass(frozen=True)
class Instruction:
    name: str
    targets: Tuple[int, ...]
    arg: Optional[float] = None   # noise strength, or observable index for OBSERVABLE_INCLUDE


Layer = Tuple[Tuple[int, int], ...]   # (control, target) pairs


@dataclass(frozen=True)
class Schedule:
    """CNOT layers of one round. Each layer is labelled by the polynomial term it realises."""
    opposite: Tuple[Layer, ...]
    measured: Tuple[Layer, ...]
    labels: Tuple[str, ...]

    def digest(self) -> str:
        h = hashlib.sha1()
        for layer in self.opposite + self.measured:
            h.update(repr(layer).encode()); h.update(b'|')
        return h.hexdigest()

    def describe(self) -> str:
        return ' '.join(self.labels)


@dataclass(frozen=True)
class Circuit:
    code_name: str
    n: int
    k: int
    w: int
    rounds: int
    basis: str
    noise: NoiseModel
    schedule: Schedule = field(repr=False)
    instructions: Tuple[Instruction, ...] = field(repr=False)
    num_qubits: int = 0
    num_measurements: int = 0
    num_detectors: int = 0
    num_observables: int = 0

    @property
    def checks_per_layer(self) -> int:
        return self.n // 2

    def detector_layer(self, det: int) -> int:
        """0-based detector layer (round index; the last layer is the data readout)."""
        return det // self.checks_per_layer

    def noisy_cnot_count(self) -> Dict[str, int]:
        """Count noisy two-qubit channels per round, split by the basis they feed."""
        anc_split = self.n + self.n // 2
        out = {'measured': 0, 'opposite': 0}
        for ins in self.instructions:
            if ins.name != 'DEPOLARIZE2':
                continue
            for a, b in zip(ins.targets[::2], ins.targets[1::2]):
                anc = max(a, b)
                hit = (anc >= anc_split) if self.basis == 'Z' else (self.n <= anc < anc_split)
                out['measured' if hit else 'opposite'] += 1
        return {k: v // self.rounds for k, v in out.items()}

    def to_text(self) -> str:
        """Line-oriented export in the common stabilizer-circuit text convention (rec[-k] lookbacks)."""
        lines: List[str] = []
        measured = 0
        for ins in self.instructions:
            if ins.name == 'DETECTOR':
                lines.append('DETECTOR ' + ' '.join(f'rec[{r - measured}]' for r in ins.targets))
            elif ins.name == 'OBSERVABLE_INCLUDE':
                lines.append(f'OBSERVABLE_INCLUDE({int(ins.arg)}) ' + ' '.join(f'rec[{r - measured}]' for r in ins.targets))
            else:
                head = ins.name if ins.arg is None else f'{ins.name}({_fmt_prob(ins.arg)})'
                lines.append(head + ' ' + ' '.join(str(q) for q in ins.targets))
                if ins.name == 'M':
                    measured += len(ins.targets)
        return '\n'.join(lines) + '\n'

    def to_stim(self):
        import stim   # optional dependency (crosscheck extra)
        return stim.Circuit(self.to_text())

    def provenance(self) -> Dict[str, object]:
        return {'code': self.code_name, 'n': self.n, 'w': self.w, 'T': self.rounds, 'p': self.noise.p, 'basis': self.basis,
                'schedule': self.schedule.digest()[:12]}


def _fmt_prob(p: float) -> str:
    return repr(float(p))


def build_schedule(code: BBCode, basis: str = 'Z') -> Schedule:
    n, half = code.n, code.n // 2
    x_anc = np.arange(n, n + half)
    z_anc = np.arange(n + half, 2 * n)
    layers_x: List[Layer] = []
    layers_z: List[Layer] = []
    labels: List[str] = []
    checks = np.arange(half)
    for block, poly in (('A', code.poly_a), ('B', code.poly_b)):
        for term in poly.terms:
            shift = poly.shift(term)
            inv = np.empty_like(shift); inv[shift] = checks
            if block == 'A':
                # X check c -> left data shift(c); Z check c -> right data q with shift(q) = c
                xpairs = tuple((int(x_anc[c]), int(shift[c])) for c in checks)
                zpairs = tuple((int(half + inv[c]), int(z_anc[c])) for c in checks)
            else:
                xpairs = tuple((int(x_anc[c]), int(half + shift[c])) for c in checks)
                zpairs = tuple((int(inv[c]), int(z_anc[c])) for c in checks)
            layers_x.append(xpairs); layers_z.append(zpairs)
            labels.append(f'{block}[{term[0]},{term[1]}]')
    if basis == 'Z':
        return Schedule(tuple(layers_x), tuple(layers_z), tuple(labels))
    return Schedule(tuple(layers_z), tuple(layers_x), tuple(labels))


def build_memory_circuit(code: BBCode, T: int, basis: str = 'Z', noise: Optional[NoiseModel] = None) -> Circuit:
    """Memory experiment: T rounds of extraction, detectors on the measured basis only."""
    if T < 1:
        raise ValueError('T must be >= 1')
    basis = (basis or '').upper()
    if basis not in ('Z', 'X'):
        raise UnsupportedBasis(f'basis must be X or Z (got {basis!r})')
    noise = noise or NoiseModel(0.0)
    n, half = code.n, code.n // 2
    data = list(range(n))
    x_anc = list(range(n, n + half))
    z_anc = list(range(n + half, 2 * n))
    meas_anc, opp_anc = (z_anc, x_anc) if basis == 'Z' else (x_anc, z_anc)
    sched = build_schedule(code, basis)
    ins: List[Instruction] = []
    rec = 0

    def emit(name, targets, arg=None):
        if targets:
            ins.append(Instruction(name, tuple(int(t) for t in targets), arg))

    def noise_op(name, targets, prob, enabled=True):
        if enabled and prob > 0:
            emit(name, targets, prob)

    # data initialization in the memory basis
    emit('R', data)
    if basis == 'X':
        emit('H', data); noise_op('Z_ERROR', data, noise.p_reset)
    else:
        noise_op('X_ERROR', data, noise.p_reset)

    def phase(anc, layers, is_x_check, noisy):
        nonlocal rec
        emit('R', anc)
        if is_x_check:
            emit('H', anc); noise_op('Z_ERROR', anc, noise.p_reset, noisy)
        else:
            noise_op('X_ERROR', anc, noise.p_reset, noisy)
        for layer in layers:
            flat = [q for pair in layer for q in pair]
            emit('CX', flat)
            noise_op('DEPOLARIZE2', flat, noise.p_cnot, noisy)
        if is_x_check:
            emit('H', anc)
        emit('M', anc, noise.p_measure if (noisy and noise.p_measure > 0) else None)
        first = rec; rec += len(anc)
        return first

    meas_records: List[int] = []
    for _ in range(T):
        phase(opp_anc, sched.opposite, basis == 'Z', noise.opposite_basis_noise)
        meas_records.append(phase(meas_anc, sched.measured, basis == 'X', True))
        if len(meas_records) == 1:
            for c in range(half):
                emit('DETECTOR', [meas_records[0] + c])
        else:
            for c in range(half):
                emit('DETECTOR', [meas_records[-2] + c, meas_records[-1] + c])

    if basis == 'X':
        emit('H', data)
    emit('M', data, noise.p_measure if noise.p_measure > 0 else None)
    data_first = rec; rec += n
    h = code.check_matrix(basis)
    for c in range(half):
        support = [data_first + int(q) for q in np.flatnonzero(h[c])]
        emit('DETECTOR', [meas_records[-1] + c] + support)
    logicals = code.logicals(basis)
    for i in range(code.k):
        emit('OBSERVABLE_INCLUDE', [data_first + int(q) for q in np.flatnonzero(logicals[i])], i)

    return Circuit(code.name, n, code.k, code.w, T, basis, noise, sched, tuple(ins),
                   num_qubits=2 * n, num_measurements=rec, num_detectors=half * (T + 1),
                   num_observables=code.k)


__all__ = ['NoiseModel', 'Instruction', 'Schedule', 'Circuit', 'build_schedule', 'build_memory_circuit', 'NOISE_OPS']
