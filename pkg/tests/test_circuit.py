import os, sys, importlib.util

import pytest

BASE = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if BASE not in sys.path:
    sys.path.insert(0, BASE)

from bbpeel_circuit import NoiseModel, build_memory_circuit, build_schedule
from bbpeel_code import get_code
from bbpeel_errors import UnsupportedBasis


@pytest.mark.parametrize('name,T', [('kunlun-18', 1), ('kunlun-18', 4), ('bb-32', 3), ('gross-72', 2)])
def test_detector_and_observable_counts(name, T):
    code = get_code(name)
    circ = build_memory_circuit(code, T, 'Z', NoiseModel(0.001))
    assert circ.num_detectors == (code.n // 2) * (T + 1)
    assert circ.num_observables == code.k
    assert circ.num_qubits == 2 * code.n
    # n/2 + n/2 ancilla readouts per round, n data readouts at the end
    assert circ.num_measurements == code.n * T + code.n
    assert sum(1 for i in circ.instructions if i.name == 'DETECTOR') == circ.num_detectors


def test_noisy_cnots_feed_the_measured_basis_only():
    code = get_code('gross-72')
    circ = build_memory_circuit(code, 3, 'Z', NoiseModel(0.002))
    assert circ.noisy_cnot_count() == {'measured': code.n * code.w, 'opposite': 0}
    full = build_memory_circuit(code, 3, 'Z', NoiseModel(0.002, opposite_basis_noise=True))
    assert full.noisy_cnot_count() == {'measured': code.n * code.w, 'opposite': code.n * code.w}


def test_x_basis_mirrors_z_basis():
    code = get_code('bb-32')
    cz = build_memory_circuit(code, 2, 'Z', NoiseModel(0.001))
    cx = build_memory_circuit(code, 2, 'x', NoiseModel(0.001))
    assert cx.basis == 'X'
    assert cx.num_detectors == cz.num_detectors
    assert cx.noisy_cnot_count()['measured'] == code.n * code.w


def test_unsupported_basis_and_rounds():
    code = get_code('kunlun-18')
    with pytest.raises(UnsupportedBasis):
        build_memory_circuit(code, 2, 'Y')
    with pytest.raises(ValueError):
        build_memory_circuit(code, 0)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(0.2)
    with pytest.raises(ValueError):
        NoiseModel(0.001, cnot=-1.0)
    nm = NoiseModel(0.001, measure=2.0)
    assert nm.p_measure == pytest.approx(0.002) and nm.p_cnot == pytest.approx(0.001)


def test_noiseless_circuit_has_no_noise_instructions():
    circ = build_memory_circuit(get_code('kunlun-18'), 3, 'Z', NoiseModel(0.0))
    assert not any(i.name in ('DEPOLARIZE2', 'X_ERROR', 'Z_ERROR') for i in circ.instructions)
    assert all(i.arg is None for i in circ.instructions if i.name == 'M')


def test_schedule_layers_cover_every_check_once():
    code = get_code('gross-72')
    sched = build_schedule(code, 'Z')
    assert len(sched.measured) == len(sched.opposite) == 2 * code.w
    half = code.n // 2
    for layer in sched.measured:
        anc = sorted(t for _, t in layer)
        data = sorted(c for c, _ in layer)
        assert anc == list(range(code.n + half, 2 * code.n))
        assert len(set(data)) == half
    assert sched.describe().split()[0].startswith('A[')
    assert sched.digest() == build_schedule(code, 'Z').digest()


def test_text_export_uses_record_lookbacks():
    circ = build_memory_circuit(get_code('kunlun-18'), 2, 'Z', NoiseModel(0.001))
    text = circ.to_text()
    lines = text.splitlines()
    det = [l for l in lines if l.startswith('DETECTOR')]
    assert len(det) == circ.num_detectors
    assert all('rec[-' in l for l in det)
    assert any(l.startswith('OBSERVABLE_INCLUDE(0) rec[-') for l in lines)
    assert any(l.startswith('DEPOLARIZE2(0.001) ') for l in lines)
    assert circ.provenance()['T'] == 2 and circ.provenance()['code'] == 'kunlun-18'


@pytest.mark.skipif(importlib.util.find_spec('stim') is None, reason='stim not installed')
def test_text_export_parses_in_stim():
    circ = build_memory_circuit(get_code('kunlun-18'), 3, 'Z', NoiseModel(0.001))
    sc = circ.to_stim()
    assert sc.num_detectors == circ.num_detectors
    assert sc.num_observables == circ.num_observables
    # deterministic detectors: the noiseless twin never fires
    clean = build_memory_circuit(get_code('kunlun-18'), 3, 'Z', NoiseModel(0.0)).to_stim()
    dets, obs = clean.compile_detector_sampler().sample(16, separate_observables=True)
    assert not dets.any() and not obs.any()
