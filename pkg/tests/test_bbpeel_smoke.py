"""Smoke tests for the bbpeel harness and every CLI verb.

Runs that would reach the BP fallback use p = 0 unless ldpc is installed, so the
suite works without the optional decoder backend.
"""
from __future__ import annotations

import csv, json, os, sys, tempfile, importlib.util

import pytest

BASE = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if BASE not in sys.path:
    sys.path.insert(0, BASE)

from bbpeel import main as bbpeel_main
from bbpeel_core import (ExperimentConfig, ShotRecord, bp_only, headless_main, kunlun_repro, measure_peel, run_arm,
                         run_sweep, summarize_arm)
from bbpeel_circuit import NoiseModel, build_memory_circuit
from bbpeel_code import get_code
from bbpeel_decoder import DecoderConfig
from bbpeel_dem import build_dem

HAS_LDPC = importlib.util.find_spec('ldpc') is not None


def _dem(name='kunlun-18', T=2, p=0.003):
    return build_dem(build_memory_circuit(get_code(name), T, 'Z', NoiseModel(p)))


def test_summarize_arm_counts_phases():
    recs = [ShotRecord(0, 'peel', 2, 0, 1, 1), ShotRecord(1, 'pair', 0, 2, 0, 1), ShotRecord(2, 'bp', 1, 3, 0, 0),
            ShotRecord(3, 'peel', 0, 0, 0, 0)]
    rep = summarize_arm(recs, 'toy', 0.01, 4, 'greedy')
    assert (rep.shots, rep.failures, rep.ler) == (4, 1, 0.25)
    assert rep.phase_fractions == {'peel': 0.5, 'pair': 0.25, 'bp': 0.25}
    assert rep.full_clear == 2
    assert rep.lo < 0.25 < rep.hi
    assert rep.ler_per_cycle == pytest.approx(1 - 0.75 ** 0.25)
    assert rep.overlaps(rep)


def test_bp_only_switches_off_greedy_phases():
    cfg = bp_only(DecoderConfig(bp_iters=7))
    assert (cfg.use_peel, cfg.use_pairs, cfg.bp_iters) == (False, False, 7)


def test_measure_peel_rates_and_kappa():
    m = measure_peel(_dem(p=0.003), 300, seed=1)
    assert 0.5 < m.rate <= 1.0 and m.kappa.pure == 0
    d = m.as_dict()
    assert d['mode'] == 'queue' and d['interval'][0] <= m.rate <= d['interval'][1]


def test_noiseless_sweep_has_no_failures():
    cfg = ExperimentConfig(mode='sweep', code='kunlun-18', rounds=2, p_grid=[0.0], shots=40, compare_bp=True,
                           per_shot=True)
    res = run_sweep(cfg)
    assert [r.arm for r in res.ler] == ['greedy', 'bp']
    assert all(r.failures == 0 and r.phase_fractions['peel'] == 1.0 for r in res.ler)
    assert set(res.records) == {'0.0/greedy', '0.0/bp'}
    assert list(res.dem_hashes) == ['0.0']


@pytest.mark.skipif(not HAS_LDPC, reason='ldpc not installed')
def test_run_arm_worker_count_does_not_change_results():
    dem = _dem(p=0.004)
    one = run_arm(dem, DecoderConfig(), 256, seed=9, workers=1)
    two = run_arm(dem, DecoderConfig(), 256, seed=9, workers=2)
    strip = lambda rs: [(r.shot, r.phase, r.peeled, r.residual_w, r.obs_pred, r.obs_true) for r in rs]
    assert strip(one) == strip(two)


@pytest.mark.skipif(not HAS_LDPC, reason='ldpc not installed')
def test_kunlun_repro_small():
    rep = kunlun_repro(200, seed=0, rounds=3)
    assert (rep.p, rep.rounds, rep.shots) == (0.003, 3, 200)
    assert rep.greedy.arm == 'greedy' and rep.bp.arm == 'bp'
    assert rep.dem_hash == rep.greedy.dem_hash == rep.bp.dem_hash
    assert isinstance(rep.ordering_ok, bool)


@pytest.mark.parametrize('args', [
    ['code', '--code', 'kunlun-18', '--check'],
    ['circuit', '--code', 'gross-72', '--rounds', '2'],
    ['dem', '--code', 'bb-32', '--rounds', '3', '--shots', '50', '--p-grid', '0.001,0.002', '--check'],
    ['collisions', '--code', 'kunlun-18', '--rounds', '2', '--p', '0.003'],
    ['theory', '--code', 'kunlun-18', '--rounds', '3', '--p', '0.01', '--shots', '200', '--baseline-trials', '5'],
    ['theory', '--code', 'kunlun-18', '--rounds', '2', '--p', '0.01', '--shots', '100', '--mode-study',
     '--peel-predicate', 'truth'],
    ['decode', '--code', 'kunlun-18', '--rounds', '2', '--p', '0', '--shots', '20'],
    ['stream', '--code', 'bb-32', '--rounds', '4', '--p', '0', '--shots', '10'],
    ['bench', '--code', 'kunlun-18', '--rounds', '2', '--p', '0', '--shots', '30', '--warmup', '5'],
    ['repro-kunlun', '--rounds', '2', '--p-grid', '0', '--shots', '20'],
])
def test_verbs_exit_zero(args, capsys):
    assert headless_main(args) == 0
    assert '[error]' not in capsys.readouterr().err


@pytest.mark.skipif(not HAS_LDPC, reason='ldpc not installed')
@pytest.mark.parametrize('args', [
    ['decode', '--code', 'kunlun-18', '--rounds', '3', '--p', '0.004', '--shots', '100', '--compare-bp'],
    ['stream', '--code', 'bb-32', '--rounds', '6', '--p', '0.002', '--shots', '30'],
    ['bench', '--code', 'kunlun-18', '--rounds', '3', '--p', '0.003', '--shots', '50', '--warmup', '10'],
])
def test_noisy_verbs_exit_zero(args, capsys):
    assert headless_main(args) == 0


def test_decode_writes_per_shot_csv(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        rc = bbpeel_main(['decode', '--code', 'kunlun-18', '--rounds', '2', '--p', '0', '--shots', '12', '--out', tmp])
        assert rc == 0
        rows = list(csv.DictReader(open(os.path.join(tmp, 'shots_greedy_p0.0.csv'), 'r', encoding='utf-8')))
        assert len(rows) == 12 and all(r['fail'] == '0' for r in rows)
        for name in ('sweep.csv', 'latency.csv'):
            assert os.path.exists(os.path.join(tmp, name))


def test_theory_writes_table_and_collisions(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        rc = headless_main(['theory', '--code', 'kunlun-18', '--rounds', '3', '--p', '0.003', '--shots', '100',
                            '--out', tmp, '--report', 'json'])
        assert rc == 0
        table = open(os.path.join(tmp, 'theory.md'), 'r', encoding='utf-8').read()
        assert table.startswith('| quantity | measured | reference |')
        data = json.load(open(os.path.join(tmp, 'bbpeel_report.json'), 'r', encoding='utf-8'))
        res = data['results']
        assert res['peel']['kappa']['pure'] == 0
        assert set(res['prediction']) == {'value', 'lam', 'valid'}
        assert res['theory']['params']['n'] == 18


def test_mode_study_rows_are_ordered():
    from bbpeel_core import mode_ordering_holds, peel_mode_study
    from bbpeel_theory import TheoryParams, gamma_analytic
    dem = _dem(p=0.006)
    params = TheoryParams(3.5, 0.01, 0.18, gamma_analytic(0.18, 3.5, 2), 0.8, 1.0, 2, 18)
    rows = peel_mode_study(dem, get_code('kunlun-18'), 2, 0.006, params, 300, seed=4)
    assert [(r.predicate, r.mode) for r in rows] == [(a, b) for a in ('decoder', 'truth')
                                                      for b in ('single', 'queue', 'batch')]
    assert mode_ordering_holds(rows)
    by = {(r.predicate, r.mode): r for r in rows}
    assert by['decoder', 'single'].cleared == by['decoder', 'queue'].cleared
    for r in rows:
        assert (r.A_eff is None) == (r.rate in (0.0, 1.0))
    m = measure_peel(dem, 300, seed=4, mode='single', trace=False, predicate='truth')
    assert m.cleared == by['truth', 'single'].cleared and m.as_dict()['predicate'] == 'truth'


@pytest.mark.skipif(not HAS_LDPC, reason='ldpc not installed')
def test_bench_reports_a_clean_peel_hot_path():
    from bbpeel_core import bench
    reps = bench(ExperimentConfig(mode='bench', code='kunlun-18', rounds=2, p=0.003, shots=80, warmup=10))
    assert [r.arm for r in reps] == ['greedy', 'bp']
    assert reps[0].alloc_free is True and reps[1].alloc_free is None
