import os, sys, tempfile, shutil, csv

import pytest

BASE = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if BASE not in sys.path:
    sys.path.insert(0, BASE)

from bbpeel_circuit import NoiseModel, build_memory_circuit
from bbpeel_code import get_code
from bbpeel_dem import build_dem
from bbpeel_sampler import (ShotSource, fit_lambda_linearity, measure_alpha, read_shot_dump, sample,
                            write_sampler_stats_csv, write_shot_dump)


def _dem(name='kunlun-18', T=3, p=0.003):
    return build_dem(build_memory_circuit(get_code(name), T, 'Z', NoiseModel(p)))


def test_shot_depends_only_on_seed_and_index():
    dem = _dem()
    a, b = ShotSource(dem), ShotSource(dem)
    assert a.shot(7, 123) == b.shot(7, 123)
    # order of generation does not matter
    forward = [a.shot(7, i) for i in range(20)]
    backward = [b.shot(7, i) for i in reversed(range(20))][::-1]
    assert forward == backward
    assert list(sample(dem, 5, seed=7, start=10)) == [a.shot(7, i) for i in range(10, 15)]
    assert any(a.shot(7, i).triggered != a.shot(8, i).triggered for i in range(50))


def test_syndrome_is_xor_of_triggered_signatures():
    dem = _dem(p=0.01)
    src = ShotSource(dem)
    for i in range(50):
        s = src.shot(1, i)
        parity = {}
        obs = 0
        for f in s.triggered:
            obs ^= dem.faults[f].observables
            for d in dem.faults[f].detectors:
                parity[d] = parity.get(d, 0) ^ 1
        assert s.syndrome == tuple(sorted(d for d, v in parity.items() if v))
        assert s.true_observables == obs
        assert src.from_faults(s.triggered, i, 1) == s


def test_dense_syndrome_buffer():
    dem = _dem(p=0.01)
    s = ShotSource(dem).shot(0, 3)
    buf = s.dense(dem.num_detectors)
    assert len(buf) == dem.num_detectors
    assert [d for d, v in enumerate(buf) if v] == list(s.syndrome)


def test_zero_shots_are_rejected():
    with pytest.raises(ValueError):
        list(sample(_dem(), 0))
    with pytest.raises(ValueError):
        measure_alpha(_dem(), 0)


def test_noiseless_dem_never_fires():
    dem = _dem(p=0.0)
    s = ShotSource(dem).shot(0, 0)
    assert s.triggered == () and s.syndrome == ()
    stats = measure_alpha(dem, 10, n=18, T=3, p=0.0)
    assert stats.alpha is None and not stats.alpha_deviates


def test_alpha_tracks_analytic_expectation():
    dem = _dem(p=0.01)
    stats = measure_alpha(dem, 800, seed=3)
    assert (stats.n, stats.T, stats.p) == (18, 3, 0.01)
    assert stats.analytic_lambda == pytest.approx(float(dem.probabilities().sum()))
    assert abs(stats.mean_triggered - stats.analytic_lambda) < 5 * stats.stderr + 0.05
    assert stats.alpha == pytest.approx(stats.mean_triggered / (18 * 3 * 0.01))
    assert 3.0 < stats.analytic_alpha < 4.5


def test_sampler_stats_csv():
    dem = _dem(p=0.01)
    tmp = tempfile.mkdtemp(prefix='bbpeel_stats_')
    try:
        path = os.path.join(tmp, 'sampler_stats.csv')
        write_sampler_stats_csv([measure_alpha(dem, 20)], path)
        rows = list(csv.DictReader(open(path, 'r', encoding='utf-8')))
        assert len(rows) == 1 and 'alpha' in rows[0] and rows[0]['shots'] == '20'
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def test_lambda_is_linear_in_p():
    code = get_code('kunlun-18')
    slope, _, r2 = fit_lambda_linearity(
        lambda q: build_dem(build_memory_circuit(code, 3, 'Z', NoiseModel(q))), [0.001, 0.002, 0.004])
    assert slope > 0 and r2 > 0.999
    with pytest.raises(ValueError):
        fit_lambda_linearity(lambda q: None, [0.001])


def test_shot_dump_file():
    dem = _dem(p=0.01)
    src = ShotSource(dem)
    shots = [src.shot(4, i) for i in range(25)]
    tmp = tempfile.mkdtemp(prefix='bbpeel_dump_')
    try:
        path = os.path.join(tmp, 'shots.bin')
        assert write_shot_dump(path, shots) == 25
        assert read_shot_dump(path, dem, seed=4) == shots
        bare = read_shot_dump(path)
        assert [s.triggered for s in bare] == [s.triggered for s in shots]
        with open(path, 'ab') as f:
            f.write(b'\x01\x02')
        with pytest.raises(ValueError):
            read_shot_dump(path)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
