import os, sys, importlib.util

import numpy as np
import pytest

BASE = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if BASE not in sys.path:
    sys.path.insert(0, BASE)

from bbpeel_circuit import NoiseModel, build_memory_circuit
from bbpeel_code import get_code
from bbpeel_decoder import (DecoderConfig, PeelDecoder, PeelMode, Phase, bp_osd, brute_force_decode, decode,
                            enumerate_pairs, hot_path_blocks, peel)
from bbpeel_dem import build_dem, dem_from_faults, fault_graph
from bbpeel_sampler import ShotSource
from bbpeel_theory import measure_kappa

HAS_LDPC = importlib.util.find_spec('ldpc') is not None


def _toy():
    # chain 0-1-2-3 with a boundary fault on 3; ids follow the listed order
    return dem_from_faults([((0, 1), 1, 0.01), ((1, 2), 0, 0.01), ((2, 3), 2, 0.01), ((3,), 0, 0.01)], 4, 2)


def _kunlun(T=2, p=0.003):
    return build_dem(build_memory_circuit(get_code('kunlun-18'), T, 'Z', NoiseModel(p)))


def _mask(dets):
    m = 0
    for d in dets:
        m ^= 1 << d
    return m


def test_isolated_faults_peel():
    st = PeelDecoder(_toy())
    chosen, residual, stats = st.peel_active([0, 1, 3])
    assert chosen == (0, 3) and residual == ()
    assert stats.peeled == 2 and stats.initial_weight == 3 and stats.residual_weight == 0
    assert st.observables_of(chosen) == 1


def test_blocked_syndrome_is_left_alone():
    st = PeelDecoder(_toy())
    # faults 2 and 3 are both full on {2, 3}; detector 3 has two full faults
    chosen, residual, _ = st.peel_active([2, 3])
    assert chosen == () and residual == (2, 3)
    # no full fault on {0, 2}
    assert st.peel_active([0, 2])[:2] == ((), (0, 2))


def _bridge():
    # (0,1,2) and (3,4,5) fired; (2,3) bridges them and hides both from the strict rule
    return dem_from_faults([((0, 1, 2), 1, 0.01), ((3, 4, 5), 2, 0.01), ((2, 3), 0, 0.01)], 6, 2)


def _decoy():
    # the two weight-3 faults fired; the weight-2 decoys explain the same syndrome
    # ids after sorting: 0 = (0,1), 1 = (0,1,2), 2 = (2,3,4), 3 = (3,4)
    return dem_from_faults([((0, 1, 2), 1, 0.01), ((2, 3, 4), 0, 0.01), ((0, 1), 0, 0.01), ((3, 4), 0, 0.01)], 5, 2)


def test_batch_step_clears_what_the_queue_cannot():
    st = PeelDecoder(_bridge())
    syn = [0, 1, 2, 3, 4, 5]
    for mode in (PeelMode.SINGLE_PASS, PeelMode.QUEUE):
        assert st.peel_active(syn, mode)[:2] == ((), tuple(syn))
    chosen, residual, stats = st.peel_active(syn, PeelMode.BATCH)
    # ids follow DEM order: the bridge (2, 3) sorts between the two fired faults
    assert chosen == (0, 2) and residual == ()
    assert stats.passes == 2 and st.observables_of(chosen) == 3
    # judged against the fired faults the bridge never blocks
    assert st.peel_active(syn, PeelMode.SINGLE_PASS, truth=[0, 2])[:2] == ((0, 2), ())


def test_queue_reaches_what_a_single_pass_cannot_under_truth():
    st = PeelDecoder(_decoy())
    syn = [0, 1, 3, 4]
    assert st.peel_active(syn, PeelMode.SINGLE_PASS, truth=[1, 2])[:2] == ((), (0, 1, 3, 4))
    chosen, residual, _ = st.peel_active(syn, PeelMode.QUEUE, truth=[1, 2])
    assert chosen == (0, 3) and residual == ()
    # without ground truth the decoys are peelable from the start
    assert st.peel_active(syn, PeelMode.SINGLE_PASS)[:2] == ((0, 3), ())


def test_peel_modes_are_ordered_per_shot():
    dem = _kunlun(p=0.006)
    st = PeelDecoder(dem, graph=fault_graph(dem))
    src = ShotSource(dem)
    for i in range(300):
        shot = src.shot(5, i)
        for truth in (None, shot.triggered):
            outs = {m: st.peel_active(shot.syndrome, m, truth=truth)[:2] for m in PeelMode}
            cleared = {m: not outs[m][1] for m in PeelMode}
            assert cleared[PeelMode.SINGLE_PASS] <= cleared[PeelMode.QUEUE] <= cleared[PeelMode.BATCH]
            if truth is None:
                # the strict rule never unblocks anything, so single pass and queue coincide
                assert outs[PeelMode.SINGLE_PASS] == outs[PeelMode.QUEUE]
            for m in PeelMode:
                chosen, residual = outs[m]
                assert len(set(chosen)) == len(chosen)
                # chosen faults plus residual reproduce the syndrome
                acc = _mask(residual)
                for f in chosen:
                    acc ^= st.sig_masks[f]
                assert acc == _mask(shot.syndrome)


def test_truth_predicate_rejects_unknown_faults():
    st = PeelDecoder(_toy())
    with pytest.raises(ValueError):
        st.peel_active([0, 1], truth=[7])
    assert peel(_toy(), None, [1, 1, 0, 0], PeelMode.SINGLE_PASS, truth=[0])[:2] == ((0,), ())


def test_every_single_fault_syndrome_peels_to_itself():
    dem = _kunlun()
    st = PeelDecoder(dem)
    for f in dem.faults:
        chosen, residual, _ = st.peel_active(f.detectors, PeelMode.QUEUE)
        assert (chosen, residual) == ((f.id,), ())


def test_peel_hot_path_leaves_no_allocations():
    dem = _kunlun(p=0.006)
    st = PeelDecoder(dem, DecoderConfig(use_pairs=True))
    src = ShotSource(dem)
    syns = [src.shot(2, i).syndrome for i in range(300)]
    for mode in PeelMode:
        assert hot_path_blocks(st, syns, mode) == 0, mode


def test_hot_path_check_sees_retained_results():
    class Hoarding(PeelDecoder):
        def __init__(self, *a, **kw):
            super().__init__(*a, **kw)
            self.kept = []

        def peel_active(self, *a, **kw):
            out = super().peel_active(*a, **kw)
            self.kept.append(out)
            return out

    dem = _kunlun()
    src = ShotSource(dem)
    syns = [src.shot(3, i).syndrome for i in range(50)]
    assert hot_path_blocks(Hoarding(dem), syns) > 0


def _random_dem(rng, n_faults, n_dets):
    seen = set(); recs = []
    while len(recs) < n_faults:
        w = int(rng.integers(1, 4))
        dets = tuple(sorted(int(d) for d in rng.choice(n_dets, size=w, replace=False)))
        if dets in seen:
            continue
        seen.add(dets)
        recs.append((dets, int(rng.integers(0, 4)), float(rng.uniform(0.001, 0.02))))
    return dem_from_faults(recs, n_dets, 2)


def test_single_fault_syndromes_match_exhaustive_decoder_on_random_dems():
    rng = np.random.default_rng(17)
    for _ in range(12):
        dem = _random_dem(rng, int(rng.integers(6, 13)), int(rng.integers(5, 9)))
        st = PeelDecoder(dem)
        for f in dem.faults:
            best, p_best, p_second = brute_force_decode(dem, f.detectors)
            assert p_best >= 2 * p_second
            assert best == (f.id,)
            res = st.decode_active(f.detectors)
            assert res.phase in (Phase.PEEL, Phase.PAIR)
            assert res.predicted_observables == f.observables


def test_queue_trace_has_no_unblock_events():
    dem = _kunlun(p=0.006)
    st = PeelDecoder(dem)
    src = ShotSource(dem)
    trace = []
    for i in range(200):
        st.peel_active(src.shot(9, i).syndrome, PeelMode.QUEUE, trace)
    k = measure_kappa(trace)
    assert k.pure == 0
    assert str(k) == '0/0 (undefined)' or k.kappa == 0.0


def test_pair_enumeration_on_toy():
    dem = _toy()
    st = PeelDecoder(dem)
    assert st.enumerate_pairs([0, 2]) == (0, 1)
    # a residual equal to one signature is explained by that single fault
    assert st.enumerate_pairs([1, 2]) == (1,)
    assert st.enumerate_pairs([]) == ()
    assert st.enumerate_pairs([0, 1, 2, 3, 4, 5, 6], max_weight=6) is None
    assert enumerate_pairs(dem, [0, 2]) == (0, 1)
    ranked = st.rank_candidates([0, 2], top_k=2)
    assert len(ranked) == 2 and set(ranked) <= {0, 1, 2}


def test_pair_phase_result():
    res = decode(_toy(), [1, 0, 1, 0])
    assert res.phase is Phase.PAIR
    assert res.correction == (0, 1)
    assert res.predicted_observables == 1
    assert res.residual_after_peel == 2


def test_peel_phase_result_and_functional_wrapper():
    dem = _toy()
    res = decode(dem, bytes([1, 1, 0, 1]))
    assert res.phase is Phase.PEEL and res.peeled == (0, 3) and res.predicted_observables == 1
    chosen, residual, _ = peel(dem, fault_graph(dem), [1, 1, 0, 1])
    assert chosen == (0, 3) and residual == ()
    with pytest.raises(ValueError):
        decode(dem, [1, 0])
    with pytest.raises(ValueError):
        PeelDecoder(dem).peel_active([9])


def test_peeling_agrees_with_brute_force_on_toy():
    dem = _toy()
    best, p_best, p_second = brute_force_decode(dem, [0, 1, 3])
    assert best == (0, 3)
    assert p_best > 0 and p_second == 0.0    # independent signatures
    assert PeelDecoder(dem).peel_active([0, 1, 3])[0] == best


def test_brute_force_limit():
    dem = _kunlun()
    with pytest.raises(ValueError):
        brute_force_decode(dem, [])


@pytest.mark.skipif(not HAS_LDPC, reason='ldpc not installed')
def test_bp_fallback_reproduces_syndrome():
    dem = _toy()
    res = decode(dem, [0, 0, 1, 0], DecoderConfig(osd_sweep_width=0))
    assert res.phase is Phase.BP
    assert res.correction == (2, 3)
    assert res.predicted_observables == 2


@pytest.mark.skipif(not HAS_LDPC, reason='ldpc not installed')
def test_bp_osd_functional_wrapper():
    assert bp_osd(_toy(), [0, 0, 1, 0], DecoderConfig(osd_sweep_width=0)) == (2, 3)


@pytest.mark.skipif(not HAS_LDPC, reason='ldpc not installed')
def test_bp_only_arm_on_circuit_dem():
    dem = _kunlun(p=0.003)
    st = PeelDecoder(dem, DecoderConfig(use_peel=False, use_pairs=False))
    src = ShotSource(dem)
    for i in range(40):
        shot = src.shot(11, i)
        res = st.decode_active(shot.syndrome)
        acc = 0
        for f in res.correction:
            acc ^= st.sig_masks[f]
        assert acc == _mask(shot.syndrome)
        assert res.phase in (Phase.PEEL, Phase.BP)
