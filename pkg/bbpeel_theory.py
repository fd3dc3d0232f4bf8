"""Analytical peeling theory computed from the DEM: birthday constants, collision
classification, the peel-success prediction, gamma fits, random-graph baseline and kappa."""
from __future__ import annotations

import csv, math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import networkx as nx

from bbpeel_dem import Dem, Fault, FaultGraph, fault_graph
from bbpeel_decoder import PeelDecoder, PeelMode, UnblockEvent
from bbpeel_errors import OutOfValidity, RewireFailure
from bbpeel_stats import coefficient_of_variation, weighted_r2, wilson_half_width

CLUSTER_FACTOR = 0.70
VALIDITY_LAMBDA = 2.0

# 15 (T, p) points; every point keeps lambda >= 2 for n >= 144 at alpha ~ 3.5
TP_GRID: Tuple[Tuple[int, float], ...] = (
    (3, 0.002), (3, 0.003), (3, 0.004), (3, 0.005),
    (6, 0.001), (6, 0.002), (6, 0.003), (6, 0.004),
    (12, 0.0005), (12, 0.001), (12, 0.002), (12, 0.003),
    (24, 0.0005), (24, 0.001), (24, 0.002),
)


@dataclass(frozen=True)
class TheoryParams:
    alpha: float
    beta: float
    c: float
    gamma_analytic: float
    A0: float
    B: float
    T: int
    n: int
    A_single: float = 1.0
    cluster_factor: float = CLUSTER_FACTOR
    dem_hash: str = ''

    def gamma_at(self, T: int) -> float:
        return gamma_analytic(self.c, self.alpha, T)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PeelPrediction:
    value: float
    lam: float
    valid: bool

    def __float__(self) -> float:
        return self.value


@dataclass
class CollisionReport:
    total_pairs: int
    buckets: Dict[int, Tuple[int, int]]     # shared-k -> (count, resolved)
    false_pairs: int
    A0: float
    pairs: Optional[List[Tuple[int, int, int, bool]]] = field(default=None, repr=False)

    def bucket_rates(self) -> Dict[int, float]:
        return {k: (r / c if c else 0.0) for k, (c, r) in sorted(self.buckets.items())}

    def as_dict(self) -> dict:
        return {'total_pairs': self.total_pairs, 'false_pairs': self.false_pairs, 'A0': self.A0,
                'buckets': {str(k): {'count': c, 'resolved': r} for k, (c, r) in sorted(self.buckets.items())}}


# ---------------- constants ----------------
def birthday_params(graph: FaultGraph, dem: Dem, n: Optional[int] = None) -> Tuple[float, float]:
    """beta = mean_degree / (2 N_faults); c = beta * n."""
    n = int(n if n is not None else dem.provenance.get('n', 0))
    N = len(dem.faults)
    beta = graph.mean_degree / (2.0 * N) if N else 0.0
    return beta, beta * n


def gamma_analytic(c: float, alpha: float, T: int) -> float:
    return c * alpha * alpha * T * T


def density_factor(c: float, alpha: float, cluster_factor: float = CLUSTER_FACTOR) -> float:
    return cluster_factor * 2.0 * c * alpha


def birthday_bound(beta: float, lam: float) -> float:
    """Single-pass peel probability exp(-beta lambda^2)."""
    return math.exp(-beta * lam * lam)


def theory_params(dem: Dem, graph: FaultGraph, alpha: float, A0: float, T: Optional[int] = None,
                  n: Optional[int] = None, cluster_factor: float = CLUSTER_FACTOR) -> TheoryParams:
    T = int(T if T is not None else dem.provenance.get('T', 1))
    n = int(n if n is not None else dem.provenance.get('n', 0))
    beta, c = birthday_params(graph, dem, n)
    return TheoryParams(alpha, beta, c, gamma_analytic(c, alpha, T), A0, density_factor(c, alpha, cluster_factor),
                        T, n, cluster_factor=cluster_factor, dem_hash=dem.content_hash())


def predict_peel(n: int, p: float, T: int, params: TheoryParams, strict: bool = False) -> PeelPrediction:
    """exp(-A0 * gamma(T) * exp(-B T p) * n p^2); flagged invalid when alpha n T p < 2."""
    lam = params.alpha * n * T * p
    if p == 0:
        return PeelPrediction(1.0, 0.0, False)
    gamma_eff = params.gamma_at(T) * params.A0 * math.exp(-params.B * T * p)
    value = math.exp(-gamma_eff * n * p * p)
    if lam < VALIDITY_LAMBDA:
        if strict:
            raise OutOfValidity(value, lam)
        return PeelPrediction(value, lam, False)
    return PeelPrediction(value, lam, True)


# ---------------- collision classification ----------------
_WORKER: Optional[PeelDecoder] = None


def _init_worker(dem: Dem) -> None:
    global _WORKER
    _WORKER = PeelDecoder(dem)


def _classify_chunk(pairs: Sequence[Tuple[int, int]]) -> List[bool]:
    return _classify_with(_WORKER, pairs)


def _classify_with(st: PeelDecoder, pairs: Iterable[Tuple[int, int]]) -> List[bool]:
    out = []
    for f, g in pairs:
        sigma = sorted(set(st.sigs[f]).symmetric_difference(st.sigs[g]))
        chosen, residual, _ = st.peel_active(sigma, PeelMode.QUEUE)
        out.append(not residual and st.observables_of(chosen) == st.obs[f] ^ st.obs[g])
    return out


def collision_pairs(graph: FaultGraph) -> List[Tuple[int, int, int]]:
    """Unordered fault pairs sharing >= 1 detector, with the shared count."""
    upper = graph.adjacency.tocoo()
    keep = upper.row < upper.col
    return sorted(zip(upper.row[keep].tolist(), upper.col[keep].tolist(), upper.data[keep].tolist()))


def classify_collisions(dem: Dem, graph: FaultGraph, workers: int = 1, keep_pairs: bool = False,
                        chunk: int = 4096) -> CollisionReport:
    pairs = collision_pairs(graph)
    plain = [(f, g) for f, g, _ in pairs]
    if workers > 1 and len(plain) > chunk:
        chunks = [plain[i:i + chunk] for i in range(0, len(plain), chunk)]
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(dem,)) as ex:
            resolved = [r for part in ex.map(_classify_chunk, chunks) for r in part]
    else:
        resolved = _classify_with(PeelDecoder(dem, graph=graph), plain)
    buckets: Dict[int, List[int]] = {}
    for (f, g, k), ok in zip(pairs, resolved):
        b = buckets.setdefault(int(k), [0, 0])
        b[0] += 1; b[1] += int(ok)
    false_pairs = sum(resolved)
    total = len(pairs)
    return CollisionReport(total, {k: (c, r) for k, (c, r) in sorted(buckets.items())}, false_pairs,
                           1.0 - false_pairs / total if total else 1.0,
                           [(f, g, k, ok) for (f, g, k), ok in zip(pairs, resolved)] if keep_pairs else None)


def write_collision_csv(report: CollisionReport, path: str) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        wr = csv.writer(f)
        wr.writerow(['shared', 'count', 'resolved', 'resolved_frac'])
        for k, (c, r) in sorted(report.buckets.items()):
            wr.writerow([k, c, r, f'{(r / c if c else 0.0):.6f}'])


# ---------------- gamma fits ----------------
@dataclass(frozen=True)
class GammaMeasurement:
    n: int
    p: float
    T: int
    p_peel: float
    shots: int


@dataclass
class GammaFit:
    gamma_eff: List[float]
    weights: List[float]
    r2: Optional[float]
    A_eff: List[float]
    A_eff_mean: Optional[float]
    A_eff_cv: Optional[float]


def gamma_eff_of(m: GammaMeasurement) -> float:
    if not (0.0 < m.p_peel < 1.0):
        raise ValueError(f'P_peel must lie in (0, 1) (got {m.p_peel})')
    return -math.log(m.p_peel) / (m.n * m.p * m.p)


def a_eff_of(m: GammaMeasurement, params: TheoryParams) -> float:
    """Effective collision factor of one point: gamma_eff over the analytic gamma at its T."""
    return gamma_eff_of(m) / params.gamma_at(m.T)


def fit_gamma_eff(measurements: Sequence[GammaMeasurement], params: Optional[TheoryParams] = None) -> GammaFit:
    """Invert each point to gamma_eff; score the peel formula against them with Wilson-derived weights."""
    if not measurements:
        raise ValueError('no measurements')
    gam = [gamma_eff_of(m) for m in measurements]
    weights = []
    for m in measurements:
        hw = wilson_half_width(int(round(m.p_peel * m.shots)), m.shots) if m.shots else 0.0
        sd = hw / (m.p_peel * m.n * m.p * m.p) if hw > 0 else 0.0
        weights.append(1.0 / (sd * sd) if sd > 0 else 1.0)
    if params is None:
        return GammaFit(gam, weights, None, [], None, None)
    pred = [params.gamma_at(m.T) * params.A0 * math.exp(-params.B * m.T * m.p) for m in measurements]
    a_eff = [a_eff_of(m, params) for m in measurements]
    r2 = weighted_r2(gam, pred, weights) if len(gam) > 1 else None
    return GammaFit(gam, weights, r2, a_eff, float(np.mean(a_eff)), coefficient_of_variation(a_eff))


def tp_grid() -> List[Tuple[int, float]]:
    return list(TP_GRID)


# ---------------- random-graph baseline ----------------
def _rewire(edges: List[Tuple[int, int]], rng: np.random.Generator, max_attempts: int) -> List[Tuple[int, int]]:
    """Degree-preserving swaps until no (fault, detector) edge repeats."""
    counts: Dict[Tuple[int, int], int] = {}
    for e in edges:
        counts[e] = counts.get(e, 0) + 1
    attempts = 0
    while True:
        dup = next((i for i, e in enumerate(edges) if counts[e] > 1), None)
        if dup is None:
            return edges
        f, d = edges[dup]
        while True:
            attempts += 1
            if attempts > max_attempts:
                raise RewireFailure(attempts - 1)
            j = int(rng.integers(len(edges)))
            f2, d2 = edges[j]
            if f2 == f or d2 == d or (f, d2) in counts or (f2, d) in counts:
                continue
            for old in ((f, d), (f2, d2)):
                counts[old] -= 1
                if not counts[old]:
                    del counts[old]
            edges[dup], edges[j] = (f, d2), (f2, d)
            counts[(f, d2)] = 1; counts[(f2, d)] = 1
            break


def random_incidence_dem(dem: Dem, seed: int, max_attempts: int = 100_000) -> Dem:
    """Same fault-weight and detector-degree sequences, random pairing, permuted observable masks."""
    N, D = len(dem.faults), dem.num_detectors
    aseq = [f.weight for f in dem.faults]
    deg = [0] * D
    for f in dem.faults:
        for d in f.detectors:
            deg[d] += 1
    rng = np.random.default_rng(seed)
    g = nx.bipartite.configuration_model(aseq, deg, create_using=nx.MultiGraph(), seed=int(rng.integers(2**31)))
    edges = [(min(u, v), max(u, v) - N) for u, v in g.edges()]
    edges = _rewire(edges, rng, max_attempts)
    sig: List[List[int]] = [[] for _ in range(N)]
    for f, d in edges:
        sig[f].append(d)
    masks = [dem.faults[i].observables for i in rng.permutation(N)]
    faults = tuple(Fault(i, dem.faults[i].probability, tuple(sorted(sig[i])), masks[i]) for i in range(N))
    return Dem(faults, D, dem.num_observables, dict(dem.provenance, rewired=seed))


def random_graph_baseline(dem: Dem, trials: int = 10, seed: int = 0, identity: bool = False,
                          workers: int = 1) -> Tuple[float, float, List[float]]:
    """Mean and standard deviation of A0 over rewired incidences."""
    if trials < 5:
        raise ValueError('trials must be >= 5')
    values = []
    for t in range(trials):
        d = dem if identity else random_incidence_dem(dem, seed + t)
        values.append(classify_collisions(d, fault_graph(d), workers=workers).A0)
    arr = np.asarray(values)
    return float(arr.mean()), float(arr.std(ddof=1)), values


# ---------------- kappa ----------------
@dataclass(frozen=True)
class KappaResult:
    pure: int
    total: int

    @property
    def kappa(self) -> Optional[float]:
        return self.pure / self.total if self.total else None

    def __str__(self) -> str:
        return f'{self.pure}/{self.total}' if self.total else '0/0 (undefined)'


def measure_kappa(events: Iterable[UnblockEvent]) -> KappaResult:
    pure = total = 0
    for ev in events:
        total += 1; pure += int(ev.pure)
    return KappaResult(pure, total)


# ---------------- report ----------------
def theory_report(params: TheoryParams, collisions: CollisionReport, graph: FaultGraph,
                  reference: Optional[Dict[str, float]] = None) -> Tuple[dict, str]:
    """JSON block plus a markdown comparison table against declared reference values."""
    reference = reference or {}
    block = {'params': params.as_dict(), 'collisions': collisions.as_dict(), 'mean_degree': graph.mean_degree,
             'components': graph.num_components}
    rows = [('alpha', params.alpha, reference.get('alpha')), ('mean degree', graph.mean_degree, reference.get('dbar')),
            ('beta', params.beta, None), ('c', params.c, reference.get('c')),
            ('gamma_analytic', params.gamma_analytic, reference.get('gamma')), ('A0', params.A0, reference.get('A0')),
            ('B', params.B, reference.get('B'))]
    for k, rate in collisions.bucket_rates().items():
        rows.append((f'shared-{k} resolved', rate, reference.get(f'sh{k}')))
    lines = ['| quantity | measured | reference |', '|---|---|---|']
    for name, val, ref in rows:
        lines.append(f'| {name} | {val:.4g} | {"" if ref is None else f"{ref:.4g}"} |')
    return block, '\n'.join(lines) + '\n'


__all__ = [
    'TheoryParams', 'PeelPrediction', 'CollisionReport', 'GammaMeasurement', 'GammaFit', 'KappaResult',
    'CLUSTER_FACTOR', 'TP_GRID', 'birthday_params', 'gamma_analytic', 'density_factor', 'birthday_bound',
    'theory_params', 'predict_peel', 'collision_pairs', 'classify_collisions', 'write_collision_csv',
    'gamma_eff_of', 'a_eff_of', 'fit_gamma_eff', 'tp_grid', 'random_incidence_dem', 'random_graph_baseline',
    'measure_kappa', 'theory_report',
]
