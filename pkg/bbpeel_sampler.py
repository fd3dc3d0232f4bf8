"""Monte Carlo shots drawn from a DEM with counter-based randomness, and alpha measurement."""
from __future__ import annotations

import csv, math, struct
from dataclasses import dataclass, asdict
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as sstats

from bbpeel_dem import Dem

ALPHA_REFERENCE = 3.505
ALPHA_TOLERANCE = 0.1

_SHOT_HEAD = struct.Struct('<QI')
_U32 = struct.Struct('<I')
_U64 = struct.Struct('<Q')


@dataclass(frozen=True)
class Shot:
    shot_index: int
    seed: int
    triggered: Tuple[int, ...]
    syndrome: Tuple[int, ...]        # active detectors, ascending
    true_observables: int = 0

    def dense(self, num_detectors: int, out: Optional[bytearray] = None) -> bytearray:
        """Write the syndrome into a reusable buffer (lazy zeroing is the caller's job when `out` is reused)."""
        buf = out if out is not None else bytearray(num_detectors)
        for d in self.syndrome:
            buf[d] = 1
        return buf


def shot_rng(seed: int, shot_index: int) -> np.random.Generator:
    """Independent stream per (seed, shot); draw j of the stream belongs to fault j."""
    return np.random.Generator(np.random.Philox(key=int(seed) & ((1 << 128) - 1), counter=int(shot_index) << 192))


def _mask_to_list(mask: int) -> Tuple[int, ...]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return tuple(out)


class ShotSource:
    """Precomputed signature tables for one DEM; stateless apart from those tables."""

    def __init__(self, dem: Dem):
        self.dem = dem
        self.probs = dem.probabilities()
        self.sig_masks = dem.signature_masks()
        self.obs_masks = dem.observable_masks()

    def shot(self, seed: int, shot_index: int) -> Shot:
        if not len(self.probs):
            return Shot(shot_index, seed, (), (), 0)
        draws = shot_rng(seed, shot_index).random(len(self.probs))
        fired = np.flatnonzero(draws < self.probs)
        syn = 0; obs = 0
        for f in fired:
            syn ^= self.sig_masks[f]; obs ^= self.obs_masks[f]
        return Shot(shot_index, seed, tuple(int(f) for f in fired), _mask_to_list(syn), obs)

    def from_faults(self, faults: Sequence[int], shot_index: int = -1, seed: int = 0) -> Shot:
        """Build a shot from an explicit fault set (used by oracles and collision tests)."""
        syn = 0; obs = 0
        for f in faults:
            syn ^= self.sig_masks[f]; obs ^= self.obs_masks[f]
        return Shot(shot_index, seed, tuple(sorted(faults)), _mask_to_list(syn), obs)


def sample(dem: Dem, shots: int, seed: int = 0, start: int = 0) -> Iterator[Shot]:
    """Yield shots start..start+shots-1; each depends only on (seed, shot_index)."""
    if shots < 1:
        raise ValueError('shots must be >= 1')
    src = ShotSource(dem)
    for i in range(start, start + shots):
        yield src.shot(seed, i)


@dataclass(frozen=True)
class SamplerStats:
    shots: int
    mean_triggered: float
    stderr: float
    alpha: Optional[float]
    alpha_stderr: Optional[float]
    analytic_lambda: float
    analytic_alpha: Optional[float]
    n: int
    T: int
    p: float

    @property
    def alpha_deviates(self) -> bool:
        return self.alpha is not None and abs(self.alpha - ALPHA_REFERENCE) > ALPHA_TOLERANCE

    def as_dict(self) -> dict:
        return asdict(self)


def measure_alpha(dem: Dem, shots: int, seed: int = 0, n: Optional[int] = None, T: Optional[int] = None,
                  p: Optional[float] = None) -> SamplerStats:
    """alpha = lambda_hat / (n T p); n, T, p default to the DEM provenance."""
    if shots < 1:
        raise ValueError('shots must be >= 1')
    prov = dem.provenance
    T = int(T if T is not None else prov.get('T', 1))
    n = int(n if n is not None else prov.get('n', 2 * dem.num_detectors // (T + 1)))
    p = float(p if p is not None else prov.get('p', 0.0))
    probs = dem.probabilities()
    analytic = float(probs.sum())
    counts = np.zeros(shots, dtype=np.int64)
    if len(probs):
        for i in range(shots):
            counts[i] = int(np.count_nonzero(shot_rng(seed, i).random(len(probs)) < probs))
    lam = float(counts.mean())
    se = float(counts.std(ddof=1) / math.sqrt(shots)) if shots > 1 else 0.0
    scale = n * T * p
    if scale <= 0:
        return SamplerStats(shots, lam, se, None, None, analytic, None, n, T, p)
    return SamplerStats(shots, lam, se, lam / scale, se / scale, analytic, analytic / scale, n, T, p)


def write_sampler_stats_csv(rows: Sequence[SamplerStats], path: str) -> None:
    fields = list(SamplerStats.__dataclass_fields__)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        wr = csv.DictWriter(f, fieldnames=fields)
        wr.writeheader()
        for r in rows:
            wr.writerow(r.as_dict())


def fit_lambda_linearity(dem_builder: Callable[[float], Dem], p_grid: Sequence[float]) -> Tuple[float, float, float]:
    """Fit the expected trigger count sum(p_f) against p. Returns (slope, intercept, r_squared)."""
    if len(p_grid) < 2:
        raise ValueError('need at least two p values')
    lams = [float(dem_builder(p).probabilities().sum()) for p in p_grid]
    fit = sstats.linregress(np.asarray(p_grid, dtype=float), np.asarray(lams))
    return float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)


# ---------------- binary shot dumps ----------------
def write_shot_dump(path: str, shots: Sequence[Shot]) -> int:
    """Records: (shot_index u64, count u32, fault ids u32 * count, observables u64), little endian."""
    written = 0
    with open(path, 'wb') as f:
        for s in shots:
            f.write(_SHOT_HEAD.pack(s.shot_index, len(s.triggered)))
            for fid in s.triggered:
                f.write(_U32.pack(fid))
            f.write(_U64.pack(s.true_observables))
            written += 1
    return written


def read_shot_dump(path: str, dem: Optional[Dem] = None, seed: int = 0) -> List[Shot]:
    """Read records back; with a DEM the syndromes are recomputed from the fault lists."""
    src = ShotSource(dem) if dem is not None else None
    out: List[Shot] = []
    with open(path, 'rb') as f:
        data = f.read()
    off = 0
    while off < len(data):
        if off + _SHOT_HEAD.size > len(data):
            raise ValueError(f'truncated shot record at byte {off}')
        idx, cnt = _SHOT_HEAD.unpack_from(data, off); off += _SHOT_HEAD.size
        end = off + 4 * cnt + 8
        if end > len(data):
            raise ValueError(f'truncated shot record at byte {off}')
        fids = tuple(np.frombuffer(data, dtype='<u4', count=cnt, offset=off).tolist()) if cnt else ()
        off += 4 * cnt
        (obs,) = _U64.unpack_from(data, off); off += 8
        if src is not None:
            s = src.from_faults(fids, idx, seed)
            out.append(Shot(idx, seed, s.triggered, s.syndrome, obs))
        else:
            out.append(Shot(idx, seed, fids, (), obs))
    return out


__all__ = [
    'Shot', 'ShotSource', 'SamplerStats', 'sample', 'measure_alpha', 'shot_rng', 'write_sampler_stats_csv',
    'fit_lambda_linearity', 'write_shot_dump', 'read_shot_dump', 'ALPHA_REFERENCE', 'ALPHA_TOLERANCE',
]
