"""Bivariate bicycle code construction, logical operators and syndrome-code stopping distance.

Layout convention: monomial x^i y^j of Z_l x Z_m maps to index i*m + j. The left
data block (columns 0..lm-1) is acted on by A, the right block by B.
"""
from __future__ import annotations

import itertools, re
from dataclasses import dataclass, field
from math import comb
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import galois

from bbpeel_errors import (BBPeelError, BudgetExhausted, CommutationFailure, DegenerateCode,
                           ParseError, RankDeficiency)

GF2 = galois.GF(2)

# exhaustive codeword enumeration is used up to this row-space dimension
MAX_ENUM_DIM = 20
# support enumeration for low-weight certification is capped at this many candidates
LOW_WEIGHT_SUPPORT_BUDGET = 2_000_000
LOW_WEIGHT_LIMIT = 8


# ---------------- polynomials ----------------
@dataclass(frozen=True)
class BivariatePolynomial:
    l: int
    m: int
    terms: Tuple[Tuple[int, int], ...]

    @classmethod
    def from_terms(cls, terms: Iterable[Tuple[int, int]], l: int, m: int) -> 'BivariatePolynomial':
        reduced = [(int(i) % l, int(j) % m) for i, j in terms]
        if not reduced:
            raise ValueError('polynomial needs at least one term')
        if len(set(reduced)) != len(reduced):
            raise ValueError(f'duplicate terms after reduction mod ({l},{m}): {reduced}')
        return cls(l, m, tuple(sorted(reduced)))

    @property
    def weight(self) -> int:
        return len(self.terms)

    def monomial_matrix(self, term: Tuple[int, int]) -> np.ndarray:
        i, j = term
        return np.kron(np.roll(np.identity(self.l, dtype=np.uint8), i, axis=1),
                       np.roll(np.identity(self.m, dtype=np.uint8), j, axis=1))

    def matrix(self) -> np.ndarray:
        out = np.zeros((self.l * self.m, self.l * self.m), dtype=np.uint8)
        for t in self.terms:
            out ^= self.monomial_matrix(t)
        return out

    def shift(self, term: Tuple[int, int]) -> np.ndarray:
        """Permutation target[r] for one monomial: row r of its matrix has its single 1 at target[r]."""
        i, j = term
        r1, r2 = np.divmod(np.arange(self.l * self.m), self.m)
        return ((r1 + i) % self.l) * self.m + (r2 + j) % self.m

    def __str__(self) -> str:
        return format_polynomial(self)


_TERM_RE = re.compile(r'^(?:(?P<x>x)(?:\^(?P<xi>\d+))?)?\*?(?:(?P<y>y)(?:\^(?P<yj>\d+))?)?$')


def parse_polynomial(text: str, l: int, m: int) -> BivariatePolynomial:
    """Parse `x^3+y+y^2` style text. `1` is the identity monomial."""
    terms: List[Tuple[int, int]] = []
    for raw in (text or '').replace(' ', '').split('+'):
        if not raw:
            raise ValueError(f'empty term in polynomial {text!r}')
        if raw == '1':
            terms.append((0, 0)); continue
        mt = _TERM_RE.match(raw)
        if not mt or not (mt.group('x') or mt.group('y')):
            raise ValueError(f'cannot parse term {raw!r}')
        i = int(mt.group('xi') or 1) if mt.group('x') else 0
        j = int(mt.group('yj') or 1) if mt.group('y') else 0
        terms.append((i, j))
    return BivariatePolynomial.from_terms(terms, l, m)


def format_polynomial(poly: BivariatePolynomial) -> str:
    parts = []
    for i, j in poly.terms:
        fx = '' if i == 0 else ('x' if i == 1 else f'x^{i}')
        fy = '' if j == 0 else ('y' if j == 1 else f'y^{j}')
        parts.append('*'.join(p for p in (fx, fy) if p) or '1')
    return '+'.join(parts)


# ---------------- GF(2) helpers ----------------
def gf2_rank(mat: np.ndarray) -> int:
    if mat.size == 0:
        return 0
    return int(np.linalg.matrix_rank(GF2(np.asarray(mat, dtype=np.uint8) % 2)))


def gf2_row_basis(mat: np.ndarray) -> np.ndarray:
    """Nonzero rows of the reduced row echelon form (a basis of the row space)."""
    if mat.size == 0:
        return np.zeros((0, mat.shape[1] if mat.ndim == 2 else 0), dtype=np.uint8)
    rref = GF2(np.asarray(mat, dtype=np.uint8) % 2).row_reduce()
    keep = np.any(rref != 0, axis=1)
    return np.asarray(rref[keep], dtype=np.uint8)


def gf2_null_space(mat: np.ndarray) -> np.ndarray:
    """Rows spanning {v : mat @ v = 0}."""
    return np.asarray(GF2(np.asarray(mat, dtype=np.uint8) % 2).null_space(), dtype=np.uint8)


# ---------------- codes ----------------
@dataclass(frozen=True)
class BBCode:
    name: str
    l: int
    m: int
    poly_a: BivariatePolynomial
    poly_b: BivariatePolynomial
    n: int
    k: int
    w: int
    hx: np.ndarray = field(repr=False)
    hz: np.ndarray = field(repr=False)
    logicals_x: np.ndarray = field(repr=False)
    logicals_z: np.ndarray = field(repr=False)
    declared_d: Optional[int] = None

    def check_matrix(self, basis: str) -> np.ndarray:
        """Checks whose outcomes are compared in a `basis` memory experiment (Z memory -> Hz)."""
        return self.hz if basis.upper() == 'Z' else self.hx

    def logicals(self, basis: str) -> np.ndarray:
        return self.logicals_z if basis.upper() == 'Z' else self.logicals_x

    @property
    def params(self) -> Tuple[int, int, Optional[int]]:
        return (self.n, self.k, self.declared_d)

    def describe(self) -> Dict[str, object]:
        return {'name': self.name, 'l': self.l, 'm': self.m, 'A': str(self.poly_a), 'B': str(self.poly_b),
                'n': self.n, 'k': self.k, 'w': self.w, 'declared_d': self.declared_d}


def build_code(l: int, m: int, poly_a: BivariatePolynomial, poly_b: BivariatePolynomial,
               name: Optional[str] = None, declared_d: Optional[int] = None) -> BBCode:
    if l < 2 or m < 2:
        raise ValueError(f'group orders must be >= 2 (got l={l}, m={m})')
    if poly_a.weight != poly_b.weight:
        raise ValueError(f'polyA and polyB need equal term counts ({poly_a.weight} != {poly_b.weight})')
    if (poly_a.l, poly_a.m, poly_b.l, poly_b.m) != (l, m, l, m):
        raise ValueError('polynomials were reduced for a different group')
    a, b = poly_a.matrix(), poly_b.matrix()
    hx = np.hstack([a, b])
    hz = np.hstack([b.T, a.T])
    if np.any((hx.astype(np.int64) @ hz.T.astype(np.int64)) % 2):
        raise CommutationFailure(f'Hx Hz^T != 0 for l={l} m={m} A={poly_a} B={poly_b}')
    n = 2 * l * m
    k = n - gf2_rank(hx) - gf2_rank(hz)
    label = name or f'bb-{n}'
    if k == 0:
        raise DegenerateCode(f'{label}: k = 0')
    lx, lz = _logical_pair(hx, hz, k)
    return BBCode(label, l, m, poly_a, poly_b, n, k, poly_a.weight, hx, hz, lx, lz, declared_d)


def _independent_extension(base: np.ndarray, candidates: np.ndarray, want: int) -> np.ndarray:
    """Greedily pick `want` rows of candidates independent of each other and of base's row space."""
    basis = gf2_row_basis(base) if base.size else np.zeros((0, candidates.shape[1]), dtype=np.uint8)
    rank = basis.shape[0]
    picked: List[np.ndarray] = []
    for v in candidates:
        trial = np.vstack([basis, v[None, :]])
        r = gf2_rank(trial)
        if r > rank:
            basis, rank = trial, r
            picked.append(v.copy())
            if len(picked) == want:
                break
    if len(picked) < want:
        raise RankDeficiency(f'found {len(picked)} of {want} independent logical representatives')
    return np.array(picked, dtype=np.uint8)


def _logical_pair(hx: np.ndarray, hz: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    if k < 1:
        raise RankDeficiency('no logical qubits')
    # X logicals commute with Z checks and are not X stabilizers; symmetric for Z
    lx = _independent_extension(hx, gf2_null_space(hz), k)
    lz = _independent_extension(hz, gf2_null_space(hx), k)
    gram = GF2((lx.astype(np.int64) @ lz.T.astype(np.int64)) % 2)
    if np.linalg.matrix_rank(gram) < k:
        raise RankDeficiency('logical Gram matrix is singular')
    # rotate Z basis so that lx @ lz^T = I
    lz = np.asarray(np.linalg.inv(gram).T @ GF2(lz), dtype=np.uint8)
    return lx, lz


def logical_operators(code: BBCode) -> Tuple[np.ndarray, np.ndarray]:
    """Return (logicalsX, logicalsZ), k rows each, symplectically paired (lx @ lz.T == I)."""
    return _logical_pair(code.hx, code.hz, code.k)


# ---------------- minimum logical weight (small codes only) ----------------
def min_logical_weight(code: BBCode, basis: str = 'Z', max_weight: int = 6) -> Optional[int]:
    """Smallest weight of a `basis`-type logical up to max_weight, by exhaustive search (n <= 32)."""
    if code.n > 32:
        raise ValueError('exhaustive logical search is limited to n <= 32')
    commute = code.hx if basis.upper() == 'Z' else code.hz   # must be orthogonal to these
    partners = code.logicals_x if basis.upper() == 'Z' else code.logicals_z
    col_check = [int(''.join(map(str, commute[:, q][::-1])), 2) for q in range(code.n)]
    col_partner = [int(''.join(map(str, partners[:, q][::-1])), 2) for q in range(code.n)]
    for wt in range(1, max_weight + 1):
        for support in itertools.combinations(range(code.n), wt):
            s = 0; pp = 0
            for q in support:
                s ^= col_check[q]; pp ^= col_partner[q]
            if s == 0 and pp != 0:
                return wt
    return None


# ---------------- stopping distance ----------------
@dataclass(frozen=True)
class StoppingDistance:
    value: Optional[int]      # None means Unknown
    exact: bool
    method: str

    @property
    def unknown(self) -> bool:
        return self.value is None


def syndrome_code_generator(code: BBCode, basis: str = 'Z', kind: str = 'checks') -> np.ndarray:
    """Generator matrix of the syndrome code of the measured-basis checks.

    kind='checks'    -- codewords are valid single-round syndromes (column space of H).
    kind='relations' -- codewords are sets of checks whose product is the identity
                        (left null space of H); matches the tabulated d_S values.
    """
    h = code.check_matrix(basis)
    if kind == 'checks':
        return gf2_row_basis(h.T)
    if kind == 'relations':
        return gf2_null_space(h.T)
    raise ValueError(f'unknown syndrome code kind {kind!r}')


def _enumerate_min_weight(basis: np.ndarray, chunk_bits: int = 14) -> int:
    r, nbits = basis.shape
    best = nbits + 1
    g = basis.astype(np.int64)
    total = 1 << r
    step = 1 << min(chunk_bits, r)
    shifts = np.arange(r, dtype=np.int64)
    for start in range(1, total, step):
        idx = np.arange(start, min(start + step, total), dtype=np.int64)
        coeff = (idx[:, None] >> shifts) & 1
        words = (coeff @ g) % 2
        wmin = int(words.sum(axis=1).min())
        if wmin < best:
            best = wmin
    return best


def _isd_min_weight(basis: np.ndarray, trials: int, rng: np.random.Generator) -> Optional[int]:
    r, nbits = basis.shape
    best: Optional[int] = None
    for _ in range(trials):
        perm = rng.permutation(nbits)
        sysf = np.asarray(GF2(basis[:, perm]).row_reduce(), dtype=np.uint8)
        sysf = sysf[np.any(sysf != 0, axis=1)]
        weights = sysf.sum(axis=1)
        cand = int(weights.min())
        # pairs of systematic rows (Lee-Brickell p=2)
        if sysf.shape[0] > 1:
            s = sysf.astype(np.int64)
            pair_w = (s[:, None, :] ^ s[None, :, :]).sum(axis=2)
            np.fill_diagonal(pair_w, nbits + 1)
            cand = min(cand, int(pair_w.min()))
        if best is None or cand < best:
            best = cand
    return best


def _certify_below(basis: np.ndarray, limit: int) -> Optional[bool]:
    """True if no nonzero codeword of weight < limit exists, None if the support budget is too small."""
    nbits = basis.shape[1]
    if sum(comb(nbits, w) for w in range(1, limit)) > LOW_WEIGHT_SUPPORT_BUDGET:
        return None
    dual = gf2_null_space(basis)
    cols = [int(''.join(map(str, dual[:, q][::-1])) or '0', 2) for q in range(nbits)]
    for wt in range(1, limit):
        for support in itertools.combinations(range(nbits), wt):
            s = 0
            for q in support:
                s ^= cols[q]
            if s == 0:
                return False
    return True


def stopping_distance(generator: np.ndarray, weight_bound: int, trials: int = 200, seed: int = 0,
                      require_exact: bool = False) -> StoppingDistance:
    """Minimum weight of a nonzero codeword in the row space of `generator`.

    Small row spaces are enumerated exactly; larger ones use a randomized search that reports
    Unknown when nothing at or below weight_bound turns up.
    """
    if weight_bound < 1:
        raise ValueError('weight_bound must be >= 1')
    basis = gf2_row_basis(np.atleast_2d(np.asarray(generator, dtype=np.uint8)))
    if basis.shape[0] == 0:
        return StoppingDistance(None, True, 'empty')
    if basis.shape[0] <= MAX_ENUM_DIM:
        # exhaustive over the row space, so the bound does not cap it
        return StoppingDistance(_enumerate_min_weight(basis), True, 'enumeration')
    best = _isd_min_weight(basis, trials, np.random.default_rng(seed))
    limit = min(LOW_WEIGHT_LIMIT, (best if best is not None else weight_bound + 1), weight_bound + 1)
    certified = _certify_below(basis, limit)
    if certified is False:
        # a lighter codeword exists below the ISD estimate; find it by support search
        for wt in range(1, limit):
            if _certify_below(basis, wt + 1) is False:
                return StoppingDistance(wt if wt <= weight_bound else None, True, 'support-search')
    exact = bool(certified) and best is not None and best <= LOW_WEIGHT_LIMIT
    if require_exact and not exact:
        raise BudgetExhausted(best)
    if best is None or best > weight_bound:
        return StoppingDistance(None, False, 'isd')
    return StoppingDistance(best, exact, 'isd')


# ---------------- registry ----------------
@dataclass(frozen=True)
class CodeRegistryEntry:
    name: str
    l: int
    m: int
    poly_a: str
    poly_b: str
    n: int
    k: int
    d: Optional[int]                  # distance of the code these polynomials build; None when not established
    d_s: Optional[int]
    source: str
    ref_a0: Optional[float] = None
    ref_dbar: Optional[float] = None
    noise_point: Optional[Tuple[float, int]] = None   # (p, T) for reproduction runs
    substitute: bool = False          # polynomials chosen here only to realise (n, k)
    connected: bool = True            # circuit DEM fault graph is one component


REGISTRY: Dict[str, CodeRegistryEntry] = {e.name: e for e in [
    CodeRegistryEntry('kunlun-18', 3, 3, '1+x+y^2', '1+y+x^2', 18, 4, 4, 6,
                      'Kunlun [[18,4,4]] experiment code (bivariate form per BB reference construction); the '
                      'reference mean degree 52.2 does not hold for this realisation, which measures about 48',
                      ref_a0=0.767, noise_point=(0.003, 12)),
    CodeRegistryEntry('bb-24', 3, 4, '1+y', 'x+x*y', 24, 6, None, None,
                      'substitute polynomials chosen to realise (n,k)=(24,6); distance not established',
                      substitute=True, connected=False),
    CodeRegistryEntry('bb-32', 4, 4, 'x+y', 'x+y', 32, 8, 2, 4,
                      'streaming code, A=B=x+y; published as [[32,8,6]] but (e_j, e_j) is a weight-2 logical',
                      ref_a0=0.764, ref_dbar=17.3, connected=False),
    CodeRegistryEntry('bb-50', 5, 5, 'x+y', 'x+y', 50, 10, 2, None,
                      'substitute polynomials A=B=x+y realising (n,k)=(50,10); weight-2 logicals as bb-32',
                      substitute=True, connected=False),
    CodeRegistryEntry('gross-72', 6, 6, 'x^3+y+y^2', 'y^3+x+x^2', 72, 12, 6, 16, 'BB reference [[72,12,6]]',
                      ref_a0=0.869, ref_dbar=52.3),
    CodeRegistryEntry('gross-144', 12, 6, 'x^3+y+y^2', 'y^3+x+x^2', 144, 12, 12, 32, 'BB reference [[144,12,12]]',
                      ref_a0=0.8685, ref_dbar=52.3),
    CodeRegistryEntry('gross-288', 12, 12, 'x^3+y^2+y^7', 'y^3+x+x^2', 288, 12, 18, 64, 'BB reference [[288,12,18]]',
                      ref_a0=0.869, ref_dbar=52.3),
    CodeRegistryEntry('gross-360', 30, 6, 'x^9+y+y^2', 'y^3+x^25+x^26', 360, 12, 24, None,
                      'BB reference [[360,12,<=24]]'),
]}

GROSS_FAMILY = ('gross-72', 'gross-144', 'gross-288')

_CODE_CACHE: Dict[str, BBCode] = {}


def entry_polynomials(entry: CodeRegistryEntry) -> Tuple[BivariatePolynomial, BivariatePolynomial]:
    return parse_polynomial(entry.poly_a, entry.l, entry.m), parse_polynomial(entry.poly_b, entry.l, entry.m)


def get_code(name: str) -> BBCode:
    """Build (and memoize) a registry code; declared n and k are cross-checked."""
    if name in _CODE_CACHE:
        return _CODE_CACHE[name]
    if name not in REGISTRY:
        raise KeyError(f'unknown code {name!r}; known: {", ".join(sorted(REGISTRY))}')
    e = REGISTRY[name]
    pa, pb = entry_polynomials(e)
    code = build_code(e.l, e.m, pa, pb, name=e.name, declared_d=e.d)
    if (code.n, code.k) != (e.n, e.k):
        raise BBPeelError(f'{name}: built [[{code.n},{code.k}]] but registry declares [[{e.n},{e.k}]]')
    _CODE_CACHE[name] = code
    return code


# ---------------- text format ----------------
def parse_code_spec(line: str, line_no: int = 1) -> BBCode:
    """Parse `name l m A=<poly> B=<poly>`."""
    parts = line.split()
    if len(parts) != 5 or not parts[3].startswith('A=') or not parts[4].startswith('B='):
        raise ParseError(line_no, f'expected "name l m A=<poly> B=<poly>", got {line!r}')
    try:
        l, m = int(parts[1]), int(parts[2])
        pa = parse_polynomial(parts[3][2:], l, m)
        pb = parse_polynomial(parts[4][2:], l, m)
    except ValueError as e:
        raise ParseError(line_no, str(e)) from e
    return build_code(l, m, pa, pb, name=parts[0])


def load_code_specs(path: str) -> List[BBCode]:
    codes = []
    with open(path, 'r', encoding='utf-8') as f:
        for no, raw in enumerate(f, 1):
            line = raw.split('#', 1)[0].strip()
            if line:
                codes.append(parse_code_spec(line, no))
    return codes


def format_code_spec(code: BBCode) -> str:
    return f'{code.name} {code.l} {code.m} A={code.poly_a} B={code.poly_b}'


__all__ = [
    'BivariatePolynomial', 'BBCode', 'CodeRegistryEntry', 'StoppingDistance', 'REGISTRY', 'GROSS_FAMILY',
    'parse_polynomial', 'format_polynomial', 'build_code', 'logical_operators', 'min_logical_weight',
    'syndrome_code_generator', 'stopping_distance', 'get_code', 'entry_polynomials', 'parse_code_spec',
    'load_code_specs', 'format_code_spec', 'gf2_rank', 'gf2_row_basis', 'gf2_null_space',
]
