import os, sys, tempfile, shutil

import numpy as np
import pytest

BASE = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if BASE not in sys.path:
    sys.path.insert(0, BASE)

from bbpeel_code import (REGISTRY, build_code, format_code_spec, format_polynomial, get_code, load_code_specs,
                         logical_operators, min_logical_weight, parse_code_spec, parse_polynomial,
                         stopping_distance, syndrome_code_generator)
from bbpeel_errors import ParseError


@pytest.mark.parametrize('name,n,k', [('kunlun-18', 18, 4), ('bb-24', 24, 6), ('bb-32', 32, 8),
                                      ('bb-50', 50, 10), ('gross-72', 72, 12), ('gross-144', 144, 12)])
def test_registry_codes_build_with_declared_parameters(name, n, k):
    code = get_code(name)
    assert (code.n, code.k) == (n, k)
    assert (code.n, code.k) == (REGISTRY[name].n, REGISTRY[name].k)
    # CSS condition
    assert not np.any((code.hx.astype(int) @ code.hz.T.astype(int)) % 2)
    # every check touches 2w qubits, every qubit w checks of each type
    assert set(code.hx.sum(axis=1)) == {2 * code.w}
    assert set(code.hz.sum(axis=0)) == {code.w}


def test_logicals_are_symplectically_paired():
    code = get_code('bb-32')
    lx, lz = logical_operators(code)
    assert lx.shape == lz.shape == (code.k, code.n)
    assert np.array_equal((lx.astype(int) @ lz.T.astype(int)) % 2, np.eye(code.k, dtype=int))
    # logicals commute with the opposite checks
    assert not np.any((code.hz.astype(int) @ lx.T.astype(int)) % 2)
    assert not np.any((code.hx.astype(int) @ lz.T.astype(int)) % 2)


def test_unknown_code_name():
    with pytest.raises(KeyError):
        get_code('bb-9999')


def test_streaming_code_has_weight_two_logicals():
    # A = B = x + y: (e_j, e_j) commutes with every check
    assert min_logical_weight(get_code('bb-32'), 'Z', 4) == 2


def test_polynomial_parse_and_format():
    poly = parse_polynomial('x^3+y+y^2', 12, 6)
    assert poly.terms == ((0, 1), (0, 2), (3, 0))
    assert poly.weight == 3
    assert format_polynomial(poly) == 'y+y^2+x^3'
    assert parse_polynomial(format_polynomial(poly), 12, 6) == poly
    assert parse_polynomial('x*y + 1', 3, 4).terms == ((0, 0), (1, 1))


def test_polynomial_duplicate_terms_rejected():
    with pytest.raises(ValueError):
        parse_polynomial('x+x^4', 3, 3)   # x^4 == x mod 3
    with pytest.raises(ValueError):
        parse_polynomial('x++y', 3, 3)
    with pytest.raises(ValueError):
        parse_polynomial('z', 3, 3)


def test_build_code_rejects_unequal_weights():
    with pytest.raises(ValueError):
        build_code(4, 4, parse_polynomial('x+y', 4, 4), parse_polynomial('1+x+y', 4, 4))


def test_code_spec_text_format():
    code = parse_code_spec('bb-32 4 4 A=x+y B=x+y')
    assert (code.n, code.k, code.w) == (32, 8, 2)
    assert format_code_spec(code) == 'bb-32 4 4 A=x+y B=x+y'
    with pytest.raises(ParseError) as ei:
        parse_code_spec('bb-32 4 4 A=x+y', line_no=7)
    assert ei.value.line_no == 7


def test_load_code_specs_skips_comments():
    tmp = tempfile.mkdtemp(prefix='bbpeel_codes_')
    try:
        path = os.path.join(tmp, 'codes.txt')
        with open(path, 'w', encoding='utf-8') as f:
            f.write('# streaming family\n\nbb-32 4 4 A=x+y B=x+y   # A = B\nbb-50 5 5 A=x+y B=x+y\n')
        codes = load_code_specs(path)
        assert [c.name for c in codes] == ['bb-32', 'bb-50']
        with open(path, 'a', encoding='utf-8') as f:
            f.write('broken line\n')
        with pytest.raises(ParseError) as ei:
            load_code_specs(path)
        assert ei.value.line_no == 5
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def test_stopping_distance_small_generators():
    sd = stopping_distance(np.eye(3, dtype=np.uint8), weight_bound=8)
    assert (sd.value, sd.exact, sd.method) == (1, True, 'enumeration')
    empty = stopping_distance(np.zeros((2, 4), dtype=np.uint8), weight_bound=8)
    assert empty.unknown and empty.method == 'empty'
    # enumeration is exact even past the bound
    heavy = stopping_distance(np.ones((1, 6), dtype=np.uint8), weight_bound=4)
    assert (heavy.value, heavy.exact) == (6, True)
    with pytest.raises(ValueError):
        stopping_distance(np.eye(2, dtype=np.uint8), weight_bound=0)


@pytest.mark.parametrize('name', ['bb-32', 'kunlun-18'])
def test_relations_stopping_distance_matches_registry(name):
    code = get_code(name)
    sd = stopping_distance(syndrome_code_generator(code, 'Z', kind='relations'), weight_bound=64)
    assert sd.exact
    assert sd.value == REGISTRY[name].d_s


def test_relations_stopping_distance_of_a_large_code():
    code = get_code('gross-360')
    gen = syndrome_code_generator(code, 'Z', kind='relations')
    assert gen.shape[1] == code.n // 2
    sd = stopping_distance(gen, weight_bound=16)
    assert sd.exact and sd.method == 'enumeration'
    assert sd.value is not None and sd.value > 16


def test_syndrome_code_generator_kinds():
    code = get_code('bb-32')
    checks = syndrome_code_generator(code, 'Z', 'checks')
    rel = syndrome_code_generator(code, 'Z', 'relations')
    assert checks.shape[1] == rel.shape[1] == code.n // 2
    # rank(H) + dim(left kernel) == number of checks
    assert checks.shape[0] + rel.shape[0] == code.n // 2
    with pytest.raises(ValueError):
        syndrome_code_generator(code, 'Z', 'bogus')


def test_registry_distances_match_the_built_codes():
    assert REGISTRY['bb-24'].d is None and REGISTRY['bb-24'].substitute
    assert REGISTRY['bb-50'].substitute and not REGISTRY['bb-32'].substitute
    for name in ('bb-32', 'bb-50'):
        code = get_code(name)
        assert REGISTRY[name].d == code.declared_d == 2
        v = np.zeros(code.n, dtype=int)
        v[0] = v[code.n // 2] = 1
        assert not np.any((code.hx.astype(int) @ v) % 2)
        assert np.any((code.logicals_x.astype(int) @ v) % 2)
    assert min_logical_weight(get_code('bb-32'), 'Z', 4) == REGISTRY['bb-32'].d
