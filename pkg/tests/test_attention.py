import io
import json

import numpy as np
import pytest

from conftest import analytic_gradients, dense_attention_reference, finite_difference
from longlab import tensor as T
from longlab.attention import (
    attention_forward,
    build_bigbird_pattern,
    build_full_pattern,
    build_longformer_pattern,
    dump_pattern,
    pattern_stats,
)
from longlab.errors import PatternError


def brute_force_longformer(n, radius, global_set):
    allowed = set()
    for i in range(n):
        for j in range(n):
            if abs(i - j) <= radius or i in global_set or j in global_set:
                allowed.add((i, j))
    return allowed


def brute_force_bigbird_fixed(n, block_size, gbc):
    # window + global closure only (random=0), by explicit block enumeration
    nb = -(-n // block_size)
    allowed = set()
    for qb in range(nb):
        kbs = {b for b in (qb - 1, qb, qb + 1) if 0 <= b < nb}
        kbs.update(range(min(gbc, nb)))
        if qb < gbc:
            kbs = set(range(nb))
        for kb in kbs:
            for i in range(qb * block_size, min(n, (qb + 1) * block_size)):
                for j in range(kb * block_size, min(n, (kb + 1) * block_size)):
                    allowed.add((i, j))
    # transposed global rows/columns
    for b in range(min(gbc, nb)):
        for j in range(b * block_size, min(n, (b + 1) * block_size)):
            for i in range(n):
                allowed.add((i, j))
                allowed.add((j, i))
    return allowed


def pattern_pairs(pattern):
    return {(i, j) for i in range(pattern.n) for s, e in pattern.rows[i] for j in range(s, e)}


def test_full_pattern_n1():
    assert pattern_pairs(build_full_pattern(1)) == {(0, 0)}


def test_full_pattern_counts():
    assert build_full_pattern(4).pair_count() == 16
    assert pattern_stats(build_full_pattern(512))["pair_count"] == 512 * 512


def test_full_pattern_rejects_zero():
    with pytest.raises(PatternError):
        build_full_pattern(0)


def test_longformer_pair_count_no_globals():
    assert build_longformer_pattern(8, 1, set()).pair_count() == 22


def test_longformer_pair_count_one_global():
    assert build_longformer_pattern(8, 1, {0}).pair_count() == 34


def test_longformer_wide_window_equals_full():
    a = pattern_pairs(build_longformer_pattern(4, 3, set()))
    b = pattern_pairs(build_full_pattern(4))
    assert a == b


@pytest.mark.parametrize("n,radius,global_set", [(16, 2, set()), (16, 2, {0, 7}), (9, 0, {4})])
def test_longformer_matches_brute_force(n, radius, global_set):
    assert pattern_pairs(build_longformer_pattern(n, radius, global_set)) == \
        brute_force_longformer(n, radius, global_set)


def test_longformer_out_of_range_global():
    with pytest.raises(PatternError):
        build_longformer_pattern(8, 1, {8})


def test_longformer_density_closed_form():
    n, r = 4096, 128
    pattern = build_longformer_pattern(n, r, {0})
    window_pairs = n * (2 * r + 1) - r * (r + 1)
    row0_gain = n - (r + 1)
    col0_gain = n - (r + 1)
    assert pattern.pair_count() == window_pairs + row0_gain + col0_gain
    assert abs(pattern.density() - 0.063) < 0.002


def test_bigbird_fixed_parts_match_enumeration():
    got = pattern_pairs(build_bigbird_pattern(16, 4, 1, 0, seed=0))
    assert got == brute_force_bigbird_fixed(16, 4, 1)


def test_bigbird_single_block_is_full():
    for kwargs in ({"global_block_count": 1, "random_blocks_per_query": 0},
                   {"global_block_count": 0, "random_blocks_per_query": 3}):
        pat = build_bigbird_pattern(7, 16, seed=5, **kwargs)
        assert pattern_pairs(pat) == pattern_pairs(build_full_pattern(7))


def test_bigbird_determinism_and_seed_effect():
    a = build_bigbird_pattern(64, 8, 1, 1, seed=3)
    b = build_bigbird_pattern(64, 8, 1, 1, seed=3)
    assert a.rows == b.rows
    c = build_bigbird_pattern(64, 8, 1, 1, seed=4)
    # random blocks may differ, fixed parts may not
    fixed = pattern_pairs(build_bigbird_pattern(64, 8, 1, 0, seed=0))
    assert fixed <= pattern_pairs(a) and fixed <= pattern_pairs(c)


def test_bigbird_random_exceeds_pool():
    # 4 blocks; a middle query block has window {q-1,q,q+1} + global {0} -> pool of 0 or 1
    with pytest.raises(PatternError):
        build_bigbird_pattern(32, 8, 1, 2, seed=0)


def test_bigbird_random_blocks_excluded_from_window_and_globals():
    n, bs = 64, 8
    pat = build_bigbird_pattern(n, bs, 1, 1, seed=11)
    nb = n // bs
    for q in range(1, nb):
        row = pat.rows[q * bs]  # first token of the block
        blocks = set()
        for s, e in row:
            blocks.update(range(s // bs, -(-e // bs)))
        extra = blocks - {0, q - 1, q, q + 1}
        assert len(extra) == 1  # exactly one random block, outside window/global


def test_self_pairs_and_global_closure_always_present():
    pat = build_longformer_pattern(20, 2, {5})
    pairs = pattern_pairs(pat)
    for i in range(20):
        assert (i, i) in pairs
        assert (5, i) in pairs and (i, 5) in pairs


def test_pattern_linear_cost_bound():
    r, g = 64, 1
    c = (2 * r + 1) + 2 * g
    for n in (256, 512, 1024, 2048, 4096):
        assert build_longformer_pattern(n, r, {0}).pair_count() <= c * n
    c_bb = 8 * (3 + 1 + 1) + 1 * 8
    for n in (256, 512, 1024, 2048, 4096):
        pat = build_bigbird_pattern(n, 8, 1, 1, seed=0)
        assert pat.pair_count() <= c_bb * n


def test_longformer_density_nonincreasing_in_n():
    densities = [build_longformer_pattern(n, 16, {0}).density() for n in (64, 128, 256, 512)]
    assert all(a >= b for a, b in zip(densities, densities[1:]))


def test_pattern_dump_schema():
    pat = build_longformer_pattern(4, 1, set())
    buf = io.StringIO()
    dump_pattern(pat, buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert rows[0] == {"row": 0, "intervals": [[0, 2]]}
    assert len(rows) == 4


# ---------------------------------------------------------------------------
# forward evaluation


def test_attention_uniform_weights():
    q = T.Tensor(np.zeros((2, 1)))
    k = T.Tensor(np.zeros((2, 1)))
    v = T.Tensor([[1.0], [2.0]])
    out = attention_forward(q, k, v, build_full_pattern(2), scale=1.0)
    np.testing.assert_allclose(out.data, [[1.5], [1.5]], atol=1e-15)


def test_attention_diagonal_pattern_returns_v(rng):
    n, d = 6, 4
    pattern = build_longformer_pattern(n, 0, set())
    q = T.Tensor(rng.normal(size=(n, d)))
    k = T.Tensor(rng.normal(size=(n, d)))
    v = T.Tensor(rng.normal(size=(n, d)))
    out = attention_forward(q, k, v, pattern, scale=0.5)
    np.testing.assert_array_equal(out.data, v.data)


def test_attention_wide_window_matches_full(rng):
    n, d = 12, 4
    q = T.Tensor(rng.normal(size=(n, d)))
    k = T.Tensor(rng.normal(size=(n, d)))
    v = T.Tensor(rng.normal(size=(n, d)))
    wide = attention_forward(q, k, v, build_longformer_pattern(n, 11, set()), scale=0.5)
    full = attention_forward(q, k, v, build_full_pattern(n), scale=0.5)
    np.testing.assert_allclose(wide.data, full.data, atol=1e-10)


@pytest.mark.parametrize("builder", [
    lambda n: build_longformer_pattern(n, 2, {0}),
    lambda n: build_longformer_pattern(n, 3, {4, 9}),
    lambda n: build_bigbird_pattern(n, 4, 1, 1, seed=2),
    lambda n: build_full_pattern(n),
])
def test_attention_matches_dense_reference(builder, rng):
    n, d = 16, 5
    pattern = builder(n)
    q = rng.normal(size=(n, d))
    k = rng.normal(size=(n, d))
    v = rng.normal(size=(n, d))
    expected = dense_attention_reference(q, k, v, pattern.to_dense(), scale=1 / np.sqrt(d))
    got = attention_forward(T.Tensor(q), T.Tensor(k), T.Tensor(v), pattern, 1 / np.sqrt(d))
    np.testing.assert_allclose(got.data, expected, atol=1e-12)


def test_attention_gradients_match_dense_reference(rng):
    # gradients through the sparse gather path vs finite differences of the
    # dense masked reference
    n, d = 10, 3
    pattern = build_longformer_pattern(n, 2, {1})
    dense = pattern.to_dense()
    arrays = [rng.normal(size=(n, d)) for _ in range(3)]
    w = rng.normal(size=(d, 1))

    def build(tq, tk, tv):
        out = attention_forward(tq, tk, tv, pattern, scale=0.7)
        col = T.matmul(out, T.Tensor(w))
        return T.reshape(T.matmul(T.Tensor(np.ones((1, n))), col), ())

    analytic = analytic_gradients(build, arrays)

    def scalar(q, k, v):
        out = dense_attention_reference(q, k, v, dense, scale=0.7)
        return float((np.ones((1, n)) @ (out @ w)).item())

    numeric = finite_difference(scalar, [a.copy() for a in arrays])
    for a, nmr in zip(analytic, numeric):
        np.testing.assert_allclose(a, nmr, rtol=1e-4, atol=1e-7)


def test_attention_locality(rng):
    # a token with no global role ignores changes outside its allowed keys
    n, d = 12, 4
    pattern = build_longformer_pattern(n, 1, {0})
    q = rng.normal(size=(n, d))
    k = rng.normal(size=(n, d))
    v = rng.normal(size=(n, d))
    out1 = attention_forward(T.Tensor(q), T.Tensor(k), T.Tensor(v), pattern, 0.5).data
    k2, v2 = k.copy(), v.copy()
    k2[8] += 3.0  # token 8 is outside row 4's window {3,4,5} and not global
    v2[8] -= 2.0
    out2 = attention_forward(T.Tensor(q), T.Tensor(k2), T.Tensor(v2), pattern, 0.5).data
    np.testing.assert_array_equal(out1[4], out2[4])
    assert not np.allclose(out1[8 - 1 : 8 + 2], out2[8 - 1 : 8 + 2])
