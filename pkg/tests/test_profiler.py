import io
import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabroute.core import RoutingDecision, route_c2r_batch, route_topk_batch
from collabroute.errors import ConfigError, InvariantError, TraceFormatError
from collabroute.profiler import (
    CollaborationMatrix,
    TopTTable,
    accumulate,
    accumulate_batch,
    collaboration_matrix,
    export_heatmap,
    extract_top_t,
    merge,
    profile,
    random_top_t,
    read_heatmaps,
    write_heatmaps,
)
from collabroute.workload import WorkloadSpec, generate


def pair_count_oracle(decisions, n):
    counts = [[0] * n for _ in range(n)]
    for d in decisions:
        for i, j in combinations(d.experts, 2):
            counts[i][j] += 1
            counts[j][i] += 1
    return np.array(counts)


def random_decisions(rng, tokens, n, k):
    return [RoutingDecision(tuple(int(e) for e in rng.choice(n, k, replace=False)), (1.0 / k,) * k) for _ in range(tokens)]


def matrix_from_upper(n, pairs):
    c = np.zeros((n, n), dtype=np.int64)
    for (i, j), v in pairs.items():
        c[i, j] = c[j, i] = v
    return CollaborationMatrix(c)


# --- accumulate ------------------------------------------------------------

def test_accumulate_k1_only_counts_tokens():
    m = CollaborationMatrix.zeros(4)
    accumulate(m, RoutingDecision((2,), (1.0,)))
    assert m.tokens_seen == 1
    assert not m.counts.any()


def test_accumulate_single_pair():
    m = accumulate(CollaborationMatrix.zeros(4), RoutingDecision((1, 3), (0.5, 0.5)))
    expected = np.zeros((4, 4), dtype=np.int64)
    expected[1, 3] = expected[3, 1] = 1
    assert np.array_equal(m.counts, expected)


def test_accumulate_matches_pair_count_oracle():
    rng = np.random.default_rng(0)
    decisions = random_decisions(rng, 1000, 8, 2)
    m = CollaborationMatrix.zeros(8)
    for d in decisions:
        accumulate(m, d)
    assert m.upper_sum() == 1000
    assert np.array_equal(m.counts, pair_count_oracle(decisions, 8))
    assert collaboration_matrix(decisions, 8) == m


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_batch_accumulate_matches_oracle(k):
    rng = np.random.default_rng(k)
    decisions = random_decisions(rng, 500, 8, k)
    m = collaboration_matrix(decisions, 8)
    m.check()
    assert np.array_equal(m.counts, pair_count_oracle(decisions, 8))
    assert m.upper_sum() == 500 * k * (k - 1) // 2


def test_accumulate_rejects_out_of_range():
    with pytest.raises(InvariantError):
        accumulate(CollaborationMatrix.zeros(4), RoutingDecision((1, 4), (0.5, 0.5)))
    with pytest.raises(InvariantError):
        accumulate_batch(CollaborationMatrix.zeros(4), [RoutingDecision((1, 4), (0.5, 0.5))])
    with pytest.raises(InvariantError):
        accumulate_batch(CollaborationMatrix.zeros(4), [RoutingDecision((1, 1), (0.5, 0.5))])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8).flatmap(lambda n: st.tuples(
    st.just(n),
    st.integers(1, n),
    st.lists(st.integers(0, 2**32 - 1), min_size=0, max_size=50),
)))
def test_symmetry_and_conservation(case):
    n, k, seeds = case
    m = CollaborationMatrix.zeros(n)
    for s in seeds:
        rng = np.random.default_rng(s)
        accumulate(m, RoutingDecision(tuple(int(e) for e in rng.choice(n, k, replace=False)), (1 / k,) * k))
    m.check()
    assert m.upper_sum() == len(seeds) * k * (k - 1) // 2


# --- profile ---------------------------------------------------------------

def test_uniform_counts_max_entropy():
    c = np.full((8, 8), 5, dtype=np.int64)
    np.fill_diagonal(c, 0)
    prof = profile(CollaborationMatrix(c))
    np.testing.assert_allclose(prof.degrees, math.log(7), atol=1e-9, rtol=0)
    assert math.log(7) == pytest.approx(1.9459, abs=1e-4)
    assert prof.layer_degree == pytest.approx(math.log(7), abs=1e-9)


def test_single_partner_zero_entropy():
    m = matrix_from_upper(4, {(0, 1): 7})
    prof = profile(m)
    assert prof.degrees[0] == 0.0
    assert prof.degrees[1] == 0.0
    assert not prof.active[2] and math.isnan(prof.degrees[2])
    assert prof.layer_degree == 0.0


def test_hand_entropy():
    m = matrix_from_upper(4, {(0, 1): 3, (0, 2): 1})
    prof = profile(m)
    expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert prof.degrees[0] == pytest.approx(expected, abs=1e-12)
    assert prof.degrees[0] == pytest.approx(0.5623, abs=1e-4)
    np.testing.assert_allclose(prof.frequencies[0], [0, 0.75, 0.25, 0], atol=1e-15)


def test_layer_degree_excludes_inactive():
    m = matrix_from_upper(4, {(0, 1): 3, (0, 2): 1})
    prof = profile(m)
    assert prof.active.tolist() == [True, True, True, False]
    assert prof.layer_degree == pytest.approx(np.mean(prof.degrees[:3]), abs=1e-15)


def test_empty_matrix_profile():
    prof = profile(CollaborationMatrix.zeros(4))
    assert not prof.active.any()
    assert math.isnan(prof.layer_degree)


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 8).flatmap(lambda n: st.tuples(
    st.just(n),
    st.lists(st.integers(0, 50), min_size=n * (n - 1) // 2, max_size=n * (n - 1) // 2),
)))
def test_entropy_bounds(case):
    n, upper = case
    c = np.zeros((n, n), dtype=np.int64)
    c[np.triu_indices(n, 1)] = upper
    c = c + c.T
    prof = profile(CollaborationMatrix(c))
    rows = prof.frequencies[prof.active].sum(axis=1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-9)
    d = prof.degrees[prof.active]
    assert np.all(d >= 0)
    assert np.all(d <= math.log(n - 1) + 1e-12)
    for i in np.flatnonzero(prof.active):
        off = np.delete(c[i], i)
        uniform = np.all(off == off[0])
        assert uniform == (abs(prof.degrees[i] - math.log(n - 1)) <= 1e-9)


# --- extract_top_t ---------------------------------------------------------

def test_top_t_full_rows():
    rng = np.random.default_rng(1)
    m = collaboration_matrix(random_decisions(rng, 300, 6, 2), 6)
    table = extract_top_t(m, 5)
    for i in range(6):
        assert sorted(table[i]) == [j for j in range(6) if j != i]


def test_top_t_hand_sort():
    m = matrix_from_upper(4, {(0, 1): 5, (0, 2): 9, (0, 3): 2})
    assert extract_top_t(m, 2)[0] == [2, 1]


def test_top_t_tie_break():
    c = np.ones((4, 4), dtype=np.int64)
    np.fill_diagonal(c, 0)
    assert extract_top_t(CollaborationMatrix(c), 2)[3] == [0, 1]


def test_top_t_range():
    m = CollaborationMatrix.zeros(4)
    for t in (0, 4):
        with pytest.raises(ConfigError):
            extract_top_t(m, t)


def test_top_t_table_validation():
    with pytest.raises(ConfigError):
        TopTTable(np.array([[0], [0]]))
    with pytest.raises(ConfigError):
        TopTTable(np.array([[1, 1], [0, 2], [0, 1]]))


def test_random_top_t_deterministic_and_valid():
    a = random_top_t(8, 3, np.random.default_rng(5))
    b = random_top_t(8, 3, np.random.default_rng(5))
    assert a == b
    for i in range(8):
        assert i not in a[i] and len(set(a[i])) == 3


# --- merge -----------------------------------------------------------------

def test_merge_identity_and_commutativity():
    rng = np.random.default_rng(2)
    a = collaboration_matrix(random_decisions(rng, 100, 8, 2), 8)
    b = collaboration_matrix(random_decisions(rng, 150, 8, 2), 8)
    assert merge(a, CollaborationMatrix.zeros(8)) == a
    assert merge(a, b) == merge(b, a)


def test_merge_associative():
    rng = np.random.default_rng(3)
    a, b, c = (collaboration_matrix(random_decisions(rng, 50, 6, 3), 6) for _ in range(3))
    assert merge(merge(a, b), c) == merge(a, merge(b, c))


def test_sharded_merge_equals_single_pass():
    logits = generate(WorkloadSpec(10_000, 8, num_groups=2, cluster_strength=1.0, seed=4))
    batch = route_topk_batch(logits, 2)
    single = collaboration_matrix(batch, 8)
    shards = [collaboration_matrix(route_topk_batch(part, 2), 8) for part in np.array_split(logits, 4)]
    merged = shards[0]
    for s in shards[1:]:
        merged = merge(merged, s)
    assert merged == single


def test_merge_mismatch():
    with pytest.raises(ConfigError):
        merge(CollaborationMatrix.zeros(4), CollaborationMatrix.zeros(5))
    with pytest.raises(ConfigError):
        merge(CollaborationMatrix.zeros(4, 0), CollaborationMatrix.zeros(4, 1))


# --- heatmap export --------------------------------------------------------

def test_heatmap_zero():
    grid = export_heatmap(CollaborationMatrix.zeros(4))
    assert not grid.any()


def test_heatmap_block_identity_roundtrip(tmp_path):
    c = np.zeros((4, 4), dtype=np.int64)
    c[0, 1] = c[1, 0] = 7
    c[2, 3] = c[3, 2] = 3
    m = CollaborationMatrix(c, layer_id=2, tokens_seen=10)
    path = tmp_path / "heat.csv"
    assert np.array_equal(export_heatmap(m, path), c)
    lines = path.read_text().splitlines()
    assert lines[0] == "# layer=2 tokens_seen=10 experts=4"
    assert lines[1] == "layer,i,j,count"
    assert lines[2 + 1] == "2,0,1,7"
    assert len(lines) == 2 + 16
    assert read_heatmaps(path) == [m]


def test_heatmap_multi_layer_stream():
    ms = [CollaborationMatrix(np.array([[0, l], [l, 0]]), l, l) for l in range(3)]
    buf = io.StringIO()
    write_heatmaps(buf, ms)
    buf.seek(0)
    assert read_heatmaps(buf) == ms


def test_heatmap_malformed(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("# layer=0 tokens_seen=1 experts=2\nlayer,i,j,count\n0,0,x,1\n")
    with pytest.raises(TraceFormatError, match=":3"):
        read_heatmaps(p)


def test_heatmap_io_error_mentions_path(tmp_path):
    missing = tmp_path / "nope" / "heat.csv"
    with pytest.raises(OSError) as exc:
        export_heatmap(CollaborationMatrix.zeros(2), missing)
    assert "heat.csv" in str(exc.value)


def test_c2r_heatmap_zero_outside_groups():
    spec = WorkloadSpec(20_000, 8, num_groups=4, cluster_strength=3.0, noise_scale=1.0, seed=11)
    logits = generate(spec)
    base = collaboration_matrix(route_topk_batch(logits, 2), 8)
    assert np.count_nonzero(base.counts) == 8 * 7
    c2r = collaboration_matrix(route_c2r_batch(logits, 2, extract_top_t(base, 1)), 8)
    grid = export_heatmap(c2r)
    groups = np.arange(8) % 4
    cross = groups[:, None] != groups[None, :]
    assert not grid[cross].any()


def test_specialization_effect_moderate_clustering():
    # T = group_size - 1 on a workload where top-K still crosses groups
    spec = WorkloadSpec(50_000, 8, num_groups=4, cluster_strength=2.0, noise_scale=1.0, seed=12)
    logits = generate(spec)
    base = collaboration_matrix(route_topk_batch(logits, 2), 8)
    c2r = collaboration_matrix(route_c2r_batch(logits, 2, extract_top_t(base, spec.group_size - 1)), 8)
    assert profile(c2r).layer_degree < profile(base).layer_degree
