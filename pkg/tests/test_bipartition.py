import csv
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdlaplace.bipartition import (
    Bipartition,
    brute_force_classes,
    canonical_signature,
    catalog_rows,
    enumerate_connected,
    enumerate_connected_level,
    is_connected,
    iter_connected,
    level_shapes,
    perfect_matchings,
    relabeling_orbits,
    set_partitions,
    write_catalog_csv,
)

P1Q1 = Bipartition.parse("1234", "12|34")
P2Q2 = Bipartition.parse("123|456", "12|34|56")
P3Q3 = Bipartition.parse("123|456", "14|25|36")


def bell(n):
    row = [1]
    for _ in range(n - 1):
        nxt = [row[-1]]
        for x in row:
            nxt.append(nxt[-1] + x)
        row = nxt
    return row[-1]


def test_validation():
    with pytest.raises(ValueError):
        Bipartition.parse("12|34", "12|34")  # P-blocks too small
    with pytest.raises(ValueError):
        Bipartition(((0, 1, 2, 3),), ((0, 1), (1, 2)))
    with pytest.raises(ValueError):
        Bipartition(((0, 1, 2),), ((0, 1),))


def test_shape_and_level():
    assert (P2Q2.m, P2Q2.v, P2Q2.level) == (3, 2, 1)
    assert str(P3Q3) == "P=(123|456) Q=(14|25|36)"


def test_set_partitions_counts():
    assert sum(1 for _ in set_partitions(6)) == bell(6)
    # partitions of 6 into blocks >= 3: one block, or two triples (10 ways)
    assert sum(1 for _ in set_partitions(6, min_block=3)) == 11


def test_perfect_matching_count_and_order():
    ms = list(perfect_matchings(range(6)))
    assert len(ms) == 15
    assert ms[0] == ((0, 1), (2, 3), (4, 5))
    assert all(pair[0] < pair[1] for m in ms for pair in m)


def test_connectivity_examples():
    assert is_connected(P1Q1)
    assert not is_connected(Bipartition.parse("1234|5678", "12|34|56|78"))
    assert is_connected(P3Q3)
    # two triples always have an odd number of crossing pairs
    assert all(is_connected(Bipartition(P2Q2.p_blocks, q)) for q in perfect_matchings(range(6)))


def test_signature_examples():
    assert canonical_signature(P1Q1) == canonical_signature(Bipartition.parse("1234", "13|24"))
    assert canonical_signature(P2Q2) != canonical_signature(P3Q3)
    perm = [5, 4, 3, 2, 1, 0]
    assert canonical_signature(P3Q3.relabel(perm)) == canonical_signature(P3Q3)


@settings(max_examples=80, deadline=None)
@given(st.sampled_from([(1, 2), (2, 3), (1, 3), (2, 4)]), st.randoms(use_true_random=False))
def test_relabeling_invariance(shape, rnd):
    members = list(iter_connected(*shape))
    b = rnd.choice(members)
    perm = list(range(2 * b.m))
    rnd.shuffle(perm)
    c = b.relabel(perm)
    assert is_connected(c)
    assert canonical_signature(c) == canonical_signature(b)


def test_level_one_catalog():
    classes = enumerate_connected_level(1)
    assert sum(c.multiplicity for c in classes) == 153
    assert sorted(c.multiplicity for c in classes) == [3, 60, 90]
    sig = {canonical_signature(b): b for b in (P1Q1, P2Q2, P3Q3)}
    assert {c.signature for c in classes} == set(sig)
    by_sig = {c.signature: c.multiplicity for c in classes}
    assert by_sig[canonical_signature(P1Q1)] == 3
    assert by_sig[canonical_signature(P2Q2)] == 90
    assert by_sig[canonical_signature(P3Q3)] == 60


def test_level_one_weights():
    weights = {}
    for c in enumerate_connected_level(1):
        weights[c.signature] = c.multiplicity * (-1) ** c.v / math.factorial(2 * c.m)
    assert weights[canonical_signature(P1Q1)] == pytest.approx(-1 / 8)
    assert weights[canonical_signature(P2Q2)] + weights[canonical_signature(P3Q3)] == pytest.approx(5 / 24)


def test_level_two_catalog():
    classes = enumerate_connected_level(2)
    assert len(classes) == 15
    assert {(c.v, c.m) for c in classes} == {(v, v + 2) for v in range(1, 5)}
    # total weight vanishes: the Stirling series has no n^-2 term
    total = sum(c.multiplicity * (-1) ** c.v / math.factorial(2 * c.m) for c in classes)
    assert total == pytest.approx(0.0, abs=1e-15)


def test_level_shapes_and_cap():
    assert level_shapes(2) == [(1, 3), (2, 4), (3, 5), (4, 6)]
    with pytest.raises(ValueError):
        enumerate_connected_level(2, max_m=5)
    assert len(enumerate_connected_level(2, max_m=6)) == 15
    with pytest.raises(ValueError):
        level_shapes(0)


@pytest.mark.parametrize("shape", [(1, 2), (2, 3), (1, 3), (2, 4), (1, 4)])
def test_signature_classes_match_brute_force(shape):
    fast = {c.signature: c.multiplicity for c in enumerate_connected(*shape)}
    assert fast == brute_force_classes(*shape)


@pytest.mark.parametrize("shape", [(1, 2), (2, 3), (2, 4)])
def test_signatures_separate_orbits(shape):
    orbits = relabeling_orbits(*shape)
    sigs = [{canonical_signature(b) for b in orbit} for orbit in orbits]
    assert all(len(s) == 1 for s in sigs)
    assert len({next(iter(s)) for s in sigs}) == len(orbits)
    assert sorted(len(o) for o in orbits) == sorted(c.multiplicity for c in enumerate_connected(*shape))


def test_every_member_respects_block_rules():
    for b in iter_connected(2, 4):
        assert all(len(p) >= 3 for p in b.p_blocks)
        assert all(len(q) == 2 for q in b.q_blocks)
        assert b.level == 2


def test_catalog_csv(tmp_path):
    path = tmp_path / "cat.csv"
    assert write_catalog_csv(path, [1]) == 3
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["level", "v", "m", "multiplicity", "representative_P", "representative_Q"]
    assert rows[0]["representative_P"] == "1 2 3 4"
    assert rows == [{k: str(v) for k, v in r.items()} for r in catalog_rows([1])]
    parsed = Bipartition.parse(rows[2]["representative_P"], rows[2]["representative_Q"])
    assert is_connected(parsed)


def test_parse_multi_digit_labels():
    b = Bipartition.parse("1 2 3 4 5|6 7 8 9 10 11 12", "1 6|2 7|3 8|4 9|5 10|11 12")
    assert b.m == 6 and b.v == 2
    assert b.p_blocks[1] == (5, 6, 7, 8, 9, 10, 11)
