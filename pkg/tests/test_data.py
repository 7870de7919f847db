import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmlfm.data import (
    UNKNOWN,
    DataError,
    FieldLayout,
    SparseInstance,
    Vocabulary,
    build_eval_candidates,
    encode_instance,
    load_interactions,
    sample_negatives,
    split_leave_one_out,
    split_rating,
    to_arrays,
    with_item,
    write_libfm,
    write_tabular,
)


def layout_of(*cards):
    return FieldLayout.from_cardinalities(cards, ["user", "item", "cat"][: len(cards)])


def interactions(n_users=5, n_items=8, per_user=3, seed=0):
    rng = np.random.default_rng(seed)
    lay = layout_of(n_users, n_items)
    out = []
    for u in range(n_users):
        for t, it in enumerate(rng.choice(n_items, per_user, replace=False)):
            out.append(encode_instance((u, int(it)), lay, 1.0, int(rng.integers(100)) * 10 + t))
    return out, lay


# ---------------------------------------------------------------- layouts
def test_layout_offsets():
    lay = FieldLayout.from_cardinalities((3, 4, 5))
    assert lay.offsets == [0, 3, 7]
    assert lay.n == 12
    with pytest.raises(DataError):
        FieldLayout((("a", 2), ("a", 3)))
    with pytest.raises(DataError):
        FieldLayout((("a", 0),))


def test_encode_instance_examples():
    lay = FieldLayout.from_cardinalities((3, 4, 5))
    assert encode_instance((1, 2, 3), lay).indices == (1, 5, 10)
    assert encode_instance((0,), FieldLayout.from_cardinalities((2,))).indices == (0,)
    with pytest.raises(DataError, match="f1"):
        encode_instance((1, 4, 3), lay)
    with pytest.raises(DataError):
        encode_instance((1, 2), lay)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=5).flatmap(
    lambda cards: st.tuples(st.just(cards), st.tuples(*[st.integers(0, c - 1) for c in cards]))))
def test_encode_decode_round_trip(case):
    cards, values = case
    lay = FieldLayout.from_cardinalities(cards)
    x = encode_instance(values, lay)
    assert list(x.indices) == sorted(x.indices)
    assert all(v == 1.0 for v in x.values)
    assert lay.decode(x.indices) == list(values)


def test_with_item_follows_attributes():
    lay = layout_of(2, 3, 4)
    x = encode_instance((1, 0, 2), lay, 1.0, 7)
    y = with_item(x, 2, lay, {2: {2: 3}}, label=-1.0)
    assert y.categories == (1, 2, 3)
    assert (y.label, y.user, y.item, y.timestamp) == (-1.0, 1, 2, 7)


# ---------------------------------------------------------------- loading
def test_tabular_three_users_two_items(tmp_path):
    p = tmp_path / "d.tsv"
    write_tabular(p, [("a", "x", 1, 1), ("b", "y", 1, 2), ("c", "x", 1, 3)])
    data = load_interactions(p)
    instances, layout = data
    assert layout.cardinalities == [3, 2]
    assert layout.n == 5
    assert len(instances) == 3
    assert data.vocabulary.encode("user", "b") == 1


def test_tabular_extra_columns_and_item_attributes(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("user,item,label,timestamp,genre,device\n"
                 "u1,i1,4,10,rock,phone\nu2,i1,3,11,rock,web\nu1,i2,5,12,jazz,web\n")
    data = load_interactions(p, delimiter=",")
    assert data.layout.names == ["user", "item", "genre", "device"]
    # genre is a function of the item, device is not
    assert data.item_attributes == {0: {2: 1}, 1: {2: 0}}
    assert data.instances[0].label == 4.0
    assert data.instances[2].timestamp == 12


def test_tabular_errors(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    with pytest.raises(DataError, match="no instances"):
        load_interactions(p)
    p.write_text("user\titem\tlabel\n")
    with pytest.raises(DataError, match="no instances"):
        load_interactions(p)
    p.write_text("user\titem\n1\t2\n")
    with pytest.raises(DataError, match="label"):
        load_interactions(p)
    p.write_text("user\titem\tlabel\n1\t2\t1\n3\t4\n")
    with pytest.raises(DataError, match=":3:"):
        load_interactions(p)
    p.write_text("user\titem\tlabel\n1\t2\tx\n")
    with pytest.raises(DataError, match=":2:"):
        load_interactions(p)


def test_unknown_category_maps_to_reserved_index(tmp_path):
    p = tmp_path / "d.tsv"
    write_tabular(p, [("a", "x", 1, 1), ("b", "y", 1, 2)])
    data = load_interactions(p, reserve_unknown=True)
    assert data.layout.cardinalities == [3, 3]
    q = tmp_path / "new.tsv"
    write_tabular(q, [("zz", "x", 1, 5)])
    again = load_interactions(q, vocabulary=data.vocabulary)
    assert again.instances[0].user == data.vocabulary.encode("user", UNKNOWN) == 2
    strict = load_interactions(p)
    with pytest.raises(DataError, match="unknown category"):
        load_interactions(q, vocabulary=strict.vocabulary)


def test_vocabulary_persistence(tmp_path):
    v = Vocabulary.build({"user": ["10", "2", "b", "a"], "item": ["x"]}, reserve_unknown=True)
    assert v.encode("user", "2") == 0 and v.encode("user", "10") == 1
    v.save(tmp_path / "vocab.csv")
    assert (tmp_path / "vocab.csv").read_text().splitlines()[0] == "user,2,0"
    w = Vocabulary.load(tmp_path / "vocab.csv")
    assert w.maps == v.maps and w.reserve_unknown
    assert Vocabulary.from_rows(v.to_rows()).maps == v.maps


def test_libfm_examples(tmp_path):
    p = tmp_path / "d.libfm"
    p.write_text("1 0:1 7:1\n")
    instances, layout = load_interactions(p, "libfm", n=10)
    assert instances[0].label == 1.0 and instances[0].indices == (0, 7)
    assert layout.n == 10
    with pytest.raises(DataError, match="needs n"):
        load_interactions(p, "libfm")
    (tmp_path / "d.libfm.meta").write_text("n=10\n")
    assert load_interactions(p, "libfm").layout.n == 10


def test_libfm_errors_and_round_trip(tmp_path):
    p = tmp_path / "d.libfm"
    p.write_text("1 0:1 12:1\n")
    with pytest.raises(DataError, match=":1:"):
        load_interactions(p, "libfm", n=10)
    p.write_text("1 0:1\n2 oops\n")
    with pytest.raises(DataError, match=":2:"):
        load_interactions(p, "libfm", n=10)
    p.write_text("")
    with pytest.raises(DataError, match="no instances"):
        load_interactions(p, "libfm", n=10)
    xs = [SparseInstance(-1.0, (2, 3), (0.25, -1.5)), SparseInstance(3.5, (0,), (1.0,))]
    write_libfm(p, xs, n=4)
    back, layout = load_interactions(p, "libfm")
    assert [(x.label, x.indices, x.values) for x in back] == [(x.label, x.indices, x.values) for x in xs]


# ----------------------------------------------------------------- splits
def test_split_rating_sizes_and_determinism():
    xs = [SparseInstance(float(i), (0,), (1.0,), i, 0, i) for i in range(100)]
    s = split_rating(xs, seed=3)
    assert (len(s.train), len(s.validation), len(s.test)) == (70, 20, 10)
    t = split_rating(xs, seed=3)
    assert [x.label for x in s.test] == [x.label for x in t.test]
    keys = [x.key for x in s.train + s.validation + s.test]
    assert len(set(keys)) == 100
    assert len(split_rating(xs, (1, 0, 0)).train) == 100
    with pytest.raises(DataError):
        split_rating(xs[:9])
    with pytest.raises(DataError):
        split_rating(xs, (0.5, 0.2, 0.2))


@pytest.mark.parametrize("n", [10, 11, 37, 999])
def test_split_rating_within_one(n):
    xs = [SparseInstance(0.0, (0,), (1.0,), i, 0, i) for i in range(n)]
    s = split_rating(xs)
    for part, r in zip((s.train, s.validation, s.test), (0.7, 0.2, 0.1)):
        assert abs(len(part) - r * n) <= 1


def test_leave_one_out_examples():
    lay = layout_of(3, 10)
    xs = [encode_instance((0, i), lay, 1.0, t) for i, t in ((1, 1), (2, 5), (3, 3))]
    xs.append(encode_instance((1, 4), lay, 1.0, 9))
    s = split_leave_one_out(xs, lay)
    assert [x.item for x in s.test] == [2]
    assert len(s.train) == 3 and s.validation == []
    ties = [encode_instance((2, i), lay, 1.0, 4) for i in (5, 8, 6)]
    assert split_leave_one_out(ties, lay).test[0].item == 8
    with pytest.raises(DataError, match="timestamps"):
        split_leave_one_out([encode_instance((0, 0), lay)], lay)


def test_leave_one_out_latest_is_held():
    xs, lay = interactions(30, 20, 5)
    s = split_leave_one_out(xs, lay)
    assert len(s.test) == 30
    latest = {x.user: x.timestamp for x in s.test}
    assert all(x.timestamp <= latest[x.user] for x in s.train)


# -------------------------------------------------------- negative sampling
def test_sample_negatives_counts_and_exclusion():
    lay = layout_of(2, 20)
    train = [encode_instance((0, i), lay, 5.0, i) for i in (1, 2, 3)]
    out = sample_negatives(train, lay, 2, seed=0)
    negs = [x for x in out if x.label == -1.0]
    assert len(negs) == 6
    assert all(x.label == 1.0 for x in out[:3])
    assert not {x.item for x in negs} & {1, 2, 3}
    assert all(x.user == 0 for x in negs)
    assert sample_negatives(train, lay, 0) == [x if x.label == 1 else x for x in out[:3]]
    again = sample_negatives(train, lay, 2, seed=0)
    assert [x.item for x in again] == [x.item for x in out]


def test_sample_negatives_saturated_user_logs(caplog):
    lay = layout_of(1, 3)
    train = [encode_instance((0, i), lay, 1.0, i) for i in (0, 1)]
    with caplog.at_level(logging.WARNING):
        out = sample_negatives(train, lay, 2)
    assert sorted(x.item for x in out if x.label < 0) == [2, 2]
    assert "fewer" in caplog.text


def test_sample_negatives_never_hits_train_positives():
    xs, lay = interactions(40, 15, 6, seed=4)
    out = sample_negatives(xs, lay, 2, seed=1)
    pos = {(x.user, x.item) for x in xs}
    assert all((x.user, x.item) not in pos for x in out if x.label < 0)
    assert len(out) == 3 * len(xs)


def test_sample_negatives_item_attributes_follow():
    lay = layout_of(1, 5, 2)
    attrs = {i: {2: i % 2} for i in range(5)}
    train = [encode_instance((0, 0, 0), lay, 1.0, 0)]
    for x in sample_negatives(train, lay, 4, item_attributes=attrs):
        assert x.categories[2] == x.item % 2


def test_eval_candidates():
    c = build_eval_candidates(7, 42, range(200), {1, 2, 3, 4, 42}, 99, seed=1)
    assert len(c) == 100 and len(set(c)) == 100
    assert c.count(42) == 1 and c[-1] == 42
    assert not set(c[:-1]) & {1, 2, 3, 4}
    assert c == build_eval_candidates(7, 42, range(200), {1, 2, 3, 4, 42}, 99, seed=1)
    with pytest.raises(DataError, match="only 6"):
        build_eval_candidates(0, 0, range(10), {0, 1, 2, 3}, 99)


def test_to_arrays_pads_with_zero_values():
    xs = [SparseInstance(1.0, (0, 3), (1.0, 2.0)), SparseInstance(-1.0, (5,), (0.5,))]
    enc = to_arrays(xs)
    np.testing.assert_array_equal(enc.indices, [[0, 3], [5, 0]])
    np.testing.assert_array_equal(enc.values, [[1.0, 2.0], [0.5, 0.0]])
    np.testing.assert_array_equal(enc.labels, [1.0, -1.0])
    assert len(enc.subset([1])) == 1
