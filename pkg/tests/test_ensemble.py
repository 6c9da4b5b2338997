import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tentaclenet import ensemble as en
from tentaclenet.ensemble import (
    BaggedEnsemble,
    BoostedEnsemble,
    bagging_predict,
    bagging_train,
    boost_predict,
    boost_train,
    compare_report,
    partition,
    samme_alpha,
    samme_reweight,
    write_compare_csv,
)
from tentaclenet.layers import softmax
from tentaclenet.model import NetworkSpec, build_tentaclenet
from tentaclenet.train import TrainConfig, predict_logits


class Fixed:
    """Stand-in member whose logits are looked up by row."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float32)


@pytest.fixture
def fixed_members(monkeypatch):
    monkeypatch.setattr(en, "predict_logits", lambda m, x: m.logits[: len(x)])


def onehot(classes, k, rows=1):
    z = np.zeros((rows, classes), np.float32)
    z[:, k] = 1
    return z


def toy_spec():
    return NetworkSpec((1, 8, 8), 2, "global_pool", [
        {"kind": "conv", "out": 4, "kernel": 3, "pad": 1, "pool": 2},
        {"kind": "conv", "out": 4, "kernel": 3, "pad": 1},
        {"kind": "conv", "out": 2, "kernel": 3, "pad": 1},
        {"kind": "globalpool"},
    ])


def toy_data(n=80, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(0, 0.5, size=(n, 1, 8, 8)).astype(np.float32)
    x[y == 0, :, :4] += 1
    x[y == 1, :, 4:] += 1
    return x, y


class TestPartition:
    def test_sizes(self):
        parts = partition(103, 4, np.random.default_rng(0))
        assert sorted(map(len, parts)) == [25, 26, 26, 26]
        allidx = np.concatenate(parts)
        assert len(set(allidx.tolist())) == 103 and set(allidx.tolist()) == set(range(103))

    def test_too_many(self):
        with pytest.raises(ValueError):
            partition(3, 4, np.random.default_rng(0))

    @given(st.integers(1, 300), st.integers(1, 20), st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_property(self, n, k, seed):
        if k > n:
            return
        parts = partition(n, k, np.random.default_rng(seed))
        sizes = [len(p) for p in parts]
        assert max(sizes) - min(sizes) <= 1 and sum(sizes) == n
        assert np.array_equal(np.sort(np.concatenate(parts)), np.arange(n))


class TestBagging:
    def test_vote(self, fixed_members):
        e = BaggedEnsemble([Fixed(onehot(6, k)) for k in (2, 2, 5)], mode="vote")
        assert bagging_predict(e, np.zeros((1, 1))).tolist() == [2]

    def test_vote_tie_lowest(self, fixed_members):
        e = BaggedEnsemble([Fixed(onehot(6, k)) for k in (4, 1)], mode="vote")
        assert bagging_predict(e, np.zeros((1, 1))).tolist() == [1]

    def test_average(self, fixed_members):
        rng = np.random.default_rng(0)
        logits = [rng.normal(size=(7, 4)) for _ in range(3)]
        e = BaggedEnsemble([Fixed(l) for l in logits])
        manual = sum(softmax(l.astype(np.float32).astype(np.float64), axis=1) for l in logits) / 3
        assert bagging_predict(e, np.zeros((7, 1))).tolist() == manual.argmax(axis=1).tolist()

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            BaggedEnsemble([], mode="median")

    def test_single_member_identity(self):
        x, y = toy_data()
        spec = toy_spec()
        e = bagging_train(spec, x, y, 1, TrainConfig(epochs=2), seed=3)
        assert len(e.members) == 1 and len(e.subsets[0]) == len(x)
        own = predict_logits(e.members[0], x).argmax(axis=1)
        for mode in ("average", "vote"):
            e.mode = mode
            assert np.array_equal(bagging_predict(e, x), own)

    def test_members_see_disjoint_data(self):
        x, y = toy_data(90)
        e = bagging_train(toy_spec(), x, y, 3, TrainConfig(epochs=1), seed=1)
        seen = np.concatenate(e.subsets)
        assert len(e.members) == 3 and np.array_equal(np.sort(seen), np.arange(90))


class TestSamme:
    def test_chance_binary(self):
        assert samme_alpha(0.5, 2) == 0.0

    def test_quarter(self):
        assert samme_alpha(0.25, 2) == pytest.approx(math.log(3), abs=1e-12)

    def test_multiclass(self):
        assert samme_alpha(0.6, 10) == pytest.approx(math.log(0.4 / 0.6) + math.log(9), abs=1e-12)
        assert samme_alpha(0.9, 10) == 0.0

    def test_perfect_capped(self):
        assert samme_alpha(0.0, 3) == pytest.approx(math.log(1e12))

    @given(st.lists(st.floats(0.01, 0.6), min_size=1, max_size=8), st.integers(0, 999))
    @settings(max_examples=50, deadline=None)
    def test_weights_renormalize(self, errs, seed):
        rng = np.random.default_rng(seed)
        w = np.full(50, 1 / 50)
        for err in errs:
            miss = (rng.random(50) < err).astype(float)
            w = samme_reweight(w, miss, samme_alpha(err, 3))
            assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-9

    def test_single_class_rejected(self):
        x, _ = toy_data(20)
        with pytest.raises(ValueError):
            boost_train(toy_spec(), x, np.zeros(20, int), 2, TrainConfig(epochs=1))


class TestBoostPredict:
    def test_weighted(self, fixed_members):
        e = BoostedEnsemble([Fixed(onehot(5, 3)), Fixed(onehot(5, 1))], [1.0, 0.5], 5)
        assert boost_predict(e, np.zeros((1, 1))).tolist() == [3]

    def test_outvoted(self, fixed_members):
        e = BoostedEnsemble([Fixed(onehot(5, 3))] + [Fixed(onehot(5, 1))] * 3, [1.0, 0.5, 0.5, 0.5], 5)
        assert boost_predict(e, np.zeros((1, 1))).tolist() == [1]

    def test_brute_force(self, fixed_members):
        rng = np.random.default_rng(4)
        logits = [rng.normal(size=(30, 4)) for _ in range(5)]
        alphas = rng.uniform(0.1, 2, size=5).tolist()
        got = boost_predict(BoostedEnsemble([Fixed(l) for l in logits], alphas, 4), np.zeros((30, 1)))
        for i in range(30):
            score = [0.0] * 4
            for l, a in zip(logits, alphas):
                score[int(np.argmax(l[i].astype(np.float32)))] += a
            assert got[i] == max(range(4), key=lambda k: (score[k], -k))

    def test_single_round_identity(self):
        x, y = toy_data()
        e = boost_train(toy_spec(), x, y, 1, TrainConfig(epochs=2), seed=0)
        assert len(e.members) == 1
        assert np.array_equal(boost_predict(e, x), predict_logits(e.members[0], x).argmax(axis=1))

    def test_training_weights(self):
        x, y = toy_data()
        e = boost_train(toy_spec(), x, y, 3, TrainConfig(epochs=2), seed=1)
        assert 1 <= len(e.members) == len(e.alphas) <= 3
        for w in e.sample_weights:
            assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-9


class TestCompare:
    def test_zero_delta(self):
        rows = compare_report(80.0, [("TentacleNet(4)", 80.0, 10.0, 4)])
        assert rows[0]["delta_pct"] == 0.0

    def test_table_savings(self):
        rows = compare_report(90.0, [
            ("BENN-bagging", 88.0, 1445.0, 6),
            ("BENN-boosting", 88.5, 2000.0, 6),
            ("TentacleNet(4)", 89.0, 645.0, 4),
        ])
        assert rows[2]["savings_pct"] == 55.3
        assert rows[0]["savings_pct"] is None
        assert rows[2]["delta_pct"] == pytest.approx(-1.0)

    def test_other_savings(self):
        rows = compare_report(70.0, [("bag", 60.0, 100.0, 5), ("TentacleNet", 61.0, 27.0, 5)])
        assert rows[1]["savings_pct"] == 73.0

    def test_csv(self, tmp_path):
        rows = compare_report(70.0, [("bag", 60.0, 100.0, 5), ("TentacleNet", 61.0, 27.0, 5)], "synth")
        write_compare_csv(rows, tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "benchmark,template,delta_pct,members,size_kb,savings_pct"
        assert lines[1].endswith(",") and lines[2].endswith(",73.0")
