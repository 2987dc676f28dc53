import gzip
import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtrust.fl import (
    BadMagic, CountMismatch, Dataset, ElapsedVerdict, EmptyAccepted, EmptyShard, Honest,
    InsufficientData, InvalidDims, Lazy, LengthMismatch, LocalUpdate, ModelState, Poisoner,
    RoniVerdict, TruncatedFile, Unreliable, WorkerProfile, aggregate, elapsed_check, emd,
    evaluate, gen_synthetic, init_model, label_distribution, load_idx, local_sgd, loss_and_grad,
    partition, poison,
)
from fedtrust.fl.data import class_means, poison_count, write_idx
from fedtrust.fl.defenses import roni_decision, roni_filter
from fedtrust.fl.model import predict


def nearest_mean_accuracy(train: Dataset, test: Dataset) -> float:
    means = class_means(train)
    d = ((test.features[:, None, :] - means[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == test.labels))


def numeric_grad(model, x, y, h=1e-5):
    flat = model.flat()
    c, f = model.shape
    grad = np.zeros_like(flat)
    for i in range(len(flat)):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        lp, _ = loss_and_grad(ModelState.from_flat(up, c, f), x, y)
        lm, _ = loss_and_grad(ModelState.from_flat(down, c, f), x, y)
        grad[i] = (lp - lm) / (2 * h)
    return grad


def random_delta(rng, c=3, f=4, scale=1.0):
    return ModelState(rng.normal(0, scale, (c, f)), rng.normal(0, scale, c))


class TestSynthetic:
    def test_deterministic(self):
        a = gen_synthetic(10000, 10, 20, 8.0, seed=5)
        b = gen_synthetic(10000, 10, 20, 8.0, seed=5)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)

    def test_balance(self):
        ds = gen_synthetic(10, 10, 10, 8.0, seed=0)
        assert sorted(ds.labels.tolist()) == list(range(10))
        counts = np.bincount(gen_synthetic(1003, 10, 10, 3.0, seed=1).labels)
        assert counts.max() - counts.min() <= 1

    def test_nearest_mean_oracle(self):
        full = gen_synthetic(12000, 10, 20, 8.0, seed=0)
        test, train = full.split(2000 / 12000, seed=0)
        assert nearest_mean_accuracy(train, test) >= 0.95

    def test_mean_separation(self):
        ds = gen_synthetic(20000, 4, 6, 5.0, seed=2)
        m = class_means(ds)
        for i, j in itertools.combinations(range(4), 2):
            assert np.linalg.norm(m[i] - m[j]) == pytest.approx(5.0, abs=0.15)

    @pytest.mark.parametrize("args", [(10, 1, 5, 1.0), (10, 5, 3, 1.0), (10, 3, 3, 0.0), (0, 3, 3, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(InvalidDims):
            gen_synthetic(*args, seed=0)

    def test_dataset_validation(self):
        with pytest.raises(InvalidDims):
            Dataset(np.zeros((3, 2)), np.array([0, 1, 3]), 3)
        with pytest.raises(InvalidDims):
            Dataset(np.zeros((3, 2)), np.array([0, 1]), 3)


class TestIdx:
    def _write(self, tmp_path, n=5, rows=3, cols=2, gz=False):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, (n, rows, cols), dtype=np.uint8)
        labels = rng.integers(0, 10, n, dtype=np.uint8)
        suffix = ".gz" if gz else ""
        ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
        write_idx(tmp_path / "img", tmp_path / "lab", images, labels)
        if gz:
            for plain, packed in ((tmp_path / "img", ip), (tmp_path / "lab", lp)):
                packed.write_bytes(gzip.compress(plain.read_bytes()))
        return ip, lp, images, labels

    @pytest.mark.parametrize("gz", [False, True])
    def test_roundtrip(self, tmp_path, gz):
        ip, lp, images, labels = self._write(tmp_path, gz=gz)
        ds = load_idx(ip, lp, n_classes=10)
        assert len(ds) == 5 and ds.n_features == 6
        assert np.allclose(ds.features * 255, images.reshape(5, 6))
        assert ds.features.min() >= 0 and ds.features.max() <= 1
        assert np.array_equal(ds.labels, labels)

    def test_bad_magic(self, tmp_path):
        ip, lp, *_ = self._write(tmp_path)
        raw = bytearray(lp.read_bytes())
        raw[3] = 0x03
        lp.write_bytes(bytes(raw))
        with pytest.raises(BadMagic):
            load_idx(ip, lp)

    def test_truncated(self, tmp_path):
        ip, lp, *_ = self._write(tmp_path)
        ip.write_bytes(ip.read_bytes()[:-1])
        with pytest.raises(TruncatedFile):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, lp, *_ = self._write(tmp_path)
        lp.write_bytes(struct.pack(">2I", 0x801, 4) + bytes(4))
        with pytest.raises(CountMismatch):
            load_idx(ip, lp)


class TestEmd:
    def test_examples(self):
        u = np.full(10, 0.1)
        assert emd(u, u) == 0.0
        assert emd(np.eye(10)[0], u) == pytest.approx(1.8, abs=1e-12)
        two = np.zeros(10)
        two[:2] = 0.5
        assert emd(two, u) == pytest.approx(1.6, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            emd([0.5, 0.5], [1.0, 0.0, 0.0])

    def test_not_distribution(self):
        with pytest.raises(ValueError):
            emd([0.5, 0.6], [0.5, 0.5])

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.data())
    def test_bounds_and_symmetry(self, raw, data):
        p = np.array(raw) + 1e-3
        p /= p.sum()
        q = np.array(data.draw(st.lists(st.floats(0, 1), min_size=len(raw), max_size=len(raw)))) + 1e-3
        q /= q.sum()
        assert 0.0 <= emd(p, q) <= 2.0 + 1e-12
        assert emd(p, q) == emd(q, p)
        assert emd(p, p) == 0.0


def uniform_profiles(n, kind=Honest()):
    return [WorkerProfile(f"w{i}", kind) for i in range(n)]


class TestPartition:
    def test_equal_split(self):
        ds = gen_synthetic(10000, 10, 10, 3.0, seed=0)
        shards = partition(ds, uniform_profiles(10), seed=1)
        assert [len(p.shard) for p in shards] == [1000] * 10

    def test_split_within_one(self):
        ds = gen_synthetic(1003, 10, 10, 3.0, seed=0)
        sizes = [len(p.shard) for p in partition(ds, uniform_profiles(10), seed=1)]
        assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 1003

    def test_disjoint(self):
        ds = gen_synthetic(2000, 10, 10, 3.0, seed=0)
        ds = Dataset(np.arange(2000, dtype=float)[:, None] * np.ones((1, 10)), ds.labels, 10)
        profiles = uniform_profiles(6) + [WorkerProfile("u", Unreliable(2))]
        shards = partition(ds, profiles, seed=3, shard_size=150)
        ids = np.concatenate([p.shard.features[:, 0] for p in shards])
        assert len(np.unique(ids)) == len(ids) == 1050

    def test_skew(self):
        ds = gen_synthetic(20000, 10, 10, 3.0, seed=0)
        profiles = uniform_profiles(6) + [WorkerProfile(f"u{i}", Unreliable(2)) for i in range(4)]
        uniform = np.full(10, 0.1)
        for p in partition(ds, profiles, seed=2, shard_size=1000):
            dist = p.shard.label_distribution()
            if isinstance(p.behavior, Unreliable):
                assert np.count_nonzero(dist) == 2
                assert emd(dist, uniform) == pytest.approx(1.6, abs=0.05)
            else:
                assert emd(dist, uniform) <= 0.1

    def test_deterministic(self):
        ds = gen_synthetic(3000, 10, 10, 3.0, seed=0)
        profiles = uniform_profiles(3) + [WorkerProfile("u", Unreliable(3))]
        a = partition(ds, profiles, seed=4, shard_size=300)
        b = partition(ds, profiles, seed=4, shard_size=300)
        for x, y in zip(a, b):
            assert np.array_equal(x.shard.labels, y.shard.labels)

    def test_skewed_full_split_infeasible(self):
        ds = gen_synthetic(10000, 10, 10, 3.0, seed=0)
        profiles = uniform_profiles(6) + [WorkerProfile(f"u{i}", Unreliable(2)) for i in range(4)]
        with pytest.raises(InsufficientData):
            partition(ds, profiles, seed=2)

    def test_insufficient(self):
        ds = gen_synthetic(100, 10, 10, 3.0, seed=0)
        with pytest.raises(InsufficientData):
            partition(ds, uniform_profiles(3), seed=0, shard_size=50)
        with pytest.raises(ValueError):
            partition(ds, [], seed=0)

    def test_profile_validation(self):
        with pytest.raises(ValueError):
            Poisoner(1.5)
        with pytest.raises(ValueError):
            Lazy(1.0)
        with pytest.raises(ValueError):
            Unreliable(0)
        ds = gen_synthetic(20, 4, 4, 3.0, seed=0)
        with pytest.raises(ValueError):
            WorkerProfile("w", Unreliable(5), ds)


class TestPoison:
    def test_strength_zero(self):
        ds = gen_synthetic(100, 10, 10, 3.0, seed=0)
        assert np.array_equal(poison(ds, 0.0, seed=1).labels, ds.labels)

    def test_strength_one(self):
        ds = gen_synthetic(100, 10, 10, 3.0, seed=0)
        out = poison(ds, 1.0, seed=1)
        assert np.all(out.labels != ds.labels)
        assert out.features is ds.features

    def test_exact_count(self):
        ds = gen_synthetic(1000, 10, 10, 3.0, seed=0)
        assert np.count_nonzero(poison(ds, 0.9, seed=2).labels != ds.labels) == 900

    def test_exhaustive_small(self):
        for n in range(1, 13):
            ds = gen_synthetic(n, 3, 3, 3.0, seed=n)
            for k in range(0, 21):
                s = k / 20
                changed = np.count_nonzero(poison(ds, s, seed=k).labels != ds.labels)
                assert changed == poison_count(s, n) == int(np.floor(s * n + 0.5))

    def test_remap_uniform_over_other_classes(self):
        ds = Dataset(np.zeros((20000, 1)), np.zeros(20000, dtype=np.int64), 5)
        counts = np.bincount(poison(ds, 1.0, seed=0).labels, minlength=5)
        assert counts[0] == 0
        assert np.all(np.abs(counts[1:] / 20000 - 0.25) < 0.015)


class TestGradient:
    def test_finite_differences_toy(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 4))
        y = rng.integers(0, 3, 8)
        model = random_delta(rng, 3, 4, 0.5)
        _, g = loss_and_grad(model, x, y)
        num = numeric_grad(model, x, y)
        rel = np.abs(g.flat() - num) / np.maximum(1e-8, np.abs(g.flat()) + np.abs(num))
        assert rel.max() < 1e-4


class TestLocalSgd:
    def setup_method(self):
        self.ds = gen_synthetic(200, 3, 4, 4.0, seed=0)
        self.model = init_model(3, 4, seed=0)

    def test_zero_lr(self):
        up = local_sgd(self.model, self.ds, 32, 5, 0.0, seed=1)
        assert not up.delta.flat().any()

    def test_deterministic(self):
        a = local_sgd(self.model, self.ds, 32, 5, 0.1, seed=1, worker_id="w")
        b = local_sgd(self.model, self.ds, 32, 5, 0.1, seed=1, worker_id="w")
        assert a.delta.flat().tobytes() == b.delta.flat().tobytes()

    def test_worker_streams_differ(self):
        a = local_sgd(self.model, self.ds, 32, 5, 0.1, seed=1, worker_id="a")
        b = local_sgd(self.model, self.ds, 32, 5, 0.1, seed=1, worker_id="b")
        assert not np.array_equal(a.delta.flat(), b.delta.flat())

    def test_reduces_loss(self):
        up = local_sgd(self.model, self.ds, 32, 50, 0.5, seed=1)
        before, _ = loss_and_grad(self.model, self.ds.features, self.ds.labels)
        after, _ = loss_and_grad(self.model + up.delta, self.ds.features, self.ds.labels)
        assert after < before

    def test_elapsed_and_size(self):
        up = local_sgd(self.model, self.ds, 32, 5, 0.1, seed=1, compute_rate=2.0)
        assert (up.claimed_elapsed, up.claimed_data_size) == (400.0, 200)
        lazy = local_sgd(self.model, self.ds, 32, 5, 0.1, seed=1, compute_rate=2.0,
                         fraction_trained=0.4)
        assert (lazy.claimed_elapsed, lazy.claimed_data_size) == (160.0, 200)

    def test_empty_shard(self):
        with pytest.raises(EmptyShard):
            local_sgd(self.model, self.ds.subset(np.array([], dtype=int)), 32, 5, 0.1, seed=0)

    def test_negative_lr(self):
        with pytest.raises(ValueError):
            local_sgd(self.model, self.ds, 32, 5, -0.1, seed=0)


class TestElapsed:
    @pytest.mark.parametrize("claimed,verdict", [(500, ElapsedVerdict.LAZY), (1000, ElapsedVerdict.OK),
                                                 (901, ElapsedVerdict.OK), (899, ElapsedVerdict.LAZY)])
    def test_examples(self, claimed, verdict):
        up = LocalUpdate("w", ModelState.zeros(2, 2), claimed, 1000)
        assert elapsed_check(up, 1.0, 0.1) is verdict

    def test_invalid_params(self):
        up = LocalUpdate("w", ModelState.zeros(2, 2), 1, 1)
        with pytest.raises(ValueError):
            elapsed_check(up, 0.0, 0.1)
        with pytest.raises(ValueError):
            elapsed_check(up, 1.0, 1.0)

    def test_negative_claims_rejected(self):
        with pytest.raises(ValueError):
            LocalUpdate("w", ModelState.zeros(2, 2), -1, 1)


class TestRoni:
    def test_decision_examples(self):
        assert roni_decision(0.85, 0.90, 0.02) is RoniVerdict.REJECT
        assert roni_decision(0.89, 0.90, 0.02) is RoniVerdict.ACCEPT
        assert roni_decision(0.90, 0.90, 0.0) is RoniVerdict.ACCEPT

    def test_zero_delta_accepted(self, small_dataset):
        model = init_model(4, 6, seed=3, scale=1.0)
        up = LocalUpdate("w", ModelState.zeros(4, 6), 0, 0)
        assert roni_filter(model, up, small_dataset, 0.0) is RoniVerdict.ACCEPT

    def test_destructive_update_rejected(self, small_dataset):
        model = init_model(4, 6, seed=3)
        for _ in range(20):
            model = model + local_sgd(model, small_dataset, 32, 5, 0.3, seed=1).delta
        bad = ModelState(-10 * model.weights, -10 * model.bias)
        up = LocalUpdate("w", bad, 0, 0)
        assert roni_filter(model, up, small_dataset, 0.02) is RoniVerdict.REJECT


class TestAggregate:
    def test_identical(self):
        rng = np.random.default_rng(0)
        g, d = random_delta(rng), random_delta(rng)
        out = aggregate(g, [LocalUpdate(str(i), d, 0, 0) for i in range(3)])
        assert np.allclose(out.flat(), (g + d).flat(), rtol=0, atol=1e-15)

    def test_single_exact(self):
        rng = np.random.default_rng(1)
        g, d = random_delta(rng), random_delta(rng)
        assert aggregate(g, [LocalUpdate("a", d, 0, 0)]).flat().tobytes() == (g + d).flat().tobytes()

    def test_cancellation(self):
        rng = np.random.default_rng(2)
        g, d = random_delta(rng), random_delta(rng)
        out = aggregate(g, [LocalUpdate("a", d, 0, 0), LocalUpdate("b", d.scaled(-1), 0, 0)])
        assert np.allclose(out.flat(), g.flat(), rtol=0, atol=1e-15)

    def test_brute_mean(self):
        rng = np.random.default_rng(3)
        g = random_delta(rng)
        ds = [random_delta(rng) for _ in range(3)]
        out = aggregate(g, [LocalUpdate(str(i), d, 0, 0) for i, d in enumerate(ds)])
        brute = [g.flat()[k] + sum(d.flat()[k] for d in ds) / 3 for k in range(len(g.flat()))]
        assert np.allclose(out.flat(), brute, rtol=0, atol=1e-12)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.permutations(range(5)))
    def test_permutation_invariant(self, seed, perm):
        rng = np.random.default_rng(seed)
        g = random_delta(rng)
        ups = [LocalUpdate(f"w{i}", random_delta(rng), 0, 0) for i in range(5)]
        a = aggregate(g, ups)
        b = aggregate(g, [ups[i] for i in perm])
        assert a.flat().tobytes() == b.flat().tobytes()

    def test_empty(self):
        with pytest.raises(EmptyAccepted):
            aggregate(ModelState.zeros(2, 2), [])

    def test_non_finite(self):
        bad = ModelState(np.full((2, 2), np.inf), np.zeros(2))
        with pytest.raises(FloatingPointError):
            aggregate(ModelState.zeros(2, 2), [LocalUpdate("a", bad, 0, 0)])


class TestEvaluate:
    def test_zero_model_tie_break(self):
        ds = gen_synthetic(1000, 10, 10, 3.0, seed=0)
        model = ModelState.zeros(10, 10)
        assert np.all(predict(model, ds.features) == 0)
        assert evaluate(model, ds) == pytest.approx(0.1)

    def test_constant_prediction(self):
        ds = gen_synthetic(1000, 10, 10, 3.0, seed=0)
        bias = np.zeros(10)
        bias[7] = 1.0
        assert evaluate(ModelState(np.zeros((10, 10)), bias), ds) == pytest.approx(0.1)

    def test_trained_model_near_oracle(self):
        full = gen_synthetic(6000, 10, 20, 8.0, seed=1)
        test, train = full.split(1 / 6, seed=1)
        model = init_model(10, 20, seed=0)
        for r in range(30):
            model = model + local_sgd(model, train, 32, 10, 0.3, seed=r).delta
        assert evaluate(model, test) >= 0.95
        assert nearest_mean_accuracy(train, test) >= 0.95

    def test_empty(self):
        ds = gen_synthetic(10, 2, 2, 3.0, seed=0)
        with pytest.raises(ValueError):
            evaluate(ModelState.zeros(2, 2), ds.subset(np.array([], dtype=int)))


class TestModelState:
    def test_flat_roundtrip(self):
        rng = np.random.default_rng(0)
        m = random_delta(rng, 4, 5)
        back = ModelState.from_flat(m.flat(), 4, 5)
        assert np.array_equal(back.weights, m.weights) and np.array_equal(back.bias, m.bias)

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            ModelState(np.zeros((2, 3)), np.zeros(3))
        with pytest.raises(ValueError):
            ModelState.zeros(2, 3) + ModelState.zeros(3, 3)

    def test_label_distribution(self):
        assert label_distribution(np.array([0, 0, 1, 3]), 4).tolist() == [0.5, 0.25, 0.0, 0.25]
