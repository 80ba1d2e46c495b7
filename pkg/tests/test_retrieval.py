import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multigrain.augment import AugmentConfig
from multigrain.retrieval import (
    N_COPIES,
    EvalReport,
    InAugTask,
    MetricError,
    RetrievalIndex,
    average_precision,
    copydetect_eval,
    inaug_build,
    inaug_score,
    knn,
    mean_average_precision,
    ukb_score,
)


# ---------------------------------------------------------------- reference implementations
# Written with plain Python sorting so they share no code with the library.


def ref_rank(db, ids, q, exclude=None):
    qn = math.sqrt(sum(v * v for v in q))
    items = []
    for row, i in zip(db, ids):
        if exclude is not None and i == exclude:
            continue
        rn = math.sqrt(sum(v * v for v in row))
        cos = sum(a * b for a, b in zip(row, q)) / (rn * qn)
        items.append((-round(cos, 12), int(i)))
    items.sort()
    return [i for _, i in items]


def ref_ap(ranked, relevant):
    hits, total = 0, 0.0
    for r, i in enumerate(ranked, start=1):
        if i in relevant:
            hits += 1
            total += hits / r
    return total / len(relevant)


def ref_ukb(db, groups):
    ids = list(range(len(db)))
    score = 0
    for i in ids:
        top = ref_rank(db, ids, db[i])[:4]
        score += sum(groups[j] == groups[i] for j in top)
    return score / len(db)


def ref_inaug(db, owner, is_query):
    ids = list(range(len(db)))
    total, nq = 0, 0
    for i in ids:
        if not is_query[i]:
            continue
        nq += 1
        top = ref_rank(db, ids, db[i], exclude=i)[:5]
        total += sum(owner[j] == owner[i] and not is_query[j] for j in top)
    return total / nq


def _random_instance(rng):
    n = int(rng.integers(5, 51))
    d = int(rng.integers(1, 9))
    # coarse values make exact similarity ties common
    db = rng.integers(-2, 3, size=(n, d)).astype(float)
    db[np.all(db == 0, axis=1), 0] = 1.0
    return db, rng.permutation(1000)[:n]


class TestKnn:
    def test_self_excluded(self):
        e = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        ids, sims = knn(RetrievalIndex(e), e[0], 1, query_id=0)
        assert ids.tolist() == [1]
        assert sims[0] < 1

    def test_axis_query(self):
        index = RetrievalIndex(np.eye(3))
        ids, sims = knn(index, np.array([0.0, 2.0, 0.0]), 3)
        assert ids.tolist() == [1, 0, 2]
        np.testing.assert_allclose(sims, [1.0, 0.0, 0.0])

    def test_ties_by_ascending_id(self):
        index = RetrievalIndex(np.ones((4, 2)), image_ids=[9, 3, 7, 1])
        assert knn(index, np.ones(2), 4)[0].tolist() == [1, 3, 7, 9]

    def test_k_too_large(self):
        with pytest.raises(MetricError):
            knn(RetrievalIndex(np.eye(3)), np.ones(3), 4)

    def test_empty_index(self):
        with pytest.raises(MetricError):
            RetrievalIndex(np.zeros((0, 3)))

    def test_rows_unit_norm(self):
        index = RetrievalIndex(np.random.default_rng(0).normal(size=(20, 4)) * 7)
        np.testing.assert_allclose(np.linalg.norm(index.matrix, axis=1), 1.0, atol=1e-12)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            db, ids = _random_instance(rng)
            q = db[int(rng.integers(len(db)))] * 3
            k = int(rng.integers(1, len(db)))
            got = knn(RetrievalIndex(db, ids), q, k)[0].tolist()
            assert got == ref_rank(db.tolist(), ids.tolist(), q.tolist())[:k]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_rescaling_invariance(self, seed):
        rng = np.random.default_rng(seed)
        db = rng.normal(size=(15, 4))
        scale = rng.uniform(0.1, 10, size=(15, 1))
        q = rng.normal(size=4)
        a = knn(RetrievalIndex(db), q, 15)[0]
        b = knn(RetrievalIndex(db * scale), q, 15)[0]
        np.testing.assert_array_equal(a, b)


class TestAveragePrecision:
    def test_hand_computed(self):
        np.testing.assert_allclose(average_precision([1, 0, 1]), (1 + 2 / 3) / 2, rtol=1e-15)
        np.testing.assert_allclose(average_precision([1, 0, 1]), 0.8333333333333334, rtol=1e-12)

    def test_relevant_first(self):
        assert average_precision([1, 1, 0, 0]) == 1.0

    def test_no_relevant(self):
        with pytest.raises(MetricError):
            average_precision([0, 0])

    def test_map_perfect(self):
        e = np.array([[1.0, 0.0], [1.0, 0.01], [0.0, 1.0], [0.01, 1.0]])
        index = RetrievalIndex(e)
        assert mean_average_precision(index, e, [[1], [0], [3], [2]], query_ids=[0, 1, 2, 3]) == 1.0

    def test_map_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            db, ids = _random_instance(rng)
            nq = int(rng.integers(1, 5))
            queries = rng.normal(size=(nq, db.shape[1]))
            relevant = [set(rng.choice(ids, size=int(rng.integers(1, len(ids))), replace=False).tolist())
                        for _ in range(nq)]
            expected = np.mean([ref_ap(ref_rank(db.tolist(), ids.tolist(), q.tolist()), r)
                                for q, r in zip(queries, relevant)])
            got = mean_average_precision(RetrievalIndex(db, ids), queries, relevant)
            assert abs(got - expected) <= 1e-12

    def test_id_relabeling_invariance(self):
        rng = np.random.default_rng(3)
        db = rng.normal(size=(20, 5))
        q = rng.normal(size=(3, 5))
        rel = [[0, 4], [7], [1, 2, 3]]
        base = mean_average_precision(RetrievalIndex(db), q, rel)
        new = rng.permutation(np.arange(100, 120))
        moved = [[new[i] for i in r] for r in rel]
        assert mean_average_precision(RetrievalIndex(db, new), q, moved) == base


class TestUkb:
    def test_perfect_groups(self):
        e = np.repeat(np.eye(5), 4, axis=0)
        assert ukb_score(RetrievalIndex(e, instance_ids=np.repeat(np.arange(5), 4))) == 4.0

    def test_displaced_member(self):
        # group 0: three identical views and one view pointing along group 2's direction
        e = np.array([[1.0, 0, 0]] * 3 + [[0, 0, 1.0]] + [[0, 1.0, 0]] * 4 + [[0, 0, 1.0]] * 4)
        groups = np.repeat(np.arange(3), 4)
        ids = np.concatenate([[0, 1, 2, 99], np.arange(4, 12)])
        index = RetrievalIndex(e, image_ids=ids, instance_ids=groups)
        per_image = []
        for row in range(len(e)):
            order, _ = index.ranking(e[row])
            per_image.append(int(np.sum(groups[order[:4]] == groups[row])))
        # group 0 queries find their three identical views; the displaced view ties with
        # group 2 and loses every tie on id, so it misses even itself
        assert per_image == [3, 3, 3, 0] + [4] * 8
        assert ukb_score(index) == 41 / 12

    def test_chance_level(self):
        rng = np.random.default_rng(4)
        n = 400
        scores = []
        for _ in range(20):
            e = rng.normal(size=(n, 16))
            scores.append(ukb_score(RetrievalIndex(e, instance_ids=np.repeat(np.arange(n // 4), 4))))
        # the query always finds itself; each of the 3 other slots holds a mate with prob 3/(n-1)
        p = 3 / (n - 1)
        expected = 1 + 3 * p
        # mutual neighbours correlate the counts of two mates; allow twice the independent variance
        sigma = math.sqrt(2 * 3 * p * (1 - p) / (n * len(scores)))
        assert abs(np.mean(scores) - expected) < 3 * sigma

    def test_malformed_groups(self):
        with pytest.raises(MetricError):
            ukb_score(RetrievalIndex(np.eye(5), instance_ids=[0, 0, 0, 0, 0]))

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            g = int(rng.integers(2, 12))
            d = int(rng.integers(1, 9))
            e = rng.integers(-2, 3, size=(4 * g, d)).astype(float)
            e[np.all(e == 0, axis=1), 0] = 1.0
            groups = rng.permutation(np.repeat(np.arange(g), 4))
            got = ukb_score(RetrievalIndex(e, instance_ids=groups))
            assert abs(got - ref_ukb(e.tolist(), groups.tolist())) <= 1e-12


def _task(nq, rng):
    n = nq * (N_COPIES + 1)
    return InAugTask(
        images=np.zeros((n, 8, 8, 3)),
        image_ids=np.arange(n),
        instance_ids=np.concatenate([np.arange(nq), np.repeat(np.arange(nq), N_COPIES)]),
        is_query=np.concatenate([np.ones(nq, bool), np.zeros(nq * N_COPIES, bool)]),
        source_ids=np.arange(nq),
        seed=0,
    )


class TestInAug:
    def _data(self, per_class=2, n_classes=3):
        rng = np.random.default_rng(6)
        imgs = rng.uniform(size=(n_classes * 4, 12, 12, 3))
        return imgs, np.repeat(np.arange(n_classes), 4), np.arange(100, 100 + n_classes * 4)

    def test_construction_arithmetic(self):
        imgs, labels, ids = self._data()
        task = inaug_build(imgs, labels, ids, 1, AugmentConfig(8), seed=0)
        assert task.n_queries == 3
        assert len(task.images) == 3 + 15
        assert task.images.shape[1:] == (8, 8, 3)

    def test_zero_strength_gives_five(self):
        imgs, labels, ids = self._data()
        task = inaug_build(imgs, labels, ids, 2, AugmentConfig.identity(8), seed=0)
        emb = task.images.reshape(len(task.images), -1)
        assert inaug_score(task, emb) == 5.0

    def test_same_seed_same_fingerprint(self):
        imgs, labels, ids = self._data()
        a = inaug_build(imgs, labels, ids, 2, AugmentConfig(8), seed=4)
        b = inaug_build(imgs, labels, ids, 2, AugmentConfig(8), seed=4)
        c = inaug_build(imgs, labels, ids, 2, AugmentConfig(8), seed=5)
        assert a.fingerprint() == b.fingerprint() != c.fingerprint()

    def test_insufficient_images(self):
        imgs, labels, ids = self._data()
        with pytest.raises(MetricError):
            inaug_build(imgs, labels, ids, 5, AugmentConfig(8), seed=0)

    def test_three_copies_in_top_five(self):
        nq = 4
        task = _task(nq, None)
        dim = 2 * nq + 2
        emb = np.zeros((len(task.images), dim))
        for q in range(nq):
            emb[q, q] = 1.0
            copies = nq + q * N_COPIES + np.arange(N_COPIES)
            emb[copies[:3], q] = 1.0
            emb[copies[3:], nq + q] = 1.0  # two copies orthogonal to their query
        emb[:nq, -1] = 0.1
        assert inaug_score(task, emb) == 3.0

    def test_random_embeddings_near_zero(self):
        rng = np.random.default_rng(7)
        task = _task(60, rng)
        assert inaug_score(task, rng.normal(size=(len(task.images), 32))) < 0.2

    def test_missing_embeddings(self):
        task = _task(2, None)
        with pytest.raises(MetricError):
            inaug_score(task, np.ones((3, 2)))

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            nq = int(rng.integers(1, 8))
            task = _task(nq, rng)
            d = int(rng.integers(1, 9))
            e = rng.integers(-2, 3, size=(len(task.images), d)).astype(float)
            e[np.all(e == 0, axis=1), 0] = 1.0
            expected = ref_inaug(e.tolist(), task.instance_ids.tolist(), task.is_query.tolist())
            assert abs(inaug_score(task, e) - expected) <= 1e-12


class TestCopyDetect:
    def test_identity_distortion(self):
        rng = np.random.default_rng(9)
        e = rng.normal(size=(6, 4))
        assert copydetect_eval(RetrievalIndex(e), e, np.arange(6)) == 1.0

    def test_original_second(self):
        e = np.array([[1.0, 0.0], [0.8, 0.6]])
        index = RetrievalIndex(e, image_ids=[0, 1], distractor=[True, False])
        assert copydetect_eval(index, np.array([[1.0, 0.1]]), [1]) == 0.5

    def test_distractors_never_help(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            n, k, d = int(rng.integers(2, 10)), int(rng.integers(1, 10)), int(rng.integers(1, 6))
            originals, extra = rng.normal(size=(n, d)), rng.normal(size=(k, d))
            queries = originals + rng.normal(scale=0.7, size=(n, d))
            base = copydetect_eval(RetrievalIndex(originals), queries, np.arange(n))
            mixed = RetrievalIndex(np.vstack([originals, extra]), distractor=np.r_[np.zeros(n), np.ones(k)])
            assert copydetect_eval(mixed, queries, np.arange(n)) <= base + 1e-15

    def test_missing_original(self):
        with pytest.raises(MetricError):
            copydetect_eval(RetrievalIndex(np.eye(2), distractor=[True, False]), np.eye(2), [0, 1])


class TestEvalReport:
    def test_range_check(self):
        with pytest.raises(MetricError):
            EvalReport("ukb", 4.5)
        EvalReport("inaug", 5.0)

    def test_json_sorted(self):
        text = EvalReport("map", 0.5, "abc", {"b": 1, "a": 2}).to_json()
        assert text.index('"config"') < text.index('"metric"') < text.index('"value"')
