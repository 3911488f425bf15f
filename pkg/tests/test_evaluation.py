import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsbench.errors import (
    DimensionMismatch,
    EmptyMatrix,
    LengthMismatch,
    NoPositives,
    ShapeMismatch,
    TaskMismatch,
)
from rsbench.evaluation import (
    KnnModel,
    MetricReport,
    apply_scaler,
    evaluate,
    fit_scaler,
    knn_predict_multiclass,
    knn_scores_multilabel,
    macro_f1,
    mean_average_precision,
    micro_f1,
    multilabel_predictions,
    overall_accuracy,
)
from rsbench.extractors import FeatureMatrix
from rsbench.raster import Label


def matrix(values, labels, task="multiclass"):
    values = np.asarray(values, dtype=np.float32)
    if task == "multiclass":
        labs = [Label.multiclass(int(l)) for l in labels]
    else:
        labs = [Label.multilabel(b) for b in labels]
    return FeatureMatrix(values=values, ids=[f"s{i}" for i in range(len(labs))],
                         labels=labs)


def knn_oracle(train_x, train_y, query, k):
    """Exhaustive reference: sort by (squared distance, train index), majority
    vote with ties to the lowest class index."""
    scored = []
    for idx, row in enumerate(train_x):
        d = 0.0
        for a, b in zip(row, query):
            d += (float(a) - float(b)) ** 2
        scored.append((d, idx))
    scored.sort()
    votes = {}
    for _, idx in scored[:k]:
        cls = int(train_y[idx])
        votes[cls] = votes.get(cls, 0) + 1
    return max(votes.items(), key=lambda kv: (kv[1], -kv[0]))[0]


def ap_oracle(scores, truth):
    """Hand enumeration of the ranked list, ties by lower sample index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    total = 0.0
    for rank, i in enumerate(order, start=1):
        if truth[i]:
            hits += 1
            total += hits / rank
    return total / sum(truth)


class TestScaler:
    def test_single_row(self):
        m = matrix([[3.0, -1.0]], [0])
        scaler = fit_scaler(m)
        np.testing.assert_array_equal(scaler.means, [3.0, -1.0])
        np.testing.assert_array_equal(scaler.stds, [1.0, 1.0])

    def test_derived_two_rows(self):
        m = matrix([[0.0, 0.0], [2.0, 2.0]], [0, 1])
        scaler = fit_scaler(m)
        np.testing.assert_array_equal(scaler.means, [1.0, 1.0])
        np.testing.assert_array_equal(scaler.stds, [1.0, 1.0])

    def test_self_transform_centers(self, rng):
        m = matrix(rng.normal(3, 5, size=(40, 6)), rng.integers(0, 2, 40))
        scaled = apply_scaler(fit_scaler(m), m)
        np.testing.assert_allclose(scaled.values.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(scaled.values.std(axis=0), 1.0, atol=1e-6)

    def test_identity_scaler(self, rng):
        m = matrix(rng.normal(size=(5, 3)), rng.integers(0, 2, 5))
        from rsbench.evaluation import FeatureScaler

        ident = FeatureScaler(means=np.zeros(3), stds=np.ones(3))
        out = apply_scaler(ident, m)
        np.testing.assert_allclose(out.values, m.values, atol=1e-6)

    def test_dimension_mismatch(self, rng):
        m = matrix(rng.normal(size=(5, 3)), rng.integers(0, 2, 5))
        scaler = fit_scaler(m)
        other = matrix(rng.normal(size=(2, 4)), [0, 1])
        with pytest.raises(DimensionMismatch):
            apply_scaler(scaler, other)

    def test_empty_matrix(self):
        m = FeatureMatrix(values=np.zeros((0, 3), dtype=np.float32), ids=[],
                          labels=[])
        with pytest.raises(EmptyMatrix):
            fit_scaler(m)


class TestKnnMulticlass:
    def test_self_neighbor(self, rng):
        m = matrix(rng.normal(size=(10, 4)), rng.integers(0, 3, 10))
        model = KnnModel(k=1, train=m)
        preds = knn_predict_multiclass(model, m)
        np.testing.assert_array_equal(preds, m.label_indices())

    def test_spec_majority_example(self):
        train = matrix([[0, 0], [1, 0], [0, 1], [5, 5], [6, 5]],
                       [0, 0, 0, 1, 1])
        query = matrix([[0.1, 0.1]], [0])
        model = KnnModel(k=5, train=train)
        assert knn_predict_multiclass(model, query)[0] == 0  # 3 votes to 2

    def test_vote_tie_takes_lower_class(self):
        # query equidistant from one class-2 point and one class-1 point
        train = matrix([[1, 0], [-1, 0]], [2, 1])
        query = matrix([[0, 0]], [0])
        model = KnnModel(k=2, train=train)
        assert knn_predict_multiclass(model, query)[0] == 1

    def test_distance_tie_takes_lower_train_index(self):
        # two equidistant points with different labels, k=1
        train = matrix([[1, 0], [-1, 0]], [3, 0])
        query = matrix([[0, 0]], [0])
        model = KnnModel(k=1, train=train)
        assert knn_predict_multiclass(model, query)[0] == 3

    @pytest.mark.parametrize("k", [1, 3, 5, 10])
    def test_matches_oracle_random(self, rng, k):
        n_train = int(rng.integers(k, 60))
        train_x = rng.normal(size=(n_train, 5))
        train_y = rng.integers(0, 4, n_train)
        query_x = rng.normal(size=(20, 5))
        train = matrix(train_x, train_y)
        queries = matrix(query_x, np.zeros(20, dtype=int))
        model = KnnModel(k=k, train=train)
        preds = knn_predict_multiclass(model, queries)
        for i in range(20):
            assert preds[i] == knn_oracle(train_x, train_y, query_x[i], k)

    def test_matches_oracle_with_engineered_ties(self, rng):
        # integer grid points: duplicated distances are exact in float
        train_x = rng.integers(-3, 4, size=(40, 3)).astype(np.float64)
        train_y = rng.integers(0, 3, 40)
        query_x = rng.integers(-3, 4, size=(15, 3)).astype(np.float64)
        train = matrix(train_x, train_y)
        queries = matrix(query_x, np.zeros(15, dtype=int))
        for k in (1, 3, 5):
            model = KnnModel(k=k, train=train)
            preds = knn_predict_multiclass(model, queries)
            for i in range(15):
                assert preds[i] == knn_oracle(train_x, train_y, query_x[i], k)

    def test_k_bounds(self, rng):
        m = matrix(rng.normal(size=(4, 2)), [0, 1, 0, 1])
        with pytest.raises(ValueError):
            KnnModel(k=5, train=m)
        with pytest.raises(ValueError):
            KnnModel(k=0, train=m)

    def test_task_mismatch(self, rng):
        m = matrix([[0, 1], [1, 0]], [[True], [False]], task="multilabel")
        model = KnnModel(k=1, train=m)
        with pytest.raises(TaskMismatch):
            knn_predict_multiclass(model, m)


class TestKnnMultilabel:
    def test_unanimous_neighbors(self):
        bits = [[True, False], [True, False], [True, False]]
        train = matrix([[0, 0], [0.1, 0], [0, 0.1]], bits, task="multilabel")
        query = matrix([[0, 0]], [[False, False]], task="multilabel")
        model = KnnModel(k=3, train=train)
        scores = knn_scores_multilabel(model, query)
        np.testing.assert_array_equal(scores, [[1.0, 0.0]])

    def test_fraction_scores(self):
        bits = [[True], [True], [True], [False], [False]]
        train = matrix(np.arange(5)[:, None] * 0.01, bits, task="multilabel")
        query = matrix([[0.0]], [[False]], task="multilabel")
        model = KnnModel(k=5, train=train)
        scores = knn_scores_multilabel(model, query)
        assert scores[0, 0] == pytest.approx(0.6)
        assert multilabel_predictions(scores)[0, 0]

    def test_exact_half_predicts_positive(self):
        assert multilabel_predictions(np.array([[0.5]]))[0, 0]
        assert not multilabel_predictions(np.array([[0.49]]))[0, 0]


class TestMetrics:
    def test_oa_perfect(self):
        assert overall_accuracy([1, 2, 3], [1, 2, 3]) == 100.0

    def test_oa_derived(self):
        assert overall_accuracy([1, 1, 1, 1], [1, 1, 1, 0]) == 75.0

    def test_oa_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            overall_accuracy([1], [1, 2])

    def test_micro_f1_perfect(self):
        truth = np.array([[True, False], [False, True]])
        assert micro_f1(truth, truth) == 100.0

    def test_micro_f1_derived(self):
        # TP=1, FP=1, FN=1 -> 2/(2+1+1) = 50%
        pred = np.array([[True, True, False]])
        truth = np.array([[True, False, True]])
        assert micro_f1(pred, truth) == 50.0

    def test_micro_f1_degenerate_zero(self):
        z = np.zeros((3, 2), dtype=bool)
        assert micro_f1(z, z) == 0.0

    def test_micro_f1_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            micro_f1(np.zeros((2, 2), bool), np.zeros((2, 3), bool))

    def test_macro_f1_known(self):
        pred = np.array([[True, False], [True, False]])
        truth = np.array([[True, False], [False, False]])
        # class 0: tp=1 fp=1 fn=0 -> f1 = 2/3; class 1: all zero -> 0
        assert macro_f1(pred, truth) == pytest.approx(100 * (2 / 3) / 2)

    def test_map_spec_example(self):
        scores = np.array([[0.9], [0.8], [0.3]])
        truth = np.array([[True], [False], [True]])
        got = mean_average_precision(scores, truth)
        assert got == pytest.approx(100 * (1.0 * 0.5 + (2 / 3) * 0.5), abs=1e-9)

    def test_map_perfect_ranking(self, rng):
        truth = np.array([[True], [True], [False], [False]])
        scores = np.array([[0.9], [0.8], [0.2], [0.1]])
        assert mean_average_precision(scores, truth) == 100.0

    def test_map_constant_scores_use_index_order(self):
        truth = np.array([[True], [False], [True]])
        const = np.full((3, 1), 0.5)
        want = 100 * ap_oracle([0.5, 0.5, 0.5], [1, 0, 1])
        assert mean_average_precision(const, truth) == pytest.approx(want, abs=1e-9)

    def test_map_skips_empty_classes(self):
        scores = np.array([[0.9, 0.1], [0.1, 0.2]])
        truth = np.array([[True, False], [False, False]])
        assert mean_average_precision(scores, truth) == 100.0

    def test_map_no_positives(self):
        with pytest.raises(NoPositives):
            mean_average_precision(np.zeros((2, 2)), np.zeros((2, 2), bool))

    def test_map_matches_oracle_random(self, rng):
        for _ in range(25):
            n = int(rng.integers(1, 20))
            k = int(rng.integers(1, 5))
            scores = rng.random(size=(n, k))
            truth = rng.random(size=(n, k)) < 0.4
            if not truth.any():
                truth[0, 0] = True
            aps = [ap_oracle(scores[:, j].tolist(), truth[:, j].tolist())
                   for j in range(k) if truth[:, j].any()]
            want = 100 * float(np.mean(aps))
            got = mean_average_precision(scores, truth)
            assert got == pytest.approx(want, abs=1e-9)

    def test_monotone_transform_invariance(self, rng):
        scores = rng.random(size=(12, 3))
        truth = rng.random(size=(12, 3)) < 0.5
        truth[0] = True
        a = mean_average_precision(scores, truth)
        b = mean_average_precision(np.exp(3 * scores) + 7, truth)
        assert a == pytest.approx(b, abs=1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        n = 10
        pred = rng.integers(0, 3, n)
        truth = rng.integers(0, 3, n)
        perm = rng.permutation(n)
        assert overall_accuracy(pred, truth) == \
            overall_accuracy(pred[perm], truth[perm])


class TestEvaluate:
    def test_train_as_test_k1_is_perfect(self, rng):
        # distinct points classify themselves perfectly at k=1
        values = rng.normal(size=(30, 4))
        m = matrix(values, rng.integers(0, 3, 30))
        report = evaluate(m, m, k=1)
        assert report.oa == 100.0
        assert report.task == "multiclass"

    def test_multilabel_report_fields(self, rng):
        bits = rng.random(size=(30, 4)) < 0.5
        bits[:, 0] |= ~bits.any(axis=1)  # every sample has a label
        m = matrix(rng.normal(size=(30, 6)), list(bits), task="multilabel")
        report = evaluate(m, m, k=1)
        assert report.oa is None
        assert report.f1_micro == 100.0
        assert report.map == 100.0
        payload = report.to_json_dict()
        assert payload["tie_policy_version"] == 1
        assert set(payload) == {"task", "k", "oa", "f1_micro", "f1_macro", "map",
                                "n_train", "n_test", "d", "tie_policy_version"}

    def test_k_configurable(self, rng):
        values = rng.normal(size=(25, 3))
        m = matrix(values, rng.integers(0, 2, 25))
        for k in (3, 10):
            report = evaluate(m, m, k=k)
            assert report.k == k

    def test_task_mismatch(self, rng):
        a = matrix(rng.normal(size=(4, 2)), [0, 1, 0, 1])
        b = matrix(rng.normal(size=(4, 2)),
                   [[True], [False], [True], [False]], task="multilabel")
        with pytest.raises(TaskMismatch):
            evaluate(a, b, k=1)

    def test_standardization_is_applied(self):
        # unscaled, the query's nearest neighbor is b (label 1); after
        # train-split standardization it is a (label 0)
        train = matrix([[0.0, 0.0], [10000.0, 1.0]], [0, 1])
        test = matrix([[9000.0, 0.0]], [0])
        report = evaluate(train, test, k=1)
        assert report.oa == 100.0
