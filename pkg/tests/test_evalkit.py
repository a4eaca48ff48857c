import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from missfuse.encoders import ModalityMask, Sample, collate
from missfuse.errors import ConfigError, ProtocolError
from missfuse.evalkit import (
    EvalConfig,
    accuracy,
    argmax_predictions,
    auc,
    binary_auc,
    evaluate_all,
    evaluate_subset,
    macro_f1,
    per_class_f1,
    report_csv,
    report_table,
)
from missfuse.model import ModelConfig, ModelParams
from missfuse.verify import f1_from_counts, pairwise_auc

from conftest import random_batch, small_config


class TestMetrics:
    def test_constant_predictor_on_balanced_set(self):
        labels = np.repeat([0, 1, 2], 10)
        preds = np.zeros(30, int)
        assert accuracy(labels, preds) == pytest.approx(1 / 3)
        # class 0: precision 1/3, recall 1 -> F1 = 1/2; others 0
        assert macro_f1(labels, preds, 3) == pytest.approx(1 / 6)

    def test_perfect(self):
        labels = np.array([0, 1, 2, 1, 0])
        scores = np.eye(3)[labels]
        preds = argmax_predictions(scores)
        assert accuracy(labels, preds) == 1.0
        assert macro_f1(labels, preds, 3) == 1.0
        assert auc(scores, labels) == 1.0

    def test_reversed_ordering(self):
        assert binary_auc(np.array([0.9, 0.8, 0.1]), np.array([False, False, True])) == 0.0

    def test_ties_get_midrank(self):
        assert binary_auc(np.array([0.5, 0.5]), np.array([True, False])) == 0.5

    def test_argmax_ties_go_low(self):
        assert argmax_predictions(np.array([[0.4, 0.4, 0.2]])).tolist() == [0]

    def test_absent_class_f1_is_zero(self):
        assert per_class_f1(np.array([0, 0]), np.array([0, 0]), 3).tolist() == [1.0, 0.0, 0.0]

    def test_single_class_auc_is_absent(self):
        assert auc(np.full((4, 3), 1 / 3), np.zeros(4, int)) is None

    def test_classes_without_positives_are_skipped(self):
        labels = np.array([0, 0, 1, 1])
        scores = np.array([[0.9, 0.1, 0.0], [0.8, 0.2, 0.0], [0.3, 0.7, 0.0], [0.1, 0.9, 0.0]])
        assert auc(scores, labels) == 1.0

    @given(st.integers(0, 2**20))
    @settings(max_examples=100, deadline=None)
    def test_auc_matches_pairwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, C = int(rng.integers(2, 201)), int(rng.integers(2, 5))
        labels = rng.integers(0, C, n)
        scores = rng.integers(0, 8, (n, C)) / 8.0
        assert auc(scores, labels) == pairwise_auc(scores, labels)

    @given(st.integers(0, 2**20))
    @settings(max_examples=100, deadline=None)
    def test_macro_f1_matches_counts(self, seed):
        rng = np.random.default_rng(seed)
        n, C = int(rng.integers(1, 200)), int(rng.integers(2, 5))
        labels, preds = rng.integers(0, C, n), rng.integers(0, C, n)
        f1 = per_class_f1(labels, preds, C)
        assert abs(macro_f1(labels, preds, C) - f1_from_counts(labels, preds, C)) <= 1e-12
        assert abs(macro_f1(labels, preds, C) - f1.mean()) <= 1e-12
        assert np.all((f1 >= 0) & (f1 <= 1))

    def test_shuffled_labels_give_chance_auc(self):
        rng = np.random.default_rng(0)
        n = 4000
        scores = rng.dirichlet(np.ones(3), n)
        labels = rng.integers(0, 3, n)
        assert abs(auc(scores, labels) - 0.5) <= 3 / np.sqrt(n)


class ConstantModel:
    """Stand-in exposing the interface the protocol needs."""

    def __init__(self, config, probs):
        self.config = config
        self.probs = np.asarray(probs, float)

    def predict_proba(self, batch, **_):
        return np.tile(self.probs, (len(batch), 1))


@pytest.fixture
def test_set(rng):
    cfg = small_config()
    b = random_batch(cfg, 30, rng, np.ones(3, bool))
    b.labels[:] = np.repeat([0, 1, 2], 10)
    return cfg, b


class TestProtocol:
    def test_empty_mask_rejected(self, test_set):
        cfg, b = test_set
        with pytest.raises(ProtocolError):
            evaluate_subset(ConstantModel(cfg, [1, 0, 0]), b, ModalityMask.parse("000"))

    def test_incomplete_test_set_rejected(self, test_set, rng):
        cfg, _ = test_set
        partial = random_batch(cfg, 4, rng, np.array([True, False, True]))
        with pytest.raises(ProtocolError):
            evaluate_subset(ConstantModel(cfg, [1, 0, 0]), partial, ModalityMask.parse("100"))

    def test_constant_model_report(self, test_set):
        cfg, b = test_set
        r = evaluate_subset(ConstantModel(cfg, [0.2, 0.5, 0.3]), b, ModalityMask.parse("110"))
        assert r.acc == pytest.approx(1 / 3)
        assert r.macro_f1 == pytest.approx(1 / 6)
        assert r.auc == 0.5
        assert r.n == 30

    @pytest.mark.parametrize("M", [2, 3, 4])
    def test_report_count_and_average(self, M, rng):
        cfg = ModelConfig(dims=(2,) * M, d_model=4, heads=2, precision="float64")
        model = ModelParams.init(cfg, 0)
        b = random_batch(cfg, 40, rng, np.ones(M, bool))
        s = evaluate_all(model, b, EvalConfig(samples=3, seeds=(0, 1)))
        for seed in (0, 1):
            rows = s.reports[seed]
            assert len(rows) == 2**M - 1
            assert [r.mask.to_int() for r in rows] == list(range(1, 2**M))
            for m in ("acc", "macro_f1"):
                assert abs(s.averages[seed][m] - np.mean([getattr(r, m) for r in rows])) <= 1e-12
        assert s.mean["acc"] == pytest.approx(np.mean([s.averages[k]["acc"] for k in (0, 1)]), abs=1e-12)

    def test_reproducible(self, rng):
        cfg = small_config()
        model = ModelParams.init(cfg, 2)
        b = random_batch(cfg, 20, rng, np.ones(3, bool))
        a = report_csv(evaluate_all(model, b, EvalConfig(samples=4)), 3)
        c = report_csv(evaluate_all(model, b, EvalConfig(samples=4)), 3)
        assert a == c

    def test_cap_on_modalities(self, rng):
        cfg = ModelConfig(dims=(1,) * 9, d_model=4, heads=2)
        with pytest.raises(ConfigError):
            evaluate_all(ModelParams.init(cfg, 0), random_batch(cfg, 2, rng, np.ones(9, bool)))

    def test_accepts_sample_lists(self, rng):
        cfg = small_config()
        model = ModelParams.init(cfg, 0)
        samples = [
            Sample([rng.standard_normal(d) for d in cfg.dims], ModalityMask.full(3), int(rng.integers(0, 3)))
            for _ in range(6)
        ]
        s1 = evaluate_all(model, samples)
        s2 = evaluate_all(model, collate(samples, cfg.dims, cfg.dtype))
        assert s1.mean == s2.mean


class TestReports:
    def test_csv_layout(self, test_set):
        cfg, b = test_set
        s = evaluate_all(ConstantModel(cfg, [0.2, 0.5, 0.3]), b, EvalConfig(seeds=(0, 5)))
        text = report_csv(s, 3)
        lines = text.splitlines()
        assert lines[0] == "seed,mask,n,acc,macro_f1,auc,f1_0,f1_1,f1_2"
        assert len(lines) == 1 + 2 * 7 + 2 + 3
        assert lines[1].startswith("0,100,30,")
        assert "[summary]" in lines
        assert lines[-3].startswith("acc,") and lines[-3].endswith("33.3 (0.0)")

    def test_table_has_row_per_subset_and_average(self, test_set):
        cfg, b = test_set
        text = report_table(evaluate_all(ConstantModel(cfg, [0.2, 0.5, 0.3]), b))
        lines = text.splitlines()
        assert len(lines) == 1 + 7 + 1
        assert lines[-1].startswith("average")
