import dataclasses
import hashlib

import numpy as np
import pytest

from missfuse.datagen import (
    MANIFEST,
    TABLE,
    Cohort,
    GenConfig,
    generate,
    largest_remainder,
    read_cohort,
    subset_probs_from,
    write_cohort,
)
from missfuse.encoders import ModalityMask, Sample, all_masks
from missfuse.errors import ConfigError, ParseError


def digest(path):
    return {name: hashlib.sha256((path / name).read_bytes()).hexdigest() for name in (MANIFEST, TABLE)}


@pytest.fixture(scope="module")
def cohort():
    return generate(GenConfig())


class TestGenerate:
    def test_default_split_sizes(self, cohort):
        assert (len(cohort.train), len(cohort.val), len(cohort.test)) == (2000, 300, 500)

    def test_test_split_fully_observed(self, cohort):
        assert all(all(s.mask.bits) for s in cohort.test)

    def test_train_val_never_empty(self, cohort):
        assert not any(s.mask.is_empty() for s in cohort.train + cohort.val)

    def test_feature_shapes_and_dtype(self, cohort):
        s = cohort.test[0]
        assert [x.shape for x in s.features] == [(8,), (32,), (32,), (32,)]
        assert all(x.dtype == np.float32 for x in s.features)

    def test_same_seed_same_cohort(self, cohort):
        assert generate(GenConfig()) == cohort
        assert generate(GenConfig(seed=1)) != cohort

    def test_availability_converges(self, cohort):
        cfg = cohort.config
        samples = cohort.train + cohort.val
        rates = np.mean([s.mask.bits for s in samples], axis=0)
        assert np.all(np.abs(rates - cfg.availability()) <= 3 / np.sqrt(len(samples)))

    def test_tabular_modality_nearly_always_present(self, cohort):
        rates = np.mean([s.mask.bits for s in cohort.train], axis=0)
        assert rates[0] == rates.max() and rates[0] > 0.9

    def test_stratified_within_one_sample(self, cohort):
        everything = cohort.train + cohort.val + cohort.test
        overall = np.bincount([s.label for s in everything], minlength=3) / len(everything)
        for split in (cohort.train, cohort.val, cohort.test):
            counts = np.bincount([s.label for s in split], minlength=3)
            assert np.all(np.abs(counts - overall * len(split)) <= 1)

    def test_imbalanced_class_weights(self):
        c = generate(GenConfig(class_weights=(0.5, 0.3, 0.2), n_samples=1000))
        counts = np.bincount([s.label for s in c.train], minlength=3)
        assert np.all(np.abs(counts - np.array([0.5, 0.3, 0.2]) * len(c.train)) <= 1)

    def test_zero_noise_views_are_linear_in_one_latent(self):
        c = generate(GenConfig(noise=0.0, n_samples=200, split=(1, 0, 1)))
        X = np.stack([s.features[1] for s in c.test])
        # 32-dimensional views of a 16-dimensional latent have rank at most 16
        assert np.linalg.matrix_rank(X.astype(np.float64), tol=1e-3) <= 16

    @pytest.mark.parametrize(
        "override",
        [
            {"subset_probs": (1.0,) + (0.0,) * 14},  # full mask gets no mass
            {"subset_probs": (0.5,) * 15},
            {"subset_probs": (1.0,)},
            {"split": (1.0, -1.0, 1.0)},
            {"split": (0.0, 0.0, 0.0)},
            {"split": (1.0, 1.0)},
            {"noise_scales": (1.0,)},
            {"num_classes": 1},
            {"class_weights": (1.0, 1.0)},
        ],
    )
    def test_invalid_config(self, override):
        with pytest.raises(ConfigError):
            generate(GenConfig(**override))

    def test_subset_table_lookup(self):
        probs = subset_probs_from({"1111": 1.0}, 4)
        assert probs[-1] == 1.0 and sum(probs) == 1.0

    @pytest.mark.parametrize("total,fractions", [(10, [1 / 3] * 3), (7, [0.5, 0.25, 0.25]), (0, [0.2, 0.8])])
    def test_largest_remainder(self, total, fractions):
        counts = largest_remainder(total, np.array(fractions))
        assert counts.sum() == total
        assert np.all(np.abs(counts - total * np.array(fractions)) < 1)


class TestFiles:
    def test_round_trip_default(self, cohort, tmp_path):
        write_cohort(cohort, tmp_path)
        assert read_cohort(tmp_path) == cohort

    def test_byte_identical_for_same_seed(self, tmp_path):
        write_cohort(generate(GenConfig(n_samples=300)), tmp_path / "a")
        write_cohort(generate(GenConfig(n_samples=300)), tmp_path / "b")
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_empty_split_header_only(self, tmp_path):
        c = generate(GenConfig(n_samples=0))
        write_cohort(c, tmp_path)
        assert (tmp_path / TABLE).read_text().count("\n") == 1
        assert read_cohort(tmp_path) == c

    def test_one_sample_per_pattern(self, tmp_path):
        rng = np.random.default_rng(0)
        cfg = GenConfig(n_samples=15)
        dims = cfg.dims
        samples = [
            Sample([rng.standard_normal(d).astype(np.float32) if b else None for d, b in zip(dims, m.bits)], m, i % 3)
            for i, m in enumerate(all_masks(4))
        ]
        c = Cohort(samples, [], [], cfg)
        write_cohort(c, tmp_path)
        assert (tmp_path / TABLE).read_text().count("\n") == 16
        assert read_cohort(tmp_path) == c

    @pytest.mark.parametrize("seed", [3, 4])
    def test_random_cohort_round_trip(self, seed, tmp_path):
        c = generate(GenConfig(n_samples=500, seed=seed, noise=7.5, separation=0.3))
        write_cohort(c, tmp_path)
        back = read_cohort(tmp_path)
        assert back == c
        assert all(np.array_equal(a.features[1], b.features[1]) for a, b in zip(c.test, back.test))

    def test_extreme_values_round_trip(self, tmp_path):
        cfg = GenConfig(n_samples=1)
        vals = np.array([np.finfo(np.float32).max, np.finfo(np.float32).tiny, -0.0, 1e-45, 3.1415927, -2.5e-38, 7, 1 / 3], np.float32)
        s = Sample([vals] + [None] * 3, ModalityMask.parse("1000"), 2)
        c = Cohort([s], [], [], cfg)
        write_cohort(c, tmp_path)
        assert read_cohort(tmp_path) == c


def _corrupt(tmp_path, line_no, transform):
    c = generate(GenConfig(n_samples=20))
    write_cohort(c, tmp_path)
    lines = (tmp_path / TABLE).read_text().splitlines()
    lines[line_no - 1] = transform(lines[line_no - 1])
    (tmp_path / TABLE).write_text("\n".join(lines) + "\n")


class TestParseErrors:
    @pytest.mark.parametrize(
        "transform,field",
        [
            (lambda l: l.replace(",train,", ",bogus,", 1), "split"),
            (lambda l: ",".join(l.split(",")[:2] + ["9"] + l.split(",")[3:]), "label"),
            (lambda l: ",".join(l.split(",")[:2] + ["x"] + l.split(",")[3:]), "label"),
            (lambda l: ",".join(l.split(",")[:3] + ["2"] + l.split(",")[4:]), "mask0"),
        ],
    )
    def test_field_errors_carry_location(self, tmp_path, transform, field):
        _corrupt(tmp_path, 3, transform)
        with pytest.raises(ParseError) as err:
            read_cohort(tmp_path)
        assert err.value.line == 3 and err.value.field == field
        assert "line 3" in str(err.value)

    def test_wrong_field_count(self, tmp_path):
        _corrupt(tmp_path, 2, lambda l: l + ",extra")
        with pytest.raises(ParseError, match="line 2"):
            read_cohort(tmp_path)

    def test_bad_header(self, tmp_path):
        _corrupt(tmp_path, 1, lambda l: l.replace("label", "y"))
        with pytest.raises(ParseError, match="line 1"):
            read_cohort(tmp_path)

    def test_non_numeric_feature(self, tmp_path):
        _corrupt(tmp_path, 2, lambda l: l.replace(" ", " nan? ", 1))
        with pytest.raises(ParseError) as err:
            read_cohort(tmp_path)
        assert err.value.field.startswith("x")

    def test_manifest_mismatch(self, tmp_path):
        write_cohort(generate(GenConfig(n_samples=5)), tmp_path)
        text = (tmp_path / MANIFEST).read_text().replace("C=3", "C=4")
        (tmp_path / MANIFEST).write_text(text)
        with pytest.raises(ParseError, match="field 'C'"):
            read_cohort(tmp_path)

    def test_missing_files(self, tmp_path):
        with pytest.raises(ParseError):
            read_cohort(tmp_path / "nowhere")
