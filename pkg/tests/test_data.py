import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_bottleneck.data import (
    PairedDataset,
    SynthGroundTruth,
    load_paired_csv,
    log_transform,
    normalize_depth,
    preprocess,
    read_gene_subset,
    save_paired_csv,
    select_hvg,
    standardize,
    synth_generate,
    zscore_apply,
    zscore_fit_apply,
)
from sparse_bottleneck.errors import (
    AlignmentError,
    ArgumentError,
    DegenerateError,
    DomainError,
    ParseError,
    SchemaError,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def train_r2(x, y):
    x1 = np.column_stack([np.ones(len(x)), x])
    coef, *_ = np.linalg.lstsq(x1, y, rcond=None)
    resid = y - x1 @ coef
    yc = y - y.mean(0)
    return 1 - np.sum(resid ** 2) / np.sum(yc ** 2)


class TestDatasetInvariants:
    def test_row_mismatch(self):
        with pytest.raises(SchemaError):
            PairedDataset(np.zeros((3, 2)), np.zeros((2, 1)), ["a", "b"], ["y"])

    def test_duplicate_names(self):
        with pytest.raises(SchemaError):
            PairedDataset(np.zeros((3, 2)), np.zeros((3, 1)), ["a", "a"], ["y"])

    def test_immutable(self):
        ds = PairedDataset(np.zeros((3, 2)), np.zeros((3, 1)), ["a", "b"], ["y"])
        with pytest.raises(ValueError):
            ds.x[0, 0] = 1.0

    def test_standardized_moments(self):
        ds, _ = synth_generate(50, 6, 3, SynthGroundTruth(support=(0, 1)), seed=0)
        z = standardize(ds)
        assert z.preprocessed
        for m in (z.x, z.y):
            assert np.max(np.abs(m.mean(0))) < 1e-8
            assert np.max(np.abs(m.std(0) - 1)) < 1e-6


class TestCsv:
    def test_alignment_by_id(self, tmp_path):
        x = write(tmp_path / "x.csv", "id,g1,g2\na,1,2\nb,3,4\nc,5,6\n")
        y = write(tmp_path / "y.csv", "id,f\nc,30\na,10\nb,20\n")
        ds = load_paired_csv(x, y)
        assert ds.sample_ids == ("a", "b", "c")
        np.testing.assert_array_equal(ds.y[:, 0], [10, 20, 30])

    def test_missing_id(self, tmp_path):
        x = write(tmp_path / "x.csv", "id,g1\na,1\nb,3\nc,5\n")
        y = write(tmp_path / "y.csv", "id,f\na,10\nb,20\n")
        with pytest.raises(AlignmentError) as err:
            load_paired_csv(x, y)
        assert err.value.missing == ["c"]
        assert "c" in str(err.value)

    def test_duplicate_header(self, tmp_path):
        x = write(tmp_path / "x.csv", "id,gene_a,gene_a\na,1,2\n")
        y = write(tmp_path / "y.csv", "id,f\na,1\n")
        with pytest.raises(SchemaError):
            load_paired_csv(x, y)

    def test_parse_error_location(self, tmp_path):
        x = write(tmp_path / "x.csv", "id,g1,g2\na,1,2\nb,3,oops\n")
        y = write(tmp_path / "y.csv", "id,f\na,1\nb,2\n")
        with pytest.raises(ParseError) as err:
            load_paired_csv(x, y)
        assert (err.value.row, err.value.column, err.value.value) == (3, "g2", "oops")

    def test_meta(self, tmp_path):
        x = write(tmp_path / "x.csv", "id,g1\na,1\nb,3\n")
        y = write(tmp_path / "y.csv", "id,f\nb,2\na,1\n")
        meta = write(tmp_path / "m.csv", "id,label,color\nb,B,#000002\na,A,#000001\n")
        ds = load_paired_csv(x, y, meta)
        assert ds.sample_labels == ("A", "B")
        assert ds.sample_colors == ("#000001", "#000002")

    def test_round_trip_exact(self, tmp_path):
        ds, _ = synth_generate(20, 5, 3, SynthGroundTruth(support=(0, 1)), seed=3)
        paths = [tmp_path / f for f in ("x.csv", "y.csv", "m.csv")]
        save_paired_csv(ds, *paths)
        back = load_paired_csv(*paths)
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.y, ds.y)
        assert back.sample_labels == ds.sample_labels
        assert back.sample_colors == ds.sample_colors
        assert back.x_names == ds.x_names

    def test_gene_subset_file(self, tmp_path):
        f = write(tmp_path / "genes.txt", "# ion channels\nKcnc1\n\nScn1a  # comment\n")
        assert read_gene_subset(f) == ["Kcnc1", "Scn1a"]


class TestNormalization:
    def test_equal_depths_unchanged(self):
        m = np.array([[1.0, 3.0], [2.0, 2.0]])
        np.testing.assert_allclose(normalize_depth(m), m)

    def test_median_depth(self):
        m = np.array([[2.0, 0.0], [1.0, 3.0], [3.0, 3.0]])
        np.testing.assert_allclose(normalize_depth(m).sum(1), [4, 4, 4])

    def test_single_row(self):
        m = np.array([[1.0, 5.0, 2.0]])
        np.testing.assert_allclose(normalize_depth(m), m)

    def test_zero_row(self):
        with pytest.raises(DegenerateError, match=r"\[1\]"):
            normalize_depth(np.array([[1.0, 1.0], [0.0, 0.0]]))

    def test_negative(self):
        with pytest.raises(DomainError):
            normalize_depth(np.array([[-1.0, 2.0]]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_row_proportions_preserved(self, seed):
        m = np.random.default_rng(seed).integers(1, 50, size=(6, 5)).astype(float)
        ratio = normalize_depth(m) / m
        np.testing.assert_allclose(ratio, ratio[:, :1] * np.ones((1, 5)), rtol=1e-12)

    def test_log_values(self):
        np.testing.assert_array_equal(log_transform(np.array([[0.0, 1.0, 3.0]])), [[0.0, 1.0, 2.0]])

    def test_log_negative(self):
        with pytest.raises(DomainError):
            log_transform(np.array([[-0.5]]))


class TestHvg:
    def make(self, x):
        return PairedDataset(x, np.zeros((x.shape[0], 1)), [f"g{i}" for i in range(x.shape[1])], ["y"])

    def test_all_genes(self):
        ds = self.make(np.random.default_rng(0).normal(size=(10, 4)))
        out = select_hvg(ds, 4)
        np.testing.assert_array_equal(out.x, ds.x)
        assert out.x_names == ds.x_names

    def test_forced_order(self):
        x = np.column_stack([np.ones(4), [0, 1, 0, 1], [0, 5, 0, 5]]).astype(float)
        x[:, 1] *= np.sqrt(4.0)  # variance 1
        x[:, 2] *= np.sqrt(4.0) * 5 / 5
        out = select_hvg(self.make(x), 2)
        assert out.x_names == ("g1", "g2")

    def test_sort_oracle(self):
        x = np.random.default_rng(7).normal(size=(50, 20)) * np.arange(1, 21)[::-1] ** 0.3
        order = sorted(range(20), key=lambda j: -float(np.var(x[:, j])))
        out = select_hvg(self.make(x), 5)
        assert set(out.x_names) == {f"g{j}" for j in order[:5]}
        assert list(out.x_names) == sorted(out.x_names, key=lambda n: int(n[1:]))

    def test_too_many(self):
        with pytest.raises(ArgumentError):
            select_hvg(self.make(np.zeros((3, 2))), 3)


class TestZscore:
    def test_two_points(self):
        z, _, _, _ = zscore_fit_apply(np.array([[1.0], [3.0]]))
        np.testing.assert_array_equal(z[:, 0], [-1.0, 1.0])

    def test_test_at_train_mean(self):
        _, t, _, _ = zscore_fit_apply(np.array([[1.0], [3.0]]), np.array([[2.0]]))
        assert t[0, 0] == 0.0

    def test_stored_stats_reproduce(self):
        rng = np.random.default_rng(1)
        tr, te = rng.normal(size=(30, 4)), rng.normal(size=(10, 4))
        z, zt, m, s = zscore_fit_apply(tr, te)
        np.testing.assert_array_equal(zscore_apply(tr, m, s), z)
        np.testing.assert_array_equal(zscore_apply(te, m, s), zt)

    def test_constant_column(self):
        with pytest.raises(DegenerateError, match="b"):
            zscore_fit_apply(np.array([[1.0, 2.0], [3.0, 2.0]]), names=["a", "b"])


class TestPreprocess:
    def test_chain_and_summary(self):
        rng = np.random.default_rng(0)
        counts = rng.poisson(5, size=(30, 12)).astype(float) + 1
        ds = PairedDataset(counts, rng.normal(size=(30, 2)), [f"g{i}" for i in range(12)], ["a", "b"])
        out, summary = preprocess(ds, n_hvg=5, gene_subset=[f"g{i}" for i in range(8)])
        assert out.p == 5 and summary.p_out == 5
        assert set(out.x_names) <= {f"g{i}" for i in range(8)}
        assert out.preprocessed
        assert np.max(np.abs(out.x.mean(0))) < 1e-8

    def test_zscore_idempotent(self):
        ds, _ = synth_generate(40, 5, 2, SynthGroundTruth(support=(0,)), seed=2)
        once, _ = preprocess(ds, depth_normalize=False, log=False)
        twice, _ = preprocess(once, depth_normalize=False, log=False)
        np.testing.assert_allclose(twice.x, once.x, atol=1e-8)


class TestSynth:
    def test_noiseless_linear_fit(self):
        truth = SynthGroundTruth(support=(0, 3, 5), noise_sd=0.0)
        ds, _ = synth_generate(100, 8, 4, truth, seed=0)
        assert train_r2(ds.x, ds.y) == pytest.approx(1.0, abs=1e-10)

    def test_deterministic(self):
        t = SynthGroundTruth(support=(0, 1), link="nonlinear")
        a, _ = synth_generate(30, 5, 2, t, seed=9)
        b, _ = synth_generate(30, 5, 2, t, seed=9)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        assert a.sample_labels == b.sample_labels

    def test_support_too_large(self):
        with pytest.raises(ArgumentError):
            synth_generate(10, 3, 2, SynthGroundTruth(support=(0, 1, 2, 3)))

    def test_ridge_oracle_separates_support(self):
        ds, truth = synth_generate(2000, 200, 10, SynthGroundTruth(support=tuple(range(10))), seed=0)
        x = ds.x - ds.x.mean(0)
        y = ds.y - ds.y.mean(0)
        b = np.linalg.solve(x.T @ x + 1.0 * np.eye(200), x.T @ y)
        mag = np.linalg.norm(b, axis=1)
        off = np.delete(mag, truth.support)
        assert np.all(mag[list(truth.support)] > np.percentile(off, 95))

    def test_nonlinear_not_linear(self):
        truth = SynthGroundTruth(support=tuple(range(5)), link="nonlinear", quad_scale=1.0)
        ds, _ = synth_generate(1000, 20, 6, truth, seed=11)
        assert train_r2(ds.x, ds.y) < 0.9
