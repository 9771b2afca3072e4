import numpy as np
import pytest

from datagen import gen_synth1, synth_geometry
from errors import InsufficientDataError, ShapeError
from experiment_runner import ProbeRequest
from nets import Dense, NetworkSpec, build
from probes import (
    HISTOGRAM_COLUMNS, LogRegConfig, ProbeConfig, classification_score, grid_frame, interpolate, logreg_eval,
    logreg_fit, logreg_probe, market_correlation, pca_fit, pca_project, retrieval_agreement, retrieve,
    separated_components, stratified_split, swap, swap_accuracy, swap_grid, z_histograms,
)


def linear_decoder(s_dim, z_dim, out):
    return build(NetworkSpec(s_dim + z_dim, (Dense(out),)), seed=0, name="decoder")


def newton_logreg(X, y, l2, iterations=50):
    """Full-Hessian Newton solve of the penalized multinomial objective; returns the fitted logits."""
    mean, scale = X.mean(axis=0), X.std(axis=0)
    A = np.hstack([(X - mean) / scale, np.ones((len(X), 1))])
    n, width = A.shape
    K = int(y.max()) + 1
    onehot = np.eye(K)[y]
    penalized = np.repeat(np.arange(width) < width - 1, K)
    theta = np.zeros((width, K))
    for _ in range(iterations):
        logits = A @ theta
        P = np.exp(logits - logits.max(axis=1, keepdims=True))
        P /= P.sum(axis=1, keepdims=True)
        grad = (A.T @ (P - onehot) / n).ravel() + l2 * penalized * theta.ravel()
        S = np.einsum("ik,km->ikm", P, np.eye(K)) - np.einsum("ik,im->ikm", P, P)
        H = np.einsum("ij,il,ikm->jklm", A, A, S).reshape(width * K, width * K) / n + np.diag(l2 * penalized)
        theta -= np.linalg.lstsq(H, grad, rcond=None)[0].reshape(width, K)
    return A @ theta, np.abs(grad).max()


class TestPca:
    """Principal components"""

    def test_points_on_a_line(self, rng):
        t = rng.standard_normal(200)
        X = np.outer(t, [1.0, -2.0, 0.5]) + 3.0
        model = pca_fit(X, 3)
        assert model.ratios[0] == pytest.approx(1.0, abs=1e-9)

    def test_isotropic_cloud(self, rng):
        model = pca_fit(rng.standard_normal((10_000, 2)))
        np.testing.assert_allclose(model.ratios, [0.5, 0.5], atol=0.05)

    def test_mean_projects_to_zero(self, rng):
        X = rng.standard_normal((50, 4))
        model = pca_fit(X, 2)
        np.testing.assert_allclose(pca_project(model, X.mean(axis=0, keepdims=True)), 0.0, atol=1e-12)

    def test_zero_variance(self):
        model = pca_fit(np.ones((10, 3)), 2)
        np.testing.assert_array_equal(model.ratios, [0.0, 0.0])

    def test_sign_convention(self, rng):
        model = pca_fit(rng.standard_normal((100, 3)) * [3.0, 2.0, 1.0])
        for row in model.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_k_out_of_range(self, rng):
        with pytest.raises(ShapeError):
            pca_fit(rng.standard_normal((10, 3)), 4)


class TestLogReg:
    """Multinomial logistic regression"""

    def test_separable(self, rng):
        X = np.concatenate([rng.normal(-3, 0.5, (50, 2)), rng.normal(3, 0.5, (50, 2))])
        y = np.repeat([0, 1], 50)
        assert logreg_eval(logreg_fit(X, y), X, y) == 1.0

    def test_independent_labels_are_chance(self, rng):
        X = rng.standard_normal((20_000, 3))
        y = rng.integers(0, 4, size=20_000)
        model = logreg_fit(X[:10_000], y[:10_000])
        assert logreg_eval(model, X[10_000:], y[10_000:]) == pytest.approx(0.25, abs=0.03)

    def test_matches_newton_solver(self, rng):
        centers = np.array([[0.0, 0.0], [1.5, 0.0], [0.0, 1.5]])
        y = np.arange(50) % 3
        X = centers[y] + rng.standard_normal((50, 2))
        cfg = LogRegConfig(l2=1e-3, tol=1e-9)
        logits, grad_norm = newton_logreg(X, y, cfg.l2)
        assert grad_norm < 1e-8
        newton_acc = float(np.mean(np.argmax(logits, axis=1) == y))
        assert abs(logreg_eval(logreg_fit(X, y, cfg), X, y) - newton_acc) <= 0.005

    def test_single_class(self, rng):
        with pytest.raises(InsufficientDataError):
            logreg_fit(rng.standard_normal((5, 2)), np.zeros(5))

    def test_keeps_original_class_ids(self, rng):
        X = np.concatenate([rng.normal(-3, 0.5, (20, 1)), rng.normal(3, 0.5, (20, 1))])
        y = np.repeat([7, 9], 20)
        model = logreg_fit(X, y)
        assert set(np.unique(model.classes)) == {7, 9}
        assert logreg_eval(model, X, y) == 1.0

    def test_probe_report(self, rng):
        X = np.concatenate([rng.normal(-3, 0.5, (40, 2)), rng.normal(3, 0.5, (40, 2))])
        y = np.repeat([0, 1], 40)
        report = logreg_probe(X, y, ProbeConfig(seed=1), space="Z", target_name="beta")
        assert report.accuracy == 1.0
        assert report.error_rate == 0.0
        assert report.chance == 0.5
        assert report.to_dict()["target"] == "beta"
        assert report.n_train + report.n_test == 80


class TestSplit:
    """Stratified splits"""

    def test_every_class_keeps_training_data(self):
        labels = np.array([0, 0, 0, 0, 0, 1])
        train, test = stratified_split(labels, 0.5, seed=0)
        assert 5 in train
        assert len(set(train) & set(test)) == 0
        assert len(train) + len(test) == 6


class TestClassificationScore:
    """Neural probe accuracy"""

    def test_informative_codes(self, rng):
        labels = np.repeat(np.arange(4), 60)
        codes = np.eye(4)[labels] * 3.0 + 0.1 * rng.standard_normal((240, 4))
        report = classification_score(codes, labels, ProbeConfig(score_epochs=60, score_width=16), n_classes=4)
        assert report.accuracy >= 0.9

    def test_shuffled_labels_are_near_chance(self, rng):
        labels = rng.integers(0, 4, size=2000)
        codes = rng.standard_normal((2000, 4))
        report = classification_score(codes, labels, ProbeConfig(score_epochs=5), n_classes=4)
        assert report.accuracy < 0.35


class TestHistograms:
    """Per-group component histograms"""

    def test_layout_and_counts(self, rng):
        codes = rng.standard_normal((30, 2))
        groups = np.repeat([0, 1, 2], 10)
        frame = z_histograms(codes, groups, bins=5)
        assert list(frame.columns) == HISTOGRAM_COLUMNS
        assert len(frame) == 2 * 3 * 5
        assert frame.groupby(["component", "group"])["count"].sum().eq(10).all()

    def test_constant_component_fills_one_bin(self):
        codes = np.column_stack([np.full(8, 0.3), np.arange(8.0)])
        frame = z_histograms(codes, np.zeros(8), bins=4)
        first = frame[frame["component"] == 0]
        assert (first["count"] > 0).sum() == 1

    def test_separated_components(self):
        groups = np.repeat([0, 1], 5)
        codes = np.column_stack([np.where(groups == 0, -1.0, 1.0) + 0.01 * np.arange(10), np.arange(10.0)])
        assert separated_components(codes, groups) == [0]


class TestDecodingProbes:
    """Swaps and interpolation through a decoder"""

    def test_swap_shape(self, rng):
        dec = linear_decoder(2, 3, 6)
        out = swap(dec, rng.standard_normal(2), rng.standard_normal(3))
        assert out.shape == (6,)

    def test_swap_grid_shape(self, rng):
        dec = linear_decoder(2, 3, 6)
        grid = swap_grid(dec, rng.standard_normal((4, 2)), rng.standard_normal((4, 3)))
        assert grid.shape == (4, 4, 6)

    def test_swap_grid_cells(self, rng):
        dec = linear_decoder(2, 3, 6)
        S, Z = rng.standard_normal((3, 2)), rng.standard_normal((3, 3))
        grid = swap_grid(dec, S, Z)
        np.testing.assert_allclose(grid[2, 0], swap(dec, S[2], Z[0]), rtol=1e-12, atol=1e-12)

    def test_swap_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            swap(linear_decoder(2, 3, 6), rng.standard_normal(3), rng.standard_normal(3))

    def test_interpolation_grid(self, rng):
        dec = linear_decoder(2, 3, 6)
        a = (rng.standard_normal(2), rng.standard_normal(3))
        b = (rng.standard_normal(2), rng.standard_normal(3))
        grid = interpolate(dec, a, b, steps=2)
        assert grid.shape == (2, 2, 6)
        np.testing.assert_allclose(grid[0, 0], swap(dec, *a), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(grid[1, 1], swap(dec, *b), rtol=1e-12, atol=1e-12)
        assert len(grid_frame(grid)) == 4

    def test_swap_accuracy_with_perfect_swaps(self):
        catalog = gen_synth1(32, seed=0)
        positions = catalog.meta["position"].to_numpy()[:4]
        backgrounds = catalog.meta["background"].to_numpy()[:4]
        geom = synth_geometry(32)
        grid = np.empty((4, 4, 1024))
        for i in range(4):
            for j in range(4):
                img = np.full((32, 32), float(backgrounds[j]))
                img[geom.rect_mask(int(positions[i]))] = 0.5
                grid[i, j] = img.reshape(-1)
        acc = swap_accuracy(grid, positions, backgrounds[:, None])
        assert acc == 1.0


class TestRetrieval:
    """Nearest neighbours in code space"""

    def test_twin_is_first(self, rng):
        codes = rng.standard_normal((10, 3))
        codes[7] = codes[2]
        neighbors = retrieve(codes, 2, 3)
        assert neighbors[0] == 7

    def test_all_others(self, rng):
        codes = rng.standard_normal((6, 2))
        assert sorted(retrieve(codes, 0, 5)) == [1, 2, 3, 4, 5]

    def test_k_out_of_range(self, rng):
        with pytest.raises(ValueError):
            retrieve(rng.standard_normal((4, 2)), 0, 4)

    def test_agreement(self):
        codes = np.array([[0.0], [0.1], [5.0], [5.1]])
        assert retrieval_agreement(codes, [0, 0, 1, 1], 1) == 1.0


class TestMarketCorrelation:
    """S codes against the market"""

    def test_embedded_market(self, rng):
        periods = np.repeat(np.arange(20), 5)
        market = rng.standard_normal(20)[periods]
        codes = np.outer(market, rng.standard_normal(20))
        assert market_correlation(codes, periods, market) == pytest.approx(1.0, abs=1e-9)

    def test_random_codes(self, rng):
        periods = np.repeat(np.arange(400), 5)
        market = rng.standard_normal(2000)
        assert market_correlation(rng.standard_normal((2000, 4)), periods, market) < 0.2

    def test_too_few_periods(self, rng):
        with pytest.raises(InsufficientDataError):
            market_correlation(rng.standard_normal((4, 2)), np.array([0, 0, 1, 1]), np.zeros(4))


SEEDS = (0, 1, 2)
REDUCED_CAPM = (("capm.n_periods", 50), ("capm.n_assets", 500))


class TestTrainedModels:
    """Codes of fully trained models from the shipped experiment files"""

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", SEEDS)
    def test_synth1_splits_location_and_background(self, shipped_run, seed):
        context = shipped_run("synth1", seed).context

        def accuracy(space, target):
            return context.run(ProbeRequest("score", space, target))[0]["accuracy"]

        assert accuracy("S", "label") == 1.0
        assert accuracy("Z", "label") <= 0.20
        assert accuracy("Z", "latent") >= 0.99

    @pytest.mark.slow
    def test_z_variance_follows_background_latents(self, shipped_run):
        synth1 = np.array([shipped_run("synth1", s).context.run(ProbeRequest("pca", "Z"))[0]["ratios"]
                           for s in SEEDS]).mean(axis=0)
        synth2 = np.array([shipped_run("synth2", s).context.run(ProbeRequest("pca", "Z"))[0]["ratios"]
                           for s in SEEDS]).mean(axis=0)
        assert synth1[0] >= 0.99
        assert synth2[0] + synth2[1] >= 0.98
        assert np.all(synth2[2:] <= 0.02)

    @pytest.mark.slow
    def test_synth1_swap_takes_position_from_s_and_background_from_z(self, shipped_run):
        context = shipped_run("synth1", 0).context
        meta = context.ds.catalog.meta
        black = np.flatnonzero(meta["background"].to_numpy() == 0)
        white = np.flatnonzero(meta["background"].to_numpy() == 1)
        S = context.codes["catalog"]["S"][black]
        Z = context.codes["catalog"]["Z"][white]
        grid = context.bundle.to_data_space(swap_grid(context.bundle.decoder, S, Z))
        positions = meta["position"].to_numpy()[black]
        assert swap_accuracy(grid, positions, meta["background"].to_numpy()[white], 32, "synth1") == 1.0

    @pytest.mark.slow
    def test_synth1_z_neighbors_and_histograms(self, shipped_run):
        context = shipped_run("synth1", 0).context
        assert context.run(ProbeRequest("retrieve", "Z"))[0]["agreement"] >= 0.9
        report, artifacts = context.run(ProbeRequest("hist", "Z", "latent"))
        assert len(report["separated_components"]) >= 1
        assert list(artifacts["histograms.csv"].columns) == HISTOGRAM_COLUMNS

    @pytest.mark.slow
    def test_capm_reduced_scale(self, shipped_run):
        context = shipped_run("capm", 0, REDUCED_CAPM).context

        def accuracy(space, target):
            return context.run(ProbeRequest("logreg", space, target))[0]["accuracy"]

        assert accuracy("Z", "beta") >= 0.45
        assert accuracy("S", "beta") <= 0.45
        assert accuracy("S", "er_m") >= 0.80
        assert accuracy("Z", "er_m") <= 0.50
