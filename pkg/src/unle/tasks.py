"""Benchmark simulators with tractable likelihoods, priors, dataset handling
and reference-posterior generation.

Tasks follow the usual SBI benchmark conventions: two_moons, slcp,
gaussian_linear_uniform, lotka_volterra, plus the 1-D bimodal toy.  Every
task has an exact ``true_loglik`` so reference posteriors can be drawn by
long-run MALA on the true unnormalized posterior.
"""

import csv
import zlib
from dataclasses import dataclass, field

import numpy as np

from unle.errors import InitializationError
from unle.samplers import (
    KAPPA,
    MALA_TARGET_RATE,
    Box,
    UnnormalizedTarget,
    _init_logp_grad,
    _mala_sweep,
    from_unconstrained,
    to_unconstrained,
)

_LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class BoxPrior:
    """Uniform prior over a finite box."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))

    @property
    def dim(self):
        return self.lo.shape[0]

    @property
    def support(self):
        return Box(self.lo, self.hi)

    def sample(self, n, rng):
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))

    def logpdf_batch(self, thetas):
        thetas = np.atleast_2d(thetas)
        inside = self.support.contains(thetas)
        const = -np.sum(np.log(self.hi - self.lo))
        return np.where(inside, const, -np.inf)

    def grad_logpdf_batch(self, thetas):
        return np.zeros_like(np.atleast_2d(thetas))


@dataclass(frozen=True)
class GaussianPrior:
    """Independent Gaussian prior."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=np.float64)))
        object.__setattr__(self, "std", np.atleast_1d(np.asarray(self.std, dtype=np.float64)))

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def support(self):
        return None

    def sample(self, n, rng):
        return self.mean + self.std * rng.standard_normal((n, self.dim))

    def logpdf_batch(self, thetas):
        thetas = np.atleast_2d(thetas)
        z = (thetas - self.mean) / self.std
        return -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(self.std)) \
            - 0.5 * self.dim * _LOG_2PI

    def grad_logpdf_batch(self, thetas):
        thetas = np.atleast_2d(thetas)
        return -(thetas - self.mean) / (self.std ** 2)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Ordered (theta, x) pairs with the simulation round of each pair."""

    thetas: np.ndarray
    xs: np.ndarray
    rounds: np.ndarray

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=np.float64))
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        self.rounds = np.asarray(self.rounds, dtype=np.int64)
        if not (self.thetas.shape[0] == self.xs.shape[0] == self.rounds.shape[0]):
            raise ValueError("mismatched dataset lengths")
        if self.rounds.size and np.any(np.diff(self.rounds) < 0):
            raise ValueError("round indices must be non-decreasing")
        if not (np.all(np.isfinite(self.thetas)) and np.all(np.isfinite(self.xs))):
            raise ValueError("non-finite dataset entries")

    def __len__(self):
        return self.thetas.shape[0]

    @staticmethod
    def empty(theta_dim, x_dim):
        return Dataset(np.empty((0, theta_dim)), np.empty((0, x_dim)),
                       np.empty(0, dtype=np.int64))

    def append(self, thetas, xs, round_idx):
        thetas = np.atleast_2d(thetas)
        return Dataset(
            np.concatenate([self.thetas, thetas]),
            np.concatenate([self.xs, np.atleast_2d(xs)]),
            np.concatenate([self.rounds, np.full(thetas.shape[0], round_idx, dtype=np.int64)]),
        )

    def to_csv(self, path):
        d_t, d_x = self.thetas.shape[1], self.xs.shape[1]
        header = (["round"] + [f"theta_{i}" for i in range(d_t)]
                  + [f"x_{i}" for i in range(d_x)])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r, th, x in zip(self.rounds, self.thetas, self.xs):
                w.writerow([int(r)] + [repr(float(v)) for v in th]
                           + [repr(float(v)) for v in x])

    @staticmethod
    def from_csv(path):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            d_t = sum(1 for h in header if h.startswith("theta_"))
            d_x = sum(1 for h in header if h.startswith("x_"))
            rows = list(reader)
        n = len(rows)
        thetas = np.empty((n, d_t))
        xs = np.empty((n, d_x))
        rounds = np.empty(n, dtype=np.int64)
        for i, row in enumerate(rows):
            rounds[i] = int(row[0])
            thetas[i] = [float(v) for v in row[1:1 + d_t]]
            xs[i] = [float(v) for v in row[1 + d_t:1 + d_t + d_x]]
        return Dataset(thetas, xs, rounds)


def save_samples_csv(path, samples, prefix="theta"):
    samples = np.atleast_2d(samples)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"{prefix}_{i}" for i in range(samples.shape[1])])
        for row in samples:
            w.writerow([repr(float(v)) for v in row])


def load_samples_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.asarray([[float(v) for v in row] for row in reader])


# ---------------------------------------------------------------------------
# task definition


@dataclass(frozen=True)
class TaskSpec:
    """A simulator with its prior and (when tractable) exact likelihood."""

    name: str
    theta_dim: int
    x_dim: int
    prior: object
    simulate_batch: object = field(repr=False)     # (TH, rng) -> (X, valid mask)
    loglik_batch: object = field(repr=False, default=None)   # (X, TH) -> (B,)
    loglik_grad_theta: object = field(repr=False, default=None)  # (x, TH) -> (B, d)

    @property
    def has_true_loglik(self):
        return self.loglik_batch is not None


def simulate(task, theta, rng):
    """One simulator draw; None when summaries are non-finite (invalid)."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if task.prior.support is not None and not task.prior.support.contains(theta)[0]:
        raise ValueError("theta outside the prior support")
    x, valid = task.simulate_batch(theta, rng)
    return x[0] if valid[0] else None


def prior_logpdf(task, theta):
    """Exact prior log-density; -inf outside the support."""
    return float(task.prior.logpdf_batch(np.atleast_2d(theta))[0])


def true_loglik(task, x, theta):
    """Exact log p(x | theta) for tasks with a tractable likelihood."""
    if not task.has_true_loglik:
        raise NotImplementedError(f"task {task.name} has no tractable likelihood")
    return float(task.loglik_batch(np.atleast_2d(x), np.atleast_2d(theta))[0])


def posterior_target(task, x_o):
    """True unnormalized posterior p(theta) p(x_o | theta) as a MALA target."""
    if not task.has_true_loglik:
        raise NotImplementedError(f"task {task.name} has no tractable likelihood")
    x_o = np.asarray(x_o, dtype=np.float64)

    def fn(thetas):
        thetas = np.atleast_2d(thetas)
        lp = task.prior.logpdf_batch(thetas) + task.loglik_batch(
            np.tile(x_o, (thetas.shape[0], 1)), thetas)
        if task.loglik_grad_theta is not None:
            gl = task.loglik_grad_theta(x_o, thetas)
        else:
            gl = _fd_grad_theta(task, x_o, thetas)
        g = task.prior.grad_logpdf_batch(thetas) + gl
        return lp, g

    return UnnormalizedTarget(task.theta_dim, fn, support=task.prior.support)


def _fd_grad_theta(task, x_o, thetas, h=1e-6):
    thetas = np.atleast_2d(thetas)
    b, d = thetas.shape
    xr = np.tile(x_o, (b, 1))
    g = np.empty((b, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        g[:, j] = (task.loglik_batch(xr, thetas + e)
                   - task.loglik_batch(xr, thetas - e)) / (2 * h)
    return g


def reference_posterior(task, x_o, n, rng, *, n_chains=10, n_steps=100_000,
                        n_candidates=10_000, jump_every=2, diag_out=None):
    """Approximate i.i.d. draws from the true posterior via long-run MALA.

    Chains start from the highest-density prior candidates and burn in for
    half the run.  Every ``jump_every`` steps a prior-independence MH move
    is attempted (acceptance is the likelihood ratio), which lets chains
    hop between separated posterior modes; the mixture kernel leaves the
    posterior invariant.  The pooled tail is thinned down to n samples.
    """
    if n == 0:
        return np.empty((0, task.theta_dim))
    target = posterior_target(task, x_o)
    x_o = np.asarray(x_o, dtype=np.float64)
    retries = 0
    init = None
    for _ in range(3):
        cand = task.prior.sample(n_candidates, rng)
        lp, _ = target.logpdf_and_grad(cand)
        finite = np.isfinite(lp)
        if finite.sum() >= n_chains:
            order = np.argsort(lp)[::-1]
            init = cand[order[:n_chains]]
            break
        retries += 1
    if init is None:
        raise InitializationError(retries)

    def loglik(thetas):
        return task.loglik_batch(np.tile(x_o, (thetas.shape[0], 1)), thetas)

    tu = target.unconstrained()
    fn = tu.logpdf_and_grad
    support = target.support
    pos = to_unconstrained(support, init) if support is not None else init.copy()
    sigma = np.full(n_chains, 0.5)
    logp, grad = _init_logp_grad(fn, pos)
    burn = n_steps // 2
    keep = n_steps - burn
    thin = max(1, (keep * n_chains) // max(n, 1))
    accepted = 0.0
    jumps = 0.0
    out = []
    for t in range(n_steps):
        pos, logp, grad, acc = _mala_sweep(fn, pos, logp, grad, sigma, rng)
        if t < burn:
            sigma = sigma * np.exp(KAPPA * (acc.astype(np.float64) - MALA_TARGET_RATE))
        else:
            accepted += acc.mean()
        if (t + 1) % jump_every == 0:
            prop_nat = task.prior.sample(n_chains, rng)
            cur_nat = from_unconstrained(support, pos) if support is not None else pos
            log_a = loglik(prop_nat) - loglik(cur_nat)
            jump = np.log(rng.random(n_chains)) < log_a
            if np.any(jump):
                jumps += jump.mean()
                prop = (to_unconstrained(support, prop_nat)
                        if support is not None else prop_nat)
                pos = np.where(jump[:, None], prop, pos)
                logp, grad = _init_logp_grad(fn, pos)
        if t >= burn and (t - burn + 1) % thin == 0:
            out.append(pos.copy())
    samples = np.concatenate(out, axis=0)
    if support is not None:
        samples = from_unconstrained(support, samples)
    if diag_out is not None:
        diag_out["acceptance_rate"] = accepted / keep
        diag_out["jump_rate"] = jumps / (n_steps // jump_every)
        half = samples.shape[0] // 2
        pooled_std = samples.std(axis=0) + 1e-12
        diag_out["split_mean_shift"] = float(
            np.max(np.abs(samples[:half].mean(axis=0) - samples[half:].mean(axis=0))
                   / pooled_std))
    if samples.shape[0] > n:
        samples = samples[-n:]
    return samples


def sample_observation(task, index):
    """Deterministic (theta_true, x_o) pair for an observation index."""
    seed = np.random.SeedSequence([zlib.crc32(task.name.encode()), int(index)])
    rng = np.random.Generator(np.random.PCG64(seed))
    for _ in range(100):
        theta = task.prior.sample(1, rng)
        x, valid = task.simulate_batch(theta, rng)
        if valid[0]:
            return theta[0], x[0]
    raise InitializationError(100, f"no valid observation for task {task.name}")


# ---------------------------------------------------------------------------
# concrete tasks


def _normal_logpdf(x, mean, std):
    z = (x - mean) / std
    return -0.5 * z * z - np.log(std) - 0.5 * _LOG_2PI


def _two_moons():
    prior = BoxPrior(np.full(2, -1.0), np.full(2, 1.0))
    r_mean, r_std = 0.1, 0.01

    def shift(thetas):
        return np.stack(
            [-np.abs(thetas[:, 0] + thetas[:, 1]) / np.sqrt(2.0),
             (-thetas[:, 0] + thetas[:, 1]) / np.sqrt(2.0)], axis=1)

    def sim(thetas, rng):
        b = thetas.shape[0]
        a = rng.uniform(-np.pi / 2, np.pi / 2, b)
        r = rng.normal(r_mean, r_std, b)
        p = np.stack([r * np.cos(a) + 0.25, r * np.sin(a)], axis=1)
        return p + shift(thetas), np.ones(b, dtype=bool)

    def _radial(q):
        # density of the crescent point p at offset q, in log form, plus
        # the radial derivative of that log-density
        rad = np.sqrt(np.sum(q * q, axis=1))
        rad = np.maximum(rad, 1e-300)
        lp_plus = _normal_logpdf(rad, r_mean, r_std)
        lp_minus = _normal_logpdf(-rad, r_mean, r_std)
        lp_mix = np.logaddexp(lp_plus, lp_minus)
        w_plus = np.exp(lp_plus - lp_mix)
        dmix = w_plus * (-(rad - r_mean) / r_std ** 2) \
            + (1 - w_plus) * (-(rad + r_mean) / r_std ** 2)
        logp = np.where(q[:, 0] > 0, lp_mix - np.log(rad) - np.log(np.pi), -np.inf)
        dlog_drad = dmix - 1.0 / rad
        return logp, dlog_drad, rad

    def loglik(xs, thetas):
        q = xs - shift(thetas) - np.array([0.25, 0.0])
        logp, _, _ = _radial(q)
        return logp

    def loglik_grad(x_o, thetas):
        thetas = np.atleast_2d(thetas)
        q = x_o[None, :] - shift(thetas) - np.array([0.25, 0.0])
        _, dlog, rad = _radial(q)
        gq = dlog[:, None] * q / rad[:, None]
        sgn = np.sign(thetas[:, 0] + thetas[:, 1])
        inv = 1.0 / np.sqrt(2.0)
        # dq/dtheta = -dshift/dtheta
        g = np.empty_like(thetas)
        g[:, 0] = gq[:, 0] * (sgn * inv) + gq[:, 1] * inv
        g[:, 1] = gq[:, 0] * (sgn * inv) - gq[:, 1] * inv
        return g

    return TaskSpec("two_moons", 2, 2, prior, sim, loglik, loglik_grad)


def _gaussian_linear_uniform(dim=10, noise_std=0.1):
    prior = BoxPrior(np.full(dim, -1.0), np.full(dim, 1.0))

    def sim(thetas, rng):
        x = thetas + noise_std * rng.standard_normal(thetas.shape)
        return x, np.ones(thetas.shape[0], dtype=bool)

    def loglik(xs, thetas):
        return np.sum(_normal_logpdf(xs, thetas, noise_std), axis=1)

    def loglik_grad(x_o, thetas):
        return (x_o[None, :] - np.atleast_2d(thetas)) / noise_std ** 2

    return TaskSpec("gaussian_linear_uniform", dim, dim, prior, sim, loglik, loglik_grad)


def _slcp():
    prior = BoxPrior(np.full(5, -3.0), np.full(5, 3.0))

    def moments(thetas):
        m = thetas[:, :2]
        s1 = thetas[:, 2] ** 2
        s2 = thetas[:, 3] ** 2
        rho = np.tanh(thetas[:, 4])
        return m, s1, s2, rho

    def sim(thetas, rng):
        b = thetas.shape[0]
        m, s1, s2, rho = moments(thetas)
        eps = rng.standard_normal((b, 4, 2))
        y1 = m[:, None, 0] + s1[:, None] * eps[:, :, 0]
        y2 = m[:, None, 1] + s2[:, None] * (
            rho[:, None] * eps[:, :, 0] + np.sqrt(1.0 - rho[:, None] ** 2) * eps[:, :, 1])
        x = np.stack([y1, y2], axis=2).reshape(b, 8)
        return x, np.ones(b, dtype=bool)

    def loglik(xs, thetas):
        xs = np.atleast_2d(xs)
        m, s1, s2, rho = moments(np.atleast_2d(thetas))
        pts = xs.reshape(-1, 4, 2)
        d1 = (pts[:, :, 0] - m[:, None, 0]) / s1[:, None]
        d2 = (pts[:, :, 1] - m[:, None, 1]) / s2[:, None]
        omr2 = 1.0 - rho ** 2
        quad = (d1 * d1 - 2.0 * rho[:, None] * d1 * d2 + d2 * d2) / omr2[:, None]
        logdet = np.log(s1) + np.log(s2) + 0.5 * np.log(omr2)
        return np.sum(-0.5 * quad, axis=1) - 4.0 * (logdet + _LOG_2PI)

    return TaskSpec("slcp", 5, 8, prior, sim, loglik, None)


def _lotka_volterra(dt=0.05, t_end=20.0, n_obs=5, noise=0.1):
    prior = BoxPrior(np.array([0.5, 0.01, 0.5, 0.01]),
                     np.array([1.5, 0.1, 1.5, 0.1]))
    n_steps = int(round(t_end / dt))
    obs_idx = np.linspace(1, n_steps, n_obs, dtype=int)

    def deriv(z, th):
        u, v = z[:, 0], z[:, 1]
        du = th[:, 0] * u - th[:, 1] * u * v
        dv = -th[:, 2] * v + th[:, 3] * u * v
        return np.stack([du, dv], axis=1)

    def solve(thetas):
        b = thetas.shape[0]
        z = np.tile(np.array([30.0, 1.0]), (b, 1))
        out = np.empty((b, n_steps + 1, 2))
        out[:, 0] = z
        for s in range(n_steps):
            k1 = deriv(z, thetas)
            k2 = deriv(z + 0.5 * dt * k1, thetas)
            k3 = deriv(z + 0.5 * dt * k2, thetas)
            k4 = deriv(z + dt * k3, thetas)
            z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            out[:, s + 1] = z
        return out[:, obs_idx].reshape(b, 2 * n_obs)

    def sim(thetas, rng):
        m = solve(thetas)
        valid = np.all(np.isfinite(m), axis=1) & np.all(m > 1e-8, axis=1)
        safe = np.where(m > 1e-8, m, 1.0)
        x = safe * np.exp(noise * rng.standard_normal(m.shape))
        x[~valid] = np.nan
        return x, valid

    def loglik(xs, thetas):
        xs = np.atleast_2d(xs)
        m = solve(np.atleast_2d(thetas))
        bad = ~(np.all(np.isfinite(m), axis=1) & np.all(m > 1e-8, axis=1)
                & np.all(xs > 0, axis=1))
        safe_m = np.where(m > 1e-8, m, 1.0)
        safe_x = np.where(xs > 0, xs, 1.0)
        # log-normal observation density
        lp = np.sum(_normal_logpdf(np.log(safe_x), np.log(safe_m), noise)
                    - np.log(safe_x), axis=1)
        return np.where(bad, -np.inf, lp)

    return TaskSpec("lotka_volterra", 4, 2 * n_obs, prior, sim, loglik, None)


def _bimodal_toy(offset=2.0, noise=0.5):
    prior = GaussianPrior(np.zeros(1), np.ones(1))

    def sim(thetas, rng):
        b = thetas.shape[0]
        sign = np.where(rng.random(b) < 0.5, -1.0, 1.0)
        x = thetas[:, 0] + sign * offset + noise * rng.standard_normal(b)
        return x[:, None], np.ones(b, dtype=bool)

    def loglik(xs, thetas):
        xs = np.atleast_2d(xs)[:, 0]
        th = np.atleast_2d(thetas)[:, 0]
        lp1 = _normal_logpdf(xs, th - offset, noise)
        lp2 = _normal_logpdf(xs, th + offset, noise)
        return np.logaddexp(lp1, lp2) - np.log(2.0)

    def loglik_grad(x_o, thetas):
        th = np.atleast_2d(thetas)[:, 0]
        x = float(x_o[0])
        lp1 = _normal_logpdf(x, th - offset, noise)
        lp2 = _normal_logpdf(x, th + offset, noise)
        w1 = np.exp(lp1 - np.logaddexp(lp1, lp2))
        g = w1 * (x - th + offset) / noise ** 2 + (1 - w1) * (x - th - offset) / noise ** 2
        return g[:, None]

    return TaskSpec("bimodal_toy", 1, 1, prior, sim, loglik, loglik_grad)


_REGISTRY = {
    "two_moons": _two_moons,
    "gaussian_linear_uniform": _gaussian_linear_uniform,
    "slcp": _slcp,
    "lotka_volterra": _lotka_volterra,
    "bimodal_toy": _bimodal_toy,
}


def task_names():
    return sorted(_REGISTRY)


def get_task(name):
    if name not in _REGISTRY:
        raise ValueError(f"unknown task {name!r}; available: {task_names()}")
    return _REGISTRY[name]()
