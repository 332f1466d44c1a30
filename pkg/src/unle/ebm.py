"""Energy-based likelihood models and their maximum-likelihood training
loops: joint tilted training (MCMC- or SMC-powered persistent particles)
and conditional training with one persistent particle per data point.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from unle import nets
from unle.errors import TrainingFailure
from unle.samplers import (
    Box,
    ParticleCloud,
    UnnormalizedTarget,
    _init_logp_grad,
    _mala_sweep,
    from_unconstrained,
    smc_run,
    to_unconstrained,
    KAPPA,
    MALA_TARGET_RATE,
)


# ---------------------------------------------------------------------------
# energy families


class EnergyFamily:
    """Differentiable conditional energy E(x, theta) with trainable params."""

    def params(self):
        raise NotImplementedError

    def with_params(self, flat):
        raise NotImplementedError

    def values(self, X, TH):
        raise NotImplementedError

    def values_and_grads(self, X, TH):
        """Returns (values, dE/dx, dE/dtheta), batched."""
        raise NotImplementedError

    def grad_params(self, X, TH, coeffs):
        """Parameter gradient of sum_b coeffs[b] * E(x_b, theta_b)."""
        raise NotImplementedError


@dataclass(frozen=True)
class EnergyModel(EnergyFamily):
    """Conditional energy backed by a dense network on [x ; theta]."""

    net: nets.NetParams
    x_dim: int
    theta_dim: int

    def __post_init__(self):
        if self.net.in_dim != self.x_dim + self.theta_dim:
            raise ValueError("network input dim must equal x_dim + theta_dim")
        if self.net.out_dim != 1:
            raise ValueError("energy network must have scalar output")

    @staticmethod
    def init(x_dim, theta_dim, rng, hidden=(50, 50, 50, 50), activation="swish"):
        sizes = (x_dim + theta_dim, *hidden, 1)
        return EnergyModel(nets.net_init(sizes, activation, rng), x_dim, theta_dim)

    def _join(self, X, TH):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        TH = np.atleast_2d(np.asarray(TH, dtype=np.float64))
        return np.ascontiguousarray(np.concatenate([X, TH], axis=1))

    def params(self):
        return self.net.flat

    def with_params(self, flat):
        return replace(self, net=self.net.with_flat(flat))

    def values(self, X, TH):
        return nets.net_forward(self.net, self._join(X, TH))[:, 0]

    def values_and_grads(self, X, TH):
        vals, g = nets.net_value_and_grad_input(self.net, self._join(X, TH))
        return vals, g[:, :self.x_dim], g[:, self.x_dim:]

    def grad_params(self, X, TH, coeffs):
        return nets.net_grad_params_weighted(self.net, self._join(X, TH), coeffs)

    def to_dict(self):
        return {"x_dim": self.x_dim, "theta_dim": self.theta_dim,
                "net": self.net.to_dict()}

    @staticmethod
    def from_dict(doc):
        return EnergyModel(nets.NetParams.from_dict(doc["net"]),
                           int(doc["x_dim"]), int(doc["theta_dim"]))


@dataclass(frozen=True)
class QuadraticEnergy(EnergyFamily):
    """E(x) = 0.5 x^T Lambda x; exact Gaussian oracle for training tests."""

    lam: np.ndarray

    @property
    def x_dim(self):
        return self.lam.shape[0]

    @property
    def theta_dim(self):
        return 0

    def params(self):
        return self.lam.ravel().copy()

    def with_params(self, flat):
        d = self.x_dim
        return QuadraticEnergy(np.asarray(flat, dtype=np.float64).reshape(d, d))

    def values(self, X, TH=None):
        X = np.atleast_2d(X)
        return 0.5 * np.einsum("bi,ij,bj->b", X, self.lam, X)

    def values_and_grads(self, X, TH=None):
        X = np.atleast_2d(X)
        g = 0.5 * (X @ (self.lam + self.lam.T))
        return self.values(X), g, np.empty((X.shape[0], 0))

    def grad_params(self, X, TH, coeffs):
        X = np.atleast_2d(X)
        outer = 0.5 * np.einsum("b,bi,bj->ij", np.asarray(coeffs, dtype=np.float64), X, X)
        return outer.ravel()

    def exact_loglik(self, X):
        """Mean Gaussian log-likelihood of the normalized model at the data."""
        lam_s = 0.5 * (self.lam + self.lam.T)
        sign, logdet = np.linalg.slogdet(lam_s)
        if sign <= 0:
            return -np.inf
        d = self.x_dim
        return float(0.5 * logdet - 0.5 * d * np.log(2 * np.pi)
                     - np.mean(self.values(X)))


@dataclass(frozen=True)
class AnalyticEnergy(EnergyFamily):
    """Closed-form energy for toy problems (not trainable)."""

    x_dim: int
    theta_dim: int
    value_fn: object = field(repr=False)        # (X, TH) -> (B,)
    grad_x_fn: object = field(repr=False)       # (X, TH) -> (B, x_dim)
    grad_theta_fn: object = field(repr=False, default=None)

    def params(self):
        return np.empty(0)

    def with_params(self, flat):
        return self

    def values(self, X, TH):
        return self.value_fn(np.atleast_2d(X), np.atleast_2d(TH))

    def values_and_grads(self, X, TH):
        X, TH = np.atleast_2d(X), np.atleast_2d(TH)
        gth = (self.grad_theta_fn(X, TH) if self.grad_theta_fn is not None
               else np.zeros_like(TH))
        return self.value_fn(X, TH), self.grad_x_fn(X, TH), gth

    def grad_params(self, X, TH, coeffs):
        raise NotImplementedError("analytic energies are not trainable")


# ---------------------------------------------------------------------------
# log-densities and sampling targets


def likelihood_logpdf(e, x, theta):
    """log q(x | theta) up to the theta-dependent normalizer: -E(x, theta)."""
    return float(-e.values(np.atleast_2d(x), np.atleast_2d(theta))[0])


def joint_tilted_logpdf(e, prior, x, theta):
    """log of the tilted joint model prior(theta) exp(-E) up to a constant."""
    theta = np.atleast_2d(theta)
    lp = 0.0
    if prior is not None:
        lp = float(prior.logpdf_batch(theta)[0])
        if not np.isfinite(lp):
            return -np.inf
    return lp - float(e.values(np.atleast_2d(x), theta)[0])


def tilted_joint_target(e, prior):
    """Tilted joint density over z = [x ; theta] as a sampling target."""
    dx, dt = e.x_dim, e.theta_dim

    def fn(Z):
        Z = np.atleast_2d(Z)
        X, TH = Z[:, :dx], Z[:, dx:]
        v, gx, gth = e.values_and_grads(X, TH)
        lp = -v
        gth = -gth
        if prior is not None:
            lp = lp + prior.logpdf_batch(TH)
            gth = gth + prior.grad_logpdf_batch(TH)
        return lp, np.concatenate([-gx, gth], axis=1)

    support = None
    if prior is not None and prior.support is not None:
        lo = np.concatenate([np.full(dx, -np.inf), prior.support.lo])
        hi = np.concatenate([np.full(dx, np.inf), prior.support.hi])
        support = Box(lo, hi)
    return UnnormalizedTarget(dx + dt, fn, support)


def conditional_x_fn(e, TH_rows):
    """Per-row targets q(x | theta_i) at fixed thetas, batched over rows."""
    TH_rows = np.atleast_2d(TH_rows)

    def fn(X):
        v, gx, _ = e.values_and_grads(X, TH_rows)
        return -v, -gx

    return fn


# ---------------------------------------------------------------------------
# training configuration


@dataclass
class TrainConfig:
    """Hyper-parameters of the EBM training loops."""

    max_iter: int = 500
    learning_rate: float = 0.01
    n_particles: int = 1000
    mcmc_steps: int = 50
    warmup_steps: int = 50
    batch_size: int = None          # conditional training; None -> min(N, 1000)
    mode: str = "mcmc"              # "mcmc" | "smc"
    smc_steps: int = 20             # intermediate densities L
    smc_kernel_steps: int = 3
    resample_threshold: float = 0.5
    init_step_size: float = 0.5

    def __post_init__(self):
        if self.mode not in ("mcmc", "smc"):
            raise ValueError("mode must be 'mcmc' or 'smc'")
        if self.max_iter < 0 or self.mcmc_steps < 0 or self.warmup_steps < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.n_particles < 1 or self.smc_steps < 1 or self.smc_kernel_steps < 1:
            raise ValueError("particle and SMC stage counts must be positive")
        if self.learning_rate <= 0 or self.init_step_size <= 0:
            raise ValueError("learning rate and step size must be positive")


def _check_alive(vals, iteration):
    if not np.any(np.isfinite(vals)):
        raise TrainingFailure(iteration)


# ---------------------------------------------------------------------------
# joint tilted training (AUNLE)


def maximize_ebm_log_l(data, e0, prior, cfg, rng, *, log_rows=None,
                       return_cloud=False):
    """Approximate maximum-likelihood training of the tilted joint EBM.

    The model-term expectation is a persistent particle cloud over (x, theta)
    initialized from the data and refreshed each iteration, either by frozen
    MALA chains (warmed up once at iteration 0) or by a warm-started SMC
    bridge from the previous iterate's density.
    """
    n_data = len(data)
    if n_data == 0:
        raise ValueError("empty dataset")
    Z_data = np.concatenate([data.xs, data.thetas], axis=1)
    idx = rng.choice(n_data, size=cfg.n_particles, replace=n_data < cfg.n_particles)
    z_nat = Z_data[idx].copy()
    sigma = np.full(cfg.n_particles, cfg.init_step_size)
    weights = np.full(cfg.n_particles, 1.0 / cfg.n_particles)

    fam = e0
    adam = nets.AdamState.init(fam.params().size, lr=cfg.learning_rate)
    prev_fam = fam
    support = tilted_joint_target(fam, prior).support
    z_u = to_unconstrained(support, z_nat) if support is not None else z_nat
    warmed = False
    for k in range(cfg.max_iter):
        target = tilted_joint_target(fam, prior)
        mean_acc, ess = np.nan, None
        if cfg.mode == "mcmc":
            fn = target.unconstrained().logpdf_and_grad
            logp, grad = _init_logp_grad(fn, z_u)
            if not warmed:
                for _ in range(cfg.warmup_steps):
                    z_u, logp, grad, acc = _mala_sweep(fn, z_u, logp, grad, sigma, rng)
                    sigma = sigma * np.exp(KAPPA * (acc.astype(np.float64) - MALA_TARGET_RATE))
                warmed = True
            # per-iteration warmup: step sizes keep tracking the sharpening
            # model during the first half of each refresh, then freeze
            accs = 0.0
            adapt_until = cfg.mcmc_steps // 2
            for step in range(cfg.mcmc_steps):
                z_u, logp, grad, acc = _mala_sweep(fn, z_u, logp, grad, sigma, rng)
                if step < adapt_until:
                    sigma = sigma * np.exp(KAPPA * (acc.astype(np.float64) - MALA_TARGET_RATE))
                accs += acc.mean()
            mean_acc = accs / cfg.mcmc_steps if cfg.mcmc_steps else np.nan
            z_nat = from_unconstrained(support, z_u) if support is not None else z_u
        else:
            cloud = ParticleCloud(z_nat, weights, sigma)
            nu0 = tilted_joint_target(prev_fam, prior)
            diag = {}
            cloud, _ = smc_run(target, nu0, cloud, cfg.smc_steps,
                               cfg.smc_kernel_steps, cfg.resample_threshold,
                               rng, diag_out=diag)
            z_nat, weights, sigma = cloud.positions, cloud.weights, cloud.step_sizes
            ess = diag["ess_trajectory"][-1]
            mean_acc = diag.get("acceptance_rate", np.nan)

        Xp, THp = z_nat[:, :fam.x_dim], z_nat[:, fam.x_dim:]
        _check_alive(fam.values(Xp, THp), k)
        gd = fam.grad_params(data.xs, data.thetas, np.full(n_data, 1.0 / n_data))
        gm = fam.grad_params(Xp, THp, weights)
        if log_rows is not None:
            log_rows.append({"iter": k, "data_term_norm": float(np.linalg.norm(gd)),
                             "model_term_norm": float(np.linalg.norm(gm)),
                             "mean_acceptance": float(mean_acc) if np.isfinite(mean_acc) else "",
                             "ess": float(ess) if ess is not None else ""})
        prev_fam = fam
        adam, new_params = nets.adam_flat_step(adam, fam.params(), gd - gm)
        fam = fam.with_params(new_params)
    if return_cloud:
        return fam, ParticleCloud(z_nat, weights, sigma)
    return fam


# ---------------------------------------------------------------------------
# conditional training (SUNLE)


@dataclass
class CebmState:
    """Persistent per-datapoint particles, step sizes and optimizer state."""

    particles: np.ndarray
    sigmas: np.ndarray
    adapted: np.ndarray
    adam: nets.AdamState

    @staticmethod
    def init(data, cfg, n_params):
        n = len(data)
        return CebmState(
            particles=data.xs.copy(),
            sigmas=np.full(n, cfg.init_step_size),
            adapted=np.zeros(n, dtype=bool),
            adam=nets.AdamState.init(n_params, lr=cfg.learning_rate),
        )

    def extend(self, new_xs, cfg):
        n_new = new_xs.shape[0]
        return CebmState(
            particles=np.concatenate([self.particles, new_xs.copy()]),
            sigmas=np.concatenate([self.sigmas, np.full(n_new, cfg.init_step_size)]),
            adapted=np.concatenate([self.adapted, np.zeros(n_new, dtype=bool)]),
            adam=self.adam,
        )


@dataclass
class LzState:
    """Online log-normalizer network training state."""

    net: nets.NetParams
    adam: nets.AdamState

    @staticmethod
    def init(net, lr=0.01):
        return LzState(net, nets.AdamState.init(net.flat.size, lr=lr))


def _refresh_slots(fam, data, state, idx, cfg, rng):
    """MALA-refresh the particle slots ``idx`` at their fixed thetas."""
    TH = data.thetas[idx]
    fn = conditional_x_fn(fam, TH)
    pos = state.particles[idx].copy()
    sig = state.sigmas[idx].copy()
    logp, grad = _init_logp_grad(fn, pos)
    fresh = ~state.adapted[idx]
    if np.any(fresh):
        sub = np.nonzero(fresh)[0]
        fn_f = conditional_x_fn(fam, TH[sub])
        p_f, s_f = pos[sub], sig[sub]
        lp_f, g_f = logp[sub], grad[sub]
        for _ in range(cfg.warmup_steps):
            p_f, lp_f, g_f, acc = _mala_sweep(fn_f, p_f, lp_f, g_f, s_f, rng)
            s_f = s_f * np.exp(KAPPA * (acc.astype(np.float64) - MALA_TARGET_RATE))
        pos[sub], sig[sub] = p_f, s_f
        logp[sub], grad[sub] = lp_f, g_f
        state.adapted[idx[sub]] = True
    accs = 0.0
    adapt_until = cfg.mcmc_steps // 2
    for step in range(cfg.mcmc_steps):
        pos, logp, grad, acc = _mala_sweep(fn, pos, logp, grad, sig, rng)
        if step < adapt_until:
            sig = sig * np.exp(KAPPA * (acc.astype(np.float64) - MALA_TARGET_RATE))
        accs += acc.mean()
    state.particles[idx] = pos
    state.sigmas[idx] = sig
    return accs / cfg.mcmc_steps if cfg.mcmc_steps else np.nan


def maximize_cebm_log_l(data, e0, cfg, rng, *, state=None, lz=None, log_rows=None):
    """Maximize the average conditional log-likelihood of a conditional EBM.

    Keeps one persistent particle per data point; each iteration refreshes a
    random batch of B slots by MALA targeting q(. | theta_i) with theta_i
    held fixed, and takes an Adam step on the batch gradient estimate.
    Particles, step sizes and optimizer state persist across calls through
    ``state``; pass ``lz`` to co-train a log-normalizer network online on
    the freshly refreshed particles.
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    fam = e0
    if state is None:
        state = CebmState.init(data, cfg, fam.params().size)
    if state.particles.shape[0] < n:
        state = state.extend(data.xs[state.particles.shape[0]:], cfg)
    state.adam.lr = cfg.learning_rate
    b = cfg.batch_size if cfg.batch_size is not None else min(n, 1000)
    b = min(b, n)
    for k in range(cfg.max_iter):
        idx = np.sort(rng.choice(n, size=b, replace=False))
        mean_acc = _refresh_slots(fam, data, state, idx, cfg, rng)
        Xb, THb = data.xs[idx], data.thetas[idx]
        _check_alive(fam.values(state.particles[idx], THb), k)
        coeff = np.full(b, 1.0 / b)
        gd = fam.grad_params(Xb, THb, coeff)
        gm = fam.grad_params(state.particles[idx], THb, coeff)
        if lz is not None:
            _, _, gth = fam.values_and_grads(state.particles[idx], THb)
            _, glz = nets.net_value_and_grad_input(lz.net, THb)
            resid = glz + gth
            g_eta = nets.net_grad_params_input_jvp(lz.net, THb, resid,
                                                   np.full(b, 2.0 / b))
            lz.adam, new_net = nets.adam_flat_step(lz.adam, lz.net.flat, g_eta)
            lz.net = lz.net.with_flat(new_net)
        if log_rows is not None:
            log_rows.append({"iter": k, "data_term_norm": float(np.linalg.norm(gd)),
                             "model_term_norm": float(np.linalg.norm(gm)),
                             "mean_acceptance": float(mean_acc) if np.isfinite(mean_acc) else "",
                             "ess": ""})
        state.adam, new_params = nets.adam_flat_step(state.adam, fam.params(), gd - gm)
        fam = fam.with_params(new_params)
    return fam, state
