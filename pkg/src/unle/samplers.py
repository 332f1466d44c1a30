"""Monte Carlo machinery: adaptive MALA chains, a warm-startable SMC sampler
over a geometric bridge, and an exchange-style sampler for doubly
intractable posteriors.

All densities are handled in batched form: a target's callback maps an
(N, d) array of positions to N log-density values and an (N, d) array of
gradients.  Box-constrained coordinates are moved to unconstrained space
with a logit transform (log-Jacobian included) before any Langevin move.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from unle.errors import DegenerateBridgeError, SamplerFailure

KAPPA = 0.05
MALA_TARGET_RATE = 0.5
RW_TARGET_RATE = 0.234


# ---------------------------------------------------------------------------
# support boxes and the unconstraining transform


@dataclass(frozen=True)
class Box:
    """Per-coordinate bounds; +-inf entries mark unbounded coordinates."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("box bounds must satisfy lo < hi coordinate-wise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def bounded(self):
        return np.isfinite(self.lo) & np.isfinite(self.hi)

    def contains(self, x):
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)


def _sigmoid(y):
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    ey = np.exp(y[~pos])
    out[~pos] = ey / (1.0 + ey)
    return out


def to_unconstrained(box, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = x.copy()
    m = box.bounded
    u = (x[:, m] - box.lo[m]) / (box.hi[m] - box.lo[m])
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    y[:, m] = np.log(u) - np.log1p(-u)
    return y


def from_unconstrained(box, y):
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    x = y.copy()
    m = box.bounded
    x[:, m] = box.lo[m] + (box.hi[m] - box.lo[m]) * _sigmoid(y[:, m])
    return x


def _logjac_and_grad(box, y):
    # log |dx/dy| summed over coordinates, and its gradient in y
    m = box.bounded
    ym = y[:, m]
    # log sigmoid(y) + log sigmoid(-y) = -softplus(-y) - softplus(y)
    sp = np.logaddexp(0.0, ym) + np.logaddexp(0.0, -ym)
    logjac = np.sum(np.log(box.hi[m] - box.lo[m]) - sp, axis=1)
    grad = np.zeros_like(y)
    grad[:, m] = 1.0 - 2.0 * _sigmoid(ym)
    return logjac, grad


# ---------------------------------------------------------------------------
# targets


@dataclass
class UnnormalizedTarget:
    """Log-density known up to a constant, with gradient, batched.

    ``logpdf_and_grad`` maps an (N, dim) array to ((N,), (N, dim)).
    ``support`` marks box constraints handled by the samplers via the
    logit transform.
    """

    dim: int
    logpdf_and_grad: object
    support: Box = None

    def logpdf(self, x):
        return self.logpdf_and_grad(np.atleast_2d(x))[0]

    def grad(self, x):
        return self.logpdf_and_grad(np.atleast_2d(x))[1]

    def unconstrained(self):
        """The same distribution expressed on R^dim (Jacobian folded in)."""
        if self.support is None:
            return self
        box = self.support
        base = self.logpdf_and_grad

        def fn(y):
            y = np.atleast_2d(y)
            x = from_unconstrained(box, y)
            lp, g = base(x)
            logjac, gj = _logjac_and_grad(box, y)
            m = box.bounded
            dxdy = np.ones_like(y)
            s = _sigmoid(y[:, m])
            dxdy[:, m] = (box.hi[m] - box.lo[m]) * s * (1.0 - s)
            return lp + logjac, g * dxdy + gj

        return UnnormalizedTarget(self.dim, fn, support=None)


def check_gradient(target, points, h=1e-6):
    """Max relative error of the target's gradient vs central differences."""
    points = np.atleast_2d(points)
    _, grad = target.logpdf_and_grad(points)
    worst = 0.0
    for i, p in enumerate(points):
        for j in range(points.shape[1]):
            e = np.zeros_like(p)
            e[j] = h
            fd = (target.logpdf(p + e)[0] - target.logpdf(p - e)[0]) / (2 * h)
            denom = max(abs(fd), abs(grad[i, j]), 1e-8)
            worst = max(worst, abs(fd - grad[i, j]) / denom)
    return worst


# ---------------------------------------------------------------------------
# particle clouds


@dataclass
class ParticleCloud:
    """Weighted particle set with per-particle step sizes."""

    positions: np.ndarray
    weights: np.ndarray
    step_sizes: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.step_sizes = np.asarray(self.step_sizes, dtype=np.float64)
        n = self.positions.shape[0]
        if n < 1:
            raise ValueError("a particle cloud needs at least one particle")
        if self.weights.shape != (n,) or self.step_sizes.shape != (n,):
            raise ValueError("weights / step sizes do not match particle count")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite particle positions")

    @staticmethod
    def from_points(points, step_size=0.5):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        return ParticleCloud(points, np.full(n, 1.0 / n), np.full(n, float(step_size)))

    @property
    def n(self):
        return self.positions.shape[0]

    def ess(self):
        return 1.0 / np.sum(self.weights ** 2)


def systematic_resample(weights, rng):
    """Systematic resampling; returns the selected particle indices."""
    n = weights.shape[0]
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    u = (rng.random() + np.arange(n)) / n
    return np.searchsorted(cum, u)


# ---------------------------------------------------------------------------
# MALA


@dataclass
class ChainState:
    """One chain: position, step size and acceptance bookkeeping."""

    position: np.ndarray
    sigma: float = 0.5
    accepted: int = 0
    proposed: int = 0
    frozen: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.sigma <= 0:
            raise ValueError("step size must be positive")


def _drift(grad, sigma):
    # Langevin drift with its norm capped at 2 sigma sqrt(d): far from the
    # mode the raw drift overshoots and the chain oscillates outward; the
    # cap keeps proposals local (the MH correction below uses the tamed
    # drift on both sides, so detailed balance is exact)
    s = sigma[:, None]
    d = 0.5 * s * s * grad
    cap = 2.0 * sigma * np.sqrt(grad.shape[1])
    norm = np.sqrt(np.sum(d * d, axis=1))
    scale = np.where(norm > cap, cap / np.maximum(norm, 1e-300), 1.0)
    return d * scale[:, None]


def _mala_sweep(fn, pos, logp, grad, sigma, rng):
    """One MALA update of every row; returns new arrays and accept mask."""
    s = sigma[:, None]
    xi = rng.standard_normal(pos.shape)
    prop = pos + _drift(grad, sigma) + s * xi
    logp_p, grad_p = fn(prop)
    ok = (
        np.isfinite(logp_p)
        & np.all(np.isfinite(grad_p), axis=1)
        & np.all(np.isfinite(prop), axis=1)
    )
    logp_p = np.where(ok, logp_p, -np.inf)
    grad_p = np.where(ok[:, None], grad_p, 0.0)
    # proposal densities (per-particle sigma identical both ways, constants cancel)
    fwd = -0.5 * np.sum(xi * xi, axis=1)
    back = -np.sum((pos - prop - _drift(grad_p, sigma)) ** 2, axis=1) / (2.0 * sigma ** 2)
    log_alpha = logp_p - logp + back - fwd
    accept = ok & (np.log(rng.random(pos.shape[0])) < log_alpha)
    a = accept[:, None]
    return (
        np.where(a, prop, pos),
        np.where(accept, logp_p, logp),
        np.where(a, grad_p, grad),
        accept,
    )


def mala_step(target, s, rng):
    """One Metropolis-adjusted Langevin step of a single chain.

    The target must be differentiable everywhere at the chain's position
    (use ``target.unconstrained()`` for box-supported targets).
    """
    fn = target.logpdf_and_grad
    pos = s.position[None, :]
    logp, grad = fn(pos)
    grad = np.where(np.isfinite(grad), grad, 0.0)
    new_pos, _, _, accept = _mala_sweep(fn, pos, logp, grad, np.array([s.sigma]), rng)
    return replace(
        s,
        position=new_pos[0],
        accepted=s.accepted + int(accept[0]),
        proposed=s.proposed + 1,
    )


def adapt_step(s, target_rate=MALA_TARGET_RATE, kappa=KAPPA):
    """Multiplicative step-size update from the observed acceptance rate."""
    if s.frozen:
        raise ValueError("cannot adapt a frozen chain")
    rate = s.accepted / s.proposed if s.proposed > 0 else target_rate
    return replace(s, sigma=s.sigma * math.exp(kappa * (rate - target_rate)),
                   accepted=0, proposed=0)


def _init_logp_grad(fn, pos):
    logp, grad = fn(pos)
    grad = np.where(np.isfinite(grad), grad, 0.0)
    return logp, grad


def run_chains(target, init, n_steps, warmup_steps, rng, *, target_rate=MALA_TARGET_RATE,
               kappa=KAPPA, diag_out=None):
    """Evolve every particle of ``init`` as an independent adaptive MALA chain.

    Step sizes adapt during warmup only, then the chains are frozen.  The
    returned cloud has uniform weights and carries the adapted step sizes.
    """
    if init.n < 1:
        raise ValueError("empty initial cloud")
    tgt = target.unconstrained()
    fn = tgt.logpdf_and_grad
    pos = init.positions
    if target.support is not None:
        pos = to_unconstrained(target.support, pos)
    pos = np.array(pos, dtype=np.float64)
    sigma = init.step_sizes.copy()
    logp, grad = _init_logp_grad(fn, pos)
    if not np.any(np.isfinite(logp)):
        raise SamplerFailure("no chain has finite initial log-density",
                             {"n_chains": init.n})
    accepted = np.zeros(init.n)
    for _ in range(warmup_steps):
        pos, logp, grad, acc = _mala_sweep(fn, pos, logp, grad, sigma, rng)
        sigma = sigma * np.exp(kappa * (acc.astype(np.float64) - target_rate))
    for _ in range(n_steps):
        pos, logp, grad, acc = _mala_sweep(fn, pos, logp, grad, sigma, rng)
        accepted += acc
    if not np.any(np.isfinite(logp)):
        raise SamplerFailure("all chains diverged", {"n_chains": init.n})
    if diag_out is not None:
        diag_out["acceptance_rate"] = float(accepted.mean() / n_steps) if n_steps else None
        diag_out["step_size_mean"] = float(sigma.mean())
        diag_out["step_size_min"] = float(sigma.min())
        diag_out["step_size_max"] = float(sigma.max())
    if target.support is not None:
        pos = from_unconstrained(target.support, pos)
    return ParticleCloud(pos, np.full(init.n, 1.0 / init.n), sigma)


def mala_chain_samples(target, init_positions, n_steps, warmup_steps, thin, rng,
                       *, diag_out=None):
    """Long-run MALA returning pooled post-warmup states of every chain."""
    tgt = target.unconstrained()
    fn = tgt.logpdf_and_grad
    pos = np.atleast_2d(np.asarray(init_positions, dtype=np.float64))
    if target.support is not None:
        pos = to_unconstrained(target.support, pos)
    n = pos.shape[0]
    sigma = np.full(n, 0.5)
    logp, grad = _init_logp_grad(fn, pos)
    accepted = 0.0
    out = []
    for _ in range(warmup_steps):
        pos, logp, grad, acc = _mala_sweep(fn, pos, logp, grad, sigma, rng)
        sigma = sigma * np.exp(KAPPA * (acc.astype(np.float64) - MALA_TARGET_RATE))
    for t in range(n_steps):
        pos, logp, grad, acc = _mala_sweep(fn, pos, logp, grad, sigma, rng)
        accepted += acc.mean()
        if (t + 1) % thin == 0:
            out.append(pos.copy())
    if diag_out is not None:
        diag_out["acceptance_rate"] = accepted / n_steps if n_steps else None
        diag_out["step_size_mean"] = float(sigma.mean())
    samples = np.concatenate(out, axis=0) if out else np.empty((0, pos.shape[1]))
    if target.support is not None and samples.size:
        samples = from_unconstrained(target.support, samples)
    return samples


# ---------------------------------------------------------------------------
# SMC sampler over a geometric bridge


def smc_run(target, nu0, cloud0, L, kernel_steps, resample_threshold, rng, *,
            kappa=KAPPA, target_rate=MALA_TARGET_RATE, diag_out=None):
    """Bridge from ``nu0`` (approximated by ``cloud0``) to ``target``.

    Runs L reweight / resample / move stages along the geometric path
    nu_l ∝ nu0^(1-l/L) * target^(l/L); resampling is systematic and
    triggered when ESS < resample_threshold * N.  Returns the final cloud
    and the running estimate of log(Z_target / Z_nu0).
    """
    n = cloud0.n
    if not (1.0 / n <= resample_threshold < 1.0):
        raise ValueError("resample threshold must lie in [1/N, 1)")
    t_u = target.unconstrained()
    n_u = nu0.unconstrained()
    pos = cloud0.positions
    if target.support is not None:
        pos = to_unconstrained(target.support, pos)
    pos = np.array(pos, dtype=np.float64)
    sigma = cloud0.step_sizes.copy()
    w = cloud0.weights.copy()
    w = w / w.sum()

    lt, gt = t_u.logpdf_and_grad(pos)
    ln, gn = n_u.logpdf_and_grad(pos)
    log_ratio = 0.0
    ess_traj = []
    n_resample = 0
    acc_sum, acc_count = 0.0, 0
    for stage in range(1, L + 1):
        beta = stage / L
        inc = (lt - ln) / L
        inc = np.where(np.isfinite(inc), inc, -np.inf)
        if np.ptp(inc) == 0.0 and np.isfinite(inc[0]):
            # uniform increments: the stage ratio is the common value exactly
            log_ratio += inc[0]
            logw = np.log(w)
        else:
            with np.errstate(divide="ignore"):
                logw = np.log(w) + inc
            m = logw.max()
            if not np.isfinite(m):
                raise DegenerateBridgeError(stage)
            log_ratio += m + np.log(np.sum(np.exp(logw - m)))
        m = logw.max()
        w = np.exp(logw - m)
        w = w / w.sum()
        ess = 1.0 / np.sum(w ** 2)
        ess_traj.append(float(ess))
        if ess < resample_threshold * n:
            idx = systematic_resample(w, rng)
            pos, lt, ln, gt, gn, sigma = (a[idx] for a in (pos, lt, ln, gt, gn, sigma))
            w = np.full(n, 1.0 / n)
            n_resample += 1

        def fn(x, _b=beta):
            lt_, gt_ = t_u.logpdf_and_grad(x)
            ln_, gn_ = n_u.logpdf_and_grad(x)
            return (1 - _b) * ln_ + _b * lt_, (1 - _b) * gn_ + _b * gt_

        logp = (1 - beta) * ln + beta * lt
        grad = np.where(np.isfinite((1 - beta) * gn + beta * gt),
                        (1 - beta) * gn + beta * gt, 0.0)
        for _ in range(kernel_steps):
            pos, logp, grad, acc = _mala_sweep(fn, pos, logp, grad, sigma, rng)
            sigma = sigma * np.exp(kappa * (acc.astype(np.float64) - target_rate))
            acc_sum += acc.mean()
            acc_count += 1
        lt, gt = t_u.logpdf_and_grad(pos)
        ln, gn = n_u.logpdf_and_grad(pos)
    if diag_out is not None:
        diag_out["ess_trajectory"] = ess_traj
        diag_out["n_resample"] = n_resample
        diag_out["step_size_mean"] = float(sigma.mean())
        diag_out["acceptance_rate"] = acc_sum / acc_count if acc_count else None
    if target.support is not None:
        pos = from_unconstrained(target.support, pos)
    return ParticleCloud(pos, w, sigma), float(log_ratio)


# ---------------------------------------------------------------------------
# exchange sampler for doubly intractable posteriors


class ExchangeSampler:
    """Vectorized exchange-algorithm chains.

    ``posterior`` must expose ``theta_dim``, ``x_dim``, ``x_o``,
    ``prior_logpdf_batch(thetas)``, ``energy_batch(X, TH)`` and
    ``energy_and_gradx_batch(X, TH)``.  A proposed theta outside the prior
    support is rejected without spending inner sampling.  The auxiliary
    likelihood chains persist across steps (warm starts).
    """

    def __init__(self, posterior, thetas0, inner_steps=100, prop_scale=None,
                 inner_sigma=0.5):
        self.post = posterior
        self.thetas = np.atleast_2d(np.asarray(thetas0, dtype=np.float64)).copy()
        self.n_chains = self.thetas.shape[0]
        self.inner_steps = int(inner_steps)
        self.aux = np.tile(np.asarray(posterior.x_o, dtype=np.float64),
                           (self.n_chains, 1))
        if prop_scale is None:
            prop_scale = 0.25 * np.ones(posterior.theta_dim)
        self.prop_scale = np.tile(np.asarray(prop_scale, dtype=np.float64),
                                  (self.n_chains, 1))
        self.inner_sigma = np.full(self.n_chains, float(inner_sigma))
        self.adapting = True
        self.prior_lp = posterior.prior_logpdf_batch(self.thetas)
        xo = np.tile(np.asarray(posterior.x_o, dtype=np.float64), (self.n_chains, 1))
        self._xo = xo
        self.e_obs = posterior.energy_batch(xo, self.thetas)
        self.accepted = np.zeros(self.n_chains)
        self.proposed = 0

    def freeze(self):
        self.adapting = False

    def _inner_sample(self, thetas, idx, rng):
        """inner_steps MALA moves on x targeting exp(-E(x, theta)) per row."""
        th = thetas[idx]

        def fn(x):
            e, g = self.post.energy_and_gradx_batch(x, th)
            return -e, -g

        pos = self.aux[idx].copy()
        sigma = self.inner_sigma[idx].copy()
        logp, grad = _init_logp_grad(fn, pos)
        for _ in range(self.inner_steps):
            pos, logp, grad, acc = _mala_sweep(fn, pos, logp, grad, sigma, rng)
            # the inner chain is an approximate sampler either way; keep its
            # step size adapting so it tracks the moving conditional target
            sigma = sigma * np.exp(KAPPA * (acc.astype(np.float64) - MALA_TARGET_RATE))
        self.inner_sigma[idx] = sigma
        return pos

    def step(self, rng):
        """One exchange update of every chain; returns the new thetas."""
        prop = self.thetas + self.prop_scale * rng.standard_normal(self.thetas.shape)
        prior_prop = self.post.prior_logpdf_batch(prop)
        ok = np.isfinite(prior_prop)
        accept = np.zeros(self.n_chains, dtype=bool)
        if np.any(ok):
            idx = np.nonzero(ok)[0]
            x_aux = self._inner_sample(prop, idx, rng)
            th_prop = prop[idx]
            th_cur = self.thetas[idx]
            e_obs_prop = self.post.energy_batch(self._xo[idx], th_prop)
            e_aux_cur = self.post.energy_batch(x_aux, th_cur)
            e_aux_prop = self.post.energy_batch(x_aux, th_prop)
            log_r = (
                -e_obs_prop + self.e_obs[idx] - e_aux_cur + e_aux_prop
                + prior_prop[idx] - self.prior_lp[idx]
            )
            acc_sub = np.log(rng.random(idx.size)) < log_r
            self.aux[idx] = x_aux
            sel = idx[acc_sub]
            self.thetas[sel] = prop[sel]
            self.prior_lp[sel] = prior_prop[sel]
            self.e_obs[sel] = e_obs_prop[acc_sub]
            accept[sel] = True
        self.proposed += 1
        self.accepted += accept
        if self.adapting:
            self.prop_scale = self.prop_scale * np.exp(
                KAPPA * (accept.astype(np.float64) - RW_TARGET_RATE))[:, None]
        return self.thetas.copy()

    def run(self, n_steps, burn_in, rng, thin=1):
        """Burn in (with adaptation), then collect every ``thin`` steps."""
        for _ in range(burn_in):
            self.step(rng)
        self.freeze()
        self.accepted[:] = 0
        self.proposed = 0
        out = []
        for t in range(n_steps):
            th = self.step(rng)
            if (t + 1) % thin == 0:
                out.append(th)
        if not out:
            return np.empty((0, self.post.theta_dim))
        return np.concatenate(out, axis=0)

    def diagnostics(self):
        rate = self.accepted / self.proposed if self.proposed else self.accepted * 0.0
        return {
            "acceptance_rate": float(np.mean(rate)),
            "prop_scale_mean": float(self.prop_scale.mean()),
            "inner_sigma_mean": float(self.inner_sigma.mean()),
        }


def exchange_step(posterior, theta_current, x_o, inner_steps, rng, state=None):
    """One exchange-algorithm update of a single chain.

    Returns (theta_next, state); pass the returned state back in to persist
    the auxiliary chain and adapted scales across calls.
    """
    if state is None:
        state = ExchangeSampler(posterior, np.atleast_2d(theta_current),
                                inner_steps=inner_steps)
    th = state.step(rng)
    return th[0], state
