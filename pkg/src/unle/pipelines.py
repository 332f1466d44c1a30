"""End-to-end posterior estimators.

``aunle`` trains the tilted joint EBM and samples its standard posterior
with plain MCMC; ``sunle`` runs the multi-round conditional-EBM procedure
whose doubly intractable per-round posterior is sampled either with the
exchange sampler or with standard MCMC after fitting a log-normalizer
surrogate (``divi``).
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from unle import nets
from unle.ebm import (
    CebmState,
    EnergyModel,
    LzState,
    TrainConfig,
    maximize_cebm_log_l,
    maximize_ebm_log_l,
)
from unle.errors import TaskUnsuitableError
from unle.samplers import (
    KAPPA,
    MALA_TARGET_RATE,
    ExchangeSampler,
    UnnormalizedTarget,
    _init_logp_grad,
    _mala_sweep,
    mala_chain_samples,
)
from unle.tasks import Dataset, sample_observation


@dataclass
class SamplerConfig:
    """Posterior-sampling knobs shared by both posterior kinds."""

    chains: int = 1000
    steps: int = 200
    warmup: int = 200
    inner_steps: int = 100
    exchange_chains: int = 100
    exchange_steps: int = 400
    exchange_burnin: int = 400


@dataclass
class PipelineConfig:
    """Everything a pipeline run needs besides the task and the budget."""

    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    n_posterior: int = 1000
    divi_n: int = 1000
    divi_m: int = 5
    divi_iters: int = 500
    energy_hidden: tuple = (50, 50, 50, 50)
    lz_hidden: tuple = (50, 50, 50, 50)


@dataclass
class PosteriorModel:
    """Prior + energy (+ optional log-normalizer surrogate) posterior."""

    prior: object
    energy: object
    x_o: np.ndarray
    kind: str                      # "standard" | "doubly_intractable"
    lz_net: nets.NetParams = None

    def __post_init__(self):
        if self.kind not in ("standard", "doubly_intractable"):
            raise ValueError("kind must be 'standard' or 'doubly_intractable'")
        self.x_o = np.asarray(self.x_o, dtype=np.float64).ravel()

    @property
    def theta_dim(self):
        return self.energy.theta_dim

    @property
    def x_dim(self):
        return self.energy.x_dim

    # --- standard-posterior sampling target ------------------------------
    def target(self):
        if self.kind != "standard":
            raise ValueError("doubly intractable posteriors have no standard target")
        x_o = self.x_o

        def fn(thetas):
            thetas = np.atleast_2d(thetas)
            xo = np.tile(x_o, (thetas.shape[0], 1))
            v, _, gth = self.energy.values_and_grads(xo, thetas)
            lp = self.prior.logpdf_batch(thetas) - v
            g = self.prior.grad_logpdf_batch(thetas) - gth
            if self.lz_net is not None:
                lz, glz = nets.net_value_and_grad_input(self.lz_net, thetas)
                lp = lp - lz
                g = g - glz
            return lp, g

        return UnnormalizedTarget(self.theta_dim, fn, support=self.prior.support)

    # --- exchange-sampler interface --------------------------------------
    def prior_logpdf_batch(self, thetas):
        return self.prior.logpdf_batch(thetas)

    def energy_batch(self, X, TH):
        return self.energy.values(X, TH)

    def energy_and_gradx_batch(self, X, TH):
        v, gx, _ = self.energy.values_and_grads(X, TH)
        return v, gx


@dataclass
class RoundRecord:
    """Everything produced by one simulation-training-inference round."""

    round_index: int
    n_new: int
    energy: object
    posterior_samples: np.ndarray
    dataset: object = None          # the round's new (theta, x) pairs
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    train_log: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    lz_net: nets.NetParams = None


# ---------------------------------------------------------------------------
# simulation with failure accounting


def simulate_batch_checked(task, thetas, rng, budget_for_errors=None):
    """Simulate each theta; drop invalid draws, raising when they dominate."""
    x, valid = task.simulate_batch(thetas, rng)
    n_bad = int((~valid).sum())
    limit = budget_for_errors if budget_for_errors is not None else thetas.shape[0]
    if n_bad > 0.5 * limit:
        raise TaskUnsuitableError(
            f"{n_bad} of {thetas.shape[0]} simulations invalid for task {task.name}")
    return thetas[valid], x[valid]


# ---------------------------------------------------------------------------
# posterior sampling


def posterior_sample(posterior, n, cfg, rng, *, init=None, diag_out=None):
    """Draw n parameters from a posterior model.

    Standard posteriors run parallel adaptive MALA chains; doubly
    intractable ones run exchange chains.  ``init`` warm-starts the chains
    when provided.
    """
    if n == 0:
        return np.empty((0, posterior.theta_dim))
    if posterior.kind == "standard":
        c = min(n, cfg.chains)
        start = _warm_start(posterior, init, c, rng)
        n_collect = -(-n // c)
        thin = max(1, cfg.steps // n_collect)
        samples = mala_chain_samples(posterior.target(), start, cfg.steps,
                                     cfg.warmup, thin, rng, diag_out=diag_out)
        return samples[-n:]
    c = min(n, cfg.exchange_chains)
    start = _warm_start(posterior, init, c, rng)
    scale = None
    if posterior.prior.support is not None:
        scale = 0.1 * (posterior.prior.support.hi - posterior.prior.support.lo)
    sampler = ExchangeSampler(posterior, start, inner_steps=cfg.inner_steps,
                              prop_scale=scale)
    n_collect = -(-n // c)
    thin = max(1, cfg.exchange_steps // n_collect)
    samples = sampler.run(cfg.exchange_steps, cfg.exchange_burnin, rng, thin=thin)
    if diag_out is not None:
        diag_out.update(sampler.diagnostics())
    return samples[-n:]


def _warm_start(posterior, init, c, rng):
    if init is not None and len(init) > 0:
        init = np.atleast_2d(init)
        idx = rng.choice(init.shape[0], size=c, replace=init.shape[0] < c)
        return init[idx]
    return posterior.prior.sample(c, rng)


# ---------------------------------------------------------------------------
# DIVI


def divi(posterior, proposal_sample, n, M, inner_steps, eta0, rng, *,
         iters=500, lr=0.01, init_x=None, loss_out=None):
    """Fit a log-normalizer surrogate and return the standard posterior.

    Draws n proposal parameters, approximates M likelihood draws per
    parameter with inner MALA chains, then fits the surrogate by matching
    its input gradient to minus the averaged energy gradients (Adam on the
    squared residual).
    """
    if n < 1:
        raise ValueError("divi needs at least one proposal sample")
    if M < 1:
        raise ValueError("divi needs at least one likelihood draw per sample")
    thetas = np.atleast_2d(proposal_sample(n, rng))
    th_rep = np.repeat(thetas, M, axis=0)
    if init_x is not None and len(init_x) > 0:
        init_x = np.atleast_2d(init_x)
        idx = rng.choice(init_x.shape[0], size=n * M, replace=init_x.shape[0] < n * M)
        x0 = init_x[idx]
    else:
        x0 = np.tile(posterior.x_o, (n * M, 1))

    def fn(X):
        v, gx = posterior.energy_and_gradx_batch(X, th_rep)
        return -v, -gx

    pos = x0.astype(np.float64).copy()
    sigma = np.full(n * M, 0.5)
    logp, grad = _init_logp_grad(fn, pos)
    adapt_until = inner_steps // 2
    for t in range(inner_steps):
        pos, logp, grad, acc = _mala_sweep(fn, pos, logp, grad, sigma, rng)
        if t < adapt_until:
            sigma = sigma * np.exp(KAPPA * (acc.astype(np.float64) - MALA_TARGET_RATE))

    _, _, gth = posterior.energy.values_and_grads(pos, th_rep)
    signal = gth.reshape(n, M, -1).mean(axis=1)

    lz = eta0
    adam = nets.AdamState.init(lz.flat.size, lr=lr)
    for _ in range(iters):
        _, glz = nets.net_value_and_grad_input(lz, thetas)
        resid = glz + signal
        if loss_out is not None:
            loss_out.append(float(np.mean(np.sum(resid * resid, axis=1))))
        g_eta = nets.net_grad_params_input_jvp(lz, thetas, resid, np.full(n, 2.0 / n))
        adam, flat = nets.adam_flat_step(adam, lz.flat, g_eta)
        lz = lz.with_flat(flat)
    return replace(posterior, kind="standard", lz_net=lz)


def divi_loss(lz, posterior, thetas, xs_per_theta):
    """Gradient-matching loss of a surrogate on given (theta, x draws)."""
    n, M, _ = xs_per_theta.shape
    th_rep = np.repeat(thetas, M, axis=0)
    _, _, gth = posterior.energy.values_and_grads(
        xs_per_theta.reshape(n * M, -1), th_rep)
    signal = gth.reshape(n, M, -1).mean(axis=1)
    _, glz = nets.net_value_and_grad_input(lz, thetas)
    resid = glz + signal
    return float(np.mean(np.sum(resid * resid, axis=1)))


def divi_online(data, e0, eta0, cfg, rng, *, state=None, enable_lz=True):
    """Conditional-EBM training that recycles fresh particles to co-train
    the log-normalizer network; returns (energy, lz_net)."""
    lz = LzState.init(eta0, lr=cfg.learning_rate) if enable_lz else None
    fam, state = maximize_cebm_log_l(data, e0, cfg, rng, state=state, lz=lz)
    return fam, (lz.net if lz is not None else eta0)


# ---------------------------------------------------------------------------
# AUNLE


def aunle(task, budget, cfg, rng_or_seed, *, x_o=None, record_out=None):
    """Amortized pipeline: simulate from the prior, train the tilted joint
    EBM, sample the resulting standard posterior by MCMC."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    ss = _as_seedseq(rng_or_seed)
    rng_sim, rng_train, rng_infer = (np.random.Generator(np.random.PCG64(s))
                                     for s in ss.spawn(3))
    if x_o is None:
        _, x_o = sample_observation(task, 0)

    t0 = time.perf_counter()
    thetas, xs = _simulate_budget(task, budget, rng_sim)
    t_sim = time.perf_counter() - t0

    data = Dataset(thetas, xs, np.zeros(len(thetas), dtype=np.int64))
    e0 = EnergyModel.init(task.x_dim, task.theta_dim, rng_train,
                          hidden=cfg.energy_hidden)
    log_rows = []
    t0 = time.perf_counter()
    fam = maximize_ebm_log_l(data, e0, task.prior, cfg.train, rng_train,
                             log_rows=log_rows)
    t_train = time.perf_counter() - t0

    posterior = PosteriorModel(task.prior, fam, x_o, "standard")
    diag = {}
    t0 = time.perf_counter()
    samples = posterior_sample(posterior, cfg.n_posterior, cfg.sampler,
                               rng_infer, diag_out=diag)
    t_infer = time.perf_counter() - t0
    if record_out is not None:
        record_out.append(RoundRecord(
            0, len(data), fam, samples, dataset=data,
            timings={"train_s": t_train, "simulate_s": t_sim, "infer_s": t_infer},
            train_log=log_rows, diagnostics=diag))
    return posterior, samples


def _as_seedseq(rng_or_seed):
    if isinstance(rng_or_seed, np.random.SeedSequence):
        return rng_or_seed
    if isinstance(rng_or_seed, (int, np.integer)):
        return np.random.SeedSequence(int(rng_or_seed))
    # a Generator: derive a child sequence from its stream
    return np.random.SeedSequence(int(rng_or_seed.integers(2 ** 63 - 1)))


def _simulate_budget(task, n, rng):
    thetas_all, xs_all = [], []
    got, bad = 0, 0
    while got < n:
        want = n - got
        th = task.prior.sample(want, rng)
        x, valid = task.simulate_batch(th, rng)
        bad += int((~valid).sum())
        if bad > 0.5 * n:
            raise TaskUnsuitableError(
                f"{bad} invalid simulations against a budget of {n} for {task.name}")
        thetas_all.append(th[valid])
        xs_all.append(x[valid])
        got += int(valid.sum())
    return (np.concatenate(thetas_all)[:n], np.concatenate(xs_all)[:n])


# ---------------------------------------------------------------------------
# SUNLE


def sunle(task, budget, rounds, cfg, inference_mode, rng_or_seed, *, x_o=None,
          record_out=None, metrics_fn=None):
    """Sequential pipeline with per-round conditional-EBM training.

    inference_mode "exchange" samples the doubly intractable posterior
    directly; "divi" fits the log-normalizer surrogate each round and
    samples the corrected standard posterior by MCMC.  Energy parameters,
    optimizer state, per-datapoint particles and the surrogate are all
    warm-started across rounds.
    """
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    if budget < rounds:
        raise ValueError("budget must be at least the number of rounds")
    if inference_mode not in ("exchange", "divi"):
        raise ValueError("inference_mode must be 'exchange' or 'divi'")
    ss = _as_seedseq(rng_or_seed)
    round_seeds = ss.spawn(rounds)
    if x_o is None:
        _, x_o = sample_observation(task, 0)

    per_round = [budget // rounds] * rounds
    per_round[0] += budget - sum(per_round)

    data = Dataset.empty(task.theta_dim, task.x_dim)
    fam = None
    state = None
    lz_net = None
    posterior = None
    prev_samples = None
    records = []
    for r in range(rounds):
        rng_sim, rng_train, rng_infer, rng_divi = (
            np.random.Generator(np.random.PCG64(s)) for s in round_seeds[r].spawn(4))

        t0 = time.perf_counter()
        if r == 0:
            thetas = task.prior.sample(per_round[0], rng_sim)
        else:
            thetas = prev_samples[:per_round[r]]
        thetas, xs = simulate_batch_checked(task, thetas, rng_sim,
                                            budget_for_errors=per_round[r])
        data = data.append(thetas, xs, r)
        t_sim = time.perf_counter() - t0

        if fam is None:
            fam = EnergyModel.init(task.x_dim, task.theta_dim, rng_train,
                                   hidden=cfg.energy_hidden)
        log_rows = []
        t0 = time.perf_counter()
        fam, state = maximize_cebm_log_l(data, fam, cfg.train, rng_train,
                                         state=state, log_rows=log_rows)
        t_train = time.perf_counter() - t0

        posterior = PosteriorModel(task.prior, fam, x_o, "doubly_intractable")
        diag = {}
        t0 = time.perf_counter()
        n_draw = max(cfg.n_posterior, per_round[r + 1] if r + 1 < rounds else 0)
        if inference_mode == "divi":
            if prev_samples is not None:
                pool = prev_samples

                def proposal(k, g, _pool=pool):
                    return _pool[g.choice(_pool.shape[0], size=k, replace=True)]
            else:
                def proposal(k, g):
                    return task.prior.sample(k, g)
            if lz_net is None:
                lz_net = nets.net_init((task.theta_dim, *cfg.lz_hidden, 1),
                                       "swish", rng_divi)
            posterior = divi(posterior, proposal, cfg.divi_n, cfg.divi_m,
                             cfg.sampler.inner_steps, lz_net, rng_divi,
                             iters=cfg.divi_iters, lr=cfg.train.learning_rate,
                             init_x=state.particles)
            lz_net = posterior.lz_net
        samples = posterior_sample(posterior, n_draw, cfg.sampler, rng_infer,
                                   init=prev_samples, diag_out=diag)
        t_infer = time.perf_counter() - t0

        rec = RoundRecord(
            r, len(thetas), fam, samples,
            dataset=Dataset(thetas, xs, np.full(len(thetas), r, dtype=np.int64)),
            timings={"train_s": t_train, "simulate_s": t_sim, "infer_s": t_infer},
            train_log=log_rows, diagnostics=diag, lz_net=lz_net)
        if metrics_fn is not None:
            rec.metrics = metrics_fn(r, samples)
        records.append(rec)
        prev_samples = samples
    if record_out is not None:
        record_out.extend(records)
    return posterior, records
