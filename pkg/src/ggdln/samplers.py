"""Finite-width validation by sampling: gradient descent and Langevin.

Gradient descent trains ensembles of networks on the full-batch MSE (no
weight decay), stopping when the training MSE falls below a threshold.
Langevin dynamics adds the prior-matched drift and noise,

    dTheta = -eps * dE/dTheta + sqrt(2 eps T) eta,
    E = 1/2 sum_mu (f(x_mu) - Y_mu)^2 + T/(2 sigma^2) Theta.Theta,

whose stationary distribution is the Bayesian posterior the theory
describes. The readout second moment ``<a a'/N>`` estimated from Langevin
snapshots is the external oracle for the solved order parameter.

Single-hidden-layer ensembles run through a seed-batched engine (one fused
matmul per step for all seeds); deeper networks fall back to a generic
per-seed loop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset
from .errors import DimensionMismatch, Diverged, TooFewSamples
from .gatings import GatingFamily, evaluate
from .gp import PredictorStats
from .network import Architecture, Params, forward, init_params

__all__ = [
    "TrainConfig",
    "TrainRun",
    "gd_train",
    "langevin_sample",
    "langevin_readout_snapshots",
    "estimate_readout_covariance",
    "ensemble_predictor_stats",
]

DIVERGENCE_FACTOR = 1e6
LR_GROWTH = 1.1


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    max_steps: int = 5000
    stop_train_mse: float = 1e-3
    temperature: float = 1e-2   # Langevin only
    burn_in: int = 2000
    thinning: int = 10
    n_seeds: int = 20

    def __post_init__(self):
        if self.max_steps < 1 or self.thinning < 1 or self.n_seeds < 1:
            raise DimensionMismatch("max_steps, thinning and n_seeds must be positive")

    def check_sampling(self):
        """Langevin-specific invariant: snapshots must exist."""
        if self.burn_in >= self.max_steps:
            raise DimensionMismatch("burn_in must be smaller than max_steps")


@dataclass
class TrainRun:
    params: Params
    steps: int
    final_mse: float
    converged: bool
    seed_index: int


def _derived_seed(base_seed: int, index: int):
    return np.random.SeedSequence(entropy=(int(base_seed), int(index)))


def _stacked_init(arch, base_seed, n_seeds):
    w1, av = [], []
    for k in range(n_seeds):
        rng = np.random.default_rng(_derived_seed(base_seed, k))
        s = arch.prior_scale
        w1.append(s * rng.standard_normal((arch.width, arch.input_dim)))
        av.append(s * rng.standard_normal((arch.n_gates, arch.width)))
    return np.stack(w1), np.stack(av)


class _BatchedSingleLayer:
    """Fused forward/gradient evaluation for stacked single-layer ensembles."""

    def __init__(self, arch, g, x, y):
        self.arch = arch
        self.g = g                       # (M, P)
        self.x = x                       # (P, N0)
        self.y = y                       # (P,)
        self.out_scale = 1.0 / np.sqrt(arch.width * arch.n_gates)
        self.in_scale = 1.0 / np.sqrt(arch.input_dim)

    def outputs(self, w1, a):
        h = np.matmul(w1, self.x.T) * self.in_scale          # (S, N, P)
        f = np.einsum("smi,sip,mp->sp", a, h, self.g, optimize=True)
        return f * self.out_scale, h

    def grads(self, w1, a, h, coeff):
        """Gradients of sum_p coeff[s,p] * f_s(x_p) for each seed."""
        abar = np.einsum("smi,mp->sip", a, self.g, optimize=True)  # (S, N, P)
        delta = abar * coeff[:, None, :] * self.out_scale
        d_w1 = np.matmul(delta, self.x) * self.in_scale            # (S, N, N0)
        d_a = np.einsum("sp,mp,sip->smi", coeff, self.g, h, optimize=True) * self.out_scale
        return d_w1, d_a


def _pack_params(arch, w1, a):
    return Params(w1.copy(), [], a.copy())


def gd_train(dataset: Dataset, family: GatingFamily, arch: Architecture,
             cfg: TrainConfig, base_seed: int, hidden_norm: str = "width"):
    """Full-batch gradient descent ensemble on the training MSE.

    One run per seed, each initialized i.i.d. Gaussian with the prior scale,
    stepped until the training MSE drops below ``stop_train_mse``. Steps that
    would increase the loss are reverted with a halved learning rate, so the
    recorded loss sequence is non-increasing. Seeds that fail to reach the
    threshold are recorded as unconverged.
    """
    x, y = dataset.x_train, dataset.y_train
    g = evaluate(family, x)
    if arch.depth == 1:
        return _gd_train_batched(dataset, arch, g, cfg, base_seed)
    runs = []
    for k in range(cfg.n_seeds):
        runs.append(_gd_train_generic(dataset, family, arch, cfg, base_seed, k, hidden_norm))
    return runs


def _gd_train_batched(dataset, arch, g, cfg, base_seed):
    x, y = dataset.x_train, dataset.y_train
    p = y.shape[0]
    engine = _BatchedSingleLayer(arch, g, x, y)
    w1, a = _stacked_init(arch, base_seed, cfg.n_seeds)
    lr = np.full(cfg.n_seeds, cfg.learning_rate)
    f, h = engine.outputs(w1, a)
    loss = np.mean((f - y) ** 2, axis=1)
    steps = np.zeros(cfg.n_seeds, dtype=int)
    for _ in range(cfg.max_steps):
        active = loss >= cfg.stop_train_mse
        if not active.any():
            break
        coeff = 2.0 / p * (f - y) * active[:, None]
        d_w1, d_a = engine.grads(w1, a, h, coeff)
        w1_new = w1 - lr[:, None, None] * d_w1
        a_new = a - lr[:, None, None] * d_a
        f_new, h_new = engine.outputs(w1_new, a_new)
        loss_new = np.mean((f_new - y) ** 2, axis=1)
        worse = (loss_new > loss) & active
        accept = active & ~worse
        lr[worse] *= 0.5
        lr[accept] *= LR_GROWTH
        w1[accept] = w1_new[accept]
        a[accept] = a_new[accept]
        f[accept] = f_new[accept]
        h[accept] = h_new[accept]
        loss[accept] = loss_new[accept]
        steps[active] += 1
    runs = []
    for k in range(cfg.n_seeds):
        converged = bool(loss[k] < cfg.stop_train_mse)
        if not converged:
            warnings.warn(f"seed {k}: GD stopped at train MSE {loss[k]:.3e}", stacklevel=2)
        runs.append(TrainRun(_pack_params(arch, w1[k], a[k]), int(steps[k]),
                             float(loss[k]), converged, k))
    return runs


def _loss_and_grads_generic(arch, params, family, x, y, hidden_norm):
    """Mean-squared training error and its parameter gradients, any depth."""
    g = evaluate(family, x)
    n0, n, m = arch.input_dim, arch.width, arch.n_gates
    in_scale = 1.0 / np.sqrt(n0)
    hid_scale = 1.0 / np.sqrt((n0 if hidden_norm == "printed" else n) * m)
    out_scale = 1.0 / np.sqrt(n * m)
    hs = [params.w1 @ x.T * in_scale]
    for w_l in params.hidden:
        hs.append(hid_scale * np.einsum("mij,jp,mp->ip", w_l, hs[-1], g, optimize=True))
    abar = np.einsum("mi,mp->ip", params.readout, g)
    f = out_scale * np.sum(abar * hs[-1], axis=0)
    p = y.shape[0]
    resid = f - y
    loss = float(np.mean(resid ** 2))
    coeff = 2.0 / p * resid
    d_a = out_scale * np.einsum("p,mp,ip->mi", coeff, g, hs[-1], optimize=True)
    delta = out_scale * abar * coeff[None, :]
    d_hidden = []
    for l in range(len(params.hidden) - 1, -1, -1):
        h_prev = hs[l]
        d_w = hid_scale * np.einsum("ip,mp,jp->mij", delta, g, h_prev, optimize=True)
        d_hidden.insert(0, d_w)
        delta = hid_scale * np.einsum("mij,ip,mp->jp", params.hidden[l], delta, g, optimize=True)
    d_w1 = in_scale * (delta @ x)
    return loss, d_w1, d_hidden, d_a


def _gd_train_generic(dataset, family, arch, cfg, base_seed, seed_index, hidden_norm):
    rng_seed = _derived_seed(base_seed, seed_index)
    params = init_params(arch, np.random.default_rng(rng_seed).integers(2 ** 31))
    x, y = dataset.x_train, dataset.y_train
    lr = cfg.learning_rate
    loss, d_w1, d_hidden, d_a = _loss_and_grads_generic(arch, params, family, x, y, hidden_norm)
    steps = 0
    for _ in range(cfg.max_steps):
        if loss < cfg.stop_train_mse:
            break
        cand = Params(
            params.w1 - lr * d_w1,
            [w - lr * d for w, d in zip(params.hidden, d_hidden)],
            params.readout - lr * d_a,
        )
        new = _loss_and_grads_generic(arch, cand, family, x, y, hidden_norm)
        if new[0] > loss:
            lr *= 0.5
        else:
            params, (loss, d_w1, d_hidden, d_a) = cand, new
            lr *= LR_GROWTH
        steps += 1
    converged = loss < cfg.stop_train_mse
    if not converged:
        warnings.warn(f"seed {seed_index}: GD stopped at train MSE {loss:.3e}", stacklevel=2)
    return TrainRun(params, steps, float(loss), converged, seed_index)


def _langevin_init_state(arch, seed_seq, n_chains):
    rng = np.random.default_rng(seed_seq)
    s = arch.prior_scale
    w1 = s * rng.standard_normal((n_chains, arch.width, arch.input_dim))
    a = s * rng.standard_normal((n_chains, arch.n_gates, arch.width))
    return w1, a, rng


def _langevin_run_generic(dataset, family, arch, cfg, seed_seq):
    """Single-chain Langevin for any depth via the generic gradient path."""
    cfg.check_sampling()
    rng = np.random.default_rng(seed_seq)
    params = init_params(arch, int(rng.integers(2 ** 31)))
    x, y = dataset.x_train, dataset.y_train
    p = max(y.shape[0], 1)
    eps, temp, s2 = cfg.learning_rate, cfg.temperature, arch.prior_scale ** 2
    noise = np.sqrt(2.0 * eps * temp)

    def energy_and_grads():
        if y.shape[0]:
            mse, d_w1, d_hidden, d_a = _loss_and_grads_generic(
                arch, params, family, x, y, "width")
            # E differs from the MSE by the factor P/2 plus the prior term.
            half_p = 0.5 * p
            d_w1, d_a = half_p * d_w1, half_p * d_a
            d_hidden = [half_p * d for d in d_hidden]
            e = half_p * mse
        else:
            e, d_w1, d_a = 0.0, np.zeros_like(params.w1), np.zeros_like(params.readout)
            d_hidden = [np.zeros_like(w) for w in params.hidden]
        e += temp / (2 * s2) * (
            np.sum(params.w1 ** 2) + np.sum(params.readout ** 2)
            + sum(np.sum(w ** 2) for w in params.hidden)
        )
        d_w1 = d_w1 + temp / s2 * params.w1
        d_a = d_a + temp / s2 * params.readout
        d_hidden = [d + temp / s2 * w for d, w in zip(d_hidden, params.hidden)]
        return e, d_w1, d_hidden, d_a

    e0 = max(energy_and_grads()[0], 1.0)
    for step in range(1, cfg.max_steps + 1):
        e, d_w1, d_hidden, d_a = energy_and_grads()
        if e > DIVERGENCE_FACTOR * e0:
            raise Diverged(f"Langevin energy {e:.3e} exceeded guard at step {step}")
        params = Params(
            params.w1 - eps * d_w1 + noise * rng.standard_normal(params.w1.shape),
            [w - eps * d + noise * rng.standard_normal(w.shape)
             for w, d in zip(params.hidden, d_hidden)],
            params.readout - eps * d_a + noise * rng.standard_normal(params.readout.shape),
        )
        if step > cfg.burn_in and (step - cfg.burn_in) % cfg.thinning == 0:
            yield step, params


def _langevin_run(dataset, family, arch, cfg, seed_seq, n_chains):
    """Batched Langevin chains; yields (step, w1, a) at snapshot times."""
    cfg.check_sampling()
    x, y = dataset.x_train, dataset.y_train
    g = evaluate(family, x)
    engine = _BatchedSingleLayer(arch, g, x, y)
    w1, a, rng = _langevin_init_state(arch, seed_seq, n_chains)
    eps, temp, s2 = cfg.learning_rate, cfg.temperature, arch.prior_scale ** 2
    noise_scale = np.sqrt(2.0 * eps * temp)

    def energy(f):
        data = 0.5 * np.sum((f - y) ** 2, axis=1)
        prior = temp / (2.0 * s2) * (
            np.sum(w1 ** 2, axis=(1, 2)) + np.sum(a ** 2, axis=(1, 2))
        )
        return data + prior

    f, h = engine.outputs(w1, a)
    e0 = np.maximum(energy(f), 1.0)
    for step in range(1, cfg.max_steps + 1):
        coeff = f - y
        d_w1, d_a = engine.grads(w1, a, h, coeff)
        d_w1 += temp / s2 * w1
        d_a += temp / s2 * a
        w1 = w1 - eps * d_w1 + noise_scale * rng.standard_normal(w1.shape)
        a = a - eps * d_a + noise_scale * rng.standard_normal(a.shape)
        f, h = engine.outputs(w1, a)
        e = energy(f)
        if np.any(e > DIVERGENCE_FACTOR * e0):
            raise Diverged(f"Langevin energy {e.max():.3e} exceeded guard at step {step}")
        if step > cfg.burn_in and (step - cfg.burn_in) % cfg.thinning == 0:
            yield step, w1, a


def langevin_sample(dataset: Dataset, family: GatingFamily, arch: Architecture,
                    cfg: TrainConfig, seed: int):
    """Stream of posterior parameter snapshots from one Langevin chain.

    Snapshots start after ``burn_in`` steps and are spaced by ``thinning``.
    Divergence of the energy beyond 1e6 times its initial value raises.
    """
    if arch.depth == 1:
        for _, w1, a in _langevin_run(dataset, family, arch, cfg,
                                      _derived_seed(seed, 0), 1):
            yield _pack_params(arch, w1[0], a[0])
    else:
        for _, params in _langevin_run_generic(dataset, family, arch, cfg,
                                               _derived_seed(seed, 0)):
            yield params


def langevin_readout_snapshots(dataset, family, arch, cfg, base_seed, n_chains):
    """Pooled snapshots from several independent chains (mixing aid)."""
    out = []
    for _, w1, a in _langevin_run(dataset, family, arch, cfg,
                                  _derived_seed(base_seed, 1), n_chains):
        for c in range(n_chains):
            out.append(_pack_params(arch, w1[c], a[c]))
    return out


def estimate_readout_covariance(snapshots):
    """Second moment of the readout weights, averaged over snapshots.

    Returns (U_hat, stderr) with ``U_hat = mean_s a_s a_s' / N``; the
    standard error is the naive per-entry value and ignores chain
    autocorrelation.
    """
    snapshots = list(snapshots)
    if len(snapshots) < 30:
        raise TooFewSamples(f"need at least 30 snapshots, got {len(snapshots)}")
    mats = np.stack([p.readout @ p.readout.T / p.readout.shape[1] for p in snapshots])
    u_hat = mats.mean(axis=0)
    stderr = mats.std(axis=0, ddof=1) / np.sqrt(len(snapshots))
    return 0.5 * (u_hat + u_hat.T), stderr


def ensemble_predictor_stats(members, family: GatingFamily, arch: Architecture,
                             x_test, hidden_norm: str = "width") -> PredictorStats:
    """Sample mean and unbiased variance of the ensemble's outputs."""
    params = [m.params if isinstance(m, TrainRun) else m for m in members]
    if len(params) < 2:
        raise TooFewSamples("need at least 2 ensemble members")
    outs = np.stack([
        forward(arch, p, family, x_test, hidden_norm=hidden_norm) for p in params
    ])
    return PredictorStats(mean=outs.mean(axis=0), variance=outs.var(axis=0, ddof=1))
