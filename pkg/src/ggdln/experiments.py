"""Desk-scale experiment sweeps with CSV results and JSON manifests.

Each ``run_*`` function takes a flat config dict (missing keys fall back to
documented defaults), executes its parameter grid on a bounded worker pool,
and returns ``(rows, manifest, kernels)`` where ``rows`` is a list of
ordered dicts ready for CSV serialization. Grid points derive their own
seeds, so re-running a manifest reproduces byte-identical CSV output.

Interpolation-threshold singularities are reported through a ``singular``
flag column; the affected predictor columns fall back to the ridgeless
pseudo-inverse instead of NaN.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (
    Dataset,
    clustered_preferred_teacher,
    conflicting_label_tasks,
    noisy_relu_teacher,
    permuted_tasks,
    preprocess_classification,
    synthetic_digits,
    two_class_manifold,
)
from .errors import BudgetExceeded, SingularKernel
from .gatings import evaluate, localized_family, masked_family, random_halfspace_family, soft_kmeans_family
from .gp import PredictorStats, gp_kernel, gp_predict, input_kernel, normalized_kernel
from .multitask import (
    decorrelation_ratio,
    stacked_gating_matrix,
    task_correlation_matrix,
    topdown_task_kernel,
)
from .network import capacity, effective_features, min_norm_interpolation_error
from .renorm import (
    SolverConfig,
    bias_variance,
    error_rate,
    renorm_kernel,
    renorm_kernel_from_gatings,
    solve_order_params_deep,
    solve_order_params_l1,
)
from .samplers import TrainConfig, ensemble_predictor_stats, gd_train

__all__ = [
    "DEFAULTS",
    "run_capacity_sweep",
    "run_width_sweep",
    "run_sigma_sweep",
    "run_gating_compare",
    "run_depth_sweep",
    "run_multitask",
    "relu_baseline_train",
    "write_outputs",
    "pool_size",
]


def pool_size() -> int:
    env = os.environ.get("GGDLN_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _pmap(fn, items):
    if len(items) <= 1 or pool_size() == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=pool_size()) as pool:
        return list(pool.map(fn, items))


# Desk-scale defaults: paper-regime shapes shrunk to minutes-scale runtimes
# while preserving the P/N ratios that control renormalization strength.
DEFAULTS = {
    "capacity": {
        "n0": 8, "p": 48, "p_t": 200, "n_teacher": 120, "gamma": 0.01,
        "eps": 0.1, "m_list": [2, 3, 4, 5, 6, 7, 8, 10], "l_list": [1, 2],
        "n": 200, "sigma": 1.0, "seed": 0,
    },
    "width": {
        # The two teacher regimes live in different data regimes, as in the
        # source experiments: the uniform teacher on strongly clustered
        # inputs (gamma small), the structured teacher on noise-dominated
        # inputs (gamma large) where gate selection has leverage.
        "n0": 100, "m_gates": 50, "m_blocks": 5, "n_clusters": 20,
        "gamma_uniform": 0.01, "gamma_structured": 0.8,
        "n_teacher": 400, "p": 200, "p_t": 200,
        "rho_list": [1.0, 0.01], "n_list": [50, 200, 1000], "sigma": 1.0,
        "seed": 0, "data_seeds": 1, "run_gd": 1, "gd_seeds": 20,
        "gd_max_steps": 4000, "gd_lr": 0.05,
    },
    "sigma": {
        "side": 8, "corpus": 4000, "p_t": 300, "seed": 0,
        "sigma_list": [0.1, 0.2, 0.5, 1.0, 2.0, 4.0],
        "regimes": {
            "a": {"m": 5, "n": 300, "p": 120, "n0": 40},
            "b": {"m": 40, "n": 80, "p": 120, "n0": 40},
        },
    },
    "gating": {
        "side": 8, "corpus": 4000, "n0": 32, "p": 200, "p_t": 300,
        "n": 150, "sigma": 0.5, "m_list": [2, 4, 8, 16, 32],
        "kmeans_iters": 40, "seed": 0, "relu_seeds": 10,
        "relu_max_steps": 3000, "relu_lr": 0.05,
    },
    "depth": {
        "side": 8, "corpus": 3000, "n0": 40, "p": 150, "p_t": 150,
        "m": 4, "n": 100, "sigma": 1.0, "l_list": [1, 2, 3, 4],
        "pairs_per_class": 30, "small_threshold": 0.05, "seed": 0,
        "dump_kernels": 0,
    },
    "multitask": {
        "seed": 0, "seeds": 5,
        "n_list": [50, 200, 1000],
        "modes": ["bottomup", "topdown"],
        "bottomup": {"n0": 100, "p": 100, "p_t": 80, "n_perms": 2, "m": 24,
                     "b": 0.0, "sigma": 0.5, "separation": 3.5,
                     "intrinsic_dim": 8, "residue": 0.1},
        "topdown": {"n0": 100, "p": 150, "p_t": 60, "m": 20,
                    "permit_prob": 0.75, "sigma": 1.0, "separation": 3.5,
                    "intrinsic_dim": 8, "residue": 0.1},
        "dump_kernels": 0,
    },
}


def _resolve(section: str, cfg: dict | None) -> dict:
    out = json.loads(json.dumps(DEFAULTS[section]))  # deep copy
    for key, value in (cfg or {}).items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key].update(value)
        else:
            out[key] = value
    for key, value in out.items():
        # A one-element list key may arrive as a scalar from --set.
        if (key.endswith("_list") or key == "modes") and not isinstance(value, list):
            out[key] = [value]
    return out


def _manifest(section, cfg):
    return {"subcommand": section, "config": cfg, "version": __version__}


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(float(value), ".10g")
    return str(value)


def write_outputs(outdir, rows, manifest, kernels=None):
    """Write results.csv, manifest.json and optional kernels/*.csv."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    header = list(rows[0].keys()) if rows else []
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row[k]) for k in header))
    (outdir / "results.csv").write_text("\n".join(lines) + "\n")
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n"
    )
    for name, bundle in (kernels or {}).items():
        bundle.export(outdir / "kernels" / name)
    return outdir / "results.csv"


def _theory_predict(ops_or_none, family, dataset, sigma, depth, g_train=None, g_test=None):
    """Finite-width predictor with pseudo-inverse fallback; returns (stats, singular)."""
    if g_train is None:
        bundle = renorm_kernel(ops_or_none, family, dataset.x_train, dataset.x_test, sigma)
    else:
        bundle = renorm_kernel_from_gatings(
            ops_or_none, g_train, g_test, dataset.x_train, dataset.x_test, sigma)
    try:
        return gp_predict(bundle, dataset.y_train), False
    except SingularKernel:
        return gp_predict(bundle, dataset.y_train, on_singular="pinv"), True


def _gp_predict_fallback(bundle, y):
    try:
        return gp_predict(bundle, y), False
    except SingularKernel:
        return gp_predict(bundle, y, on_singular="pinv"), True


# ---------------------------------------------------------------------------
# Capacity / double descent sweep
# ---------------------------------------------------------------------------

def run_capacity_sweep(cfg=None):
    cfg = _resolve("capacity", cfg)
    data = noisy_relu_teacher(cfg["n0"], cfg["p"], cfg["p_t"], cfg["n_teacher"],
                              cfg["gamma"], cfg["eps"], cfg["seed"])
    grid = [(l, m) for l in cfg["l_list"] for m in cfg["m_list"]]

    def point(lm):
        depth, m = lm
        family = random_halfspace_family(cfg["n0"], m, 0.0, cfg["seed"] + 1000 + m)
        cap = capacity(cfg["n0"], m, depth)
        feats = effective_features(family, data.x_train, depth)
        train_err = min_norm_interpolation_error(feats, data.y_train)
        bundle = gp_kernel(family, data.x_train, data.x_test, cfg["sigma"], depth)
        gp_stats, gp_singular = _gp_predict_fallback(bundle, data.y_train)
        gp_b, gp_v, gp_e = bias_variance(gp_stats, data.y_test)
        g = evaluate(family, data.x_train)
        k0 = input_kernel(data.x_train, data.x_train, cfg["sigma"])
        solver_cfg = SolverConfig()
        fw_cols = {"fw_bias": float("nan"), "fw_variance": float("nan"),
                   "fw_eg": float("nan"), "fw_converged": False}
        fw_singular = gp_singular
        try:
            if depth == 1:
                ops = solve_order_params_l1(g, k0, data.y_train, cfg["n"],
                                            cfg["sigma"], solver_cfg)
            else:
                ops = solve_order_params_deep(depth, g, k0, data.y_train,
                                              cfg["n"], cfg["sigma"], solver_cfg)
            stats, fw_singular = _theory_predict(ops, family, data, cfg["sigma"], depth)
            b, v, e = bias_variance(stats, data.y_test)
            fw_cols = {"fw_bias": b, "fw_variance": v, "fw_eg": e,
                       "fw_converged": ops.diagnostics.converged}
        except (BudgetExceeded, SingularKernel):
            pass
        return {
            "l": depth, "m": m, "capacity": cap,
            "singular": cfg["p"] >= cap,
            "train_error": train_err,
            "gp_bias": gp_b, "gp_variance": gp_v, "gp_eg": gp_e,
            **fw_cols,
        }

    rows = _pmap(point, grid)
    return rows, _manifest("capacity", cfg), {}


# ---------------------------------------------------------------------------
# Width sweep (feature selection by renormalization)
# ---------------------------------------------------------------------------

def _block_amplitude_ratio(u, m_gates, m_blocks):
    """Mean |U| over the first diagonal gate block relative to the others.

    Gates are grouped by receptive-field block; the first block reads the
    coordinates whose teacher variance is set by rho. The ratio tends to 1
    from above as the width grows and the renormalization fades.
    """
    per = m_gates // m_blocks
    amps = []
    for b in range(m_blocks):
        sl = slice(b * per, (b + 1) * per)
        amps.append(float(np.mean(np.abs(u[sl, sl]))))
    return float(amps[0] / np.mean(amps[1:]))


def run_width_sweep(cfg=None):
    cfg = _resolve("width", cfg)
    grid = [
        (rho, n, ds)
        for rho in cfg["rho_list"]
        for n in cfg["n_list"]
        for ds in range(cfg["data_seeds"])
    ]

    def point(item):
        rho, n, ds = item
        gamma = cfg["gamma_uniform"] if rho == 1.0 else cfg["gamma_structured"]
        data = clustered_preferred_teacher(
            cfg["n0"], cfg["m_blocks"], cfg["n_clusters"], gamma, rho,
            cfg["n_teacher"], cfg["p"], cfg["p_t"], cfg["seed"] + 11 + 1000 * ds,
        )
        scale = float(data.y_train.std())
        data = Dataset(data.x_train, data.y_train / scale,
                       data.x_test, data.y_test / scale,
                       provenance=data.provenance)
        family = localized_family(cfg["n0"], cfg["m_gates"], cfg["m_blocks"],
                                  cfg["seed"] + 7 + 1000 * ds)
        g = evaluate(family, data.x_train)
        k0 = input_kernel(data.x_train, data.x_train, cfg["sigma"])
        ops = solve_order_params_l1(g, k0, data.y_train, n, cfg["sigma"])
        stats, singular = _theory_predict(ops, family, data, cfg["sigma"], 1)
        bias, var, eg = bias_variance(stats, data.y_test)
        row = {
            "rho": rho, "n": n, "data_seed": ds, "singular": singular,
            "bias": bias, "variance": var, "eg": eg,
            "u_block_ratio": _block_amplitude_ratio(ops.u[0], cfg["m_gates"], cfg["m_blocks"]),
            "solver_converged": ops.diagnostics.converged,
        }
        if cfg["run_gd"]:
            arch = _single_layer_arch(n, cfg["m_gates"], cfg["n0"], cfg["sigma"])
            tcfg = TrainConfig(learning_rate=cfg["gd_lr"], max_steps=cfg["gd_max_steps"],
                               n_seeds=cfg["gd_seeds"])
            runs = gd_train(data, family, arch, tcfg, cfg["seed"] + 13 + n + 7000 * ds)
            ok = [r for r in runs if r.converged] or runs
            est = ensemble_predictor_stats(ok, family, arch, data.x_test)
            gb, gv, ge = bias_variance(est, data.y_test)
            u_gd = np.mean(
                [r.params.readout @ r.params.readout.T / n for r in ok], axis=0)
            row.update({
                "gd_bias": gb, "gd_variance": gv, "gd_eg": ge,
                "gd_u_block_ratio": _block_amplitude_ratio(u_gd, cfg["m_gates"], cfg["m_blocks"]),
                "gd_converged_seeds": len([r for r in runs if r.converged]),
            })
        return row

    rows = _pmap(point, grid)
    return rows, _manifest("width", cfg), {}


def _single_layer_arch(n, m, n0, sigma):
    from .network import Architecture

    return Architecture(depth=1, width=n, n_gates=m, input_dim=n0, prior_scale=sigma)


# ---------------------------------------------------------------------------
# Regularization-strength sweep
# ---------------------------------------------------------------------------

def _classification_data(side, corpus, n0, p, p_t, seed, classes=None):
    images, labels = synthetic_digits(corpus, side=side, seed=seed)
    if classes is not None:
        keep = np.isin(labels, classes)
        images, labels = images[keep], labels[keep]
        rule = lambda d: 1 if d == classes[1] else -1
    else:
        rule = "parity"
    return preprocess_classification(images, labels, n0, p, p_t, rule, seed + 1)


def run_sigma_sweep(cfg=None):
    cfg = _resolve("sigma", cfg)
    grid = [(name, sig) for name in sorted(cfg["regimes"]) for sig in cfg["sigma_list"]]

    def point(rs):
        name, sigma = rs
        reg = cfg["regimes"][name]
        data = _classification_data(cfg["side"], cfg["corpus"], reg["n0"],
                                    reg["p"], cfg["p_t"], cfg["seed"])
        family = random_halfspace_family(reg["n0"], reg["m"], 0.0, cfg["seed"] + 3)
        g = evaluate(family, data.x_train)
        k0 = input_kernel(data.x_train, data.x_train, sigma)
        ops = solve_order_params_l1(g, k0, data.y_train, reg["n"], sigma)
        stats, singular = _theory_predict(ops, family, data, sigma, 1)
        bias, var, eg = bias_variance(stats, data.y_test)
        _, err = error_rate(stats, data.y_test)
        bundle = gp_kernel(family, data.x_train, data.x_test, sigma, 1)
        gp_stats, _ = _gp_predict_fallback(bundle, data.y_train)
        gp_b, gp_v, _ = bias_variance(gp_stats, data.y_test)
        _, gp_err = error_rate(gp_stats, data.y_test)
        return {
            "regime": name, "sigma": sigma, "singular": singular,
            "bias": bias, "variance": var, "eg": eg, "error_rate": err,
            "gp_bias": gp_b, "gp_variance": gp_v, "gp_error_rate": gp_err,
        }

    rows = _pmap(point, grid)
    return rows, _manifest("sigma", cfg), {}


# ---------------------------------------------------------------------------
# Gating comparison (random vs pretrained) with a ReLU GD baseline
# ---------------------------------------------------------------------------

class _ReluNet:
    """Width-matched single-hidden-layer ReLU network trained by GD."""

    def __init__(self, n0, n, sigma, seed):
        rng = np.random.default_rng(seed)
        self.w = sigma * rng.standard_normal((n, n0))
        self.a = sigma * rng.standard_normal(n)
        self.n0, self.n = n0, n

    def outputs(self, x):
        z = self.w @ x.T / np.sqrt(self.n0)
        return self.a @ np.maximum(z, 0.0) / np.sqrt(self.n)

    def loss_and_grads(self, x, y):
        z = self.w @ x.T / np.sqrt(self.n0)
        r = np.maximum(z, 0.0)
        f = self.a @ r / np.sqrt(self.n)
        resid = f - y
        loss = float(np.mean(resid ** 2))
        coeff = 2.0 / y.shape[0] * resid
        d_a = r @ coeff / np.sqrt(self.n)
        back = (self.a[:, None] * (z > 0.0)) * coeff[None, :] / np.sqrt(self.n)
        d_w = back @ x / np.sqrt(self.n0)
        return loss, d_w, d_a


def relu_baseline_train(dataset: Dataset, n: int, sigma: float, cfg: TrainConfig,
                        seeds: int) -> tuple[PredictorStats, list]:
    """GD ensemble of width-matched ReLU networks; returns test-set stats."""
    records = []
    outs = []
    for k in range(seeds):
        net = _ReluNet(dataset.input_dim, n, sigma,
                       np.random.SeedSequence(entropy=(314159, k)))
        lr = cfg.learning_rate
        loss, d_w, d_a = net.loss_and_grads(dataset.x_train, dataset.y_train)
        steps = 0
        for _ in range(cfg.max_steps):
            if loss < cfg.stop_train_mse:
                break
            w_new, a_new = net.w - lr * d_w, net.a - lr * d_a
            old = (net.w, net.a)
            net.w, net.a = w_new, a_new
            new = net.loss_and_grads(dataset.x_train, dataset.y_train)
            if new[0] > loss:
                net.w, net.a = old
                lr *= 0.5
            else:
                loss, d_w, d_a = new
                lr *= 1.1
            steps += 1
        records.append({"seed": k, "steps": steps, "final_mse": loss,
                        "converged": loss < cfg.stop_train_mse})
        outs.append(net.outputs(dataset.x_test))
    outs = np.stack(outs)
    stats = PredictorStats(mean=outs.mean(axis=0), variance=outs.var(axis=0, ddof=1))
    return stats, records


def run_gating_compare(cfg=None):
    cfg = _resolve("gating", cfg)
    data = _classification_data(cfg["side"], cfg["corpus"], cfg["n0"],
                                cfg["p"], cfg["p_t"], cfg["seed"])

    def point(item):
        kind, m = item
        if kind == "relu_gd":
            tcfg = TrainConfig(learning_rate=cfg["relu_lr"],
                               max_steps=cfg["relu_max_steps"])
            stats, _ = relu_baseline_train(data, cfg["n"], cfg["sigma"], tcfg,
                                           cfg["relu_seeds"])
            bias, var, eg = bias_variance(stats, data.y_test)
            _, err = error_rate(stats, data.y_test)
            return {"kind": kind, "m": 0, "singular": False, "bias": bias,
                    "variance": var, "eg": eg, "error_rate": err}
        if kind == "random":
            family = random_halfspace_family(cfg["n0"], m, 0.0, cfg["seed"] + 5 + m)
        else:
            family = soft_kmeans_family(data.x_train, m, cfg["kmeans_iters"],
                                        cfg["seed"] + 9 + m)
        g = evaluate(family, data.x_train)
        k0 = input_kernel(data.x_train, data.x_train, cfg["sigma"])
        ops = solve_order_params_l1(g, k0, data.y_train, cfg["n"], cfg["sigma"])
        stats, singular = _theory_predict(ops, family, data, cfg["sigma"], 1)
        bias, var, eg = bias_variance(stats, data.y_test)
        _, err = error_rate(stats, data.y_test)
        return {"kind": kind, "m": m, "singular": singular, "bias": bias,
                "variance": var, "eg": eg, "error_rate": err}

    grid = [(kind, m) for kind in ("random", "pretrained") for m in cfg["m_list"]]
    grid.append(("relu_gd", 0))
    rows = _pmap(point, grid)
    return rows, _manifest("gating", cfg), {}


# ---------------------------------------------------------------------------
# Depth sweep: kernel flattening with and without renormalization
# ---------------------------------------------------------------------------

def _same_class_pairs(x_test, y_test, per_class, seed):
    rng = np.random.default_rng(seed)
    keep = []
    for cls in (-1.0, 1.0):
        idx = np.flatnonzero(y_test == cls)
        keep.append(rng.permutation(idx)[:per_class])
    return [x_test[k] for k in keep]


def _offdiag_values(k_sym):
    d = np.sqrt(np.clip(np.diag(k_sym), 1e-300, None))
    norm = k_sym / np.outer(d, d)
    iu = np.triu_indices(k_sym.shape[0], k=1)
    return norm[iu]


def run_depth_sweep(cfg=None):
    cfg = _resolve("depth", cfg)
    data = _classification_data(cfg["side"], cfg["corpus"], cfg["n0"],
                                cfg["p"], cfg["p_t"], cfg["seed"])
    family = random_halfspace_family(cfg["n0"], cfg["m"], 0.0, cfg["seed"] + 21)
    groups = _same_class_pairs(data.x_test, data.y_test, cfg["pairs_per_class"],
                               cfg["seed"] + 22)
    g_train = evaluate(family, data.x_train)
    k0 = input_kernel(data.x_train, data.x_train, cfg["sigma"])
    kernels = {}

    def point(depth):
        gp_bundle = gp_kernel(family, data.x_train, data.x_test, cfg["sigma"], depth)
        gp_stats, gp_sing = _gp_predict_fallback(gp_bundle, data.y_train)
        gp_bias = bias_variance(gp_stats, data.y_test)[0]
        if depth == 1:
            ops = solve_order_params_l1(g_train, k0, data.y_train, cfg["n"], cfg["sigma"])
        else:
            ops = solve_order_params_deep(depth, g_train, k0, data.y_train,
                                          cfg["n"], cfg["sigma"])
        stats, singular = _theory_predict(ops, family, data, cfg["sigma"], depth)
        rn_bias = bias_variance(stats, data.y_test)[0]
        gp_vals, rn_vals = [], []
        for xg in groups:
            gp_pair = gp_kernel(family, xg, xg, cfg["sigma"], depth).k_train
            rn_pair = renorm_kernel(ops, family, xg, xg, cfg["sigma"]).k_train
            gp_vals.append(_offdiag_values(gp_pair))
            rn_vals.append(_offdiag_values(rn_pair))
            if cfg["dump_kernels"]:
                kernels[f"depth{depth}_renorm"] = renorm_kernel(
                    ops, family, xg, xg, cfg["sigma"])
        gp_vals = np.abs(np.concatenate(gp_vals))
        rn_vals = np.abs(np.concatenate(rn_vals))
        thr = cfg["small_threshold"]
        return {
            "l": depth, "singular": singular or gp_sing,
            "frac_small_gp": float(np.mean(gp_vals <= thr)),
            "frac_small_renorm": float(np.mean(rn_vals <= thr)),
            "bias_gp": gp_bias, "bias_renorm": rn_bias,
            "solver_converged": ops.diagnostics.converged,
        }

    rows = [point(depth) for depth in cfg["l_list"]]
    return rows, _manifest("depth", cfg), kernels


# ---------------------------------------------------------------------------
# Multitask sweeps
# ---------------------------------------------------------------------------

def _block_ratio(k, n_tasks, block):
    diag, off = [], []
    for p_i in range(n_tasks):
        for q_i in range(n_tasks):
            blk = np.abs(k[p_i * block:(p_i + 1) * block, q_i * block:(q_i + 1) * block])
            (diag if p_i == q_i else off).append(float(blk.mean()))
    return float(np.mean(diag) / np.mean(off))


def run_multitask(cfg=None):
    cfg = _resolve("multitask", cfg)
    kernels = {}
    grid = [
        (mode, n, s)
        for mode in cfg["modes"]
        for n in cfg["n_list"]
        for s in range(cfg["seeds"])
    ]

    def point(item):
        mode, n, seed_idx = item
        seed = cfg["seed"] + 100 * seed_idx
        sub = cfg[mode]
        base = two_class_manifold(
            sub["n0"], sub["p"], sub["p_t"], seed,
            separation=sub["separation"], intrinsic_dim=sub["intrinsic_dim"],
            residue=sub["residue"])
        sigma = sub["sigma"]
        if mode == "bottomup":
            data = permuted_tasks(base, sub["n_perms"], seed + 1)
            family = random_halfspace_family(sub["n0"], sub["m"], sub["b"], seed + 2)
            g_train = evaluate(family, data.x_train)
            g_test = evaluate(family, data.x_test)
        else:
            data = conflicting_label_tasks(base, seed + 1)
            shared = random_halfspace_family(sub["n0"], sub["m"], 0.0, seed + 2)
            families = masked_family(shared, sub["permit_prob"], data.n_tasks, seed + 3)
            g_train = stacked_gating_matrix(families, data.x_train, data.task_of_train)
            g_test = stacked_gating_matrix(families, data.x_test, data.task_of_test)
        k0 = input_kernel(data.x_train, data.x_train, sigma)
        ops = solve_order_params_l1(g_train, k0, data.y_train, n, sigma)
        bundle = renorm_kernel_from_gatings(ops, g_train, g_test,
                                            data.x_train, data.x_test, sigma)
        stats, singular = _gp_predict_fallback(bundle, data.y_train)
        _, err = error_rate(stats, data.y_test)
        bias, var, eg = bias_variance(stats, data.y_test)
        row = {
            "mode": mode, "n": n, "seed": seed_idx, "singular": singular,
            "error_rate": err, "bias": bias, "variance": var, "eg": eg,
            "solver_converged": ops.diagnostics.converged,
        }
        if mode == "bottomup":
            corr = task_correlation_matrix(bundle, data.task_of_train, data.task_of_test)
            row["decorr_ratio"] = decorrelation_ratio(corr)
            row["block_ratio"] = float("nan")
        else:
            task0 = data.x_train[data.task_of_train == 0]
            block_bundle = topdown_task_kernel(ops.u[0], families, task0, sigma)
            row["block_ratio"] = _block_ratio(
                block_bundle.k_train, data.n_tasks,
                int(np.sum(data.task_of_train == 0)))
            row["decorr_ratio"] = float("nan")
            if cfg["dump_kernels"] and seed_idx == 0:
                kernels[f"topdown_n{n}"] = block_bundle
        return row

    rows = _pmap(point, grid)
    return rows, _manifest("multitask", cfg), kernels
