"""Self-contained numerical verification suite.

Each check compares a production code path against an independent oracle
(grid integration, finite differences, Monte Carlo, brute-force counting)
in float64 and returns a :class:`CheckResult`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import uapoe
from .diffcore import Tensor, grad_check, masked_softmax, matmul, no_grad
from .encoders import Batch, all_masks
from .evalkit import auc, confusion_matrix, macro_f1
from .model import ModelConfig, ModelParams
from .training import TrainConfig, loss
from .uapoe import GaussianExpert, expert_from_logvar, fuse, kl_to_prior


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# oracles


def grid_product_moments(mus, variances, lo=-10.0, hi=10.0, step=1e-3) -> tuple[float, float]:
    """Mean and variance of the normalised product of N(0,1) and each N(mu_k, var_k) on a grid."""
    x = np.arange(lo, hi + step / 2, step)
    logp = -0.5 * x * x
    for mu, var in zip(mus, variances):
        logp = logp - 0.5 * (x - mu) ** 2 / var
    w = np.exp(logp - logp.max())
    w /= w.sum()
    mean = float((w * x).sum())
    return mean, float((w * (x - mean) ** 2).sum())


def pairwise_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Macro one-vs-rest AUC by counting every positive/negative pair."""
    per_class = []
    for c in range(scores.shape[1]):
        pos = scores[labels == c, c]
        neg = scores[labels != c, c]
        if pos.size == 0 or neg.size == 0:
            continue
        wins = 0.0
        for p in pos:
            wins += float(np.sum(p > neg)) + 0.5 * float(np.sum(p == neg))
        per_class.append(wins / (pos.size * neg.size))
    return float(np.mean(per_class)) if per_class else None


def f1_from_counts(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> float:
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        scores.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def mc_kl(mu: np.ndarray, var: np.ndarray, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo KL(q || N(0, I)) and its standard error."""
    eps = rng.standard_normal((n, mu.size))
    s = mu + np.sqrt(var) * eps
    log_q = -0.5 * (np.log(2 * np.pi * var) + eps * eps).sum(axis=1)
    log_p = -0.5 * (np.log(2 * np.pi) + s * s).sum(axis=1)
    d = log_q - log_p
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(n))


# fixtures


def small_config(**overrides) -> ModelConfig:
    base = dict(dims=(3, 4, 5), num_classes=3, d_model=8, heads=2, precision="float64")
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(config: ModelConfig, n: int, rng: np.random.Generator, mask: np.ndarray | None = None) -> Batch:
    M = config.num_modalities
    if mask is None:
        mask = rng.random((n, M)) < 0.5
        empty = ~mask.any(axis=1)
        mask[empty, rng.integers(0, M, empty.sum())] = True
    xs = [np.where(mask[:, [m]], rng.standard_normal((n, d)), 0.0) for m, d in enumerate(config.dims)]
    labels = rng.integers(0, config.num_classes, n)
    return Batch(xs, mask, labels)


# checks


def check_matmul(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    err = float(np.abs(matmul(Tensor(a), Tensor(b)).data - ref).max())
    return err <= 1e-12, f"max |diff| vs triple loop = {err:.2e}"


def check_masked_softmax() -> tuple[bool, str]:
    cases = [
        ([0.0, 0.0, 0.0], [True, True, True], [1 / 3, 1 / 3, 1 / 3]),
        ([5.0, 1.0, 2.0], [True, False, False], [1.0, 0.0, 0.0]),
        ([1.0, 2.0], [False, False], [0.0, 0.0]),
    ]
    worst = 0.0
    for logits, keep, want in cases:
        out = masked_softmax(Tensor(np.array(logits)), np.array(keep)).data
        worst = max(worst, float(np.abs(out - want).max()))
    return worst <= 1e-15, f"max |diff| on reference cases = {worst:.2e}"


def check_poe_grid(configs: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_mu = worst_var = 0.0
    for _ in range(configs):
        M = int(rng.integers(1, 5))
        mus = rng.uniform(-3, 3, M)
        variances = np.exp(rng.uniform(-4, 4, M))
        experts = [GaussianExpert(Tensor(np.array([mu])), Tensor(np.array([v]))) for mu, v in zip(mus, variances)]
        post = fuse(experts)
        g_mu, g_var = grid_product_moments(mus, variances)
        worst_mu = max(worst_mu, abs(float(post.mu.data[0]) - g_mu))
        worst_var = max(worst_var, abs(float(post.var.data[0]) - g_var))
    ok = worst_mu <= 1e-3 and worst_var <= 1e-3
    return ok, f"{configs} configs: max |dmu| = {worst_mu:.2e}, max |dvar| = {worst_var:.2e}"


def check_limit_consistency(trials: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    moved = True
    for _ in range(trials):
        M, D = int(rng.integers(2, 5)), 4
        mu = rng.standard_normal((M, D))
        logvar = rng.uniform(-2, 2, (M, D))
        logvar[0] = 50.0  # clamped to the ceiling, variance e^10
        e = expert_from_logvar(Tensor(mu), Tensor(logvar))
        full = fuse(e)
        rest = fuse(GaussianExpert(Tensor(mu[1:]), Tensor(np.exp(logvar[1:]))))
        worst = max(worst, float(np.abs(full.mu.data - rest.mu.data).max()), float(np.abs(full.var.data - rest.var.data).max()))
        # dropping a unit-variance expert whose mean differs from the fused mean moves the mean
        unit_var = np.exp(logvar[1:]).copy()
        unit_var[0] = 1.0
        with_unit = fuse(GaussianExpert(Tensor(mu[1:]), Tensor(unit_var)))
        if M > 2:
            without = fuse(GaussianExpert(Tensor(mu[2:]), Tensor(unit_var[1:])))
            differs = mu[1] != with_unit.mu.data
            moved &= bool(np.all((without.mu.data != with_unit.mu.data)[differs]))
    ok = worst <= 1e-3 and moved
    return ok, f"max |diff| vs fusing the rest = {worst:.2e}; unit expert removal moves mean: {moved}"


def check_kl_oracle(posteriors: int = 50, samples: int = 100_000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    fails = 0
    worst_z = 0.0
    for _ in range(posteriors):
        D = int(rng.integers(1, 9))
        mu = rng.standard_normal(D)
        var = np.exp(rng.uniform(-2, 2, D))
        closed = float(kl_to_prior(uapoe.FusedPosterior(Tensor(mu), Tensor(var))).data)
        est, se = mc_kl(mu, var, samples, rng)
        z = abs(closed - est) / se
        worst_z = max(worst_z, z)
        fails += z > 3
    return fails == 0, f"{posteriors} posteriors, worst |closed - MC| = {worst_z:.2f} standard errors"


def full_loss_fn(seed: int, **overrides) -> tuple[Callable[[], Tensor], list[Tensor]]:
    rng = np.random.default_rng(seed)
    cfg = small_config(**overrides)
    params = ModelParams.init(cfg, seed)
    batch = random_batch(cfg, 4, rng)
    noise = rng.standard_normal((3, 4, cfg.latent))
    tc = TrainConfig(beta=1.0, samples=3)
    return (lambda: loss(batch, params, tc, noise=noise, deterministic=False)), params.tensors()


def check_gradients(seeds=(0,), **overrides) -> tuple[bool, str]:
    worst = 0.0
    for s in seeds:
        f, tensors = full_loss_fn(s, **overrides)
        worst = max(worst, grad_check(f, tensors))
    return worst <= 1e-4, f"seeds {list(seeds)}: max relative error = {worst:.2e}"


def masking_soundness(samples: int = 1000, seed: int = 0, config: ModelConfig | None = None) -> tuple[float, float]:
    """Return (max attention mass on missing positions, max output change when placeholders are perturbed)."""
    cfg = config or ModelConfig(dims=(8, 32, 32, 32), d_model=16, precision="float64")
    params = ModelParams.init(cfg, seed)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, cfg.num_classes, samples)
    worst_mass = worst_delta = 0.0
    noise = rng.standard_normal((2, samples, cfg.latent))
    for mask in all_masks(cfg.num_modalities):
        bits = np.broadcast_to(mask.as_array(), (samples, cfg.num_modalities)).copy()
        clean = [np.where(bits[:, [m]], rng.standard_normal((samples, d)), 0.0) for m, d in enumerate(cfg.dims)]
        junk = [np.where(bits[:, [m]], x, rng.standard_normal(x.shape) * 100) for m, x in enumerate(clean)]
        with no_grad():
            a = params.forward(Batch(clean, bits, labels), noise=noise)
            b = params.forward(Batch(junk, bits, labels), noise=noise)
        if a.aligned.weights is not None:
            missing = ~mask.as_array()
            # weights[target, source, batch, head]; mass on missing sources
            worst_mass = max(worst_mass, float(np.abs(a.aligned.weights[:, missing]).max(initial=0.0)))
        worst_delta = max(worst_delta, float(np.abs(a.probs.data - b.probs.data).max()))
        worst_delta = max(worst_delta, float(np.abs(a.aligned.z.data - b.aligned.z.data).max()))
    return worst_mass, worst_delta


def check_masking(samples: int = 1000) -> tuple[bool, str]:
    mass, delta = masking_soundness(samples)
    return mass == 0.0 and delta <= 1e-12, f"mass on missing = {mass!r}, max output change = {delta:.2e}"


def check_metrics(instances: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    auc_ok = True
    f1_err = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 201))
        C = int(rng.integers(2, 5))
        labels = rng.integers(0, C, n)
        # coarse scores force ties
        scores = rng.integers(0, 6, (n, C)).astype(float)
        auc_ok &= auc(scores, labels) == pairwise_auc(scores, labels)
        preds = rng.integers(0, C, n)
        f1_err = max(f1_err, abs(macro_f1(labels, preds, C) - f1_from_counts(labels, preds, C)))
        auc_ok &= int(confusion_matrix(labels, preds, C).sum()) == n
    return auc_ok and f1_err <= 1e-12, f"AUC exact match: {auc_ok}; max macro-F1 diff = {f1_err:.2e}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("matmul triple-loop oracle", check_matmul),
    ("masked softmax reference cases", check_masked_softmax),
    ("PoE grid-product oracle", check_poe_grid),
    ("uncertainty down-weighting limit", check_limit_consistency),
    ("KL Monte Carlo oracle", check_kl_oracle),
    ("metric oracles", check_metrics),
    ("masking soundness", check_masking),
    ("full-loss gradient check", lambda: check_gradients(seeds=(0,))),
    ("gradient check, literal attention + vector gate", lambda: check_gradients(seeds=(1,), literal_attention=True, vector_gate=True)),
]


def run_checks(fault: str | None = None, emit: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    if fault:
        uapoe.FAULTS.add(fault)
    try:
        for name, fn in CHECKS:
            start = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            res = CheckResult(name, bool(ok), detail, time.perf_counter() - start)
            results.append(res)
            if emit is not None:
                emit(f"{'PASS' if res.passed else 'FAIL'}  {res.name}: {res.detail}")
    finally:
        if fault:
            uapoe.FAULTS.discard(fault)
    return results
