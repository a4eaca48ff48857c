"""Gaussian product-of-experts fusion and Monte Carlo classification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Linear, StackedLinear, Tensor, clip, exp, log, softmax, sqrt, stack
from .errors import ConfigError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

# Test hook for the verification suite: names listed here switch on
# deliberate faults (currently only "fuse_sign").
FAULTS: set[str] = set()


@dataclass
class GaussianExpert:
    mu: Tensor
    var: Tensor


@dataclass
class FusedPosterior:
    mu: Tensor
    var: Tensor


class ClassifierParams:
    """Expert heads ``G_m: D -> 2*D_s`` plus the linear classifier ``W s + b``."""

    def __init__(self, heads: StackedLinear, w: Tensor, b: Tensor):
        self.heads = heads
        self.w = w
        self.b = b

    @classmethod
    def init(cls, num_modalities: int, dim: int, latent: int, num_classes: int, rng, dtype=np.float32):
        heads = StackedLinear.init(num_modalities, dim, 2 * latent, rng, dtype)
        out = Linear.init(latent, num_classes, rng, dtype)
        # stored as (C, D_s) so the classifier reads W s + b
        return cls(heads, Tensor(out.w.data.T.copy(), requires_grad=True), out.b)

    @property
    def latent(self) -> int:
        return self.w.shape[1]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [(f"heads.{k}", t) for k, t in self.heads.tensors()] + [("W", self.w), ("b", self.b)]


def expert_from_logvar(mu: Tensor, logvar: Tensor) -> GaussianExpert:
    return GaussianExpert(mu, exp(clip(logvar, LOGVAR_MIN, LOGVAR_MAX)))


def experts_all(z: Tensor, params: ClassifierParams, fixed_variance: bool = False, index=None) -> GaussianExpert:
    """Stacked experts for modality-major features ``z`` (M, B, D).

    With ``fixed_variance`` the predicted log-variance is ignored and every
    expert gets unit variance.
    """
    out = params.heads(z, index)
    latent = params.latent
    mu = out[..., :latent]
    if fixed_variance:
        return GaussianExpert(mu, Tensor(np.ones(mu.shape, dtype=mu.dtype)))
    return expert_from_logvar(mu, out[..., latent:])


def expert(z_m: Tensor, m: int, params: ClassifierParams, fixed_variance: bool = False) -> GaussianExpert:
    """Diagonal Gaussian expert of modality ``m`` for an aligned feature ``z_m`` (B, D)."""
    e = experts_all(z_m.reshape((1,) + z_m.shape), params, fixed_variance, np.array([m]))
    return GaussianExpert(e.mu[0], e.var[0])


def fuse(experts: Sequence[GaussianExpert] | GaussianExpert) -> FusedPosterior:
    """Closed-form product of the experts with a standard normal prior.

    Precisions add (the prior contributes 1); the mean is precision-weighted.
    Accepts a list of experts or one expert whose leading axis indexes them.
    """
    if isinstance(experts, GaussianExpert):
        mu, var = experts.mu, experts.var
    else:
        if not experts:
            raise ConfigError("fuse needs at least one expert")
        mu = stack([e.mu for e in experts], axis=0)
        var = stack([e.var for e in experts], axis=0)
    precision = 1.0 / var
    # reduction over the leading (expert) axis adds in expert order
    weighted = (mu * precision).sum(axis=0)
    var = 1.0 / (1.0 + precision.sum(axis=0))
    if "fuse_sign" in FAULTS:
        weighted = -weighted
    return FusedPosterior(weighted * var, var)


def draw_noise(post: FusedPosterior, samples: int, rng: np.random.Generator) -> np.ndarray:
    if samples <= 0:
        raise ConfigError(f"number of Monte Carlo samples must be positive, got {samples}")
    return rng.standard_normal((samples,) + post.mu.shape, dtype=post.mu.dtype)


def predict(
    post: FusedPosterior,
    samples: int,
    params: ClassifierParams,
    rng: np.random.Generator | None = None,
    *,
    noise: np.ndarray | None = None,
    deterministic: bool = False,
) -> Tensor:
    """Class probabilities averaged over reparameterised posterior draws.

    ``noise`` (shape ``(L, ..., D_s)``) overrides ``rng``; in deterministic
    mode the classifier is applied once at the posterior mean.
    """
    if samples <= 0:
        raise ConfigError(f"number of Monte Carlo samples must be positive, got {samples}")
    wt = params.w.T
    if deterministic:
        return softmax(post.mu @ wt + params.b, axis=-1)
    if noise is None:
        if rng is None:
            raise ConfigError("Monte Carlo prediction needs a random generator or explicit noise")
        noise = draw_noise(post, samples, rng)
    s = post.mu + sqrt(post.var) * Tensor(noise)
    probs = softmax(s @ wt + params.b, axis=-1)
    return probs.mean(axis=0)


def kl_to_prior(post: FusedPosterior) -> Tensor:
    """KL(N(mu, var) || N(0, I)) summed over the latent axis."""
    terms = post.mu * post.mu + post.var - log(post.var) - 1.0
    return terms.sum(axis=-1) * 0.5
