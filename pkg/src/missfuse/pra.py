"""Prototype-anchored alignment of modality features.

Each target modality builds a query from its global prototype and an
availability token, attends over the other modalities (missing ones are
masked out of the softmax), and the result is gated against the observed
feature before a shared layer norm.

Tensors are modality-major: features are (M, B, D). All targets are
processed at once; attending over every modality with the target's own slot
masked is the same softmax as attending over the M-1 co-modalities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    StackedLinear,
    Tensor,
    bmm,
    broadcast_to,
    concat,
    getitem,
    layer_norm,
    masked_softmax,
    reshape,
    sigmoid,
    where,
)
from .encoders import FeatureBundle, ModalityMask
from .errors import ConfigError

INIT_STD = 0.02


@dataclass
class AttentionParams:
    query: StackedLinear
    key: StackedLinear
    value: StackedLinear
    output: StackedLinear

    def tensors(self):
        out = []
        for name in ("query", "key", "value", "output"):
            out += [(f"{name}.{k}", t) for k, t in getattr(self, name).tensors()]
        return out


@dataclass
class PRAParams:
    prototypes: Tensor  # (M, D)
    t_obs: Tensor
    t_mis: Tensor
    query_proj: StackedLinear  # 2D -> D per modality
    gate: StackedLinear  # 2D -> 1 (or D) per modality
    attention: AttentionParams | None  # None: raw features as keys/values, one head
    ln_gain: Tensor
    ln_shift: Tensor
    heads: int = 4

    @classmethod
    def init(
        cls,
        num_modalities: int,
        dim: int,
        rng: np.random.Generator,
        *,
        heads: int = 4,
        literal_attention: bool = False,
        vector_gate: bool = False,
        dtype=np.float32,
    ) -> "PRAParams":
        if literal_attention:
            heads = 1
        if heads < 1 or dim % heads:
            raise ConfigError(f"feature size {dim} is not divisible by {heads} heads")

        def small(*shape):
            return Tensor((rng.standard_normal(shape) * INIT_STD).astype(dtype), requires_grad=True)

        M = num_modalities
        prototypes = small(M, dim)
        t_obs, t_mis = small(dim), small(dim)
        query_proj = StackedLinear.init(M, 2 * dim, dim, rng, dtype)
        gate = StackedLinear.init(M, 2 * dim, dim if vector_gate else 1, rng, dtype)
        attention = None
        if not literal_attention:
            attention = AttentionParams(*(StackedLinear.init(M, dim, dim, rng, dtype) for _ in range(4)))
        return cls(
            prototypes,
            t_obs,
            t_mis,
            query_proj,
            gate,
            attention,
            Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
            heads,
        )

    @property
    def dim(self) -> int:
        return self.t_obs.shape[0]

    @property
    def literal(self) -> bool:
        return self.attention is None

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = [("prototypes", self.prototypes), ("t_obs", self.t_obs), ("t_mis", self.t_mis)]
        out += [(f"query_proj.{k}", t) for k, t in self.query_proj.tensors()]
        out += [(f"gate.{k}", t) for k, t in self.gate.tensors()]
        if self.attention is not None:
            out += [(f"attention.{k}", t) for k, t in self.attention.tensors()]
        out += [("ln.gain", self.ln_gain), ("ln.shift", self.ln_shift)]
        return out


@dataclass
class AlignedBundle:
    """Aligned features ``z`` (M, B, D), defined for every modality.

    ``alpha`` (M, B, 1 or D) is the calibration gate and is only meaningful
    on rows where the modality is observed. ``weights`` is the full
    (M_target, M_source, B, H) attention array; the target's own column is
    always zero.
    """

    z: Tensor
    alpha: Tensor | None
    h_hat: Tensor | None
    weights: np.ndarray | None

    def context_weights(self, m: int) -> np.ndarray:
        """(B, M-1, H) weights of target ``m`` over its co-modalities in ascending order."""
        ctx = context_indices(m, self.weights.shape[0])
        return np.transpose(self.weights[m][ctx], (1, 0, 2))


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, ModalityMask):
        return mask.as_array()[None, :]
    mask = np.asarray(mask, dtype=bool)
    return mask[None, :] if mask.ndim == 1 else mask


def context_indices(m: int, num_modalities: int) -> list[int]:
    return [j for j in range(num_modalities) if j != m]


def build_queries(mask, params: PRAParams) -> Tensor:
    """Queries for every modality, shape (M, B, D)."""
    mask = _mask_array(mask)
    observed = mask.T[:, :, None]
    token = where(observed, params.t_obs, params.t_mis)
    proto = broadcast_to(reshape(params.prototypes, (mask.shape[1], 1, params.dim)), token.shape)
    return params.query_proj(concat([proto, token], axis=-1))


def build_query(m: int, mask, params: PRAParams) -> Tensor:
    """Query of modality ``m`` from its prototype and availability token, shape (B, D)."""
    mask = _mask_array(mask)
    if not 0 <= m < mask.shape[1]:
        raise ConfigError(f"modality index {m} out of range for {mask.shape[1]} modalities")
    return build_queries(mask, params)[m]


def attend_all(bundle: FeatureBundle, params: PRAParams, queries: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    """Masked cross-attention for every target modality.

    Returns ``(h_hat, weights)`` with ``h_hat`` (M, B, D). A target whose
    co-modalities are all missing gets an exactly zero refinement.
    """
    mask = bundle.mask
    H = bundle.h
    M, B, D = H.shape
    if queries is None:
        queries = build_queries(mask, params)
    heads = params.heads
    d_k = D // heads
    # keep[t, s, b]: source s is observed and is not the target itself
    keep = mask.T[None, :, :] & ~np.eye(M, dtype=bool)[:, :, None]
    if params.literal:
        q = queries
        keys = values = reshape(H, (1, M, B, D))
    else:
        att = params.attention
        q = att.query(queries)
        flat = reshape(H, (1, M * B, D))
        keys = reshape(bmm(flat, att.key.w) + reshape(att.key.b, (M, 1, D)), (M, M, B, D))
        values = reshape(bmm(flat, att.value.w) + reshape(att.value.b, (M, 1, D)), (M, M, B, D))
    q5 = reshape(q, (M, 1, B, heads, d_k))
    k5 = reshape(keys, (keys.shape[0], M, B, heads, d_k))
    v5 = reshape(values, (values.shape[0], M, B, heads, d_k))
    scores = (q5 * k5).sum(axis=-1) * (1.0 / np.sqrt(d_k))  # (M, M, B, heads)
    weights = masked_softmax(scores, keep[..., None], axis=1)
    mixed = reshape((reshape(weights, (M, M, B, heads, 1)) * v5).sum(axis=1), (M, B, D))
    if params.literal:
        return mixed, weights.data
    out = params.attention.output(mixed)
    any_ctx = keep.any(axis=1)[:, :, None]
    return where(any_ctx, out, 0.0), weights.data


def attend(m: int, bundle: FeatureBundle, params: PRAParams) -> tuple[Tensor, np.ndarray]:
    """Refinement of modality ``m`` (B, D) and its (B, M-1, H) context weights."""
    h_hat, weights = attend_all(bundle, params)
    ctx = context_indices(m, bundle.num_modalities)
    return h_hat[m], np.transpose(weights[m][ctx], (1, 0, 2))


def _calibrate(h: Tensor, h_hat: Tensor, observed: np.ndarray, params: PRAParams, index=None):
    alpha = sigmoid(params.gate(concat([h, h_hat], axis=-1), index))
    fused = alpha * h + (1.0 - alpha) * h_hat
    pre = where(observed[:, :, None], fused, h_hat)
    return layer_norm(pre, params.ln_gain, params.ln_shift), alpha


def calibrate(m: int, h: Tensor, h_hat: Tensor, mask, params: PRAParams) -> tuple[Tensor, Tensor]:
    """Gate feature ``h`` (B, D) of modality ``m`` against its refinement, then normalise.

    Rows where ``m`` is missing take the layer norm of the refinement alone.
    """
    mask = _mask_array(mask)
    idx = np.array([m])
    z, alpha = _calibrate(
        reshape(h, (1,) + h.shape), reshape(h_hat, (1,) + h_hat.shape), mask[:, idx].T, params, idx
    )
    return z[0], alpha[0]


def align(bundle: FeatureBundle, params: PRAParams) -> AlignedBundle:
    h_hat, weights = attend_all(bundle, params)
    z, alpha = _calibrate(bundle.h, h_hat, bundle.mask.T, params)
    return AlignedBundle(z, alpha, h_hat, weights)


def bypass(bundle: FeatureBundle) -> AlignedBundle:
    """Alignment switched off: observed rows get a plain layer norm of ``h``, missing rows zeros."""
    D = bundle.h.shape[-1]
    dtype = bundle.h.dtype
    gain = Tensor(np.ones(D, dtype=dtype))
    shift = Tensor(np.zeros(D, dtype=dtype))
    z = where(bundle.mask.T[:, :, None], layer_norm(bundle.h, gain, shift), 0.0)
    return AlignedBundle(z, None, None, None)
