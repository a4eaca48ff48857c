"""Model configuration, parameter container and the full forward pass."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .diffcore import Tensor, no_grad
from .encoders import Batch, EncoderParams, FeatureBundle, encode_batch
from .errors import ConfigError
from .pra import AlignedBundle, PRAParams, align, bypass
from .uapoe import (
    ClassifierParams,
    FusedPosterior,
    GaussianExpert,
    draw_noise,
    experts_all,
    fuse,
    predict,
)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    dims: tuple[int, ...] = (8, 32, 32, 32)
    num_classes: int = 3
    d_model: int = 64
    latent_dim: int = 0  # 0 means "same as d_model"
    heads: int = 4
    hidden: int = 0  # 0 means 2 * d_model
    literal_attention: bool = False
    vector_gate: bool = False
    disable_pra: bool = False
    disable_uapoe_variance: bool = False
    deterministic_inference: bool = False
    precision: str = "float32"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if not self.dims or any(d < 1 for d in self.dims):
            raise ConfigError(f"modality dimensions must be positive, got {self.dims}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.d_model < 2:
            raise ConfigError("d_model must be at least 2")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        heads = 1 if self.literal_attention else self.heads
        if heads < 1 or self.d_model % heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by {heads} heads")

    @property
    def num_modalities(self) -> int:
        return len(self.dims)

    @property
    def latent(self) -> int:
        return self.latent_dim or self.d_model

    @property
    def hidden_width(self) -> int:
        return self.hidden or 2 * self.d_model

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


@dataclass
class Forward:
    probs: Tensor
    posterior: FusedPosterior
    experts: GaussianExpert  # stacked, leading axis is the modality
    aligned: AlignedBundle
    features: FeatureBundle


class ModelParams:
    """All trainable tensors: encoders, alignment (absent when disabled) and classifier."""

    def __init__(self, config: ModelConfig, encoders: list[EncoderParams], pra: PRAParams | None, classifier: ClassifierParams):
        self.config = config
        self.encoders = encoders
        self.pra = pra
        self.classifier = classifier

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        dtype = config.dtype
        D = config.d_model
        encoders = [EncoderParams.init(d, config.hidden_width, D, rng, dtype) for d in config.dims]
        pra = None
        if not config.disable_pra:
            pra = PRAParams.init(
                config.num_modalities,
                D,
                rng,
                heads=config.heads,
                literal_attention=config.literal_attention,
                vector_gate=config.vector_gate,
                dtype=dtype,
            )
        classifier = ClassifierParams.init(config.num_modalities, D, config.latent, config.num_classes, rng, dtype)
        return cls(config, encoders, pra, classifier)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for m, enc in enumerate(self.encoders):
            out += [(f"encoder.{m}.{k}", t) for k, t in enc.tensors()]
        if self.pra is not None:
            out += [(f"pra.{k}", t) for k, t in self.pra.tensors()]
        out += [(f"classifier.{k}", t) for k, t in self.classifier.tensors()]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def copy(self) -> "ModelParams":
        clone = ModelParams.init(self.config, 0)
        for (_, dst), (_, src) in zip(clone.named_tensors(), self.named_tensors()):
            dst.data = src.data.copy()
        return clone

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors():
            t.data = np.array(state[name], dtype=self.config.dtype).reshape(t.shape)

    def forward(
        self,
        batch: Batch,
        *,
        samples: int = 10,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
        deterministic: bool | None = None,
    ) -> Forward:
        cfg = self.config
        if deterministic is None:
            deterministic = cfg.deterministic_inference
        features = encode_batch(batch.xs, batch.mask, self.encoders)
        aligned = bypass(features) if self.pra is None else align(features, self.pra)
        experts = experts_all(aligned.z, self.classifier, fixed_variance=cfg.disable_uapoe_variance)
        post = fuse(experts)
        if not deterministic and noise is None:
            if rng is None:
                raise ConfigError("stochastic forward pass needs rng or noise")
            noise = draw_noise(post, samples, rng)
        probs = predict(post, samples, self.classifier, noise=noise, deterministic=deterministic)
        return Forward(probs, post, experts, aligned, features)

    def predict_proba(
        self,
        batch: Batch,
        *,
        samples: int = 10,
        rng: np.random.Generator | None = None,
        deterministic: bool | None = None,
        chunk: int = 512,
    ) -> np.ndarray:
        """Inference-mode class probabilities, computed in row chunks."""
        out = []
        with no_grad():
            for start in range(0, len(batch), chunk):
                rows = np.arange(start, min(start + chunk, len(batch)))
                fwd = self.forward(batch.subset(rows), samples=samples, rng=rng, deterministic=deterministic)
                out.append(fwd.probs.data)
        if not out:
            return np.zeros((0, self.config.num_classes), dtype=self.config.dtype)
        return np.concatenate(out, axis=0)

