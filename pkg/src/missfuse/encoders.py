"""Per-modality encoders into the shared feature space, with zero placeholders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Linear, Tensor, relu, scatter_rows, stack
from .errors import DataError


@dataclass(frozen=True)
class ModalityMask:
    """Which of the M modalities a sample has. Bit ``m`` is modality ``m``."""

    bits: tuple[bool, ...]

    @classmethod
    def from_int(cls, code: int, num_modalities: int) -> "ModalityMask":
        return cls(tuple(bool((code >> m) & 1) for m in range(num_modalities)))

    @classmethod
    def parse(cls, text: str) -> "ModalityMask":
        if not text or any(ch not in "01" for ch in text):
            raise DataError(f"mask string must be a non-empty run of 0/1, got {text!r}")
        return cls(tuple(ch == "1" for ch in text))

    @classmethod
    def full(cls, num_modalities: int) -> "ModalityMask":
        return cls((True,) * num_modalities)

    def to_int(self) -> int:
        return sum(1 << m for m, bit in enumerate(self.bits) if bit)

    @property
    def observed(self) -> tuple[int, ...]:
        return tuple(m for m, bit in enumerate(self.bits) if bit)

    def is_empty(self) -> bool:
        return not any(self.bits)

    def __len__(self) -> int:
        return len(self.bits)

    def __str__(self) -> str:
        # modality 0 is the leftmost character
        return "".join("1" if b else "0" for b in self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=bool)


def all_masks(num_modalities: int) -> list[ModalityMask]:
    """Every non-empty mask, in ascending integer order."""
    return [ModalityMask.from_int(code, num_modalities) for code in range(1, 2**num_modalities)]


@dataclass(eq=False)
class Sample:
    features: list[np.ndarray | None]
    mask: ModalityMask
    label: int

    def __post_init__(self):
        if len(self.features) != len(self.mask):
            raise DataError(f"{len(self.features)} feature slots for a {len(self.mask)}-modality mask")
        for m, (x, bit) in enumerate(zip(self.features, self.mask.bits)):
            if (x is not None) != bit:
                state = "present" if x is not None else "absent"
                raise DataError(f"modality {m} features are {state} but mask bit is {int(bit)}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        if self.mask != other.mask or self.label != other.label:
            return False
        for a, b in zip(self.features, other.features):
            if a is None or b is None:
                if a is not b:
                    return False
            elif a.dtype != b.dtype or not np.array_equal(a, b):
                return False
        return True

    def remasked(self, mask: ModalityMask) -> "Sample":
        """Copy with modalities outside ``mask`` dropped. Needs the modalities kept to be present."""
        feats = []
        for m, keep in enumerate(mask.bits):
            if keep and self.features[m] is None:
                raise DataError(f"cannot re-mask: modality {m} is not observed in the source sample")
            feats.append(self.features[m] if keep else None)
        return Sample(feats, mask, self.label)


@dataclass
class Batch:
    """Dense arrays for a list of samples; missing modalities are zero rows."""

    xs: list[np.ndarray]
    mask: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, rows: np.ndarray) -> "Batch":
        return Batch([x[rows] for x in self.xs], self.mask[rows], self.labels[rows])

    def with_mask(self, mask: ModalityMask) -> "Batch":
        """Force every row to ``mask``; requires the source rows to observe those modalities."""
        keep = mask.as_array()
        if np.any(~self.mask[:, keep]):
            raise DataError("cannot re-mask rows that lack a requested modality")
        xs = [x if k else np.zeros_like(x) for x, k in zip(self.xs, keep)]
        return Batch(xs, np.broadcast_to(keep, self.mask.shape).copy(), self.labels)


def collate(samples: Sequence[Sample], dims: Sequence[int], dtype=np.float32) -> Batch:
    n = len(samples)
    xs = [np.zeros((n, d), dtype=dtype) for d in dims]
    mask = np.zeros((n, len(dims)), dtype=bool)
    labels = np.zeros(n, dtype=np.int64)
    for i, s in enumerate(samples):
        if len(s.features) != len(dims):
            raise DataError(f"sample {i} has {len(s.features)} modalities, expected {len(dims)}")
        for m, x in enumerate(s.features):
            if x is None:
                continue
            if x.shape != (dims[m],):
                raise DataError(f"modality {m}: expected {dims[m]} features, got shape {x.shape} (sample {i})")
            xs[m][i] = x
        mask[i] = s.mask.bits
        labels[i] = s.label
    return Batch(xs, mask, labels)


class EncoderParams:
    """Two-layer rectifier perceptron ``d_m -> hidden -> D``."""

    def __init__(self, first: Linear, second: Linear):
        self.first = first
        self.second = second

    @classmethod
    def init(cls, d_in: int, hidden: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        return cls(Linear.init(d_in, hidden, rng, dtype), Linear.init(hidden, d_out, rng, dtype))

    @property
    def d_in(self) -> int:
        return self.first.w.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(relu(self.first(x)))

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [(f"first.{k}", t) for k, t in self.first.tensors()] + [
            (f"second.{k}", t) for k, t in self.second.tensors()
        ]


@dataclass
class FeatureBundle:
    """Unified features ``h`` of shape (M, B, D) and the (B, M) boolean mask.

    ``h[m]`` is the (B, D) block of modality ``m``; it is zero on rows where
    the modality is missing.
    """

    h: Tensor
    mask: np.ndarray

    @property
    def num_modalities(self) -> int:
        return self.h.shape[0]


def encode_batch(xs: Sequence[np.ndarray], mask: np.ndarray, encoders: Sequence[EncoderParams]) -> FeatureBundle:
    """Run each encoder on the rows where its modality is observed only.

    Missing rows are exact zeros and never touch the encoder, so they add
    nothing to its gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    if len(xs) != len(encoders):
        raise DataError(f"{len(xs)} modality inputs for {len(encoders)} encoders")
    h = []
    for m, (x, enc) in enumerate(zip(xs, encoders)):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != enc.d_in:
            raise DataError(f"modality {m}: expected {enc.d_in} features per row, got shape {x.shape}")
        d_out = enc.second.w.shape[1]
        rows = np.flatnonzero(mask[:, m])
        if rows.size == 0:
            h.append(Tensor(np.zeros((n, d_out), dtype=enc.second.w.dtype)))
            continue
        obs = Tensor(x[rows].astype(enc.first.w.dtype, copy=False))
        h.append(scatter_rows(enc(obs), rows, n))
    return FeatureBundle(stack(h, axis=0), mask)


def encode(sample: Sample, params) -> FeatureBundle:
    """Encode one sample into a single-row bundle. ``params`` is a ModelParams or encoder list."""
    encoders = getattr(params, "encoders", params)
    dims = [enc.d_in for enc in encoders]
    for m, x in enumerate(sample.features):
        if x is not None and np.shape(x) != (dims[m],):
            raise DataError(f"modality {m}: expected {dims[m]} features, got shape {np.shape(x)}")
    batch = collate([sample], dims, dtype=encoders[0].first.w.dtype)
    return encode_batch(batch.xs, batch.mask, encoders)
