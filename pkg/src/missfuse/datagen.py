"""Synthetic multimodal cohorts with long-tailed, protocol-like missingness.

Every subject has a latent ``u ~ N(center[label], I)``; modality ``m`` sees
``x_m = A_m u + noise`` through a fixed random matrix ``A_m``. Modality 0 is
"tabular-like": low dimensional, low noise and nearly always present.
Train/val masks are drawn from a categorical over the non-empty subsets;
test subjects are fully observed so every subset can be simulated later.

Two optional stressors are off by default. ``nuisance`` adds a per-subject
covariate that shifts the non-tabular views and is recorded only in the
tabular modality. ``burst_rate``/``burst_scale`` inflate the noise of a
random fraction of individual acquisitions.
"""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as kv
from .encoders import ModalityMask, Sample, all_masks
from .errors import ConfigError, ParseError
from .seeding import make_rng

SPLITS = ("train", "val", "test")
FORMAT_NAME = "missfuse-cohort"
FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
TABLE = "samples.csv"

# Mass per observed subset (modality 0 is the leftmost character). Tabular
# alone and tabular plus one scan dominate; the full set is rare.
DEFAULT_SUBSETS = {
    "1000": 0.34,
    "1100": 0.18,
    "1010": 0.10,
    "1001": 0.06,
    "1110": 0.10,
    "1101": 0.05,
    "1011": 0.03,
    "1111": 0.06,
    "0100": 0.03,
    "0110": 0.015,
    "0101": 0.01,
    "0111": 0.01,
    "0010": 0.005,
    "0001": 0.005,
    "0011": 0.005,
}


def subset_probs_from(table: dict[str, float], num_modalities: int) -> tuple[float, ...]:
    """Order a ``{mask string: mass}`` table by ascending mask integer."""
    probs = []
    for mask in all_masks(num_modalities):
        probs.append(float(table.get(str(mask), 0.0)))
    return tuple(probs)


@dataclass
class GenConfig:
    num_classes: int = 3
    dims: tuple[int, ...] = (8, 32, 32, 32)
    latent_dim: int = 16
    separation: float = 1.5
    noise: float = 1.0
    noise_scales: tuple[float, ...] = (0.3, 0.8, 1.5, 2.5)
    class_weights: tuple[float, ...] = ()
    nuisance: float = 0.0
    burst_rate: float = 0.0
    burst_scale: float = 1.0
    subset_probs: tuple[float, ...] = field(default_factory=lambda: subset_probs_from(DEFAULT_SUBSETS, 4))
    n_samples: int = 2800
    split: tuple[float, ...] = (20.0, 3.0, 5.0)
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.noise_scales = tuple(float(s) for s in self.noise_scales)
        self.class_weights = tuple(float(w) for w in self.class_weights)
        self.subset_probs = tuple(float(p) for p in self.subset_probs)
        self.split = tuple(float(s) for s in self.split)

    @property
    def num_modalities(self) -> int:
        return len(self.dims)

    def validate(self) -> None:
        M = self.num_modalities
        if M < 1 or M > 8:
            raise ConfigError(f"between 1 and 8 modalities supported, got {M}")
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"modality dimensions must be positive: {self.dims}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.separation < 0 or self.noise < 0:
            raise ConfigError("separation and noise must be non-negative")
        if len(self.noise_scales) != M or any(s < 0 for s in self.noise_scales):
            raise ConfigError(f"noise_scales needs {M} non-negative entries, got {self.noise_scales}")
        if self.nuisance < 0:
            raise ConfigError("nuisance must be non-negative")
        if not 0 <= self.burst_rate <= 1 or self.burst_scale < 0:
            raise ConfigError("burst_rate must lie in [0, 1] and burst_scale be non-negative")
        weights = self.weights()
        if len(weights) != self.num_classes or np.any(weights < 0) or weights.sum() <= 0:
            raise ConfigError(f"class_weights needs {self.num_classes} non-negative entries")
        probs = np.asarray(self.subset_probs)
        if probs.shape != (2**M - 1,):
            raise ConfigError(f"subset distribution needs {2**M - 1} entries, got {probs.size}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)) or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError(f"subset distribution must be non-negative and sum to 1 (sum={probs.sum()!r})")
        if probs[-1] <= 0:
            raise ConfigError("subset distribution must give the full-observation mask nonzero mass")
        ratios = np.asarray(self.split)
        if ratios.shape != (3,) or np.any(ratios < 0) or not np.all(np.isfinite(ratios)) or ratios.sum() <= 0:
            raise ConfigError(f"split needs three non-negative ratios (train:val:test), got {self.split}")
        if self.n_samples < 0:
            raise ConfigError("n_samples must be non-negative")

    def weights(self) -> np.ndarray:
        if not self.class_weights:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        w = np.asarray(self.class_weights, dtype=float)
        return w / w.sum() if w.sum() > 0 else w

    def split_sizes(self) -> tuple[int, int, int]:
        ratios = np.asarray(self.split, dtype=float)
        return tuple(int(n) for n in largest_remainder(self.n_samples, ratios / ratios.sum()))

    def availability(self) -> np.ndarray:
        """Marginal probability that each modality is observed in train/val."""
        probs = np.asarray(self.subset_probs)
        masks = np.array([m.bits for m in all_masks(self.num_modalities)], dtype=float)
        return probs @ masks


def largest_remainder(total: int, fractions: np.ndarray, offset: int = 0) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``total * fractions``.

    Ties in the remainders go to the entry first reached from ``offset``.
    """
    ideal = total * np.asarray(fractions, dtype=float)
    counts = np.floor(ideal + 1e-9).astype(int)
    short = total - counts.sum()
    k = len(fractions)
    rem = ideal - counts
    order = sorted(range(k), key=lambda i: (-round(rem[i], 9), (i - offset) % k))
    for i in order[:short]:
        counts[i] += 1
    return counts


@dataclass(eq=False)
class Cohort:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    config: GenConfig

    def split(self, name: str) -> list[Sample]:
        return getattr(self, name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Cohort):
            return NotImplemented
        return self.config == other.config and all(self.split(s) == other.split(s) for s in SPLITS)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.config.dims

    @property
    def num_classes(self) -> int:
        return self.config.num_classes


def generate(config: GenConfig) -> Cohort:
    config.validate()
    rng = make_rng(config.seed, "datagen")
    M, C, du = config.num_modalities, config.num_classes, config.latent_dim
    directions = rng.standard_normal((C, du))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = config.separation * directions
    mixing = [rng.standard_normal((d, du)) / np.sqrt(du) for d in config.dims]
    noise_std = [config.noise * s for s in config.noise_scales]
    # nuisance direction: inside the span of the class centres, so views
    # cannot project it away; modality 0 records the covariate directly
    basis, _ = np.linalg.qr(centers.T)
    confound = basis @ rng.standard_normal(basis.shape[1])
    confound /= np.linalg.norm(confound)
    record = rng.standard_normal(config.dims[0])
    record /= np.linalg.norm(record)
    masks = all_masks(M)
    probs = np.asarray(config.subset_probs)
    probs = probs / probs.sum()
    weights = config.weights()

    splits = {}
    for k, (name, size) in enumerate(zip(SPLITS, config.split_sizes())):
        counts = largest_remainder(size, weights, offset=k)
        labels = rng.permutation(np.repeat(np.arange(C), counts))
        u = centers[labels] + rng.standard_normal((size, du))
        covariate = rng.standard_normal(size)
        views = []
        for m, A in enumerate(mixing):
            std = noise_std[m] * np.where(rng.random(size) < config.burst_rate, config.burst_scale, 1.0)
            noise = std[:, None] * rng.standard_normal((size, A.shape[0]))
            if m == 0:
                x = u @ A.T + config.nuisance * covariate[:, None] * record
            else:
                x = (u + config.nuisance * covariate[:, None] * confound) @ A.T
            views.append((x + noise).astype(np.float32))
        if name == "test":
            codes = np.full(size, len(masks) - 1)
        else:
            codes = rng.choice(len(masks), size=size, p=probs)
        samples = []
        for i in range(size):
            mask = masks[codes[i]]
            feats = [views[m][i].copy() if mask.bits[m] else None for m in range(M)]
            samples.append(Sample(feats, mask, int(labels[i])))
        splits[name] = samples
    return Cohort(splits["train"], splits["val"], splits["test"], dataclasses.replace(config))


# file format


def _fmt(x: np.float32) -> str:
    return f"{float(x):.9g}"


def write_cohort(cohort: Cohort, path: str | Path) -> None:
    """Write ``manifest.txt`` and ``samples.csv`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = cohort.config
    counts = {s: len(cohort.split(s)) for s in SPLITS}
    lines = [
        f"format={FORMAT_NAME}",
        f"version={FORMAT_VERSION}",
        f"M={cfg.num_modalities}",
        f"dims={','.join(str(d) for d in cfg.dims)}",
        f"C={cfg.num_classes}",
    ]
    lines += [f"n_{s}={counts[s]}" for s in SPLITS]
    lines += kv.dump(cfg, "gen.")
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")

    M = cfg.num_modalities
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "split", "label"] + [f"mask{m}" for m in range(M)] + [f"x{m}" for m in range(M)])
    row_id = 0
    for s in SPLITS:
        for sample in cohort.split(s):
            bits = [str(int(b)) for b in sample.mask.bits]
            feats = ["" if x is None else " ".join(_fmt(v) for v in x) for x in sample.features]
            writer.writerow([row_id, s, sample.label] + bits + feats)
            row_id += 1
    (path / TABLE).write_text(buf.getvalue(), encoding="utf-8")


def _read_manifest(path: Path) -> tuple[dict[str, str], GenConfig]:
    try:
        entries = kv.parse_lines(path.read_text(encoding="utf-8"), str(path))
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    values = {k: v for k, (v, _) in entries.items()}
    for key in ("format", "version", "M", "dims", "C", "n_train", "n_val", "n_test"):
        if key not in values:
            raise ParseError(f"manifest {path} lacks key {key!r}", field=key)
    if values["format"] != FORMAT_NAME:
        raise ParseError(f"unknown format {values['format']!r}", line=entries["format"][1], field="format")
    if values["version"] != str(FORMAT_VERSION):
        raise ParseError(f"unsupported version {values['version']!r}", line=entries["version"][1], field="version")
    try:
        gen = kv.load(GenConfig, values, "gen.")
    except Exception as exc:
        raise ParseError(f"manifest {path}: {exc}") from exc
    for key, expect in (("M", gen.num_modalities), ("C", gen.num_classes)):
        if values[key] != str(expect):
            raise ParseError(f"{key}={values[key]} disagrees with generator settings", line=entries[key][1], field=key)
    if values["dims"] != ",".join(str(d) for d in gen.dims):
        raise ParseError("dims disagree with generator settings", line=entries["dims"][1], field="dims")
    return values, gen


def read_cohort(path: str | Path) -> Cohort:
    path = Path(path)
    values, gen = _read_manifest(path / MANIFEST)
    M, C, dims = gen.num_modalities, gen.num_classes, gen.dims
    header = ["id", "split", "label"] + [f"mask{m}" for m in range(M)] + [f"x{m}" for m in range(M)]
    try:
        text = (path / TABLE).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read table {path / TABLE}: {exc}") from exc
    rows = csv.reader(io.StringIO(text))
    splits: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    first = next(rows, None)
    if first != header:
        raise ParseError(f"table header must be {','.join(header)}", line=1)
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        rec = dict(zip(header, row))
        try:
            int(rec["id"])
        except ValueError:
            raise ParseError(f"id is not an integer: {rec['id']!r}", line=lineno, field="id") from None
        if rec["split"] not in splits:
            raise ParseError(f"unknown split {rec['split']!r}", line=lineno, field="split")
        try:
            label = int(rec["label"])
        except ValueError:
            raise ParseError(f"label is not an integer: {rec['label']!r}", line=lineno, field="label") from None
        if not 0 <= label < C:
            raise ParseError(f"label {label} outside [0, {C})", line=lineno, field="label")
        bits = []
        for m in range(M):
            b = rec[f"mask{m}"]
            if b not in ("0", "1"):
                raise ParseError(f"mask bit must be 0 or 1, got {b!r}", line=lineno, field=f"mask{m}")
            bits.append(b == "1")
        feats: list[np.ndarray | None] = []
        for m in range(M):
            name = f"x{m}"
            raw = rec[name].strip()
            if not bits[m]:
                if raw:
                    raise ParseError("features present for a missing modality", line=lineno, field=name)
                feats.append(None)
                continue
            try:
                vec = np.array([np.float32(v) for v in raw.split()], dtype=np.float32)
            except ValueError:
                raise ParseError("non-numeric feature value", line=lineno, field=name) from None
            if vec.shape != (dims[m],):
                raise ParseError(f"expected {dims[m]} values, got {vec.size}", line=lineno, field=name)
            feats.append(vec)
        splits[rec["split"]].append(Sample(feats, ModalityMask(tuple(bits)), label))
    for s in SPLITS:
        if len(splits[s]) != int(values[f"n_{s}"]):
            raise ParseError(f"manifest says n_{s}={values[f'n_{s}']} but table has {len(splits[s])} rows", field=f"n_{s}")
    return Cohort(splits["train"], splits["val"], splits["test"], gen)
