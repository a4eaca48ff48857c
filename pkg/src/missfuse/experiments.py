"""Ablation and Monte Carlo sample-count sweeps over several training seeds."""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datagen import Cohort
from .encoders import collate
from .evalkit import METRICS, EvalConfig, EvalSummary, evaluate_all, format_mean_std
from .model import ModelConfig
from .training import TrainConfig, train

# variant name -> (model overrides, train overrides)
VARIANTS: dict[str, tuple[dict, dict]] = {
    "full": ({}, {}),
    "no_pra": ({"disable_pra": True}, {}),
    "no_uapoe": ({"disable_uapoe_variance": True}, {}),
    "no_mc": ({"deterministic_inference": True}, {"train_mc": False}),
}

LABELS = {
    "full": "full",
    "no_pra": "w/o PRA",
    "no_uapoe": "w/o UA-PoE",
    "no_mc": "w/o MC",
}


@dataclass
class AblationConfig:
    seeds: tuple[int, ...] = ()  # empty: root seed, root + 1, root + 2
    variants: tuple[str, ...] = ("full", "no_pra", "no_uapoe", "no_mc")
    sweep: tuple[int, ...] = (1, 2, 5, 10, 20)

    def resolved_seeds(self, root: int) -> tuple[int, ...]:
        return self.seeds or (root, root + 1, root + 2)


@dataclass
class Aggregate:
    """Seed-level averages (over subsets) of each metric, with mean and population std."""

    per_seed: dict[int, dict[str, float]] = field(default_factory=dict)

    def add(self, seed: int, summary: EvalSummary) -> None:
        self.per_seed[seed] = {m: summary.averages[seed][m] for m in METRICS}

    def mean(self, metric: str) -> float:
        return float(np.mean([v[metric] for v in self.per_seed.values()]))

    def std(self, metric: str) -> float:
        return float(np.std([v[metric] for v in self.per_seed.values()]))


@dataclass
class AblationResult:
    variants: dict[str, Aggregate]
    sweep: dict[int, Aggregate]
    epochs: dict[str, dict[int, int]]


def variant_configs(name: str, model: ModelConfig, train_cfg: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    m_over, t_over = VARIANTS[name]
    return dataclasses.replace(model, **m_over), dataclasses.replace(train_cfg, **t_over)


def run_ablation(
    cohort: Cohort,
    model: ModelConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    config: AblationConfig,
    root_seed: int = 0,
    progress: Callable[[str], None] | None = None,
) -> AblationResult:
    """Train every variant once per seed and score it on all subsets.

    The sample-count sweep reuses the full models: only inference changes.
    """
    seeds = config.resolved_seeds(root_seed)
    dtype = model.dtype
    train_b = collate(cohort.train, cohort.dims, dtype)
    val_b = collate(cohort.val, cohort.dims, dtype)
    test_b = collate(cohort.test, cohort.dims, dtype)
    variants = {name: Aggregate() for name in config.variants}
    sweep = {L: Aggregate() for L in config.sweep}
    epochs: dict[str, dict[int, int]] = {name: {} for name in config.variants}
    for name in config.variants:
        for seed in seeds:
            mcfg, tcfg = variant_configs(name, model, dataclasses.replace(train_cfg, seed=seed))
            result = train(train_b, val_b, mcfg, tcfg)
            epochs[name][seed] = result.epochs_run
            ecfg = dataclasses.replace(eval_cfg, seeds=(seed,))
            summary = evaluate_all(result.params, test_b, ecfg)
            variants[name].add(seed, summary)
            if progress:
                progress(f"{name} seed={seed} epochs={result.epochs_run} acc={summary.averages[seed]['acc']:.4f}")
            if name == "full":
                for L in config.sweep:
                    s = evaluate_all(result.params, test_b, dataclasses.replace(ecfg, samples=L))
                    sweep[L].add(seed, s)
    return AblationResult(variants, sweep, epochs)


def _table(rows: list[tuple[str, Aggregate]], head: str) -> str:
    lines = [f"{head:<14}{'ACC':>16}{'Macro-F1':>16}{'AUC':>16}"]
    for label, agg in rows:
        cells = "".join(f"{format_mean_std(agg.mean(m), agg.std(m)):>16}" for m in METRICS)
        lines.append(f"{label:<14}{cells}")
    return "\n".join(lines) + "\n"


def ablation_table(result: AblationResult) -> str:
    return _table([(LABELS.get(n, n), a) for n, a in result.variants.items()], "variant")


def sweep_table(result: AblationResult) -> str:
    return _table([(f"L={L}", a) for L, a in result.sweep.items()], "samples")


def result_csv(result: AblationResult) -> str:
    out = io.StringIO()
    out.write("kind,name,seed," + ",".join(METRICS) + "\n")
    groups = [("variant", n, a) for n, a in result.variants.items()]
    groups += [("sweep", str(L), a) for L, a in result.sweep.items()]
    for kind, name, agg in groups:
        for seed, vals in agg.per_seed.items():
            out.write(f"{kind},{name},{seed}," + ",".join(f"{vals[m]:.10g}" for m in METRICS) + "\n")
    return out.getvalue()
