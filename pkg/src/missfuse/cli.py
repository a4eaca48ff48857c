"""Command-line entry point: generate, train, eval, ablate, verify.

Settings come from four layers, later ones winning: dataclass defaults, a
``key=value`` file given with ``--config``, the ``MISSFUSE_SEED`` environment
variable (root seed only) and command-line flags. Every field can be set as
``--section.field`` (e.g. ``--train.beta 0``); names that are unique across
sections also accept the bare form (``--beta 0``, ``--disable_pra``).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import config as kv
from .datagen import SPLITS, Cohort, GenConfig, generate, read_cohort, write_cohort
from .errors import ConfigError, MissfuseError
from .evalkit import EvalConfig, evaluate_all, report_csv, report_table
from .experiments import AblationConfig, ablation_table, result_csv, run_ablation, sweep_table
from .model import ModelConfig
from .training import TrainConfig, format_history, read_checkpoint, train, write_checkpoint

ENV_SEED = "MISSFUSE_SEED"
SECTIONS = {"gen": GenConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig, "ablate": AblationConfig}
# fields whose value is taken from the cohort rather than from settings
DERIVED = {"model.dims", "model.num_classes"}
# per-section seeds default to the root seed unless set explicitly
SEEDED = ("gen.seed", "train.seed")


@dataclass
class RunConfig:
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblationConfig = field(default_factory=AblationConfig)

    def lines(self) -> list[str]:
        out = [f"seed={self.seed}"]
        for name in SECTIONS:
            out += kv.dump(getattr(self, name), f"{name}.")
        return out


def resolve(layers: Sequence[dict[str, str]]) -> RunConfig:
    """Merge raw ``key -> value`` layers (lowest precedence first) into a RunConfig."""
    merged: dict[str, str] = {}
    for layer in layers:
        merged.update(layer)
    known = {"seed"} | {f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in dataclasses.fields(cls)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown setting(s): {', '.join(unknown)}")
    root = kv.convert(merged["seed"], int, "seed") if "seed" in merged else 0
    for key in SEEDED:
        merged.setdefault(key, str(root))
    merged.setdefault("eval.seeds", str(root))
    sections = {name: kv.load(cls, merged, f"{name}.") for name, cls in SECTIONS.items()}
    return RunConfig(seed=root, **sections)


# argument parsing


def _field_index() -> dict[str, list[str]]:
    index: dict[str, list[str]] = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            key = f"{section}.{f.name}"
            if key not in DERIVED:
                index.setdefault(f.name, []).append(key)
    return index


def _add_setting_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("settings (override the config file)")
    group.add_argument("--seed", dest="set:seed", metavar="N", help="root seed")
    index = _field_index()
    types = {f"{s}.{name}": tp for s, cls in SECTIONS.items() for name, tp in kv.field_types(cls).items()}
    for name, keys in index.items():
        for key in keys:
            names = [f"--{key}"]
            if len(keys) == 1 and name != "seed":
                names += [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
            extra = {"nargs": "?", "const": "true"} if types[key] is bool else {}
            group.add_argument(*names, dest=f"set:{key}", metavar="V", **extra)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="missfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="FILE", help="key=value settings file")
        _add_setting_flags(p)
        return p

    p = command("generate", "write a synthetic cohort")
    p.add_argument("--out", default="cohort", help="output directory")

    p = command("train", "train a model and write a checkpoint plus history")
    p.add_argument("--cohort", help="cohort directory (default: generate from gen.* settings)")
    p.add_argument("--out", default="run", help="output directory")

    p = command("eval", "score a checkpoint on every observed subset of the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", help="cohort directory (default: generate from gen.* settings)")
    p.add_argument("--out", default="report", help="output directory")

    p = command("ablate", "train all variants over several seeds and sweep the sample count")
    p.add_argument("--cohort", help="cohort directory (default: generate from gen.* settings)")
    p.add_argument("--out", default="ablation", help="output directory")

    p = sub.add_parser("verify", help="run the numerical verification suite")
    p.add_argument("--inject-fault", choices=["fuse_sign"], help="deliberately break a component (self-test)")
    return parser


def run_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    layers = []
    if getattr(args, "config", None):
        layers.append({k: v for k, (v, _) in kv.read_kv(args.config).items()})
    if environ.get(ENV_SEED):
        layers.append({"seed": environ[ENV_SEED]})
    layers.append({k[4:]: v for k, v in vars(args).items() if k.startswith("set:") and v is not None})
    return resolve(layers)


# commands


def _write(path: Path, text: str | bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(text, bytes):
        tmp.write_bytes(text)
    else:
        tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _cohort(args, cfg: RunConfig) -> Cohort:
    if args.cohort:
        return read_cohort(args.cohort)
    return generate(cfg.gen)


def _model_config(cfg: RunConfig, cohort: Cohort) -> ModelConfig:
    return dataclasses.replace(cfg.model, dims=cohort.dims, num_classes=cohort.num_classes)


def cmd_generate(args, cfg: RunConfig) -> int:
    cohort = generate(cfg.gen)
    out = Path(args.out)
    write_cohort(cohort, out)
    M = cfg.gen.num_modalities
    print(f"wrote cohort to {out}")
    for name in SPLITS:
        samples = cohort.split(name)
        if samples:
            rates = [sum(s.mask.bits[m] for s in samples) / len(samples) for m in range(M)]
        else:
            rates = [0.0] * M
        avail = " ".join(f"m{m}={r:.3f}" for m, r in enumerate(rates))
        print(f"{name:<6} n={len(samples):<6} availability {avail}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    cohort = _cohort(args, cfg)
    model = _model_config(cfg, cohort)
    start = time.perf_counter()
    result = train(cohort.train, cohort.val, model, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"train": dict(line.split("=", 1) for line in kv.dump(cfg.train)), "best_epoch": result.best_epoch}
    write_checkpoint_atomic(out / "checkpoint.bin", result, meta)
    _write(out / "history.tsv", format_history(result.history))
    _write(out / "config.txt", "\n".join(cfg.lines()) + "\n")
    best = result.history[result.best_epoch]
    print(f"trained {result.epochs_run} epochs; best epoch {result.best_epoch} val macro-F1 {best.val_macro_f1:.4f}")
    print(f"# {time.perf_counter() - start:.1f}s")
    return 0


def write_checkpoint_atomic(path: Path, result, meta: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write_checkpoint(tmp, result.params, meta)
    os.replace(tmp, path)


def cmd_eval(args, cfg: RunConfig) -> int:
    if not Path(args.checkpoint).is_file():
        raise MissfuseError(f"checkpoint not found: {args.checkpoint}")
    params, _ = read_checkpoint(args.checkpoint)
    cohort = _cohort(args, cfg)
    if cohort.dims != params.config.dims or cohort.num_classes != params.config.num_classes:
        raise MissfuseError("checkpoint and cohort disagree on modality dimensions or class count")
    summary = evaluate_all(params, cohort.test, cfg.eval)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = report_table(summary)
    _write(out / "report.csv", report_csv(summary, params.config.num_classes))
    _write(out / "report.txt", table)
    print(table, end="")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    cohort = _cohort(args, cfg)
    model = _model_config(cfg, cohort)
    start = time.perf_counter()
    result = run_ablation(cohort, model, cfg.train, cfg.eval, cfg.ablate, cfg.seed, progress=lambda s: print(f"# {s}", flush=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = "average over observed subsets, mean (std) over seeds, %\n\n" + ablation_table(result) + "\n" + sweep_table(result)
    _write(out / "ablation.txt", text)
    _write(out / "ablation.csv", result_csv(result))
    print(text, end="")
    print(f"# {time.perf_counter() - start:.1f}s")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    start = time.perf_counter()
    results = run_checks(args.inject_fault, emit=lambda line: print(line, flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    print(f"# {time.perf_counter() - start:.1f}s")
    return 1 if failed else 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args)
        cfg = run_config(args)
        return COMMANDS[args.command](args, cfg)
    except MissfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
