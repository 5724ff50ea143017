"""Baseline versus mask-consistency fine-tuning on the synthetic hard benchmark.

Each seed pretrains one model on captions alone (MLM + ITM + ITC), then
fine-tunes copies of it under every requested variant and scores the pointing
game on a held-out split. Run ``python -m amcground.experiment`` for a table.
"""
from __future__ import annotations

import argparse
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .errors import ValidationError
from .evalkit import EvalReport
from .groundata import detect_split_overlap, generate_dataset
from .microvlm import ModelConfig
from .objectives import LossConfig
from .train import TrainConfig, pointing_accuracy, train


VARIANTS = ("baseline", "amc", "max", "mean", "cosine")


@dataclass
class ExperimentConfig:
    train_count: int = 2000
    eval_count: int = 500
    data_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    pretrain_epochs: int = 5
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    # raw GradCAM values are ~1e-5, so the margin term needs a large weight to
    # compete with the pretraining losses
    w_amc: float = 100.0
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class RunResult:
    seed: int
    variant: str
    pointing: float
    seconds: float
    report: EvalReport | None = None


def split_data(cfg: ExperimentConfig):
    """One generator seed; the first ``train_count`` samples train, the rest evaluate."""
    data = generate_dataset(cfg.data_seed, cfg.train_count + cfg.eval_count, "hard")
    train_set, eval_set = data[:cfg.train_count], data[cfg.train_count:]
    for t in eval_set:
        t.split = "val"
    overlap = detect_split_overlap((t.id for t in train_set), (t.id for t in eval_set))
    if overlap:
        raise ValidationError(f"train and eval splits share ids {overlap[:5]}")
    return train_set, eval_set


def _train_config(cfg: ExperimentConfig, seed: int, epochs: int, loss: LossConfig) -> TrainConfig:
    model = ModelConfig(**{**cfg.model.to_dict(), "seed": seed})
    return TrainConfig(batch_size=cfg.batch_size, lr=cfg.lr, epochs=epochs, seed=seed,
                       dtype=cfg.dtype, loss=loss, model=model)


def variant_loss(cfg: ExperimentConfig, variant: str) -> LossConfig:
    if variant == "baseline":
        return LossConfig(w_amc=0.0)
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    return LossConfig(w_amc=cfg.w_amc, amc_variant=variant)


def run(cfg: ExperimentConfig, variants: Iterable[str] = ("baseline", "amc"),
        on_result: Callable[[RunResult], None] | None = None, train_set=None,
        eval_set=None) -> list[RunResult]:
    if train_set is None or eval_set is None:
        train_set, eval_set = split_data(cfg)
    variants = list(variants)
    results = []
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        pre = train(_train_config(cfg, seed, cfg.pretrain_epochs, LossConfig(w_amc=0.0)), train_set)
        start = pre.params.arrays()
        pre_seconds = time.perf_counter() - t0
        pre_report = pointing_accuracy(pre.params, eval_set)
        res = RunResult(seed, "pretrained", pre_report.overall, pre_seconds, pre_report)
        results.append(res)
        if on_result:
            on_result(res)
        for variant in variants:
            t0 = time.perf_counter()
            out = train(_train_config(cfg, seed, cfg.epochs, variant_loss(cfg, variant)), train_set,
                        initial_params=start)
            report = pointing_accuracy(out.params, eval_set)
            res = RunResult(seed, variant, report.overall, time.perf_counter() - t0, report)
            results.append(res)
            if on_result:
                on_result(res)
    return results


def mean_pointing(results: list[RunResult], variant: str) -> float:
    values = [r.pointing for r in results if r.variant == variant]
    return sum(values) / len(values)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--variants", default="baseline,amc,max,mean")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--w-amc", type=float, default=ExperimentConfig.w_amc)
    parser.add_argument("--epochs", type=int, default=ExperimentConfig.epochs)
    parser.add_argument("--pretrain-epochs", type=int, default=ExperimentConfig.pretrain_epochs)
    args = parser.parse_args(argv)
    cfg = ExperimentConfig(seeds=tuple(int(s) for s in args.seeds.split(",")), w_amc=args.w_amc,
                           epochs=args.epochs, pretrain_epochs=args.pretrain_epochs)
    variants = args.variants.split(",")

    def show(r: RunResult):
        print(json.dumps({"seed": r.seed, "variant": r.variant, "pointing": r.pointing,
                          "seconds": round(r.seconds, 1)}), flush=True)

    results = run(cfg, variants, show)
    for v in ["pretrained"] + variants:
        print(f"{v:<12} mean pointing {mean_pointing(results, v):.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
