"""Desk-scale experiment drivers: training-set overfit and the 3-stage vs 1-stage ablation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .metrics import evaluate
from .synthdata import generate_dataset
from .trainer import run_training

logger = logging.getLogger(__name__)


@dataclass
class OverfitConfig:
    n_scenes: int = 20
    data_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        iterations=3000, base_lr=1e-3, lsj=False, checkpoint_every=500,
        out_dir="runs/overfit"))


@dataclass
class OverfitResult:
    ap_iou: float
    ap_iou_f1: float
    iterations: int
    seconds: float
    checkpoint: Path | None = None


def run_overfit(cfg: OverfitConfig) -> OverfitResult:
    """Train on a small fixed set and evaluate on that same set."""
    scenes = generate_dataset(cfg.n_scenes, image_size=cfg.train.image_size, seed=cfg.data_seed)
    t0 = time.perf_counter()
    model, final = run_training(cfg.train, scenes)
    report = evaluate(model, scenes)
    return OverfitResult(report.ap_iou, report.ap_iou_f1, cfg.train.iterations,
                         time.perf_counter() - t0, final)


@dataclass
class MultiScaleConfig:
    n_train: int = 200
    n_test: int = 100
    scale_mix: float = 0.5
    train_seed: int = 100
    test_seed: int = 200
    seeds: tuple[int, ...] = (0, 1, 2)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        iterations=4000, base_lr=1e-3, lsj=False, checkpoint_every=10**9,
        out_dir="runs/multiscale"))


@dataclass
class MultiScaleResult:
    # stages -> per-seed held-out ap_iou
    ap_iou: dict[int, list[float]]
    ap_iou_f1: dict[int, list[float]]
    seconds: float

    def mean(self, stages: int) -> float:
        return float(np.mean(self.ap_iou[stages]))

    @property
    def improvement(self) -> float:
        return self.mean(3) - self.mean(1)


def run_multiscale(cfg: MultiScaleConfig, out_json: str | Path | None = None) -> MultiScaleResult:
    """Train 3-stage and 1-stage models per seed; score both on a disjoint held-out set."""
    size = cfg.train.image_size
    train = generate_dataset(cfg.n_train, image_size=size, seed=cfg.train_seed,
                             scale_mix=cfg.scale_mix)
    test = generate_dataset(cfg.n_test, image_size=size, seed=cfg.test_seed,
                            scale_mix=cfg.scale_mix)
    ap: dict[int, list[float]] = {3: [], 1: []}
    ap_f1: dict[int, list[float]] = {3: [], 1: []}
    t0 = time.perf_counter()
    for seed in cfg.seeds:
        for stages in (3, 1):
            out_dir = Path(cfg.train.out_dir) / f"s{stages}_seed{seed}"
            tcfg = replace(cfg.train, seed=seed, stages=stages, out_dir=str(out_dir))
            model, _ = run_training(tcfg, train)
            report = evaluate(model, test)
            ap[stages].append(report.ap_iou)
            ap_f1[stages].append(report.ap_iou_f1)
            logger.info("seed %d stages %d: ap_iou %.4f ap_iou_f1 %.4f", seed, stages,
                        report.ap_iou, report.ap_iou_f1)
    result = MultiScaleResult(ap, ap_f1, time.perf_counter() - t0)
    if out_json is not None:
        Path(out_json).write_text(json.dumps({
            "config": {k: v for k, v in asdict(cfg).items() if k != "train"} | {
                "train": cfg.train.to_dict()},
            "ap_iou": {str(k): v for k, v in ap.items()},
            "ap_iou_f1": {str(k): v for k, v in ap_f1.items()},
            "mean_ap_iou": {"3": result.mean(3), "1": result.mean(1)},
            "improvement": result.improvement,
            "seconds": result.seconds,
        }, indent=2) + "\n")
    return result
