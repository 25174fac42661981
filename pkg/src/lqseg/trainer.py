"""Training loop: LSJ augmentation, warmup/step-decay schedule, AdamW, checkpoints.

Parameters and optimizer moments are rounded to float32 after every update.
Arithmetic stays in float64, but the live state is always exactly what a
float32 checkpoint stores, so resuming reproduces an uninterrupted run.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .losses import LossReport, total_loss
from .matching import Assignment, cost_matrix, hungarian
from .model import Model
from .synthdata import Scene, SceneAnnotation, background, resize_nearest
from .tensor import bilinear_matrix

logger = logging.getLogger(__name__)

LSJ_RANGE = (0.5, 2.0)


class NonFiniteLossError(RuntimeError):
    def __init__(self, report: LossReport, iteration: int):
        super().__init__(
            f"non-finite loss at iteration {iteration}: total={report.total} cls={report.cls} "
            f"focal={report.focal} dice={report.dice} attr={report.attr}")
        self.report = report
        self.iteration = iteration


class CheckpointPathError(OSError):
    pass


# ---------------------------------------------------------------- augmentation


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    rh, rw = bilinear_matrix(image.shape[1], height), bilinear_matrix(image.shape[2], width)
    return rh @ (image.astype(np.float64) @ rw.T)


def lsj_augment(image: np.ndarray, ann: SceneAnnotation, rng: np.random.Generator,
                ratio: float | None = None, max_retries: int = 10
                ) -> tuple[np.ndarray, SceneAnnotation]:
    """Large-scale jitter: rescale by r in [0.5, 2], then crop (r > 1) or pad (r < 1).

    Instances that lose every pixel are dropped; if none survive a new ratio is
    drawn, and after ``max_retries`` the input is returned unchanged.
    """
    _, h, w = image.shape
    for _ in range(max_retries):
        r = rng.uniform(*LSJ_RANGE) if ratio is None else ratio
        nh, nw = max(1, round(h * r)), max(1, round(w * r))
        img = resize_image(image, nh, nw)
        masks = resize_nearest(ann.masks, nh, nw)
        if nh >= h and nw >= w:
            y0, x0 = int(rng.integers(nh - h + 1)), int(rng.integers(nw - w + 1))
            out_img = img[:, y0 : y0 + h, x0 : x0 + w]
            out_masks = masks[:, y0 : y0 + h, x0 : x0 + w]
        else:
            y0, x0 = int(rng.integers(h - nh + 1)), int(rng.integers(w - nw + 1))
            out_img = background(rng, h, w)
            out_img[:, y0 : y0 + nh, x0 : x0 + nw] = img
            out_masks = np.zeros((len(ann), h, w), dtype=bool)
            out_masks[:, y0 : y0 + nh, x0 : x0 + nw] = masks
        keep = out_masks.reshape(len(ann), -1).any(axis=1)
        if keep.any():
            new = ann.subset(keep)
            new.masks = np.ascontiguousarray(out_masks[keep])
            return out_img.astype(np.float32), new
        if ratio is not None:
            break
    return image, ann


# -------------------------------------------------------------------- schedule


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then x0.1 at 2/3 and again at 8/9 of the run."""
    if step < cfg.warmup_iters:
        return cfg.base_lr * step / cfg.warmup_iters
    lr = cfg.base_lr
    if step >= math.floor(cfg.iterations * 2 / 3):
        lr *= 0.1
    if step >= math.floor(cfg.iterations * 8 / 9):
        lr *= 0.1
    return lr


# ------------------------------------------------------------------- optimizer


def quantize_(arr: np.ndarray) -> None:
    arr[...] = arr.astype(np.float32)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices and kernels."""

    def __init__(self, params: dict[str, T.Tensor], beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-4):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.state = OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def step(self, lr: float) -> None:
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**st.step, 1 - b2**st.step
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            quantize_(m)
            quantize_(v)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= lr * update
            quantize_(p.data)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.state.m[k]
            out[f"opt.v.{k}"] = self.state.v[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for k in self.params:
            self.state.m[k] = tensors[f"opt.m.{k}"].copy()
            self.state.v[k] = tensors[f"opt.v.{k}"].copy()
        self.state.step = step


def clip_grad_norm(params: dict[str, T.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# ------------------------------------------------------------------- training


def _match(pred, ann: SceneAnnotation) -> Assignment:
    costs = cost_matrix(pred, ann)
    if not np.all(np.isfinite(costs.values)):
        # still compute every loss term so the abort can report which one diverged
        return Assignment([(k, k) for k in range(len(ann))])
    return hungarian(costs)


def scene_loss(model: Model, image: np.ndarray, ann: SceneAnnotation):
    out = model(image)
    assignments = [_match(s, ann) for s in out.stages]
    return total_loss(out.stages, ann, assignments, expected_stages=model.cfg.stages)


def train_step(model: Model, opt: AdamW, batch: list[tuple[np.ndarray, SceneAnnotation]],
               cfg: TrainConfig, lr: float, iteration: int = 0) -> LossReport:
    model.zero_grad()
    reports = []
    for image, ann in batch:
        loss, report = scene_loss(model, image, ann)
        if not np.isfinite(report.total):
            raise NonFiniteLossError(report, iteration)
        T.backward(loss * (1.0 / len(batch)))
        reports.append(report)
    clip_grad_norm(model.params, cfg.clip_norm)
    opt.step(lr)
    return LossReport.average(reports)


def sample_batch(scenes: list[Scene], cfg: TrainConfig, iteration: int):
    rng = np.random.default_rng([cfg.seed, iteration])
    idx = rng.choice(len(scenes), size=cfg.batch_size, replace=len(scenes) < cfg.batch_size)
    batch = []
    for i in idx:
        sc = scenes[int(i)]
        if cfg.lsj:
            batch.append(lsj_augment(sc.image, sc.annotation, rng))
        else:
            batch.append((sc.image, sc.annotation))
    return batch


def build_model(cfg: TrainConfig) -> Model:
    model = Model(cfg.model_config(), seed=cfg.seed)
    for p in model.params.values():
        quantize_(p.data)
    return model


def save_training_checkpoint(path, model: Model, opt: AdamW, cfg: TrainConfig,
                             iteration: int) -> None:
    tensors = {k: p.data for k, p in model.params.items()}
    tensors.update(opt.state_tensors())
    mc = model.cfg
    schema = {"d": mc.d, "k_cls": mc.k_cls, "k_attr": mc.k_attr}
    save_checkpoint(path, tensors, cfg.to_dict(), iteration,
                    {"opt_step": opt.state.step, "schema": schema})


def load_model(path) -> tuple[Model, TrainConfig, dict, dict[str, np.ndarray]]:
    header, tensors = load_checkpoint(path)
    cfg = TrainConfig.from_dict(header["config"])
    model = build_model(cfg)
    schema = header.get("extra", {}).get("schema", {})
    for key in ("d", "k_cls", "k_attr"):
        if key in schema and schema[key] != getattr(model.cfg, key):
            raise CheckpointError(
                f"schema mismatch: {key}={schema[key]} in header, model expects {getattr(model.cfg, key)}", 0)
    for k, p in model.params.items():
        if k not in tensors:
            raise CheckpointError(f"missing tensor {k!r}", 0)
        if tensors[k].shape != p.shape:
            raise CheckpointError(f"tensor {k!r} has shape {tensors[k].shape}, expected {p.shape}", 0)
        p.data[...] = tensors[k]
    return model, cfg, header, tensors


def _check_writable(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CheckpointPathError(f"checkpoint directory {out_dir} is not writable: {exc}") from exc


def run_training(cfg: TrainConfig, scenes: list[Scene], resume: str | Path | None = None,
                 callback: Callable[[int, LossReport], None] | None = None) -> tuple[Model, Path]:
    """Train for ``cfg.iterations`` updates; returns the model and final checkpoint path.

    The log ``train_log.jsonl`` in ``cfg.out_dir`` gets one JSON line per update.
    """
    out_dir = Path(cfg.out_dir)
    _check_writable(out_dir)
    if not scenes:
        raise ValueError("training set is empty")
    log_path = out_dir / "train_log.jsonl"
    start = 0
    if resume is not None:
        model, saved_cfg, header, tensors = load_model(resume)
        model.cfg = cfg.model_config()
        opt = AdamW(model.params, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
        opt.load_state(tensors, int(header.get("extra", {}).get("opt_step", header["iteration"])))
        start = int(header["iteration"])
        kept = []
        if log_path.exists():
            kept = [ln for ln in log_path.read_text().splitlines()
                    if ln.strip() and json.loads(ln)["iter"] <= start]
        log_path.write_text("".join(ln + "\n" for ln in kept))
    else:
        model = build_model(cfg)
        opt = AdamW(model.params, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
        log_path.write_text("")
    final = out_dir / "final.lqsg"
    with open(log_path, "a") as log:
        for it in range(start, cfg.iterations):
            lr = lr_schedule(it, cfg)
            batch = sample_batch(scenes, cfg, it)
            report = train_step(model, opt, batch, cfg, lr, it + 1)
            log.write(json.dumps(report.log_record(it + 1, lr)) + "\n")
            log.flush()
            if callback is not None:
                callback(it + 1, report)
            done = it + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.iterations:
                path = out_dir / f"ckpt_{done:06d}.lqsg"
                save_training_checkpoint(path, model, opt, cfg, done)
                logger.info("iteration %d: loss %.4f, checkpoint %s", done, report.total, path)
    if start >= cfg.iterations:
        save_training_checkpoint(out_dir / f"ckpt_{start:06d}.lqsg", model, opt, cfg, start)
    save_training_checkpoint(final, model, opt, cfg, max(start, cfg.iterations))
    return model, final


def param_snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.params.items()}

