"""Acceptance criteria 1-8, each recorded as one PASS/FAIL line in the terminal summary."""

import functools
import itertools
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from helpers import annotation, perfect_prediction
from lqseg import tensor as T
from lqseg.checkpoint import load_checkpoint
from lqseg.config import TrainConfig
from lqseg.experiments import MultiScaleConfig, run_multiscale
from lqseg.losses import LossWeights, bce_elementwise, dice_loss, focal_elementwise, total_loss
from lqseg.matching import cost_matrix, hungarian
from lqseg.metrics import Detection, ap_iou, ap_iou_f1
from lqseg.model import Model
from lqseg.params import ModelConfig
from lqseg.synthdata import generate_dataset
from lqseg.tensor import Tensor, finite_diff_check, no_grad
from lqseg.trainer import AdamW, _match, build_model, load_model, run_training, save_training_checkpoint
from test_metrics import box, random_detection_sets, two_gt_image

RESULTS: dict[int, tuple[str, bool, str, float]] = {}
FD_STEPS = (1e-3, 1e-4, 1e-5, 1e-6)


def criterion(number: int, title: str):
    """Record the outcome of an acceptance test; the return value becomes the detail text."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                msg = str(exc).splitlines()[0] if str(exc) else ""
                RESULTS[number] = (title, False, f"{type(exc).__name__}: {msg}",
                                   time.perf_counter() - t0)
                raise
            RESULTS[number] = (title, True, detail or "", time.perf_counter() - t0)
        return run
    return wrap


# ------------------------------------------------------------------ 1: gradients

RNG = np.random.default_rng(2024)


def _rand(*shape, lo=-1.0, hi=1.0):
    return Tensor(RNG.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_zero(*shape):
    x = RNG.uniform(0.2, 1.0, size=shape) * RNG.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def _weighted(fn, shape):
    w = Tensor(RNG.normal(size=shape))
    return lambda x: T.tsum(T.mul(fn(x), w))


def op_cases():
    b44, b4 = _rand(4, 4), _rand(4)
    pos = Tensor(RNG.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    w_conv, b_conv = _rand(4, 3, 3, 3), _rand(4)
    g, bb = _rand(6), _rand(6)
    other = _rand(2, 4)
    image = _rand(3, 8, 8)
    return {
        "add": (lambda x: T.add(x, b44), (4, 4), _rand(4, 4)),
        "add_suffix": (lambda x: T.add(x, b4), (3, 4, 4), _rand(3, 4, 4)),
        "sub": (lambda x: T.sub(b44, x), (4, 4), _rand(4, 4)),
        "mul": (lambda x: T.mul(x, b44), (4, 4), _rand(4, 4)),
        "div": (lambda x: T.div(T.getitem(b44, slice(0, 3)), x), (3, 4), pos),
        "broadcast_to": (lambda x: T.broadcast_to(x, (3, 4)), (3, 4), _rand(4)),
        "neg": (T.neg, (3, 4), _rand(3, 4)),
        "power": (lambda x: T.power(x, 3.0), (3, 4), _rand(3, 4)),
        "exp": (T.exp, (3, 4), _rand(3, 4)),
        "log": (T.log, (3, 4), Tensor(RNG.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)),
        "sigmoid": (T.sigmoid, (3, 4), _rand(3, 4, lo=-4, hi=4)),
        "log_sigmoid": (T.log_sigmoid, (3, 4), _rand(3, 4, lo=-4, hi=4)),
        "relu": (T.relu, (3, 4), _away_from_zero(3, 4)),
        "clamp_min": (lambda x: T.clamp_min(x, 0.0), (3, 4), _away_from_zero(3, 4)),
        "sum_axis": (lambda x: T.tsum(x, axis=1), (3,), _rand(3, 4)),
        "mean_axis": (lambda x: T.mean(x, axis=0, keepdims=True), (1, 4), _rand(3, 4)),
        "reshape": (lambda x: T.reshape(x, (4, 3)), (4, 3), _rand(3, 4)),
        "transpose": (lambda x: T.transpose(x, (2, 0, 1)), (4, 2, 3), _rand(2, 3, 4)),
        "getitem": (lambda x: T.getitem(x, (slice(1, 3), 2)), (2,), _rand(3, 4)),
        "take_rows": (lambda x: T.take_rows(x, [2, 0, 2]), (3, 4), _rand(3, 4)),
        "concat": (lambda x: T.concat([x, other], axis=0), (5, 4), _rand(3, 4)),
        "stack": (lambda x: T.stack([x, x], axis=1), (3, 2, 4), _rand(3, 4)),
        "matmul": (lambda x: T.matmul(x, b44), (3, 4), _rand(3, 4)),
        "matmul_batched": (lambda x: T.matmul(x, b44), (2, 3, 4), _rand(2, 3, 4)),
        "softmax": (lambda x: T.softmax(x, axis=-1), (3, 4), _rand(3, 4, lo=-3, hi=3)),
        "layer_norm": (lambda x: T.layer_norm(x, g, bb), (4, 6), _rand(4, 6)),
        "conv2d": (lambda x: T.conv2d(x, w_conv, b_conv, 2, 1), (4, 4, 4), _rand(3, 8, 8)),
        "conv2d_weight": (lambda w: T.conv2d(image, w, b_conv, 1, 1), (4, 8, 8), _rand(4, 3, 3, 3)),
        "resize_bilinear": (lambda x: T.resize_bilinear(x, 7, 5), (2, 7, 5), _rand(2, 4, 6)),
    }


def per_op_errors() -> dict[str, float]:
    out = {}
    for name, (fn, shape, x) in op_cases().items():
        out[name] = finite_diff_check(_weighted(fn, shape), x, h=1e-6)
    return out


def directional_error(loss_fn, params: dict, name: str, direction: np.ndarray) -> float:
    """Best finite-difference agreement along one direction over a small step ladder.

    Larger steps cross ReLU kinks; smaller ones drown tiny gradients in roundoff.
    """
    p = params[name]
    v = Tensor(direction)

    def along(s):
        params[name] = T.add(p, T.mul(s, v))
        try:
            return loss_fn()
        finally:
            params[name] = p

    return min(finite_diff_check(along, Tensor(np.zeros(())), h=h) for h in FD_STEPS)


@pytest.fixture(scope="module")
def e2e():
    scene = generate_dataset(1, image_size=64, seed=7)[0]
    model = Model(ModelConfig(d=16, n_queries=5), seed=0)
    with no_grad():
        out = model(scene.image)
    # matching is piecewise constant; hold it fixed while differencing
    assignments = [_match(s, scene.annotation) for s in out.stages]

    def loss():
        return total_loss(model(scene.image).stages, scene.annotation, assignments)[0]

    return model, loss


@criterion(1, "gradient integrity")
def test_criterion_1_gradient_integrity(e2e):
    t0 = time.perf_counter()
    ops = per_op_errors()
    model, loss = e2e
    rng = np.random.default_rng(0)
    full = {name: directional_error(loss, model.params, name, rng.normal(size=p.shape))
            for name, p in list(model.params.items())}
    elapsed = time.perf_counter() - t0
    worst_op = max(ops, key=ops.get)
    worst_param = max(full, key=full.get)
    assert ops[worst_op] < 1e-4, f"op {worst_op}: {ops[worst_op]:.2e}"
    assert full[worst_param] < 1e-4, f"loss wrt {worst_param}: {full[worst_param]:.2e}"
    assert elapsed < 120, f"{elapsed:.0f}s"
    return (f"{len(ops)} ops max {ops[worst_op]:.1e}; end-to-end {len(full)} tensors "
            f"max {full[worst_param]:.1e}; {elapsed:.0f}s")


def test_gradient_check_detects_a_small_backward_error(e2e):
    model, loss = e2e

    def skewed():
        out = loss()
        # forward identity whose backward is 0.1% too large
        return T._record(out.data, [out], lambda g: (g * 1.001,))

    err = directional_error(skewed, model.params, "dec.s3.cls.w",
                            np.random.default_rng(1).normal(size=model.params["dec.s3.cls.w"].shape))
    assert err > 1e-4


# ------------------------------------------------------------------- 2: matching

def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


def _brute_force_batch(costs: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Optimal total for each square matrix, by enumerating every permutation."""
    n = costs.shape[1]
    best = np.empty(len(costs))
    for i in range(0, len(costs), 50):
        chunk = costs[i:i + 50]
        totals = chunk[:, perms, np.arange(n)].sum(axis=2)
        best[i:i + 50] = totals.min(axis=1)
    return best


@criterion(2, "matching oracle")
def test_criterion_2_matching_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    checked = 0
    for n in range(2, 8):
        perms = _permutations(n)
        costs = rng.uniform(-1, 1, size=(1000, n, n))
        oracle = _brute_force_batch(costs, perms)
        for c, want in zip(costs, oracle):
            a = hungarian(c)
            assert sorted(g for _, g in a.pairs) == list(range(n))
            assert len({q for q, _ in a.pairs}) == n
            assert abs(a.total(c) - want) <= 1e-12, f"N={n}: {a.total(c)} vs {want}"
            checked += 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 30, f"{elapsed:.1f}s"
    return f"{checked} matrices N=2..7 agree; {elapsed:.1f}s"


# ------------------------------------------------------------------- 3: losses

@criterion(3, "loss identities")
def test_criterion_3_loss_identities():
    rng = np.random.default_rng(5)
    z = Tensor(rng.normal(scale=4, size=(64, 64)))
    t = (rng.random((64, 64)) < 0.5).astype(np.float64)
    gap = np.abs(focal_elementwise(z, t, alpha=0.5, gamma=0.0).data
                 - 0.5 * bce_elementwise(z, t).data).max()
    assert gap <= 1e-12, f"focal vs BCE {gap:.1e}"

    g = np.zeros((32, 32))
    g[4:20, 6:28] = 1
    dice = dice_loss(Tensor(np.where(g > 0, 40.0, -40.0)), g).item()
    assert dice < 1e-3, f"dice {dice:.1e}"

    masks = np.zeros((3, 32, 32), dtype=bool)
    masks[0, 2:10, 2:12] = masks[1, 14:30, 4:20] = masks[2, 20:26, 22:30] = True
    attrs = (rng.random((3, 9)) < 0.4).astype(np.uint8)
    ann = annotation(masks, [0, 2, 3], attrs)
    stages = [perfect_prediction(ann, 8, rows=[5, 1, 6]) for _ in range(3)]
    total, _ = total_loss(stages, ann, [hungarian(cost_matrix(s, ann)) for s in stages])
    assert total.item() < 1e-3, f"total {total.item():.1e}"
    return f"focal/BCE gap {gap:.0e}; dice {dice:.1e}; perfect total {total.item():.1e}"


# ------------------------------------------------------------------- 4: metrics

def hand_cases():
    """(name, detections, annotations, metric, hand-computed AP)."""
    two = two_gt_image()
    one = annotation(box(0, 8, 0, 8)[None], [2])
    part = annotation(box(0, 10, 0, 10)[None], [0])
    attr_gt = annotation(box(0, 8, 0, 8)[None], [0], np.eye(9, dtype=np.uint8)[[0]] | np.eye(9, dtype=np.uint8)[[3]]
                         | np.eye(9, dtype=np.uint8)[[5]])
    return [
        # precision 0 at recall 0, then 0.5 at recall 0.5
        ("fp first", [[Detection(0, 0.9, box(0, 3, 10, 16)), Detection(0, 0.8, two.masks[1])]], [two],
         ap_iou, 51 * 0.5 / 101),
        # precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
        ("duplicate between tps", [[Detection(0, 0.9, two.masks[0]), Detection(0, 0.8, two.masks[0]),
                                    Detection(0, 0.7, two.masks[1])]], [two],
         ap_iou, (51 + 50 * 2 / 3) / 101),
        ("duplicate after full recall", [[Detection(2, 0.9, one.masks[0]), Detection(2, 0.8, one.masks[0])]],
         [one], ap_iou, 1.0),
        # IoU 0.7 passes 5 of 10 thresholds
        ("partial overlap", [[Detection(0, 0.9, box(0, 10, 0, 7))]], [part], ap_iou, 0.5),
        # F1 2/3 passes 4 of 10 thresholds
        ("attribute f1 gate", [[Detection(0, 0.9, attr_gt.masks[0], frozenset({0, 3, 6}))]], [attr_gt],
         ap_iou_f1, 0.4),
        ("wrong class", [[Detection(1, 0.9, one.masks[0])]], [one], ap_iou, 0.0),
    ]


@criterion(4, "metric oracles")
def test_criterion_4_metric_oracles():
    for name, dets, gts, metric, want in hand_cases():
        got = metric(dets, gts)
        assert got == pytest.approx(want, abs=1e-15), f"{name}: {got} vs {want}"
    worst = -1.0
    for seed in range(100):
        dets, gts = random_detection_sets(seed)
        a, b = ap_iou(dets, gts), ap_iou_f1(dets, gts)
        assert b <= a, f"seed {seed}: {b} > {a}"
        worst = max(worst, b - a)
    return f"{len(hand_cases())} hand cases exact; 100 random sets, max(ap_iou_f1 - ap_iou) = {worst:.3f}"


# ------------------------------------------------------------------- 5: overfit

@pytest.mark.slow
@criterion(5, "overfit convergence")
def test_criterion_5_overfit(overfit_run):
    result, _ = overfit_run
    assert result.iterations <= 3000
    assert result.ap_iou >= 0.90, f"ap_iou {result.ap_iou:.3f}"
    assert result.ap_iou_f1 >= 0.80, f"ap_iou_f1 {result.ap_iou_f1:.3f}"
    assert result.seconds <= 1800, f"{result.seconds:.0f}s"
    return (f"ap_iou {result.ap_iou:.3f}, ap_iou_f1 {result.ap_iou_f1:.3f} after "
            f"{result.iterations} iterations in {result.seconds / 60:.1f} min")


# --------------------------------------------------------------- 6: multi-scale

@pytest.mark.slow
@criterion(6, "multi-scale 3-stage vs 1-stage")
def test_criterion_6_multiscale(tmp_path):
    cfg = MultiScaleConfig()
    cfg.train.out_dir = str(tmp_path / "runs")
    result = run_multiscale(cfg, tmp_path / "summary.json")
    detail = (f"held-out ap_iou 3-stage {result.ap_iou[3]} mean {result.mean(3):.4f}; "
              f"1-stage {result.ap_iou[1]} mean {result.mean(1):.4f}; "
              f"improvement {result.improvement:+.4f}; {result.seconds / 3600:.2f} h")
    print(detail)
    assert result.seconds <= 3 * 3600, detail
    assert result.improvement > 0, detail
    return detail


# ------------------------------------------------------------- 7: determinism

@pytest.fixture(scope="module")
def small_scenes():
    return generate_dataset(4, image_size=64, seed=21)


def small_cfg(out_dir, **kw):
    base = dict(iterations=6, d=16, n_queries=5, image_size=64, base_lr=1e-3, warmup_iters=2,
                checkpoint_every=3, out_dir=str(out_dir))
    base.update(kw)
    return TrainConfig(**base)


@criterion(7, "determinism and persistence")
def test_criterion_7_determinism(small_scenes, tmp_path):
    a = small_cfg(tmp_path / "a")
    run_training(a, small_scenes)
    run_training(replace(a, out_dir=str(tmp_path / "b")), small_scenes)
    log_a = (tmp_path / "a" / "train_log.jsonl").read_bytes()
    assert log_a == (tmp_path / "b" / "train_log.jsonl").read_bytes(), "logs differ"

    model, cfg, _, _ = load_model(tmp_path / "a" / "final.lqsg")
    save_training_checkpoint(tmp_path / "again.lqsg", model, AdamW(model.params), cfg, 6)
    _, first = load_checkpoint(tmp_path / "a" / "final.lqsg")
    _, second = load_checkpoint(tmp_path / "again.lqsg")
    for k, v in first.items():
        if not k.startswith("opt."):
            assert np.array_equal(v, second[k]), f"round trip changed {k}"
    trained = build_model(a)
    for k, v in first.items():
        if k in trained.params:
            trained.params[k].data[...] = v
    with no_grad():
        x = trained(small_scenes[0].image).stages[-1].mask_logits.data
        y = model(small_scenes[0].image).stages[-1].mask_logits.data
    assert np.array_equal(x, y), "forward after reload differs"

    cut = small_cfg(tmp_path / "r")

    def interrupt(it, _):
        if it == 4:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        run_training(cut, small_scenes, callback=interrupt)
    run_training(cut, small_scenes, resume=tmp_path / "r" / "ckpt_000003.lqsg")
    assert (tmp_path / "r" / "train_log.jsonl").read_bytes() == log_a, "resumed log differs"
    _, resumed = load_checkpoint(tmp_path / "r" / "final.lqsg")
    assert all(np.array_equal(first[k], resumed[k]) for k in first), "resumed weights differ"
    return "logs byte-identical; checkpoint round trip bit-exact; resume from iteration 3 bit-exact"


# ------------------------------------------------------------------ 8: cascade

@criterion(8, "cascade structure")
def test_criterion_8_cascade(small_scenes, tmp_path):
    cfg = small_cfg(tmp_path / "c", iterations=3, checkpoint_every=100)
    model = build_model(cfg)
    scene = small_scenes[1]
    out = model(scene.image)
    assert len(out.stages) == 3
    assert all(b.queries_in is a.queries_out for a, b in zip(out.stages, out.stages[1:]))

    assignments = [_match(s, scene.annotation) for s in out.stages]
    loss, report = total_loss(out.stages, scene.annotation, assignments)
    T.backward(loss)
    # every stage is supervised: each stage's own heads receive gradient
    for j in (1, 2, 3):
        grads = [model.params[k].grad for k in model.params if k.startswith(f"dec.s{j}.")]
        assert all(g is not None for g in grads) and any(np.abs(g).sum() > 0 for g in grads), f"stage {j}"
    assert report.weights == LossWeights(1.0, 1.0, 1.0)

    run_training(cfg, small_scenes)
    worst = 0.0
    for line in (tmp_path / "c" / "train_log.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert all(len(rec[k]) == 3 for k in ("cls", "focal", "dice", "attr"))
        recomputed = sum(c + f + d + a for c, f, d, a in zip(rec["cls"], rec["focal"], rec["dice"], rec["attr"]))
        worst = max(worst, abs(recomputed - rec["total"]))
    assert worst <= 1e-12 * max(1.0, abs(rec["total"])), f"total gap {worst:.1e}"
    return f"3 supervised stages; logged total = unit-weighted component sum (max gap {worst:.0e})"
