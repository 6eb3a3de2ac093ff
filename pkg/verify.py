# verify.py - self-check suites: gradients, oracle equivalences, shapes
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from autograd import functional as F
from autograd.functional import BatchNormState, ConvSpec
from autograd.gradcheck import grad_check
from autograd.tensor import Tensor, double_precision, mul, no_grad, sum_all
from evaluator import ConfusionMatrix
from helper import derive_rng
from models.segnet_model import FusionBlock, ModelConfig, SegNet

logger = logging.getLogger(__name__)

SEEDS = (0, 1, 2, 3, 4)
DOUBLE_TOLERANCE = 1e-6
NETWORK_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-6
DILATION_CASES = 200
SUMMATION_CASES = 50
IOU_CASES = 100


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    value: float = 0.0
    threshold: float = 0.0
    detail: str = ""


def _projected(op, proj):
    """Scalar wrapper: sum(op(x) * proj) with a fixed random projection."""
    return lambda x: sum_all(mul(op(x), proj))


def _projection(rng, shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def _away_from_zero(rng, shape, margin=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 2.0, size=shape)


def _gradient_cases(seed: int) -> Dict[str, Callable[[], float]]:
    """name -> callable returning the max relative error of one check. Runs in double precision."""
    rng = derive_rng(seed, "gradcheck")
    cases = {}

    for rate in (1, 2, 4, 8, 16):
        spec = ConvSpec.same(2, 3, kernel=3, dilation=rate, has_bias=True)
        x = rng.uniform(-2.0, 2.0, size=(1, 2, 6, 7))
        w = rng.uniform(-1.0, 1.0, size=spec.weight_shape)
        b = rng.uniform(-1.0, 1.0, size=3)
        proj = _projection(rng, (1, 3, 6, 7))
        cases[f"conv2d r={rate} input"] = lambda spec=spec, x=x, w=w, b=b, proj=proj: grad_check(
            _projected(lambda t: F.conv2d(t, spec, Tensor(w), Tensor(b)), proj), x)
        cases[f"conv2d r={rate} weights"] = lambda spec=spec, x=x, w=w, b=b, proj=proj: grad_check(
            _projected(lambda t: F.conv2d(Tensor(x), spec, t, Tensor(b)), proj), w)
    strided = ConvSpec.same(2, 2, kernel=3, dilation=2, stride=2)
    xs = rng.uniform(-2.0, 2.0, size=(2, 2, 7, 6))
    ws = rng.uniform(-1.0, 1.0, size=strided.weight_shape)
    proj_s = _projection(rng, (2, 2) + strided.output_size(7, 6))
    cases["conv2d stride=2 r=2 input"] = lambda: grad_check(
        _projected(lambda t: F.conv2d(t, strided, Tensor(ws)), proj_s), xs)

    for mode in ("train", "frozen"):
        x = rng.uniform(-2.0, 2.0, size=(2, 3, 4, 4))
        gamma = rng.uniform(0.5, 1.5, size=3)
        beta = rng.uniform(-0.5, 0.5, size=3)
        mean = rng.uniform(-0.5, 0.5, size=3)
        var = rng.uniform(0.5, 1.5, size=3)
        proj = _projection(rng, x.shape)

        def state(g=gamma, mode=mode, beta=beta, mean=mean, var=var):
            return BatchNormState(Tensor(g), Tensor(beta), Tensor(mean.copy()), Tensor(var.copy()), mode=mode)

        cases[f"batch_norm {mode} input"] = lambda x=x, state=state, proj=proj: grad_check(
            _projected(lambda t: F.batch_norm(t, state()), proj), x)
        cases[f"batch_norm {mode} gamma"] = lambda x=x, gamma=gamma, state=state, proj=proj: grad_check(
            _projected(lambda g: F.batch_norm(Tensor(x), state(g)), proj), gamma)

    x = _away_from_zero(rng, (1, 2, 4, 5))
    proj = _projection(rng, x.shape)
    cases["relu"] = lambda: grad_check(_projected(F.relu, proj), x)

    # distinct values spaced well beyond the finite-difference step
    pool_in = (rng.permutation(2 * 3 * 7 * 6) * 0.05 - 6.0).reshape(2, 3, 7, 6)
    pool_proj = _projection(rng, (2, 3, 4, 3))
    cases["max_pool2d"] = lambda: grad_check(_projected(F.max_pool2d, pool_proj), pool_in)

    x = rng.uniform(-2.0, 2.0, size=(2, 3, 4, 5))
    gap_proj = _projection(rng, (2, 3, 1, 1))
    cases["global_avg_pool"] = lambda: grad_check(_projected(F.global_avg_pool, gap_proj), x)

    x_up = rng.uniform(-2.0, 2.0, size=(1, 2, 3, 4))
    up_proj = _projection(rng, (1, 2, 7, 9))
    cases["bilinear_upsample"] = lambda: grad_check(
        _projected(lambda t: F.bilinear_upsample(t, 7, 9), up_proj), x_up)

    logits = rng.uniform(-2.0, 2.0, size=(1, 4, 3, 3))
    labels = rng.integers(0, 4, size=(1, 3, 3))
    labels[0, 0, 0] = F.IGNORE_ID
    cases["softmax_cross_entropy"] = lambda: grad_check(lambda t: F.softmax_cross_entropy(t, labels), logits)

    for mode in ("sum", "concat"):
        block = FusionBlock(4, 3, mode, rng)
        rgb_feat = rng.uniform(-2.0, 2.0, size=(1, 4, 4, 4))
        depth_feat = Tensor(rng.uniform(-2.0, 2.0, size=(1, 4, 4, 4)))
        proj = _projection(rng, (1, block.out_channels, 4, 4))
        cases[f"fusion {mode}"] = lambda block=block, rgb_feat=rgb_feat, depth_feat=depth_feat, proj=proj: grad_check(
            _projected(lambda t: block(t, depth_feat), proj), rgb_feat)

    config = ModelConfig.toy(num_classes=3)
    model = SegNet(config, rng=rng)
    rgb = rng.uniform(0.0, 1.0, size=(1, 3, 16, 16))
    depth = Tensor(rng.uniform(0.0, 1.0, size=(1, 1, 16, 16)))
    target = rng.integers(0, 3, size=(1, 16, 16))
    cases["segnet end-to-end"] = lambda: grad_check(
        lambda t: F.softmax_cross_entropy(model(t, depth), target), rgb, eps=1e-6, max_elements=16, rng=rng)
    return cases


def gradcheck_suite(seeds=SEEDS) -> List[CheckResult]:
    results = []
    with double_precision():
        for seed in seeds:
            for name, run in _gradient_cases(seed).items():
                error = run()
                if name.startswith("segnet"):
                    results.append(CheckResult(
                        "gradcheck", f"{name} seed={seed}", error <= NETWORK_TOLERANCE, error, NETWORK_TOLERANCE,
                        detail=f"toy network checked at relaxed tolerance {NETWORK_TOLERANCE:g} "
                               f"(single ops {DOUBLE_TOLERANCE:g})",
                    ))
                else:
                    results.append(CheckResult("gradcheck", f"{name} seed={seed}", error <= DOUBLE_TOLERANCE,
                                               error, DOUBLE_TOLERANCE))
    return results


def zero_inserted(weights: np.ndarray, rate: int) -> np.ndarray:
    """Spread the taps of a kernel `rate` pixels apart, zeros in between."""
    co, ci, kh, kw = weights.shape
    out = np.zeros((co, ci, kh + (kh - 1) * (rate - 1), kw + (kw - 1) * (rate - 1)), dtype=weights.dtype)
    out[:, :, ::rate, ::rate] = weights
    return out


def direct_conv(x, w, bias, stride, rate, padding) -> np.ndarray:
    """Plain loop over every output element and tap."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    (sh, sw), (ph, pw) = stride, padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_h = (h + 2 * ph - (kh + (kh - 1) * (rate - 1))) // sh + 1
    out_w = (wd + 2 * pw - (kw + (kw - 1) * (rate - 1))) // sw + 1
    out = np.zeros((n, co, out_h, out_w))
    for b in range(n):
        for o in range(co):
            for i in range(out_h):
                for j in range(out_w):
                    total = bias[o] if bias is not None else 0.0
                    for k in range(c):
                        for l in range(kh):
                            for m in range(kw):
                                total += xp[b, k, i * sh + rate * l, j * sw + rate * m] * w[o, k, l, m]
                    out[b, o, i, j] = total
    return out


def _dilation_case(rng) -> float:
    rate = int(rng.choice([2, 4, 8, 16]))
    kernel = int(rng.choice([1, 3, 5]))
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    h, w = int(rng.integers(1, 2 * rate + 6)), int(rng.integers(1, 2 * rate + 6))
    pad = rate * (kernel - 1) // 2
    x = rng.normal(size=(int(rng.integers(1, 3)), c_in, h, w))
    weights = rng.normal(size=(c_out, c_in, kernel, kernel))
    dilated = ConvSpec(c_in, c_out, kernel, stride, rate, pad)
    dense_w = zero_inserted(weights, rate)
    dense = ConvSpec(c_in, c_out, dense_w.shape[2], stride, 1, pad)
    a = F.conv2d(Tensor(x), dilated, Tensor(weights)).data
    b = F.conv2d(Tensor(x), dense, Tensor(dense_w)).data
    return float(np.abs(a - b).max())


def _summation_case(rng) -> float:
    rate = int(rng.integers(1, 5))
    kernel = (int(rng.choice([1, 3])), int(rng.choice([1, 3, 5])))
    c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    padding = (int(rng.integers(0, rate + 1)), int(rng.integers(0, 2 * rate + 1)))
    eff = [k + (k - 1) * (rate - 1) for k in kernel]
    h = int(rng.integers(max(1, eff[0] - 2 * padding[0]), eff[0] + 6))
    w = int(rng.integers(max(1, eff[1] - 2 * padding[1]), eff[1] + 6))
    x = rng.normal(size=(1, c_in, h, w))
    weights = rng.normal(size=(c_out, c_in) + kernel)
    bias = rng.normal(size=c_out)
    spec = ConvSpec(c_in, c_out, kernel, stride, rate, padding, has_bias=True)
    fast = F.conv2d(Tensor(x), spec, Tensor(weights), Tensor(bias)).data
    slow = direct_conv(x, weights, bias, stride, rate, padding)
    return float(np.abs(fast - slow).max())


def impulse_support(rate: int, kernel: int = 3):
    """Bounding box (height, width) of the nonzero response of a dilated all-ones kernel to a unit impulse."""
    eff = kernel + (kernel - 1) * (rate - 1)
    size = 2 * eff + 1
    x = np.zeros((1, 1, size, size))
    x[0, 0, size // 2, size // 2] = 1.0
    spec = ConvSpec.same(1, 1, kernel=kernel, dilation=rate)
    out = F.conv2d(Tensor(x), spec, Tensor(np.ones(spec.weight_shape))).data[0, 0]
    rows, cols = np.nonzero(out)
    return int(rows.max() - rows.min() + 1), int(cols.max() - cols.min() + 1)


def brute_force_counts(gt, pred, k) -> np.ndarray:
    counts = np.zeros((k, k), dtype=np.int64)
    for g, p in zip(gt.reshape(-1), pred.reshape(-1)):
        if g != F.IGNORE_ID:
            counts[g, p] += 1
    return counts


def brute_force_iou(gt, pred, k) -> np.ndarray:
    per_class = np.full(k, np.nan)
    valid = gt != F.IGNORE_ID
    for c in range(k):
        tp = int(np.sum((gt == c) & (pred == c) & valid))
        fp = int(np.sum((gt != c) & (pred == c) & valid))
        fn = int(np.sum((gt == c) & (pred != c)))
        if tp + fp + fn:
            per_class[c] = tp / (tp + fp + fn)
    return per_class


def _iou_case(rng) -> bool:
    k = int(rng.integers(2, 7))
    shape = (int(rng.integers(1, 12)), int(rng.integers(1, 12)))
    gt = rng.integers(0, k, size=shape)
    gt[rng.random(shape) < 0.1] = F.IGNORE_ID
    pred = rng.integers(0, k, size=shape)
    cm = ConfusionMatrix(k).accumulate(gt, pred)
    valid = gt != F.IGNORE_ID
    oracle = confusion_matrix(gt[valid], pred[valid], labels=list(range(k)))
    if not (np.array_equal(cm.counts, oracle) and np.array_equal(cm.counts, brute_force_counts(gt, pred, k))):
        return False
    expected = brute_force_iou(gt, pred, k)
    got = cm.iou().per_class
    same_nan = np.array_equal(np.isnan(got), np.isnan(expected))
    return same_nan and bool(np.all(np.abs(np.nan_to_num(got) - np.nan_to_num(expected)) <= 1e-12))


def oracle_suite(seed: int = 0) -> List[CheckResult]:
    rng = derive_rng(seed, "oracle")
    results = []
    with double_precision(), no_grad():
        worst = max(_dilation_case(rng) for _ in range(DILATION_CASES))
        results.append(CheckResult("oracle", f"dilation vs zero-inserted kernel ({DILATION_CASES} cases)",
                                   worst <= ORACLE_TOLERANCE, worst, ORACLE_TOLERANCE))
        worst = max(_summation_case(rng) for _ in range(SUMMATION_CASES))
        results.append(CheckResult("oracle", f"direct summation ({SUMMATION_CASES} cases)",
                                   worst <= ORACLE_TOLERANCE, worst, ORACLE_TOLERANCE))
        for rate in (2, 4, 8, 16):
            extent = impulse_support(rate)
            results.append(CheckResult("oracle", f"receptive field r={rate}", extent == (2 * rate + 1,) * 2,
                                       detail=f"{extent[0]}x{extent[1]}"))

    agreed = sum(_iou_case(rng) for _ in range(IOU_CASES))
    results.append(CheckResult("oracle", f"confusion matrix and IoU ({IOU_CASES} cases)", agreed == IOU_CASES,
                               detail=f"{agreed}/{IOU_CASES} agree"))
    worked = ConfusionMatrix(2, np.array([[1, 1], [0, 2]])).iou().mean
    results.append(CheckResult("oracle", "worked IoU example", abs(worked - 7 / 12) <= 1e-12, worked, 7 / 12))
    return results


def _parameter_shapes(model) -> Dict[str, tuple]:
    return {path: p.shape for path, p in model.named_parameters()}


def shapes_suite(sizes=((96, 96), (256, 512))) -> List[CheckResult]:
    results = []
    for branches in ("rgb", "rgbd"):
        reference = None
        for output_stride in (8, 16, 32):
            config = ModelConfig.toy(output_stride=output_stride, depth_branch=branches == "rgbd")
            model = SegNet(config).eval()
            shapes = _parameter_shapes(model)
            if reference is None:
                reference = shapes
            results.append(CheckResult("shapes", f"{branches} os={output_stride} parameter shapes", shapes == reference))
            for h, w in sizes:
                rgb = Tensor(np.zeros((1, 3, h, w)))
                depth = Tensor(np.zeros((1, 1, h, w))) if config.depth_branch else None
                with no_grad():
                    feats = model.features(rgb, depth)
                    logits = model(rgb, depth)
                top = feats["rgb"].shape[2:]
                expected_top = (-(-h // output_stride), -(-w // output_stride))
                name = f"{branches} os={output_stride} {h}x{w}"
                results.append(CheckResult("shapes", f"{name} top features", top == expected_top, detail=str(top)))
                results.append(CheckResult("shapes", f"{name} logits", logits.shape[2:] == (h, w),
                                           detail=str(logits.shape)))
                traced = model.trace_shapes(h, w)
                results.append(CheckResult("shapes", f"{name} traced", traced["rgb"] == feats["rgb"].shape
                                           and traced["logits"] == logits.shape))
            full = SegNet(ModelConfig.full_scale(output_stride=output_stride, depth_branch=branches == "rgbd"))
            traced = full.trace_shapes(720, 720)
            e = -(-720 // output_stride)
            fused_channels = 2 * full.config.fusion_channels if branches == "rgbd" else full.config.top_channels
            results.append(CheckResult(
                "shapes", f"{branches} os={output_stride} 720x720 full width traced",
                traced["rgb"] == (1, 2048, e, e)
                and traced["fused"] == (1, fused_channels, e, e)
                and traced["logits"] == (1, full.config.num_classes, 720, 720),
                detail=f"rgb {traced['rgb']} fused {traced['fused']} logits {traced['logits']}",
            ))
    return results


SUITES = {
    "gradcheck": gradcheck_suite,
    "oracle": oracle_suite,
    "shapes": shapes_suite,
}


def run_suites(names) -> pd.DataFrame:
    """Run the named suites ("all" for every one) and return one row per check."""
    if "all" in names:
        names = list(SUITES)
    rows = []
    for name in names:
        started = time.perf_counter()
        logger.info(f"🔄 Running {name} suite")
        results = SUITES[name]()
        failed = sum(not r.passed for r in results)
        elapsed = time.perf_counter() - started
        if failed:
            logger.error(f"❌ {name}: {failed} of {len(results)} checks failed ({elapsed:.1f}s)")
        else:
            logger.info(f"✅ {name}: {len(results)} checks passed ({elapsed:.1f}s)")
        rows.extend(r.__dict__ for r in results)
    return pd.DataFrame(rows, columns=["suite", "name", "passed", "value", "threshold", "detail"])
