"""Central-difference gradient checking in float64."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .errors import ContractViolation
from .tensor import Tensor, backward, zero_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Maximum relative error between backprop and central differences.

    ``fn`` maps the input tensors to a scalar tensor and must be
    deterministic (reseed any dropout inside it). Inputs are promoted to
    float64. With ``max_coords`` only that many coordinates per input are
    perturbed, chosen by ``rng``.
    """
    xs = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    zero_grad(xs)
    loss = fn(*xs)
    backward(loss)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

    worst = 0.0
    for x, a in zip(xs, analytic):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = float(fn(*xs).data)
            flat[k] = orig - eps
            f_minus = float(fn(*xs).data)
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, float(relative_error(a.reshape(-1)[k], numeric)))
    return worst


# ---------------------------------------------------------------- suite


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


def _projected(out: Tensor, r: np.ndarray) -> Tensor:
    """sum(out * r): a scalar whose gradient has no structurally tiny entries."""
    return ops.sum_all(ops.mul(out, Tensor(r)))


def _case_elementwise(op, rng):
    a, b = rng.standard_normal((2, 3, 4))
    r = rng.standard_normal((3, 4))
    return (lambda x, y: _projected(op(x, y), r)), [Tensor(a), Tensor(b)], None


def _case_unary(op, shape, rng):
    x = rng.standard_normal(shape)
    r = rng.standard_normal(op(Tensor(x)).shape)
    return (lambda t: _projected(op(t), r)), [Tensor(x)], None


def _case_conv(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    r = rng.standard_normal(ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).shape)
    return (lambda x, w, b: _projected(ops.conv2d(x, w, b, stride=2, padding=1), r)), [Tensor(x), Tensor(w), Tensor(b)], None


def _case_depthwise(rng):
    x = rng.standard_normal((2, 3, 9, 7))
    w = rng.standard_normal((3, 1, 5, 5))
    r = rng.standard_normal(ops.depthwise_conv2d(Tensor(x), Tensor(w), stride=2, padding=2).shape)
    return (lambda x, w: _projected(ops.depthwise_conv2d(x, w, stride=2, padding=2), r)), [Tensor(x), Tensor(w)], None


def _case_batch_norm(training, rng):
    x = rng.standard_normal((3, 4, 3, 2)) * 2 + 1
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.standard_normal(4)
    rm, rv = Tensor(rng.standard_normal(4) * 0.1), Tensor(rng.uniform(0.5, 2.0, 4))
    r = rng.standard_normal(x.shape)

    def fn(x, g, b):
        return _projected(ops.batch_norm(x, g, b, rm, rv, training=training), r)

    return fn, [Tensor(x), Tensor(gamma), Tensor(beta)], None


def _case_linear(rng):
    x, w, b = rng.standard_normal((5, 6)), rng.standard_normal((3, 6)), rng.standard_normal(3)
    r = rng.standard_normal((5, 3))
    return (lambda x, w, b: _projected(ops.linear(x, w, b), r)), [Tensor(x), Tensor(w), Tensor(b)], None


def _case_dropout(rng):
    x = rng.standard_normal((4, 8))
    r = rng.standard_normal((4, 8))
    seed = int(rng.integers(2**31))
    return (lambda t: _projected(ops.dropout(t, 0.5, True, np.random.default_rng(seed)), r)), [Tensor(x)], None


def _case_cross_entropy(rng):
    logits = rng.standard_normal((6, 2))
    labels = rng.integers(0, 2, 6)
    return (lambda z: ops.softmax_cross_entropy(z, labels)[0]), [Tensor(logits)], None


def _case_square_layer(rng):
    from .head import square_layer

    f1, f2 = rng.standard_normal((2, 4, 5))
    r = rng.standard_normal((4, 5))
    return (lambda a, b: _projected(square_layer(a, b), r)), [Tensor(f1), Tensor(f2)], None


def _case_block(rng):
    from .backbone import BackboneConfig, BlockSpec, StageSpec, build_model, mbconv_forward

    config = BackboneConfig(stem_channels=4, stages=(StageSpec(3, 1, 2, 4, 1),), head_channels=8, descriptor_dim=4)
    model = build_model(config, seed=int(rng.integers(2**31)), dtype=np.float64)
    block = BlockSpec("blocks.0.0", 4, 4, 3, 1, 2)
    names = [n for n in model.trainable() if n.startswith(block.name)]
    x = rng.standard_normal((2, 4, 5, 4))
    r = rng.standard_normal(x.shape)

    def fn(x, *ws):
        local = model.copy()
        local.tensors.update(zip(names, ws))
        return _projected(mbconv_forward(local, block, x, training=True), r)

    return fn, [Tensor(x)] + [model[n] for n in names], None


FULL_NETWORK_TENSORS = (
    "stem.conv.weight",
    "stem.bn.gamma",
    "blocks.1.0.expand.weight",
    "blocks.2.1.dw.weight",
    "blocks.3.1.project.weight",
    "top.bn.beta",
    "embed.weight",
    "head.weight",
    "head.bias",
)


def _case_full_network(rng, n_pairs: int = 2, coords: int = 3):
    """Siamese loss of the default micro network.

    Batch norm runs in inference mode on statistics calibrated from the
    check batch itself: in training mode the normalization makes some
    parameter gradients exactly zero, which a relative-error check cannot
    distinguish from noise. Training-mode batch norm is covered by the op
    and block checks.
    """
    import dataclasses

    from .backbone import BackboneConfig, ModelParams, build_model, forward_features
    from .head import VerificationHead, head_logits, square_layer

    config = BackboneConfig()
    model = build_model(config, seed=int(rng.integers(2**31)), dtype=np.float64)
    img1 = rng.standard_normal((n_pairs, 3, config.height, config.width))
    img2 = rng.standard_normal((n_pairs, 3, config.height, config.width))
    calibrate = ModelParams(dataclasses.replace(config, bn_momentum=0.0), model.tensors)
    forward_features(calibrate, Tensor(np.concatenate([img1, img2])), training=True)
    head = VerificationHead(
        Tensor(rng.standard_normal((2, config.descriptor_dim)) * 0.1, requires_grad=True),
        Tensor(rng.standard_normal(2) * 0.1, requires_grad=True),
    )
    labels = np.arange(n_pairs) % 2
    tensors = {**model.tensors, **head.tensors()}

    def fn(*ws):
        local = dict(tensors)
        local.update(zip(FULL_NETWORK_TENSORS, ws))
        m = ModelParams(config, {k: v for k, v in local.items() if not k.startswith("head.")})
        h = VerificationHead(local["head.weight"], local["head.bias"], dropout=0.0)
        f1 = forward_features(m, Tensor(img1), training=False)
        f2 = forward_features(m, Tensor(img2), training=False)
        return ops.softmax_cross_entropy(head_logits(h, square_layer(f1, f2)), labels)[0]

    return fn, [tensors[n] for n in FULL_NETWORK_TENSORS], coords


# name -> (tolerance, case builder)
SUITE: dict[str, tuple[float, Callable]] = {
    "add": (1e-6, lambda rng: _case_elementwise(ops.add, rng)),
    "sub": (1e-6, lambda rng: _case_elementwise(ops.sub, rng)),
    "mul": (1e-6, lambda rng: _case_elementwise(ops.mul, rng)),
    "square": (1e-6, lambda rng: _case_unary(ops.square, (3, 4), rng)),
    "swish": (1e-7, lambda rng: _case_unary(ops.swish, (2, 3, 4, 5), rng)),
    "reshape": (1e-6, lambda rng: _case_unary(lambda t: ops.reshape(t, (4, 6)), (2, 3, 4), rng)),
    "global_avg_pool": (1e-6, lambda rng: _case_unary(ops.global_avg_pool, (2, 3, 4, 5), rng)),
    "linear": (1e-8, _case_linear),
    "dropout": (1e-6, _case_dropout),
    "conv2d": (1e-6, _case_conv),
    "depthwise_conv2d": (1e-6, _case_depthwise),
    "batch_norm_train": (1e-5, lambda rng: _case_batch_norm(True, rng)),
    "batch_norm_eval": (1e-6, lambda rng: _case_batch_norm(False, rng)),
    "softmax_cross_entropy": (1e-6, _case_cross_entropy),
    "square_layer": (1e-6, _case_square_layer),
    "mbconv_block": (1e-5, _case_block),
    "full_network": (1e-4, _case_full_network),
}


def run_suite(
    names: Optional[Sequence[str]] = None, seed: int = 0, tol: Optional[float] = None
) -> list[CheckResult]:
    """Check each named case (all by default); ``tol`` overrides every threshold."""
    names = list(SUITE) if names is None else list(names)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise ContractViolation(f"unknown gradcheck op(s) {unknown}; choose from {sorted(SUITE)}")
    results = []
    for name in names:
        threshold, build = SUITE[name]
        rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
        fn, inputs, coords = build(rng)
        err = grad_check(fn, inputs, max_coords=coords, rng=rng)
        results.append(CheckResult(name, err, threshold if tol is None else tol))
    return results
