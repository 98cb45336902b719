"""Finite-difference verification of every differentiable piece of the pipeline."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .layers import ResidualBlockParams, fc_forward, gem_pool, l2_normalize, residual_block
from .miner import MiningStrategy, mined_loss
from .model import ModelConfig, build_model
from .tensor import ConvSpec, Tensor, conv2d, grad_check, relu, total, weighted_sum

TOLERANCE = 1e-4

# tiny network whose final map is 4x4 so the region grid is non-trivial; narrow
# layers keep the check fast and leave few dead channels, whose near-zero
# gradients would only measure finite-difference roundoff
TINY_CONFIG = ModelConfig(
    input_size=8,
    stem_channels=2,
    widths=(2, 3, 3),
    dilations=(1, 2, 4),
    strides=(1, 1, 1),
    embed_dim=3,
    region_scales=2,
)


def _t(rng, *shape, low=None) -> Tensor:
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, 1.0, size=shape)
    return Tensor(data, requires_grad=True)


def _probe(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def check_conv(rng, dilation: int) -> float:
    n, c, k = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    size = 2 * dilation + int(rng.integers(3, 6))
    stride = int(rng.integers(1, 3))
    spec = ConvSpec(stride, dilation, int(rng.integers(0, dilation + 1)))
    x, w, b = _t(rng, n, c, size, size), _t(rng, k, c, 3, 3), _t(rng, k)
    probe = _probe(rng, conv2d(x, w, b, spec).shape)
    return grad_check(lambda: weighted_sum(conv2d(x, w, b, spec), probe), [x, w, b])


def check_residual_block(rng) -> float:
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    d = int(rng.choice([1, 2, 4]))
    stride = int(rng.integers(1, 3))
    size = 5 + int(rng.integers(0, 3))
    proj = cin != cout or stride != 1
    params = ResidualBlockParams(
        _t(rng, cout, cin, 3, 3),
        _t(rng, cout),
        _t(rng, cout, cout, 3, 3),
        _t(rng, cout),
        dilation=d,
        stride=stride,
        proj_w=_t(rng, cout, cin, 1, 1) if proj else None,
        proj_b=_t(rng, cout) if proj else None,
    )
    x = _t(rng, 2, cin, size, size)
    probe = _probe(rng, residual_block(x, params).shape)
    return grad_check(lambda: weighted_sum(residual_block(x, params), probe), [x] + params.tensors())


def check_gem(rng) -> float:
    feats = _t(rng, 2, 3, 5, 6, low=0.05)
    p = Tensor([rng.uniform(1.0, 6.0)], requires_grad=True)
    region = (int(rng.integers(0, 3)), int(rng.integers(0, 2)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    probe = _probe(rng, (2, 3))
    return grad_check(lambda: weighted_sum(gem_pool(feats, p, region), probe), [feats, p])


def check_fc(rng) -> float:
    v, w = _t(rng, 3, 4), _t(rng, 4, 5)
    probe = _probe(rng, (3, 5))
    return grad_check(lambda: weighted_sum(fc_forward(v, w), probe), [v, w])


def check_l2_normalize(rng) -> float:
    v = _t(rng, 3, 4)
    probe = _probe(rng, (3, 4))
    return grad_check(lambda: weighted_sum(l2_normalize(v), probe), [v])


def _tiny_model(rng):
    model = build_model(TINY_CONFIG, int(rng.integers(1 << 30)))
    # positive random biases keep most units active and pre-activations off
    # the relu kink, so no gradient entry is pure finite-difference roundoff
    for name, t in model.named_parameters():
        if name.endswith(".bias"):
            t.data[:] = rng.uniform(0.2, 0.5, size=t.data.shape)
    model.gem_p.data[:] = rng.uniform(1.5, 4.0)
    return model


def check_embed(rng) -> float:
    model = _tiny_model(rng)
    x = rng.random((3, 3, 8, 8))
    probe = _probe(rng, (3, TINY_CONFIG.embed_dim))
    return grad_check(lambda: weighted_sum(model.forward(Tensor(x)), probe), model.parameters())


def check_mined_loss(rng, strategy: MiningStrategy) -> float:
    b = int(rng.integers(4, 10))
    labels = rng.integers(0, 3, size=b)
    labels[:2] = [0, 1]
    labels[2] = 0
    emb = _t(rng, b, 4)
    return grad_check(lambda: mined_loss(l2_normalize(emb), labels, 0.7, strategy)[0], [emb])


CHECKS: dict[str, Callable] = {
    "conv2d d=1": lambda rng: check_conv(rng, 1),
    "conv2d d=2": lambda rng: check_conv(rng, 2),
    "conv2d d=4": lambda rng: check_conv(rng, 4),
    "sum(relu(conv2d))": lambda rng: check_relu_conv(rng),
    "residual_block": check_residual_block,
    "gem_pool (features and p)": check_gem,
    "fc": check_fc,
    "l2_normalize": check_l2_normalize,
    "embed (full network)": check_embed,
    **{f"mined loss {s.value}": (lambda rng, s=s: check_mined_loss(rng, s)) for s in MiningStrategy},
}


def check_relu_conv(rng) -> float:
    x, w = _t(rng, 2, 2, 6, 6), _t(rng, 3, 2, 3, 3)
    b = _t(rng, 3)
    spec = ConvSpec(1, 2, 1)
    return grad_check(lambda: total(relu(conv2d(x, w, b, spec))), [x, w, b])


def run_suite(instances: int = 10, seed: int = 0, checks: dict | None = None) -> dict[str, float]:
    """Max relative error per check over ``instances`` random instances."""
    rng = np.random.default_rng(seed)
    results = {}
    for name, fn in (checks or CHECKS).items():
        results[name] = max(fn(rng) for _ in range(instances))
    return results


def report(instances: int = 10, seed: int = 0) -> tuple[bool, str]:
    start = time.perf_counter()
    results = run_suite(instances, seed)
    lines = []
    for name, err in results.items():
        lines.append(f"{'PASS' if err < TOLERANCE else 'FAIL'}  {name:<36} max rel error {err:.3e}")
    worst = max(results.values())
    lines.append(f"max rel error {worst:.3e} over {instances} instances per check ({time.perf_counter() - start:.1f}s)")
    return worst < TOLERANCE, "\n".join(lines)
