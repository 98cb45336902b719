"""Parameterized layers: residual blocks, GeM pooling, L2 norm, FC projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConvSpec, ShapeError, Tensor, UsageError, _result, add, conv2d, matmul, relu

GEM_P_MIN = 1.0
GEM_P_MAX = 64.0
GEM_EPS = 1e-6
NORM_EPS = 1e-12


def gem_pool(features: Tensor, p: Tensor, region: tuple[int, int, int, int] | None = None, source: str = "features") -> Tensor:
    """Generalized-mean pooling over a rectangular region.

    ``features`` is (N, M, H, W) or (M, H, W); ``region`` is (x, y, w, h) in
    cells, defaulting to the whole map. Returns (N, M) or (M,).
    Activations are clamped below at ``GEM_EPS`` so that x**p and its
    derivatives stay finite at exact zeros.
    """
    squeeze = features.ndim == 3
    data = features.data[None] if squeeze else features.data
    if data.ndim != 4:
        raise ShapeError(f"gem_pool expects (N,M,H,W) features, got shape {features.shape}")
    hh, ww = data.shape[2:]
    x0, y0, w, h = region if region is not None else (0, 0, ww, hh)
    if w < 1 or h < 1:
        raise UsageError(f"gem_pool region is empty: {region}")
    if x0 < 0 or y0 < 0 or x0 + w > ww or y0 + h > hh:
        raise ShapeError(f"region {region} lies outside the {hh}x{ww} feature map")
    if np.any(data < 0):
        raise AssertionError(f"gem_pool received negative activations from {source}")
    pv = float(p.data.reshape(-1)[0])
    if pv <= 0:
        raise UsageError(f"GeM exponent must be positive, got {pv}")

    raw = data[:, :, y0 : y0 + h, x0 : x0 + w]
    x = np.maximum(raw, GEM_EPS).reshape(raw.shape[0], raw.shape[1], -1)
    count = x.shape[2]
    # scaled by the per-channel max so x**p never overflows
    xmax = x.max(axis=2, keepdims=True)
    ratio = (x / xmax) ** pv
    ssum = ratio.sum(axis=2, keepdims=True)
    out = (xmax * (ssum / count) ** (1.0 / pv))[:, :, 0]

    def backward(g):
        if squeeze:
            g = g[None]
        f = out[:, :, None]
        # d f / d x_k = (x_k / f)**(p-1) / count
        dx = (x / f) ** (pv - 1.0) / count * g[:, :, None]
        dx = np.where(raw.reshape(x.shape) > GEM_EPS, dx, 0.0)
        full = np.zeros_like(data)
        full[:, :, y0 : y0 + h, x0 : x0 + w] = dx.reshape(raw.shape)
        if squeeze:
            full = full[0]
        # d f / d p = f/p * (sum_k w_k ln x_k - ln f), w_k the softmax-like weights
        weights = ratio / ssum
        dfdp = out / pv * ((weights * np.log(x)).sum(axis=2) - np.log(out))
        gp = np.array((g * dfdp).sum()).reshape(p.shape)
        return full, gp

    res = out[0] if squeeze else out
    return _result(res, (features, p), backward)


def l2_normalize(v: Tensor) -> Tensor:
    """Row-wise ``v / max(||v||, eps)`` for a vector or a (N, D) matrix."""
    squeeze = v.ndim == 1
    data = v.data[None] if squeeze else v.data
    norms = np.sqrt((data * data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, NORM_EPS)
    y = data / denom
    live = norms > NORM_EPS

    def backward(g):
        g2 = g[None] if squeeze else g
        proj = np.where(live, g2 - y * (y * g2).sum(axis=1, keepdims=True), g2)
        dv = proj / denom
        return (dv[0] if squeeze else dv,)

    out = _result(y[0] if squeeze else y, (v,), backward)
    return out


def zero_norm_rows(v: np.ndarray) -> np.ndarray:
    """Boolean mask of rows that l2_normalize would leave at zero."""
    v = np.atleast_2d(v)
    return np.sqrt((v * v).sum(axis=1)) <= NORM_EPS


def fc_forward(v: Tensor, weight: Tensor) -> Tensor:
    """Bias-free projection ``v @ weight`` with weight of shape (M, D)."""
    if v.ndim == 1:
        if v.shape[0] != weight.shape[0]:
            raise ShapeError(f"fc input dimension {v.shape[0]} does not match weight rows M={weight.shape[0]}")
        vd, wd = v.data, weight.data
        return _result(vd @ wd, (v, weight), lambda g: (wd @ g, np.outer(vd, g)))
    if v.shape[1] != weight.shape[0]:
        raise ShapeError(f"fc input dimension {v.shape[1]} does not match weight rows M={weight.shape[0]}")
    return matmul(v, weight)


@dataclass
class ResidualBlockParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    dilation: int = 1
    stride: int = 1
    proj_w: Tensor | None = None
    proj_b: Tensor | None = None

    def tensors(self) -> list[Tensor]:
        out = [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b]
        if self.proj_w is not None:
            out += [self.proj_w, self.proj_b]
        return out


def residual_block(x: Tensor, params: ResidualBlockParams) -> Tensor:
    """``relu(skip(x) + conv2(relu(conv1(x))))`` with same-padding dilated convs."""
    d = params.dilation
    k = params.conv1_w.shape[2]
    pad = d * (k - 1) // 2
    h = relu(conv2d(x, params.conv1_w, params.conv1_b, ConvSpec(params.stride, d, pad)))
    h = conv2d(h, params.conv2_w, params.conv2_b, ConvSpec(1, d, pad))
    if params.proj_w is not None:
        skip = conv2d(x, params.proj_w, params.proj_b, ConvSpec(params.stride, 1, 0))
    else:
        if x.shape[1] != params.conv2_w.shape[0] or params.stride != 1:
            raise ShapeError(
                f"block without projection must keep channels and stride: C {x.shape[1]} -> {params.conv2_w.shape[0]}, stride {params.stride}"
            )
        skip = x
    return relu(add(skip, h))
