"""Miniature dilated residual embedding network with a regional GeM head."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
import numpy as np

from .layers import ResidualBlockParams, fc_forward, gem_pool, l2_normalize, residual_block, zero_norm_rows
from .tensor import ConfigError, ConvSpec, ShapeError, Tensor, UsageError, add_n, conv2d, relu

CHECKPOINT_MAGIC = b"DRCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 32
    in_channels: int = 3
    stem_channels: int = 8
    stem_stride: int = 2
    widths: tuple[int, ...] = (8, 16, 32, 64)
    blocks: int = 1
    dilations: tuple[int, ...] = (1, 1, 2, 4)
    strides: tuple[int, ...] = (1, 2, 1, 1)
    embed_dim: int = 64
    region_scales: int = 2
    kernel: int = 3
    gem_p: float = 3.0
    input_mean: float = 0.5

    def __post_init__(self):
        # JSON round trips hand us lists
        for name in ("widths", "dilations", "strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("widths", "dilations", "strides"):
            d[name] = list(d[name])
        return d

    def canonical_json(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def validate(self) -> None:
        n = len(self.widths)
        if n == 0:
            raise ConfigError("at least one residual group is required")
        if len(self.dilations) != n or len(self.strides) != n:
            raise ConfigError(f"widths, dilations and strides must all have {n} entries")
        positive = {
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "stem_stride": self.stem_stride,
            "blocks": self.blocks,
            "embed_dim": self.embed_dim,
            "kernel": self.kernel,
        }
        for key, value in positive.items():
            if value < 1:
                raise ConfigError(f"{key} must be positive, got {value}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd for same padding, got {self.kernel}")
        if self.region_scales < 0:
            raise ConfigError(f"region_scales must be non-negative, got {self.region_scales}")
        if any(w < 1 for w in self.widths) or any(s < 1 for s in self.strides):
            raise ConfigError("group widths and strides must be positive")
        if not 1.0 <= self.gem_p <= 64.0:
            raise ConfigError(f"gem_p must lie in [1, 64], got {self.gem_p}")
        dil = list(self.dilations)
        plain = all(d == 1 for d in dil)
        drn = n >= 2 and dil[-2:] == [2, 4] and all(d == 1 for d in dil[:-2])
        if not (plain or drn):
            raise ConfigError(f"dilations must be all 1 or end with the pattern 2, 4 after ones; got {dil}")
        if drn and any(s != 1 for s in self.strides[-2:]):
            raise ConfigError("dilated groups must not also stride")
        self.final_map_size()

    def final_map_size(self) -> int:
        size = self.input_size
        size = ConvSpec(self.stem_stride, 1, self.kernel // 2).out_extent(size, self.kernel)
        for s, d in zip(self.strides, self.dilations):
            spec = ConvSpec(s, d, d * (self.kernel // 2))
            size = spec.out_extent(size, self.kernel)
        return size

    def downsampling(self) -> int:
        return int(self.stem_stride * np.prod(self.strides))

    def undilated(self) -> "ModelConfig":
        """Plain residual counterpart: first dilated group strides instead of dilating."""
        if all(d == 1 for d in self.dilations):
            return self
        strides = list(self.strides)
        strides[self.dilations.index(2)] = 2
        return replace(self, dilations=tuple(1 for _ in self.dilations), strides=tuple(strides))


@dataclass(frozen=True)
class RegionRect:
    x: int
    y: int
    w: int
    h: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class EmbeddingVector:
    values: np.ndarray
    id: str = ""
    zero_norm: bool = False


def _grid_positions(extent: int, side: int) -> list[int]:
    if side >= extent:
        return [0]
    span = extent - side
    # consecutive windows overlap by at least 40%; sides below 2 can only step by one cell
    max_step = max(1.0, 0.6 * side)
    n = 2
    while np.ceil(span / (n - 1)) > max_step:
        n += 1
    return sorted({int(np.floor(k * span / (n - 1))) for k in range(n)})


def generate_regions(hf: int, wf: int, scales: int) -> list[RegionRect]:
    """Full map followed by multi-scale overlapping square grids.

    Scale l uses squares of side floor(2*min(hf, wf)/(l+1)); order is
    scale-major then row-major, duplicates dropped.
    """
    if hf < 1 or wf < 1:
        raise ShapeError(f"feature map must be at least 1x1, got {hf}x{wf}")
    regions = [RegionRect(0, 0, wf, hf)]
    seen = {regions[0]}
    for level in range(1, scales + 1):
        side = max(1, (2 * min(hf, wf)) // (level + 1))
        for y in _grid_positions(hf, side):
            for x in _grid_positions(wf, side):
                r = RegionRect(x, y, min(side, wf), min(side, hf))
                if r not in seen:
                    seen.add(r)
                    regions.append(r)
    return regions


class MiniDRN:
    """Stem conv, residual groups with per-group dilation, regional GeM head."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        fm = config.final_map_size()
        self.regions = generate_regions(fm, fm, config.region_scales)
        self.blocks: list[ResidualBlockParams] = []
        for g, (width, stride, dil) in enumerate(zip(config.widths, config.strides, config.dilations)):
            for b in range(config.blocks):
                pre = f"group{g + 1}.block{b + 1}"
                s = stride if b == 0 else 1
                has_proj = f"{pre}.proj.weight" in params
                self.blocks.append(
                    ResidualBlockParams(
                        params[f"{pre}.conv1.weight"],
                        params[f"{pre}.conv1.bias"],
                        params[f"{pre}.conv2.weight"],
                        params[f"{pre}.conv2.bias"],
                        dilation=dil,
                        stride=s,
                        proj_w=params.get(f"{pre}.proj.weight") if has_proj else None,
                        proj_b=params.get(f"{pre}.proj.bias") if has_proj else None,
                    )
                )

    @property
    def gem_p(self) -> Tensor:
        return self.params["gem.p"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def backbone(self, images: Tensor) -> Tensor:
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (N,{cfg.in_channels},H,W) images, got {images.shape}")
        if images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
            raise UsageError(
                f"image extents {images.shape[2]}x{images.shape[3]} do not match model input {cfg.input_size}"
            )
        if cfg.input_mean:
            images = Tensor(images.data - cfg.input_mean)
        x = relu(
            conv2d(
                images,
                self.params["stem.weight"],
                self.params["stem.bias"],
                ConvSpec(cfg.stem_stride, 1, cfg.kernel // 2),
            )
        )
        for block in self.blocks:
            x = residual_block(x, block)
        return x

    def head(self, features: Tensor) -> Tensor:
        fc = self.params["fc.weight"]
        region_vecs = [
            l2_normalize(fc_forward(gem_pool(features, self.gem_p, r.as_tuple(), source="backbone"), fc))
            for r in self.regions
        ]
        return l2_normalize(add_n(region_vecs))

    def forward(self, images) -> Tensor:
        """(N, C, H, W) images -> (N, D) unit embeddings (recorded for backward)."""
        return self.head(self.backbone(images if isinstance(images, Tensor) else Tensor(images)))

    __call__ = forward


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    k = config.kernel
    shapes = [
        ("stem.weight", (config.stem_channels, config.in_channels, k, k)),
        ("stem.bias", (config.stem_channels,)),
    ]
    cin = config.stem_channels
    for g, (width, stride) in enumerate(zip(config.widths, config.strides)):
        for b in range(config.blocks):
            pre = f"group{g + 1}.block{b + 1}"
            s = stride if b == 0 else 1
            shapes += [
                (f"{pre}.conv1.weight", (width, cin, k, k)),
                (f"{pre}.conv1.bias", (width,)),
                (f"{pre}.conv2.weight", (width, width, k, k)),
                (f"{pre}.conv2.bias", (width,)),
            ]
            if cin != width or s != 1:
                shapes += [(f"{pre}.proj.weight", (width, cin, 1, 1)), (f"{pre}.proj.bias", (width,))]
            cin = width
    shapes += [("gem.p", (1,)), ("fc.weight", (cin, config.embed_dim))]
    return shapes


# damps each residual branch at init so the identity path dominates early training
RESIDUAL_INIT_SCALE = 0.5


def build_model(config: ModelConfig | None = None, seed: int = 0) -> MiniDRN:
    config = config or ModelConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config):
        if name == "gem.p":
            data = np.full(shape, config.gem_p)
        elif name == "fc.weight":
            data = rng.standard_normal(shape) * np.sqrt(1.0 / shape[0])
            # pooled features are all positive; zero-mean columns keep random embeddings from sharing one direction
            data -= data.mean(axis=0, keepdims=True)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = _he(rng, shape, int(np.prod(shape[1:])))
            if name.endswith("conv2.weight"):
                data *= RESIDUAL_INIT_SCALE
        params[name] = Tensor(data, requires_grad=True, name=name)
    return MiniDRN(config, params)


def param_count(model) -> int:
    """Number of learnable scalars of a model or a sequence of tensors."""
    tensors = model.parameters() if hasattr(model, "parameters") else model
    return int(sum(t.data.size for t in tensors))


def embed_batch(images: np.ndarray, model: MiniDRN, chunk: int = 64) -> np.ndarray:
    """Inference-only embeddings for an (N, C, H, W) array."""
    out = []
    for start in range(0, len(images), chunk):
        out.append(model.forward(Tensor(images[start : start + chunk])).data)
    if not out:
        return np.zeros((0, model.config.embed_dim))
    return np.concatenate(out, axis=0)


def embed(image, model: MiniDRN, id: str = "") -> EmbeddingVector:
    """Embed one (C, H, W) image."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"embed expects a (C,H,W) image, got shape {arr.shape}")
    vec = model.forward(Tensor(arr[None])).data[0]
    return EmbeddingVector(vec, id, bool(zero_norm_rows(vec)[0]))


def five_crop_boxes(h: int, w: int, crop: int) -> list[tuple[int, int]]:
    """Top-left corners of the [center, TL, TR, BL, BR] crops."""
    if crop > h or crop > w:
        raise ShapeError(f"crop {crop} exceeds image extent {h}x{w}")
    return [((h - crop) // 2, (w - crop) // 2), (0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop)]


def five_crop_embed(image, model: MiniDRN, crop: int | None = None, id: str = "") -> EmbeddingVector:
    """Average of the five crop embeddings, re-normalized."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    crop = crop or model.config.input_size
    crops = np.stack([arr[:, y : y + crop, x : x + crop] for y, x in five_crop_boxes(arr.shape[1], arr.shape[2], crop)])
    vecs = model.forward(Tensor(crops)).data
    mean = vecs.mean(axis=0)
    out = l2_normalize(Tensor(mean)).data
    return EmbeddingVector(out, id, bool(zero_norm_rows(mean)[0]))


# ---------------------------------------------------------------------------
# checkpoint file: "DRCK", u32 version, u32 json length, json, float64 params


def save_checkpoint(model: MiniDRN, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_bytes(model: MiniDRN) -> bytes:
    blob = model.config.canonical_json()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(blob)), blob]
    for name, shape in param_shapes(model.config):
        parts.append(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> MiniDRN:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(raw: bytes) -> MiniDRN:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    if len(raw) < 12:
        raise ValueError("checkpoint header truncated")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (length,) = struct.unpack_from("<I", raw, 8)
    if 12 + length > len(raw):
        raise ValueError("checkpoint config blob truncated")
    config = ModelConfig.from_dict(json.loads(raw[12 : 12 + length]))
    config.validate()
    offset = 12 + length
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config):
        nbytes = int(np.prod(shape)) * 8
        if offset + nbytes > len(raw):
            raise ValueError(f"checkpoint truncated inside parameter {name}")
        data = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        params[name] = Tensor(data, requires_grad=True, name=name)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"checkpoint has {len(raw) - offset} trailing bytes")
    return MiniDRN(config, params)
