"""Synthetic retrieval datasets, PPM image I/O and crop/resize helpers."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .model import five_crop_boxes
from .tensor import ConfigError

# the first BACKGROUNDS entries are backdrop colors, the rest are shape colors
PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.70, 0.20],
        [0.20, 0.30, 0.90],
        [0.95, 0.85, 0.15],
        [0.80, 0.25, 0.85],
        [0.10, 0.80, 0.85],
    ]
)
BACKGROUNDS = 2
SHAPE_KINDS = ("rect", "disc", "ring", "bar")
DISTRACTOR_BASE = 1_000_000


class PPMError(ValueError):
    """Malformed or truncated PPM payload."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class ImageRecord:
    id: str
    label: int
    pixels: np.ndarray  # (3, H, W) float64 in [0, 1]


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 20
    images_per_class: int = 24
    image_size: int = 32
    translation: int = 6
    brightness: float = 0.25
    occlusion: float = 0.3
    noise: float = 0.03
    clutter: float = 0.0
    distractors: int = 100
    train_per_class: int = 16
    queries_per_class: int = 2

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be at least 16, got {self.image_size}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.occlusion > 1 or self.clutter > 1:
            raise ConfigError("occlusion and clutter are fractions and must be <= 1")

    def zero_perturbation(self) -> "SynthSpec":
        return replace(self, translation=0, brightness=0.0, occlusion=0.0, noise=0.0, clutter=0.0)


@dataclass
class Dataset:
    splits: dict[str, list[ImageRecord]]
    kind: str = "retrieval"  # or "groups" for the recall@4 protocol
    spec: dict | None = None

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        recs = self.splits[split]
        if not recs:
            return np.zeros((0, 3, 1, 1)), np.zeros(0, dtype=int), []
        return np.stack([r.pixels for r in recs]), np.array([r.label for r in recs]), [r.id for r in recs]


# ---------------------------------------------------------------------------
# rendering


def class_pattern(class_id: int, n_shapes: int = 3) -> dict:
    """Base composition for a class, a pure function of the class id."""
    rng = np.random.default_rng([0x5EED, int(class_id)])
    bg = int(rng.integers(BACKGROUNDS))
    shapes = []
    for _ in range(n_shapes):
        color = BACKGROUNDS + int(rng.integers(len(PALETTE) - BACKGROUNDS))
        shapes.append(
            {
                "kind": SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))],
                "color": color,
                "cx": float(rng.uniform(0.2, 0.8)),
                "cy": float(rng.uniform(0.2, 0.8)),
                "size": float(rng.uniform(0.15, 0.32)),
                "angle": int(rng.integers(2)),
            }
        )
    return {"background": bg, "shapes": shapes}


def render(pattern: dict, size: int, shift: tuple[float, float] = (0.0, 0.0), background=None, extra=()) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = np.empty((3, size, size))
    img[:] = (PALETTE[pattern["background"]] if background is None else background)[:, None, None]
    for shp in list(extra) + pattern["shapes"]:
        cx = shp["cx"] * size + shift[0]
        cy = shp["cy"] * size + shift[1]
        r = shp["size"] * size
        dx, dy = xs - cx, ys - cy
        if shp["kind"] == "rect":
            mask = (np.abs(dx) <= r * 0.8) & (np.abs(dy) <= r * 0.8)
        elif shp["kind"] == "disc":
            mask = dx * dx + dy * dy <= r * r
        elif shp["kind"] == "ring":
            rr = dx * dx + dy * dy
            mask = (rr <= r * r) & (rr >= (0.55 * r) ** 2)
        else:
            long_, short = (dx, dy) if shp["angle"] else (dy, dx)
            mask = (np.abs(long_) <= r * 1.4) & (np.abs(short) <= r * 0.35)
        img[:, mask] = PALETTE[shp["color"]][:, None]
    return img


def render_instance(class_id: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    t = spec.translation
    shift = (float(rng.integers(-t, t + 1)), float(rng.integers(-t, t + 1))) if t else (0.0, 0.0)
    pattern = class_pattern(class_id)
    background, extra = None, ()
    if spec.clutter:
        # appearance change: the backdrop drifts toward a random color and a clutter object appears
        own = PALETTE[pattern["background"]]
        background = (1 - spec.clutter) * own + spec.clutter * rng.uniform(0.0, 1.0, size=3)
        extra = class_pattern(int(rng.integers(1 << 30)), n_shapes=1)["shapes"]
    img = render(pattern, size, shift, background, extra)
    if spec.brightness:
        img = img * rng.uniform(1 - spec.brightness, 1 + spec.brightness)
    if spec.occlusion:
        side = int(round(rng.uniform(0, spec.occlusion) * size))
        if side > 0:
            y0, x0 = rng.integers(0, size - side + 1, size=2)
            img[:, y0 : y0 + side, x0 : x0 + side] = rng.uniform(0, 1, size=3)[:, None, None]
    if spec.noise:
        img = img + rng.normal(0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _instance_rng(seed: int, class_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(class_id) & 0xFFFFFFFF, int(index)])


def generate_synthetic(spec: SynthSpec | None = None, seed: int = 0) -> Dataset:
    """Train/gallery/query splits plus unique-label distractors in the gallery."""
    spec = spec or SynthSpec()
    spec.validate()
    if spec.images_per_class < spec.train_per_class + spec.queries_per_class + 1:
        raise ConfigError(
            f"images_per_class={spec.images_per_class} cannot cover {spec.train_per_class} train, "
            f"{spec.queries_per_class} query and at least one gallery image"
        )
    splits: dict[str, list[ImageRecord]] = {"train": [], "gallery": [], "query": []}
    for c in range(spec.num_classes):
        for i in range(spec.images_per_class):
            rec = ImageRecord(f"c{c:04d}_{i:03d}", c, render_instance(c, spec, _instance_rng(seed, c, i)))
            if i < spec.train_per_class:
                splits["train"].append(rec)
            elif i < spec.train_per_class + spec.queries_per_class:
                splits["query"].append(rec)
            else:
                splits["gallery"].append(rec)
    for j in range(spec.distractors):
        label = DISTRACTOR_BASE + j
        splits["gallery"].append(ImageRecord(f"d{j:05d}", label, render_instance(label, spec, _instance_rng(seed, label, 0))))
    return Dataset(splits, "retrieval", spec.to_dict())


def generate_groups(spec: SynthSpec | None = None, seed: int = 0, groups: int = 200, train_per_group: int = 12) -> Dataset:
    """UKB-style data: groups of exactly four images plus training images per group.

    The ``groups`` split holds 4 images per class; queries are the first image
    of each group and stay in the gallery.
    """
    spec = spec or SynthSpec()
    spec.validate()
    splits: dict[str, list[ImageRecord]] = {"train": [], "groups": []}
    for c in range(groups):
        for i in range(train_per_group + 4):
            rec = ImageRecord(f"g{c:04d}_{i:03d}", c, render_instance(c, spec, _instance_rng(seed, c, i)))
            splits["train" if i < train_per_group else "groups"].append(rec)
    meta = spec.to_dict()
    meta.update(groups=groups, train_per_group=train_per_group)
    return Dataset(splits, "groups", meta)


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)

_WS = b" \t\n\r\v\f"


def _header_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(raw)
    while len(tokens) < count:
        while pos < n and (raw[pos] in _WS or raw[pos] == ord("#")):
            if raw[pos] == ord("#"):
                while pos < n and raw[pos] not in b"\n\r":
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise PPMError("header truncated", pos)
        start = pos
        while pos < n and raw[pos] not in _WS and raw[pos] != ord("#"):
            pos += 1
        tokens.append(raw[start:pos])
    if pos >= n or raw[pos] not in _WS:
        raise PPMError("missing whitespace after header", pos)
    return tokens, pos + 1


def decode_ppm(raw: bytes) -> np.ndarray:
    if len(raw) < 2 or raw[:2] != b"P6":
        raise PPMError("not a binary PPM (expected magic P6)", 0)
    tokens, offset = _header_tokens(raw, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PPMError(f"non-numeric header field in {tokens[1:]!r}", offset) from None
    if w < 1 or h < 1:
        raise PPMError(f"invalid image extent {w}x{h}", offset)
    if maxval != 255:
        raise PPMError(f"only maxval 255 is supported, got {maxval}", offset)
    need = w * h * 3
    if len(raw) - offset < need:
        raise PPMError(f"payload truncated: need {need} bytes, have {len(raw) - offset}", len(raw))
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=offset).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(pixels: np.ndarray) -> bytes:
    c, h, w = pixels.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    q = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()


def load_image(path, label: int = -1, id: str | None = None) -> ImageRecord:
    path = Path(path)
    return ImageRecord(id or path.stem, label, decode_ppm(path.read_bytes()))


def save_image(record: ImageRecord, path) -> None:
    Path(path).write_bytes(encode_ppm(record.pixels))


# ---------------------------------------------------------------------------
# geometry


def resize(img: ImageRecord, max_side: int, square: bool = False) -> ImageRecord:
    """Bilinear resize (half-pixel centers) so that the longer side is ``max_side``."""
    c, h, w = img.pixels.shape
    if square:
        nh = nw = max_side
    else:
        factor = max_side / max(h, w)
        nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(nh, h)
    x0, x1, fx = axis(nw, w)
    p = img.pixels
    top = p[:, y0][:, :, x0] * (1 - fx) + p[:, y0][:, :, x1] * fx
    bot = p[:, y1][:, :, x0] * (1 - fx) + p[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return ImageRecord(img.id, img.label, out)


def center_crop(img: ImageRecord, crop: int) -> ImageRecord:
    y, x = five_crop_boxes(img.pixels.shape[1], img.pixels.shape[2], crop)[0]
    return ImageRecord(img.id, img.label, img.pixels[:, y : y + crop, x : x + crop].copy())


def five_crops(img: ImageRecord, crop: int) -> list[ImageRecord]:
    """[center, top-left, top-right, bottom-left, bottom-right]."""
    boxes = five_crop_boxes(img.pixels.shape[1], img.pixels.shape[2], crop)
    return [ImageRecord(img.id, img.label, img.pixels[:, y : y + crop, x : x + crop].copy()) for y, x in boxes]


# ---------------------------------------------------------------------------
# dataset directory: <root>/<split>/<label>/<id>.ppm + manifest.json

_SAFE_ID = re.compile(r"^[A-Za-z0-9_.-]+$")


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    manifest = {"kind": ds.kind, "spec": ds.spec, "splits": {}}
    for split, recs in ds.splits.items():
        entries = []
        for r in recs:
            if not _SAFE_ID.match(r.id):
                raise ValueError(f"image id {r.id!r} is not filesystem safe")
            d = root / split / str(r.label)
            d.mkdir(parents=True, exist_ok=True)
            save_image(r, d / f"{r.id}.ppm")
            entries.append({"id": r.id, "label": r.label})
        manifest["splits"][split] = entries
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    splits = {}
    for split, entries in manifest["splits"].items():
        splits[split] = [
            load_image(root / split / str(e["label"]) / f"{e['id']}.ppm", e["label"], e["id"]) for e in entries
        ]
    return Dataset(splits, manifest.get("kind", "retrieval"), manifest.get("spec"))
