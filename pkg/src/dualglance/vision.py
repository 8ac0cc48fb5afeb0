"""Image patches, small conv backbones, shared feature maps, and ROI pooling.

Backbones are config-driven conv stacks (conv -> relu -> maxpool per stage)
standing in for the large pretrained networks this pipeline would normally
ride on; everything here trains from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import Box

__all__ = [
    "ImagePlane",
    "FeatureMap",
    "BackboneSpec",
    "BackboneParams",
    "init_backbone",
    "crop_resize",
    "backbone_forward",
    "conv_features",
    "roi_pool",
    "roi_pool_rows",
    "read_image",
    "write_raw_image",
    "horizontal_flip",
]

_RAW_MAGIC = b"DGIMG 1\n"


class ImagePlane:
    """H x W x 3 pixel grid, float values in [0,1]."""

    __slots__ = ("pixels",)

    def __init__(self, pixels):
        arr = np.asarray(pixels, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be HxWx3, got {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("pixel values must be finite and within [0,1]")
        self.pixels = arr

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def chw(self) -> np.ndarray:
        return self.pixels.transpose(2, 0, 1)


@dataclass
class FeatureMap:
    """Spatial conv activations plus the stride that maps image -> cell coords."""

    values: Tensor  # (n, channels, h, w)
    stride: int

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(frozen=True)
class BackboneSpec:
    """Conv stack: per stage conv(kernel, pad=kernel//2) -> relu -> maxpool(pool)."""

    channels: tuple[int, ...] = (8, 16, 32)
    in_channels: int = 3
    kernel: int = 3
    pool: int = 2

    def __post_init__(self):
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError(f"bad channel spec {self.channels}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd so padding preserves extent")

    @property
    def stride(self) -> int:
        return self.pool ** len(self.channels)

    def feature_len(self, in_size: int) -> int:
        side = in_size // self.stride
        return self.channels[-1] * side * side


@dataclass
class BackboneParams:
    spec: BackboneSpec
    stages: list  # [(w Tensor, b Tensor), ...]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.stages):
            out[f"{prefix}.conv{i}.w"] = w
            out[f"{prefix}.conv{i}.b"] = b
        return out


def _glorot(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_backbone(spec: BackboneSpec, rng, dtype=np.float32) -> BackboneParams:
    stages = []
    cin = spec.in_channels
    k = spec.kernel
    for cout in spec.channels:
        w = _glorot(rng, (cout, cin, k, k), cin * k * k, cout * k * k, dtype)
        b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        stages.append((w, b))
        cin = cout
    return BackboneParams(spec=spec, stages=stages)


def _conv_stack(x: Tensor, params: BackboneParams) -> Tensor:
    spec = params.spec
    pad = spec.kernel // 2
    h = x
    for w, b in params.stages:
        h = dc.relu(dc.conv2d(h, w, b, stride=1, padding=pad))
        h = dc.maxpool2d(h, spec.pool)
    return h


def backbone_forward(patches: Tensor, params: BackboneParams) -> Tensor:
    """(n, 3, s, s) patch batch -> (n, feature_len) flattened last-conv output."""
    n, cin, hgt, wid = patches.values.shape
    spec = params.spec
    if cin != spec.in_channels or hgt % spec.stride or wid % spec.stride:
        raise dc.ShapeError(
            f"backbone_forward: input {patches.values.shape} incompatible with "
            f"{spec.in_channels} channels / stride {spec.stride}")
    h = _conv_stack(patches, params)
    return dc.reshape(h, (n, -1))


def conv_features(images: Tensor, params: BackboneParams) -> FeatureMap:
    """Shared spatial feature map over whole images, with stride bookkeeping."""
    n, cin, hgt, wid = images.values.shape
    spec = params.spec
    if cin != spec.in_channels or hgt % spec.stride or wid % spec.stride:
        raise dc.ShapeError(
            f"conv_features: input {images.values.shape} must be divisible by stride {spec.stride}")
    return FeatureMap(values=_conv_stack(images, params), stride=spec.stride)


# ---------------------------------------------------------------------------
# crop + bilinear resize


def _sample_positions(lo: float, hi: float, n_src: int, out: int) -> np.ndarray:
    # half-pixel convention, edge-clamped
    scale = (hi - lo) / out
    pos = lo + (np.arange(out) + 0.5) * scale - 0.5
    return np.clip(pos, 0.0, n_src - 1.0)


def crop_resize(image: ImagePlane, box: Box, out_size: int) -> ImagePlane:
    """Clip the box to the image, then bilinearly resample the crop to
    out_size x out_size. A box fully outside the image is rejected."""
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    clipped = box.clip(image.width, image.height)
    px = image.pixels.astype(np.float64)
    ys = _sample_positions(clipped.ymin, clipped.ymax, image.height, out_size)
    xs = _sample_positions(clipped.xmin, clipped.xmax, image.width, out_size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, image.height - 1)
    x1 = np.minimum(x0 + 1, image.width - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = px[y0[:, None], x0[None, :], :] * (1 - fx) + px[y0[:, None], x1[None, :], :] * fx
    bot = px[y1[:, None], x0[None, :], :] * (1 - fx) + px[y1[:, None], x1[None, :], :] * fx
    out = top * (1 - fy) + bot * fy
    return ImagePlane(np.clip(out, 0.0, 1.0).astype(np.float32))


def horizontal_flip(image: ImagePlane) -> ImagePlane:
    return ImagePlane(image.pixels[:, ::-1, :].copy())


# ---------------------------------------------------------------------------
# ROI pooling


def _cell_edges(lo: int, hi: int, g: int) -> list[tuple[int, int]]:
    # floor/ceil partition; every cell clamped to hold at least one element
    n = hi - lo
    edges = []
    for i in range(g):
        a = lo + int(np.floor(i * n / g))
        b = lo + int(np.ceil((i + 1) * n / g))
        b = min(max(b, a + 1), hi)
        a = min(a, b - 1)
        edges.append((a, b))
    return edges


def _box_to_cells(box: Box, stride: int, h: int, w: int, scale: float):
    x0 = int(np.floor(box.xmin * scale / stride))
    y0 = int(np.floor(box.ymin * scale / stride))
    x1 = int(np.ceil(box.xmax * scale / stride))
    y1 = int(np.ceil(box.ymax * scale / stride))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    if x0 >= x1 or y0 >= y1:
        raise ValueError(f"box {box} maps to an empty region at stride {stride}")
    return x0, y0, x1, y1


def roi_pool_rows(fm: FeatureMap, sample_idx: int, boxes, grid: int, scale: float = 1.0) -> Tensor:
    """Pool several boxes of one sample off a batched feature map.

    Returns (len(boxes), channels*grid*grid); gradients scatter back to the
    argmax cells of fm. ``scale`` converts box pixel coords into the
    resolution the feature map was computed at.
    """
    vals = fm.values.values
    n, c, h, w = vals.shape
    g = grid
    r = len(boxes)
    plane = vals[sample_idx]
    out = np.empty((r, c * g * g), dtype=vals.dtype)
    arg_y = np.empty((r, c * g * g), dtype=np.int64)
    arg_x = np.empty((r, c * g * g), dtype=np.int64)
    for ri, box in enumerate(boxes):
        x0, y0, x1, y1 = _box_to_cells(box, fm.stride, h, w, scale)
        for i, (ya, yb) in enumerate(_cell_edges(y0, y1, g)):
            for j, (xa, xb) in enumerate(_cell_edges(x0, x1, g)):
                window = plane[:, ya:yb, xa:xb].reshape(c, -1)
                am = window.argmax(axis=1)
                dy, dx = np.divmod(am, xb - xa)
                sl = slice(i * g + j, None, g * g)
                out[ri, sl] = window[np.arange(c), am]
                arg_y[ri, sl] = ya + dy
                arg_x[ri, sl] = xa + dx

    out_t = Tensor(out, requires_grad=fm.values.requires_grad)
    chan = np.tile(np.repeat(np.arange(c), g * g), (r, 1)).reshape(r, c * g * g)

    def rule(grad):
        buf = dc.engine.grad_buffer(fm.values)
        if buf is not None:
            np.add.at(buf, (sample_idx, chan, arg_y, arg_x), grad)

    return dc.record(out_t, rule)


def roi_pool(fm: FeatureMap, box: Box, grid: int) -> Tensor:
    """Fixed-length pooled vector (channels*grid*grid,) for one box on a
    single-image feature map."""
    if fm.values.values.shape[0] != 1:
        raise dc.ShapeError(f"roi_pool expects a single-image map, got {fm.values.values.shape}")
    rows = roi_pool_rows(fm, 0, [box], grid)
    return dc.reshape(rows, (-1,))


# ---------------------------------------------------------------------------
# image files: PNG via Pillow, or the raw tensor format (docs/formats.md)


def write_raw_image(path, image: ImagePlane) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(f"{image.height} {image.width} 3\n".encode())
        fh.write(np.ascontiguousarray(image.pixels, dtype="<f4").tobytes())


def _read_raw_image(path) -> ImagePlane:
    with open(path, "rb") as fh:
        if fh.readline() != _RAW_MAGIC:
            raise ValueError(f"{path}: not a raw image file")
        h, w, ch = (int(v) for v in fh.readline().split())
        if ch != 3:
            raise ValueError(f"{path}: expected 3 channels, got {ch}")
        buf = fh.read(h * w * ch * 4)
        arr = np.frombuffer(buf, dtype="<f4").reshape(h, w, ch)
    return ImagePlane(arr.astype(np.float32))


def read_image(path) -> ImagePlane:
    path = Path(path)
    if path.suffix == ".dgi":
        return _read_raw_image(path)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return ImagePlane(arr)
