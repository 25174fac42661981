"""Pyramid backbone, multi-scale fusion and query generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ModelConfig, Params, conv_params
from .tensor import ContractError, Tensor

N_LEVELS = 4
FUSE_INIT_SCALE = 0.1


@dataclass
class FeaturePyramid:
    levels: list[Tensor]  # strides 4, 8, 16, 32
    fused: Tensor  # d x H/4 x W/4


@dataclass
class QuerySet:
    content: Tensor
    positional: Tensor

    @property
    def combined(self) -> Tensor:
        return self.content + self.positional


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    d = cfg.d
    conv_params(p, "enc.stem", rng, cfg.stem_width, cfg.in_channels, 3)
    c_in = cfg.stem_width
    for i in range(1, N_LEVELS + 1):
        conv_params(p, f"enc.c{i}a", rng, d, c_in, 3)
        conv_params(p, f"enc.c{i}b", rng, d, d, 3)
        conv_params(p, f"enc.lat{i}", rng, d, d, 1)
        conv_params(p, f"enc.out{i}", rng, d, d, 3)
        c_in = d
    conv_params(p, "enc.fuse", rng, d, N_LEVELS * d, 1)
    # keeps initial mask logits O(1) so sigmoids start unsaturated
    p["enc.fuse.w"].data *= FUSE_INIT_SCALE
    p["enc.query"] = T.Tensor(rng.normal(0.0, 0.02, size=(cfg.n_queries, d)), requires_grad=True)
    return p


def coord_planes(height: int, width: int) -> np.ndarray:
    ys = (np.arange(height) + 0.5) / height * 2 - 1
    xs = (np.arange(width) + 0.5) / width * 2 - 1
    return np.stack([np.broadcast_to(xs[None, :], (height, width)),
                     np.broadcast_to(ys[:, None], (height, width))])


def prepare_input(image: np.ndarray, cfg: ModelConfig) -> Tensor:
    image = np.asarray(image, dtype=np.float64)
    if cfg.coord_channels:
        image = np.concatenate([image, coord_planes(*image.shape[1:])])
    return Tensor(image)


def _conv(x: Tensor, p: Params, name: str, stride: int = 1) -> Tensor:
    w = p[f"{name}.w"]
    return T.conv2d(x, w, p[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)


def extract_pyramid(image: Tensor, p: Params) -> list[Tensor]:
    """Stride-2 conv blocks plus an FPN top-down pathway; four d-channel levels."""
    _, h, w = image.shape
    if h % 32 or w % 32:
        raise ContractError(f"image size {h}x{w} must be divisible by 32; pad the input first")
    x = T.relu(_conv(image, p, "enc.stem", stride=2))
    bottom_up = []
    for i in range(1, N_LEVELS + 1):
        x = T.relu(_conv(x, p, f"enc.c{i}a", stride=2))
        x = T.relu(_conv(x, p, f"enc.c{i}b"))
        bottom_up.append(x)
    levels: list[Tensor] = [None] * N_LEVELS  # type: ignore[list-item]
    top = None
    for i in reversed(range(N_LEVELS)):
        lat = _conv(bottom_up[i], p, f"enc.lat{i + 1}")
        if top is not None:
            lat = lat + T.resize_bilinear(top, *lat.shape[1:])
        top = lat
        levels[i] = _conv(lat, p, f"enc.out{i + 1}")
    return levels


def fuse_features(levels: list[Tensor], p: Params) -> Tensor:
    """Resize every level to stride 4, concatenate channels, project back to d."""
    if len(levels) != N_LEVELS:
        raise ContractError(f"expected {N_LEVELS} pyramid levels, got {len(levels)}")
    h, w = levels[0].shape[1:]
    stacked = T.concat([T.resize_bilinear(f, h, w) for f in levels], axis=0)
    return _conv(stacked, p, "enc.fuse")


def positional_encoding(n_queries: int, d: int) -> np.ndarray:
    if d % 2:
        raise ContractError(f"positional encoding needs an even width, got {d}")
    q = np.arange(n_queries, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((n_queries, d))
    pe[:, 0::2] = np.sin(q / freq)
    pe[:, 1::2] = np.cos(q / freq)
    return pe


def make_queries(fused: Tensor, p: Params) -> QuerySet:
    """Learned, image-independent content queries plus a fixed index encoding.

    ``fused`` only fixes the channel width the queries must match.
    """
    content = p["enc.query"]
    n, d = content.shape
    if fused.shape[0] != d:
        raise T.DimensionError(f"query width {d} != fused channels {fused.shape[0]}")
    return QuerySet(content=content, positional=Tensor(positional_encoding(n, d)))


def encode(image: Tensor, p: Params) -> tuple[FeaturePyramid, QuerySet]:
    levels = extract_pyramid(image, p)
    fused = fuse_features(levels, p)
    return FeaturePyramid(levels, fused), make_queries(fused, p)

