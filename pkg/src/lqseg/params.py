"""Parameter containers and initialisers shared by the encoder and decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

Params = dict[str, Tensor]


@dataclass
class ModelConfig:
    d: int = 64
    n_queries: int = 20
    stages: int = 3
    k_cls: int = 4
    k_attr: int = 9
    stem_width: int = 32
    # append normalised x/y planes to the RGB input
    coord_channels: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.stages not in (1, 3):
            raise ValueError(f"stages must be 1 or 3, got {self.stages}")
        if self.d % 2:
            raise ValueError(f"d must be even, got {self.d}")

    @property
    def in_channels(self) -> int:
        return 5 if self.coord_channels else 3


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def conv_params(params: Params, name: str, rng, c_out: int, c_in: int, k: int) -> None:
    params[f"{name}.w"] = kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
    params[f"{name}.b"] = zeros((c_out,))


def linear_params(params: Params, name: str, rng, n_in: int, n_out: int) -> None:
    params[f"{name}.w"] = kaiming_uniform(rng, (n_in, n_out), n_in)
    params[f"{name}.b"] = zeros((n_out,))


def count(params: Params, prefix: str = "") -> int:
    return sum(t.size for k, t in params.items() if k.startswith(prefix))
