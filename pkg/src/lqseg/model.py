"""Encoder + decoder wiring around a flat parameter dictionary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoder, encoder
from .decoder import StagePrediction
from .encoder import FeaturePyramid, QuerySet
from .params import ModelConfig, Params, count


@dataclass
class ForwardOutput:
    pyramid: FeaturePyramid
    queries: QuerySet
    stages: list[StagePrediction]


class Model:
    def __init__(self, cfg: ModelConfig, params: Params | None = None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            rng = np.random.default_rng(seed)
            params = encoder.init_params(cfg, rng)
            params.update(decoder.init_params(cfg, rng))
        self.params = params

    def forward(self, image: np.ndarray) -> ForwardOutput:
        x = encoder.prepare_input(image, self.cfg)
        pyramid, queries = encoder.encode(x, self.params)
        stages = decoder.run_decoder(queries, pyramid, self.params, self.cfg.stages,
                                     self.cfg.ln_eps)
        return ForwardOutput(pyramid, queries, stages)

    __call__ = forward

    def num_parameters(self, prefix: str = "") -> int:
        return count(self.params, prefix)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None
