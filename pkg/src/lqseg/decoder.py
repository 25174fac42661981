"""Cascaded mask decoder with internal/external attention and the MLR attribute stream.

Each stage refines the queries twice. Internal attention reads tokens pooled
under the stage's incoming masks and emits the external queries; external
attention reads tokens pooled under the internal prediction and emits the
stage's final queries and masks. Masks are always the per-query channel
product of a query with the fused feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import FeaturePyramid, QuerySet
from .params import ModelConfig, Params, linear_params, ones, zeros
from .tensor import ContractError, DimensionError, Tensor

TOKEN_EPS = 1e-6


@dataclass
class StagePrediction:
    mask_logits: Tensor  # N_q x H4 x W4
    class_logits: Tensor  # N_q x (K_cls + 1), last column = no object
    attr_logits: Tensor  # N_q x K_attr
    queries_out: Tensor  # N_q x d
    queries_in: Tensor | None = None
    internal_mask_logits: Tensor | None = None
    initial_mask_logits: Tensor | None = None


@dataclass
class LayeredAttentionOutput:
    initial: Tensor  # M0
    internal: Tensor  # M1
    final: Tensor  # M2
    external_queries: Tensor
    queries_final: Tensor


def attention_params(p: Params, prefix: str, d: int, rng: np.random.Generator) -> None:
    for name in ("wq", "wv", "wo"):
        p[f"{prefix}.{name}"] = T.Tensor(
            rng.uniform(-1, 1, size=(d, d)) * math.sqrt(3.0 / d), requires_grad=True)
    # W_q W_k^T starts near the identity, so matching positional embeddings
    # route each query to its own mask token from the first step
    p[f"{prefix}.wk"] = T.Tensor(p[f"{prefix}.wq"].data.copy(), requires_grad=True)
    p[f"{prefix}.lnt.g"], p[f"{prefix}.lnt.b"] = ones((d,)), zeros((d,))
    p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"] = ones((d,)), zeros((d,))
    linear_params(p, f"{prefix}.ffn1", rng, d, 4 * d)
    linear_params(p, f"{prefix}.ffn2", rng, 4 * d, d)
    p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"] = ones((d,)), zeros((d,))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    d = cfg.d
    for j in range(1, cfg.stages + 1):
        attention_params(p, f"dec.s{j}.int", d, rng)
        attention_params(p, f"dec.s{j}.ext", d, rng)
        linear_params(p, f"dec.s{j}.cls", rng, d, cfg.k_cls + 1)
        p[f"dec.s{j}.attr_ln.g"], p[f"dec.s{j}.attr_ln.b"] = ones((d,)), zeros((d,))
        linear_params(p, f"dec.s{j}.attr", rng, d, cfg.k_attr)
    return p


def stage_params(p: Params, j: int, branch: str) -> Params:
    """View of one attention block's parameters with the prefix stripped."""
    prefix = f"dec.s{j}.{branch}."
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


def initial_mask(queries: Tensor, fused: Tensor) -> Tensor:
    """logits[q, h, w] = sum_c queries[q, c] * fused[c, h, w]."""
    d, h, w = fused.shape
    if queries.ndim != 2 or queries.shape[1] != d:
        raise DimensionError(f"queries {queries.shape} do not match fused channels {d}")
    return T.matmul(queries, fused.reshape(d, h * w)).reshape(queries.shape[0], h, w)


def mask_to_tokens(mask_logits: Tensor, fused: Tensor) -> Tensor:
    """Per-query average of the fused features weighted by sigmoid(mask)."""
    n = mask_logits.shape[0]
    d, h, w = fused.shape
    weights = T.sigmoid(mask_logits.reshape(n, h * w))
    num = T.matmul(weights, fused.reshape(d, h * w).T)
    den = T.broadcast_to(weights.sum(axis=1, keepdims=True) + TOKEN_EPS, (n, d))
    return num / den


def feed_forward(x: Tensor, p: Params) -> Tensor:
    hidden = T.relu(T.matmul(x, p["ffn1.w"]) + p["ffn1.b"])
    return T.matmul(hidden, p["ffn2.w"]) + p["ffn2.b"]


def attention_weights(queries: Tensor, keys: Tensor, p: Params) -> Tensor:
    d = queries.shape[1]
    scores = T.matmul(T.matmul(queries, p["wq"]), T.matmul(keys, p["wk"]).T)
    return T.softmax(scores * (1.0 / math.sqrt(d)), axis=-1)


def attention_stage(queries: Tensor, tokens: Tensor, p: Params, fused: Tensor,
                    eps: float = 1e-5, positional: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Single-head attention of queries over mask tokens, post-LN residual + FFN.

    ``positional`` (one row per query, token k belongs to query k) is added to
    the attention query and key inputs only; values and the residual stream
    carry content alone. The returned mask is read from content + positional.
    """
    if queries.shape != tokens.shape:
        raise DimensionError(f"queries {queries.shape} vs tokens {tokens.shape}")
    # pooled features are small next to the normalised queries; bring them to the same scale
    tokens = T.layer_norm(tokens, p["lnt.g"], p["lnt.b"], eps)
    if positional is None:
        attn = attention_weights(queries, tokens, p)
    else:
        attn = attention_weights(queries + positional, tokens + positional, p)
    a = T.matmul(T.matmul(attn, T.matmul(tokens, p["wv"])), p["wo"])
    q = T.layer_norm(queries + a, p["ln1.g"], p["ln1.b"], eps)
    q = T.layer_norm(q + feed_forward(q, p), p["ln2.g"], p["ln2.b"], eps)
    return q, initial_mask(q if positional is None else q + positional, fused)


def multi_layered_attention(queries: Tensor, fused: Tensor, p_internal: Params,
                            p_external: Params, eps: float = 1e-5,
                            positional: Tensor | None = None) -> LayeredAttentionOutput:
    combined = queries if positional is None else queries + positional
    m0 = initial_mask(combined, fused)
    q_ext, m1 = attention_stage(queries, mask_to_tokens(m0, fused), p_internal, fused, eps,
                                positional)
    q_fin, m2 = attention_stage(q_ext, mask_to_tokens(m1, fused), p_external, fused, eps,
                                positional)
    return LayeredAttentionOutput(m0, m1, m2, q_ext, q_fin)


def mlr_attribute_features(prev_mask: Tensor, levels: list[Tensor], queries: Tensor,
                           stage: int) -> Tensor:
    """Multi-level attribute features pooled under the previous stage's masks.

    For each level i the previous mask (resized, sigmoid) and a per-query
    correlation gate sigmoid(q . F_i) weight a spatial sum of F_i; the four
    level results are averaged.
    """
    if stage not in (1, 2, 3):
        raise ContractError(f"stage must be 1, 2 or 3, got {stage}")
    n = queries.shape[0]
    total = None
    for f in levels:
        d, h, w = f.shape
        flat = f.reshape(d, h * w)
        weights = T.sigmoid(T.resize_bilinear(prev_mask, h, w).reshape(n, h * w))
        gate = T.sigmoid(T.matmul(queries, flat))
        pooled = T.matmul(weights * gate, flat.T)
        total = pooled if total is None else total + pooled
    return total * (1.0 / len(levels))


def predict_heads(queries_final: Tensor, attr_features: Tensor, p: Params, j: int,
                  eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    cls = T.matmul(queries_final, p[f"dec.s{j}.cls.w"]) + p[f"dec.s{j}.cls.b"]
    # spatial sums scale with mask area, so normalise before the linear read-out
    normed = T.layer_norm(attr_features, p[f"dec.s{j}.attr_ln.g"], p[f"dec.s{j}.attr_ln.b"], eps)
    attr = T.matmul(normed, p[f"dec.s{j}.attr.w"]) + p[f"dec.s{j}.attr.b"]
    return cls, attr


def run_decoder(queries: QuerySet, pyramid: FeaturePyramid, p: Params,
                stages: int = 3, eps: float = 1e-5) -> list[StagePrediction]:
    # content is carried stage to stage; the positional part is re-added every time
    # the content changes, inside each attention block
    q = queries.content
    out: list[StagePrediction] = []
    for j in range(1, stages + 1):
        mla = multi_layered_attention(q, pyramid.fused, stage_params(p, j, "int"),
                                      stage_params(p, j, "ext"), eps, queries.positional)
        attr_feat = mlr_attribute_features(mla.initial, pyramid.levels, mla.queries_final, j)
        cls, attr = predict_heads(mla.queries_final, attr_feat, p, j, eps)
        out.append(StagePrediction(
            mask_logits=mla.final, class_logits=cls, attr_logits=attr,
            queries_out=mla.queries_final, queries_in=q,
            internal_mask_logits=mla.internal, initial_mask_logits=mla.initial,
        ))
        q = mla.queries_final
    return out
