"""Analytic per-token FLOP counts (2 FLOPs per multiply-accumulate)."""

from __future__ import annotations

from ..model import TransformerModel


def flops_breakdown(model: TransformerModel, context_len: int = 0) -> dict:
    """FLOPs to produce one token at the given context length.

    The embedding is a table lookup and costs nothing here.
    """
    d = model.config.d_model
    projections = attention = 0
    for layer in model.layers:
        width = layer.n_heads * layer.d_head
        projections += 2 * (4 * d * width) + 2 * (3 * d * layer.d_ff)
        # q.k scores and the weighted sum of values
        attention += 2 * 2 * width * context_len
    return {
        "projections": projections,
        "attention": attention,
        "lm_head": 2 * d * model.config.vocab_size,
        "embedding": 0,
    }


def flops_per_token(model: TransformerModel, context_len: int = 0) -> int:
    return sum(flops_breakdown(model, context_len).values())


def projection_flops(model: TransformerModel) -> int:
    return flops_breakdown(model)["projections"]
