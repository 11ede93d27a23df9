"""Structural pruning primitives and parameter accounting.

Every operation returns a new model; the input is left untouched.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import PROJECTIONS, TransformerLayer, TransformerModel


@dataclass
class PrunePlan:
    """A depth plan (``layer``) or a width plan (per-layer ``heads``/``neurons``)."""

    kind: str
    layer: int | None = None
    heads: list[list[int]] = field(default_factory=list)
    neurons: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        return cls(kind=d["kind"], layer=d.get("layer"),
                   heads=[list(h) for h in d.get("heads", [])],
                   neurons=[list(n) for n in d.get("neurons", [])])


def total_params(model: TransformerModel) -> int:
    n = model.embedding.size + model.final_norm.size + model.lm_head.size
    return n + sum(_layer_size(layer) for layer in model.layers)


def _layer_size(layer: TransformerLayer) -> int:
    return sum(t.size for _, t in layer.named_tensors())


def prunable_params(layer: TransformerLayer) -> int:
    return sum(getattr(layer, name).size for name in PROJECTIONS)


def layer_params(model: TransformerModel, idx: int) -> int:
    _check_layer(model, idx)
    return _layer_size(model.layers[idx])


def compute_ct(model: TransformerModel, idx: int) -> float:
    """Fraction of the model's parameters held by layer ``idx``."""
    return layer_params(model, idx) / total_params(model)


def _check_layer(model: TransformerModel, idx: int) -> None:
    if not 0 <= idx < model.n_layers:
        raise IndexError(f"layer index {idx} out of range for {model.n_layers} layers")


def _sync_config(model: TransformerModel) -> None:
    model.config = dataclasses.replace(model.config, n_layers=model.n_layers)


def remove_layer(model: TransformerModel, idx: int) -> TransformerModel:
    _check_layer(model, idx)
    out = model.copy()
    del out.layers[idx]
    _sync_config(out)
    return out


def _check_units(indices, n: int, what: str) -> list[int]:
    idx = sorted(int(i) for i in indices)
    if len(set(idx)) != len(idx):
        raise ContractError(f"duplicate {what} indices: {indices}")
    if idx and (idx[0] < 0 or idx[-1] >= n):
        raise IndexError(f"{what} index out of range [0, {n})")
    if len(idx) >= n:
        raise ContractError(f"removing {len(idx)} of {n} {what}s would empty the layer")
    return idx


def _drop_heads(layer: TransformerLayer, heads: list[int]) -> None:
    if not heads:
        return
    dh = layer.d_head
    keep_heads = [h for h in range(layer.n_heads) if h not in set(heads)]
    cols = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in keep_heads])
    for name in ("wq", "wk", "wv"):
        w = getattr(layer, name)
        w.data = np.ascontiguousarray(w.data[:, cols])
    layer.wo.data = np.ascontiguousarray(layer.wo.data[cols, :])


def _drop_neurons(layer: TransformerLayer, neurons: list[int]) -> None:
    if not neurons:
        return
    keep = np.setdiff1d(np.arange(layer.d_ff), np.asarray(neurons, dtype=np.int64))
    layer.w_gate.data = np.ascontiguousarray(layer.w_gate.data[:, keep])
    layer.w_up.data = np.ascontiguousarray(layer.w_up.data[:, keep])
    layer.w_down.data = np.ascontiguousarray(layer.w_down.data[keep, :])


def remove_heads(model: TransformerModel, layer_idx: int, head_indices) -> TransformerModel:
    _check_layer(model, layer_idx)
    heads = _check_units(head_indices, model.layers[layer_idx].n_heads, "head")
    out = model.copy()
    _drop_heads(out.layers[layer_idx], heads)
    return out


def remove_neurons(model: TransformerModel, layer_idx: int, neuron_indices) -> TransformerModel:
    _check_layer(model, layer_idx)
    neurons = _check_units(neuron_indices, model.layers[layer_idx].d_ff, "neuron")
    out = model.copy()
    _drop_neurons(out.layers[layer_idx], neurons)
    return out


def apply_plan(model: TransformerModel, plan: PrunePlan) -> TransformerModel:
    if plan.kind == "depth":
        return remove_layer(model, plan.layer)
    if plan.kind != "width":
        raise ContractError(f"unknown plan kind {plan.kind!r}")
    if len(plan.heads) != model.n_layers or len(plan.neurons) != model.n_layers:
        raise ContractError("width plan must list every layer")
    checked = []
    for layer, heads, neurons in zip(model.layers, plan.heads, plan.neurons):
        checked.append((_check_units(heads, layer.n_heads, "head"),
                        _check_units(neurons, layer.d_ff, "neuron")))
    out = model.copy()
    for layer, (heads, neurons) in zip(out.layers, checked):
        _drop_heads(layer, heads)
        _drop_neurons(layer, neurons)
    return out


def _lowest(scores: np.ndarray, k: int) -> list[int]:
    # stable sort: equal scores resolve toward the lower index
    return sorted(np.argsort(np.asarray(scores), kind="stable")[:k].tolist())


def plan_width_prune(model: TransformerModel, scores, c_t: float) -> PrunePlan:
    """Choose heads and neurons removing about ``c_t * total_params`` parameters.

    Attention and MLP each give up the same fraction ``f`` of their own
    parameters (``f`` = target / prunable mass), so each layer drops
    ``round(f * h_t)`` heads. Neurons then cover what the heads left of the
    target, spread evenly with later layers taking the extra unit first.
    """
    if not 0.0 < c_t < 1.0:
        raise ContractError(f"c_t must lie in (0, 1), got {c_t}")
    layers = model.layers
    if not layers:
        raise ContractError("cannot width-prune a model without layers")
    if len(scores.heads) != len(layers) or len(scores.neurons) != len(layers):
        raise ContractError("width scores do not cover every layer")
    for layer, hs, ns in zip(layers, scores.heads, scores.neurons):
        if len(hs) != layer.n_heads or len(ns) != layer.d_ff:
            raise ContractError("width scores do not match current layer widths")

    target = c_t * total_params(model)
    prunable = sum(prunable_params(layer) for layer in layers)
    if target >= prunable:
        raise ContractError("width target exceeds the prunable parameter mass")
    frac = target / prunable

    d = model.config.d_model
    head_cost = [4 * d * layer.d_head for layer in layers]
    k_heads = [min(int(round(frac * layer.n_heads)), layer.n_heads - 1) for layer in layers]
    # head rounding may overshoot on its own; back off from the first layers
    i = 0
    while sum(k * c for k, c in zip(k_heads, head_cost)) > target and any(k_heads):
        if k_heads[i % len(layers)] > 0:
            k_heads[i % len(layers)] -= 1
        i += 1

    neuron_cost = 3 * d
    remaining = target - sum(k * c for k, c in zip(k_heads, head_cost))
    n_total = int(round(remaining / neuron_cost))
    room = [layer.d_ff - 1 for layer in layers]
    if n_total > sum(room):
        raise ContractError("width target unreachable without emptying a layer")
    k_neurons = _spread(n_total, room)

    return PrunePlan(
        kind="width",
        heads=[_lowest(hs, k) for hs, k in zip(scores.heads, k_heads)],
        neurons=[_lowest(ns, k) for ns, k in zip(scores.neurons, k_neurons)],
    )


def _spread(total: int, room: list[int]) -> list[int]:
    """Split ``total`` as evenly as capacities allow; remainders go to the last layers."""
    n = len(room)
    counts = [0] * n
    left = total
    while left > 0:
        open_ = [i for i in range(n) if counts[i] < room[i]]
        share, extra = divmod(left, len(open_))
        for rank, i in enumerate(reversed(open_)):
            want = share + (1 if rank < extra else 0)
            take = min(want, room[i] - counts[i])
            counts[i] += take
            left -= take
    return counts


def width_prune(model: TransformerModel, scores, c_t: float) -> TransformerModel:
    return apply_plan(model, plan_width_prune(model, scores, c_t))


def removed_params(before: TransformerModel, plan: PrunePlan) -> int:
    """Parameter count a plan deletes, from shapes alone."""
    if plan.kind == "depth":
        return layer_params(before, plan.layer)
    d = before.config.d_model
    total = 0
    for layer, heads, neurons in zip(before.layers, plan.heads, plan.neurons):
        total += len(heads) * 4 * d * layer.d_head + len(neurons) * 3 * d
    return total
