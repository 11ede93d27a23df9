"""Width, layer and path criteria."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, ShapeError
from .model import TransformerModel, forward, logits_numpy
from .surgery import apply_plan, compute_ct, plan_width_prune, total_params

PATH_KINDS = ("cosine", "kl", "ppl", "random")


@dataclass
class WidthScores:
    heads: list[np.ndarray]
    neurons: list[np.ndarray]


def amp_scores(model: TransformerModel, calib) -> WidthScores:
    """Activation-magnitude importance of every head and MLP neuron.

    Head score: mean over calibration tokens of the L2 norm of the head's
    output before ``wo``. Neuron score: mean absolute gated activation
    ``silu(x W_gate) * (x W_up)``.
    """
    segments = _segments(calib)
    if not len(segments):
        raise DataError("empty calibration set")
    n_layers = model.n_layers
    head_sum = [np.zeros(layer.n_heads) for layer in model.layers]
    neuron_sum = [np.zeros(layer.d_ff) for layer in model.layers]
    count = 0
    with T.no_grad():
        for seg in segments:
            capture: list = []
            forward(model, np.asarray(seg)[None, :], capture=capture)
            count += len(seg)
            for i in range(n_layers):
                heads = capture[i]["heads"][0].astype(np.float64)  # [h, n, dh]
                head_sum[i] += np.linalg.norm(heads, axis=-1).sum(axis=1)
                neuron_sum[i] += np.abs(capture[i]["neurons"][0].astype(np.float64)).sum(axis=0)
    return WidthScores([h / count for h in head_sum], [n / count for n in neuron_sum])


def _segments(calib):
    return calib.segments if hasattr(calib, "segments") else calib


def select_layer(model: TransformerModel) -> int:
    """Third-to-last layer, so the final two layers are never removed."""
    if model.n_layers < 3:
        raise ContractError(f"layer criterion needs >= 3 layers, model has {model.n_layers}")
    return model.n_layers - 3


def cosine_angle(v_ref, v_pruned) -> float:
    a = np.asarray(v_ref, dtype=np.float64).ravel()
    b = np.asarray(v_pruned, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_angle: sizes differ ({a.size} vs {b.size})")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine_angle is undefined for a zero vector")
    # Same angle as arccos(clip(cos)), but well conditioned near 0 and pi,
    # where arccos turns 1e-16 rounding into 1e-8 of angle.
    ua, ub = a / na, b / nb
    return float(2.0 * np.arctan2(np.linalg.norm(ua - ub), np.linalg.norm(ua + ub)))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_divergence(ref_logits, cand_logits) -> float:
    """Mean over positions of KL(softmax(ref) || softmax(cand))."""
    ref = np.asarray(ref_logits)
    cand = np.asarray(cand_logits)
    if ref.shape != cand.shape:
        raise ShapeError(f"kl_divergence shape mismatch: {ref.shape} vs {cand.shape}")
    v = ref.shape[-1]
    logp = _log_softmax(ref.reshape(-1, v))
    logq = _log_softmax(cand.reshape(-1, v))
    return float((np.exp(logp) * (logp - logq)).sum(axis=-1).mean())


def mean_nll(model: TransformerModel, segments) -> float:
    """Mean negative log-likelihood over every predicted position of every segment."""
    total, count = 0.0, 0
    for seg in segments:
        seg = np.asarray(seg)
        if len(seg) < 2:
            raise DataError("perplexity segments need at least 2 tokens")
        logp = _log_softmax(logits_numpy(model, seg[:-1]))
        total -= logp[np.arange(len(seg) - 1), seg[1:]].sum()
        count += len(seg) - 1
    return total / count


def perplexity(model: TransformerModel, calib_segments) -> float:
    segments = _segments(calib_segments)
    if not len(segments):
        raise DataError("empty calibration set")
    return math.exp(mean_nll(model, segments))


@dataclass
class PathCriterion:
    """Scores a candidate against the original model; lower is better.

    Reference logits on the calibration texts are computed once per
    reference model and reused.
    """

    kind: str
    seed: int = 0
    _rng: np.random.Generator | None = field(default=None, repr=False)
    _ref_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise ContractError(f"unknown path criterion {self.kind!r}; expected one of {PATH_KINDS}")
        if self.kind == "random":
            self._rng = np.random.default_rng(self.seed)

    def reference_logits(self, reference: TransformerModel, calib) -> list[np.ndarray]:
        key = (id(reference), calib.content_hash() if hasattr(calib, "content_hash") else id(calib))
        if key not in self._ref_cache:
            self._ref_cache[key] = [logits_numpy(reference, t) for t in calib.texts]
        return self._ref_cache[key]

    def score(self, candidate: TransformerModel, reference: TransformerModel, calib) -> float:
        if self.kind == "random":
            return float(self._rng.random())
        if self.kind == "ppl":
            return perplexity(candidate, calib.segments)
        refs = self.reference_logits(reference, calib)
        cands = [logits_numpy(candidate, t) for t in calib.texts]
        if self.kind == "cosine":
            return float(np.mean([cosine_angle(r, c) for r, c in zip(refs, cands)]))
        return float(np.mean([kl_divergence(r, c) for r, c in zip(refs, cands)]))


def path_score(criterion: PathCriterion, candidate: TransformerModel,
               reference: TransformerModel, calib) -> float:
    return criterion.score(candidate, reference, calib)


def amp_prune_to_ratio(model: TransformerModel, calib, rho: float):
    """Width-only AMP pruning, one layer-sized quantum at a time.

    Returns the pruned model and the plan applied at each step.
    """
    p_min = (1.0 - rho) * total_params(model)
    plans = []
    current = model
    while total_params(current) > p_min:
        idx = select_layer(current) if current.n_layers >= 3 else 0
        plan = plan_width_prune(current, amp_scores(current, calib), compute_ct(current, idx))
        current = apply_plan(current, plan)
        plans.append(plan)
    return current, plans
