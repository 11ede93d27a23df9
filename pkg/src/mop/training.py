"""AdamW, the next-token fine-tuning loop, and LoRA adapters."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .model import PROJECTIONS, TransformerModel, forward
from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype, copy=False)


def iterate_batches(docs: Sequence[np.ndarray], batch: int, steps: int, seed) -> list[np.ndarray]:
    """Token batches for ``steps`` updates: seeded shuffled passes over ``docs``.

    Sequences in a batch are cut to the shortest document in it.
    """
    if steps > 0 and not len(docs):
        raise DataError("cannot fine-tune on an empty dataset")
    rng = np.random.default_rng(seed)
    out = []
    order: list[int] = []
    bs = min(batch, len(docs)) if len(docs) else 0
    for _ in range(steps):
        if len(order) < bs:
            order.extend(rng.permutation(len(docs)).tolist())
        pick, order = order[:bs], order[bs:]
        n = min(len(docs[i]) for i in pick)
        if n < 2:
            raise DataError("fine-tuning documents need at least 2 tokens")
        out.append(np.stack([np.asarray(docs[i][:n]) for i in pick]))
    return out


def lm_loss(model: TransformerModel, tokens: np.ndarray, max_len: int | None = None) -> Tensor:
    """Mean next-token cross-entropy of a [B, T] batch."""
    max_len = max_len or model.config.max_seq_len
    tokens = tokens[:, : max_len + 1]
    logits = forward(model, tokens[:, :-1])
    return T.cross_entropy(logits, tokens[:, 1:])


def _train(model: TransformerModel, params: list[Tensor], docs, steps, lr, batch, seed,
           weight_decay=0.0, losses: list | None = None) -> None:
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    for tokens in iterate_batches(docs, batch, steps, seed):
        opt.zero_grad()
        with T.Tape() as tape:
            loss = lm_loss(model, tokens)
        tape.backward(loss)
        opt.step()
        if losses is not None:
            losses.append(loss.item())


def fine_tune(model: TransformerModel, dataset: Sequence[np.ndarray], steps: int, lr: float = 3e-4,
              batch: int = 16, seed=0, weight_decay: float = 0.0,
              losses: list | None = None) -> TransformerModel:
    """Full-weight AdamW fine-tuning on a copy of ``model``.

    The input model is never modified. ``losses`` (if given) receives the
    training loss of every step.
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    out = model.copy()
    if steps == 0:
        return out
    out.set_requires_grad(True)
    try:
        _train(out, out.parameters(), dataset, steps, lr, batch, seed, weight_decay, losses)
    finally:
        out.set_requires_grad(False)
    return out


def pretrain(model: TransformerModel, dataset: Sequence[np.ndarray], steps: int, lr: float = 2e-3,
             batch: int = 16, seed: int = 0, anneal_steps: int = 50, anneal_lr: float = 3e-4,
             losses: list | None = None) -> TransformerModel:
    """Dense training: ``steps`` at ``lr`` followed by a short low-rate tail.

    Without the tail the dense baseline is handicapped against pruned models,
    whose recovery fine-tune at a low rate acts as an annealing phase.
    """
    out = fine_tune(model, dataset, steps, lr=lr, batch=batch, seed=seed, losses=losses)
    return fine_tune(out, dataset, anneal_steps, lr=anneal_lr, batch=batch, seed=(seed, 1), losses=losses)


def tune_schedule(i: int, steps_per_iteration: int = 10) -> int:
    """Intermediate fine-tuning budget at (1-based) pruning iteration ``i``."""
    if i < 1:
        raise ContractError("pruning iterations are 1-based")
    return steps_per_iteration * i


def epoch_steps(n_docs: int, batch: int, epochs: float) -> int:
    return int(math.ceil(epochs * n_docs / max(1, min(batch, n_docs)))) if n_docs else 0


@dataclass
class LoraAdapter:
    a: Tensor  # [d_in, r]
    b: Tensor  # [r, d_out]
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.a.data @ self.b.data)


def lora_attach(model: TransformerModel, r: int = 32, alpha: float = 10.0, seed=0,
                targets: Sequence[str] = PROJECTIONS) -> TransformerModel:
    """Copy of ``model`` with a LoRA pair on every target projection.

    A is Kaiming-uniform, B is zero, so the adapted model starts out
    computing exactly what the base model does.
    """
    if r < 1:
        raise ConfigError("LoRA rank must be >= 1")
    for li, layer in enumerate(model.layers):
        for name in targets:
            shape = getattr(layer, name).shape
            if r > min(shape):
                raise ConfigError(f"LoRA rank {r} exceeds min dimension of layers.{li}.{name} {shape}")
    out = model.copy()
    rng = np.random.default_rng(seed)
    dtype = model.dtype
    for layer in out.layers:
        if layer.adapters:
            raise ContractError("model already carries adapters")
        for name in targets:
            d_in, d_out = getattr(layer, name).shape
            bound = 1.0 / math.sqrt(d_in)
            layer.adapters[name] = LoraAdapter(
                a=Tensor(rng.uniform(-bound, bound, size=(d_in, r)).astype(dtype)),
                b=Tensor(np.zeros((r, d_out), dtype=dtype)),
                rank=r, alpha=float(alpha),
            )
    return out


def adapter_parameters(model: TransformerModel) -> list[Tensor]:
    params = []
    for layer in model.layers:
        for name in sorted(layer.adapters):
            params += [layer.adapters[name].a, layer.adapters[name].b]
    return params


def lora_merge(model: TransformerModel) -> TransformerModel:
    """Fold every adapter into its base weight and drop the adapters."""
    if not any(layer.adapters for layer in model.layers):
        raise ContractError("no adapters attached (already merged?)")
    out = model.copy()
    for layer in out.layers:
        for name, ad in layer.adapters.items():
            w = getattr(layer, name)
            w.data = (w.data + ad.delta()).astype(w.dtype)
        layer.adapters = {}
    return out


def lora_fine_tune(model: TransformerModel, dataset: Sequence[np.ndarray], r: int = 32,
                   alpha: float = 10.0, lr: float = 3e-4, batch: int = 16, epochs: float = 2.0,
                   seed=0, losses: list | None = None) -> TransformerModel:
    """Attach adapters, train only them for ``epochs`` passes, merge."""
    steps = epoch_steps(len(dataset), batch, epochs)
    if steps == 0:
        return model.copy()
    adapted = lora_attach(model, r=r, alpha=alpha, seed=seed)
    params = adapter_parameters(adapted)
    for p in params:
        p.requires_grad = True
    _train(adapted, params, dataset, steps, lr, batch, (seed, 1), losses=losses)
    for p in params:
        p.requires_grad = False
        p.grad = None
    return lora_merge(adapted)
