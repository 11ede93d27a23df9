"""Iterative depth-vs-width pruning loop with path selection."""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .criteria import PATH_KINDS, PathCriterion, amp_scores, perplexity, select_layer
from .data import Corpus, build_calibration, eval_segments, sample_tune_subset
from .errors import ConfigError, ContractError, EngineError
from .model import TransformerModel, weights_digest
from .surgery import (PrunePlan, apply_plan, layer_params, plan_width_prune, remove_layer,
                      total_params)
from .training import fine_tune, lora_fine_tune, tune_schedule

log = logging.getLogger(__name__)

WIDTH, DEPTH = "width", "depth"
BRANCH_TAGS = {WIDTH: 0, DEPTH: 1}


@dataclass
class IntermediateFT:
    lr: float = 3e-4
    batch: int = 16
    steps_per_iteration: int = 10


@dataclass
class FinalFT:
    enabled: bool = True
    rank: int = 32
    alpha: float = 10.0
    lr: float = 3e-4
    batch: int = 16
    epochs: float = 2.0


@dataclass
class CalibConfig:
    n_texts: int = 32
    seg_len: int = 256


@dataclass
class MopConfig:
    rho: float = 0.3
    path_criterion: str = "random"
    path_seed: int = 0
    tune_seed: int = 0
    ft_seed: int = 0
    calib_seed: int = 0
    intermediate_ft: IntermediateFT = field(default_factory=IntermediateFT)
    final_ft: FinalFT = field(default_factory=FinalFT)
    calib: CalibConfig = field(default_factory=CalibConfig)
    force_branch: str | None = None
    # When the path score cannot depend on the tuned candidates (random or
    # forced path), their fine-tuning is skipped unless this is set.
    tune_unscored: bool = False
    parallel: bool = False

    def validate(self) -> None:
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must lie in (0, 1), got {self.rho}")
        if self.path_criterion not in PATH_KINDS:
            raise ConfigError(f"path_criterion must be one of {PATH_KINDS}")
        if self.force_branch not in (None, WIDTH, DEPTH):
            raise ConfigError("force_branch must be null, 'width' or 'depth'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MopConfig":
        d = dict(d)
        nested = {"intermediate_ft": IntermediateFT, "final_ft": FinalFT, "calib": CalibConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for key, kind in nested.items():
            if key in d:
                sub = dict(d[key])
                bad = set(sub) - {f.name for f in dataclasses.fields(kind)}
                if bad:
                    raise ConfigError(f"unknown {key} fields: {sorted(bad)}")
                d[key] = kind(**sub)
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class IterationRecord:
    t: int
    params_before: int
    layer_idx: int
    p_layer: int
    c_t: float
    s_width: float | None
    s_layer: float | None
    choice: str
    params_after: int
    width_candidate_params: int
    layer_candidate_params: int | None
    plan: PrunePlan
    forced: str = ""
    tune_steps: int = 0
    advanced_digest: str = ""
    tuned_digest: str = ""


@dataclass
class PruneTrace:
    config: dict
    p0: int
    p_min: float
    calib_hash: str = ""
    iterations: list[IterationRecord] = field(default_factory=list)
    final_params: int | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PruneTrace":
        its = []
        for r in d["iterations"]:
            r = dict(r)
            r["plan"] = PrunePlan.from_dict(r["plan"])
            its.append(IterationRecord(**r))
        return cls(config=d["config"], p0=d["p0"], p_min=d["p_min"], calib_hash=d.get("calib_hash", ""),
                   iterations=its, final_params=d.get("final_params"))


def path_decide(s_width: float, s_layer: float) -> str:
    """Width wins ties."""
    if not (math.isfinite(s_width) and math.isfinite(s_layer)):
        raise EngineError(f"non-finite path score (width={s_width}, layer={s_layer})")
    return WIDTH if s_width <= s_layer else DEPTH


def _tune_candidate(candidate, subset, steps, cfg: MopConfig, t: int, branch: str):
    ft = cfg.intermediate_ft
    return fine_tune(candidate, subset, steps, lr=ft.lr, batch=ft.batch,
                     seed=(cfg.ft_seed, t, BRANCH_TAGS[branch]))


def mop_search(model: TransformerModel, cfg: MopConfig, corpus: Corpus, calib=None):
    """The pruning loop without the final recovery fine-tune.

    Returns ``(pruned_model, trace)``. ``model`` is the reference every
    candidate is scored against and is never modified.
    """
    cfg.validate()
    if model.n_layers < 3:
        raise EngineError(f"pruning needs a model with >= 3 layers, got {model.n_layers}")
    if calib is None:
        calib = build_calibration(corpus, cfg.calib.n_texts, cfg.calib.seg_len, cfg.calib_seed)
    calib_hash = calib.content_hash()
    criterion = PathCriterion(cfg.path_criterion, seed=cfg.path_seed)
    scored = cfg.force_branch is None and cfg.path_criterion != "random"

    p0 = total_params(model)
    trace = PruneTrace(config=cfg.to_dict(), p0=p0, p_min=(1.0 - cfg.rho) * p0, calib_hash=calib_hash)
    current = model
    t = 1
    pool = ThreadPoolExecutor(max_workers=2) if cfg.parallel else None
    try:
        while total_params(current) > trace.p_min:
            if calib.content_hash() != calib_hash:
                raise EngineError("calibration set changed mid-run", trace)
            params_before = total_params(current)
            forced = cfg.force_branch or ""
            depth_ok = current.n_layers >= 3
            if not depth_ok:
                if cfg.force_branch == DEPTH:
                    raise EngineError("forced depth pruning would drop below 3 layers", trace)
                forced = "width:depth-unavailable"
            idx = select_layer(current) if depth_ok else 0
            p_layer = layer_params(current, idx)
            c_t = p_layer / params_before

            try:
                plan = plan_width_prune(current, amp_scores(current, calib), c_t)
            except ContractError as exc:
                raise EngineError(f"iteration {t}: {exc}", trace) from exc
            f_width = apply_plan(current, plan)
            f_layer = remove_layer(current, idx) if depth_ok else None

            tuned_w, tuned_l = f_width, f_layer
            steps = 0
            if f_layer is not None and (scored or cfg.tune_unscored):
                steps = tune_schedule(t, cfg.intermediate_ft.steps_per_iteration)
                size = min(cfg.intermediate_ft.batch * steps, len(corpus.train_docs))
                subset = sample_tune_subset(corpus, size, cfg.tune_seed, t)
                args = [(f_width, subset, steps, cfg, t, WIDTH), (f_layer, subset, steps, cfg, t, DEPTH)]
                if pool is not None:
                    tuned_w, tuned_l = pool.map(lambda a: _tune_candidate(*a), args)
                else:
                    tuned_w, tuned_l = (_tune_candidate(*a) for a in args)

            s_width = s_layer = None
            if forced:
                choice = forced.split(":")[0]
            else:
                s_width = criterion.score(tuned_w, model, calib)
                s_layer = criterion.score(tuned_l, model, calib)
                choice = path_decide(s_width, s_layer)

            advanced = f_width if choice == WIDTH else f_layer
            params_after = total_params(advanced)
            record = IterationRecord(
                t=t, params_before=params_before, layer_idx=idx, p_layer=p_layer, c_t=c_t,
                s_width=s_width, s_layer=s_layer, choice=choice, params_after=params_after,
                width_candidate_params=total_params(f_width),
                layer_candidate_params=params_before - p_layer if f_layer is not None else None,
                plan=plan if choice == WIDTH else PrunePlan(kind=DEPTH, layer=idx),
                forced=forced, tune_steps=steps, advanced_digest=weights_digest(advanced),
                tuned_digest=weights_digest(tuned_w if choice == WIDTH else tuned_l) if steps else "",
            )
            trace.iterations.append(record)
            log.info("t=%d %s params %d -> %d (c_t=%.5f, s_w=%s, s_l=%s)", t, choice,
                     params_before, params_after, c_t, s_width, s_layer)
            if params_after >= params_before:
                raise EngineError(f"iteration {t} removed no parameters", trace)
            current = advanced
            t += 1
    finally:
        if pool is not None:
            pool.shutdown()
    trace.final_params = total_params(current)
    return current, trace


def recovery_finetune(model: TransformerModel, cfg: MopConfig, corpus: Corpus) -> TransformerModel:
    ft = cfg.final_ft
    if not ft.enabled:
        return model
    return lora_fine_tune(model, corpus.train_docs, r=ft.rank, alpha=ft.alpha, lr=ft.lr,
                          batch=ft.batch, epochs=ft.epochs, seed=(cfg.ft_seed, 0xF17A1))


def mop_prune(model: TransformerModel, cfg: MopConfig, corpus: Corpus, calib=None):
    """Prune to ``cfg.rho`` then run LoRA recovery fine-tuning and merge."""
    pruned, trace = mop_search(model, cfg, corpus, calib)
    return recovery_finetune(pruned, cfg, corpus), trace


@dataclass
class ExtremesResult:
    rows: list[dict]
    traces: dict

    def summary(self) -> list[dict]:
        """Mean held-out PPL per (ratio, mode)."""
        out = []
        keys = sorted({(r["ratio"], r["mode"]) for r in self.rows})
        for ratio, mode in keys:
            vals = [r["ppl"] for r in self.rows if r["ratio"] == ratio and r["mode"] == mode]
            out.append({"ratio": ratio, "mode": mode, "runs": len(vals), "mean_ppl": float(np.mean(vals))})
        return out


def run_extremes(model: TransformerModel, cfg: MopConfig, corpus: Corpus,
                 ratios=(0.1, 0.2, 0.3, 0.4), seeds=(0, 1, 2), seg_len: int | None = None) -> ExtremesResult:
    """Width-only, depth-only and random-path runs at each ratio, scored on held-out text."""
    held_out = eval_segments(corpus, seg_len or cfg.calib.seg_len)
    calib = build_calibration(corpus, cfg.calib.n_texts, cfg.calib.seg_len, cfg.calib_seed)
    dense_ppl = perplexity(model, held_out)
    rows, traces = [], {}
    runs = [("always-width", WIDTH, "random", None), ("always-depth", DEPTH, "random", None)]
    runs += [("mop-random", None, "random", s) for s in seeds]
    for ratio in ratios:
        for mode, force, crit, seed in runs:
            run_cfg = dataclasses.replace(cfg, rho=ratio, force_branch=force, path_criterion=crit,
                                          path_seed=cfg.path_seed if seed is None else seed)
            pruned, trace = mop_search(model, run_cfg, corpus, calib)
            ppl_pre = perplexity(pruned, held_out)
            final = recovery_finetune(pruned, run_cfg, corpus)
            rows.append({
                "ratio": ratio, "mode": mode, "seed": seed, "params": trace.final_params,
                "dense_params": trace.p0, "depth_steps": sum(r.choice == DEPTH for r in trace.iterations),
                "width_steps": sum(r.choice == WIDTH for r in trace.iterations),
                "ppl_pre_rft": ppl_pre, "ppl": perplexity(final, held_out), "dense_ppl": dense_ppl,
            })
            traces[(mode, ratio, seed)] = trace
            log.info("extremes %s ratio=%.2f seed=%s ppl=%.4f", mode, ratio, seed, rows[-1]["ppl"])
    return ExtremesResult(rows, traces)
