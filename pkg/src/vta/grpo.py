"""Rewards, group-relative advantages, the clipped GRPO objective and the three-stage
reasoning pipeline (cold-start RL, rejection-sampled SFT, RL)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .annotation import Prompt, annotate, build_prompt
from .errors import DivergenceError, ParameterError, ValidationError
from .indicators import IndicatorConfig, compute_panel
from .market import WindowPair
from .policy import PolicyCheckpoint, PolicyOutput, ReasoningSample, SequencePolicy, as_theta, parse_output


OPTIMIZERS = {"adam": torch.optim.Adam, "sgd": torch.optim.SGD}


@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    beta: float = 0.04
    lam: float = 1.0  # scale in the inverse-MSE reward
    group_size: int = 8
    mse_floor: float = 1e-8
    learning_rate: float = 0.01
    steps: int = 100
    prompts_per_step: int = 4
    inner_steps: int = 2  # gradient steps per rollout batch; >1 lets the clip bind
    optimizer: str = "adam"  # "adam" or "sgd" (fixed-step ascent)

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ParameterError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ParameterError("beta must be >= 0")
        if not self.lam > 0:
            raise ParameterError("lambda must be > 0")
        if self.group_size < 2:
            raise ParameterError("group_size must be >= 2")
        if not self.mse_floor > 0:
            raise ParameterError("mse_floor must be > 0")
        if self.steps < 0 or self.prompts_per_step < 1 or self.inner_steps < 1:
            raise ParameterError("steps >= 0, prompts_per_step >= 1 and inner_steps >= 1 required")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"optimizer must be one of {sorted(OPTIMIZERS)}")


class BucketKey(NamedTuple):
    symbol: str
    period: str  # calendar quarter of the anchor, e.g. "2021Q3"


def bucket_key(symbol: str, anchor) -> BucketKey:
    d = np.datetime64(anchor, "D").astype(object)
    return BucketKey(symbol, f"{d.year}Q{(d.month - 1) // 3 + 1}")


@dataclass
class Task:
    """One forecasting prompt with its normalized ground truth."""

    prompt: Prompt
    target: np.ndarray
    symbol: str = ""
    anchor: np.datetime64 | None = None

    @property
    def key(self) -> BucketKey:
        return bucket_key(self.symbol, self.anchor)


def make_tasks(pairs: Sequence[WindowPair], indicators: IndicatorConfig | None = None,
               template: str = "default", budget: int = 4000) -> list[Task]:
    panels = {}
    tasks = []
    for pair in pairs:
        w = pair.window
        hist = w.history if w.history is not None else w.bars
        # indicators are causal, so one panel over the longest history serves every window of a symbol
        cached = panels.get(w.symbol)
        if cached is None or cached[0] < len(hist) or cached[1] != hist.dates[0]:
            panels[w.symbol] = (len(hist), hist.dates[0], compute_panel(hist, indicators))
        report = annotate(w, hist, indicators, panel=panels[w.symbol][2])
        prompt = build_prompt(w, report, template, horizon=len(pair.target), budget=budget)
        tasks.append(Task(prompt, pair.normalized_target(), w.symbol, w.anchor))
    return tasks


def reward_format(sample: ReasoningSample) -> float:
    return 1.0 if sample.format_ok else 0.0


def mse(forecast, target) -> float:
    f, y = np.asarray(forecast, dtype=float), np.asarray(target, dtype=float)
    return float(np.mean((f - y) ** 2))


def reward_mse(forecast, target, lam: float = 1.0, floor: float = 1e-8) -> float:
    """1 / (lam * max(MSE, floor)); an absent forecast earns 0."""
    if forecast is None:
        return 0.0
    f = np.asarray(forecast, dtype=float)
    if not np.all(np.isfinite(f)):
        return 0.0
    return 1.0 / (lam * max(mse(f, target), floor))


def advantages(rewards) -> np.ndarray:
    """(r - mean) / population std; zero-spread or singleton groups get all zeros."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        return np.zeros_like(r)
    centred = r - r.mean()
    sd = centred.std()
    if sd <= 1e-12 * max(1.0, float(np.abs(r).max())):
        return np.zeros_like(r)
    return centred / sd


def kl_estimate(ratio):
    """ratio - log(ratio) - 1 for ratio = pi_ref / pi_theta; non-negative, zero iff ratio == 1."""
    r = np.asarray(ratio, dtype=float)
    if np.any(~(r > 0)):
        raise ValueError("KL ratio must be positive")
    out = r - np.log(r) - 1.0
    return float(out) if out.ndim == 0 else out


def evaluate_output(output: PolicyOutput, task: Task, cfg: GrpoConfig) -> ReasoningSample:
    horizon = len(task.target)
    trace, forecast, ok = parse_output(output.text, horizon)
    sample = ReasoningSample(task.prompt, output, trace, forecast, ok, symbol=task.symbol, anchor=task.anchor)
    sample.mse = mse(forecast, task.target) if ok else None
    fmt = reward_format(sample)
    acc = reward_mse(forecast, task.target, cfg.lam, cfg.mse_floor) if ok else 0.0
    sample.rewards = {"format": fmt, "mse": acc}
    sample.total_reward = fmt + acc
    return sample


@dataclass
class GroupBatch:
    prompt: Prompt
    samples: list[ReasoningSample]
    rewards: np.ndarray
    advantages: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[ReasoningSample]) -> GroupBatch:
        r = np.array([s.total_reward for s in samples])
        return cls(samples[0].prompt, list(samples), r, advantages(r))

    @property
    def token_ids(self) -> np.ndarray:
        return np.stack([s.output.token_ids for s in self.samples])


def rollout_group(policy: SequencePolicy, ckpt, task: Task, cfg: GrpoConfig, seed: int) -> GroupBatch:
    outputs = policy.sample(ckpt, task.prompt, cfg.group_size, seed)
    return GroupBatch.from_samples([evaluate_output(o, task, cfg) for o in outputs])


def _group_objective(policy, group: GroupBatch, theta, theta_old, ref, cfg: GrpoConfig) -> torch.Tensor:
    tokens = group.token_ids
    lp = policy.sequence_logprob(theta, group.prompt, tokens)
    with torch.no_grad():
        lp_old = policy.sequence_logprob(theta_old, group.prompt, tokens)
        lp_ref = policy.sequence_logprob(ref, group.prompt, tokens)
    ratio = torch.exp(lp - lp_old)
    bad = ~torch.isfinite(ratio)
    if bad.any():
        raise FloatingPointError(f"non-finite probability ratio for sample {int(bad.nonzero()[0, 0])}")
    adv = torch.as_tensor(group.advantages, dtype=lp.dtype)
    surrogate = torch.minimum(ratio * adv, torch.clamp(ratio, 1 - cfg.epsilon, 1 + cfg.epsilon) * adv)
    log_kl_ratio = lp_ref - lp  # log(pi_ref / pi_theta)
    kl = torch.exp(log_kl_ratio) - log_kl_ratio - 1
    return (surrogate - cfg.beta * kl).mean()


def grpo_loss(policy: SequencePolicy, groups: GroupBatch | Sequence[GroupBatch], theta, theta_old, ref,
              cfg: GrpoConfig) -> tuple[float, np.ndarray]:
    """GRPO objective (to be maximized) averaged over groups, and its exact parameter gradient."""
    if isinstance(groups, GroupBatch):
        groups = [groups]
    t = as_theta(theta).detach().clone().requires_grad_(True)
    old, rf = as_theta(theta_old).detach(), as_theta(ref).detach()
    if t.shape != old.shape or t.shape != rf.shape:
        raise ValidationError("theta, theta_old and ref must share one architecture")
    total = sum(_group_objective(policy, g, t, old, rf, cfg) for g in groups) / len(groups)
    total.backward()
    return float(total.detach()), t.grad.numpy().copy()


@dataclass
class CurvePoint:
    step: int
    mean_reward: float
    mean_mse: float
    format_rate: float
    objective: float = float("nan")


def _seed_for(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def rl_stage(policy: SequencePolicy, ckpt: PolicyCheckpoint, tasks: Sequence[Task], cfg: GrpoConfig,
             seed: int = 0, stage: str = "rl") -> tuple[PolicyCheckpoint, list[CurvePoint]]:
    """Time-GRPO updates. theta_old is refreshed from theta at every step; ref is frozen at entry."""
    if cfg.steps == 0:
        return ckpt.copy(), []
    if not tasks:
        raise ValidationError("rl_stage needs at least one task")
    ref = ckpt.params.copy()
    param, opt = _optimizer(ckpt.params, cfg.learning_rate, cfg.optimizer)
    rng = np.random.default_rng(seed)
    curve = []
    for step in range(cfg.steps):
        theta_old = param.detach().numpy().copy()
        picks = rng.choice(len(tasks), size=min(cfg.prompts_per_step, len(tasks)), replace=False)
        groups = [rollout_group(policy, theta_old, tasks[i], cfg, _seed_for(seed, step, int(i)))
                  for i in picks]
        obj = float("nan")
        for _ in range(cfg.inner_steps):
            obj, grad = grpo_loss(policy, groups, param.detach().numpy(), theta_old, ref, cfg)
            _ascend(param, opt, grad)
            if not torch.isfinite(param).all():
                raise DivergenceError(f"{stage}: non-finite parameters at step {step}", step)
        samples = [s for g in groups for s in g.samples]
        mses = [s.mse for s in samples if s.mse is not None]
        curve.append(CurvePoint(step, float(np.mean([s.total_reward for s in samples])),
                                float(np.mean(mses)) if mses else float("nan"),
                                float(np.mean([s.format_ok for s in samples])), obj))
    return ckpt.copy(params=param.detach().numpy().copy(), stage=stage, step=ckpt.step + cfg.steps), curve


def _optimizer(params: np.ndarray, lr: float, kind: str = "adam") -> tuple[torch.Tensor, torch.optim.Optimizer]:
    param = torch.tensor(params, dtype=torch.float64, requires_grad=True)
    return param, OPTIMIZERS[kind]([param], lr=lr, maximize=True)


def _ascend(param: torch.Tensor, opt: torch.optim.Optimizer, grad) -> None:
    param.grad = torch.as_tensor(grad, dtype=torch.float64)
    opt.step()


def rejection_filter(samples: Sequence[ReasoningSample], percentile: float = 0.10,
                     min_bucket: int = 10) -> list[ReasoningSample]:
    """Keep, per (symbol, quarter) bucket, samples whose MSE is at or below the bucket's
    ``percentile`` quantile (linear interpolation). Buckets under ``min_bucket`` samples keep only
    their best sample. Samples without a parsed forecast are never kept."""
    if not 0 < percentile <= 1:
        raise ParameterError("percentile must lie in (0, 1]")
    buckets: dict[BucketKey, list[ReasoningSample]] = {}
    for s in samples:
        if s.mse is not None:
            buckets.setdefault(bucket_key(s.symbol, s.anchor), []).append(s)
    kept = []
    for key in sorted(buckets):
        group = buckets[key]
        if len(group) < min_bucket:
            kept.append(min(group, key=lambda s: s.mse))
            continue
        cut = np.quantile([s.mse for s in group], percentile)
        kept.extend(s for s in group if s.mse <= cut)
    return kept


def mean_nll(policy: SequencePolicy, params, samples: Sequence[ReasoningSample]) -> float:
    with torch.no_grad():
        return float(np.mean([-float(policy.sequence_logprob(params, s.prompt, s.output.token_ids)[0])
                              for s in samples]))


def sft_stage(policy: SequencePolicy, ckpt: PolicyCheckpoint, kept: Sequence[ReasoningSample],
              epochs: int, lr: float, seed: int = 0, batch_size: int | None = None,
              stage: str = "sft", optimizer: str = "adam") -> PolicyCheckpoint:
    """Gradient ascent on the mean log-likelihood of the kept outputs.

    ``batch_size=None`` uses the full set each epoch (deterministic descent); otherwise batches
    are drawn in a seeded shuffle order.
    """
    if not kept:
        raise ValidationError("SFT needs at least one kept sample")
    if epochs == 0:
        return ckpt.copy()
    # group by prompt so each prompt's tokens are scored in one call
    by_prompt: dict[int, tuple[Prompt, list[np.ndarray]]] = {}
    for s in kept:
        by_prompt.setdefault(id(s.prompt), (s.prompt, []))[1].append(s.output.token_ids)
    items = list(by_prompt.values())
    rng = np.random.default_rng(seed)
    param, opt = _optimizer(ckpt.params, lr, optimizer)
    for epoch in range(epochs):
        order = list(range(len(items))) if batch_size is None else list(rng.permutation(len(items)))
        bs = len(items) if batch_size is None else batch_size
        for start in range(0, len(order), bs):
            chunk = [items[i] for i in order[start:start + bs]]
            opt.zero_grad()
            count = sum(len(toks) for _, toks in chunk)
            ll = sum(policy.sequence_logprob(param, p, np.stack(toks)).sum() for p, toks in chunk) / count
            ll.backward()
            opt.step()
            if not torch.isfinite(param).all():
                raise DivergenceError(f"{stage}: non-finite parameters at epoch {epoch}", epoch)
    return ckpt.copy(params=param.detach().numpy().copy(), stage=stage, step=ckpt.step + epochs)


def greedy_mse(policy: SequencePolicy, params, tasks: Sequence[Task], fallback: float = 0.5) -> float:
    """Validation MSE of greedy decoding. A malformed output is scored as a flat forecast at
    ``fallback`` so format failures cost accuracy instead of vanishing from the average."""
    errors = []
    for task in tasks:
        out = policy.greedy(params, task.prompt)
        _, forecast, ok = parse_output(out.text, len(task.target))
        if not ok:
            forecast = np.full(len(task.target), fallback)
        errors.append(mse(forecast, task.target))
    return float(np.mean(errors)) if errors else float("nan")


@dataclass(frozen=True)
class PipelineConfig:
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    stage1_steps: int = 40
    stage3_steps: int = 120
    rollouts_per_task: int = 8
    rejection_percentile: float = 0.10
    rejection_min_bucket: int = 10
    sft_epochs: int = 200
    sft_lr: float = 0.05
    sft_init: str = "base"  # "base" or "stage1": which checkpoint stage-2 SFT starts from
    max_rejection_tasks: int | None = None

    def __post_init__(self):
        if self.sft_init not in ("base", "stage1"):
            raise ParameterError("sft_init must be 'base' or 'stage1'")
        if min(self.stage1_steps, self.stage3_steps, self.sft_epochs) < 0:
            raise ParameterError("stage step counts must be >= 0")


@dataclass
class PipelineResult:
    checkpoints: dict[str, PolicyCheckpoint]
    val_mse: dict[str, float]
    curves: dict[str, list[CurvePoint]]
    kept: int = 0
    generated: int = 0

    def metrics(self) -> dict:
        return {"val_mse": dict(self.val_mse), "kept_samples": self.kept, "generated_samples": self.generated}


STAGES = ("base", "stage1", "stage2", "stage3")


def generate_samples(policy: SequencePolicy, params, tasks: Sequence[Task], cfg: GrpoConfig, n: int,
                     seed: int) -> list[ReasoningSample]:
    out = []
    for i, task in enumerate(tasks):
        for o in policy.sample(params, task.prompt, n, _seed_for(seed, 7919, i)):
            out.append(evaluate_output(o, task, cfg))
    return out


def run_pipeline(policy: SequencePolicy, base: PolicyCheckpoint, train: Sequence[Task], val: Sequence[Task],
                 cfg: PipelineConfig | None = None, seed: int = 0) -> PipelineResult:
    """Stage 1 RL (cold start) -> rollouts -> rejection filter -> stage 2 SFT -> stage 3 RL."""
    cfg = cfg or PipelineConfig()
    ckpts = {"base": base.copy(stage="base")}
    curves: dict[str, list[CurvePoint]] = {}

    s1, curves["stage1"] = rl_stage(policy, base, train, replace(cfg.grpo, steps=cfg.stage1_steps),
                                    _seed_for(seed, 1), stage="stage1")
    ckpts["stage1"] = s1

    kept, generated = [], 0
    if cfg.sft_epochs > 0 and train:
        pool = list(train) if cfg.max_rejection_tasks is None else list(train)[:cfg.max_rejection_tasks]
        samples = generate_samples(policy, s1, pool, cfg.grpo, cfg.rollouts_per_task, _seed_for(seed, 2))
        generated = len(samples)
        kept = rejection_filter(samples, cfg.rejection_percentile, cfg.rejection_min_bucket)
    start = base if cfg.sft_init == "base" else s1
    if kept:
        s2 = sft_stage(policy, start, kept, cfg.sft_epochs, cfg.sft_lr, _seed_for(seed, 3), stage="stage2",
                        optimizer=cfg.grpo.optimizer)
    else:
        s2 = start.copy(stage="stage2")
    ckpts["stage2"] = s2

    s3, curves["stage3"] = rl_stage(policy, s2, train, replace(cfg.grpo, steps=cfg.stage3_steps),
                                    _seed_for(seed, 4), stage="stage3")
    ckpts["stage3"] = s3

    val_mse = {name: greedy_mse(policy, ckpts[name], val) for name in STAGES}
    return PipelineResult(ckpts, val_mse, curves, len(kept), generated)


def write_curve(curve: Sequence[CurvePoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "mean_reward", "mean_mse", "format_rate"))
        for p in curve:
            w.writerow((p.step, repr(p.mean_reward), repr(p.mean_mse), repr(p.format_rate)))


def write_stage_metrics(result: PipelineResult, path) -> None:
    Path(path).write_text(json.dumps(result.metrics(), indent=2, sort_keys=True) + "\n")
