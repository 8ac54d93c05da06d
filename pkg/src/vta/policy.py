"""Sequence policies that the reasoning trainer optimizes.

Two small differentiable policies stand in for a language model:

* ``CategoricalPolicy`` - independent per-position logits, no prompt dependence.
* ``ToyReasoningPolicy`` - emits ``<think> w1 .. wR </think>`` then ``FORECAST:`` and T' numbers
  from a quantized grid. Forecast tokens follow a discretized Gaussian whose centre is a linear
  function of the prompt's normalized series and of the reasoning words already emitted.

``ExternalPolicy`` talks to any out-of-process sampler over line-delimited JSON.
"""

from __future__ import annotations

import json
import math
import re
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .annotation import Prompt
from .errors import ParameterError, ValidationError

THINK_OPEN, THINK_CLOSE, MARKER = "<think>", "</think>", "FORECAST:"
SPECIALS = (THINK_OPEN, THINK_CLOSE, MARKER)
WORDS = (
    "uptrend", "downtrend", "sideways", "bullish", "bearish", "neutral", "overbought", "oversold",
    "momentum", "reversal", "breakout", "support", "resistance", "volatile", "stable", "rising",
    "falling", "sma", "ema", "rsi", "macd", "bollinger", "cci", "adx",
)


@dataclass
class PolicyOutput:
    text: str
    token_ids: np.ndarray
    logprobs: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.logprobs = np.asarray(self.logprobs, dtype=float)
        if self.token_ids.shape != self.logprobs.shape:
            raise ValidationError("logprobs and token_ids differ in length")
        if np.any(self.logprobs > 0):
            raise ValidationError("log-probabilities must be <= 0")

    @property
    def total_logprob(self) -> float:
        return float(self.logprobs.sum())


@dataclass
class ReasoningSample:
    prompt: Prompt
    output: PolicyOutput
    trace: str | None
    forecast: np.ndarray | None
    format_ok: bool
    rewards: dict[str, float] = field(default_factory=dict)
    total_reward: float = 0.0
    mse: float | None = None
    symbol: str = ""
    anchor: np.datetime64 | None = None


@dataclass
class PolicyCheckpoint:
    params: np.ndarray
    stage: str = "init"
    step: int = 0
    seed: int = 0
    policy: dict = field(default_factory=dict)  # architecture description for reloading

    def copy(self, **changes) -> PolicyCheckpoint:
        fields = dict(params=self.params.copy(), stage=self.stage, step=self.step, seed=self.seed,
                      policy=dict(self.policy))
        fields.update(changes)
        return PolicyCheckpoint(**fields)

    def save(self, path) -> None:
        path = Path(path)
        path.with_suffix(".bin").write_bytes(np.asarray(self.params, dtype="<f8").tobytes())
        meta = {"stage": self.stage, "step": self.step, "seed": self.seed, "policy": self.policy,
                "n_params": int(self.params.size), "dtype": "float64-le"}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> PolicyCheckpoint:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        params = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(float)
        if params.size != meta["n_params"]:
            raise ValidationError(f"{path}: expected {meta['n_params']} parameters, found {params.size}")
        return cls(params, meta["stage"], meta["step"], meta["seed"], meta["policy"])


_FORECAST_LINE = re.compile(r"^[ \t]*FORECAST:(.*)$", re.MULTILINE)


def parse_output(text: str, horizon: int) -> tuple[str | None, np.ndarray | None, bool]:
    """Split policy text into (trace, forecast, format_ok). Never raises."""
    try:
        if text.count(THINK_OPEN) != 1 or text.count(THINK_CLOSE) != 1:
            return None, None, False
        start = text.index(THINK_OPEN) + len(THINK_OPEN)
        end = text.index(THINK_CLOSE)
        if end < start:
            return None, None, False
        trace = text[start:end].strip()
        lines = _FORECAST_LINE.findall(text[end + len(THINK_CLOSE):])
        if len(lines) != 1:
            return trace, None, False
        parts = lines[0].split(",")
        if len(parts) != horizon:
            return trace, None, False
        values = np.array([float(p) for p in parts])
        if not np.all(np.isfinite(values)):
            return trace, None, False
        return trace, values, True
    except (ValueError, TypeError, AttributeError):
        return None, None, False


def as_theta(params) -> torch.Tensor:
    if isinstance(params, PolicyCheckpoint):
        params = params.params
    if isinstance(params, torch.Tensor):
        return params
    return torch.as_tensor(np.asarray(params, dtype=np.float64))


class SequencePolicy:
    """Fixed-length causal categorical policy over ``vocab``.

    Subclasses implement ``logits(theta, prompt, tokens)`` returning (G, L, V) where position i
    depends on tokens[:, :i] only, and ``_passes()`` grouping positions that can be drawn together.
    """

    kind = "abstract"
    vocab: tuple[str, ...]
    length: int

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def n_params(self) -> int:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    def initial_params(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def logits(self, theta: torch.Tensor, prompt: Prompt, tokens: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def render(self, token_ids: Sequence[int]) -> str:
        return " ".join(self.vocab[int(t)] for t in token_ids)

    def _passes(self) -> list[list[int]]:
        return [list(range(self.length))]

    def init(self, seed: int = 0) -> PolicyCheckpoint:
        params = self.initial_params(np.random.default_rng(seed))
        return PolicyCheckpoint(params, stage="base", step=0, seed=seed, policy=self.describe())

    def _check_tokens(self, token_ids) -> torch.Tensor:
        tokens = torch.as_tensor(np.asarray(token_ids, dtype=np.int64))
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] != self.length:
            raise ValidationError(f"expected {self.length} tokens per output, got {tokens.shape[1]}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ValidationError("token id outside the vocabulary")
        return tokens

    def score(self, params, prompt: Prompt, token_ids) -> torch.Tensor:
        """Per-token log-probabilities, shape (G, L); differentiable in ``params``."""
        theta = as_theta(params)
        tokens = self._check_tokens(token_ids)
        logp = torch.log_softmax(self.logits(theta, prompt, tokens), dim=-1)
        return logp.gather(-1, tokens[..., None])[..., 0]

    def sequence_logprob(self, params, prompt: Prompt, token_ids) -> torch.Tensor:
        return self.score(params, prompt, token_ids).sum(dim=-1)

    def _draw(self, params, prompt: Prompt, G: int, rng: np.random.Generator | None) -> np.ndarray:
        theta = as_theta(params).detach()
        tokens = torch.zeros((G, self.length), dtype=torch.int64)
        with torch.no_grad():
            for positions in self._passes():
                probs = torch.softmax(self.logits(theta, prompt, tokens)[:, positions], dim=-1).numpy()
                if rng is None:
                    chosen = probs.argmax(axis=-1)
                else:
                    chosen = _categorical(probs, rng)
                tokens[:, positions] = torch.as_tensor(chosen)
        return tokens.numpy()

    def sample(self, params, prompt: Prompt, G: int, seed: int) -> list[PolicyOutput]:
        if G < 1:
            raise ParameterError("group size must be >= 1")
        tokens = self._draw(params, prompt, G, np.random.default_rng(seed))
        with torch.no_grad():
            logprobs = self.score(params, prompt, tokens).numpy()
        return [PolicyOutput(self.render(t), t, lp) for t, lp in zip(tokens, logprobs)]

    def greedy(self, params, prompt: Prompt) -> PolicyOutput:
        tokens = self._draw(params, prompt, 1, None)
        with torch.no_grad():
            logprobs = self.score(params, prompt, tokens).numpy()
        return PolicyOutput(self.render(tokens[0]), tokens[0], logprobs[0])


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw along the last axis."""
    u = rng.random(probs.shape[:-1])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[..., None]).sum(axis=-1)
    # cdf[-1] can round below u; fall back to the last token with non-zero mass
    last_nonzero = probs.shape[-1] - 1 - np.argmax(probs[..., ::-1] > 0, axis=-1)
    idx = np.minimum(idx, last_nonzero)
    picked = np.take_along_axis(probs, idx[..., None], axis=-1)[..., 0]
    if np.any(picked <= 0):
        raise RuntimeError("sampled a zero-probability token")
    return idx


class CategoricalPolicy(SequencePolicy):
    """Independent softmax per position; parameters are the (L, V) logits themselves."""

    kind = "categorical"

    def __init__(self, vocab: Sequence[str], length: int = 1):
        if length < 1 or not vocab:
            raise ParameterError("need length >= 1 and a non-empty vocabulary")
        self.vocab = tuple(vocab)
        self.length = length

    def n_params(self) -> int:
        return self.length * self.vocab_size

    def describe(self) -> dict:
        return {"kind": self.kind, "vocab": list(self.vocab), "length": self.length}

    def initial_params(self, rng) -> np.ndarray:
        return np.zeros(self.n_params())

    def logits(self, theta, prompt, tokens):
        return theta.view(self.length, self.vocab_size)[None].expand(tokens.shape[0], -1, -1)


@dataclass
class ToyPolicyConfig:
    horizon: int = 10
    window: int = 10
    n_reason: int = 6
    levels: int = 257
    grid_low: float = -1.5
    grid_high: float = 2.5
    structure_logit: float = 10.0  # initial preference for well-formed tokens in structural slots
    special_penalty: float = 10.0  # initial penalty on specials inside the think block
    init_precision: float = 50.0  # forecast kernel: logit = -precision * (level - centre)^2
    init_centre: float = 0.5
    init_noise: float = 0.01

    def __post_init__(self):
        if self.horizon < 1 or self.window < 1 or self.n_reason < 0:
            raise ParameterError("horizon and window must be >= 1, n_reason >= 0")
        if self.levels < 2 or not self.grid_high > self.grid_low:
            raise ParameterError("need levels >= 2 and grid_high > grid_low")
        if self.init_precision <= 0:
            raise ParameterError("init_precision must be > 0")


class ToyReasoningPolicy(SequencePolicy):
    kind = "toy-reasoning"

    def __init__(self, config: ToyPolicyConfig | None = None):
        self.config = cfg = config or ToyPolicyConfig()
        self.grid = np.linspace(cfg.grid_low, cfg.grid_high, cfg.levels)
        self.numbers = tuple(f"{v:.6f}" for v in self.grid)
        self.vocab = SPECIALS + WORDS + self.numbers
        self.n_text = len(SPECIALS) + len(WORDS)
        R, H = cfg.n_reason, cfg.horizon
        self.length = R + 3 + H
        self.pos_open, self.pos_close, self.pos_marker = 0, R + 1, R + 2
        self.reason_slots = list(range(1, R + 1))
        self.number_slots = list(range(R + 3, R + 3 + H))

        V, L, T = self.vocab_size, self.length, cfg.window
        sizes = {"bias": L * V, "centre": H, "weights": H * T, "word_shift": V * H, "log_precision": 1}
        self._slices, start = {}, 0
        for name, size in sizes.items():
            self._slices[name] = slice(start, start + size)
            start += size
        self._n_params = start

        mask = torch.ones(L, V, dtype=torch.float64)
        mask[R + 3:, self.n_text:] = 0.0  # number tokens in number slots are scored by the kernel only
        self._bias_mask = mask
        self._grid_t = torch.as_tensor(self.grid)

    def n_params(self) -> int:
        return self._n_params

    def describe(self) -> dict:
        return {"kind": self.kind, "config": asdict(self.config)}

    def unpack(self, theta: torch.Tensor) -> dict[str, torch.Tensor]:
        cfg = self.config
        shapes = {"bias": (self.length, self.vocab_size), "centre": (cfg.horizon,),
                  "weights": (cfg.horizon, cfg.window), "word_shift": (self.vocab_size, cfg.horizon),
                  "log_precision": ()}
        return {k: theta[s].reshape(shapes[k]) for k, s in self._slices.items()}

    def initial_params(self, rng) -> np.ndarray:
        cfg = self.config
        theta = np.zeros(self._n_params)
        bias = np.zeros((self.length, self.vocab_size))
        n_sp, n_w = len(SPECIALS), len(WORDS)
        bias[self.pos_open, SPECIALS.index(THINK_OPEN)] = cfg.structure_logit
        bias[self.pos_close, SPECIALS.index(THINK_CLOSE)] = cfg.structure_logit
        bias[self.pos_marker, SPECIALS.index(MARKER)] = cfg.structure_logit
        for s in self.reason_slots:
            bias[s, :n_sp] = -cfg.special_penalty
            bias[s, n_sp + n_w:] = -cfg.structure_logit
            bias[s, n_sp:n_sp + n_w] = cfg.init_noise * rng.standard_normal(n_w)
        for s in (self.pos_open, self.pos_close, self.pos_marker):
            bias[s, self.n_text:] -= cfg.structure_logit
        for s in self.number_slots:
            bias[s, :self.n_text] = -cfg.structure_logit
        theta[self._slices["bias"]] = bias.ravel()
        theta[self._slices["centre"]] = cfg.init_centre
        theta[self._slices["weights"]] = cfg.init_noise * rng.standard_normal(cfg.horizon * cfg.window)
        theta[self._slices["log_precision"]] = math.log(cfg.init_precision)
        return theta

    def features(self, prompt: Prompt) -> torch.Tensor:
        x = prompt.series_values()
        if x.size != self.config.window:
            raise ValidationError(f"prompt carries {x.size} series values, policy expects {self.config.window}")
        return torch.as_tensor(x, dtype=torch.float64)

    def forecast_centre(self, theta: torch.Tensor, prompt: Prompt, tokens: torch.Tensor) -> torch.Tensor:
        p = self.unpack(theta)
        centre = p["centre"] + p["weights"] @ self.features(prompt)
        if self.reason_slots:
            words = tokens[:, self.reason_slots]
            centre = centre + p["word_shift"][words].mean(dim=1)
        else:
            centre = centre.expand(tokens.shape[0], -1)
        return centre

    def logits(self, theta, prompt, tokens):
        p = self.unpack(theta)
        G = tokens.shape[0]
        centre = self.forecast_centre(theta, prompt, tokens)  # (G, H)
        sq = (self._grid_t[None, None, :] - centre[..., None]) ** 2
        # normalised over the number tokens: sharpening the kernel or moving the centre off the
        # grid never hands probability in number slots over to text tokens
        kernel = torch.log_softmax(-torch.exp(p["log_precision"]) * sq, dim=-1)
        H = self.config.horizon
        kernel = torch.cat([torch.zeros(G, H, self.n_text, dtype=kernel.dtype), kernel], dim=2)
        kernel = torch.cat([torch.zeros(G, self.length - H, self.vocab_size, dtype=kernel.dtype), kernel], dim=1)
        return (p["bias"] * self._bias_mask)[None] + kernel

    def _passes(self):
        return [list(range(self.length - self.config.horizon)), self.number_slots]

    def render(self, token_ids) -> str:
        tok = [self.vocab[int(t)] for t in token_ids]
        R = self.config.n_reason
        think = tok[0] + " ".join(tok[1:R + 1]) + tok[R + 1]
        return think + "\n" + tok[R + 2] + " " + ",".join(tok[R + 3:])


def policy_from_description(desc: dict) -> SequencePolicy:
    if desc.get("kind") == ToyReasoningPolicy.kind:
        return ToyReasoningPolicy(ToyPolicyConfig(**desc["config"]))
    if desc.get("kind") == CategoricalPolicy.kind:
        return CategoricalPolicy(desc["vocab"], desc["length"])
    raise ValidationError(f"unknown policy kind {desc.get('kind')!r}")


def load_policy(path) -> tuple[SequencePolicy, PolicyCheckpoint]:
    ckpt = PolicyCheckpoint.load(path)
    return policy_from_description(ckpt.policy), ckpt


def serve_stdio(policy: SequencePolicy, ckpt: PolicyCheckpoint, stdin, stdout) -> None:
    """Answer line-delimited JSON sampling requests.

    Request: ``{"prompt": str, "G": int, "seed": int}``. Response: G lines of
    ``{"text": str, "token_ids": [int], "logprobs": [float]}``.
    """
    horizon = getattr(getattr(policy, "config", None), "horizon", 1)
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        prompt = Prompt.from_text(req["prompt"], horizon)
        for out in policy.sample(ckpt, prompt, int(req["G"]), int(req["seed"])):
            stdout.write(json.dumps({"text": out.text, "token_ids": out.token_ids.tolist(),
                                     "logprobs": out.logprobs.tolist()}) + "\n")
        stdout.flush()


class ExternalPolicy:
    """Sampling-only adapter for an out-of-process policy (e.g. a served language model)."""

    def __init__(self, command: Sequence[str]):
        self.command = list(command)
        self._proc: subprocess.Popen | None = None

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          text=True, bufsize=1)
        return self._proc

    def sample(self, prompt: Prompt | str, G: int, seed: int) -> list[PolicyOutput]:
        proc = self._ensure()
        text = prompt.text if isinstance(prompt, Prompt) else prompt
        proc.stdin.write(json.dumps({"prompt": text, "G": G, "seed": seed}) + "\n")
        proc.stdin.flush()
        outputs = []
        for _ in range(G):
            line = proc.stdout.readline()
            if not line:
                raise RuntimeError(f"external policy {self.command[0]!r} closed its output")
            msg = json.loads(line)
            outputs.append(PolicyOutput(msg["text"], msg["token_ids"], msg["logprobs"]))
        return outputs

    def close(self) -> None:
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
