"""Dual-branch forecaster: time tokens, text tokens aligned to principal word embeddings, shared
transformer blocks, feature regularisation and output matching."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import DivergenceError, ParameterError, ValidationError
from .market import WindowPair

DTYPE = torch.float64
N_FEATURES = 6


@dataclass(frozen=True)
class BackboneConfig:
    window: int = 10
    horizon: int = 10
    d_model: int = 32
    heads: int = 4
    n_blocks: int = 2
    pca_k: int = 16
    gamma: float = 0.5
    w_sup: float = 1.0
    w_feat: float = 0.1
    w_out: float = 0.1
    ff_mult: int = 2
    epochs: int = 15
    learning_rate: float = 2e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ParameterError(f"d_model ({self.d_model}) must be a positive multiple of heads ({self.heads})")
        if self.n_blocks < 1:
            raise ParameterError("n_blocks must be >= 1")
        if self.pca_k < 1:
            raise ParameterError("pca_k must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ParameterError("gamma must lie in (0, 1]")
        if self.window < 1 or self.horizon < 1 or self.ff_mult < 1:
            raise ParameterError("window, horizon and ff_mult must be >= 1")
        if min(self.w_sup, self.w_feat, self.w_out) < 0:
            raise ParameterError("loss weights must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ParameterError("need epochs >= 0, batch_size >= 1 and learning_rate > 0")


# -- embedding matrix ------------------------------------------------------------------------

@dataclass
class EmbeddingMatrix:
    """Stand-in for an LLM's word-embedding table."""

    rows: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or not np.all(np.isfinite(self.rows)):
            raise ValidationError("embedding matrix must be a finite 2-D array")

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def synthetic(cls, rows: int = 256, width: int = 32, seed: int = 0, clusters: int = 24) -> EmbeddingMatrix:
        """Rows scattered around a few cluster centres, the way related words sit together."""
        rng = np.random.default_rng(seed)
        centres = rng.standard_normal((clusters, width))
        labels = rng.integers(0, clusters, rows)
        return cls(centres[labels] + 0.3 * rng.standard_normal((rows, width)), seed)

    def save(self, path) -> None:
        header = {"rows": self.rows.shape[0], "width": self.width, "seed": self.seed, "dtype": "<f8"}
        with open(path, "wb") as fh:
            fh.write((json.dumps(header) + "\n").encode())
            fh.write(self.rows.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> EmbeddingMatrix:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != header["rows"] * header["width"]:
            raise ValidationError(f"{path}: expected {header['rows']}x{header['width']} values, found {data.size}")
        return cls(data.reshape(header["rows"], header["width"]).copy(), header.get("seed"))


class PrincipalEmbeddings(NamedTuple):
    rows: np.ndarray  # input rows projected onto the retained subspace, in the original coordinates
    components: np.ndarray  # (k, width), orthonormal
    mean: np.ndarray
    explained_variance: np.ndarray


def pca_reduce(matrix: EmbeddingMatrix | np.ndarray, k: int) -> PrincipalEmbeddings:
    x = matrix.rows if isinstance(matrix, EmbeddingMatrix) else np.asarray(matrix, dtype=float)
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ParameterError(f"pca_k={k} must lie in [1, {min(n, d)}] for a {n}x{d} matrix")
    mean = x.mean(axis=0)
    centred = x - mean
    _, sing, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:k]
    projected = mean + (centred @ comps.T) @ comps
    return PrincipalEmbeddings(projected, comps, mean, sing[:k] ** 2 / max(n - 1, 1))


def reconstruction_error(matrix: EmbeddingMatrix | np.ndarray, reduced: PrincipalEmbeddings) -> float:
    x = matrix.rows if isinstance(matrix, EmbeddingMatrix) else np.asarray(matrix, dtype=float)
    return float(np.linalg.norm(x - reduced.rows))


# -- layers ----------------------------------------------------------------------------------

def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Multi-head softmax(QK^T / sqrt(C)) V; q is (..., Tq, d), k and v are (..., Tk, d).

    Returns the concatenated head outputs and the attention weights (..., heads, Tq, Tk).
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ValidationError(f"attention widths disagree: {q.shape[-1]}, {k.shape[-1]}, {v.shape[-1]}")
    c = d // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, c).transpose(-3, -2)

    weights = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(c), dim=-1)
    out = (weights @ split(v)).transpose(-3, -2)
    return out.reshape(*out.shape[:-2], d), weights


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d, dtype=DTYPE)
        self.k = nn.Linear(d, d, dtype=DTYPE)
        self.v = nn.Linear(d, d, dtype=DTYPE)
        self.o = nn.Linear(d, d, dtype=DTYPE)

    def forward(self, x):
        out, _ = attention(self.q(x), self.k(x), self.v(x), self.heads)
        return self.o(out)


class CrossAlign(nn.Module):
    """Time tokens query the principal word embeddings; no output projection."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.k = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.v = nn.Linear(d, d, bias=False, dtype=DTYPE)

    def forward(self, x_time, words, return_weights: bool = False):
        if x_time.shape[-1] != words.shape[-1]:
            raise ValidationError(f"time tokens have width {x_time.shape[-1]}, embeddings {words.shape[-1]}")
        out, w = attention(self.q(x_time), self.k(words), self.v(words), self.heads)
        return (out, w) if return_weights else out


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, ff_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.attn = SelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.ff = nn.Sequential(nn.Linear(d, ff_mult * d, dtype=DTYPE), nn.GELU(),
                                nn.Linear(ff_mult * d, d, dtype=DTYPE))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))


@dataclass
class ForecastPair:
    y_time: torch.Tensor
    y_text: torch.Tensor
    feats_time: list[torch.Tensor] = field(default_factory=list)
    feats_text: list[torch.Tensor] = field(default_factory=list)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig, words: np.ndarray):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        words = np.asarray(words, dtype=np.float64)
        if words.ndim != 2 or words.shape[1] != d:
            raise ValidationError(f"principal embeddings must be (rows, {d}), got {words.shape}")
        self.register_buffer("words", torch.as_tensor(words))
        self.embed = nn.Linear(N_FEATURES, d, dtype=DTYPE)
        self.pos = nn.Parameter(0.02 * torch.randn(cfg.window, d, dtype=DTYPE))
        self.time_attn = SelfAttention(d, cfg.heads)
        self.align = CrossAlign(d, cfg.heads)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.ff_mult) for _ in range(cfg.n_blocks))
        self.phi_time = nn.ModuleList(nn.Linear(d, d, dtype=DTYPE) for _ in range(cfg.n_blocks))
        self.phi_text = nn.ModuleList(nn.Linear(d, d, dtype=DTYPE) for _ in range(cfg.n_blocks))
        self.head_time = nn.Linear(cfg.window * d, cfg.horizon, dtype=DTYPE)
        self.head_text = nn.Linear(cfg.window * d, cfg.horizon, dtype=DTYPE)

    def embed_time(self, x: torch.Tensor) -> torch.Tensor:
        """(..., T, 6) normalised window features -> (..., T, d) time tokens."""
        x = torch.as_tensor(x, dtype=DTYPE)
        if not torch.isfinite(x).all():
            raise ValidationError("window features contain non-finite values")
        if x.shape[-2:] != (self.cfg.window, N_FEATURES):
            raise ValidationError(f"expected (..., {self.cfg.window}, {N_FEATURES}) features, got {tuple(x.shape)}")
        h = self.embed(x) + self.pos
        return h + self.time_attn(h)

    def cross_align(self, x_time: torch.Tensor) -> torch.Tensor:
        return self.align(x_time, self.words)

    def forward(self, x) -> ForecastPair:
        t = self.embed_time(x)
        s = self.cross_align(t)
        pair = ForecastPair(None, None)
        for n, block in enumerate(self.blocks):
            t, s = block(t), block(s)
            if not (torch.isfinite(t).all() and torch.isfinite(s).all()):
                raise DivergenceError(f"non-finite activation after block {n}", n)
            pair.feats_time.append(t)
            pair.feats_text.append(s)
        pair.y_time = self.head_time(t.flatten(-2))
        pair.y_text = self.head_text(s.flatten(-2))
        return pair


def build_backbone(cfg: BackboneConfig, embeddings: EmbeddingMatrix) -> Backbone:
    """Seeded initialisation that leaves the global torch RNG untouched."""
    if embeddings.width != cfg.d_model:
        raise ValidationError(f"embedding width {embeddings.width} != d_model {cfg.d_model}")
    if embeddings.rows.shape[0] < cfg.pca_k:
        raise ValidationError(f"embedding matrix has {embeddings.rows.shape[0]} rows, fewer than pca_k={cfg.pca_k}")
    words = pca_reduce(embeddings, cfg.pca_k).rows
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return Backbone(cfg, words)


# -- losses ----------------------------------------------------------------------------------

def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def weighted_block_sum(values: Sequence, gamma: float):
    """sum_n gamma^(N-n) * values[n-1] for n = 1..N (the last block gets weight 1)."""
    N = len(values)
    return sum(gamma ** (N - n) * v for n, v in enumerate(values, start=1))


def loss_feature(feats_time: Sequence[torch.Tensor], feats_text: Sequence[torch.Tensor], gamma: float,
                 phi_time: Sequence[nn.Module] | None = None, phi_text: Sequence[nn.Module] | None = None):
    if len(feats_time) != len(feats_text):
        raise ValidationError("both branches must supply one feature map per block")
    terms = []
    for n, (ft, fs) in enumerate(zip(feats_time, feats_text)):
        pt = phi_time[n](ft) if phi_time is not None else ft
        ps = phi_text[n](fs) if phi_text is not None else fs
        terms.append(l1(ps, pt))
    return weighted_block_sum(terms, gamma)


def loss_output(pair: ForecastPair) -> torch.Tensor:
    return l1(pair.y_time, pair.y_text)


class LossParts(NamedTuple):
    total: torch.Tensor
    sup: torch.Tensor
    feature: torch.Tensor
    output: torch.Tensor


def total_loss(model: Backbone, x, y) -> LossParts:
    cfg = model.cfg
    pair = model(x)
    sup = F.mse_loss(pair.y_time, torch.as_tensor(y, dtype=DTYPE))
    feat = loss_feature(pair.feats_time, pair.feats_text, cfg.gamma, model.phi_time, model.phi_text)
    out = loss_output(pair)
    return LossParts(cfg.w_sup * sup + cfg.w_feat * feat + cfg.w_out * out, sup, feat, out)


# -- training --------------------------------------------------------------------------------

def pairs_to_arrays(pairs: Sequence[WindowPair]) -> tuple[np.ndarray, np.ndarray]:
    if not pairs:
        return np.zeros((0, 0, N_FEATURES)), np.zeros((0, 0))
    return (np.stack([p.window.features() for p in pairs]),
            np.stack([p.normalized_target() for p in pairs]))


class EpochPoint(NamedTuple):
    epoch: int
    train_loss: float
    val_mse: float


def forecast_uncond(model: Backbone, x) -> np.ndarray:
    """The temporal-branch forecast, used as the unconditional forecast downstream."""
    with torch.no_grad():
        return model(x).y_time.numpy()


def evaluate_mse(model: Backbone, x, y) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean((forecast_uncond(model, x) - np.asarray(y)) ** 2))


def train_backbone(model: Backbone, train: Sequence[WindowPair], val: Sequence[WindowPair],
                   cfg: BackboneConfig | None = None, seed: int | None = None) -> list[EpochPoint]:
    """Adam on the combined loss with a seeded shuffle; trains ``model`` in place."""
    cfg = cfg or model.cfg
    seed = cfg.seed if seed is None else seed
    xt, yt = pairs_to_arrays(train)
    xv, yv = pairs_to_arrays(val)
    if cfg.epochs == 0:
        return []
    if len(xt) == 0:
        raise ValidationError("no training windows")
    xt_t, yt_t = torch.as_tensor(xt, dtype=DTYPE), torch.as_tensor(yt, dtype=DTYPE)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(seed)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(xt))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            opt.zero_grad()
            try:
                loss = total_loss(model, xt_t[idx], yt_t[idx]).total
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", epoch) from exc
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(EpochPoint(epoch, total / count, evaluate_mse(model, xv, yv)))
    return curve


def write_curve(curve: Sequence[EpochPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_mse"))
        for p in curve:
            w.writerow((p.epoch, repr(p.train_loss), repr(p.val_mse)))


# -- checkpoints -----------------------------------------------------------------------------

def save_module(module: nn.Module, meta: dict, path) -> None:
    """Raw little-endian float64 tensors in state-dict order, plus a JSON sidecar listing them."""
    path = Path(path)
    state = module.state_dict()
    with open(path.with_suffix(".bin"), "wb") as fh:
        for t in state.values():
            fh.write(t.detach().numpy().astype("<f8").tobytes())
    meta = dict(meta, tensors=[{"name": k, "shape": list(t.shape)} for k, t in state.items()])
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_state(path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    state, start = {}, 0
    for spec in meta["tensors"]:
        size = int(np.prod(spec["shape"], dtype=np.int64))
        if start + size > flat.size:
            raise ValidationError(f"{path}: parameter file is shorter than its metadata says")
        state[spec["name"]] = torch.as_tensor(flat[start:start + size].reshape(spec["shape"]).copy())
        start += size
    if start != flat.size:
        raise ValidationError(f"{path}: parameter file has {flat.size - start} trailing values")
    return meta, state


def save_backbone(model: Backbone, path) -> None:
    save_module(model, {"kind": "backbone", "config": asdict(model.cfg)}, path)


def load_backbone(path) -> Backbone:
    meta, state = load_state(path)
    if meta.get("kind") != "backbone":
        raise ValidationError(f"{path} is not a backbone checkpoint")
    cfg = BackboneConfig(**meta["config"])
    model = Backbone(cfg, state["words"].numpy())
    model.load_state_dict(state)
    return model
