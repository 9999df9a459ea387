"""Transformer-encoder regressors for tight-flag and final-time prediction.

Attention, the encoder block and the training loop are written out here;
torch supplies tensors, autograd and the Adam update.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .lcvx import LAYOUT_VERSION, Strategy, max_burn_time
from .problem import MissionConfig, ProblemParameters

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
CONSTRAINTS = "constraints"
TIME = "time"


class NumericalError(FloatingPointError):
    """Non-finite activation; ``layer`` is the encoder block index (-1 = input)."""

    def __init__(self, layer: int, message: str = ""):
        super().__init__(message or f"non-finite activation at layer {layer}")
        self.layer = layer


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


class ModelMismatchError(ValueError):
    """Model was trained for a different mission or constraint layout."""


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 384
    n_heads: int = 2
    n_layers: int = 4
    d_ff: Optional[int] = None  # None: 4 * d_model
    dropout: float = 0.1
    input_dim: int = 9
    output_dim: int = 397
    tokens: str = "per_scalar"  # or "single"
    positional: str = "learned"  # "sinusoidal", "none"
    norm: str = "post"  # or "pre"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.tokens not in ("per_scalar", "single"):
            raise ValueError(f"unknown tokenization {self.tokens!r}")
        if self.positional not in ("learned", "sinusoidal", "none"):
            raise ValueError(f"unknown positional encoding {self.positional!r}")
        if self.norm not in ("post", "pre"):
            raise ValueError(f"unknown norm placement {self.norm!r}")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def seq_len(self) -> int:
        return self.input_dim if self.tokens == "per_scalar" else 1

    @classmethod
    def constraint_default(cls, N: int = 50) -> "TransformerConfig":
        return cls(d_model=384, n_heads=2, n_layers=4, dropout=0.1, output_dim=8 * N - 3)

    @classmethod
    def time_default(cls) -> "TransformerConfig":
        return cls(d_model=64, n_heads=1, n_layers=2, dropout=0.1, output_dim=1)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    base_lr: float = 1e-3
    schedule: str = "constant"  # or "warmup"
    warmup_steps: int = 4000
    k_folds: int = 2
    epochs: int = 1
    loss: str = "mse"
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.k_folds < 1:
            raise ValueError("k_folds must be at least 1")
        if self.schedule not in ("constant", "warmup"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.loss != "mse":
            raise ValueError("only the mse loss is supported")

    @classmethod
    def constraint_default(cls) -> "TrainConfig":
        return cls(batch_size=128, base_lr=1e-3, schedule="constant")

    @classmethod
    def time_default(cls) -> "TrainConfig":
        return cls(batch_size=320, base_lr=1e-2, schedule="warmup", warmup_steps=4000)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Learning rate at optimizer step ``step`` (1-based).

    Warmup: linear ramp to ``base_lr`` over ``warmup_steps``, then
    ``base_lr * (step - warmup)**-0.5`` capped at ``base_lr``.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    if cfg.schedule == "constant":
        return cfg.base_lr
    w = cfg.warmup_steps
    if step <= w:
        return cfg.base_lr * step / w
    return min(cfg.base_lr, cfg.base_lr * (step - w) ** -0.5)


# -- input scaling -----------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        self.std = np.where(std > 0, std, 1.0)

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        return cls(X.mean(axis=0), X.std(axis=0))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def inverse(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.std + self.mean


# -- layers ------------------------------------------------------------------


def softmax(scores: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Row softmax with max subtraction."""
    z = scores - scores.amax(dim=dim, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def attention(Q, K, V, return_weights: bool = False):
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d_k)) V``.

    Works on torch tensors with arbitrary leading batch dims; numpy inputs
    are evaluated in float64 and returned as numpy.
    """
    as_numpy = isinstance(Q, np.ndarray)
    if as_numpy:
        Q, K, V = (torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in (Q, K, V))
    scores = Q @ K.transpose(-2, -1) / math.sqrt(Q.shape[-1])
    W = softmax(scores)
    O = W @ V
    if as_numpy:
        O, W = O.numpy(), W.numpy()
    return (O, W) if return_weights else O


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_k = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.d_k).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        heads = attention(self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x)))
        return self.o(heads.transpose(1, 2).reshape(B, L, D))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.pre = cfg.norm == "pre"
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def _ff(self, x):
        return self.ff2(self.drop(torch.relu(self.ff1(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.pre:
            x = x + self.drop(self.attn(self.norm1(x)))
            return x + self.drop(self._ff(self.norm2(x)))
        x = self.norm1(x + self.drop(self.attn(x)))
        return self.norm2(x + self.drop(self._ff(x)))


def sinusoidal_table(L: int, d: int) -> torch.Tensor:
    pos = torch.arange(L, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(L, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return pe


class TransformerRegressor(nn.Module):
    """Linear token encoder, positional term, encoder stack, mean pool, linear decoder."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        in_features = 1 if cfg.tokens == "per_scalar" else cfg.input_dim
        self.encoder = nn.Linear(in_features, cfg.d_model)
        if cfg.positional == "learned":
            self.pos = nn.Parameter(0.02 * torch.randn(cfg.seq_len, cfg.d_model))
        else:
            table = sinusoidal_table(cfg.seq_len, cfg.d_model) if cfg.positional == "sinusoidal" else torch.zeros(cfg.seq_len, cfg.d_model)
            self.register_buffer("pos", table.float(), persistent=False)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList([EncoderBlock(cfg) for _ in range(cfg.n_layers)])
        self.final_norm = nn.LayerNorm(cfg.d_model) if cfg.norm == "pre" and cfg.n_layers else None
        self.decoder = nn.Linear(cfg.d_model, cfg.output_dim)

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        """Token representations after the encoder stack, shape (B, L, d_model)."""
        h = x.unsqueeze(-1) if self.cfg.tokens == "per_scalar" else x.unsqueeze(1)
        h = self.drop(self.encoder(h) + self.pos.to(x.dtype))
        _check_finite(h, -1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            _check_finite(h, i)
        if self.final_norm is not None:
            h = self.final_norm(h)
        return h

    def forward(self, x: torch.Tensor):
        """Returns (outputs, pooled pre-decoder embeddings)."""
        emb = self.tokens(x).mean(dim=1)
        return self.decoder(emb), emb


def _check_finite(h: torch.Tensor, layer: int) -> None:
    if not torch.isfinite(h).all():
        raise NumericalError(layer)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- bundle ------------------------------------------------------------------


@dataclass
class ModelBundle:
    config: TransformerConfig
    model: TransformerRegressor
    standardizer: Standardizer
    target: str  # CONSTRAINTS or TIME
    mission_hash: str = ""
    N: int = 50
    layout_version: str = LAYOUT_VERSION
    train_config: Optional[TrainConfig] = None
    metrics: dict = field(default_factory=dict)

    @property
    def n_parameters(self) -> int:
        return count_parameters(self.model)

    def predict(self, theta) -> np.ndarray:
        """Raw outputs for one 9-vector or a (n, 9) batch, eval mode."""
        X = np.atleast_2d(np.asarray(theta, dtype=float))
        out, _ = self._run(X)
        return out[0] if np.ndim(theta) == 1 else out

    def embed(self, theta) -> np.ndarray:
        _, emb = self._run(np.atleast_2d(np.asarray(theta, dtype=float)))
        return emb

    def _run(self, X: np.ndarray):
        dtype = next(self.model.parameters()).dtype
        Z = torch.as_tensor(self.standardizer.transform(X), dtype=dtype)
        was_training = self.model.training
        self.model.eval()
        try:
            with torch.no_grad():
                out, emb = self.model(Z)
        finally:
            self.model.train(was_training)
        return out.numpy().astype(float), emb.numpy().astype(float)

    def check_compatible(self, mission: MissionConfig) -> None:
        if self.layout_version != LAYOUT_VERSION:
            raise ModelMismatchError(f"model layout {self.layout_version!r}, expected {LAYOUT_VERSION!r}")
        if self.mission_hash != mission.hash():
            raise ModelMismatchError("model was trained for a different mission configuration")
        if self.target == CONSTRAINTS and self.config.output_dim != 8 * mission.N - 3:
            raise ModelMismatchError(f"model predicts {self.config.output_dim} flags, mission needs {8 * mission.N - 3}")

    # serialization: npz of named float arrays plus a JSON metadata entry

    def save(self, path) -> None:
        meta = {
            "format_version": MODEL_FORMAT_VERSION,
            "layout_version": self.layout_version,
            "mission_hash": self.mission_hash,
            "N": self.N,
            "target": self.target,
            "config": asdict(self.config),
            "train_config": asdict(self.train_config) if self.train_config else None,
            "standardizer": {"mean": self.standardizer.mean.tolist(), "std": self.standardizer.std.tolist()},
            "metrics": self.metrics,
            "n_parameters": self.n_parameters,
        }
        arrays = {f"w.{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            weights = {k[2:]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("w.")}
        if meta.get("format_version") != MODEL_FORMAT_VERSION:
            raise ModelMismatchError(f"unsupported model format {meta.get('format_version')!r}")
        cfg = TransformerConfig(**meta["config"])
        model = TransformerRegressor(cfg)
        dtype = next(iter(weights.values())).dtype
        model.to(dtype)
        model.load_state_dict(weights)
        model.eval()
        st = meta["standardizer"]
        tc = TrainConfig(**meta["train_config"]) if meta["train_config"] else None
        return cls(cfg, model, Standardizer(st["mean"], st["std"]), meta["target"], meta["mission_hash"], meta["N"],
                   meta["layout_version"], tc, meta.get("metrics", {}))


def new_bundle(cfg: TransformerConfig, target: str, standardizer: Standardizer, mission_hash: str = "", N: int = 50, seed: int = 0) -> ModelBundle:
    torch.manual_seed(seed)
    return ModelBundle(cfg, TransformerRegressor(cfg), standardizer, target, mission_hash, N)


# -- training ----------------------------------------------------------------


def split_indices(n: int, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled (train+val, test) index split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def targets(dataset, target: str) -> np.ndarray:
    if target == CONSTRAINTS:
        return dataset.tau.astype(float)
    if target == TIME:
        return dataset.t_f.astype(float)[:, None]
    raise ValueError(f"unknown target {target!r}")


def binary_accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    return float(np.mean(pred.astype(bool) == truth.astype(bool)))


def evaluate(bundle: ModelBundle, dataset, tau_on: float = 0.5) -> dict:
    """Held-out metrics for a trained bundle, with naive baselines."""
    out = bundle.predict(dataset.theta)
    y = targets(dataset, bundle.target)
    res = {"n": len(dataset), "mse": float(np.mean((out - y) ** 2))}
    if bundle.target == CONSTRAINTS:
        res["binary_accuracy"] = binary_accuracy(out >= tau_on, y)
        res["zeros_baseline_accuracy"] = binary_accuracy(np.zeros_like(y), y)
    else:
        res["label_variance"] = float(np.var(y))
    return res


def train(
    dataset,
    model_cfg: TransformerConfig,
    train_cfg: TrainConfig,
    target: str,
    test=None,
    log_path=None,
    mission_hash: Optional[str] = None,
    dtype=torch.float32,
) -> tuple[ModelBundle, dict]:
    """K-fold training on ``dataset`` (the train+val portion).

    One model is carried through the folds: fold k trains on the other
    folds and validates on fold k. ``test``, if given, is scored at the end.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    X = dataset.theta
    Y = targets(dataset, target)
    if Y.shape[1] != model_cfg.output_dim:
        raise ValueError(f"target width {Y.shape[1]} does not match output_dim {model_cfg.output_dim}")
    std = Standardizer.fit(X)
    bundle = new_bundle(model_cfg, target, std, mission_hash or dataset.header.get("mission_hash", ""), dataset.N, train_cfg.seed)
    bundle.train_config = train_cfg
    model = bundle.model.to(dtype)
    # start from the mean predictor: zero head weights, bias at the target mean
    with torch.no_grad():
        model.decoder.weight.zero_()
        model.decoder.bias.copy_(torch.as_tensor(Y.mean(axis=0), dtype=dtype))

    Xt = torch.as_tensor(std.transform(X), dtype=dtype)
    Yt = torch.as_tensor(Y, dtype=dtype)
    opt = torch.optim.Adam(model.parameters(), lr=lr_schedule(1, train_cfg), weight_decay=train_cfg.weight_decay)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    n = len(X)
    K = train_cfg.k_folds
    folds = np.array_split(torch.randperm(n, generator=gen).numpy(), K) if K > 1 else [np.array([], dtype=int)]

    rows = []
    fold_metrics = []
    step = 0
    for k in range(K):
        val_idx = folds[k]
        tr_idx = np.concatenate([folds[j] for j in range(K) if j != k]) if K > 1 else np.arange(n)
        for epoch in range(train_cfg.epochs):
            model.train()
            order = tr_idx[torch.randperm(len(tr_idx), generator=gen).numpy()]
            for s in range(0, len(order), train_cfg.batch_size):
                step += 1
                lr = lr_schedule(step, train_cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                b = torch.as_tensor(order[s : s + train_cfg.batch_size])
                out, _ = model(Xt[b])
                loss = torch.mean((out - Yt[b]) ** 2)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                rows.append([step, k, lr, loss.item(), ""])
            val = _mse(model, Xt, Yt, val_idx)
            if rows:
                rows[-1][4] = "" if val is None else val
        fold_metrics.append({"fold": k, "train_mse": _mse(model, Xt, Yt, tr_idx), "val_mse": _mse(model, Xt, Yt, val_idx)})
    model.eval()

    metrics = {"folds": fold_metrics, "steps": step, "n_train": n, "n_parameters": bundle.n_parameters, "optimizer": "adam"}
    if test is not None and len(test):
        metrics["test"] = evaluate(bundle, test)
    bundle.metrics = metrics
    if log_path is not None:
        write_training_log(rows, log_path)
    return bundle, metrics


def _mse(model, Xt, Yt, idx) -> Optional[float]:
    if len(idx) == 0:
        return None
    was = model.training
    model.eval()
    with torch.no_grad():
        idx = torch.as_tensor(idx)
        out, _ = model(Xt[idx])
        val = float(torch.mean((out - Yt[idx]) ** 2))
    model.train(was)
    return val


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "fold", "lr", "train_mse", "val_mse"])
        w.writerows(rows)


# -- inference ---------------------------------------------------------------


def threshold(raw, tau_on: float = 0.5) -> np.ndarray:
    return (np.asarray(raw) >= tau_on).astype(np.uint8)


def predict_strategy(
    constraint_model: ModelBundle,
    time_model: ModelBundle,
    theta,
    mission: Optional[MissionConfig] = None,
    tau_on: float = 0.5,
    t_bounds: tuple = (5.0, None),
    t_margin: float = 1.0,
) -> Strategy:
    """Binarized tight flags and a clamped final-time prediction.

    The upper clamp defaults to the fuel-exhaustion horizon when ``mission``
    is given. ``t_margin`` scales the predicted time before clamping.
    """
    params = theta if isinstance(theta, ProblemParameters) else ProblemParameters.from_vector(theta)
    if mission is not None:
        constraint_model.check_compatible(mission)
        time_model.check_compatible(mission)
    elif constraint_model.mission_hash != time_model.mission_hash:
        raise ModelMismatchError("constraint and time models were trained for different missions")
    vec = params.vector()
    flags = threshold(constraint_model.predict(vec), tau_on)
    t_lo, t_hi = t_bounds
    if t_hi is None:
        t_hi = max_burn_time(mission, params) if mission is not None else math.inf
    t_f = float(time_model.predict(vec)[0]) * t_margin
    t_f = float(np.clip(t_f, t_lo, t_hi)) if math.isfinite(t_f) else t_lo
    return Strategy(flags, t_f)


def export_embeddings(bundle: ModelBundle, dataset, path) -> np.ndarray:
    """CSV of (sample_id, pooled embedding, label).

    Label is the tight-flag count for the constraint model and the rounded
    final time for the time model.
    """
    emb = bundle.embed(dataset.theta) if len(dataset) else np.zeros((0, bundle.config.d_model))
    if bundle.target == CONSTRAINTS:
        label = dataset.tau.sum(axis=1).astype(int)
    else:
        label = np.rint(dataset.t_f).astype(int)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["sample_id", *[f"e_{i}" for i in range(emb.shape[1])], "label"])
    for i, (e, lab) in enumerate(zip(emb, label)):
        w.writerow([i, *map(repr, e.tolist()), int(lab)])
    Path(path).write_text(buf.getvalue())
    return emb
