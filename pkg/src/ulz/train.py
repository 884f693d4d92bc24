"""Stage-wise training of unrolled models with the mean squared recovery loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, adam_step
from .core import as_matrix
from .dictgen import add_noise
from .errors import ArgumentError, NumericError, TrainingError
from .models import UnrolledModel
from .rng import stream

LOG_COLUMNS = ("stage", "step", "train_loss", "val_nmse_db", "lr")


@dataclass(frozen=True)
class Stage:
    """Train the parameters of ``layers`` (plus all shared ones) for ``steps`` at ``lr``."""

    layers: tuple
    lr: float
    steps: int

    def __post_init__(self):
        if self.lr <= 0:
            raise ArgumentError(f"learning rate must be positive, got {self.lr}")
        if self.steps < 0:
            raise ArgumentError("steps must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    K: int
    lr: float = 1e-3
    lr_decay: tuple = (0.2, 0.02)
    steps_per_stage: int = 50
    batch_size: int = 64
    train_size: int = 2000
    val_size: int = 200
    stages: tuple | None = None
    log_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ArgumentError("K must be at least 1")
        if self.lr <= 0 or any(f <= 0 for f in self.lr_decay):
            raise ArgumentError("learning rates must be positive")
        if self.batch_size < 1 or self.train_size < 1 or self.val_size < 1:
            raise ArgumentError("batch and set sizes must be positive")
        for st in self.schedule():
            if any(not 0 <= l < self.K for l in st.layers):
                raise ArgumentError(f"stage layers {st.layers} exceed K={self.K}")

    def schedule(self):
        """Explicit ``stages`` or the default: for each layer ``s`` train ``s`` alone
        at ``lr``, then layers ``<= s`` at each decayed rate."""
        if self.stages is not None:
            return list(self.stages)
        out = []
        for s in range(self.K):
            out.append(Stage((s,), self.lr, self.steps_per_stage))
            for f in self.lr_decay:
                out.append(Stage(tuple(range(s + 1)), self.lr * f, self.steps_per_stage))
        return out


@dataclass
class Dataset:
    X: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or self.B.ndim != 2 or self.X.shape[0] != self.B.shape[0]:
            raise ArgumentError("X and B must be 2-D with matching row counts")

    def __len__(self):
        return self.X.shape[0]


def sample_dataset(A, size, p=0.1, seed=0, index=0, snr_db=None):
    """``size`` Bernoulli(p)-Gaussian signals and their measurements."""
    A = as_matrix(A)
    rng = stream(seed, "data", index)
    N = A.shape[1]
    X = np.where(rng.random((size, N)) < p, rng.standard_normal((size, N)), 0.0)
    B = X @ A.T
    if snr_db is not None:
        B = np.stack([add_noise(b, snr_db, seed * 1_000_003 + index * 10_007 + i) if np.any(b) else b
                      for i, b in enumerate(B)])
    return Dataset(X, B)


def mse_loss(tape: Tape, x_K, x_star):
    """``||x^K - x*||^2`` averaged over the batch."""
    x_star = np.asarray(x_star, dtype=np.float64)
    shape = tape.value(x_K).shape
    if shape != x_star.shape:
        raise ArgumentError(f"shape mismatch: x_K {shape}, x_star {x_star.shape}")
    batch = shape[0] if len(shape) == 2 else 1
    return tape.scale(tape.sum_sq(tape.sub(x_K, tape.const(x_star))), 1.0 / batch)


def nmse_db_batch(X_hat, X):
    """``10 log10(sum ||x - x*||^2 / sum ||x*||^2)`` over a batch."""
    num = float(np.sum((X_hat - X) ** 2))
    den = float(np.sum(X**2))
    if den == 0:
        raise ArgumentError("reference signals are all zero")
    return -math.inf if num == 0 else 10.0 * math.log10(num / den)


def predict(model: UnrolledModel, B, chunk=256):
    """``x^K`` for each row of ``B`` through the taped forward pass."""
    out = []
    for i in range(0, B.shape[0], chunk):
        tape = Tape()
        out.append(tape.value(model.forward(tape, B[i:i + chunk])))
    return np.vstack(out)


def evaluate(model, data: Dataset):
    return nmse_db_batch(predict(model, data.B), data.X)


def _reset_moments(store):
    for _, p in store.items():
        p.m = np.zeros_like(p.raw)
        p.v = np.zeros_like(p.raw)
        p.step = 0


def _active_names(model, layers):
    layers = set(layers)
    return [name for name, p in model.store.items()
            if p.trainable and (p.layer is None or p.layer in layers)]


@dataclass
class TrainResult:
    store: object
    log: list = field(default_factory=list)
    initial_val_nmse_db: float = math.nan
    final_val_nmse_db: float = math.nan


def stagewise_train(model: UnrolledModel, train: Dataset, val: Dataset, cfg: TrainConfig,
                    progress=None) -> TrainResult:
    """Run the stage schedule in order; returns the trained store and the log rows."""
    if cfg.K != model.K:
        raise ArgumentError(f"config K={cfg.K} does not match model K={model.K}")
    rng = stream(cfg.seed, "data", 1_000_000)
    result = TrainResult(model.store, initial_val_nmse_db=evaluate(model, val))
    n = len(train)
    bs = min(cfg.batch_size, n)
    order, pos = rng.permutation(n), 0
    for si, stage in enumerate(cfg.schedule()):
        names = _active_names(model, stage.layers)
        _reset_moments(model.store)
        loss_val = math.nan
        for k in range(stage.steps):
            if pos + bs > n:
                order, pos = rng.permutation(n), 0
            idx = order[pos:pos + bs]
            pos += bs
            tape = Tape()
            xk = model.forward(tape, train.B[idx])
            loss = mse_loss(tape, xk, train.X[idx])
            loss_val = float(tape.value(loss))
            if not math.isfinite(loss_val):
                raise TrainingError(f"non-finite training loss in stage {si}", stage=si)
            grads = tape.backward(loss)
            adam_step(model.store, {g: grads[g] for g in names if g in grads}, stage.lr, names=names)
            try:
                model.check_constraints()
            except NumericError as exc:
                raise TrainingError(f"stage {si}: {exc}", stage=si) from None
            if cfg.log_every and (k + 1) % cfg.log_every == 0 and k + 1 < stage.steps:
                result.log.append((si, k + 1, loss_val, None, stage.lr))
        val_db = evaluate(model, val)
        if not math.isfinite(val_db) and val_db != -math.inf:
            raise TrainingError(f"non-finite validation NMSE in stage {si}", stage=si)
        result.log.append((si, stage.steps, loss_val, val_db, stage.lr))
        if progress is not None:
            progress(si, stage, loss_val, val_db)
    result.final_val_nmse_db = evaluate(model, val)
    return result


__all__ = ["LOG_COLUMNS", "Dataset", "Stage", "TrainConfig", "TrainResult", "evaluate", "mse_loss",
           "nmse_db_batch", "predict", "sample_dataset", "stagewise_train"]
