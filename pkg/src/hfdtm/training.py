"""Mini-batch training with Adam, plateau LR scheduling and early stopping."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autograd import Tape, Tensor
from .dataio import DEFAULT_WINDOW, PreparedData, invert_normalization
from .metrics import mae
from .model import Model, ModelDims
from .objective import ABLATIONS, LossWeights, active_mse, total_loss

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    min_lr: float = 1e-5
    lambda_corr: float = 0.5
    lambda_cons: float = 0.1
    window: int = DEFAULT_WINDOW
    seed: int = 0
    ablation: str = "none"
    hidden: int = 64
    embed: int = 64
    mlp_hidden: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1 or self.scheduler_patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must lie in (0, 1)")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        LossWeights(self.lambda_corr, self.lambda_cons)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_corr, self.lambda_cons).ablated(self.ablation)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown TrainConfig fields: {sorted(extra)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# -- optimizer ------------------------------------------------------------


def adam_update(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                lr: float, wd: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One Adam step with decoupled weight decay; returns ``(theta, m, v)``."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    theta = theta - lr * wd * theta
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        self.t += 1
        for k, p in enumerate(self.params):
            p.data, self.m[k], self.v[k] = adam_update(
                p.data, p.grad, self.m[k], self.v[k], self.t, self.lr, self.weight_decay,
                self.betas[0], self.betas[1], self.eps,
            )


class ReduceLROnPlateau:
    """Multiply the LR by ``factor`` after ``patience`` epochs without a new minimum."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 5, min_lr: float = 1e-5):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> None:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.bad_epochs = 0


class EarlyStopping:
    """Track the best epoch (1-based) and signal a stop after ``patience`` stale epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, metric: float) -> bool:
        """Record ``metric``; return True when it is a new best."""
        if metric < self.best:
            self.best, self.best_epoch, self.stale = metric, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


# -- training loop --------------------------------------------------------


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)  # cumulative wall clock
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.val_mae)

    @property
    def train_seconds(self) -> float:
        return self.seconds[-1] if self.seconds else 0.0

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        if not timings:
            d.pop("seconds")
        return d


def model_kind_for(kind: str, ablation: str) -> str:
    if kind == "hfdtm" and ablation == "no_hierarchy":
        return "flat_hfdtm"
    if kind in ("gru", "lstm") and ablation != "none":
        raise ValueError("ablation flags apply to the HFD-TM model only")
    return kind


def build_model(kind: str, data: PreparedData, config: TrainConfig) -> Model:
    dims = ModelDims.for_topology(data.topology, hidden=config.hidden, embed=config.embed,
                                  mlp_hidden=config.mlp_hidden)
    return Model(model_kind_for(kind, config.ablation), dims, data.topology, seed=config.seed)


def batch_loss(model: Model, tape: Tape, X: np.ndarray, y: np.ndarray, h: np.ndarray,
               weights: LossWeights) -> Tensor:
    out = model.forward(tape, X, h)
    if model.kind in ("hfdtm", "flat_hfdtm"):
        return total_loss(tape, out.y_hat, y, model.topology, weights)
    # flat baselines are plain sequence regressors
    return active_mse(tape, out.y_hat, y, model.topology.active_idx)


def validation_mae(model: Model, data: PreparedData, split: str = "val") -> float:
    ws = getattr(data, split)
    X, y, h = ws.all()
    pred = invert_normalization(model.predict(X, h), data.norm)
    true = invert_normalization(y, data.norm)
    a = data.topology.active_idx
    return mae(pred[:, a], true[:, a])


def train(kind: str, data: PreparedData, config: TrainConfig = TrainConfig(),
          on_epoch=None) -> tuple[Model, TrainHistory]:
    """Train ``kind`` ("hfdtm", "gru" or "lstm"); return the best-validation model.

    ``on_epoch(epoch, history)`` is called after each epoch if given.
    """
    if len(data.train) == 0 or len(data.val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if data.train.window != config.window:
        raise ValueError(f"data windowed with T={data.train.window}, config says T={config.window}")
    model = build_model(kind, data, config)
    params = model.parameters()
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    sched = ReduceLROnPlateau(opt, config.scheduler_factor, config.scheduler_patience, config.min_lr)
    stopper = EarlyStopping(config.patience)
    weights = config.weights
    shuffle_rng = np.random.default_rng([config.seed, 1])
    history = TrainHistory()
    best = model.snapshot()
    n = len(data.train)
    start = time.perf_counter()

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for b, s in enumerate(range(0, n, config.batch_size)):
            X, y, h = data.train.batch(order[s : s + config.batch_size])
            opt.zero_grad()
            tape = Tape()
            loss = batch_loss(model, tape, X, y, h, weights)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(loss)
            opt.step()
            total += value * X.shape[0]
            seen += X.shape[0]

        val = validation_mae(model, data)
        history.train_loss.append(total / seen)
        history.val_mae.append(val)
        history.lr.append(opt.lr)
        history.seconds.append(time.perf_counter() - start)
        if stopper.update(epoch, val):
            best = model.snapshot()
        history.best_epoch = stopper.best_epoch
        log.debug("%s epoch %d loss %.6f val_mae %.4f lr %.2e", model.kind, epoch, total / seen, val, opt.lr)
        if on_epoch is not None:
            on_epoch(epoch, history)
        sched.step(val)
        if stopper.should_stop:
            break

    model.load_snapshot(best)
    return model, history


def run_ablation_arm(flag: str, data: PreparedData, config: TrainConfig = TrainConfig()):
    if flag not in ABLATIONS:
        raise ValueError(f"unknown ablation flag {flag!r}")
    return train("hfdtm", data, config.replace(ablation=flag))
