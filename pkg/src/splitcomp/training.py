"""Training regimes for split models.

Three regimes are provided: feature-mimic pretraining against a teacher's
boundary features with a rate penalty, the two-stage variant that follows it
with knowledge distillation while the encoder and prior stay frozen, and
single-phase end-to-end rate-distortion training. Post-training 8-bit
bottleneck quantization is a model transform, not a regime of its own.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import entropy as E
from . import layers as Ly
from . import tensor as T
from .layers import ConfigError
from .nets import NumericError, ReferenceModel, SplitModel
from .tensor import ShapeError, Tensor

LN2 = math.log(2.0)

REGIMES = ("ghnd", "two-stage", "end-to-end", "crbq")


@dataclass
class TrainConfig:
    regime: str = "two-stage"
    beta: float = 0.0
    alpha: float = 0.5
    tau: float = 1.0
    epochs: int = 10
    epochs_stage2: int = 5
    lr: float = 1e-3
    lr_stage2: float = 1e-2
    batch_size: int = 32
    schedule: str = "poly"  # "poly" or "constant"
    optimizer: str = "adam"  # stage-1 / single-phase choice
    optimizer_stage2: str = "sgd"
    seed: int = 0
    log_path: str | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.epochs < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule not in ("poly", "constant"):
            raise ConfigError(f"schedule must be poly or constant, got {self.schedule!r}")


@dataclass
class TeacherHandle:
    """A frozen trained reference model and the boundary it is read at."""

    model: ReferenceModel
    boundary: str


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self._vel = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for (_, p), v in zip(self.params, self._vel):
            if p.grad is None:
                continue
            v *= self.momentum
            v -= lr * p.grad
            p.data += v


class Adam(Optimizer):
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]
        self._t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self._t += 1
        bc1 = 1.0 - self.beta1 ** self._t
        bc2 = 1.0 - self.beta2 ** self._t
        for (_, p), m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(name: str, params, lr: float) -> Optimizer:
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ConfigError(f"unknown optimizer {name!r}")


# distribution parameters (prior location/scale) must chase the latent
# statistics, which sit several units away from their zero init; with
# moment-normalized steps they need a longer stride than the transforms
PRIOR_LR_MULT = 20.0


class _GroupedOptimizer:
    """Two optimizers behind one interface: distribution parameters step at a
    multiple of the learning rate used by everything else."""

    def __init__(self, name: str, main, dist, lr: float):
        self.main = make_optimizer(name, main, lr)
        self.dist = make_optimizer(name, dist, lr * PRIOR_LR_MULT)

    def zero_grad(self) -> None:
        self.main.zero_grad()
        self.dist.zero_grad()

    def step(self, lr: float | None = None) -> None:
        self.main.step(lr)
        self.dist.step(None if lr is None else lr * PRIOR_LR_MULT)


def _split_optimizer(name: str, params, lr: float) -> _GroupedOptimizer:
    dist = [(n, p) for n, p in params if n.endswith(("prior.mu", "prior.s"))]
    main = [(n, p) for n, p in params if not n.endswith(("prior.mu", "prior.s"))]
    return _GroupedOptimizer(name, main, dist, lr)


def poly_lr(lr0: float, n_iter: int, n_max: int) -> float:
    """Polynomial decay: lr0 * (1 - n/n_max)^0.9."""
    if n_max <= 0:
        raise ConfigError("n_max must be > 0")
    if not 0 <= n_iter <= n_max:
        raise ConfigError(f"n_iter {n_iter} outside [0, {n_max}]")
    return lr0 * (1.0 - n_iter / n_max) ** 0.9


# ---------------------------------------------------------------------------
# losses


def soften(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over the last axis, computed with max-subtraction."""
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    x = np.asarray(logits, dtype=np.float64) / tau
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _as_constant(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def ghnd_loss(student_feats: list[Tensor], teacher_feats, rate_bits: Tensor | None,
              beta: float) -> Tensor:
    """Sum of squared feature errors plus beta times the rate in nats."""
    if len(student_feats) != len(teacher_feats):
        raise ShapeError("student and teacher feature lists differ in length")
    total: Tensor | None = None
    for s, t in zip(student_feats, teacher_feats):
        tdata = _as_constant(t)
        if s.shape != tdata.shape:
            raise ShapeError(f"feature pair shape mismatch: {s.shape} vs {tdata.shape}")
        d = T.add_constant(s, -tdata)
        sse = T.sum_all(T.mul(d, d))
        total = sse if total is None else T.add(total, sse)
    if beta != 0.0 and rate_bits is not None:
        total = T.add(total, T.scale(rate_bits, beta * LN2))
    return total


def kd_loss(student_logits: Tensor, teacher_logits, y: np.ndarray, alpha: float,
            tau: float) -> Tensor:
    """alpha * CE + (1-alpha) * tau^2 * KL(soft teacher || soft student).

    The cross-entropy term uses temperature-1 student probabilities; only the
    distillation term is softened.
    """
    t_probs = soften(_as_constant(teacher_logits), tau)
    if t_probs.shape != student_logits.shape:
        raise ShapeError(f"logit shape mismatch: {student_logits.shape} vs {t_probs.shape}")
    n = student_logits.shape[0]
    ce = T.cross_entropy(student_logits, y)
    log_s = T.log_softmax(T.scale(student_logits, 1.0 / tau))
    # KL = sum t*log t - sum t*log s; the first term is a constant
    t_entropy = float(np.sum(t_probs * np.log(np.maximum(t_probs, 1e-300))))
    cross = T.sum_all(T.mul_constant(log_s, t_probs))
    kl_mean = T.scale(T.add_constant(T.scale(cross, -1.0), np.array(t_entropy)), 1.0 / n)
    return T.add(T.scale(ce, alpha), T.scale(kl_mean, (1.0 - alpha) * tau * tau))


def end_to_end_loss(logits: Tensor, y: np.ndarray, z_noisy: Tensor, prior,
                    beta: float, rate_bits: Tensor | None = None) -> Tensor:
    """Cross-entropy plus beta times the per-sample rate in nats."""
    if rate_bits is None:
        rate_bits = prior.rate_bits(z_noisy)
    ce = T.cross_entropy(logits, y)
    if beta == 0.0:
        return ce
    n = logits.shape[0]
    return T.add(ce, T.scale(rate_bits, beta * LN2 / n))


# ---------------------------------------------------------------------------
# loops


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


class MetricsLog:
    """CSV metrics writer with columns (epoch, split, loss, rate_bits_mean, accuracy)."""

    def __init__(self, path: str | None):
        self.path = path
        self._rows = [("epoch", "split", "loss", "rate_bits_mean", "accuracy")]

    def log(self, epoch: int, split: str, loss: float, rate_bits_mean: float,
            accuracy: float) -> None:
        self._rows.append((epoch, split, f"{loss:.6f}", f"{rate_bits_mean:.4f}",
                           f"{accuracy:.4f}"))
        if self.path is not None:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerows(self._rows)


def params_hash(named: list[tuple[str, Tensor]]) -> bytes:
    return hashlib.md5(T.checkpoint_bytes((n, p.data) for n, p in named)).digest()


def _schedule(cfg: TrainConfig, lr0: float, it: int, n_max: int) -> float:
    if cfg.schedule == "poly":
        return poly_lr(lr0, it, n_max)
    return lr0


def train_reference(model: ReferenceModel, x: np.ndarray, y: np.ndarray,
                    cfg: TrainConfig) -> ReferenceModel:
    """Plain cross-entropy training of a reference classifier (the teacher)."""
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.params(), cfg.lr)
    n_max = max(1, cfg.epochs * math.ceil(len(x) / cfg.batch_size))
    log = MetricsLog(cfg.log_path)
    it = 0
    for epoch in range(cfg.epochs):
        losses, hits, seen = [], 0, 0
        for idx in _batches(len(x), cfg.batch_size, rng):
            logits = model.forward(Tensor(x[idx]))
            loss = T.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(_schedule(cfg, cfg.lr, it, n_max))
            model.project()
            it += 1
            losses.append(loss.item())
            hits += int((logits.data.argmax(axis=1) == y[idx]).sum())
            seen += len(idx)
        log.log(epoch, "train", float(np.mean(losses)), 0.0, hits / seen)
    return model


def train_ghnd(model: SplitModel, teacher: TeacherHandle, x: np.ndarray,
               y: np.ndarray, cfg: TrainConfig, log: MetricsLog | None = None,
               stage_label: str = "train") -> list[float]:
    """Feature-mimic training of encoder+decoder+prior; returns per-epoch losses."""
    if teacher.boundary != model.placement:
        raise ConfigError(f"teacher reads boundary {teacher.boundary!r}, "
                          f"student split at {model.placement!r}")
    bshape = teacher.model.boundary_shape(teacher.boundary)
    restored = Ly.infer_shapes(model.decoder_layers, (1,) + model.latent_shape)[-1]
    if restored[1:] != bshape[1:]:
        raise ShapeError(f"decoder restores {restored}, teacher boundary is {bshape}")
    rng = np.random.default_rng(cfg.seed)
    params = model.encoder_params() + model.decoder_params()
    opt = _split_optimizer(cfg.optimizer, params, cfg.lr)
    n_max = max(1, cfg.epochs * math.ceil(len(x) / cfg.batch_size))
    log = log or MetricsLog(cfg.log_path)
    epoch_losses: list[float] = []
    it = 0
    for epoch in range(cfg.epochs):
        losses, rates = [], []
        for idx in _batches(len(x), cfg.batch_size, rng):
            xb = Tensor(x[idx])
            t_feat = teacher.model.features(xb, teacher.boundary).data
            z = model.latent(xb)
            if model.prior_kind == "hyperprior":
                rt = model.prior.round_trip(z, E.QuantizerMode.TRAIN_NOISE, rng)
                z_q, rate = rt.z_q, model.prior.rate_bits(rt)
            else:
                z_q = E.quantize_train(z, rng)
                rate = model.prior.rate_bits(z_q)
            s_feat = Ly.run_layers(model.decoder_layers, z_q)
            # batch-total rate to match the batch-total squared error
            loss = ghnd_loss([s_feat], [t_feat], rate, cfg.beta)
            if not np.isfinite(loss.item()):
                raise NumericError(f"feature-mimic loss diverged at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step(_schedule(cfg, cfg.lr, it, n_max))
            model.project()
            it += 1
            losses.append(loss.item())
            rates.append(rate.item() / len(idx))
        epoch_losses.append(float(np.mean(losses)))
        log.log(epoch, stage_label, epoch_losses[-1], float(np.mean(rates)), 0.0)
    model.invalidate_tables()
    return epoch_losses


def train_two_stage(model: SplitModel, teacher: TeacherHandle, x: np.ndarray,
                    y: np.ndarray, cfg: TrainConfig) -> SplitModel:
    """Stage 1 mimics teacher boundary features; stage 2 freezes the encoder
    and the prior and distills the teacher's logits into decoder+tail."""
    teacher_before = params_hash(teacher.model.params())
    log = MetricsLog(cfg.log_path)
    stage1_losses = train_ghnd(model, teacher, x, y, cfg, log=log, stage_label="stage1")
    model.stage1_losses = stage1_losses

    # freeze every encoder tensor plus every prior tensor, wherever the
    # partition happens to place them
    prior_ids = {id(p) for _, p in model.prior.params()}
    frozen = model.encoder_params() + [(n, p) for n, p in model.decoder_params()
                                       if id(p) in prior_ids]
    model.frozen = {n for n, _ in frozen}
    frozen_before = params_hash(frozen)

    trainable = [(n, p) for n, p in model.decoder_params() if id(p) not in prior_ids]
    trainable += model.tail_params()
    rng = np.random.default_rng(cfg.seed + 1)
    opt = make_optimizer(cfg.optimizer_stage2, trainable, cfg.lr_stage2)
    n_max = max(1, cfg.epochs_stage2 * math.ceil(len(x) / cfg.batch_size))
    it = 0
    for epoch in range(cfg.epochs_stage2):
        losses, rates, hits, seen = [], [], 0, 0
        for idx in _batches(len(x), cfg.batch_size, rng):
            xb = Tensor(x[idx])
            t_logits = teacher.model.forward(xb).data
            logits, _, rate = model.forward_split(xb, E.QuantizerMode.TRAIN_NOISE, rng)
            loss = kd_loss(logits, t_logits, y[idx], cfg.alpha, cfg.tau)
            if not np.isfinite(loss.item()):
                raise NumericError(f"distillation loss diverged at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step(_schedule(cfg, cfg.lr_stage2, it, n_max))
            for layer in model.decoder_layers + model.tail_layers:
                layer.project()
            it += 1
            losses.append(loss.item())
            rates.append(rate.item() / len(idx))
            hits += int((logits.data.argmax(axis=1) == y[idx]).sum())
            seen += len(idx)
        log.log(epoch, "stage2", float(np.mean(losses)), float(np.mean(rates)),
                hits / seen)
    if params_hash(frozen) != frozen_before:
        raise NumericError("freeze contract violated: encoder or prior changed in stage 2")
    if params_hash(teacher.model.params()) != teacher_before:
        raise NumericError("teacher parameters changed during student training")
    model.invalidate_tables()
    return model


def train_end_to_end(model: SplitModel, x: np.ndarray, y: np.ndarray,
                     cfg: TrainConfig) -> SplitModel:
    """Single-phase optimization of every parameter with CE + beta * rate."""
    rng = np.random.default_rng(cfg.seed)
    opt = _split_optimizer(cfg.optimizer, model.params(), cfg.lr)
    n_max = max(1, cfg.epochs * math.ceil(len(x) / cfg.batch_size))
    log = MetricsLog(cfg.log_path)
    it = 0
    for epoch in range(cfg.epochs):
        losses, rates, hits, seen = [], [], 0, 0
        for idx in _batches(len(x), cfg.batch_size, rng):
            xb = Tensor(x[idx])
            logits, z_q, rate = model.forward_split(xb, E.QuantizerMode.TRAIN_NOISE, rng)
            loss = end_to_end_loss(logits, y[idx], z_q, model.prior, cfg.beta,
                                   rate_bits=rate)
            if not np.isfinite(loss.item()):
                raise NumericError(f"loss diverged at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step(_schedule(cfg, cfg.lr, it, n_max))
            model.project()
            it += 1
            losses.append(loss.item())
            rates.append(rate.item() / len(idx))
            hits += int((logits.data.argmax(axis=1) == y[idx]).sum())
            seen += len(idx)
        log.log(epoch, "train", float(np.mean(losses)), float(np.mean(rates)),
                hits / seen)
    model.invalidate_tables()
    return model


def crbq_quantize(model: SplitModel) -> SplitModel:
    """Switch the trained model's bottleneck to post-training 8-bit affine codes."""
    model.crbq = True
    return model


def train(model: SplitModel, teacher: TeacherHandle | None, x: np.ndarray,
          y: np.ndarray, cfg: TrainConfig) -> SplitModel:
    """Dispatch on cfg.regime."""
    if cfg.regime == "end-to-end":
        return train_end_to_end(model, x, y, cfg)
    if teacher is None:
        raise ConfigError(f"regime {cfg.regime!r} requires a teacher")
    if cfg.regime == "ghnd":
        train_ghnd(model, teacher, x, y, cfg)
        return model
    if cfg.regime == "two-stage":
        return train_two_stage(model, teacher, x, y, cfg)
    if cfg.regime == "crbq":
        return crbq_quantize(train_two_stage(model, teacher, x, y, cfg))
    raise ConfigError(f"unknown regime {cfg.regime!r}")
