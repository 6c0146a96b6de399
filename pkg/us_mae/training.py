"""
Pre-training and fine-tuning loops.

AdamW with decoupled weight decay, a linear-warmup cosine schedule and
global-norm gradient clipping. All randomness (epoch shuffles, masks,
dropout, initialization) comes from `derive_rng` substreams keyed by the
run seed, so a run is bitwise reproducible.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import diffcore as dc
from .config import (
    STREAM_DROPOUT,
    STREAM_MASK,
    STREAM_SHUFFLE,
    STREAM_SUBSAMPLE,
    STREAM_VAL_MASK,
    derive_rng,
)
from .diffcore import ParamSet
from .errors import CompatibilityError, NonFiniteError, UsageError
from .formats import OPTIM_FIRST, OPTIM_SECOND, Checkpoint
from .metrics import EvalReport, evaluate, write_rows_csv
from .model import (
    ModelConfig,
    add_classifier,
    check_compatible,
    classify_logits,
    init_params,
    pretrain_forward,
)
from .patching import MaskBatch, sample_mask
from .signal_synth import SAMPLE_RATE, dequantize_8bit

logger = logging.getLogger(__name__)

MODES = ("pretrain", "finetune", "scratch")

PRETRAIN_LR = 1e-3
PRETRAIN_WARMUP = 0.15
FINETUNE_LR = 0.05
FINETUNE_WARMUP = 0.10

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-4
CLIP_NORM = 1.0

# Reconstruction error in 8-bit code units: one code step spans 2/255
CODE_UNITS = 255.0 / 2.0

LOG_HEADER = ("epoch", "split", "metric", "value")


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_fraction: float
    total_steps: int

    @property
    def warmup_steps(self) -> int:
        return int(math.floor(self.warmup_fraction * self.total_steps))

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise UsageError(f"Base learning rate must be > 0, got {self.base_lr}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise UsageError(f"Warmup fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.total_steps < 1:
            raise UsageError(f"Total steps must be >= 1, got {self.total_steps}")


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear ramp 0 -> base_lr over the warmup steps, then cosine decay to 0."""
    if not 0 <= step <= schedule.total_steps:
        raise UsageError(f"Step {step} outside 0-{schedule.total_steps}")
    warmup = schedule.warmup_steps
    if step < warmup:
        return schedule.base_lr * step / warmup
    progress = (step - warmup) / (schedule.total_steps - warmup)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    """AdamW moments per parameter name plus the step counter."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS
    weight_decay: float = WEIGHT_DECAY

    @classmethod
    def fresh(cls, params: ParamSet, **hyper) -> "OptimState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
            **hyper,
        )

    def hyperparameters(self) -> Dict:
        return {
            "step": self.step, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "weight_decay": self.weight_decay,
        }


def global_grad_norm(params: ParamSet) -> float:
    return math.sqrt(sum(float(np.sum(np.square(t.grad, dtype=np.float64))) for _, t in params.items()))


def clip_grad_norm(params: ParamSet, max_norm: float = CLIP_NORM) -> float:
    """Rescale all gradients so their global L2 norm is at most `max_norm`."""
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NonFiniteError(f"Gradient norm is {norm}")
    if norm > max_norm:
        factor = np.float32(max_norm / norm)
        for _, tensor in params.items():
            tensor.grad *= factor
    return norm


def adamw_step(params: ParamSet, state: OptimState, lr: float) -> None:
    """
    One bias-corrected AdamW update in place:
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    for name, tensor in params.items():
        if tensor.grad is None or tensor.grad.shape != tensor.shape:
            raise UsageError(f"Parameter {name!r} has no gradient of shape {tensor.shape}")
        if name not in state.m or state.m[name].shape != tensor.shape:
            raise UsageError(f"Optimizer state does not cover parameter {name!r}")
        if not np.isfinite(tensor.grad).all():
            bad = int(np.count_nonzero(~np.isfinite(tensor.grad)))
            raise NonFiniteError(f"Gradient of {name!r} has {bad} non-finite entries")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.items():
        grad = tensor.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * tensor.data
        tensor.data -= lr * update


@dataclass
class TrainConfig:
    """Loop settings. `base_lr` / `warmup_fraction` default per mode when None."""
    epochs: int = 200
    batch_size: int = 1024
    seed: int = 0
    mode: str = "pretrain"
    base_lr: Optional[float] = None
    warmup_fraction: Optional[float] = None
    weight_decay: float = WEIGHT_DECAY
    clip_norm: float = CLIP_NORM
    k: int = 5
    limit: Optional[int] = None
    sample_rate: float = SAMPLE_RATE

    def validate(self) -> None:
        if self.mode not in MODES:
            raise UsageError(f"Unknown training mode {self.mode!r}; choose from {MODES}")
        if self.epochs < 1:
            raise UsageError(f"Epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"Batch size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise UsageError(f"Seed must be non-negative, got {self.seed}")
        if self.limit is not None and self.limit < 1:
            raise UsageError(f"Limit must be >= 1, got {self.limit}")

    def schedule(self, total_steps: int) -> Schedule:
        pretraining = self.mode == "pretrain"
        schedule = Schedule(
            base_lr=self.base_lr if self.base_lr is not None else (
                PRETRAIN_LR if pretraining else FINETUNE_LR
            ),
            warmup_fraction=self.warmup_fraction if self.warmup_fraction is not None else (
                PRETRAIN_WARMUP if pretraining else FINETUNE_WARMUP
            ),
            total_steps=total_steps,
        )
        schedule.validate()
        return schedule

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainResult:
    """Final and best-validation parameters with the metric log."""
    params: ParamSet
    best_params: ParamSet
    state: OptimState
    best_epoch: int
    log: List[Tuple[int, str, str, float]] = field(default_factory=list)
    report: Optional[EvalReport] = None
    best_report: Optional[EvalReport] = None

    def history(self, split: str, metric: str) -> List[float]:
        return [value for _, s, m, value in self.log if s == split and m == metric]


def write_log_csv(path: str, log: List[Tuple[int, str, str, float]]) -> None:
    write_rows_csv(path, LOG_HEADER, log)


def _check_signals(signals: np.ndarray, config: ModelConfig, what: str) -> np.ndarray:
    signals = np.asarray(signals)
    if signals.ndim != 2 or signals.shape[1] != config.signal_length:
        raise UsageError(
            f"{what} signals have shape {signals.shape}, model expects length {config.signal_length}"
        )
    if signals.shape[0] == 0:
        raise UsageError(f"{what} set is empty")
    return dequantize_8bit(signals) if signals.dtype == np.uint8 else signals.astype(np.float32)


def _batches(count: int, batch_size: int, order: np.ndarray):
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def _mask_batch(config: ModelConfig, keys) -> MaskBatch:
    return MaskBatch.from_plans(
        [sample_mask(config.patch_count, config.mask_ratio, derive_rng(*key)) for key in keys]
    )


# ==================== Pre-training ====================

def reconstruction_loss(
    params: ParamSet,
    config: ModelConfig,
    signals: np.ndarray,
    seed: int,
    batch_size: int,
) -> float:
    """Example-weighted mean masked L1 with fixed per-index validation masks."""
    total = 0.0
    for batch in _batches(len(signals), batch_size, np.arange(len(signals))):
        plan = _mask_batch(config, [(seed, STREAM_VAL_MASK, int(i)) for i in batch])
        loss, _ = pretrain_forward(params, config, signals[batch], plan, training=False)
        total += loss.item() * len(batch)
    return total / len(signals)


def pretrain(
    train_signals: np.ndarray,
    val_signals: Optional[np.ndarray],
    config: ModelConfig,
    train_config: TrainConfig,
    params: Optional[ParamSet] = None,
    state: Optional[OptimState] = None,
) -> TrainResult:
    """
    Masked-reconstruction pre-training of encoder and decoder.

    Masks are redrawn per (epoch, example); validation masks stay fixed per
    example so validation losses compare across epochs. The best parameters
    are those with the lowest validation loss (training loss without a
    validation set).
    """
    config.validate()
    train_config.validate()
    train = _check_signals(train_signals, config, "Training")
    val = _check_signals(val_signals, config, "Validation") if val_signals is not None else None

    seed = train_config.seed
    params = params if params is not None else init_params(config, seed, decoder=True)
    check_compatible(params, config, decoder=True)
    state = state if state is not None else OptimState.fresh(
        params, weight_decay=train_config.weight_decay
    )
    steps_per_epoch = math.ceil(len(train) / train_config.batch_size)
    schedule = train_config.schedule(steps_per_epoch * train_config.epochs)

    log = []
    best_value, best_epoch, best_params = math.inf, -1, params.copy()
    step = 0
    for epoch in range(train_config.epochs):
        order = derive_rng(seed, STREAM_SHUFFLE, epoch).permutation(len(train))
        weighted = 0.0
        for batch in _batches(len(train), train_config.batch_size, order):
            plan = _mask_batch(config, [(seed, STREAM_MASK, epoch, int(i)) for i in batch])
            dropout_rng = derive_rng(seed, STREAM_DROPOUT, step)
            params.zero_grad()
            loss, _ = pretrain_forward(params, config, train[batch], plan, dropout_rng, training=True)
            loss.backward()
            clip_grad_norm(params, train_config.clip_norm)
            adamw_step(params, state, lr_at(step, schedule))
            step += 1
            weighted += loss.item() * len(batch)
            logger.debug("epoch %d step %d loss %.6f", epoch, step, loss.item())

        train_loss = weighted / len(train)
        log.append((epoch, "train", "loss", train_loss))
        monitored = train_loss
        if val is not None:
            monitored = reconstruction_loss(params, config, val, seed, train_config.batch_size)
            log.append((epoch, "val", "loss", monitored))
        logger.info(
            "Epoch %d/%d: train loss %.5f (%.2f codes), monitored %.5f (%.2f codes)",
            epoch + 1, train_config.epochs, train_loss, train_loss * CODE_UNITS,
            monitored, monitored * CODE_UNITS,
        )
        if monitored < best_value:
            best_value, best_epoch, best_params = monitored, epoch, params.copy()

    return TrainResult(
        params=params, best_params=best_params, state=state, best_epoch=best_epoch, log=log
    )


# ==================== Fine-tuning ====================

def infer_logits(
    params: ParamSet, config: ModelConfig, signals: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Classification logits for every signal, dropout off."""
    signals = _check_signals(signals, config, "Evaluation")
    parts = [
        classify_logits(params, config, signals[batch], training=False).data
        for batch in _batches(len(signals), batch_size, np.arange(len(signals)))
    ]
    return np.concatenate(parts, axis=0)


def limit_examples(count: int, limit: Optional[int], seed: int) -> np.ndarray:
    """Sorted indices of a seeded subsample of at most `limit` examples."""
    if limit is None or limit >= count:
        return np.arange(count)
    rng = derive_rng(seed, STREAM_SUBSAMPLE)
    return np.sort(rng.choice(count, size=limit, replace=False))


def finetune(
    train_signals: np.ndarray,
    train_labels: np.ndarray,
    val_signals: Optional[np.ndarray],
    val_labels: Optional[np.ndarray],
    config: ModelConfig,
    train_config: TrainConfig,
    encoder: Optional[ParamSet] = None,
) -> TrainResult:
    """
    Supervised time-of-flight classification on the full signal.

    `encoder` holds pre-trained weights (any decoder entries are dropped); a
    fresh classification head is added and every weight is trained. Without
    `encoder`, or in scratch mode, the encoder starts from random weights.
    The best parameters are those with the highest validation top-1.
    """
    config.validate()
    train_config.validate()
    if train_labels is None:
        raise UsageError("Fine-tuning needs labeled training data")
    seed = train_config.seed
    keep = limit_examples(len(train_signals), train_config.limit, seed)
    train = _check_signals(np.asarray(train_signals)[keep], config, "Training")
    labels = np.asarray(train_labels, dtype=np.int64)[keep]
    if labels.shape != (len(train),):
        raise UsageError(f"{labels.shape} labels for {len(train)} training signals")
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise UsageError(f"Labels must lie in 0-{config.num_classes - 1}")
    val = None
    if val_signals is not None:
        if val_labels is None:
            raise UsageError("Validation data for fine-tuning must be labeled")
        val = np.asarray(val_signals)

    if train_config.mode == "scratch" and encoder is not None:
        logger.warning("Scratch mode ignores the supplied encoder weights")
        encoder = None
    if encoder is not None:
        params = add_classifier(encoder, config, seed)
    else:
        params = init_params(config, seed, decoder=False, classifier=True)
    state = OptimState.fresh(params, weight_decay=train_config.weight_decay)

    steps_per_epoch = math.ceil(len(train) / train_config.batch_size)
    schedule = train_config.schedule(steps_per_epoch * train_config.epochs)

    log = []
    best_value, best_epoch, best_params, best_report = -math.inf, -1, params.copy(), None
    report = None
    step = 0
    for epoch in range(train_config.epochs):
        order = derive_rng(seed, STREAM_SHUFFLE, epoch).permutation(len(train))
        weighted = 0.0
        for batch in _batches(len(train), train_config.batch_size, order):
            dropout_rng = derive_rng(seed, STREAM_DROPOUT, step)
            params.zero_grad()
            logits = classify_logits(params, config, train[batch], dropout_rng, training=True)
            loss = dc.cross_entropy(logits, labels[batch])
            loss.backward()
            clip_grad_norm(params, train_config.clip_norm)
            adamw_step(params, state, lr_at(step, schedule))
            step += 1
            weighted += loss.item() * len(batch)

        train_loss = weighted / len(train)
        log.append((epoch, "train", "loss", train_loss))
        monitored = -train_loss
        if val is not None:
            report = evaluate(
                infer_logits(params, config, val, train_config.batch_size),
                val_labels,
                k=train_config.k,
                sample_rate=train_config.sample_rate,
            )
            log.extend([
                (epoch, "val", "loss", report.loss),
                (epoch, "val", "top1", report.top1),
                (epoch, "val", f"top{report.k}", report.topk),
                (epoch, "val", "tof_mae_ns", report.tof_mae_ns),
            ])
            monitored = report.top1
            logger.info(
                "Epoch %d/%d: train loss %.4f, val top-1 %.2f%%, top-%d %.2f%%, ToF MAE %.1f ns",
                epoch + 1, train_config.epochs, train_loss, report.top1 * 100,
                report.k, report.topk * 100, report.tof_mae_ns,
            )
        else:
            logger.info("Epoch %d/%d: train loss %.4f", epoch + 1, train_config.epochs, train_loss)
        if monitored > best_value:
            best_value, best_epoch, best_params, best_report = monitored, epoch, params.copy(), report

    return TrainResult(
        params=params,
        best_params=best_params,
        state=state,
        best_epoch=best_epoch,
        log=log,
        report=report,
        best_report=best_report,
    )


# ==================== Checkpoints ====================

def to_checkpoint(
    params: ParamSet,
    config: ModelConfig,
    train_config: Optional[TrainConfig] = None,
    epoch: Optional[int] = None,
    metrics: Optional[Dict] = None,
    state: Optional[OptimState] = None,
    kind: str = "pretrain",
) -> Checkpoint:
    """Pack parameters (and optionally optimizer moments) with provenance metadata."""
    tensors = {name: tensor.data for name, tensor in params.items()}
    metadata = {
        "kind": kind,
        "model": config.to_dict(),
        "train": train_config.to_dict() if train_config else None,
        "seed": train_config.seed if train_config else None,
        "epoch": epoch,
        "metrics": metrics or {},
    }
    if state is not None:
        metadata["optim"] = state.hyperparameters()
        tensors.update({OPTIM_FIRST + name: m for name, m in state.m.items()})
        tensors.update({OPTIM_SECOND + name: v for name, v in state.v.items()})
    return Checkpoint(tensors=tensors, metadata=metadata)


def params_from_checkpoint(checkpoint: Checkpoint) -> ParamSet:
    return ParamSet(checkpoint.model_tensors())


def config_from_checkpoint(checkpoint: Checkpoint) -> ModelConfig:
    model = checkpoint.metadata.get("model")
    if not isinstance(model, dict):
        raise CompatibilityError("Checkpoint metadata lacks a model configuration")
    try:
        return ModelConfig.from_dict(model)
    except TypeError as e:
        raise CompatibilityError(f"Checkpoint model configuration is incomplete: {e}") from e


def state_from_checkpoint(checkpoint: Checkpoint) -> Optional[OptimState]:
    moments = checkpoint.optimizer_moments()
    hyper = checkpoint.metadata.get("optim")
    if moments is None or hyper is None:
        return None
    return OptimState(
        m={k: v.copy() for k, v in moments["m"].items()},
        v={k: v.copy() for k, v in moments["v"].items()},
        **hyper,
    )
