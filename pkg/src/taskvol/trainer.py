"""Optimization loop: AdamW with linear warmup and decay, mixed-task
batches, periodic validation AUROC, and best-checkpoint selection.

The loop is decoupled from storage through a provider callable:
``provider(instance, rng) -> (volume, token_ids, BatchItemTarget)``.  The
rng passed to the provider is derived from (seed, step, slot), so batch
composition and augmentation are reproducible regardless of how the
provider is implemented.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import NumericFault, SchemaError, SelectionError
from .losses import batch_loss
from .metrics import ScoredSet, auroc
from .neuralcore import save_checkpoint

__all__ = [
    "lr_schedule", "OptimizerState", "adamw_step", "train",
    "select_checkpoint", "TrainResult", "CheckpointRecord",
]


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> base over the warmup steps, then linear decay
    base -> 0 at the final step.  Continuous and piecewise linear."""
    total, warmup, base = config.total_steps, config.warmup_steps, config.base_lr
    if step < 0 or step > total:
        raise SchemaError(f"step {step} outside [0, {total}]")
    if warmup > 0 and step <= warmup:
        return base * step / warmup
    if total == warmup:
        return base
    return base * (total - step) / (total - warmup)


@dataclass
class OptimizerState:
    """AdamW accumulators keyed like the parameter store."""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step_count: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls(
            first={k: np.zeros_like(t.data) for k, t in params.items()},
            second={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def _as_param_dict(params):
    return params.tensors if hasattr(params, "tensors") else params


def adamw_step(params, grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update with bias correction,
    applied in place.  Raises on any non-finite gradient."""
    tensors = _as_param_dict(params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for {name}")
        if g.shape != tensors[name].data.shape:
            raise SchemaError(
                f"gradient shape {g.shape} != parameter {name} "
                f"{tensors[name].data.shape}")
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.first[name]
        v = state.second[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        theta = tensors[name].data
        theta -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


@dataclass(frozen=True)
class CheckpointRecord:
    step: int
    val_auroc_mean: float | None
    state: dict[str, np.ndarray] | None = None
    path: Path | None = None


@dataclass
class TrainResult:
    metric_log: list[dict] = field(default_factory=list)
    checkpoints: list[CheckpointRecord] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)

    @property
    def final_state(self) -> dict[str, np.ndarray]:
        record = self.checkpoints[-1]
        if record.state is not None:
            return record.state
        from .neuralcore import load_checkpoint
        return load_checkpoint(record.path)[0]


def _item_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed,) + path))


def _validate(model, val_mix, provider, seed: int):
    """Mean AUROC over classification tasks; single-class tasks are
    excluded with a warning."""
    scores: dict[str, list[float]] = {}
    labels: dict[str, list[int]] = {}
    for j, inst in enumerate(val_mix):
        if inst.label is None:
            continue  # AUROC is defined over classification tasks only
        rng = _item_rng(seed, 2, j)
        volume, token_ids, _ = provider(inst, rng)
        cls_logit, _ = model.forward(volume, token_ids)
        score = float(1.0 / (1.0 + np.exp(-cls_logit.data)))
        scores.setdefault(inst.task_key, []).append(score)
        labels.setdefault(inst.task_key, []).append(int(inst.label))
    per_task = {}
    for key in sorted(scores):
        y = np.asarray(labels[key])
        if y.min() == y.max():
            warnings.warn(
                f"validation task {key} has a single class; excluded "
                "from the AUROC mean", RuntimeWarning, stacklevel=2)
            continue
        per_task[key] = auroc(ScoredSet(np.asarray(scores[key]), y))
    mean = float(np.mean(list(per_task.values()))) if per_task else None
    return mean, per_task


def train(model, train_mix, provider, config: TrainConfig,
          val_mix=None, out_dir=None) -> TrainResult:
    """Run the optimization loop.

    Per step: sample a batch from the mix (with replacement), fetch each
    item through the provider, run the forward pass, average the per-item
    losses, backpropagate, and apply one AdamW update at the scheduled
    rate.  Every ``val_interval`` steps the validation AUROC mean is
    logged and a checkpoint is recorded; a final checkpoint is always
    recorded at the last step."""
    if config.total_steps > 0 and not train_mix:
        raise SchemaError("training mix is empty")
    store = model.params
    params = store.tensors
    state = OptimizerState.for_params(params)
    result = TrainResult()
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.ndjson", "w", encoding="utf-8")

    def record(step: int, train_loss: float | None) -> None:
        mean, per_task = (None, {})
        if val_mix is not None:
            mean, per_task = _validate(model, val_mix, provider, config.seed)
        entry = {"step": step, "train_loss": train_loss,
                 "val_auroc_mean": mean, "per_task": per_task}
        result.metric_log.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()
        if out_dir is not None:
            path = out_dir / f"ckpt_{step:06d}.bin"
            save_checkpoint(path, store, step=step, val_metric=mean)
            result.checkpoints.append(CheckpointRecord(step, mean, path=path))
        else:
            result.checkpoints.append(
                CheckpointRecord(step, mean, state=store.state_dict()))

    try:
        last_loss = None
        for step in range(1, config.total_steps + 1):
            batch_rng = _item_rng(config.seed, 0, step)
            picks = batch_rng.integers(0, len(train_mix),
                                       size=config.batch_size)
            store.zero_grad()
            outputs, targets = [], []
            for slot, index in enumerate(picks):
                rng = _item_rng(config.seed, 1, step, slot)
                volume, token_ids, target = provider(train_mix[index], rng)
                outputs.append(model.forward(volume, token_ids))
                targets.append(target)
            loss = batch_loss(outputs, targets)
            loss.backward()
            last_loss = float(loss.data)
            result.train_losses.append(last_loss)
            grads = {name: (t.grad if t.grad is not None
                            else np.zeros_like(t.data))
                     for name, t in params.items()}
            if config.grad_clip is not None:
                _clip_gradients(grads, config.grad_clip)
            adamw_step(params, grads, state, lr_schedule(step, config),
                       weight_decay=config.weight_decay)
            if config.val_interval > 0 and step % config.val_interval == 0:
                record(step, last_loss)
        if not result.checkpoints or \
                result.checkpoints[-1].step != config.total_steps:
            record(config.total_steps, last_loss)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result


def select_checkpoint(metric_log) -> int:
    """Index of the record with the best mean validation AUROC; ties go to
    the earliest.  Accepts raw floats or metric-log dicts; records without
    a validation metric are not eligible."""
    values = []
    for entry in metric_log:
        if isinstance(entry, dict):
            values.append(entry.get("val_auroc_mean"))
        else:
            values.append(float(entry))
    eligible = [(i, v) for i, v in enumerate(values) if v is not None]
    if not eligible:
        raise SelectionError("no validation records to select from")
    best_index, best_value = eligible[0]
    for i, v in eligible[1:]:
        if v > best_value:
            best_index, best_value = i, v
    return best_index
