"""
Training Loop for Deco-Mamba

Key Features:
- AdamW with decoupled weight decay and serializable state
- Cosine annealing with warm restarts, periods counted in epochs and
  resolved to whole optimizer steps
- Trainer: seed-deterministic epochs, per-step loss records, validation
  after every epoch, best/final/periodic checkpoints
- Any non-finite loss or gradient aborts the run with the step index
"""

import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from autodiff import DiffArray, Parameter
from checkpoint_manager import CheckpointKind, CheckpointManager
from config_manager import TrainConfig
from errors import CheckpointError, DatasetError, NumericError
from losses import LossReport, total_loss
from metrics import EvalReport, evaluate
from network import DecoMamba
from run_logging import KeyValueLog, safe_update_log
from synthetic_data import BatchIterator, SegBatch, SegDataset, load_dataset


# =============================================================================
# OPTIMIZER
# =============================================================================

class AdamW:
    """Adam moments with weight decay applied directly to the parameters."""

    def __init__(self, named_params: Sequence[Tuple[str, Parameter]], lr: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params: "OrderedDict[str, Parameter]" = OrderedDict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg: Dict[str, np.ndarray] = {}
        self.exp_avg_sq: Dict[str, np.ndarray] = {}

    def zero_grad(self):
        for param in self.params.values():
            param.grad = None

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for path, param in self.params.items():
            if param.grad is None:
                continue
            grad = param.grad.astype(param.dtype, copy=False)
            m = self.exp_avg.setdefault(path, np.zeros_like(param.data))
            v = self.exp_avg_sq.setdefault(path, np.zeros_like(param.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            if self.weight_decay:
                param.data *= (1.0 - lr * self.weight_decay)
            denom = np.sqrt(v / bias2) + self.eps
            param.data -= (lr * (m / bias1) / denom).astype(param.dtype, copy=False)

    # --- persistence -------------------------------------------------------

    def state_records(self) -> "OrderedDict[str, np.ndarray]":
        records = OrderedDict()
        for path in self.params:
            if path in self.exp_avg:
                records[f"exp_avg.{path}"] = self.exp_avg[path]
                records[f"exp_avg_sq.{path}"] = self.exp_avg_sq[path]
        return records

    def _split_key(self, key: str) -> Tuple[str, str]:
        for prefix in ("exp_avg_sq.", "exp_avg."):
            if key.startswith(prefix):
                return prefix[:-1], key[len(prefix):]
        raise CheckpointError(f"unknown optimizer record {key}")

    def validate_state_records(self, records) -> None:
        for key, record in records.items():
            _, path = self._split_key(key)
            if path not in self.params:
                raise CheckpointError(f"optimizer record {key} has no matching parameter")
            shape = np.shape(record)
            if shape != self.params[path].shape:
                raise CheckpointError(f"optimizer record {key}: shape {shape} vs {self.params[path].shape}")

    def load_state_records(self, step: int, records: "OrderedDict[str, np.ndarray]"):
        self.validate_state_records(records)
        self.step_count = int(step)
        self.exp_avg, self.exp_avg_sq = {}, {}
        for key, values in records.items():
            kind, path = self._split_key(key)
            target = self.exp_avg if kind == "exp_avg" else self.exp_avg_sq
            target[path] = np.array(values, dtype=self.params[path].dtype, copy=True)


# =============================================================================
# SCHEDULE
# =============================================================================

class CosineWarmRestarts:
    """
    lr = min_lr + (base_lr - min_lr) * (1 + cos(pi * t / P)) / 2

    t counts steps since the last restart; P starts at restart_period epochs
    worth of steps and is multiplied by period_mult after every restart.
    """

    def __init__(self, base_lr: float, steps_per_epoch: int, restart_period: float = 2.0,
                 period_mult: float = 2.0, min_lr: float = 0.0):
        if steps_per_epoch < 1:
            raise DatasetError("an epoch must contain at least one step")
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.period_mult = period_mult
        self.first_period = max(int(round(restart_period * steps_per_epoch)), 1)

    def position(self, step: int) -> Tuple[int, int]:
        """(steps into the current period, current period length)."""
        t, period = int(step), self.first_period
        while t >= period:
            t -= period
            period = max(int(round(period * self.period_mult)), 1)
        return t, period

    def lr_at(self, step: int) -> float:
        t, period = self.position(step)
        return self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + math.cos(math.pi * t / period))

    def restart_steps(self, count: int) -> List[int]:
        steps, start, period = [], 0, self.first_period
        for _ in range(count):
            steps.append(start)
            start += period
            period = max(int(round(period * self.period_mult)), 1)
        return steps


# =============================================================================
# TRAINER
# =============================================================================

@dataclass
class FitResult:
    epochs: int
    global_step: int
    final_loss: float
    epoch_losses: List[float] = field(default_factory=list)
    best_dice: Optional[float] = None
    best_epoch: Optional[int] = None
    best_path: Optional[str] = None
    final_path: Optional[str] = None
    last_eval: Optional[EvalReport] = None


class Trainer:
    def __init__(self, config: TrainConfig, train_set: Optional[SegDataset] = None,
                 val_set: Optional[SegDataset] = None, model: Optional[DecoMamba] = None):
        self.config = config.validate()
        if train_set is None:
            train_set = load_dataset(config.data.data_dir, config.data.train_split)
        if val_set is None and config.data.val_split:
            try:
                val_set = load_dataset(config.data.data_dir, config.data.val_split)
            except DatasetError as e:
                safe_update_log(f"[TRAIN] ⚠️ no validation data: {e}")
        if train_set.num_classes != config.model.num_classes:
            raise DatasetError(f"dataset has {train_set.num_classes} classes, model expects "
                               f"{config.model.num_classes}")
        self.train_set = train_set
        self.val_set = val_set
        self.model = model if model is not None else DecoMamba(config.model)
        self.optimizer = AdamW(self.model.block_params().trainable(), lr=config.optimizer.lr,
                               betas=tuple(config.optimizer.betas), eps=config.optimizer.eps,
                               weight_decay=config.optimizer.weight_decay)
        self.steps_per_epoch = len(self._batches(0))
        self.schedule = CosineWarmRestarts(config.optimizer.lr, self.steps_per_epoch,
                                           config.schedule.restart_period, config.schedule.period_mult,
                                           config.schedule.min_lr)
        self.checkpoints = CheckpointManager(config.output.run_dir, config.output.keep_periodic)
        self.log = KeyValueLog(os.path.join(config.output.run_dir, config.output.log_file))
        self.global_step = 0

    def _batches(self, epoch: int) -> BatchIterator:
        # single-sample tail batches would leave batch norm without statistics at 1x1 scales
        drop_last = len(self.train_set) >= self.config.batch_size
        return BatchIterator(self.train_set, self.config.batch_size, seed=self.config.seed, epoch=epoch,
                             shuffle=True, augment=self.config.data.augment,
                             free_rotation=self.config.data.free_rotation, drop_last=drop_last,
                             prefetch=self.config.data.prefetch)

    def train_step(self, batch: SegBatch) -> LossReport:
        lr = self.schedule.lr_at(self.global_step)
        self.model.train()
        self.optimizer.zero_grad()
        try:
            output = self.model(DiffArray(batch.images))
            report = total_loss(output.logits, output.aux_logits, batch.masks, self.config.model)
            report.loss.backward()
        except NumericError as e:
            raise NumericError(e.op_name, e.message, step=self.global_step)
        for path, param in self.optimizer.params.items():
            if param.grad is not None and not np.isfinite(param.grad).all():
                raise NumericError("backward", f"non-finite gradient for {path}", step=self.global_step)
        self.optimizer.step(lr)
        self.global_step += 1
        return report

    def train_epoch(self, epoch: int) -> float:
        losses = []
        batches = self._batches(epoch)
        progress = tqdm(batches, total=len(batches), desc=f"epoch {epoch + 1}/{self.config.epochs}",
                        disable=self.config.quiet, leave=False)
        for batch in progress:
            lr = self.schedule.lr_at(self.global_step)
            report = self.train_step(batch)
            losses.append(report.total)
            self.log.write("step", epoch=epoch + 1, step=self.global_step, lr=lr, **report.to_log_fields())
            progress.set_postfix(loss=f"{report.total:.4f}")
        return float(np.mean(losses))

    def validate(self, epoch: int) -> Optional[EvalReport]:
        if not self.val_set:
            return None
        report = evaluate(self.model, self.val_set, self.config.model, batch_size=self.config.batch_size,
                          split=self.config.data.val_split)
        self.log.write("eval", epoch=epoch + 1, step=self.global_step, **report.to_log_fields())
        return report

    def fit(self) -> FitResult:
        config = self.config
        safe_update_log(f"[TRAIN] {len(self.train_set)} training samples, {self.steps_per_epoch} steps/epoch, "
                        f"{self.model.parameter_count():,} parameters, supervision={config.model.supervision.value}")
        result = FitResult(epochs=config.epochs, global_step=0, final_loss=float("nan"))
        started = time.time()
        for epoch in range(config.epochs):
            mean_loss = self.train_epoch(epoch)
            result.epoch_losses.append(mean_loss)
            report = self.validate(epoch)
            self.log.write("epoch", epoch=epoch + 1, step=self.global_step, mean_loss=mean_loss,
                           lr=self.schedule.lr_at(self.global_step),
                           val_dice=report.mean_dice if report else float("nan"),
                           elapsed=round(time.time() - started, 3))
            message = f"[TRAIN] epoch {epoch + 1}/{config.epochs} loss={mean_loss:.4f}"
            if report is not None:
                message += f" val_dice={report.mean_dice:.4f} val_hd95={report.mean_hd95:.2f}"
                result.last_eval = report
                if result.best_dice is None or report.mean_dice > result.best_dice:
                    result.best_dice, result.best_epoch = report.mean_dice, epoch + 1
                    result.best_path = self.checkpoints.save(CheckpointKind.BEST, self.model, self.optimizer,
                                                             self.global_step, epoch + 1, report.mean_dice)
            safe_update_log(message)
            if config.output.save_every and (epoch + 1) % config.output.save_every == 0:
                self.checkpoints.save(CheckpointKind.PERIODIC, self.model, self.optimizer,
                                      self.global_step, epoch + 1)

        result.global_step = self.global_step
        result.final_loss = result.epoch_losses[-1]
        result.final_path = self.checkpoints.save(CheckpointKind.FINAL, self.model, self.optimizer,
                                                  self.global_step, config.epochs)
        if result.best_path is None:
            result.best_path = result.final_path
        safe_update_log(f"[TRAIN] ✅ finished {config.epochs} epochs in {time.time() - started:.1f}s "
                        f"(final loss {result.final_loss:.4f})")
        return result
