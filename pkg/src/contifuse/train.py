"""Training: warmup-cosine AdamW with gradient clipping and sampled decomposition loss."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from contifuse.data import AugmentationPolicy, ImagePair, PairRecord, augment, collate, load_pair
from contifuse.losses import LossWeights, derive_seed, sds_sample, total_loss
from contifuse.model import ConfigError, ContiFuse, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
LOG_FIELDS = [
    "step", "epoch", "lr", "L_decom", "L_int", "L_grad", "L_all",
    "grad_norm", "seconds", "mode", "K", "decay_kind",
]  # fmt: skip


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, breakdown: dict[str, float]):
        self.step = step
        self.breakdown = breakdown
        terms = ", ".join(f"{k}={v!r}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss at step {step}: {terms}")


@dataclass
class TrainConfig:
    batch_size: int = 20
    epochs: int = 250
    lr_start: float = 1e-5
    lr_peak: float = 6e-5
    lr_final: float = 5e-6
    warmup_epochs: int = 50
    clip_max_norm: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    loss_mode: str = "sds"
    decay: str = "gaussian"
    span: str = "corner"
    distance: str = "pearson"
    alpha_int: float = 15.0
    alpha_grad: float = 15.0
    dtype: str = "float32"
    checkpoint_every: int = 10

    def validate(self) -> None:
        errors = []
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.epochs < 0:
            errors.append("epochs must be >= 0")
        if not self.lr_start <= self.lr_peak:
            errors.append("lr_start must not exceed lr_peak")
        if min(self.lr_start, self.lr_peak, self.lr_final) < 0:
            errors.append("learning rates must be non-negative")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            errors.append("warmup_epochs must be smaller than epochs")
        if not self.clip_max_norm > 0:
            errors.append("clip_max_norm must be positive")
        if self.weight_decay < 0:
            errors.append("weight_decay must be non-negative")
        if self.loss_mode not in ("sds", "full", "none"):
            errors.append(f"loss_mode must be sds|full|none, got {self.loss_mode!r}")
        if self.decay not in ("gaussian", "linear"):
            errors.append(f"decay must be gaussian|linear, got {self.decay!r}")
        if self.span not in ("corner", "literal"):
            errors.append(f"span must be corner|literal, got {self.span!r}")
        if self.distance not in ("pearson", "ssim"):
            errors.append(f"distance must be pearson|ssim, got {self.distance!r}")
        if self.alpha_int < 0 or self.alpha_grad < 0:
            errors.append("alpha_int and alpha_grad must be non-negative")
        if self.dtype not in DTYPES:
            errors.append(f"dtype must be one of {sorted(DTYPES)}")
        if self.checkpoint_every < 1:
            errors.append("checkpoint_every must be >= 1")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha_int, self.alpha_grad)

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


def lr_schedule(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear warmup from lr_start to lr_peak, then cosine down to lr_final.

    The cosine ends on the last step of the run (``epochs * steps_per_epoch - 1``)
    and holds lr_final beyond it.
    """
    warmup = config.warmup_epochs * steps_per_epoch
    last = config.epochs * steps_per_epoch - 1
    if step < warmup:
        return config.lr_start + (config.lr_peak - config.lr_start) * step / warmup
    if step >= last:
        return config.lr_final if last > warmup else config.lr_peak
    progress = (step - warmup) / (last - warmup)
    return config.lr_final + 0.5 * (config.lr_peak - config.lr_final) * (1 + math.cos(math.pi * progress))


def make_optimizer(model: ContiFuse, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=config.lr_start, weight_decay=config.weight_decay)


@dataclass
class StepResult:
    breakdown: dict[str, float]
    grad_norm: float
    lr: float


def train_step(
    model: ContiFuse,
    optimizer: torch.optim.Optimizer,
    batch: tuple[torch.Tensor, torch.Tensor],
    config: TrainConfig,
    step: int,
    lr: float,
) -> StepResult:
    ir, vis = batch
    model.train()
    out = model(ir, vis)
    constraint_sets = None
    if config.loss_mode == "sds":
        k = model.config.num_states
        constraint_sets = [
            sds_sample(derive_seed(config.seed, step, l), k) for l in range(len(out.stacks))
        ]
    loss, breakdown = total_loss(
        out.fused, ir, vis, out.stacks,
        weights=config.weights, mode=config.loss_mode, decay=config.decay,
        constraint_sets=constraint_sets, span=config.span, distance=config.distance,
    )  # fmt: skip
    if not all(math.isfinite(v) for v in breakdown.values()):
        raise TrainingDiverged(step, breakdown)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_max_norm)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return StepResult(breakdown, float(grad_norm), lr)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, epoch, 0x5EED)).permutation(n)


def make_batch(
    dataset: Sequence[PairRecord | ImagePair],
    indices: Sequence[int],
    policy: AugmentationPolicy,
    seed: int,
    epoch: int,
    dtype: torch.dtype,
) -> tuple[torch.Tensor, torch.Tensor]:
    pairs = []
    for idx in indices:
        item = dataset[idx]
        pair = load_pair(item) if isinstance(item, PairRecord) else item
        rng = np.random.default_rng(derive_seed(seed, epoch, int(idx)))
        pairs.append(augment(pair, policy, rng))
    ir, vis = collate(pairs, dtype=np.float64)
    return torch.as_tensor(ir, dtype=dtype), torch.as_tensor(vis, dtype=dtype)


@dataclass
class TrainResult:
    checkpoints: list[Path] = field(default_factory=list)
    history: list[dict[str, Any]] = field(default_factory=list)
    model: ContiFuse | None = None


def _checkpoint_extra(config, policy, optimizer, epoch, step):
    return {
        "train_config": asdict(config),
        "augmentation": asdict(policy),
        "optimizer": optimizer.state_dict(),
        "epoch": epoch,
        "step": step,
    }


def _write_log(path: Path, rows: list[dict[str, Any]], append: bool) -> None:
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            writer.writeheader()
        writer.writerows(rows)


def _truncate_log(path: Path, step: int) -> None:
    """Drop rows at or after ``step`` so a resumed run does not duplicate them."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["step"]) < step]
    _write_log(path, rows, append=False)


def train_loop(
    dataset: Sequence[PairRecord | ImagePair],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    policy: AugmentationPolicy | None = None,
    out_dir=None,
    resume=None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train from scratch or resume from a checkpoint.

    All randomness (shuffling, crops, flips, constraint sampling) is derived from
    ``config.seed`` plus the epoch/step index, so a resumed run continues the
    uninterrupted loss curve exactly. ``max_steps`` stops early (for smoke runs)
    without changing the schedule.
    """
    config.validate()
    if not dataset:
        raise ValueError("empty dataset")
    policy = policy or AugmentationPolicy()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dtype = config.torch_dtype

    if resume is not None:
        model, extra = load_checkpoint(resume, dtype=dtype)
        optimizer = make_optimizer(model, config)
        optimizer.load_state_dict(extra["optimizer"])
        start_epoch, step = int(extra["epoch"]), int(extra["step"])
        log.info("resuming from %s at epoch %d, step %d", resume, start_epoch, step)
    else:
        model = ContiFuse(model_config or ModelConfig(), seed=config.seed).to(dtype)
        optimizer = make_optimizer(model, config)
        start_epoch, step = 0, 0

    result = TrainResult()
    log_path = out / "train_log.csv" if out is not None else None
    if log_path is not None:
        if resume is not None:
            _truncate_log(log_path, step)
        else:
            _write_log(log_path, [], append=False)

    def checkpoint(epoch):
        if out is None:
            return
        path = out / f"checkpoint_epoch{epoch:04d}.pt"
        save_checkpoint(path, model, _checkpoint_extra(config, policy, optimizer, epoch, step))
        result.checkpoints.append(path)

    if resume is None:
        checkpoint(0)

    n = len(dataset)
    batch_size = min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / batch_size)
    k = model.config.num_states

    for epoch in range(start_epoch, config.epochs):
        order = epoch_order(config.seed, epoch, n)
        rows = []
        for b in range(steps_per_epoch):
            if max_steps is not None and step >= max_steps:
                break
            t0 = time.perf_counter()
            idx = order[b * batch_size : (b + 1) * batch_size]
            batch = make_batch(dataset, idx, policy, config.seed, epoch, dtype)
            lr = lr_schedule(step, steps_per_epoch, config)
            res = train_step(model, optimizer, batch, config, step, lr)
            row = {
                "step": step, "epoch": epoch, "lr": lr, **res.breakdown,
                "grad_norm": res.grad_norm, "seconds": time.perf_counter() - t0,
                "mode": config.loss_mode, "K": k, "decay_kind": config.decay,
            }  # fmt: skip
            rows.append(row)
            result.history.append(row)
            step += 1
        if log_path is not None:
            _write_log(log_path, rows, append=True)
        if rows:
            log.info("epoch %d step %d L_all %.5f", epoch, step, rows[-1]["L_all"])
        stopping = max_steps is not None and step >= max_steps
        # a partial epoch cannot be resumed exactly, so it is never checkpointed
        if len(rows) == steps_per_epoch and (
            (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs or stopping
        ):
            checkpoint(epoch + 1)
        if stopping:
            break
    result.model = model
    return result
