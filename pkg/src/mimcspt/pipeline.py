"""Stage orchestration: pretrain, further-pretrain from a checkpoint, fine-tune.

A stage is one optimization run described by a StageConfig. Pretrain and
continue stages minimize the masked-reconstruction loss on unlabeled images;
fine-tune stages drop the decoder, attach a task head, and train with
cross-entropy (label smoothing + mixup + flip/crop augmentation).

Every stage writes, under its output directory:
    metrics.jsonl   one JSON object per step: step, epoch, stage, lr, loss, wall_ms
    epochs.jsonl    per-epoch summaries (mean loss; test metric when evaluating)
    checkpoint.ckpt parameters, optimizer moments, schedule step, RNG seed,
                    and the provenance chain extended by this stage's id
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import LoadedCorpus, hflip, iter_epoch, load_corpus, random_resized_crop
from .model import (
    VitConfig,
    embed_patches,
    encoder_forward,
    init_params,
    linear,
    patchify,
)
from .optim import AdamW, cosine_lr
from .pretext import masked_autoencode, mim_loss, sample_mask
from .tensor import Rng, ShapeError, Tensor, log_softmax

__all__ = [
    "HeadSpec",
    "StageConfig",
    "run_stage",
    "build_finetune_model",
    "classifier_forward",
    "segmenter_forward",
    "supervised_loss",
    "mixup_batch",
    "materialize_init_checkpoint",
    "params_hash",
    "reference_mode",
    "evaluate_top1",
]

PRETRAIN_BETAS = (0.9, 0.95)
FINETUNE_BETAS = (0.9, 0.999)
FINETUNE_LR = 5e-4
DESK_PRETRAIN_LR = 1e-3

DEFAULT_EPOCHS = {"pretrain": 200, "continue": 200, "finetune": 100}


def reference_mode() -> bool:
    """Single-threaded deterministic mode; zeroes wall-clock fields in metrics."""
    return os.environ.get("MIMCSPT_REFERENCE_MODE", "") == "1"


@dataclass(frozen=True)
class HeadSpec:
    kind: str          # classification | per-patch segmentation
    classes: int

    def __post_init__(self):
        if self.kind not in ("classification", "segmentation"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "classes": self.classes}


@dataclass
class StageConfig:
    """Hyperparameters and corpus references for one pipeline stage."""

    role: str                        # pretrain | continue | finetune
    corpus: list[str] = field(default_factory=list)
    epochs: int | None = None
    batch_size: int = 64
    base_lr: float | None = None
    betas: tuple[float, float] | None = None
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    mask_ratio: float = 0.75
    seed: int = 0
    init_checkpoint: str | None = None
    head: HeadSpec | None = None
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.8
    augment: bool = True
    scale_range: tuple[float, float] = (0.2, 1.0)
    eval_corpus: str | None = None
    carry_schedule: bool = False     # continue role: resume the parent LR schedule
    layer_lr_decay: float | None = None
    stage_id: str | None = None

    def __post_init__(self):
        if self.role not in ("pretrain", "continue", "finetune"):
            raise ValueError(f"unknown stage role {self.role!r}")
        if self.role == "continue" and self.init_checkpoint is None:
            raise ValueError("continue stage needs an init checkpoint (encoder + decoder)")
        if self.role == "finetune":
            if self.init_checkpoint is None:
                raise ValueError("finetune stage needs an init checkpoint (encoder)")
            if self.head is None:
                raise ValueError("finetune stage needs a head spec")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.role]
        if self.betas is None:
            self.betas = FINETUNE_BETAS if self.role == "finetune" else PRETRAIN_BETAS
        if self.base_lr is None:
            self.base_lr = FINETUNE_LR if self.role == "finetune" else DESK_PRETRAIN_LR
        if self.stage_id is None:
            self.stage_id = f"{self.role}:seed{self.seed}"

    def to_dict(self) -> dict:
        return {
            "role": self.role, "corpus": list(self.corpus), "epochs": self.epochs,
            "batch_size": self.batch_size, "base_lr": self.base_lr,
            "betas": list(self.betas), "weight_decay": self.weight_decay,
            "warmup_epochs": self.warmup_epochs, "mask_ratio": self.mask_ratio,
            "seed": self.seed, "init_checkpoint": self.init_checkpoint,
            "head": self.head.to_dict() if self.head else None,
            "label_smoothing": self.label_smoothing, "mixup_alpha": self.mixup_alpha,
            "augment": self.augment, "scale_range": list(self.scale_range),
            "eval_corpus": self.eval_corpus, "carry_schedule": self.carry_schedule,
            "layer_lr_decay": self.layer_lr_decay, "stage_id": self.stage_id,
        }


# -- supervised pieces ---------------------------------------------------------


def supervised_loss(logits: Tensor, target, smoothing: float = 0.0) -> Tensor:
    """Cross-entropy against a smoothed (possibly soft) target, batch mean.

    Integer targets become one-hot; smoothing s moves mass to s/(K-1) on each
    wrong class and 1-s on the true class. Soft targets (rows summing to 1,
    e.g. from mixup) pass through the same linear smoothing map.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    if logits.ndim == 1:
        logits = logits.reshape(1, logits.shape[0])
    b, k = logits.shape
    target = np.asarray(target)
    if target.ndim == 0:
        target = target[None]
    if target.ndim == 1:
        if target.min() < 0 or target.max() >= k:
            raise ValueError(f"label out of range [0, {k}): {target}")
        onehot = np.zeros((b, k), dtype=logits.data.dtype)
        onehot[np.arange(b), target] = 1.0
        target = onehot
    if target.shape != (b, k):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if smoothing > 0.0:
        target = (1.0 - smoothing - smoothing / (k - 1)) * target + smoothing / (k - 1)
    nll = -(log_softmax(logits, axis=-1) * Tensor(target, dtype=logits.data.dtype))
    return nll.sum() * (1.0 / float(b))


def mixup_batch(images: np.ndarray, labels: np.ndarray, alpha: float, rng: Rng,
                num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Convex-combine the batch with a shuffled copy of itself.

    One lambda ~ Beta(alpha, alpha) per batch; labels become soft vectors
    mixed with the same lambda. A batch of one passes through unmixed (with
    a warning).
    """
    if alpha <= 0:
        raise ValueError(f"mixup alpha must be > 0, got {alpha}")
    images = np.asarray(images)
    labels = np.asarray(labels)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    onehot = np.zeros((labels.size, k), dtype=np.float32)
    onehot[np.arange(labels.size), labels] = 1.0
    if labels.size < 2:
        warnings.warn("mixup on a batch of one is a pass-through")
        return images, onehot
    lam = rng.beta(alpha, alpha)
    perm = rng.permutation(labels.size)
    mixed = lam * images + (1.0 - lam) * images[perm]
    soft = lam * onehot + (1.0 - lam) * onehot[perm]
    return mixed.astype(images.dtype), soft


def classifier_forward(images: np.ndarray, params: dict[str, Tensor],
                       config: VitConfig) -> Tensor:
    """Full-grid encode, average-pool all tokens, linear head -> (B, K) logits."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    tokens = embed_patches(Tensor(patchify(images, config.patch_size)), params, config)
    latents, _ = encoder_forward(tokens, params, config)
    pooled = latents.mean(axis=1)
    return linear(params, "head", pooled)


def segmenter_forward(images: np.ndarray, params: dict[str, Tensor],
                      config: VitConfig) -> Tensor:
    """Per-token linear head -> (B, grid, grid, K) label-grid logits."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    tokens = embed_patches(Tensor(patchify(images, config.patch_size)), params, config)
    latents, _ = encoder_forward(tokens, params, config)
    logits = linear(params, "head", latents)
    b = images.shape[0]
    g = config.grid
    return logits.reshape(b, g, g, logits.shape[-1])


def build_finetune_model(checkpoint: Checkpoint, head: HeadSpec, config: VitConfig,
                         rng: Rng | None = None) -> dict[str, Tensor]:
    """Encoder weights from a checkpoint plus a fresh zero-initialized head.

    The decoder is discarded. Head weights start at zero so an untrained
    classifier emits exactly uniform logits.
    """
    if not checkpoint.has_prefix("encoder."):
        raise ValueError("checkpoint carries no encoder tensors")
    reference = init_params(config, Rng(0))
    params: dict[str, Tensor] = {}
    mismatched = []
    for name, ref in reference.items():
        if not name.startswith("encoder."):
            continue
        if name not in checkpoint.tensors:
            mismatched.append(f"{name} (missing)")
            continue
        arr = checkpoint.tensors[name]
        if arr.shape != ref.data.shape:
            mismatched.append(f"{name} (shape {arr.shape} != {ref.data.shape})")
            continue
        params[name] = Tensor(arr.copy(), requires_grad=True, dtype=arr.dtype)
    if mismatched:
        raise ShapeError("checkpoint/config mismatch: " + ", ".join(mismatched))
    feat = config.dim
    params["head.weight"] = Tensor(np.zeros((feat, head.classes)), requires_grad=True)
    params["head.bias"] = Tensor(np.zeros(head.classes), requires_grad=True)
    return params


def _load_pretrain_params(checkpoint: Checkpoint, config: VitConfig) -> dict[str, Tensor]:
    """Encoder + decoder tensors for a continue stage, shape-checked."""
    for prefix in ("encoder.", "decoder."):
        if not checkpoint.has_prefix(prefix):
            raise ValueError(f"continue stage needs {prefix}* tensors in the init checkpoint")
    reference = init_params(config, Rng(0))
    params: dict[str, Tensor] = {}
    mismatched = []
    for name, ref in reference.items():
        arr = checkpoint.tensors.get(name)
        if arr is None:
            mismatched.append(f"{name} (missing)")
        elif arr.shape != ref.data.shape:
            mismatched.append(f"{name} (shape {arr.shape} != {ref.data.shape})")
        else:
            params[name] = Tensor(arr.copy(), requires_grad=True, dtype=arr.dtype)
    if mismatched:
        raise ShapeError("checkpoint/config mismatch: " + ", ".join(mismatched))
    return params


def params_hash(tensors: dict) -> str:
    """SHA-256 over sorted (name, raw bytes); detects any drift bit-exactly."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def materialize_init_checkpoint(config: VitConfig, seed: int, path) -> str:
    """Random-init encoder+decoder checkpoint; the from-scratch arm fine-tunes from it."""
    params = init_params(config, Rng(seed).substream("init"))
    meta = {
        "format_version": 1,
        "model_config": config.to_dict(),
        "provenance": [f"init:seed{seed}"],
        "schedule_step": 0,
        "rng_state": {"algorithm": Rng.ALGORITHM, "seed": seed},
        "stage": None,
    }
    save_checkpoint(path, params, meta)
    return os.fspath(path)


# -- metrics -------------------------------------------------------------------


class MetricsWriter:
    """Append-only JSONL streams for step and epoch records."""

    def __init__(self, out_dir, stage_id: str):
        self.stage_id = stage_id
        self._t0 = time.monotonic()
        self._steps = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        self._epochs = open(os.path.join(out_dir, "epochs.jsonl"), "w")

    def _wall_ms(self) -> int:
        return 0 if reference_mode() else int((time.monotonic() - self._t0) * 1000)

    def step(self, step: int, epoch: int, lr: float, loss: float) -> None:
        rec = {"step": step, "epoch": epoch, "stage": self.stage_id,
               "lr": lr, "loss": loss, "wall_ms": self._wall_ms()}
        self._steps.write(json.dumps(rec, sort_keys=True) + "\n")

    def epoch(self, epoch: int, mean_loss: float, metric: float | None = None) -> None:
        rec = {"epoch": epoch, "stage": self.stage_id, "mean_loss": mean_loss}
        if metric is not None:
            rec["metric"] = metric
        self._epochs.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        self._steps.close()
        self._epochs.close()


# -- stage driver ---------------------------------------------------------------


def _augment_pretrain(images: np.ndarray, stage: StageConfig, rng: Rng) -> np.ndarray:
    out = np.empty_like(images)
    target = images.shape[1]
    for i in range(images.shape[0]):
        img = hflip(images[i], 0.5, rng)
        out[i] = random_resized_crop(img, stage.scale_range, target, rng)
    return out


def _augment_finetune(images: np.ndarray, stage: StageConfig, rng: Rng) -> np.ndarray:
    # same flip + crop family; fine-tuning additionally mixes up batches
    return _augment_pretrain(images, stage, rng)


def evaluate_top1(params: dict[str, Tensor], config: VitConfig,
                  corpus: LoadedCorpus, batch_size: int = 64) -> float:
    """Top-1 accuracy of a classification model over a labeled corpus."""
    correct = 0
    n = len(corpus)
    labels = corpus.labels
    for start in range(0, n, batch_size):
        logits = classifier_forward(corpus.images[start:start + batch_size],
                                    params, config).data
        pred = np.argmax(logits, axis=-1)
        correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / n


def run_stage(stage: StageConfig, config: VitConfig, out_dir) -> str:
    """Execute one stage end to end; returns the written checkpoint path.

    Pretrain and continue stages never read labels; fine-tune stages train on
    (image, label) pairs and optionally evaluate a test corpus each epoch.
    """
    os.makedirs(out_dir, exist_ok=True)
    if not stage.corpus:
        raise ValueError("stage has no corpus references")
    corpus = load_corpus(stage.corpus)
    if len(corpus) == 0:
        raise ValueError("corpus is empty")

    rng = Rng(stage.seed)
    provenance: list[str] = []
    schedule_offset = 0
    init_hash = None

    if stage.role == "pretrain":
        params = init_params(config, rng.substream("init"))
    else:
        parent = load_checkpoint(stage.init_checkpoint)
        provenance = parent.provenance
        if stage.role == "continue":
            params = _load_pretrain_params(parent, config)
            if stage.carry_schedule:
                schedule_offset = int(parent.meta.get("schedule_step", 0))
        else:
            params = build_finetune_model(parent, stage.head, config)
        init_hash = params_hash({k: v for k, v in params.items()
                                 if not k.startswith("head.")})

    steps_per_epoch = (len(corpus) + stage.batch_size - 1) // stage.batch_size
    total_steps = schedule_offset + stage.epochs * steps_per_epoch
    warmup_steps = 0 if stage.carry_schedule else stage.warmup_epochs * steps_per_epoch
    warmup_steps = min(warmup_steps, max(total_steps - 1, 0))

    lr_scale = None
    if stage.layer_lr_decay is not None:
        lr_scale = _layer_lr_scales(params, config, stage.layer_lr_decay)
    opt = AdamW(params, lr=stage.base_lr, betas=stage.betas,
                weight_decay=stage.weight_decay, lr_scale=lr_scale)

    eval_corpus = load_corpus(stage.eval_corpus) if stage.eval_corpus else None
    metrics = MetricsWriter(out_dir, stage.stage_id)
    global_step = schedule_offset
    try:
        for epoch in range(stage.epochs):
            data_rng = rng.substream(f"data:{epoch}")
            aug_rng = rng.substream(f"aug:{epoch}")
            mask_rng = rng.substream(f"mask:{epoch}")
            mix_rng = rng.substream(f"mixup:{epoch}")
            epoch_losses = []
            for batch in iter_epoch(corpus, stage.batch_size, data_rng):
                lr = cosine_lr(min(global_step, total_steps), total_steps,
                               stage.base_lr, warmup_steps)
                if stage.role in ("pretrain", "continue"):
                    images = batch.images
                    if stage.augment:
                        images = _augment_pretrain(images, stage, aug_rng)
                    loss_val, grads = _mim_train_step(images, params, config,
                                                      stage.mask_ratio, mask_rng)
                elif stage.head.kind == "classification":
                    images, labels = batch.images, batch.labels
                    if stage.augment:
                        images = _augment_finetune(images, stage, aug_rng)
                    target: np.ndarray = labels
                    if stage.mixup_alpha > 0 and images.shape[0] > 1:
                        images, target = mixup_batch(images, labels, stage.mixup_alpha,
                                                     mix_rng, stage.head.classes)
                    logits = classifier_forward(images, params, config)
                    loss = supervised_loss(logits, target, stage.label_smoothing)
                    for p in params.values():
                        p.grad = None
                    loss.backward()
                    grads = {k: v.grad for k, v in params.items() if v.grad is not None}
                    loss_val = float(loss.data)
                else:
                    # per-patch segmentation: geometry-changing augmentation and
                    # mixup would desync the label grids, so neither applies
                    images, grids = batch.images, batch.grids
                    logits = segmenter_forward(images, params, config)
                    k = stage.head.classes
                    flat = logits.reshape(
                        images.shape[0] * config.num_tokens, k)
                    loss = supervised_loss(flat, grids.reshape(-1).astype(np.int64),
                                           stage.label_smoothing)
                    for p in params.values():
                        p.grad = None
                    loss.backward()
                    grads = {k2: v.grad for k2, v in params.items() if v.grad is not None}
                    loss_val = float(loss.data)
                opt.step(grads, lr=lr)
                metrics.step(global_step, epoch, lr, loss_val)
                epoch_losses.append(loss_val)
                global_step += 1
            metric = None
            if (eval_corpus is not None and stage.role == "finetune"
                    and stage.head.kind == "classification"):
                metric = evaluate_top1(params, config, eval_corpus, stage.batch_size)
            metrics.epoch(epoch, float(np.mean(epoch_losses)), metric)
    finally:
        metrics.close()

    tensors: dict[str, np.ndarray] = {k: v.data for k, v in params.items()}
    tensors.update(opt.state_tensors())
    meta = {
        "format_version": 1,
        "model_config": config.to_dict(),
        "stage": stage.to_dict(),
        "provenance": provenance + [stage.stage_id],
        "schedule_step": global_step,
        "optimizer_step": opt.step_count,
        "rng_state": {"algorithm": Rng.ALGORITHM, "seed": stage.seed,
                      "epochs_completed": stage.epochs},
        "init_params_hash": init_hash,
    }
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    save_checkpoint(ckpt_path, tensors, meta)
    return ckpt_path


def _mim_train_step(images, params, config, ratio, mask_rng):
    plans = [sample_mask(config.num_tokens, ratio, mask_rng)
             for _ in range(images.shape[0])]
    prediction = masked_autoencode(images, params, config, plans)
    loss, report = mim_loss(prediction, images, plans, config)
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {k: v.grad for k, v in params.items() if v.grad is not None}
    return report.loss, grads


def _layer_lr_scales(params: dict[str, Tensor], config: VitConfig,
                     decay: float) -> dict[str, float]:
    """MAE-style layer-wise decay: earlier encoder blocks get smaller LRs."""
    scales = {}
    n_layers = config.depth + 1
    for name in params:
        if name.startswith("encoder.patch_embed"):
            layer = 0
        elif name.startswith("encoder.blocks."):
            layer = int(name.split(".")[2]) + 1
        else:
            layer = n_layers
        scales[name] = decay ** (n_layers - layer)
    return scales
