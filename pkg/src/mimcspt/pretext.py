"""Masked-image-modeling pretext task: mask sampling, visible selection, masked-L1 loss.

The loss reconstructs raw pixel values: mean absolute error over masked
pixels only, normalized by the masked-pixel count. Gradient reaches the
prediction only at masked pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import VitConfig, decoder_forward, embed_patches, encoder_forward, patchify
from .tensor import Rng, ShapeError, Tensor, gather_rows

__all__ = [
    "MaskPlan",
    "MimLossReport",
    "sample_mask",
    "select_visible",
    "mim_loss",
    "mim_step",
    "mim_batch_step",
    "masked_autoencode",
]


@dataclass(frozen=True)
class MaskPlan:
    """Partition of token indices into masked and visible sets.

    `masked` and `visible` are ascending index arrays; `permutation` is the
    shuffle that produced the split (first |masked| entries were masked).
    """

    n: int
    masked: np.ndarray
    visible: np.ndarray
    permutation: np.ndarray

    def __post_init__(self):
        union = np.sort(np.concatenate([self.masked, self.visible]))
        if union.size != self.n or not np.array_equal(union, np.arange(self.n)):
            raise ShapeError("mask plan does not partition the token set")
        if not np.array_equal(np.sort(self.permutation), np.arange(self.n)):
            raise ShapeError("mask plan permutation is not a bijection")


@dataclass
class MimLossReport:
    """Scalar masked-L1 loss plus diagnostics."""

    loss: float
    alpha: int                      # number of masked pixels
    per_patch: np.ndarray = field(default_factory=lambda: np.zeros(0))


def sample_mask(n: int, ratio: float, rng: Rng) -> MaskPlan:
    """Uniform shuffle masking: floor(ratio * n) tokens hidden.

    The first floor(ratio*n) entries of a uniform random permutation become
    the masked set. ratio 1.0 (empty visible set) is rejected.
    """
    if n < 1:
        raise ValueError(f"need at least one token, got {n}")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    perm = rng.permutation(n)
    m = int(np.floor(ratio * n))
    return MaskPlan(
        n=n,
        masked=np.sort(perm[:m]),
        visible=np.sort(perm[m:]),
        permutation=perm,
    )


def select_visible(tokens: Tensor, plan: MaskPlan) -> Tensor:
    """Rows of `tokens` at the plan's visible indices, in ascending index order.

    Works batched: tokens (B, N, D) gathers the same visible set per item.
    """
    n = tokens.shape[-2]
    if n != plan.n:
        raise ShapeError(f"plan built for {plan.n} tokens, got {n}")
    if tokens.ndim == 2:
        return gather_rows(tokens, plan.visible)
    b = tokens.shape[0]
    idx = np.broadcast_to(plan.visible, (b, plan.visible.size))
    return gather_rows(tokens, idx)


def _pixel_mask(plans: list[MaskPlan], config: VitConfig, dtype) -> np.ndarray:
    """(B, H, W, 3) indicator of masked pixels for a stack of plans."""
    g, p = config.grid, config.patch_size
    out = np.zeros((len(plans), config.image_size, config.image_size, 3), dtype=dtype)
    for b, plan in enumerate(plans):
        grid_mask = np.zeros(plan.n, dtype=bool)
        grid_mask[plan.masked] = True
        cells = grid_mask.reshape(g, g)
        out[b] = np.kron(cells, np.ones((p, p), dtype=dtype))[..., None]
    return out


def mim_loss(prediction: Tensor, target: np.ndarray, plan: MaskPlan | list[MaskPlan],
             config: VitConfig) -> tuple[Tensor, MimLossReport]:
    """Masked-pixel mean absolute error.

    prediction: reconstructed images (B, H, W, 3) as a Tensor; target: the
    original images. The scalar is sum(|prediction - target| over masked
    pixels) / alpha where alpha is the masked-pixel count, averaged per image
    then uniformly over the batch. Returns the differentiable scalar and a
    report with alpha and per-masked-patch mean errors.
    """
    plans = plan if isinstance(plan, list) else [plan]
    target = np.asarray(target)
    if target.ndim == 3:
        target = target[None]
    if prediction.ndim == 3:
        prediction = prediction.reshape((1,) + prediction.shape)
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} and target {target.shape} differ")
    if len(plans) != prediction.shape[0]:
        raise ShapeError(f"{len(plans)} plans for batch of {prediction.shape[0]}")

    p = config.patch_size
    per_image_alpha = plans[0].masked.size * p * p * 3
    for pl in plans:
        if pl.masked.size * p * p * 3 != per_image_alpha:
            raise ShapeError("plans in one batch must mask equal counts")

    mask = _pixel_mask(plans, config, prediction.data.dtype)
    abs_err = (prediction - Tensor(target, dtype=prediction.data.dtype)).abs() * Tensor(mask)
    batch = prediction.shape[0]
    loss = abs_err.sum() * (1.0 / float(per_image_alpha * batch))

    # per-masked-patch mean L1 for the first image (diagnostics)
    patch_err = np.abs(prediction.data[0] - target[0]) * mask[0]
    patch_tokens = patchify(patch_err, p)
    per_patch = patch_tokens[plans[0].masked].mean(axis=1)

    report = MimLossReport(loss=float(loss.data), alpha=int(per_image_alpha),
                           per_patch=per_patch)
    return loss, report


def masked_autoencode(images: np.ndarray, params: dict[str, Tensor], config: VitConfig,
                    plans: list[MaskPlan]) -> Tensor:
    """patchify -> embed -> select visible -> encode -> decode for a plan stack."""
    tokens = embed_patches(Tensor(patchify(images, config.patch_size)), params, config)
    vis_idx = np.stack([pl.visible for pl in plans])
    mask_idx = np.stack([pl.masked for pl in plans])
    visible = gather_rows(tokens, vis_idx)
    latents, _ = encoder_forward(visible, params, config)
    return decoder_forward(latents, vis_idx, mask_idx, params, config)


def mim_batch_step(images: np.ndarray, params: dict[str, Tensor], config: VitConfig,
                   ratio: float, rng: Rng) -> tuple[MimLossReport, dict[str, np.ndarray]]:
    """One masked-reconstruction training step over a batch.

    Samples an independent mask per image (equal masked counts, so the batch
    stays rectangular), runs the autoencoder, and returns the loss report
    plus gradients for every trainable parameter.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    plans = [sample_mask(config.num_tokens, ratio, rng) for _ in range(images.shape[0])]
    prediction = masked_autoencode(images, params, config, plans)
    loss, report = mim_loss(prediction, images, plans, config)
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
             for k, v in params.items()}
    return report, grads


def mim_step(image: np.ndarray, params: dict[str, Tensor], config: VitConfig,
             ratio: float, rng: Rng) -> tuple[MimLossReport, dict[str, np.ndarray]]:
    """Single-image masked-reconstruction step (batch of one)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"mim_step expects one H x W x 3 image, got {image.shape}")
    return mim_batch_step(image[None], params, config, ratio, rng)


def mim_forward_loss(images: np.ndarray, params: dict[str, Tensor], config: VitConfig,
                     plans: list[MaskPlan]) -> tuple[Tensor, MimLossReport]:
    """Forward-only masked reconstruction loss for fixed plans (no grads taken)."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    prediction = masked_autoencode(images, params, config, plans)
    return mim_loss(prediction, images, plans, config)
