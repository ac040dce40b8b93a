"""Compact ViT encoder plus lightweight transformer decoder for masked reconstruction.

The model is functional: parameters live in a flat ``dict[str, Tensor]`` with
``encoder.`` / ``decoder.`` / ``head.`` name prefixes, and forward functions
take (params, inputs, config). Images are H x W x 3 float arrays in [0, 1];
tokens are N x D stacks with an optional leading batch axis.

Position embeddings are fixed 2-D sin-cos (no class token, no dropout);
blocks are pre-norm: norm -> attention -> residual -> norm -> MLP -> residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Rng,
    ShapeError,
    Tensor,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    scatter_rows,
    softmax,
)

__all__ = [
    "VitConfig",
    "vit_nano",
    "patchify",
    "unpatchify",
    "sincos_pos_embed",
    "init_params",
    "embed_patches",
    "mhsa_forward",
    "encoder_forward",
    "decoder_forward",
    "extract_attention_map",
    "encoder_param_names",
    "decoder_param_names",
    "linear",
]

INIT_STD = 0.02


@dataclass(frozen=True)
class VitConfig:
    """Geometry and width of the encoder/decoder pair."""

    image_size: int = 32
    patch_size: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.dim % self.heads != 0:
            raise ShapeError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ShapeError(
                f"decoder dim {self.decoder_dim} not divisible by decoder heads {self.decoder_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "decoder_dim": self.decoder_dim,
            "decoder_depth": self.decoder_depth,
            "decoder_heads": self.decoder_heads,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VitConfig":
        return cls(**d)


def vit_nano() -> VitConfig:
    """Reference preset: 32px images, 8px patches, dim 64 x depth 4, decoder 32 x 2."""
    return VitConfig()


# -- patch layout -------------------------------------------------------------


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an H x W x 3 image into N x (p*p*3) patch vectors.

    Patch order is row-major over the grid (top-left to bottom-right). Within
    a patch, values are laid out pixel-row-major, channel-last: the vector is
    patch[u, v, c] flattened with u outermost. This layout is frozen; the
    autoencoder's output projection and all renderers depend on it.
    """
    image = np.asarray(image)
    batched = image.ndim == 4
    if not batched:
        image = image[None]
    b, h, w, c = image.shape
    if h != w:
        raise ShapeError(f"image must be square, got {h}x{w}")
    if c != 3:
        raise ShapeError(f"image must have 3 channels, got {c}")
    if h % patch_size != 0:
        raise ShapeError(f"image side {h} not divisible by patch size {patch_size}")
    g = h // patch_size
    tokens = (image
              .reshape(b, g, patch_size, g, patch_size, 3)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(b, g * g, patch_size * patch_size * 3))
    return tokens if batched else tokens[0]


def unpatchify(tokens: np.ndarray, patch_size: int) -> np.ndarray:
    """Exact inverse of patchify on a full token grid."""
    tokens = np.asarray(tokens)
    batched = tokens.ndim == 3
    if not batched:
        tokens = tokens[None]
    b, n, d = tokens.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ShapeError(f"token count {n} is not a perfect square grid")
    if d != patch_size * patch_size * 3:
        raise ShapeError(f"token dim {d} != {patch_size}*{patch_size}*3")
    side = g * patch_size
    image = (tokens
             .reshape(b, g, g, patch_size, patch_size, 3)
             .transpose(0, 1, 3, 2, 4, 5)
             .reshape(b, side, side, 3))
    return image if batched else image[0]


def unpatchify_tensor(tokens: Tensor, patch_size: int) -> Tensor:
    """Differentiable unpatchify for decoder outputs (batched tokens)."""
    b, n, d = tokens.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ShapeError(f"token count {n} is not a perfect square grid")
    if d != patch_size * patch_size * 3:
        raise ShapeError(f"token dim {d} != {patch_size}*{patch_size}*3")
    side = g * patch_size
    return (tokens
            .reshape(b, g, g, patch_size, patch_size, 3)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, side, side, 3))


def sincos_pos_embed(num_tokens: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin-cos position table for a square token grid.

    Half the channels encode the grid row, half the column; each half is
    [sin(pos * omega) | cos(pos * omega)] with a geometric frequency ladder,
    so dim must be divisible by 4. Row (0, 0) is all-zero sines and all-one
    cosines. Deterministic and parameter-free.
    """
    if dim % 4 != 0:
        raise ShapeError(f"position embedding dim {dim} not divisible by 4")
    g = int(round(np.sqrt(num_tokens)))
    if g * g != num_tokens:
        raise ShapeError(f"token count {num_tokens} is not a perfect square grid")
    rows = np.repeat(np.arange(g, dtype=np.float64), g)
    cols = np.tile(np.arange(g, dtype=np.float64), g)
    half = dim // 2
    emb = np.concatenate([_sincos_1d(half, rows), _sincos_1d(half, cols)], axis=1)
    return emb.astype(np.float32)


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos, omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


# -- parameters ---------------------------------------------------------------


def _linear_init(params: dict, name: str, fan_in: int, fan_out: int, rng: Rng) -> None:
    params[f"{name}.weight"] = Tensor(
        rng.truncated_normal(INIT_STD, (fan_in, fan_out)), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _norm_init(params: dict, name: str, dim: int) -> None:
    params[f"{name}.gamma"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(dim), requires_grad=True)


def _block_init(params: dict, prefix: str, dim: int, mlp_ratio: int, rng: Rng) -> None:
    _norm_init(params, f"{prefix}.norm1", dim)
    for proj in ("wq", "wk", "wv", "wo"):
        _linear_init(params, f"{prefix}.attn.{proj}", dim, dim, rng)
    _norm_init(params, f"{prefix}.norm2", dim)
    _linear_init(params, f"{prefix}.mlp.fc1", dim, dim * mlp_ratio, rng)
    _linear_init(params, f"{prefix}.mlp.fc2", dim * mlp_ratio, dim, rng)


def init_params(config: VitConfig, rng: Rng) -> dict[str, Tensor]:
    """Fresh encoder + decoder parameter table.

    Truncated normal (std 0.02) projections and mask token, zero biases and
    norm offsets, unit norm scales.
    """
    p: dict[str, Tensor] = {}
    _linear_init(p, "encoder.patch_embed", config.patch_dim, config.dim, rng)
    for i in range(config.depth):
        _block_init(p, f"encoder.blocks.{i}", config.dim, config.mlp_ratio, rng)
    _norm_init(p, "encoder.norm", config.dim)

    _linear_init(p, "decoder.embed", config.dim, config.decoder_dim, rng)
    p["decoder.mask_token"] = Tensor(
        rng.truncated_normal(INIT_STD, (config.decoder_dim,)), requires_grad=True)
    for i in range(config.decoder_depth):
        _block_init(p, f"decoder.blocks.{i}", config.decoder_dim, config.mlp_ratio, rng)
    _norm_init(p, "decoder.norm", config.decoder_dim)
    _linear_init(p, "decoder.pred", config.decoder_dim, config.patch_dim, rng)
    return p


def encoder_param_names(params: dict[str, Tensor]) -> list[str]:
    return sorted(k for k in params if k.startswith("encoder."))


def decoder_param_names(params: dict[str, Tensor]) -> list[str]:
    return sorted(k for k in params if k.startswith("decoder."))


def linear(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    """Apply the named weight/bias pair: x @ W + b."""
    return matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def _norm(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"])


# -- attention / blocks ---------------------------------------------------------


def mhsa_forward(tokens: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
                 record: bool = False) -> tuple[Tensor, np.ndarray | None]:
    """Multi-head scaled dot-product self-attention.

    tokens: (B, N, D). Returns (output tokens, scores) where scores is the
    (B, heads, N, N) softmax(q k^T / sqrt(d_head)) matrix when `record`,
    else None.
    """
    b, n, d = tokens.shape
    if d % heads != 0:
        raise ShapeError(f"token dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(params, f"{prefix}.wq", tokens))
    k = split(linear(params, f"{prefix}.wk", tokens))
    v = split(linear(params, f"{prefix}.wv", tokens))
    scores = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    mixed = matmul(scores, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = linear(params, f"{prefix}.wo", mixed)
    return out, (scores.data.copy() if record else None)


def _block_forward(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
                   record: bool = False) -> tuple[Tensor, np.ndarray | None]:
    attn_out, scores = mhsa_forward(_norm(params, f"{prefix}.norm1", x), params,
                                    f"{prefix}.attn", heads, record)
    x = x + attn_out
    h = linear(params, f"{prefix}.mlp.fc1", _norm(params, f"{prefix}.norm2", x))
    x = x + linear(params, f"{prefix}.mlp.fc2", gelu(h))
    return x, scores


def embed_patches(patch_vectors: Tensor, params: dict[str, Tensor],
                  config: VitConfig) -> Tensor:
    """Project raw patch vectors to the model dim and add grid position embeddings."""
    pos = Tensor(sincos_pos_embed(config.num_tokens, config.dim),
                 dtype=patch_vectors.dtype)
    return linear(params, "encoder.patch_embed", patch_vectors) + pos


def encoder_forward(visible: Tensor, params: dict[str, Tensor], config: VitConfig,
                    record: bool = False) -> tuple[Tensor, list[np.ndarray]]:
    """Run pre-norm encoder blocks plus final norm over already-embedded tokens.

    visible: (B, V, D), V >= 1 (an empty visible set is rejected). Returns
    latents of the same token count and, when recording, the per-layer
    attention score stacks.
    """
    if visible.shape[-2] == 0:
        raise ShapeError("encoder got an empty visible token set")
    records: list[np.ndarray] = []
    x = visible
    for i in range(config.depth):
        x, scores = _block_forward(x, params, f"encoder.blocks.{i}", config.heads, record)
        if record:
            records.append(scores)
    return _norm(params, "encoder.norm", x), records


def decoder_forward(latents: Tensor, visible_idx: np.ndarray, masked_idx: np.ndarray,
                    params: dict[str, Tensor], config: VitConfig) -> Tensor:
    """Reconstruct full images from visible-token latents.

    Projects latents to the decoder dim, scatters them to their grid slots,
    fills each masked slot with the shared learned mask token, adds decoder
    position embeddings, runs the decoder blocks, projects every token to
    p*p*3 pixels, and unpatchifies to (B, H, W, 3).
    """
    b, v, _ = latents.shape
    n = config.num_tokens
    if visible_idx.shape != (b, v):
        raise ShapeError(
            f"plan visible indices {visible_idx.shape} inconsistent with latents {latents.shape}")
    if masked_idx.shape[0] != b or visible_idx.shape[1] + masked_idx.shape[1] != n:
        raise ShapeError(
            f"plan covers {visible_idx.shape[1]}+{masked_idx.shape[1]} tokens, grid has {n}")
    x = scatter_rows(linear(params, "decoder.embed", latents), visible_idx, n)
    m = masked_idx.shape[1]
    if m > 0:
        mask_tok = params["decoder.mask_token"].reshape(1, 1, config.decoder_dim)
        filler = mask_tok.broadcast_to((b, m, config.decoder_dim))
        x = x + scatter_rows(filler, masked_idx, n)
    pos = Tensor(sincos_pos_embed(n, config.decoder_dim), dtype=latents.dtype)
    x = x + pos
    for i in range(config.decoder_depth):
        x, _ = _block_forward(x, params, f"decoder.blocks.{i}", config.decoder_heads)
    x = _norm(params, "decoder.norm", x)
    x = linear(params, "decoder.pred", x)
    return unpatchify_tensor(x, config.patch_size)


def full_encoder_forward(image: np.ndarray, params: dict[str, Tensor], config: VitConfig,
                         record: bool = False) -> tuple[Tensor, list[np.ndarray]]:
    """Embed and encode the full (unmasked) token grid of one image or a batch."""
    batched = np.asarray(image).ndim == 4
    patches = patchify(image, config.patch_size)
    tokens = Tensor(patches if batched else patches[None])
    return encoder_forward(embed_patches(tokens, params, config), params, config, record)


def extract_attention_map(image: np.ndarray, ref_patch_index: int,
                          params: dict[str, Tensor], config: VitConfig) -> np.ndarray:
    """Head-averaged last-layer attention row of a reference patch.

    Runs the encoder on the full token grid (no masking) and returns the
    reference patch's score row reshaped to the (grid, grid) patch layout.
    Cells are nonnegative and sum to 1.
    """
    n = config.num_tokens
    if not 0 <= ref_patch_index < n:
        raise IndexError(f"reference patch {ref_patch_index} out of range 0..{n - 1}")
    _, records = full_encoder_forward(image, params, config, record=True)
    last = records[-1][0]            # (heads, N, N)
    row = last.mean(axis=0)[ref_patch_index]
    return row.reshape(config.grid, config.grid)
