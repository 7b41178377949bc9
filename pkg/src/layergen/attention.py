"""Attention machinery for the global-to-layer coupling.

Pure tensor functions (torch, any float dtype, CPU-safe) implementing:

* scaled-dot-product cross-attention map extraction,
* the layer cross-attention reweighting that multiplies a layer's
  subject-token column by the min-max-normalized global column and rescales
  the result back to the layer column's original peak,
* spatial mask derivation (normalize -> binarize -> gaussian blur) and the
  background mask as the complement of the union of foreground masks,
* partial joint self-attention: layer self-attention extended with the global
  branch's keys/values, biased by the log of the spatial mask so each layer
  queries only its own region of the global stream.

All functions accept arbitrary leading batch dimensions and reduce over the
trailing ones; row softmaxes make every attention map a probability
distribution over its key axis. Degenerate inputs (an all-zero reweighted map,
an all-zero row after column substitution) never raise: the input passes
through unchanged and a ``DegenerateMapWarning`` is emitted.

Mask semantics: the mask enters as an additive ``log(mask + eps)`` bias on the
attention logits of global positions. Positions with mask exactly 0 receive a
-inf bias and therefore exactly zero post-softmax weight; multiplying keys by
the mask instead would distort logit geometry unpredictably.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import Tensor

MASK_EPS = 1e-8


class DegenerateMapWarning(UserWarning):
    """Signals an all-zero reweighted map or an all-zero attention row."""


@dataclass
class ProjectionWeights:
    """Q/K/V/Out projection matrices for one attention block and branch role.

    ``w_q``: (d_q_in, h*d), ``w_k``/``w_v``: (d_kv_in, h*d),
    ``w_out``: (h*d, d_out). Inner width must split evenly across heads.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    heads: int

    def __post_init__(self):
        inner = self.w_q.shape[1]
        if self.w_k.shape[1] != inner or self.w_v.shape[1] != inner:
            raise ValueError("Q/K/V projections must share the inner dimension")
        if self.w_k.shape[0] != self.w_v.shape[0]:
            raise ValueError("K and V must project from the same input dimension")
        if self.w_out.shape[0] != inner:
            raise ValueError("w_out input dimension must match Q/K/V inner dimension")
        if self.heads < 1 or inner % self.heads != 0:
            raise ValueError(f"inner dimension {inner} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.heads


@dataclass
class GlobalShareWeights:
    """Extra key/value projections mapping global hidden states into a layer
    branch's self-attention space."""

    w_kgl: Tensor
    w_vgl: Tensor

    def __post_init__(self):
        if self.w_kgl.shape != self.w_vgl.shape:
            raise ValueError("w_kgl and w_vgl must have identical shapes")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, h*d) -> (..., h, n, d)"""
    *lead, n, inner = x.shape
    x = x.reshape(*lead, n, heads, inner // heads)
    return x.transpose(-3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, n, d) -> (..., n, h*d)"""
    x = x.transpose(-3, -2)
    *lead, n, heads, d = x.shape
    return x.reshape(*lead, n, heads * d)


def cross_attention_map(spatial_feats: Tensor, text_emb: Tensor, weights: ProjectionWeights) -> Tensor:
    """Per-head softmax(Q K^T / sqrt(d)) linking positions to prompt tokens.

    ``spatial_feats``: (..., hw, d_model), ``text_emb``: (..., s, d_txt).
    Returns (..., h, hw, s); each (head, position) row sums to 1.
    """
    if text_emb.shape[-2] < 1:
        raise ValueError("text embedding must contain at least one token")
    q = split_heads(spatial_feats @ weights.w_q, weights.heads)
    k = split_heads(text_emb @ weights.w_k, weights.heads)
    logits = q @ k.transpose(-2, -1) / math.sqrt(weights.head_dim)
    return torch.softmax(logits, dim=-1)


def attention_output(probs: Tensor, kv_input: Tensor, weights: ProjectionWeights) -> Tensor:
    """Aggregate values under an attention map: (probs @ V) merged through W_out.

    ``probs``: (..., h, q, s), ``kv_input``: (..., s, d_kv_in).
    """
    v = split_heads(kv_input @ weights.w_v, weights.heads)
    return merge_heads(probs @ v) @ weights.w_out


def extract_token_map(attn_map: Tensor, token_index: int) -> Tensor:
    """Head-averaged attention column of one token: (..., h, hw, s) -> (..., hw)."""
    s = attn_map.shape[-1]
    if not 0 <= token_index < s:
        raise IndexError(f"token index {token_index} out of range 0..{s - 1}")
    return attn_map[..., token_index].mean(dim=-2)


def minmax_norm(v: Tensor) -> Tensor:
    """Min-max normalize over the last dimension.

    A constant vector maps to all-ones rather than 0/0: a uniform map carries
    no layout signal and must not suppress whatever it multiplies.
    """
    if v.shape[-1] < 1:
        raise ValueError("min-max normalization needs at least one element")
    lo = v.amin(dim=-1, keepdim=True)
    hi = v.amax(dim=-1, keepdim=True)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (v - lo) / safe, torch.ones_like(v))


def reweight_layer_map(m_g: Tensor, m_l: Tensor) -> Tensor:
    """Reweight a layer's subject column by the normalized global column.

    ``scaled = minmax_norm(m_g) * m_l`` relocates mass into the region the
    global map assigns to the subject; the result is rescaled so its maximum
    equals ``max(m_l)``, preserving the column's original peak weight. If the
    product is identically zero (disjoint supports) the zero map is returned
    unchanged under a ``DegenerateMapWarning``.
    """
    if m_g.shape != m_l.shape:
        raise ValueError(f"map shapes differ: {tuple(m_g.shape)} vs {tuple(m_l.shape)}")
    scaled = minmax_norm(m_g) * m_l
    peak = scaled.amax(dim=-1, keepdim=True)
    if torch.any(peak <= 0):
        warnings.warn(
            "reweighted map is identically zero (disjoint supports); returning it unchanged",
            DegenerateMapWarning,
            stacklevel=2,
        )
    safe = torch.where(peak > 0, peak, torch.ones_like(peak))
    rescale = m_l.amax(dim=-1, keepdim=True) / safe
    return torch.where(peak > 0, scaled * rescale, scaled)


def apply_reweighted_cross_attention(attn_map: Tensor, token_index: int, reweighted: Tensor) -> Tensor:
    """Substitute one token's column across all heads, then renormalize rows.

    ``reweighted`` (..., hw) is broadcast to every head. Rows that end up
    all-zero are left unchanged under a ``DegenerateMapWarning``.
    """
    s = attn_map.shape[-1]
    if not 0 <= token_index < s:
        raise IndexError(f"token index {token_index} out of range 0..{s - 1}")
    if reweighted.shape[-1] != attn_map.shape[-2]:
        raise ValueError(
            f"reweighted length {reweighted.shape[-1]} != map positions {attn_map.shape[-2]}"
        )
    swapped = attn_map.clone()
    swapped[..., token_index] = reweighted.unsqueeze(-2)
    return renormalize_rows(swapped)


def renormalize_rows(attn_map: Tensor) -> Tensor:
    """Rescale each row of (..., s) to sum 1; all-zero rows pass through with a warning."""
    row_sum = attn_map.sum(dim=-1, keepdim=True)
    if torch.any(row_sum <= 0):
        warnings.warn(
            "attention row sums to zero; leaving the row unchanged",
            DegenerateMapWarning,
            stacklevel=2,
        )
    safe = torch.where(row_sum > 0, row_sum, torch.ones_like(row_sum))
    return torch.where(row_sum > 0, attn_map / safe, attn_map)


def gaussian_blur_2d(values: Tensor, latent_shape: tuple[int, int], sigma: float) -> Tensor:
    """Separable gaussian blur on a flattened (..., H*W) grid.

    Reflective boundary handling; kernel truncated at 3 sigma and renormalized
    to unit sum, so total mass is preserved. ``sigma == 0`` is the identity.
    """
    if sigma < 0:
        raise ValueError(f"blur sigma must be >= 0, got {sigma}")
    h, w = latent_shape
    if values.shape[-1] != h * w:
        raise ValueError(f"flattened length {values.shape[-1]} != {h}x{w}")
    if sigma == 0:
        return values
    radius = max(1, math.ceil(3.0 * sigma))
    offsets = torch.arange(-radius, radius + 1, dtype=values.dtype, device=values.device)
    kernel = torch.exp(-0.5 * (offsets / sigma) ** 2)
    kernel = kernel / kernel.sum()

    grid = values.reshape(*values.shape[:-1], h, w)

    def blur_last(x: Tensor) -> Tensor:
        n = x.shape[-1]
        idx = torch.arange(-radius, n + radius, device=x.device)
        idx = _reflect_index(idx, n)
        return (x[..., idx].unfold(-1, 2 * radius + 1, 1) * kernel).sum(dim=-1)

    grid = blur_last(grid)                        # along width
    grid = blur_last(grid.transpose(-2, -1)).transpose(-2, -1)  # along height
    return grid.reshape(*values.shape)


def _reflect_index(idx: Tensor, n: int) -> Tensor:
    # Half-sample symmetric reflection: -1 -> 0, n -> n-1.
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * n
    idx = idx % period
    return torch.where(idx >= n, period - 1 - idx, idx)


def binarize_token_map(m_g: Tensor, threshold: float = 0.5) -> Tensor:
    """Min-max normalize then threshold to a hard {0, 1} mask."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (minmax_norm(m_g) >= threshold).to(m_g.dtype)


def derive_spatial_mask(
    m_g: Tensor,
    latent_shape: tuple[int, int],
    threshold: float = 0.5,
    sigma: float = 1.0,
) -> Tensor:
    """Token map -> soft spatial mask: normalize, binarize, gaussian-blur.

    The blur runs on the 2-D latent grid with reflective boundaries; output
    values stay in [0, 1]. ``sigma == 0`` yields the hard binary mask.
    """
    h, w = latent_shape
    if m_g.shape[-1] != h * w:
        raise ValueError(f"token map length {m_g.shape[-1]} != latent {h}x{w}")
    hard = binarize_token_map(m_g, threshold)
    soft = gaussian_blur_2d(hard, latent_shape, sigma)
    return soft.clamp(0.0, 1.0)


def background_mask(fg_masks, size: int | None = None) -> Tensor:
    """Complement of the union of binarized foreground masks.

    An empty list means nothing occludes the background: all-ones (``size``
    required to fix the length in that case).
    """
    masks = list(fg_masks)
    if not masks:
        if size is None:
            raise ValueError("background_mask needs `size` when no foreground masks are given")
        return torch.ones(size)
    union = masks[0]
    for m in masks[1:]:
        if m.shape != union.shape:
            raise ValueError("foreground masks must share one shape")
        union = torch.maximum(union, m)
    return 1.0 - union


def self_attention(
    z: Tensor,
    weights: ProjectionWeights,
    position_bias: Tensor | None = None,
    return_probs: bool = False,
):
    """Plain multi-head self-attention over positions: (..., hw, d) -> same.

    ``position_bias`` (..., hw), if given, is added to the logits toward each
    key position (broadcast over heads and queries).
    """
    q = split_heads(z @ weights.w_q, weights.heads)
    k = split_heads(z @ weights.w_k, weights.heads)
    v = split_heads(z @ weights.w_v, weights.heads)
    logits = q @ k.transpose(-2, -1) / math.sqrt(weights.head_dim)
    if position_bias is not None:
        logits = logits + position_bias.unsqueeze(-2).unsqueeze(-3)
    probs = torch.softmax(logits, dim=-1)
    out = merge_heads(probs @ v) @ weights.w_out
    if return_probs:
        return out, probs
    return out


def partial_joint_self_attention(
    z_layer: Tensor,
    global_hidden: Tensor,
    mask: Tensor,
    weights: ProjectionWeights,
    share: GlobalShareWeights,
    return_probs: bool = False,
    position_bias: Tensor | None = None,
):
    """Layer self-attention with masked global keys/values concatenated in.

    Queries come from the layer alone; keys/values are ``[global ; layer]``
    where the global side is projected through the dedicated share weights.
    Global logits receive an additive ``log(mask + eps)`` bias; mask exactly 0
    becomes -inf, excluding that position outright. Softmax runs over the
    concatenated axis, so an all-zero mask reduces to plain self-attention.
    """
    hw = z_layer.shape[-2]
    if global_hidden.shape[-2] != hw:
        raise ValueError("layer and global streams must share the position count")
    if mask.shape[-1] != hw:
        raise ValueError(f"mask length {mask.shape[-1]} != positions {hw}")
    q = split_heads(z_layer @ weights.w_q, weights.heads)
    k_layer = split_heads(z_layer @ weights.w_k, weights.heads)
    v_layer = split_heads(z_layer @ weights.w_v, weights.heads)
    k_global = split_heads(global_hidden @ share.w_kgl, weights.heads)
    v_global = split_heads(global_hidden @ share.w_vgl, weights.heads)

    k = torch.cat([k_global, k_layer], dim=-2)
    v = torch.cat([v_global, v_layer], dim=-2)
    logits = q @ k.transpose(-2, -1) / math.sqrt(weights.head_dim)

    bias = torch.where(
        mask > 0,
        torch.log(mask + MASK_EPS),
        torch.full_like(mask, float("-inf")),
    )
    # Mask bias applies to the global half of the key axis; an optional extra
    # position bias applies to the layer half.
    layer_bias = torch.zeros_like(bias) if position_bias is None else position_bias
    full_bias = torch.cat([bias, layer_bias], dim=-1)
    logits = logits + full_bias.unsqueeze(-2).unsqueeze(-3)

    probs = torch.softmax(logits, dim=-1)
    out = merge_heads(probs @ v) @ weights.w_out
    if return_probs:
        return out, probs
    return out
