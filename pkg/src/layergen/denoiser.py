"""Multi-branch noise predictor with global-to-layer attention coupling.

One small U-Net backbone (two spatial levels plus an 8x8 middle, residual
conv blocks, multi-head attention at the two lowest resolutions) is shared by
all denoising streams of a layered sample: the global stream (the composite
image), K foreground streams, and the background stream. Roles specialize
through a learned role embedding added to the timestep embedding and through
additive Q/K/V/Out weight deltas on every attention projection for the
foreground and background roles; the global role runs the base weights and
owns the extra share projections that expose its hidden states to the layers.

Inside every attention block the branches are evaluated in a fixed order:

1. global: plain self-attention, then cross-attention against the global
   prompt; its normalized hidden states and cross-attention map are cached
   (detached unless ``couple_global``).
2. each foreground i: if joint attention is enabled, self-attention runs over
   the concatenation of its own keys/values and the cached global ones, log-
   biased by a spatial mask derived from the global map's subject-token
   column; cross-attention optionally has that column reweighted by the
   global column (at the configured reweight resolution only).
3. background: same joint self-attention with the complement of the union of
   all foreground masks; plain cross-attention against the background prompt.

Foregrounds never attend to each other directly; all interaction routes
through the global stream. With both mechanism toggles off, every branch
reduces to an independent single-branch forward (``forward_single``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import attention as attn
from .synthdata import PAD_ID, SEQ_LEN, VOCAB_SIZE, PromptSpec

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BranchRole:
    """One denoising stream: the global composite, a foreground, or the background."""

    kind: str  # "global" | "foreground" | "background"
    index: int = 0

    def __post_init__(self):
        if self.kind not in ("global", "foreground", "background"):
            raise ValueError(f"unknown branch kind {self.kind!r}")
        if self.kind == "foreground" and self.index < 1:
            raise ValueError("foreground indices are 1-based")
        if self.kind != "foreground" and self.index != 0:
            raise ValueError(f"{self.kind} role takes no index")

    def __str__(self):
        return f"fg{self.index}" if self.kind == "foreground" else self.kind


GLOBAL = BranchRole("global")
BACKGROUND = BranchRole("background")


def foreground(i: int) -> BranchRole:
    return BranchRole("foreground", i)


def branch_roles(k: int) -> list[BranchRole]:
    """Evaluation order: global, foregrounds bottom-up, background."""
    return [GLOBAL, *(foreground(i) for i in range(1, k + 1)), BACKGROUND]


@dataclass
class DenoiserConfig:
    image_size: int = 32
    channels: tuple[int, int] = (64, 128)
    attention_resolutions: tuple[int, ...] = (16, 8)
    reweight_resolution: int = 16
    heads: int = 4
    d_txt: int = 64
    k_max: int = 3
    vocab_size: int = VOCAB_SIZE
    seq_len: int = SEQ_LEN
    reweighting_on: bool = True
    joint_attention_on: bool = True
    couple_global: bool = False        # let layer-branch gradients reach the global stream
    self_attention_bias: bool = False  # also inject log(reweighted+eps) into layer self-attn
    mask_threshold: float = 0.5
    mask_sigma: float = 1.0            # in latent pixels at the reweight resolution
    norm_groups: int = 8

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.attention_resolutions = tuple(self.attention_resolutions)
        self.validate()

    def validate(self):
        if self.image_size % 4 != 0:
            raise ValueError("image size must be divisible by 4")
        res1, res2 = self.image_size // 2, self.image_size // 4
        if set(self.attention_resolutions) != {res1, res2}:
            raise ValueError(
                f"attention resolutions {self.attention_resolutions} do not match the "
                f"backbone levels ({res1}, {res2})"
            )
        if self.reweight_resolution not in self.attention_resolutions:
            raise ValueError("reweight resolution must be one of the attention resolutions")
        for c in self.channels:
            if c % self.norm_groups or self.channels[1] % self.heads:
                raise ValueError("channel widths must divide by norm groups and heads")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError("mask threshold must lie in (0, 1)")
        if self.mask_sigma < 0:
            raise ValueError("mask sigma must be >= 0")


@dataclass
class TokenBatch:
    """Collated per-branch token ids; every sample padded to one shared K."""

    global_ids: Tensor      # (B, s)
    background_ids: Tensor  # (B, s)
    layer_ids: Tensor       # (B, K, s)
    subject_global: Tensor  # (B, K)
    subject_layer: Tensor   # (B, K)

    @property
    def k(self) -> int:
        return self.layer_ids.shape[1]

    @property
    def batch(self) -> int:
        return self.layer_ids.shape[0]


def collate_prompts(prompts: Sequence[PromptSpec], k: int | None = None) -> TokenBatch:
    """Stack prompts into tensors, padding every sample to the largest K.

    Pad layers get an all-PAD sequence; their subject indices point at PAD
    slots (the trailing global slot, position 1 of the layer row).
    """
    if not prompts:
        raise ValueError("cannot collate an empty prompt list")
    ks = [p.k for p in prompts]
    k = max(ks) if k is None else k
    if max(ks) > k:
        raise ValueError(f"prompt K {max(ks)} exceeds requested padding {k}")
    g, b, l, sg, sl = [], [], [], [], []
    for p in prompts:
        pad_rows = k - p.k
        lay = torch.as_tensor(p.layer_ids, dtype=torch.long)
        lay = torch.cat([lay, torch.full((pad_rows, SEQ_LEN), PAD_ID, dtype=torch.long)])
        g.append(torch.as_tensor(p.global_ids, dtype=torch.long))
        b.append(torch.as_tensor(p.background_ids, dtype=torch.long))
        l.append(lay)
        sg.append(
            torch.cat(
                [
                    torch.as_tensor(p.subject_global, dtype=torch.long),
                    torch.full((pad_rows,), SEQ_LEN - 1, dtype=torch.long),
                ]
            )
        )
        sl.append(
            torch.cat(
                [
                    torch.as_tensor(p.subject_layer, dtype=torch.long),
                    torch.ones(pad_rows, dtype=torch.long),
                ]
            )
        )
    return TokenBatch(
        global_ids=torch.stack(g),
        background_ids=torch.stack(b),
        layer_ids=torch.stack(l),
        subject_global=torch.stack(sg),
        subject_layer=torch.stack(sl),
    )


class AttentionProbe:
    """Observer for attention internals; never alters the forward pass.

    ``records`` maps ``(block_id, name)`` (or ``(t, block_id, name)`` with
    ``keep_history``) to detached tensors. Names: ``global_map``,
    ``fg{i}/m_g|m_l|m_hat|mask|self_probs``, ``bg/mask``.
    """

    def __init__(self, block: str | None = None, keep_history: bool = False):
        self.block = block
        self.keep_history = keep_history
        self.records: dict = {}

    def clear(self):
        self.records.clear()

    def wants(self, block_id: str) -> bool:
        return self.block is None or self.block == block_id

    def store(self, t: int, block_id: str, name: str, value: Tensor):
        key = (t, block_id, name) if self.keep_history else (block_id, name)
        self.records[key] = value.detach().clone()

    def get(self, block_id: str, name: str, t: int | None = None):
        key = (t, block_id, name) if self.keep_history else (block_id, name)
        return self.records[key]


def register_attention_probe(model: "MultiBranchDenoiser", block: str | None = None) -> AttentionProbe:
    """Attach a probe to ``model``; captures fill in during subsequent forwards."""
    if block is not None and block not in model.block_ids:
        raise KeyError(f"unknown attention block {block!r}; have {model.block_ids}")
    probe = AttentionProbe(block=block)
    model.probes.append(probe)
    return probe


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    """Standard sinusoidal embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


def _proj(d_in: int, d_out: int, zero: bool = False) -> nn.Parameter:
    w = torch.zeros(d_in, d_out)
    if not zero:
        bound = 1.0 / math.sqrt(d_in)
        w.uniform_(-bound, bound)
    return nn.Parameter(w)


class CoupledAttentionBlock(nn.Module):
    """Parameter container for one attention block: base projections, per-role
    deltas (foreground/background), and the global share projections. The
    cross-branch orchestration lives in ``MultiBranchDenoiser``."""

    def __init__(self, channels: int, heads: int, d_txt: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm_self = nn.GroupNorm(groups, channels)
        self.norm_cross = nn.GroupNorm(groups, channels)
        self.base = nn.ParameterDict(
            {
                "sq": _proj(channels, channels),
                "sk": _proj(channels, channels),
                "sv": _proj(channels, channels),
                "so": _proj(channels, channels, zero=True),
                "cq": _proj(channels, channels),
                "ck": _proj(d_txt, channels),
                "cv": _proj(d_txt, channels),
                "co": _proj(channels, channels, zero=True),
            }
        )
        self.delta = nn.ParameterDict(
            {
                f"{role}_{name}": _proj(*self.base[name].shape, zero=True)
                for role in ("foreground", "background")
                for name in ("sq", "sk", "sv", "so", "cq", "ck", "cv", "co")
            }
        )
        self.w_kgl = nn.Parameter(self.base["sk"].detach().clone())
        self.w_vgl = nn.Parameter(self.base["sv"].detach().clone())

    def weights(self, role_kind: str, which: str) -> attn.ProjectionWeights:
        prefix = "s" if which == "self" else "c"
        names = [prefix + p for p in ("q", "k", "v", "o")]
        mats = [self.base[n] for n in names]
        if role_kind in ("foreground", "background"):
            mats = [m + self.delta[f"{role_kind}_{n}"] for m, n in zip(mats, names)]
        return attn.ProjectionWeights(*mats, heads=self.heads)

    def share(self) -> attn.GlobalShareWeights:
        return attn.GlobalShareWeights(self.w_kgl, self.w_vgl)


def _flatten(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(1, 2)


def _unflatten(z: Tensor, res: int) -> Tensor:
    n, hw, c = z.shape
    return z.transpose(1, 2).reshape(n, c, res, res)


def _gather_token_maps(maps: Tensor, idx: Tensor) -> Tensor:
    """Head-averaged token columns with per-sample indices: (N,h,hw,s),(N,) -> (N,hw)."""
    n, h, hw, _ = maps.shape
    gathered = maps.gather(-1, idx.view(n, 1, 1, 1).expand(n, h, hw, 1))
    return gathered.squeeze(-1).mean(dim=1)


def _substitute_token_column(maps: Tensor, idx: Tensor, column: Tensor) -> Tensor:
    """Per-sample column substitution, broadcast to heads, rows renormalized."""
    n, h, hw, _ = maps.shape
    scattered = maps.scatter(
        -1,
        idx.view(n, 1, 1, 1).expand(n, h, hw, 1),
        column.view(n, 1, hw, 1).expand(n, h, hw, 1),
    )
    return attn.renormalize_rows(scattered)


class MultiBranchDenoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c0, c1 = cfg.channels
        temb = 4 * c0
        self.temb_dim = temb
        self.time_mlp = nn.Sequential(nn.Linear(c0, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.role_emb = nn.Embedding(cfg.k_max + 2, temb)
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.d_txt)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.seq_len, cfg.d_txt))
        nn.init.normal_(self.pos_emb, std=0.02)

        g = cfg.norm_groups
        self.conv_in = nn.Conv2d(4, c0, 3, padding=1)
        self.block_d0 = ResBlock(c0, c0, temb, g)
        self.down0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.block_d1 = ResBlock(c0, c1, temb, g)
        self.attn_down = CoupledAttentionBlock(c1, cfg.heads, cfg.d_txt, g)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.block_m1 = ResBlock(c1, c1, temb, g)
        self.attn_mid = CoupledAttentionBlock(c1, cfg.heads, cfg.d_txt, g)
        self.block_m2 = ResBlock(c1, c1, temb, g)
        self.up1_conv = nn.Conv2d(c1, c1, 3, padding=1)
        self.block_u1 = ResBlock(2 * c1, c1, temb, g)
        self.attn_up = CoupledAttentionBlock(c1, cfg.heads, cfg.d_txt, g)
        self.up0_conv = nn.Conv2d(c1, c0, 3, padding=1)
        self.block_u0 = ResBlock(2 * c0, c0, temb, g)
        self.norm_out = nn.GroupNorm(g, c0)
        self.conv_out = nn.Conv2d(c0, 4, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

        res1, res2 = cfg.image_size // 2, cfg.image_size // 4
        self._blocks = (
            ("down" + str(res1), self.attn_down, res1),
            ("mid" + str(res2), self.attn_mid, res2),
            ("up" + str(res1), self.attn_up, res1),
        )
        self.block_ids = tuple(b[0] for b in self._blocks)
        self.probes: list[AttentionProbe] = []

    # ------------------------------------------------------------------
    # prompts

    def _embed_ids(self, ids: Tensor) -> Tensor:
        if ids.max() >= self.cfg.vocab_size or ids.min() < 0:
            raise ValueError("token id outside vocabulary")
        return self.token_emb(ids) + self.pos_emb[None, : ids.shape[-1], :]

    def encode_prompt(self, tokens: TokenBatch) -> dict[BranchRole, Tensor]:
        """Per-branch text embeddings (B, s, d_txt); lookup plus learned positions."""
        out = {GLOBAL: self._embed_ids(tokens.global_ids), BACKGROUND: self._embed_ids(tokens.background_ids)}
        for i in range(1, tokens.k + 1):
            out[foreground(i)] = self._embed_ids(tokens.layer_ids[:, i - 1])
        return out

    def _role_index(self, role: BranchRole) -> int:
        if role.kind == "global":
            return 0
        if role.kind == "background":
            return 1
        return 1 + role.index

    # ------------------------------------------------------------------
    # forward

    def forward_multi_branch(
        self,
        noisy: dict[BranchRole, Tensor],
        t: Tensor,
        tokens: TokenBatch,
        probe: AttentionProbe | None = None,
        mask_override: float | None = None,
    ) -> dict[BranchRole, Tensor]:
        """Predict per-branch noise; branches couple through the global stream.

        ``noisy`` maps every role of ``branch_roles(tokens.k)`` to a
        (B, 4, H, W) tensor; ``t`` is the shared (B,) timestep vector.
        ``mask_override`` replaces every derived spatial mask with a constant
        (test hook for the mask-zero reduction property).
        """
        k = tokens.k
        if k > self.cfg.k_max:
            raise ValueError(f"K={k} exceeds K_max={self.cfg.k_max}")
        roles = branch_roles(k)
        missing = [str(r) for r in roles if r not in noisy]
        if missing:
            raise ValueError(f"missing branches: {', '.join(missing)}")
        probes = [p for p in ([probe] if probe else []) + self.probes if p is not None]

        x = torch.stack([noisy[r] for r in roles])  # (R, B, 4, H, W)
        r_count, b = x.shape[0], x.shape[1]
        flat = x.reshape(r_count * b, *x.shape[2:])

        temb = self.time_mlp(timestep_embedding(t, self.cfg.channels[0]))
        role_idx = torch.tensor([self._role_index(r) for r in roles])
        emb = (temb[None, :, :] + self.role_emb(role_idx)[:, None, :]).reshape(r_count * b, -1)

        text = self.encode_prompt(tokens)
        text_list = [text[r] for r in roles]

        h = self.conv_in(flat)
        h = self.block_d0(h, emb)
        skip0 = h
        h = self.down0(h)
        h = self.block_d1(h, emb)
        h = self._coupled_attention(0, h, roles, text_list, tokens, probes, mask_override, int(t[0]))
        skip1 = h
        h = self.down1(h)
        h = self.block_m1(h, emb)
        h = self._coupled_attention(1, h, roles, text_list, tokens, probes, mask_override, int(t[0]))
        h = self.block_m2(h, emb)
        h = self.up1_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.block_u1(torch.cat([h, skip1], dim=1), emb)
        h = self._coupled_attention(2, h, roles, text_list, tokens, probes, mask_override, int(t[0]))
        h = self.up0_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.block_u0(torch.cat([h, skip0], dim=1), emb)
        out = self.conv_out(F.silu(self.norm_out(h)))
        out = out.reshape(r_count, b, *out.shape[1:])
        return {role: out[i] for i, role in enumerate(roles)}

    def forward_single(self, role: BranchRole, x: Tensor, t: Tensor, token_ids: Tensor) -> Tensor:
        """Independent single-branch forward: no caches, no coupling.

        Equals the multi-branch output for this role when both mechanism
        toggles are off.
        """
        emb = self.time_mlp(timestep_embedding(t, self.cfg.channels[0]))
        emb = emb + self.role_emb(torch.tensor([self._role_index(role)]))
        text = self._embed_ids(token_ids)

        h = self.conv_in(x)
        h = self.block_d0(h, emb)
        skip0 = h
        h = self.down0(h)
        h = self.block_d1(h, emb)
        h = self._plain_attention(self.attn_down, h, role.kind, text)
        skip1 = h
        h = self.down1(h)
        h = self.block_m1(h, emb)
        h = self._plain_attention(self.attn_mid, h, role.kind, text)
        h = self.block_m2(h, emb)
        h = self.up1_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.block_u1(torch.cat([h, skip1], dim=1), emb)
        h = self._plain_attention(self.attn_up, h, role.kind, text)
        h = self.up0_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.block_u0(torch.cat([h, skip0], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))

    # ------------------------------------------------------------------
    # attention orchestration

    def _plain_attention(self, block: CoupledAttentionBlock, h: Tensor, role_kind: str, text: Tensor) -> Tensor:
        res = h.shape[-1]
        z = _flatten(block.norm_self(h))
        h = h + _unflatten(attn.self_attention(z, block.weights(role_kind, "self")), res)
        zc = _flatten(block.norm_cross(h))
        w = block.weights(role_kind, "cross")
        probs = attn.cross_attention_map(zc, text, w)
        return h + _unflatten(attn.attention_output(probs, text, w), res)

    def _mask_sigma(self, res: int) -> float:
        # sigma is specified at the reweight resolution; scale with the grid.
        return self.cfg.mask_sigma * res / self.cfg.reweight_resolution

    def _coupled_attention(
        self,
        block_index: int,
        h: Tensor,
        roles: list[BranchRole],
        text_list: list[Tensor],
        tokens: TokenBatch,
        probes: list[AttentionProbe],
        mask_override: float | None,
        t0: int,
    ) -> Tensor:
        block_id, block, res = self._blocks[block_index]
        cfg = self.cfg
        r_count = len(roles)
        b = h.shape[0] // r_count
        k = r_count - 2
        hw = res * res
        hs = h.reshape(r_count, b, *h.shape[1:])
        watching = [p for p in probes if p.wants(block_id)]

        # --- global branch -------------------------------------------------
        xg = hs[0]
        zg = _flatten(block.norm_self(xg))
        wg_self = block.weights("global", "self")
        xg = xg + _unflatten(attn.self_attention(zg, wg_self), res)
        zcg = _flatten(block.norm_cross(xg))
        wg_cross = block.weights("global", "cross")
        map_g = attn.cross_attention_map(zcg, text_list[0], wg_cross)
        xg = xg + _unflatten(attn.attention_output(map_g, text_list[0], wg_cross), res)

        g_hidden = zg if cfg.couple_global else zg.detach()
        g_map = map_g if cfg.couple_global else map_g.detach()
        for p in watching:
            p.store(t0, block_id, "global_map", map_g)

        need_masks = cfg.joint_attention_on
        need_reweight = cfg.reweighting_on and res == cfg.reweight_resolution

        # --- foreground branches (batched over layers and samples) ---------
        outputs = [xg]
        fg_binary = None
        if k > 0:
            xf = hs[1 : 1 + k].reshape(k * b, *h.shape[1:])
            text_f = torch.stack([text_list[1 + i] for i in range(k)]).reshape(k * b, *text_list[0].shape[1:])
            idx_g = tokens.subject_global.transpose(0, 1).reshape(k * b)
            idx_l = tokens.subject_layer.transpose(0, 1).reshape(k * b)
            g_map_tiled = g_map.repeat(k, 1, 1, 1)

            m_g_cols = None
            if need_masks or need_reweight:
                m_g_cols = _gather_token_maps(g_map_tiled, idx_g)

            masks = None
            if need_masks:
                fg_binary = attn.binarize_token_map(m_g_cols, cfg.mask_threshold)
                masks = attn.gaussian_blur_2d(fg_binary, (res, res), self._mask_sigma(res)).clamp(0, 1)
                if mask_override is not None:
                    masks = torch.full_like(masks, float(mask_override))

            wf_self = block.weights("foreground", "self")
            wf_cross = block.weights("foreground", "cross")

            self_bias = None
            if cfg.self_attention_bias and need_reweight:
                # Optional second integration hook: bias this block's layer
                # self-attention with the reweighted column computed from the
                # pre-self-attention features (softmax is shift-invariant, so
                # only relative log values matter).
                pre_map = attn.cross_attention_map(_flatten(block.norm_cross(xf)), text_f, wf_cross)
                pre_hat = attn.reweight_layer_map(m_g_cols, _gather_token_maps(pre_map, idx_l))
                self_bias = torch.log(pre_hat + attn.MASK_EPS)

            zf = _flatten(block.norm_self(xf))
            if cfg.joint_attention_on:
                sa, self_probs = attn.partial_joint_self_attention(
                    zf,
                    g_hidden.repeat(k, 1, 1),
                    masks,
                    wf_self,
                    block.share(),
                    return_probs=True,
                    position_bias=self_bias,
                )
            else:
                sa, self_probs = attn.self_attention(zf, wf_self, position_bias=self_bias, return_probs=True)
            xf = xf + _unflatten(sa, res)

            zcf = _flatten(block.norm_cross(xf))
            map_l = attn.cross_attention_map(zcf, text_f, wf_cross)
            m_l_cols = m_hat = None
            if need_reweight:
                m_l_cols = _gather_token_maps(map_l, idx_l)
                m_hat = attn.reweight_layer_map(m_g_cols, m_l_cols)
                map_l = _substitute_token_column(map_l, idx_l, m_hat)
            xf = xf + _unflatten(attn.attention_output(map_l, text_f, wf_cross), res)

            for p in watching:
                for i in range(k):
                    sl = slice(i * b, (i + 1) * b)
                    if m_g_cols is not None:
                        p.store(t0, block_id, f"fg{i + 1}/m_g", m_g_cols[sl])
                    if m_l_cols is not None:
                        p.store(t0, block_id, f"fg{i + 1}/m_l", m_l_cols[sl])
                    if m_hat is not None:
                        p.store(t0, block_id, f"fg{i + 1}/m_hat", m_hat[sl])
                    if masks is not None:
                        p.store(t0, block_id, f"fg{i + 1}/mask", masks[sl])
                    if self_probs is not None:
                        p.store(t0, block_id, f"fg{i + 1}/self_probs", self_probs[sl])
            outputs.extend(xf.reshape(k, b, *h.shape[1:]))

        # --- background branch ---------------------------------------------
        xb = hs[-1]
        zb = _flatten(block.norm_self(xb))
        wb_self = block.weights("background", "self")
        if cfg.joint_attention_on:
            if k > 0 and fg_binary is not None:
                union_parts = fg_binary.reshape(k, b, hw)
                bg_binary = attn.background_mask(list(union_parts))
            else:
                bg_binary = torch.ones(b, hw, dtype=h.dtype)
            bg_mask = attn.gaussian_blur_2d(bg_binary, (res, res), self._mask_sigma(res)).clamp(0, 1)
            if mask_override is not None:
                bg_mask = torch.full_like(bg_mask, float(mask_override))
            sa_b = attn.partial_joint_self_attention(zb, g_hidden, bg_mask, wb_self, block.share())
            for p in watching:
                p.store(t0, block_id, "bg/mask", bg_mask)
        else:
            sa_b = attn.self_attention(zb, wb_self)
        xb = xb + _unflatten(sa_b, res)
        zcb = _flatten(block.norm_cross(xb))
        wb_cross = block.weights("background", "cross")
        map_b = attn.cross_attention_map(zcb, text_list[-1], wb_cross)
        xb = xb + _unflatten(attn.attention_output(map_b, text_list[-1], wb_cross), res)
        outputs.append(xb)

        return torch.stack(outputs).reshape(r_count * b, *h.shape[1:])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MultiBranchDenoiser, path, step: int | None = None, schedule: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(model.cfg),
            "state": model.state_dict(),
            "step": step,
            "schedule": schedule,
        },
        path,
    )
    return path


class MissingCheckpointError(FileNotFoundError):
    pass


def load_checkpoint(path) -> tuple[MultiBranchDenoiser, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    cfg = DenoiserConfig(**payload["config"])
    model = MultiBranchDenoiser(cfg)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload
