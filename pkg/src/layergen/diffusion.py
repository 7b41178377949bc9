"""DDPM noise schedule, multi-branch training, and the DDIM sampler.

Training targets per branch (all scaled to [-1, 1]):

* global:     composite of the sample, with a constant-one alpha channel
* background: the background RGB, constant-one alpha channel
* foreground: (premultiplied color, alpha) — premultiplied targets keep the
  color channels well-defined where the layer is fully transparent

Within one sample every branch is noised at the same timestep; the noise
tensors themselves are independent per branch by default (``shared_eps``
replays one tensor across all branches). The alpha channel of the global and
background branches carries no information and is excluded from the loss.

Sampling runs deterministic DDIM (eta = 0 by default): every branch starts
from its own seeded gaussian and all branches step down the same timestep
ladder, one multi-branch forward per step. Per-branch noise streams are keyed
by (seed, branch name) so a single branch resampled in isolation sees the
identical stream — with both coupling mechanisms off, the joint trajectory
factorizes into independent single-branch trajectories.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .compositing import (
    AlphaMap,
    LayeredImage,
    RgbaLayer,
    RgbImage,
    composite_closed_form,
    premultiply,
)
from .denoiser import (
    BACKGROUND,
    GLOBAL,
    AttentionProbe,
    BranchRole,
    MultiBranchDenoiser,
    TokenBatch,
    branch_roles,
    collate_prompts,
    foreground,
)
from .synthdata import PromptSpec


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta schedule plus derived tables, indexed 0..T with alpha_bar[0] = 1."""

    kind: str
    timesteps: int
    betas: Tensor       # (T+1,), betas[0] unused (= 0)
    alphas: Tensor      # (T+1,)
    alpha_bars: Tensor  # (T+1,), strictly decreasing, alpha_bars[0] = 1

    def validate(self):
        t = self.timesteps
        if self.betas.shape != (t + 1,):
            raise ValueError("schedule tables must have length T+1")
        inner = self.betas[1:]
        if inner.min() <= 0 or inner.max() >= 1:
            raise ValueError("betas must lie strictly inside (0, 1)")
        if self.kind == "linear" and not torch.all(inner[1:] > inner[:-1]):
            raise ValueError("linear betas must increase strictly")
        if not torch.all(self.alpha_bars[1:] < self.alpha_bars[:-1]):
            raise ValueError("alpha_bar must decrease strictly")
        if self.alpha_bars[0] != 1.0:
            raise ValueError("alpha_bar[0] must be 1")


def schedule_tables(
    kind: str = "linear",
    timesteps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    betas = torch.zeros(timesteps + 1, dtype=torch.float64)
    betas[1:] = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    sched = NoiseSchedule(kind=kind, timesteps=timesteps, betas=betas, alphas=alphas, alpha_bars=alpha_bars)
    sched.validate()
    return sched


def add_noise(x0: Tensor, t, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Forward diffusion q-sample: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if t.min() < 0 or t.max() > sched.timesteps:
        raise ValueError(f"timestep out of range 0..{sched.timesteps}")
    abar = sched.alpha_bars[t].to(x0.dtype)
    while abar.ndim < x0.ndim:
        abar = abar.unsqueeze(-1)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


def branch_targets(img: LayeredImage) -> dict[BranchRole, Tensor]:
    """Per-branch x0 tensors (4, H, W) in [-1, 1]; see module docstring."""
    out = {}
    comp = composite_closed_form(img).values
    bg = img.background.values
    ones = np.ones(img.shape)
    out[GLOBAL] = _to_tensor(np.concatenate([comp, ones[:, :, None]], axis=2))
    out[BACKGROUND] = _to_tensor(np.concatenate([bg, ones[:, :, None]], axis=2))
    for i, layer in enumerate(img.foregrounds, start=1):
        pm = premultiply(layer) if not layer.premultiplied else layer
        stacked = np.concatenate([pm.color.values, pm.alpha.values[:, :, None]], axis=2)
        out[foreground(i)] = _to_tensor(stacked)
    return out


def _to_tensor(hwc: np.ndarray) -> Tensor:
    return torch.from_numpy((hwc * 2.0 - 1.0).transpose(2, 0, 1).copy()).float()


@dataclass
class TrainBatch:
    """One optimizer step's worth of samples, padded to a shared K."""

    x0: dict[BranchRole, Tensor]  # role -> (B, 4, H, W)
    tokens: TokenBatch

    @property
    def batch(self) -> int:
        return self.tokens.batch

    @property
    def k(self) -> int:
        return self.tokens.k


def build_train_batch(samples: list[tuple[LayeredImage, PromptSpec]], k: int | None = None) -> TrainBatch:
    """Collate samples; images with fewer layers are padded with empty layers."""
    if not samples:
        raise ValueError("empty batch")
    ks = [img.k for img, _ in samples]
    k = max(ks) if k is None else k
    h, w = samples[0][0].shape
    stacked: dict[BranchRole, list[Tensor]] = {r: [] for r in branch_roles(k)}
    blank = torch.full((4, h, w), -1.0)
    for img, _ in samples:
        targets = branch_targets(img)
        for role in branch_roles(k):
            if role.kind == "foreground" and role not in targets:
                stacked[role].append(blank)  # empty pad layer: alpha 0, color 0
            else:
                stacked[role].append(targets[role])
    tokens = collate_prompts([p for _, p in samples], k=k)
    return TrainBatch(x0={r: torch.stack(v) for r, v in stacked.items()}, tokens=tokens)


# Channels entering the loss, per branch kind: the constant alpha channel of
# the global and background branches is excluded.
_LOSS_CHANNELS = {"global": 3, "background": 3, "foreground": 4}


@dataclass
class TrainStepResult:
    loss: float
    per_branch: dict[str, float]


def train_step(
    model: MultiBranchDenoiser,
    batch: TrainBatch,
    sched: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    shared_eps: bool = False,
) -> TrainStepResult:
    """One noise-prediction step: every branch of a sample shares one timestep.

    Loss is the mean over (branch, sample) pairs of the per-pair MSE over the
    branch's loss channels. Non-finite losses abort with diagnostics.
    """
    roles = branch_roles(batch.k)
    b = batch.batch
    t = torch.randint(1, sched.timesteps + 1, (b,), generator=generator)
    shape = batch.x0[GLOBAL].shape

    shared = torch.randn(shape, generator=generator) if shared_eps else None
    eps, noisy = {}, {}
    for role in roles:
        eps[role] = shared if shared_eps else torch.randn(shape, generator=generator)
        noisy[role] = add_noise(batch.x0[role], t, eps[role], sched)

    preds = model.forward_multi_branch(noisy, t, batch.tokens)

    pair_losses = []
    branch_sums: dict[str, list[Tensor]] = {"global": [], "background": [], "foreground": []}
    for role in roles:
        c = _LOSS_CHANNELS[role.kind]
        err = (preds[role][:, :c] - eps[role][:, :c]) ** 2
        per_sample = err.mean(dim=(1, 2, 3))  # (B,)
        pair_losses.append(per_sample)
        branch_sums[role.kind].append(per_sample)
    loss = torch.cat(pair_losses).mean()

    if not torch.isfinite(loss):
        details = {
            kind: float(torch.cat(v).mean()) if v else float("nan")
            for kind, v in branch_sums.items()
        }
        raise TrainingDiverged(f"non-finite loss at t={t.tolist()}: per-branch means {details}")

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()

    per_branch = {
        kind: float(torch.cat(v).detach().mean()) for kind, v in branch_sums.items() if v
    }
    return TrainStepResult(loss=float(loss.detach()), per_branch=per_branch)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SamplerConfig:
    steps: int = 50
    eta: float = 0.0
    seed: int = 0

    def validate(self, timesteps: int):
        if not 1 <= self.steps <= timesteps:
            raise ValueError(f"sampler steps must lie in 1..{timesteps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


@dataclass
class SampleResult:
    layered: LayeredImage
    global_image: RgbImage
    fg_masks: np.ndarray | None = None      # (K, H, W) upsampled from the latent grid
    fg_masks_raw: np.ndarray | None = None  # (K, hw) at the reweight resolution


def derive_seed(base: int, name: str) -> int:
    """Process-stable per-stream seed (hashlib, not the salted built-in hash)."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return (int(base) ^ int.from_bytes(digest, "little")) & 0x7FFFFFFFFFFFFFFF


def _ddim_timesteps(timesteps: int, steps: int) -> list[int]:
    ts = np.unique(np.linspace(1, timesteps, steps).round().astype(int))[::-1]
    return [int(v) for v in ts]


def _ddim_step(x: Tensor, eps_pred: Tensor, t_now: int, t_next: int, sched: NoiseSchedule, eta: float, gen):
    abar_t = float(sched.alpha_bars[t_now])
    abar_n = float(sched.alpha_bars[t_next])
    x0_hat = (x - math.sqrt(1.0 - abar_t) * eps_pred) / math.sqrt(abar_t)
    x0_hat = x0_hat.clamp(-1.0, 1.0)
    sigma = 0.0
    if eta > 0 and t_next > 0:
        sigma = (
            eta
            * math.sqrt((1.0 - abar_n) / (1.0 - abar_t))
            * math.sqrt(1.0 - abar_t / abar_n)
        )
    dir_coeff = math.sqrt(max(1.0 - abar_n - sigma**2, 0.0))
    x_next = math.sqrt(abar_n) * x0_hat + dir_coeff * eps_pred
    if sigma > 0:
        x_next = x_next + sigma * torch.randn(x.shape, generator=gen)
    return x_next


def _decode_branch(x: Tensor) -> np.ndarray:
    return ((x.clamp(-1.0, 1.0) + 1.0) / 2.0)[0].numpy().transpose(1, 2, 0)


ALPHA_FLOOR = 1e-3


@torch.no_grad()
def sample(
    model: MultiBranchDenoiser,
    sched: NoiseSchedule,
    prompt: PromptSpec,
    sampler: SamplerConfig,
    capture_masks: bool = False,
    probe: AttentionProbe | None = None,
) -> SampleResult:
    """Denoise all branches simultaneously into a LayeredImage.

    Deterministic for a fixed seed at eta = 0. Foreground tensors decode as
    (premultiplied color, alpha): alpha is clamped to [0, 1] and color is
    un-premultiplied where alpha exceeds a small floor, zero elsewhere.
    """
    sampler.validate(sched.timesteps)
    k = prompt.k
    if k > model.cfg.k_max:
        raise ValueError(f"prompt K={k} exceeds K_max={model.cfg.k_max}")
    tokens = collate_prompts([prompt])
    roles = branch_roles(k)
    size = model.cfg.image_size

    gens = {
        r: torch.Generator().manual_seed(derive_seed(sampler.seed, str(r))) for r in roles
    }
    x = {r: torch.randn(1, 4, size, size, generator=gens[r]) for r in roles}

    mask_probe = probe
    if capture_masks and mask_probe is None:
        mask_probe = AttentionProbe(block=f"down{model.cfg.reweight_resolution}")

    ts = _ddim_timesteps(sched.timesteps, sampler.steps)
    for i, t_now in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        t_vec = torch.full((1,), t_now, dtype=torch.long)
        preds = model.forward_multi_branch(x, t_vec, tokens, probe=mask_probe)
        x = {
            r: _ddim_step(x[r], preds[r], t_now, t_next, sched, sampler.eta, gens[r])
            for r in roles
        }

    global_rgb = RgbImage(_decode_branch(x[GLOBAL])[:, :, :3])
    background = RgbImage(_decode_branch(x[BACKGROUND])[:, :, :3])
    layers = []
    for i in range(1, k + 1):
        dec = _decode_branch(x[foreground(i)])
        alpha = np.clip(dec[:, :, 3], 0.0, 1.0)
        premult = np.minimum(dec[:, :, :3], alpha[:, :, None])  # enforce color <= alpha
        layers.append(RgbaLayer(_unpremultiply_values(premult, alpha), AlphaMap(alpha)))
    layered = LayeredImage(background, tuple(layers))

    fg_masks = fg_masks_raw = None
    if capture_masks and k > 0:
        res = model.cfg.reweight_resolution
        block_id = f"down{res}"
        raw = []
        for i in range(1, k + 1):
            raw.append(mask_probe.get(block_id, f"fg{i}/mask")[0].numpy())
        fg_masks_raw = np.stack(raw)
        fg_masks = np.stack([_upsample_nearest(m.reshape(res, res), size) for m in raw])
    return SampleResult(layered=layered, global_image=global_rgb, fg_masks=fg_masks, fg_masks_raw=fg_masks_raw)


def _unpremultiply_values(premult: np.ndarray, alpha: np.ndarray) -> RgbImage:
    safe = np.where(alpha > ALPHA_FLOOR, alpha, 1.0)[:, :, None]
    color = np.where(alpha[:, :, None] > ALPHA_FLOOR, premult / safe, 0.0)
    return RgbImage(np.clip(color, 0.0, 1.0))


def _upsample_nearest(grid: np.ndarray, size: int) -> np.ndarray:
    factor = size // grid.shape[0]
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)


@torch.no_grad()
def sample_single_branch(
    model: MultiBranchDenoiser,
    sched: NoiseSchedule,
    role: BranchRole,
    token_ids: Tensor,
    sampler: SamplerConfig,
) -> Tensor:
    """One branch run in isolation with the same per-branch noise stream.

    With both mechanism toggles off this reproduces the branch's trajectory
    from the joint ``sample`` run.
    """
    sampler.validate(sched.timesteps)
    size = model.cfg.image_size
    gen = torch.Generator().manual_seed(derive_seed(sampler.seed, str(role)))
    x = torch.randn(1, 4, size, size, generator=gen)
    ts = _ddim_timesteps(sched.timesteps, sampler.steps)
    for i, t_now in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        t_vec = torch.full((1,), t_now, dtype=torch.long)
        pred = model.forward_single(role, x, t_vec, token_ids)
        x = _ddim_step(x, pred, t_now, t_next, sched, sampler.eta, gen)
    return x
