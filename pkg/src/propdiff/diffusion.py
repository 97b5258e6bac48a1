"""DDPM over CVAE latents with a condition-aware 1D U-Net.

Step indices run ``1..T``; ``beta[t - 1]`` is the noise added at step ``t``
and ``alpha_bar_0 = 1``. The denoiser predicts the clean latent, and the
reverse step uses the Gaussian posterior of the forward chain with fixed
variance.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from .checkpoint import arrays_to_state, load_checkpoint, save_checkpoint, state_to_arrays
from .training import batches, check_finite, make_optimizer, resolve_dtype, seed_everything, torch_generator_for
from .validation import check_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta < 0) or np.any(beta >= 1):
            raise ValueError("beta values must lie in [0, 1)")
        object.__setattr__(self, "beta", beta)

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def alpha_bar_at(self, t):
        """``alpha_bar_t`` with ``alpha_bar_0 = 1``; accepts ints or integer arrays."""
        return np.concatenate([[1.0], self.alpha_bar])[t]

    def posterior_variance(self) -> np.ndarray:
        """``(1 - abar_{t-1}) / (1 - abar_t) * beta_t`` for t = 1..T (0 where undefined)."""
        ab = self.alpha_bar
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            var = (1.0 - ab_prev) / (1.0 - ab) * self.beta
        return np.nan_to_num(var)

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist()}


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        if not 0 < beta_start <= beta_end < 1:
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        beta = np.linspace(beta_start, beta_end, T)
    elif kind == "cosine":
        s = 0.008
        x = np.linspace(0, T, T + 1)
        f = np.cos((x / T + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(beta)


def _check_t(t, schedule: NoiseSchedule, lo: int = 1):
    ts = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if np.any(ts < lo) or np.any(ts > schedule.T):
        raise ValueError(f"step t={t} outside [{lo}, {schedule.T}]")


def _coef(values, t, like):
    """Per-step coefficient broadcast against ``like`` (scalar t or a batch of steps)."""
    if torch.is_tensor(like):
        c = torch.as_tensor(np.asarray(values), dtype=like.dtype)[torch.as_tensor(t)]
        return c[..., None] if c.dim() else c
    c = np.asarray(values)[np.asarray(t)]
    return c[..., None] if np.ndim(c) else c


def _sqrt(x):
    return torch.sqrt(x) if torch.is_tensor(x) else np.sqrt(x)


def forward_step(z_prev, t, schedule: NoiseSchedule, eps):
    """One forward noising step ``z_{t-1} -> z_t``."""
    _check_t(t, schedule)
    a = _coef(schedule.alpha, np.asarray(t) - 1, z_prev)
    return _sqrt(a) * z_prev + _sqrt(1.0 - a) * eps


def forward_marginal(z0, t, schedule: NoiseSchedule, eps):
    """Closed-form ``z_t`` given ``z_0``; ``t = 0`` returns ``z_0``."""
    _check_t(t, schedule, lo=0)
    t_idx = t if torch.is_tensor(t) else np.asarray(t)
    ab = _coef(np.concatenate([[1.0], schedule.alpha_bar]), t_idx, z0)
    return _sqrt(ab) * z0 + _sqrt(1.0 - ab) * eps


def posterior_mean_variance(z_t, z0_hat, t, schedule: NoiseSchedule):
    _check_t(t, schedule)
    ab_all = np.concatenate([[1.0], schedule.alpha_bar])
    ab_t = ab_all[t]
    ab_prev = ab_all[t - 1]
    beta_t = schedule.beta[t - 1]
    alpha_t = 1.0 - beta_t
    denom = 1.0 - ab_t
    if denom <= 0:
        # all betas zero up to t: the chain is noiseless, z_t == z_0
        return z0_hat * 1.0, 0.0
    c0 = math.sqrt(ab_prev) * beta_t / denom
    ct = math.sqrt(alpha_t) * (1.0 - ab_prev) / denom
    var = (1.0 - ab_prev) / denom * beta_t
    return c0 * z0_hat + ct * z_t, var


def posterior_step(z_t, z0_hat, t: int, schedule: NoiseSchedule, noise):
    """Sample ``z_{t-1}``; the injected noise is dropped at ``t = 1``."""
    if t == 0:
        raise ValueError("posterior_step needs t >= 1")
    mean, var = posterior_mean_variance(z_t, z0_hat, t, schedule)
    if t == 1 or var == 0:
        return mean
    return mean + math.sqrt(var) * noise


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t):
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
        args = t.to(torch.float64)[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        if self.dim % 2:
            emb = F.pad(emb, (0, 1))
        return emb


def _norm(ch: int) -> nn.GroupNorm:
    groups = math.gcd(8, ch)
    return nn.GroupNorm(groups, ch)


class ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.n1 = _norm(ch)
        self.c1 = nn.Conv1d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.n2 = _norm(ch)
        self.c2 = nn.Conv1d(ch, ch, 3, padding=1)

    def forward(self, x, emb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.emb(emb)[..., None]
        h = self.c2(F.silu(self.n2(h)))
        return x + h


class Bottleneck(nn.Module):
    """Self-attention over latent positions, then cross-attention to (condition, time) tokens."""

    def __init__(self, ch: int, emb_dim: int, n_heads: int):
        super().__init__()
        self.self_norm = nn.LayerNorm(ch)
        self.self_attn = nn.MultiheadAttention(ch, n_heads, batch_first=True)
        self.cross_norm = nn.LayerNorm(ch)
        self.cross_attn = nn.MultiheadAttention(ch, n_heads, batch_first=True)
        self.cond_token = nn.Linear(emb_dim, ch)
        self.time_token = nn.Linear(emb_dim, ch)

    def forward(self, x, cond_emb, time_emb):
        h = x.transpose(1, 2)
        q = self.self_norm(h)
        h = h + self.self_attn(q, q, q, need_weights=False)[0]
        mem = torch.stack([self.cond_token(cond_emb), self.time_token(time_emb)], dim=1)
        h = h + self.cross_attn(self.cross_norm(h), mem, mem, need_weights=False)[0]
        return h.transpose(1, 2)


class UNet1DDenoiser(nn.Module):
    """Predicts the clean latent from ``(z_t, t, condition)``.

    The latent of width ``m`` is treated as a one-channel signal of length
    ``m``; ``m`` must be divisible by ``2 ** levels``.
    """

    def __init__(self, latent_dim, cond_dim, base_channels=32, levels=2, emb_dim=64, n_heads=4):
        super().__init__()
        if latent_dim % (2**levels):
            raise ValueError(f"latent_dim {latent_dim} must be divisible by 2**levels = {2 ** levels}")
        if base_channels % n_heads:
            raise ValueError(f"base_channels {base_channels} not divisible by n_heads {n_heads}")
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.time_embed = SinusoidalEmbedding(emb_dim)
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_proj = nn.Sequential(nn.Linear(cond_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.null_cond = nn.Parameter(torch.zeros(cond_dim))
        self.pos = nn.Parameter(torch.randn(base_channels, latent_dim) * 0.02)
        self.inp = nn.Conv1d(1, base_channels, 3, padding=1)
        self.down_blocks = nn.ModuleList([ResBlock(base_channels, emb_dim) for _ in range(levels)])
        self.downs = nn.ModuleList(
            [nn.Conv1d(base_channels, base_channels, 2, stride=2) for _ in range(levels)]
        )
        self.mid = ResBlock(base_channels, emb_dim)
        self.attn = Bottleneck(base_channels, emb_dim, n_heads)
        self.ups = nn.ModuleList(
            [nn.ConvTranspose1d(base_channels, base_channels, 2, stride=2) for _ in range(levels)]
        )
        self.up_blocks = nn.ModuleList([ResBlock(base_channels, emb_dim) for _ in range(levels)])
        self.out = nn.Sequential(_norm(base_channels), nn.SiLU(), nn.Conv1d(base_channels, 1, 3, padding=1))

    def forward(self, z_t, t, cond=None, cond_mask=None):
        """``cond_mask`` (bool, per row) selects rows that use the learned null condition."""
        if z_t.dim() != 2 or z_t.shape[1] != self.latent_dim:
            raise ValueError(f"z_t: expected shape (N, {self.latent_dim}), got {tuple(z_t.shape)}")
        n = z_t.shape[0]
        null = self.null_cond.expand(n, -1)
        if cond is None:
            cond = null
        else:
            if cond.shape != (n, self.cond_dim):
                raise ValueError(f"cond: expected shape ({n}, {self.cond_dim}), got {tuple(cond.shape)}")
            if cond_mask is not None:
                cond = torch.where(cond_mask[:, None], null, cond)
        t = torch.as_tensor(t).expand(n) if torch.as_tensor(t).dim() == 0 else torch.as_tensor(t)
        t_emb = self.time_mlp(self.time_embed(t).to(z_t.dtype))
        c_emb = self.cond_proj(cond)
        emb = t_emb + c_emb
        h = self.inp(z_t[:, None, :]) + self.pos
        skips = []
        for block, down in zip(self.down_blocks, self.downs):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.attn(self.mid(h, emb), c_emb, t_emb)
        for up, block in zip(self.ups, self.up_blocks):
            h = block(up(h) + skips.pop(), emb)
        return self.out(h)[:, 0, :]


@torch.no_grad()
def denoise_predict(denoiser, z_t, t, cond=None):
    """Clean-latent estimate for a batch at a single step ``t``."""
    return denoiser(z_t, torch.full((z_t.shape[0],), int(t)), cond)


def diffusion_loss(denoiser, z0, cond, schedule: NoiseSchedule, gen: torch.Generator, cond_mask=None):
    """Mean squared error between ``z_0`` and the denoiser's clean-latent prediction."""
    n = z0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = torch.randint(1, schedule.T + 1, (n,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    z_t = forward_marginal(z0, t, schedule, eps)
    pred = denoiser(z_t, t, cond, cond_mask)
    return (pred - z0).pow(2).mean()


@torch.no_grad()
def sample_latents(denoiser, schedule: NoiseSchedule, n: int, cond=None, gen: torch.Generator | None = None, dtype=torch.float32):
    """Run the reverse chain from ``z_T ~ N(0, I)``; ``denoiser`` may be any callable."""
    m = denoiser.latent_dim
    if n == 0:
        return torch.zeros(0, m, dtype=dtype)
    z = torch.randn(n, m, generator=gen, dtype=dtype)
    for t in range(schedule.T, 0, -1):
        z0_hat = denoiser(z, torch.full((n,), t), cond)
        noise = torch.randn(n, m, generator=gen, dtype=dtype)
        z = posterior_step(z, z0_hat, t, schedule, noise)
    return z


class LatentDiffusion(BaseEstimator):
    """Conditional DDPM estimator over latent vectors.

    ``fit(Z, C)`` trains on latents ``Z`` (n x m) with condition vectors ``C``
    (n x c); ``sample(C, ...)`` draws one latent per condition row.

    Parameters
    ----------
    n_steps : int
        Diffusion length T (desk default 100).
    p_uncond : float
        Fraction of training rows given the learned null condition, so the
        same model also samples unconditionally.
    """

    def __init__(
        self,
        n_steps=100,
        beta_start=1e-4,
        beta_end=0.02,
        schedule="linear",
        base_channels=32,
        levels=2,
        emb_dim=64,
        n_heads=4,
        p_uncond=0.1,
        learning_rate=1e-4,
        batch_size=64,
        epochs=100,
        lr_step_epochs=30,
        lr_gamma=0.9,
        random_state=0,
        dtype="float32",
    ):
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.schedule = schedule
        self.base_channels = base_channels
        self.levels = levels
        self.emb_dim = emb_dim
        self.n_heads = n_heads
        self.p_uncond = p_uncond
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_step_epochs = lr_step_epochs
        self.lr_gamma = lr_gamma
        self.random_state = random_state
        self.dtype = dtype

    def _build(self, latent_dim, cond_dim):
        if not 0 <= self.p_uncond < 1:
            raise ValueError(f"p_uncond must be in [0, 1), got {self.p_uncond}")
        self._torch_dtype = resolve_dtype(self.dtype)
        self.schedule_ = make_schedule(self.n_steps, self.beta_start, self.beta_end, self.schedule)
        gen = seed_everything(self.random_state)
        self.net_ = UNet1DDenoiser(
            latent_dim, cond_dim, self.base_channels, self.levels, self.emb_dim, self.n_heads
        ).to(self._torch_dtype)
        self.latent_dim_ = latent_dim
        self.cond_dim_ = cond_dim
        return gen

    def fit(self, Z, conditions):
        Z = check_matrix(Z, name="Z")
        C = check_matrix(conditions, name="conditions")
        if len(Z) == 0:
            raise ValueError("cannot fit on an empty dataset")
        if len(C) != len(Z):
            raise ValueError(f"{len(Z)} latents but {len(C)} conditions")
        gen = self._build(Z.shape[1], C.shape[1])
        Zt = torch.as_tensor(Z, dtype=self._torch_dtype)
        Ct = torch.as_tensor(C, dtype=self._torch_dtype)
        opt, sched = make_optimizer(self.net_.parameters(), self.learning_rate, self.lr_step_epochs, self.lr_gamma)
        self.history_ = []
        self.net_.train()
        for epoch in range(1, self.epochs + 1):
            total = 0.0
            for idx in batches(len(Z), self.batch_size, gen):
                drop = torch.rand(len(idx), generator=gen) < self.p_uncond
                loss = diffusion_loss(self.net_, Zt[idx], Ct[idx], self.schedule_, gen, drop)
                check_finite(loss, "diffusion loss", epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            sched.step()
            self.history_.append({"epoch": epoch, "loss": total / len(Z)})
            if epoch % 25 == 0 or epoch == 1:
                log.info("diffusion epoch %d loss %.5f", epoch, total / len(Z))
        self.net_.eval()
        return self

    def sample(self, conditions=None, n_samples=None, random_state=0, stream=()):
        """Draw latents, one per condition row (or ``n_samples`` unconditional draws)."""
        check_is_fitted(self, "net_")
        self.net_.eval()
        if conditions is None:
            n = int(n_samples or 0)
            cond = None
        else:
            C = np.asarray(conditions, dtype=np.float64)
            if C.ndim == 1:
                C = C[None, :]
            if C.shape[1] != self.cond_dim_:
                raise ValueError(f"conditions: expected {self.cond_dim_} columns, got {C.shape[1]}")
            n = len(C)
            cond = torch.as_tensor(C, dtype=self._torch_dtype)
        gen = torch_generator_for(random_state, *stream)
        z = sample_latents(self.net_, self.schedule_, n, cond, gen, self._torch_dtype)
        return z.numpy().astype(np.float64)

    @torch.no_grad()
    def predict_clean(self, z_t, t, conditions=None):
        check_is_fitted(self, "net_")
        z = torch.as_tensor(np.atleast_2d(z_t), dtype=self._torch_dtype)
        c = None if conditions is None else torch.as_tensor(np.atleast_2d(conditions), dtype=self._torch_dtype)
        return self.net_(z, torch.full((len(z),), int(t)), c).numpy().astype(np.float64)

    def save(self, path):
        check_is_fitted(self, "net_")
        save_checkpoint(
            path,
            "diffusion",
            self.get_params(),
            state_to_arrays(self.net_),
            extra={
                "latent_dim": self.latent_dim_,
                "cond_dim": self.cond_dim_,
                "schedule": self.schedule_.to_dict(),
                "history": getattr(self, "history_", []),
            },
        )

    @classmethod
    def load(cls, path):
        header, arrays = load_checkpoint(path, "diffusion")
        model = cls(**header["config"])
        extra = header["extra"]
        model._build(extra["latent_dim"], extra["cond_dim"])
        model.schedule_ = NoiseSchedule(np.array(extra["schedule"]["beta"]))
        arrays_to_state(model.net_, arrays)
        model.net_.eval()
        model.history_ = extra.get("history", [])
        return model
