"""Toy pixel-space diffusion backbone.

A linear-beta DDPM schedule, a three-level UNet whose cross-attention layers
take the text prompt tokens plus an optional image-prompt token stream, the
epsilon-prediction loss and a DDIM sampler with inpainting-style known-region
replacement. Residual ports on the encoder side accept the identity branch.
"""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from checkpoint import load_checkpoint, save_checkpoint, split_prefix, with_prefix
from errors import ShapeMismatch

logger = logging.getLogger(__name__)


# ====== NOISE SCHEDULE ======

@dataclass
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self):
        return len(self.alpha_bars)

    @classmethod
    def from_betas(cls, betas):
        betas = torch.as_tensor(betas, dtype=torch.float64)
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))

    @classmethod
    def linear(cls, T=1000, beta_start=1e-4, beta_end=0.02):
        return cls.from_betas(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))

    @classmethod
    def from_alpha_bars(cls, alpha_bars):
        """Arbitrary cumulative schedule; betas are derived and not range-checked."""
        alpha_bars = torch.as_tensor(alpha_bars, dtype=torch.float64)
        previous = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
        alphas = torch.where(previous > 0, alpha_bars / previous.clamp_min(1e-300), torch.zeros_like(previous))
        return cls(betas=1.0 - alphas, alphas=alphas, alpha_bars=alpha_bars)

    @classmethod
    def from_config(cls, section):
        return cls.linear(section["timesteps"], section["beta_start"], section["beta_end"])


def _gather(values, t, like):
    """values[t] broadcast to ``like`` (B, ...)."""
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    out = values.to(device=like.device)[t.to(like.device)].to(like.dtype)
    return out.reshape(-1, *([1] * (like.ndim - 1)))


def _check_t(t, schedule):
    t = torch.as_tensor(t)
    if bool((t < 0).any()) or bool((t >= schedule.T).any()):
        raise ValueError(f"timestep out of range [0, {schedule.T}): {t.tolist()}")


def q_sample(x0, t, noise, schedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_t(t, schedule)
    ab = _gather(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def predict_x0(x_t, t, eps, schedule):
    _check_t(t, schedule)
    ab = _gather(schedule.alpha_bars, t, x_t)
    return (x_t - (1.0 - ab).sqrt() * eps) / ab.sqrt()


class PixelCodec:
    """Encode/decode boundary between images and the diffusion space; identity in pixel space."""

    def encode(self, images):
        return images

    def decode(self, latents):
        return latents


# ====== ATTENTION RECORD ======

@dataclass
class AttentionRecord:
    """Image-prompt attention maps of one forward pass, per layer: (B, N, h, w), mean over heads."""
    maps: dict = field(default_factory=dict)
    resolutions: dict = field(default_factory=dict)

    def add(self, name, probs):
        self.maps[name] = probs
        self.resolutions[name] = tuple(probs.shape[-2:])

    def layer_names(self, resolutions=None):
        names = list(self.maps)
        if resolutions is not None:
            names = [n for n in names if self.resolutions[n] in resolutions]
        return names

    def lowest_resolutions(self, count=2):
        sizes = sorted({r for r in self.resolutions.values()}, key=lambda r: r[0] * r[1])
        return sizes[:count]

    def averaged(self, size=None, layers=None):
        """
        Layer-averaged map Abar (B, N, U, V) at a common resolution.
        Parameters:
            size: (U, V); defaults to the smallest recorded resolution
            layers: layer names to average; defaults to the layers at the two lowest resolutions
        """
        if not self.maps:
            raise ValueError("attention record is empty (no image-prompt tokens were injected)")
        if layers is None:
            layers = self.layer_names(self.lowest_resolutions(2))
        if size is None:
            size = min((self.resolutions[n] for n in layers), key=lambda r: r[0] * r[1])
        resized = []
        for name in layers:
            m = self.maps[name]
            if tuple(m.shape[-2:]) == tuple(size):
                resized.append(m)
            elif m.shape[-2] >= size[0]:
                resized.append(F.adaptive_avg_pool2d(m, size))
            else:
                resized.append(F.interpolate(m, size=size, mode="bilinear", align_corners=False))
        return torch.stack(resized).mean(dim=0)


# ====== UNET ======

def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _groups(channels):
    return math.gcd(8, channels)


class ResBlock(nn.Module):
    def __init__(self, in_channels, out_channels, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def attend(q, k, v, heads):
    """Multi-head softmax attention; returns (out (B, Nq, inner), probs (B, heads, Nq, Nk))."""
    q, k, v = (rearrange(x, "b n (h d) -> b h n d", h=heads) for x in (q, k, v))
    scores = torch.einsum("bhqd,bhkd->bhqk", q, k) / math.sqrt(q.shape[-1])
    probs = scores.softmax(dim=-1)
    out = torch.einsum("bhqk,bhkd->bhqd", probs, v)
    return rearrange(out, "b h n d -> b n (h d)"), probs


class CrossAttention(nn.Module):
    """
    Cross-attention over the text tokens, with a decoupled image-prompt stream.

    The image stream has its own q/k/v/out projections, initialised from the text
    stream and bias-free, so zero image tokens add exactly zero. Its softmax runs
    over the image tokens only, so the recorded maps sum to 1 at every location.
    """

    def __init__(self, name, channels, context_dim, image_dim, heads):
        super().__init__()
        self.name = name
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.ip_q = nn.Linear(channels, channels, bias=False)
        self.ip_k = nn.Linear(image_dim, channels, bias=False)
        self.ip_v = nn.Linear(image_dim, channels, bias=False)
        self.ip_out = nn.Linear(channels, channels, bias=False)
        with torch.no_grad():
            self.ip_q.weight.copy_(self.to_q.weight)
            self.ip_out.weight.copy_(self.to_out.weight)
            if image_dim == context_dim:
                self.ip_k.weight.copy_(self.to_k.weight)
                self.ip_v.weight.copy_(self.to_v.weight)

    def text_attention(self, x, text_tokens):
        out, _ = attend(self.to_q(x), self.to_k(text_tokens), self.to_v(text_tokens), self.heads)
        return self.to_out(out)

    def image_attention(self, x, image_tokens):
        out, probs = attend(self.ip_q(x), self.ip_k(image_tokens), self.ip_v(image_tokens), self.heads)
        return self.ip_out(out), probs.mean(dim=1)

    def forward(self, h, text_tokens, image_tokens=None, record=None):
        b, c, height, width = h.shape
        x = rearrange(self.norm(h), "b c h w -> b (h w) c")
        out = self.text_attention(x, text_tokens)
        if image_tokens is not None:
            image_out, probs = self.image_attention(x, image_tokens)
            out = out + image_out
            if record is not None:
                record.add(self.name, rearrange(probs, "b (h w) n -> b n h w", h=height, w=width))
        return h + rearrange(out, "b (h w) c -> b c h w", h=height, w=width)


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 64
    channels: tuple = (32, 64, 64)
    heads: int = 4
    time_dim: int = 128
    context_dim: int = 64
    image_dim: int = 64
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    prompt: str = "a person with makeup"

    @classmethod
    def from_config(cls, config):
        section = config["denoiser"]
        return cls(
            image_size=section["image_size"],
            channels=tuple(section["channels"]),
            heads=section["heads"],
            time_dim=section["time_dim"],
            context_dim=config["style_encoder"]["embed_dim"],
            image_dim=config["transfer"]["region_dim"],
            timesteps=section["timesteps"],
            beta_start=section["beta_start"],
            beta_end=section["beta_end"],
            prompt=section["prompt"],
        )

    def schedule(self):
        return NoiseSchedule.linear(self.timesteps, self.beta_start, self.beta_end)


@dataclass
class Conditions:
    """Everything the denoiser is conditioned on; any stream may be None."""
    text_tokens: torch.Tensor                 # (B, L, context_dim)
    image_tokens: torch.Tensor = None         # (B, N, image_dim)
    control_residuals: list = None            # one tensor per residual port

    def expand(self, batch):
        """Broadcast single-sample conditions to ``batch`` samples."""
        def rep(x):
            return x if x is None or x.shape[0] == batch else x.expand(batch, *x.shape[1:])
        return Conditions(
            text_tokens=rep(self.text_tokens),
            image_tokens=rep(self.image_tokens),
            control_residuals=None if self.control_residuals is None else [rep(r) for r in self.control_residuals],
        )


class DenoisingUNet(nn.Module):
    """
    Three-level UNet. Every level has a ResBlock and a CrossAttention on the way down
    and up; the middle block is ResBlock, CrossAttention, ResBlock. Residual ports:
    one per down level plus the middle block (see ``port_channels``).
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        ch = list(cfg.channels)
        if cfg.image_size % (2 ** (len(ch) - 1)):
            raise ValueError("image_size must be divisible by 2^(levels-1)")
        self.time_embed = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.conv_in = nn.Conv2d(3, ch[0], 3, padding=1)

        self.down_res, self.down_attn, self.downsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        previous = ch[0]
        for level, c in enumerate(ch):
            self.down_res.append(ResBlock(previous, c, cfg.time_dim))
            self.down_attn.append(CrossAttention(f"down{level}", c, cfg.context_dim, cfg.image_dim, cfg.heads))
            if level < len(ch) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            previous = c

        self.mid_res1 = ResBlock(ch[-1], ch[-1], cfg.time_dim)
        self.mid_attn = CrossAttention("mid", ch[-1], cfg.context_dim, cfg.image_dim, cfg.heads)
        self.mid_res2 = ResBlock(ch[-1], ch[-1], cfg.time_dim)

        self.up_res, self.up_attn, self.upsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        for level in reversed(range(len(ch))):
            c = ch[level]
            self.up_res.append(ResBlock(2 * c, c, cfg.time_dim))
            self.up_attn.append(CrossAttention(f"up{level}", c, cfg.context_dim, cfg.image_dim, cfg.heads))
            if level > 0:
                self.upsample.append(nn.Conv2d(c, ch[level - 1], 3, padding=1))

        self.norm_out = nn.GroupNorm(_groups(ch[0]), ch[0])
        self.conv_out = nn.Conv2d(ch[0], 3, 3, padding=1)

    @property
    def port_channels(self):
        return list(self.cfg.channels) + [self.cfg.channels[-1]]

    def port_shapes(self, image_size):
        levels = len(self.cfg.channels)
        sizes = [image_size // 2 ** level for level in range(levels)] + [image_size // 2 ** (levels - 1)]
        return list(zip(self.port_channels, sizes))

    def cross_attention_layers(self):
        return list(self.down_attn) + [self.mid_attn] + list(self.up_attn)

    def forward(self, x, t, conditions, record=None):
        t = torch.as_tensor(t, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        temb = self.time_embed(timestep_embedding(t, self.cfg.time_dim))
        text, image = conditions.text_tokens, conditions.image_tokens
        residuals = conditions.control_residuals
        if residuals is not None and len(residuals) != len(self.port_channels):
            raise ShapeMismatch(f"expected {len(self.port_channels)} control residuals, got {len(residuals)}")

        h = self.conv_in(x)
        skips = []
        for level in range(len(self.down_res)):
            h = self.down_res[level](h, temb)
            h = self.down_attn[level](h, text, image, record)
            if residuals is not None:
                h = h + residuals[level]
            skips.append(h)
            if level < len(self.downsample):
                h = self.downsample[level](h)

        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, text, image, record)
        h = self.mid_res2(h, temb)
        if residuals is not None:
            h = h + residuals[-1]

        for i, level in enumerate(reversed(range(len(self.down_res)))):
            h = self.up_res[i](torch.cat([h, skips[level]], dim=1), temb)
            h = self.up_attn[i](h, text, image, record)
            if level > 0:
                h = self.upsample[i](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


# ====== LOSS AND SAMPLING ======

def loss_diffusion(model, x0, conditions, schedule, seed=None, generator=None, record=None):
    """
    E || eps - eps_theta(x_t, t, C) ||^2 with t ~ U[0, T) and eps ~ N(0, I).
    ``model`` is any callable (x_t, t, conditions, record=None) -> eps prediction.
    """
    if generator is None:
        generator = torch.Generator(device="cpu")
        if seed is not None:
            generator.manual_seed(seed)
    t = torch.randint(0, schedule.T, (x0.shape[0],), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(x0.device)
    x_t = q_sample(x0, t, noise, schedule)
    prediction = model(x_t, t.to(x0.device), conditions, record=record)
    return F.mse_loss(prediction, noise)


def ddim_timesteps(T, steps):
    if steps <= 0:
        raise ValueError(f"DDIM needs at least one step, got {steps}")
    if steps > T:
        raise ValueError(f"steps ({steps}) cannot exceed the schedule length ({T})")
    return np.unique(np.linspace(T - 1, 0, steps).round().astype(np.int64))[::-1]


@torch.no_grad()
def ddim_sample(model, conditions, schedule, shape, steps=50, eta=0.0, seed=0, known=None, keep_mask=None,
                codec=None, device="cpu"):
    """
    DDIM sampling from pure noise.
    Parameters:
        shape: (B, 3, H, W)
        known, keep_mask: optional image and {0,1} mask; where keep_mask is 1 the sample is
            replaced at every step by the known image noised to the matching level
    Returns:
        decoded images clamped to [0,1] (clamping happens once, at the end)
    """
    codec = codec or PixelCodec()
    generator = torch.Generator(device="cpu").manual_seed(seed)
    timesteps = ddim_timesteps(schedule.T, steps)
    x = torch.randn(shape, generator=generator).to(device)
    known_latent = None if known is None else codec.encode(known).to(device)
    keep = None if keep_mask is None else keep_mask.to(device=device, dtype=x.dtype)

    for i, t in enumerate(timesteps):
        t_prev = int(timesteps[i + 1]) if i + 1 < len(timesteps) else -1
        t_batch = torch.full((shape[0],), int(t), dtype=torch.long, device=device)
        eps = model(x, t_batch, conditions)
        ab = schedule.alpha_bars[int(t)].item()
        ab_prev = schedule.alpha_bars[t_prev].item() if t_prev >= 0 else 1.0
        x0_pred = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        sigma = eta * math.sqrt(max((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev), 0.0)) if ab < 1.0 else 0.0
        x = math.sqrt(ab_prev) * x0_pred + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * torch.randn(shape, generator=generator).to(device)
        if known_latent is not None and keep is not None:
            if t_prev >= 0:
                noise = torch.randn(shape, generator=generator).to(device)
                known_t = q_sample(known_latent, t_prev, noise, schedule)
            else:
                known_t = known_latent
            x = keep * known_t + (1.0 - keep) * x
    return codec.decode(x).clamp(0.0, 1.0)


# ====== BASE PRETRAINING ======

@dataclass
class DenoiserBundle:
    unet: DenoisingUNet
    prompt_tokens: torch.Tensor     # (L, context_dim)
    schedule: NoiseSchedule
    history: list
    content_hash: str = None

    def text_conditions(self, batch):
        return Conditions(text_tokens=self.prompt_tokens[None].expand(batch, -1, -1))


def train_base_denoiser(images, prompt_tokens, config, seed=0, device="cpu"):
    """
    Pretrain the base UNet on faces with the text prompt only; it plays the frozen
    pretrained diffusion model of stage 2.
    Parameters:
        images: (B, 3, H, W) float tensor in [0,1] (before and after images)
        prompt_tokens: (L, context_dim) from the frozen text embedder
    """
    cfg = DenoiserConfig.from_config(config)
    section = config["base_training"]
    torch.manual_seed(seed)
    unet = DenoisingUNet(cfg).to(device)
    schedule = cfg.schedule()
    codec = PixelCodec()
    optimizer = torch.optim.Adam(unet.parameters(), lr=section["lr"])
    generator = torch.Generator().manual_seed(seed)
    prompt_tokens = prompt_tokens.detach().to(device)
    history = []

    logger.info("=== BASE DENOISER PRETRAINING (%d images, %d steps) ===", len(images), section["steps"])
    unet.train()
    for step in range(section["steps"]):
        picks = torch.randint(0, len(images), (min(section["batch_size"], len(images)),), generator=generator)
        x0 = codec.encode(images[picks].to(device))
        conditions = Conditions(text_tokens=prompt_tokens[None].expand(len(picks), -1, -1))
        loss = loss_diffusion(unet, x0, conditions, schedule, generator=generator)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append({"step": step, "loss_diff": float(loss)})
        if step % section["log_every"] == 0 or step == section["steps"] - 1:
            logger.info("step %d  L_diff %.4f", step, float(loss))
    unet.eval()
    for p in unet.parameters():
        p.requires_grad_(False)
    return DenoiserBundle(unet=unet, prompt_tokens=prompt_tokens.cpu(), schedule=schedule, history=history)


def save_denoiser(path, bundle, parents=None):
    header = {"kind": "denoiser", "denoiser": asdict(bundle.unet.cfg), "parents": parents or {}}
    tensors = {**with_prefix(bundle.unet.state_dict(), "unet"), "prompt_tokens": bundle.prompt_tokens}
    bundle.content_hash = save_checkpoint(path, tensors, header)
    return bundle.content_hash


def load_denoiser(path):
    tensors, header, content_hash = load_checkpoint(path, kind="denoiser")
    fields = dict(header["denoiser"])
    fields["channels"] = tuple(fields["channels"])
    cfg = DenoiserConfig(**fields)
    unet = DenoisingUNet(cfg)
    unet.load_state_dict(split_prefix(tensors, "unet"))
    unet.eval()
    for p in unet.parameters():
        p.requires_grad_(False)
    bundle = DenoiserBundle(unet=unet, prompt_tokens=tensors["prompt_tokens"], schedule=cfg.schedule(),
                            history=[], content_hash=content_hash)
    return bundle, header
