"""Stage 2: region-aware makeup injection and identity injection.

Learnable region queries read the style encoder's last-layer token grid
through a resampler-style projector; the resulting region embeddings enter
the frozen denoiser as image-prompt tokens, whose cross-attention
projections are adapted with LoRA. A zero-initialised conditioning branch
over (source pixels, structure render) feeds the UNet encoder residual
ports. Training minimises L_diff + lambda * L_attn.
"""
import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from augment import AugmentationPolicy, structure_augment
from checkpoint import load_checkpoint, require_parent, save_checkpoint, split_prefix, state_hash, with_prefix
from config import REGIONS
from denoiser import AttentionRecord, Conditions, PixelCodec, attend, ddim_sample, loss_diffusion, q_sample
from errors import EmptyInput, ShapeMismatch
from styleenc import to_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransferConfig:
    num_regions: int = 4
    query_dim: int = 64
    region_dim: int = 64
    projector_depth: int = 2
    projector_heads: int = 4
    lora_rank: int = 4
    lambda_attn: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_reduction: str = "region"
    use_pixel: bool = True
    use_structure: bool = True
    use_lora: bool = True

    @classmethod
    def from_config(cls, section, **overrides):
        fields = {k: section[k] for k in cls.__dataclass_fields__}
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**fields)


# ====== REGION QUERIES AND PROJECTOR ======

class RegionQueryBank(nn.Module):
    """N learnable query tokens, one per region, in REGIONS order."""

    def __init__(self, num_regions=4, dim=64, regions=REGIONS):
        super().__init__()
        if len(regions) != num_regions:
            raise ShapeMismatch(f"{num_regions} query tokens for {len(regions)} regions")
        self.regions = tuple(regions)
        self.tokens = nn.Parameter(torch.randn(num_regions, dim) / math.sqrt(dim))

    def forward(self, batch):
        return self.tokens[None].expand(batch, -1, -1)


class PerceiverAttention(nn.Module):
    """Queries attend over [features, queries]."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.norm_media = nn.LayerNorm(dim)
        self.norm_latents = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_kv = nn.Linear(dim, 2 * dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)

    def forward(self, x, latents):
        x = self.norm_media(x)
        latents = self.norm_latents(latents)
        k, v = self.to_kv(torch.cat([x, latents], dim=1)).chunk(2, dim=-1)
        out, _ = attend(self.to_q(latents), k, v, self.heads)
        return self.to_out(out)


def feed_forward(dim, mult=4):
    return nn.Sequential(
        nn.LayerNorm(dim),
        nn.Linear(dim, dim * mult, bias=False),
        nn.GELU(),
        nn.Linear(dim * mult, dim, bias=False),
    )


class Projector(nn.Module):
    """Resampler: stacked (cross-attention, feed-forward) blocks; N outputs whatever the token count."""

    def __init__(self, encoder_width, query_dim=64, out_dim=64, depth=2, heads=4):
        super().__init__()
        if query_dim % heads:
            raise ValueError("query_dim must be divisible by heads")
        self.encoder_width = encoder_width
        self.proj_in = nn.Linear(encoder_width, query_dim)
        self.layers = nn.ModuleList(
            [nn.ModuleList([PerceiverAttention(query_dim, heads), feed_forward(query_dim)]) for _ in range(depth)]
        )
        self.proj_out = nn.Linear(query_dim, out_dim)
        self.norm_out = nn.LayerNorm(out_dim)

    def forward(self, features, queries):
        if features.shape[-1] != self.encoder_width:
            raise ShapeMismatch(
                f"projector expects encoder width {self.encoder_width}, got features of width {features.shape[-1]}"
            )
        x = self.proj_in(features)
        latents = queries
        for attn, ff in self.layers:
            latents = attn(x, latents) + latents
            latents = ff(latents) + latents
        return self.norm_out(self.proj_out(latents))


@dataclass
class RegionEmbeddingSet:
    vectors: torch.Tensor           # (N, d_f), REGIONS order
    reference_id: str = None
    regions: tuple = REGIONS

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.regions):
            raise ShapeMismatch(f"expected ({len(self.regions)}, d) region embeddings, got {tuple(self.vectors.shape)}")
        if not bool(torch.isfinite(self.vectors).all()):
            raise ValueError("region embeddings contain non-finite values")

    def __len__(self):
        return self.vectors.shape[0]

    def __getitem__(self, region):
        return self.vectors[self.regions.index(region)]


def _image_batch(images):
    if isinstance(images, torch.Tensor):
        return images[None] if images.ndim == 3 else images
    return to_tensor(images)


def region_tokens(style_encoder, images, query_bank, projector):
    """(B, N, d_f) region embeddings from the last-layer token grid of the style encoder."""
    images = _image_batch(images)
    features = style_encoder.features(images)
    return projector(features, query_bank(images.shape[0]))


@torch.no_grad()
def extract_region_embeddings(style_encoder, reference_image, query_bank, projector, reference_id=None):
    device = query_bank.tokens.device
    vectors = region_tokens(style_encoder, _image_batch(reference_image).to(device), query_bank, projector)[0]
    return RegionEmbeddingSet(vectors=vectors, reference_id=reference_id, regions=query_bank.regions)


# ====== LORA ======

class LoRALinear(nn.Module):
    """base(x) + scaling * x A^T B^T, with B zero-initialised and the base frozen."""

    def __init__(self, base, rank=4, alpha=None):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scaling = (alpha if alpha is not None else rank) / rank
        self.lora_down = nn.Parameter(torch.randn(rank, base.in_features) / math.sqrt(base.in_features))
        self.lora_up = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x):
        return self.base(x) + (x @ self.lora_down.T @ self.lora_up.T) * self.scaling


class LoraAdapter:
    """Wraps the image-prompt q/k/v/out projections of every cross-attention layer of a UNet."""

    PROJECTIONS = ("ip_q", "ip_k", "ip_v", "ip_out")

    def __init__(self, unet, rank=4):
        self.rank = rank
        self.layers = {}
        for layer in unet.cross_attention_layers():
            for proj in self.PROJECTIONS:
                wrapped = LoRALinear(getattr(layer, proj), rank)
                setattr(layer, proj, wrapped)
                self.layers[f"{layer.name}.{proj}"] = wrapped

    def parameters(self):
        for wrapped in self.layers.values():
            yield wrapped.lora_down
            yield wrapped.lora_up

    def state_dict(self):
        state = {}
        for name, wrapped in self.layers.items():
            state[f"{name}.lora_down"] = wrapped.lora_down
            state[f"{name}.lora_up"] = wrapped.lora_up
        return state

    @torch.no_grad()
    def load_state_dict(self, state):
        for name, wrapped in self.layers.items():
            wrapped.lora_down.copy_(state[f"{name}.lora_down"])
            wrapped.lora_up.copy_(state[f"{name}.lora_up"])

    @torch.no_grad()
    def zero_(self):
        for wrapped in self.layers.values():
            wrapped.lora_up.zero_()


def base_state(unet):
    """UNet parameters without LoRA factors, under their pre-LoRA names."""
    return {
        name.replace(".base.", "."): p
        for name, p in unet.named_parameters()
        if not name.endswith(("lora_down", "lora_up"))
    }


def decoupled_cross_attention(layer, hidden, text_tokens, region_embeddings, record=None):
    """
    One cross-attention layer with the text stream and the image-prompt stream summed.
    LoRA, when attached, lives inside the layer's image-stream projections.
    Returns:
        (hidden', AttentionRecord)
    """
    record = AttentionRecord() if record is None else record
    if isinstance(region_embeddings, RegionEmbeddingSet):
        region_embeddings = region_embeddings.vectors[None].expand(hidden.shape[0], -1, -1)
    return layer(hidden, text_tokens, region_embeddings, record), record


# ====== ATTENTION LOSS ======

def _mask_tensor(masks):
    if hasattr(masks, "masks"):
        masks = masks.masks
    masks = torch.as_tensor(np.asarray(masks) if not isinstance(masks, torch.Tensor) else masks)
    return masks[None] if masks.ndim == 3 else masks


def downsample_masks(masks, size):
    """Area-pool binary masks (B, N, H, W) to ``size``, then re-binarise at 0.5."""
    masks = _mask_tensor(masks).float()
    if tuple(masks.shape[-2:]) != tuple(size):
        masks = F.adaptive_avg_pool2d(masks, size)
    return (masks >= 0.5).float()


def focal_term(p, target, alpha=0.25, gamma=2.0):
    """Per-pixel -alpha_t (1 - p_t)^gamma log p_t."""
    p_t = torch.where(target > 0.5, p, 1.0 - p)
    alpha_t = torch.where(target > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
    return -alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t.clamp_min(1e-12))


def dice_term(p, target, reduction="region", smooth=1e-6):
    if reduction == "region":
        inter = (p * target).flatten(-2).sum(-1)
        total = p.flatten(-2).sum(-1) + target.flatten(-2).sum(-1)
        return 1.0 - (2.0 * inter + smooth) / (total + smooth)
    if reduction == "pixel":
        return 1.0 - (2.0 * p * target + smooth) / (p + target + smooth)
    raise ValueError(f"unknown dice reduction '{reduction}' (expected 'region' or 'pixel')")


def loss_attention(record, masks, focal_gamma=2.0, focal_alpha=0.25, dice_reduction="region"):
    """
    Focal + dice alignment of the averaged image-token attention maps with the region masks.
    Parameters:
        record: AttentionRecord, or the averaged maps Abar (B, N, U, V)
        masks: RegionMaskSet, array or tensor (B, N, H, W) / (N, H, W) of {0,1}
    Returns:
        mean focal term over (region, pixel) plus the mean dice term, over non-empty regions
    """
    maps = record.averaged() if isinstance(record, AttentionRecord) else record
    if maps.ndim == 3:
        maps = maps[None]
    target = downsample_masks(masks, maps.shape[-2:]).to(device=maps.device, dtype=maps.dtype)
    if target.shape[:2] != maps.shape[:2]:
        if target.shape[0] == 1 and target.shape[1] == maps.shape[1]:
            target = target.expand(maps.shape[0], -1, -1, -1)
        else:
            raise ShapeMismatch(f"attention maps {tuple(maps.shape)} vs masks {tuple(target.shape)}")

    present = target.flatten(-2).sum(-1) > 0
    if not bool(present.all()):
        empty = [REGIONS[n] if n < len(REGIONS) else str(n) for n in torch.nonzero(~present)[:, 1].unique().tolist()]
        logger.warning("Empty region mask after downsampling, region skipped in L_attn: %s", ", ".join(empty))
    if not bool(present.any()):
        return maps.sum() * 0.0

    focal = focal_term(maps, target, focal_alpha, focal_gamma).flatten(-2).mean(-1)
    dice = dice_term(maps, target, dice_reduction)
    if dice_reduction == "pixel":
        dice = dice.flatten(-2).mean(-1)
    return focal[present].mean() + dice[present].mean()


# ====== IDENTITY BRANCH ======

def zero_module(module):
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class IdentityBranch(nn.Module):
    """
    Conditioning encoder over concatenated (source RGB, structure) channels.
    One zero-initialised 1x1 output per UNet residual port, so its output is exactly
    zero at initialisation. Disabled channels are zeroed at the input.
    """

    def __init__(self, port_channels, base_channels=32, use_pixel=True, use_structure=True):
        super().__init__()
        self.use_pixel = use_pixel
        self.use_structure = use_structure
        levels = port_channels[:-1]
        self.stem = nn.Sequential(
            nn.Conv2d(4, base_channels, 3, padding=1), nn.SiLU(),
            nn.Conv2d(base_channels, base_channels, 3, padding=1), nn.SiLU(),
        )
        self.blocks, self.downsample, self.zero_convs = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        previous = base_channels
        for level, c in enumerate(levels):
            self.blocks.append(nn.Sequential(
                nn.Conv2d(previous, c, 3, padding=1), nn.GroupNorm(math.gcd(8, c), c), nn.SiLU(),
                nn.Conv2d(c, c, 3, padding=1), nn.SiLU(),
            ))
            self.zero_convs.append(zero_module(nn.Conv2d(c, c, 1)))
            if level < len(levels) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            previous = c
        self.mid = nn.Sequential(nn.Conv2d(previous, port_channels[-1], 3, padding=1), nn.SiLU())
        self.mid_out = zero_module(nn.Conv2d(port_channels[-1], port_channels[-1], 1))

    def forward(self, source, structure):
        """source (B, 3, H, W), structure (B, 1, H, W) -> one residual per port."""
        if not self.use_pixel:
            source = torch.zeros_like(source)
        if not self.use_structure:
            structure = torch.zeros_like(structure)
        h = self.stem(torch.cat([source, structure], dim=1))
        residuals = []
        for level, block in enumerate(self.blocks):
            h = block(h)
            residuals.append(self.zero_convs[level](h))
            if level < len(self.downsample):
                h = self.downsample[level](h)
        residuals.append(self.mid_out(self.mid(h)))
        return residuals


def structure_tensor(structure):
    """(H, W) / (B, H, W) arrays or (B, 1, H, W) tensors -> float32 (B, 1, H, W)."""
    if isinstance(structure, torch.Tensor):
        return structure if structure.ndim == 4 else structure.reshape(-1, 1, *structure.shape[-2:])
    array = np.asarray(structure, dtype=np.float32)
    if array.ndim == 3 and array.shape[-1] == 3:
        array = array.mean(axis=-1)
    return torch.from_numpy(np.ascontiguousarray(array)).reshape(-1, 1, *array.shape[-2:])


# ====== TRANSFER MODEL ======

class TransferModel(nn.Module):
    """Frozen style encoder and base UNet plus the stage-2 trainable modules."""

    def __init__(self, style_bundle, denoiser_bundle, cfg):
        super().__init__()
        self.cfg = cfg
        # private copies: LoRA wraps the UNet layers in place
        self.style_encoder = copy.deepcopy(style_bundle.encoder)
        self.unet = copy.deepcopy(denoiser_bundle.unet)
        for p in list(self.style_encoder.parameters()) + list(self.unet.parameters()):
            p.requires_grad_(False)
        self.schedule = denoiser_bundle.schedule
        self.register_buffer("prompt_tokens", denoiser_bundle.prompt_tokens.clone())
        self.query_bank = RegionQueryBank(cfg.num_regions, cfg.query_dim)
        self.projector = Projector(self.style_encoder.width, cfg.query_dim, cfg.region_dim,
                                   cfg.projector_depth, cfg.projector_heads)
        self.identity_branch = None
        if cfg.use_pixel or cfg.use_structure:
            self.identity_branch = IdentityBranch(self.unet.port_channels, self.unet.cfg.channels[0],
                                                  cfg.use_pixel, cfg.use_structure)
        self.lora = LoraAdapter(self.unet, cfg.lora_rank) if cfg.use_lora else None
        self.base_hash = self.frozen_base_hash()
        self.codec = PixelCodec()

    def frozen_base_hash(self):
        return state_hash(base_state(self.unet))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_state(self):
        state = {
            **with_prefix(self.query_bank.state_dict(), "query_bank"),
            **with_prefix(self.projector.state_dict(), "projector"),
        }
        if self.identity_branch is not None:
            state.update(with_prefix(self.identity_branch.state_dict(), "identity_branch"))
        if self.lora is not None:
            state.update(with_prefix(self.lora.state_dict(), "lora"))
        return state

    def load_trainable_state(self, tensors):
        self.query_bank.load_state_dict(split_prefix(tensors, "query_bank"))
        self.projector.load_state_dict(split_prefix(tensors, "projector"))
        if self.identity_branch is not None:
            self.identity_branch.load_state_dict(split_prefix(tensors, "identity_branch"))
        if self.lora is not None:
            self.lora.load_state_dict(split_prefix(tensors, "lora"))

    def region_tokens(self, references):
        return region_tokens(self.style_encoder, references, self.query_bank, self.projector)

    def conditions(self, source, structure, tokens):
        """source (B,3,H,W), structure (B,1,H,W), tokens (B,N,d_f) or None."""
        batch = source.shape[0]
        residuals = None
        if self.identity_branch is not None:
            residuals = self.identity_branch(source, structure)
        return Conditions(
            text_tokens=self.prompt_tokens[None].expand(batch, -1, -1),
            image_tokens=tokens,
            control_residuals=residuals,
        )


@dataclass
class PairTensors:
    sources: torch.Tensor
    references: list
    targets: torch.Tensor
    structures: torch.Tensor
    masks: torch.Tensor


def _pair_tensors(pairs):
    return PairTensors(
        sources=to_tensor([p.source_image for p in pairs]),
        references=[p.reference_image for p in pairs],
        targets=to_tensor([p.reference_image for p in pairs]),
        structures=structure_tensor(np.stack([p.structure for p in pairs])),
        masks=torch.from_numpy(np.stack([p.region_masks.masks for p in pairs]).astype(np.float32)),
    )


@dataclass
class TransferBundle:
    model: TransferModel
    history: list
    content_hash: str = None


def train_transfer(pairs, style_bundle, denoiser_bundle, config, seed=0, device="cpu", **flags):
    """
    Joint stage-2 training of LoRA factors, query bank, projector and identity branch.
    Parameters:
        pairs: TrainingPairs; only accepted ones are used
        style_bundle, denoiser_bundle: frozen stage-1 encoder and base denoiser
        flags: overrides of TransferConfig fields (lambda_attn, use_pixel, use_structure, use_lora)
    Returns:
        TransferBundle with per-step L_diff / L_attn history
    """
    accepted = [p for p in pairs if p.accepted]
    if not accepted:
        raise EmptyInput("no accepted training pairs")
    section = config["transfer"]
    cfg = TransferConfig.from_config(section, **flags)
    torch.manual_seed(seed)
    model = TransferModel(style_bundle, denoiser_bundle, cfg).to(device)
    data = _pair_tensors(accepted)
    policy = AugmentationPolicy.from_config(config["augment"])
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=section["lr"])
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    batch_size = min(section["batch_size"], len(accepted))
    history = []

    logger.info("=== STAGE 2: MAKEUP TRANSFER TRAINING (%d pairs, lambda_attn=%.2f, lora=%s, pixel=%s, structure=%s) ===",
                len(accepted), cfg.lambda_attn, cfg.use_lora, cfg.use_pixel, cfg.use_structure)
    model.train()
    for step in range(section["steps"]):
        picks = rng.choice(len(accepted), size=batch_size, replace=False)
        augmented = to_tensor([
            structure_augment(data.references[i], policy, int(rng.integers(2**31 - 1))) for i in picks
        ]).to(device)
        x0 = model.codec.encode(data.targets[picks].to(device))
        tokens = model.region_tokens(augmented)
        conditions = model.conditions(data.sources[picks].to(device), data.structures[picks].to(device), tokens)
        record = AttentionRecord()
        l_diff = loss_diffusion(model.unet, x0, conditions, model.schedule, generator=generator, record=record)
        l_attn = loss_attention(record, data.masks[picks].to(device), cfg.focal_gamma, cfg.focal_alpha,
                                cfg.dice_reduction)
        loss = l_diff + cfg.lambda_attn * l_attn

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        history.append({"step": step, "loss_diff": float(l_diff), "loss_attn": float(l_attn), "loss": float(loss)})
        if step % section["log_every"] == 0 or step == section["steps"] - 1:
            logger.info("step %d  L_diff %.4f  L_attn %.4f  L %.4f", step, float(l_diff), float(l_attn), float(loss))
    model.eval()
    if model.frozen_base_hash() != model.base_hash:
        raise RuntimeError("frozen base UNet changed during stage-2 training")
    return TransferBundle(model=model, history=history)


def save_transfer(path, bundle, style_hash, denoiser_hash):
    model = bundle.model
    header = {
        "kind": "transfer",
        "transfer": asdict(model.cfg),
        "parents": {"style_encoder": style_hash, "denoiser": denoiser_hash},
        "base_unet_hash": model.base_hash,
    }
    bundle.content_hash = save_checkpoint(path, model.trainable_state(), header)
    return bundle.content_hash


def load_transfer(path, style_bundle, denoiser_bundle):
    """Rebuild the stage-2 model; refuses frozen checkpoints other than the ones it was trained on."""
    tensors, header, content_hash = load_checkpoint(path, kind="transfer")
    require_parent(header, "style_encoder", style_bundle.content_hash, "style encoder checkpoint")
    require_parent(header, "denoiser", denoiser_bundle.content_hash, "base denoiser checkpoint")
    model = TransferModel(style_bundle, denoiser_bundle, TransferConfig(**header["transfer"]))
    model.load_trainable_state(tensors)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return TransferBundle(model=model, history=[], content_hash=content_hash)


# ====== INFERENCE ======

def _keep_mask(face_mask, like):
    mask = torch.as_tensor(np.asarray(face_mask, dtype=np.float32))
    return (1.0 - mask).reshape(1, 1, *mask.shape[-2:]).to(like.device)


def composite(generated, source, face_mask):
    """Source pixels outside the face mask, generated pixels inside."""
    face = np.asarray(face_mask, dtype=bool)[..., None]
    return np.where(face, generated, source)


@torch.no_grad()
def transfer_with_embeddings(model, source_image, structure, tokens, sampler, face_mask=None, seed=0):
    """
    Sample one transfer given region embeddings (N, d_f) or (1, N, d_f).
    Returns:
        (H, W, 3) float64 image in [0,1]; exactly the source outside ``face_mask``
    """
    device = model.prompt_tokens.device
    source = to_tensor(source_image).to(device)
    if isinstance(tokens, RegionEmbeddingSet):
        tokens = tokens.vectors
    tokens = (tokens[None] if tokens.ndim == 2 else tokens).to(device)
    conditions = model.conditions(source, structure_tensor(structure).to(device), tokens)
    known = keep = None
    if face_mask is not None and sampler.get("inpaint", True):
        known, keep = source, _keep_mask(face_mask, source)
    out = ddim_sample(model.unet, conditions, model.schedule, tuple(source.shape), steps=sampler["steps"],
                      eta=sampler["eta"], seed=seed, known=known, keep_mask=keep, codec=model.codec, device=device)
    image = rearrange(out[0].cpu().double(), "c h w -> h w c").numpy()
    source_image = np.asarray(source_image, dtype=np.float64)
    return image if face_mask is None else composite(image, source_image, face_mask)


def transfer(source_image, structure, reference_image, model, sampler, face_mask=None, seed=0):
    embeddings = extract_region_embeddings(model.style_encoder, reference_image, model.query_bank, model.projector)
    return transfer_with_embeddings(model, source_image, structure, embeddings, sampler, face_mask, seed)


@torch.no_grad()
def transfer_attention(model, source_image, structure, reference_image, t=None, seed=0):
    """Averaged image-token attention Abar (N, U, V) of one denoiser pass on a noised source."""
    device = model.prompt_tokens.device
    source = to_tensor(source_image).to(device)
    tokens = model.region_tokens(_image_batch(reference_image).to(device))
    conditions = model.conditions(source, structure_tensor(structure).to(device), tokens)
    generator = torch.Generator().manual_seed(seed)
    t = model.schedule.T // 2 if t is None else t
    noise = torch.randn(source.shape, generator=generator).to(device)
    x_t = q_sample(model.codec.encode(source), t, noise, model.schedule)
    record = AttentionRecord()
    model.unet(x_t, torch.full((1,), t, dtype=torch.long, device=device), conditions, record=record)
    return record.averaged()[0]
