"""Stage 1: makeup style encoder fine-tuning.

A small ViT stands in for the pretrained CLIP vision tower and a frozen,
seeded bag-of-words embedder for the CLIP text tower. Only the last
transformer block and the projection head are trained, with the sum of a
self-supervised InfoNCE loss over two content-augmented views and an
image-text contrastive loss against the style descriptions.
"""
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from sklearn.neighbors import NearestNeighbors

from augment import AugmentationPolicy, two_views
from checkpoint import load_checkpoint, save_checkpoint, split_prefix, state_hash, with_prefix
from errors import DegenerateConfiguration, EmptyInput, ShapeMismatch
from synthface import load_png

logger = logging.getLogger(__name__)

PROMPT_TEMPLATE = "Photography of a person with makeup. The makeup is {makeup}"
UNKNOWN_TOKEN = "<unk>"


def to_tensor(images):
    """HxWx3 arrays (or a list of them) in [0,1] -> float32 (B,3,H,W)."""
    array = np.asarray(images, dtype=np.float32)
    if array.ndim == 3:
        array = array[None]
    return torch.from_numpy(np.ascontiguousarray(rearrange(array, "b h w c -> b c h w")))


# ====== MODELS ======

@dataclass(frozen=True)
class StyleEncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    width: int = 128
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    trainable_blocks: int = 1
    text_width: int = 64

    @classmethod
    def from_config(cls, section):
        return cls(**{k: section[k] for k in cls.__dataclass_fields__})


class StyleEncoder(nn.Module):
    """ViT: patch embedding, pre-norm transformer blocks, projection head on the class token."""

    def __init__(self, cfg):
        super().__init__()
        if cfg.image_size % cfg.patch_size:
            raise DegenerateConfiguration("image_size must be a multiple of patch_size")
        self.cfg = cfg
        num_patches = (cfg.image_size // cfg.patch_size) ** 2
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.randn(1, num_patches + 1, cfg.width) * 0.02)
        self.blocks = nn.ModuleList([
            nn.TransformerEncoderLayer(
                cfg.width, cfg.heads, dim_feedforward=4 * cfg.width, dropout=0.0,
                activation="gelu", batch_first=True, norm_first=True,
            )
            for _ in range(cfg.depth)
        ])
        self.norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.embed_dim)

    @property
    def width(self):
        return self.cfg.width

    def features(self, images):
        """Last-layer token grid (B, 1 + patches, width); any input resolution is resized first."""
        if images.shape[-1] != self.cfg.image_size or images.shape[-2] != self.cfg.image_size:
            images = F.interpolate(images, size=(self.cfg.image_size,) * 2, mode="bilinear", align_corners=False)
        x = self.patch_embed((images - 0.5) / 0.5)
        x = rearrange(x, "b c h w -> b (h w) c")
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def forward(self, images):
        return self.head(self.features(images)[:, 0])

    def freeze(self, trainable_blocks=None):
        """Freeze everything except the last ``trainable_blocks`` blocks, the final norm and the head."""
        trainable_blocks = self.cfg.trainable_blocks if trainable_blocks is None else trainable_blocks
        for p in self.parameters():
            p.requires_grad_(False)
        tail = list(self.blocks)[len(self.blocks) - trainable_blocks:] if trainable_blocks else []
        for module in tail + [self.norm, self.head]:
            for p in module.parameters():
                p.requires_grad_(True)
        return self

    def frozen_hash(self):
        return state_hash({n: p for n, p in self.named_parameters() if not p.requires_grad})


def tokenize(text):
    """Lowercase, whitespace-separated words with punctuation stripped."""
    return re.findall(r"[a-z0-9]+", text.lower())


class TextEmbedder(nn.Module):
    """Frozen seeded token table, mean pooling and a frozen linear projection."""

    def __init__(self, vocab, width=64, embed_dim=64, seed=0):
        super().__init__()
        self.vocab = [UNKNOWN_TOKEN] + sorted(set(vocab) - {UNKNOWN_TOKEN})
        self.index = {word: i for i, word in enumerate(self.vocab)}
        self.seed = seed
        generator = torch.Generator().manual_seed(seed)
        self.embedding = nn.Embedding(len(self.vocab), width)
        self.proj = nn.Linear(width, embed_dim, bias=False)
        with torch.no_grad():
            self.embedding.weight.copy_(torch.randn(len(self.vocab), width, generator=generator))
            self.proj.weight.copy_(torch.randn(embed_dim, width, generator=generator) / np.sqrt(width))
        for p in self.parameters():
            p.requires_grad_(False)

    @classmethod
    def build(cls, texts, width=64, embed_dim=64, seed=0):
        words = set(tokenize(PROMPT_TEMPLATE))
        for text in texts:
            words.update(tokenize(text))
        return cls(sorted(words), width, embed_dim, seed)

    def token_ids(self, text):
        ids = [self.index.get(word, 0) for word in tokenize(text)] or [0]
        return torch.tensor(ids, dtype=torch.long)

    def token_embeddings(self, text):
        """(L, embed_dim) per-token embeddings, used as the denoiser's text tokens."""
        return self.proj(self.embedding(self.token_ids(text)))

    def forward(self, texts):
        return torch.stack([self.token_embeddings(t).mean(dim=0) for t in texts])

    def encode_styles(self, descriptions):
        return self([PROMPT_TEMPLATE.format(makeup=d) for d in descriptions])


# ====== CONTRASTIVE LOSSES ======

def _normalized(z, eps=1e-12):
    norms = z.norm(dim=-1)
    if bool((norms <= eps).any()):
        raise DegenerateConfiguration("zero-norm embedding: cosine similarity is undefined")
    return z / norms[:, None]


def loss_ssl(embeddings, tau=0.1, symmetric=True):
    """
    InfoNCE over B positive pairs.
    Parameters:
        embeddings: (2B, d), rows [0, B) are view 1 and rows [B, 2B) view 2 of the same samples
        symmetric: average over both views as anchors, otherwise view-1 anchors only
    """
    if embeddings.ndim != 2 or embeddings.shape[0] % 2:
        raise ShapeMismatch(f"expected (2B, d) embeddings, got {tuple(embeddings.shape)}")
    n = embeddings.shape[0]
    b = n // 2
    z = _normalized(embeddings)
    logits = (z @ z.T) / tau
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    targets = (torch.arange(n, device=z.device) + b) % n
    per_anchor = -F.log_softmax(logits, dim=1)[torch.arange(n, device=z.device), targets]
    return per_anchor.mean() if symmetric else per_anchor[:b].mean()


def loss_text(image_embeddings, text_embeddings, style_ids, tau=0.1, text_style_ids=None):
    """
    Image-text contrastive loss with same-style positives.

    Anchors are the view-1 image embeddings z_{i,1}. Text entries fill one slot per
    sample-view, so B per-sample texts are laid out twice (slot (i,1) at i, (i,2) at B+i).
    The denominator runs over every slot except the anchor's own (i,1) slot and the
    positives are the remaining slots of the anchor's style.
    """
    style_ids = torch.as_tensor(style_ids, device=image_embeddings.device)
    b = image_embeddings.shape[0]
    if len(style_ids) != b:
        raise ShapeMismatch(f"{len(style_ids)} style ids for {b} image embeddings")
    if text_embeddings.shape[0] == b and text_style_ids is None:
        slots = torch.cat([text_embeddings, text_embeddings], dim=0)
        slot_ids = torch.cat([style_ids, style_ids])
    else:
        slots = text_embeddings
        slot_ids = torch.as_tensor(style_ids if text_style_ids is None else text_style_ids, device=slots.device)
        if len(slot_ids) != slots.shape[0] or slots.shape[0] < b:
            raise ShapeMismatch("text slots and their style ids disagree")

    logits = (_normalized(image_embeddings) @ _normalized(slots).T) / tau
    own_slot = torch.zeros_like(logits, dtype=torch.bool)
    own_slot[torch.arange(b), torch.arange(b)] = True
    log_prob = F.log_softmax(logits.masked_fill(own_slot, float("-inf")), dim=1)
    positives = (slot_ids[None, :] == style_ids[:, None]) & ~own_slot
    counts = positives.sum(dim=1)
    if bool((counts == 0).any()):
        raise EmptyInput("an anchor has no positive text entry")
    per_anchor = -log_prob.masked_fill(~positives, 0.0).sum(dim=1) / counts
    return per_anchor.mean()


# ====== TRAINING ======

@dataclass
class StyleSample:
    image: np.ndarray
    style_id: int
    description: str


@dataclass
class StyleEncoderBundle:
    encoder: StyleEncoder
    text: TextEmbedder
    history: list
    content_hash: str = None


def samples_from_manifest(manifest):
    """One StyleSample per after-image of the dataset."""
    root = Path(manifest.root)
    return [
        StyleSample(image=load_png(root / r["after"]), style_id=r["style_id"], description=r["description"])
        for r in manifest.records
    ]


def build_text_embedder(descriptions, cfg, seed, extra_texts=()):
    return TextEmbedder.build(
        [PROMPT_TEMPLATE.format(makeup=d) for d in descriptions] + list(extra_texts),
        width=cfg.text_width, embed_dim=cfg.embed_dim, seed=seed,
    )


def init_style_encoder(cfg, seed):
    """Seeded random init, playing the role of the pretrained vision tower."""
    torch.manual_seed(seed)
    return StyleEncoder(cfg).freeze()


def train_style_encoder(samples, config, seed=0, use_ssl=None, use_text=None, extra_texts=()):
    """
    Fine-tune the style encoder on L_clip = L_ssl + L_text.
    Parameters:
        samples: list of StyleSample (after-images with style labels and descriptions)
        config: resolved config dict (style_encoder, stage1, augment sections)
        extra_texts: other prompts the text embedder must know (the denoiser prompt)
    Returns:
        StyleEncoderBundle with the per-step loss history
    """
    stage = config["stage1"]
    use_ssl = stage["use_ssl"] if use_ssl is None else use_ssl
    use_text = stage["use_text"] if use_text is None else use_text
    if not (use_ssl or use_text):
        raise DegenerateConfiguration("at least one of the SSL and text objectives must be enabled")
    styles = sorted({s.style_id for s in samples})
    if len(styles) < 2:
        raise DegenerateConfiguration("stage 1 needs at least 2 makeup styles")

    cfg = StyleEncoderConfig.from_config(config["style_encoder"])
    encoder = init_style_encoder(cfg, seed)
    descriptions = {s.style_id: s.description for s in samples}
    text = build_text_embedder(list(descriptions.values()), cfg, seed, extra_texts)
    policy = AugmentationPolicy.from_config(config["augment"])
    tau = stage["tau"]

    trainable = [p for p in encoder.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=stage["lr"])
    rng = np.random.default_rng(seed)
    batch_size = min(stage["batch_size"], len(samples))
    history = []

    logger.info("=== STAGE 1: STYLE ENCODER FINE-TUNING (ssl=%s, text=%s) ===", use_ssl, use_text)
    encoder.train()
    for step in range(stage["steps"]):
        picks = rng.choice(len(samples), size=batch_size, replace=False)
        views = [two_views(samples[i].image, policy, int(rng.integers(2**31 - 1))) for i in picks]
        x = to_tensor([v[0] for v in views] + [v[1] for v in views])
        ids = torch.tensor([samples[i].style_id for i in picks])

        z = encoder(x)
        l_ssl = loss_ssl(z, tau, stage["symmetric_ssl"]) if use_ssl else z.new_zeros(())
        if use_text:
            with torch.no_grad():
                t = text.encode_styles([samples[i].description for i in picks])
            l_text = loss_text(z[:batch_size], t, ids, tau)
        else:
            l_text = z.new_zeros(())
        loss = l_ssl + l_text

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        history.append({"step": step, "loss_ssl": float(l_ssl), "loss_text": float(l_text), "loss_clip": float(loss)})
        if step % stage["log_every"] == 0 or step == stage["steps"] - 1:
            logger.info("step %d  L_ssl %.4f  L_text %.4f  L_clip %.4f", step, float(l_ssl), float(l_text), float(loss))
    encoder.eval()
    return StyleEncoderBundle(encoder=encoder, text=text, history=history)


def save_style_encoder(path, bundle, config, seed):
    header = {
        "kind": "style_encoder",
        "style_encoder": asdict(bundle.encoder.cfg),
        "stage1": config["stage1"],
        "vocab": bundle.text.vocab,
        "text_seed": bundle.text.seed,
        "seed": seed,
    }
    tensors = {**with_prefix(bundle.encoder.state_dict(), "encoder"), **with_prefix(bundle.text.state_dict(), "text")}
    bundle.content_hash = save_checkpoint(path, tensors, header)
    return bundle.content_hash


def load_style_encoder(path):
    tensors, header, content_hash = load_checkpoint(path, kind="style_encoder")
    cfg = StyleEncoderConfig(**header["style_encoder"])
    encoder = StyleEncoder(cfg)
    encoder.load_state_dict(split_prefix(tensors, "encoder"))
    encoder.freeze()
    encoder.eval()
    text = TextEmbedder(header["vocab"], cfg.text_width, cfg.embed_dim, header["text_seed"])
    text.load_state_dict(split_prefix(tensors, "text"))
    return StyleEncoderBundle(encoder=encoder, text=text, history=[], content_hash=content_hash)


# ====== KNN STYLE ACCURACY ======

@torch.no_grad()
def embed_images(encoder, images, batch_size=64):
    encoder.eval()
    out = []
    for start in range(0, len(images), batch_size):
        out.append(encoder(to_tensor(images[start:start + batch_size])))
    return torch.cat(out).numpy()


def knn_predict(embeddings, labels, k=5):
    """Leave-one-out KNN on cosine distance; ties go to the class of the nearest tied neighbour."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if k < 1:
        raise DegenerateConfiguration("k must be >= 1")
    if k >= n:
        raise EmptyInput(f"k={k} needs more than {k} evaluation samples, got {n}")
    finder = NearestNeighbors(n_neighbors=k + 1, metric="cosine").fit(embeddings)
    _, neighbours = finder.kneighbors(embeddings)
    predictions = np.empty_like(labels)
    for i in range(n):
        others = [j for j in neighbours[i] if j != i][:k]
        votes = Counter(labels[j] for j in others)
        top = max(votes.values())
        tied = {label for label, count in votes.items() if count == top}
        predictions[i] = next(labels[j] for j in others if labels[j] in tied)
    return predictions


def knn_accuracy_from_embeddings(embeddings, labels, k=5):
    return float(np.mean(knn_predict(embeddings, labels, k) == np.asarray(labels)))


def knn_accuracy(encoder, eval_set, k=5):
    """
    Parameters:
        eval_set: list of StyleSample, or (images, labels)
    Returns:
        leave-one-out KNN style accuracy in [0,1]
    """
    if isinstance(eval_set, tuple):
        images, labels = eval_set
    else:
        images = [s.image for s in eval_set]
        labels = [s.style_id for s in eval_set]
    if k >= len(labels):
        raise EmptyInput(f"k={k} needs more than {k} evaluation samples, got {len(labels)}")
    return knn_accuracy_from_embeddings(embed_images(encoder, images), labels, k)
