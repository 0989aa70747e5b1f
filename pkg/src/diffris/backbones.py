"""Pluggable frozen encoders and the noise-schedule utilities.

Three toy stand-ins cover the encoder side of the pipeline: a small
self-attention text encoder, a strided-convolution latent downsampler, and a
UNet-shaped pyramid extractor conditioned on text through cross-attention.
They are random-initialized, deterministic given a seed, and train-frozen by
default; only their interface shapes matter to the trainable modules.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ParameterError, SequenceLengthError, ShapeError, VocabularyError

PAD_ID = 0


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class TokenSequence:
    """A tokenized expression: `ids` are the real tokens, no padding."""

    ids: list[int]

    def padded(self, max_tokens: int) -> tuple[Tensor, Tensor]:
        """Return (ids, pad_mask) both of length `max_tokens`; mask True = real token."""
        n = len(self.ids)
        if n > max_tokens:
            raise SequenceLengthError(f"sequence of {n} tokens exceeds maximum {max_tokens}")
        ids = torch.full((max_tokens,), PAD_ID, dtype=torch.long)
        ids[:n] = torch.as_tensor(self.ids, dtype=torch.long)
        mask = torch.zeros(max_tokens, dtype=torch.bool)
        mask[:n] = True
        return ids, mask


@dataclass
class LinguisticFeatures:
    """Token-wise text features, one row per padded position.

    `values` is (max_tokens, text_dim) for a single sample or
    (batch, max_tokens, text_dim) batched; padded rows are zero.
    `pad_mask` marks real tokens.
    """

    values: Tensor
    pad_mask: Tensor


@dataclass
class MultiScaleFeatures:
    """Four-level feature pyramid, shallow to deep, channels-first tensors.

    Level i (1-based) has spatial size (H / 2**(i+1), W / 2**(i+1)).
    """

    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ShapeError(f"pyramid must have exactly 4 levels, got {len(self.levels)}")
        for shallow, deep in zip(self.levels, self.levels[1:]):
            sh, sw = shallow.shape[-2:]
            dh, dw = deep.shape[-2:]
            if (sh, sw) != (2 * dh, 2 * dw):
                raise ShapeError(
                    f"pyramid spatial dims must halve level to level, got {(sh, sw)} then {(dh, dw)}"
                )

    def spatial_sizes(self) -> list[tuple[int, int]]:
        return [tuple(level.shape[-2:]) for level in self.levels]


# ---------------------------------------------------------------------------
# attention helpers
# ---------------------------------------------------------------------------


def masked_softmax(scores: Tensor, key_mask: Tensor) -> Tensor:
    """Softmax over the last dim where False keys get exactly zero weight.

    `key_mask` must broadcast against `scores`. Rows with no valid key at all
    return all-zero weights instead of NaN.
    """
    neg = torch.finfo(scores.dtype).min
    masked = scores.masked_fill(~key_mask, neg)
    attn = torch.softmax(masked, dim=-1)
    alive = key_mask.any(dim=-1, keepdim=True)
    return attn * alive


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> Tensor:
    """Fixed sin/cos position table, (length, dim)."""
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * half / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * freq)
    table[:, 1::2] = torch.cos(position * freq)[:, : dim - dim // 2]
    return table.to(dtype)


class SelfAttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention + feedforward, padding-aware."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 2):
        super().__init__()
        if dim % heads != 0:
            raise ParameterError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim)
        )

    def forward(self, x: Tensor, pad_mask: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q = q.view(b, n, h, d // h).transpose(1, 2)
        k = k.view(b, n, h, d // h).transpose(1, 2)
        v = v.view(b, n, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        attn = masked_softmax(scores, pad_mask[:, None, None, :])
        mixed = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.out(mixed)
        x = x + self.ff(self.norm2(x))
        return x


# ---------------------------------------------------------------------------
# text encoder
# ---------------------------------------------------------------------------


class TextEncoder(nn.Module):
    """Embedding table + fixed sinusoidal positions + a small self-attention stack.

    Padded rows of the output are forced to zero.
    """

    def __init__(
        self,
        vocab_size: int = 64,
        text_dim: int = 64,
        max_tokens: int = 20,
        depth: int = 2,
        heads: int = 4,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.embedding = nn.Embedding(vocab_size, text_dim)
        self.register_buffer("positions", sinusoidal_positions(max_tokens, text_dim))
        self.blocks = nn.ModuleList(SelfAttentionBlock(text_dim, heads) for _ in range(depth))

    def forward(self, ids: Tensor, pad_mask: Tensor) -> Tensor:
        """ids, pad_mask: (batch, max_tokens) -> features (batch, max_tokens, text_dim)."""
        if ids.shape[-1] != self.max_tokens:
            raise SequenceLengthError(
                f"expected padded length {self.max_tokens}, got {ids.shape[-1]}"
            )
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise VocabularyError(
                f"token ids must lie in [0, {self.vocab_size}), got range "
                f"[{int(ids.min())}, {int(ids.max())}]"
            )
        x = self.embedding(ids) + self.positions.to(ids.device)
        for block in self.blocks:
            x = block(x, pad_mask)
        return x * pad_mask.unsqueeze(-1)


def encode_text(encoder: TextEncoder, tokens: TokenSequence) -> LinguisticFeatures:
    """Single-sample text encoding; validates vocabulary and length."""
    ids, mask = tokens.padded(encoder.max_tokens)
    for t in tokens.ids:
        if not 0 <= t < encoder.vocab_size:
            raise VocabularyError(f"token id {t} outside vocabulary of {encoder.vocab_size}")
    with torch.no_grad():
        values = encoder(ids.unsqueeze(0), mask.unsqueeze(0)).squeeze(0)
    return LinguisticFeatures(values=values, pad_mask=mask)


# ---------------------------------------------------------------------------
# latent encoder
# ---------------------------------------------------------------------------


class LatentEncoder(nn.Module):
    """Strided convolutional downsampler; image (B,3,H,W) -> latent (B,c,H/f,W/f)."""

    def __init__(
        self,
        out_channels: int = 32,
        factor: int = 8,
        in_channels: int = 3,
        hidden: int = 16,
        bias: bool = True,
    ):
        super().__init__()
        if factor < 1 or (factor & (factor - 1)) != 0:
            raise ParameterError(f"downsample factor must be a power of two, got {factor}")
        self.factor = factor
        stages = int(math.log2(factor))
        convs: list[nn.Module] = []
        ch = in_channels
        for i in range(stages):
            nxt = out_channels if i == stages - 1 else min(hidden * 2**i, out_channels)
            convs.append(nn.Conv2d(ch, nxt, kernel_size=3, stride=2, padding=1, bias=bias))
            ch = nxt
        if stages == 0:
            convs.append(nn.Conv2d(ch, out_channels, kernel_size=1, bias=bias))
        self.convs = nn.ModuleList(convs)

    def forward(self, image: Tensor) -> Tensor:
        h, w = image.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ShapeError(f"image dims {(h, w)} not divisible by factor {self.factor}")
        x = image
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.silu(x)
        return x


def encode_image_latent(encoder: LatentEncoder, image: Tensor) -> Tensor:
    """Single-sample latent encoding; accepts (H, W, 3) and returns (c, H/f, W/f)."""
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {tuple(image.shape)}")
    with torch.no_grad():
        chw = image.permute(2, 0, 1).unsqueeze(0)
        return encoder(chw).squeeze(0)


# ---------------------------------------------------------------------------
# pyramid feature extractor
# ---------------------------------------------------------------------------


class TextCrossAttention(nn.Module):
    """Spatial positions attend to text tokens; residual, single head."""

    def __init__(self, channels: int, text_dim: int, attn_dim: int = 32):
        super().__init__()
        self.scale = 1.0 / math.sqrt(attn_dim)
        self.to_q = nn.Linear(channels, attn_dim, bias=False)
        self.to_k = nn.Linear(text_dim, attn_dim, bias=False)
        self.to_v = nn.Linear(text_dim, attn_dim, bias=False)
        self.to_out = nn.Linear(attn_dim, channels)

    def forward(self, x: Tensor, text: Tensor, pad_mask: Tensor) -> Tensor:
        b, c, h, w = x.shape
        pixels = x.flatten(2).transpose(1, 2)  # (b, hw, c)
        q = self.to_q(pixels)
        k = self.to_k(text)
        v = self.to_v(text)
        scores = q @ k.transpose(-1, -2) * self.scale
        attn = masked_softmax(scores, pad_mask[:, None, :])
        mixed = self.to_out(attn @ v)
        return x + mixed.transpose(1, 2).view(b, c, h, w)


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class PyramidFeatureExtractor(nn.Module):
    """UNet-shaped single-pass extractor: latent + text -> 4-level pyramid.

    For an image of size (H, W) and latent factor 8, the levels come out at
    (H/4, H/8, H/16, H/32), shallow to deep, with one text cross-attention per
    level so the conditioning path stays live everywhere.
    """

    def __init__(
        self,
        latent_channels: int = 32,
        text_dim: int = 64,
        base_channels: int = 32,
        out_channels: tuple[int, int, int, int] = (32, 64, 128, 256),
        attn_dim: int = 32,
    ):
        super().__init__()
        b = base_channels
        self.stem = nn.Conv2d(latent_channels, b, 3, padding=1)
        self.down1 = nn.Conv2d(b, 2 * b, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1)
        self.up3 = nn.Conv2d(4 * b, 2 * b, 3, padding=1)
        self.up2 = nn.Conv2d(2 * b, b, 3, padding=1)
        self.up1 = nn.Conv2d(b, b, 3, padding=1)
        self.norms = nn.ModuleList(_group_norm(ch) for ch in (b, 2 * b, 4 * b, 2 * b, b, b))
        self.attn = nn.ModuleList(
            TextCrossAttention(ch, text_dim, attn_dim) for ch in (b, b, 2 * b, 4 * b)
        )
        self.taps = nn.ModuleList(
            nn.Conv2d(ch, out, 1) for ch, out in zip((b, b, 2 * b, 4 * b), out_channels)
        )

    def forward(self, z: Tensor, text: Tensor, pad_mask: Tensor) -> MultiScaleFeatures:
        h, w = z.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"latent dims {(h, w)} must be divisible by 4")
        act = F.silu
        e0 = act(self.norms[0](self.stem(z)))       # H/8
        e1 = act(self.norms[1](self.down1(e0)))     # H/16
        e2 = act(self.norms[2](self.down2(e1)))     # H/32
        d4 = self.attn[3](e2, text, pad_mask)
        u3 = act(self.norms[3](self.up3(F.interpolate(d4, scale_factor=2, mode="nearest"))))
        d3 = self.attn[2](u3 + e1, text, pad_mask)
        u2 = act(self.norms[4](self.up2(F.interpolate(d3, scale_factor=2, mode="nearest"))))
        d2 = self.attn[1](u2 + e0, text, pad_mask)
        u1 = act(self.norms[5](self.up1(F.interpolate(d2, scale_factor=2, mode="nearest"))))
        d1 = self.attn[0](u1, text, pad_mask)
        levels = [self.taps[0](d1), self.taps[1](d2), self.taps[2](d3), self.taps[3](d4)]
        return MultiScaleFeatures(levels=levels)


def extract_multiscale(
    extractor: PyramidFeatureExtractor, z: Tensor, text: LinguisticFeatures
) -> MultiScaleFeatures:
    """Single-sample pyramid extraction from a (c, h, w) latent."""
    with torch.no_grad():
        pyramid = extractor(
            z.unsqueeze(0), text.values.unsqueeze(0), text.pad_mask.unsqueeze(0)
        )
    return MultiScaleFeatures(levels=[lvl.squeeze(0) for lvl in pyramid.levels])


# ---------------------------------------------------------------------------
# noise schedule utilities
# ---------------------------------------------------------------------------


@dataclass
class DiffusionSchedule:
    """Linear variance schedule with running products, 1-indexed by step."""

    betas: Tensor
    alphas: Tensor
    alpha_bars: Tensor

    @property
    def steps(self) -> int:
        return self.betas.shape[0]


def make_schedule(steps: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Variances increase linearly from beta_start to beta_end over `steps`."""
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    if not (0.0 < beta_start < beta_end < 1.0) and not (steps == 1 and 0.0 < beta_start < 1.0):
        raise ParameterError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if steps == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_diffuse(x0: Tensor, t: int, schedule: DiffusionSchedule, noise: Tensor) -> Tensor:
    """Closed-form noising of x0 at step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    if not 1 <= t <= schedule.steps:
        raise IndexError(f"step {t} outside [1, {schedule.steps}]")
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    abar = schedule.alpha_bars[t - 1].to(x0.dtype)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise


# ---------------------------------------------------------------------------
# bundle and the frozen contract
# ---------------------------------------------------------------------------


class BackboneBundle(nn.Module):
    """Container for the three encoders with a freeze switch.

    When frozen, no parameter may change during training; the digest methods
    give the bitwise evidence.
    """

    def __init__(
        self,
        text_encoder: TextEncoder,
        latent_encoder: LatentEncoder,
        feature_extractor: PyramidFeatureExtractor,
        frozen: bool = True,
    ):
        super().__init__()
        self.text_encoder = text_encoder
        self.latent_encoder = latent_encoder
        self.feature_extractor = feature_extractor
        self.frozen = frozen
        if frozen:
            self.freeze()

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)

    def unfreeze(self) -> None:
        self.frozen = False
        for p in self.parameters():
            p.requires_grad_(True)

    def tensor_digests(self) -> dict[str, str]:
        """SHA-256 per parameter/buffer, in name order."""
        out = {}
        for name, tensor in sorted(self.state_dict().items()):
            out[name] = hashlib.sha256(
                tensor.detach().cpu().contiguous().numpy().tobytes()
            ).hexdigest()
        return out

    def digest(self) -> str:
        """Single content hash over all parameters and buffers."""
        h = hashlib.sha256()
        for name, hexd in self.tensor_digests().items():
            h.update(name.encode())
            h.update(bytes.fromhex(hexd))
        return h.hexdigest()


def build_backbones(cfg, seed: int | None = None) -> BackboneBundle:
    """Construct the bundle deterministically from a BackboneConfig."""
    torch.manual_seed(cfg.seed if seed is None else seed)
    text = TextEncoder(
        vocab_size=cfg.vocab_size,
        text_dim=cfg.text_dim,
        max_tokens=cfg.max_tokens,
        depth=cfg.text_depth,
        heads=cfg.text_heads,
    )
    latent = LatentEncoder(out_channels=cfg.latent_channels, factor=cfg.downsample_factor)
    extractor = PyramidFeatureExtractor(
        latent_channels=cfg.latent_channels,
        text_dim=cfg.text_dim,
        base_channels=cfg.base_channels,
        out_channels=tuple(cfg.pyramid_channels),
        attn_dim=cfg.attn_dim,
    )
    return BackboneBundle(text, latent, extractor, frozen=cfg.frozen)
