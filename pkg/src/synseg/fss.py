"""Feature Synergy Structure.

Text-conditioned visual tokens (FiLM), a small transformer decoder that turns
them into a per-category activation map, a 1x1 projector, and the
activation-weighted pooling that yields foreground/background feature pairs.

Every function accepts either a single category (``(L, C)`` tokens, ``(d,)``
text) or a stack of categories along a leading axis (``(N, L, C)``,
``(N, d)``). Token order is row-major over the patch grid throughout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderPair, TextEmbedding, VisualFeatureGrid
from .layers import LayerNorm, Linear, Module


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    heads: int = 4
    ffn_mult: int = 4
    film_hidden: int | None = None  # defaults to visual_channels
    head_std: float = 0.5
    head_bias: float = 0.0
    seed: int = 42

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class FiLM(Module):
    """Text embedding -> per-channel (gamma, beta), applied as (1 + gamma) * v + beta.

    Both output heads start at zero, so the fusion is the identity at init.
    """

    def __init__(self, text_dim: int, channels: int, hidden: int, rng: np.random.Generator):
        self.hidden = Linear(text_dim, hidden, rng)
        self.gamma = Linear(hidden, channels, init="zeros")
        self.beta = Linear(hidden, channels, init="zeros", decay=False)

    def __call__(self, text: Tensor) -> tuple[Tensor, Tensor]:
        h = ad.gelu(self.hidden(text))
        return self.gamma(h), self.beta(h)


class TransformerBlock(Module):
    """Pre-norm self-attention + feed-forward over the token sequence."""

    def __init__(self, width: int, heads: int, ffn_width: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = LayerNorm(width)
        self.q = Linear(width, width, rng)
        self.k = Linear(width, width, rng)
        self.v = Linear(width, width, rng)
        self.out = Linear(width, width, rng, std=0.5 / np.sqrt(width))
        self.ln2 = LayerNorm(width)
        self.ff1 = Linear(width, ffn_width, rng)
        self.ff2 = Linear(ffn_width, width, rng, std=0.5 / np.sqrt(ffn_width))

    def _split(self, x: Tensor) -> Tensor:
        n, length, width = x.shape
        return ad.transpose(ad.reshape(x, (n, length, self.heads, width // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        n, length, width = x.shape
        h = self.ln1(x)
        q, k, v = self._split(self.q(h)), self._split(self.k(h)), self._split(self.v(h))
        scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(width // self.heads))
        mixed = ad.matmul(ad.softmax(scores, axis=-1), v)
        mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (n, length, width))
        x = ad.add(x, self.out(mixed))
        return ad.add(x, self.ff2(ad.gelu(self.ff1(self.ln2(x)))))


class Decoder(Module):
    """Transformer blocks, final norm, and a linear head giving one logit per token."""

    def __init__(self, width: int, depth: int, heads: int, ffn_width: int, rng: np.random.Generator,
                 head_std: float = 0.5, head_bias: float = 0.0):
        self.blocks = [TransformerBlock(width, heads, ffn_width, rng) for _ in range(depth)]
        self.ln = LayerNorm(width)
        self.head = Linear(width, 1, rng, std=head_std / np.sqrt(width))
        self.head.bias.data[:] = head_bias

    def __call__(self, tokens: Tensor) -> Tensor:
        single = tokens.ndim == 2
        x = ad.reshape(tokens, (1,) + tokens.shape) if single else tokens
        for block in self.blocks:
            x = block(x)
        logits = self.head(self.ln(x))
        logits = ad.reshape(logits, logits.shape[:-1])
        return ad.reshape(logits, logits.shape[1:]) if single else logits


class Projector(Module):
    """1x1 convolution: one linear map C_v -> d shared by every grid position."""

    def __init__(self, in_channels: int, out_dim: int, rng: np.random.Generator | None = None,
                 init: str = "normal"):
        self.conv = Linear(in_channels, out_dim, rng, init=init)

    def __call__(self, tokens: Tensor) -> Tensor:
        return self.conv(tokens)


class SynSegModel(Module):
    """The trainable part of the pipeline: FiLM, decoder and projector."""

    def __init__(self, visual_channels: int, text_dim: int, config: ModelConfig = ModelConfig()):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.film = FiLM(text_dim, visual_channels, config.film_hidden or visual_channels, rng)
        self.decoder = Decoder(visual_channels, config.depth, config.heads, config.ffn_mult * visual_channels, rng,
                               head_std=config.head_std, head_bias=config.head_bias)
        self.projector = Projector(visual_channels, text_dim, rng)
        self.steps_trained = 0


@dataclass
class SemanticActivationMap:
    logits: Tensor      # (..., H', W')
    activation: Tensor  # sigmoid(logits)
    category: str | list[str] | None = None


@dataclass
class SynergyFeaturePair:
    foreground: Tensor  # (..., d)
    background: Tensor
    category: str | list[str] | None = None


def _tokens(grid) -> Tensor:
    if isinstance(grid, VisualFeatureGrid):
        return Tensor(grid.flat())
    return ad.as_tensor(grid)


def _text(text) -> Tensor:
    if isinstance(text, TextEmbedding):
        return Tensor(text.vector)
    if isinstance(text, (list, tuple)) and text and isinstance(text[0], TextEmbedding):
        return Tensor(np.stack([t.vector for t in text]))
    return ad.as_tensor(text)


def film_fuse(grid, text, film: FiLM) -> Tensor:
    """out[p, c] = (1 + gamma[c]) * grid[p, c] + beta[c], with (gamma, beta) = film(text)."""
    tokens, t = _tokens(grid), _text(text)
    channels = film.gamma.weight.shape[1]
    if tokens.shape[-1] != channels:
        raise ad.ShapeError(f"film_fuse: grid has {tokens.shape[-1]} channels, FiLM expects {channels}")
    if t.shape[-1] != film.hidden.weight.shape[0]:
        raise ad.ShapeError(f"film_fuse: text dim {t.shape[-1]} != FiLM input {film.hidden.weight.shape[0]}")
    gamma, beta = film(t)
    if t.ndim == 2:
        gamma = ad.reshape(gamma, (gamma.shape[0], 1, channels))
        beta = ad.reshape(beta, (beta.shape[0], 1, channels))
    return ad.add(ad.mul(ad.add(gamma, 1.0), tokens), beta)


def decode_activation(cond: Tensor, decoder: Decoder, grid_shape: tuple[int, int]) -> SemanticActivationMap:
    logits = decoder(cond)
    logits = ad.reshape(logits, logits.shape[:-1] + tuple(grid_shape))
    return SemanticActivationMap(logits, ad.sigmoid(logits))


def project(cond: Tensor, projector: Projector) -> Tensor:
    return projector(cond)


def build_synergy_pair(activation, projected: Tensor) -> SynergyFeaturePair:
    """Foreground a @ P and background (1 - a) @ P for a flattened activation row a."""
    if isinstance(activation, SemanticActivationMap):
        activation = activation.activation
    a = ad.as_tensor(activation)
    p = ad.as_tensor(projected)
    rows = p.shape[-2]
    batch = p.shape[:-2]
    if a.data.size != rows * int(np.prod(batch, dtype=int)):
        raise ad.ShapeError(f"build_synergy_pair: map has {a.data.size} cells, projection has {rows} rows")
    a_row = ad.reshape(a, batch + (1, rows))
    fg = ad.matmul(a_row, p)
    bg = ad.matmul(ad.sub(1.0, a_row), p)
    out_shape = batch + (p.shape[-1],)
    return SynergyFeaturePair(ad.reshape(fg, out_shape), ad.reshape(bg, out_shape))


@dataclass
class ImageForward:
    categories: list[str]
    maps: SemanticActivationMap     # logits/activation (N, H', W')
    pairs: SynergyFeaturePair       # foreground/background (N, d)
    text: np.ndarray                # (N, d)

    def __len__(self) -> int:
        return len(self.categories)


def dedupe_categories(categories) -> list[str]:
    seen, out = set(), []
    for c in categories:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def forward_features(grid: VisualFeatureGrid, text: np.ndarray, model: SynSegModel,
                     categories: list[str]) -> ImageForward:
    """Run FiLM -> decoder -> projector -> pooling for a stack of text embeddings."""
    tokens = Tensor(grid.flat())
    cond = film_fuse(tokens, Tensor(text), model.film)
    maps = decode_activation(cond, model.decoder, grid.grid_shape)
    maps.category = list(categories)
    projected = project(cond, model.projector)
    pairs = build_synergy_pair(maps.activation, projected)
    pairs.category = list(categories)
    return ImageForward(list(categories), maps, pairs, text)


def forward_image(image: np.ndarray, categories, model: SynSegModel, encoders: EncoderPair) -> ImageForward:
    """Encode once, then run every (deduplicated) category through the structure."""
    categories = dedupe_categories(categories)
    if not categories:
        raise ValueError("forward_image: at least one category is required")
    grid = encoders.encode_image(image)
    text = np.stack([encoders.encode_text(c).vector for c in categories])
    return forward_features(grid, text, model, categories)
