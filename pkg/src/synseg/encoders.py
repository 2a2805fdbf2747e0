"""Frozen image and text encoders.

Three image encoders share one interface: a hash-seeded mock, a toy linear
patch embedder that keeps spatial information (the desk-scale default), and
an adapter that loads patch-embedding weights from a checkpoint container.
Text is embedded by a hash-seeded mock or by a vocabulary table stored in
the same container. Encoder tensors are ``Parameter(trainable=False)`` and
never receive gradients.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .layers import Module

ENCODER_KINDS = ("seeded_mock", "toy_patch", "pretrained_adapter")
PROMPT_TEMPLATE = "a photo of a {}"


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "toy_patch"
    image_side: int = 32
    patch_size: int = 4
    visual_channels: int = 64
    text_dim: int = 64
    seed: int = 0
    use_prompt_template: bool = False
    position_offsets: bool = False
    weights_path: str | None = None

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        if self.image_side <= 0 or self.patch_size <= 0 or self.image_side % self.patch_size:
            raise ValueError(f"image_side {self.image_side} must be a positive multiple of patch_size {self.patch_size}")
        if self.visual_channels <= 0 or self.text_dim <= 0:
            raise ValueError("encoder dimensions must be positive")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class VisualFeatureGrid:
    grid: np.ndarray  # (H', W', C_v)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grid.shape[0], self.grid.shape[1]

    @property
    def channels(self) -> int:
        return self.grid.shape[2]

    def flat(self) -> np.ndarray:
        """Row-major (y-major) token matrix of shape (H'W', C_v)."""
        h, w, c = self.grid.shape
        return self.grid.reshape(h * w, c)


@dataclass
class TextEmbedding:
    vector: np.ndarray  # (d,)
    category: str


def _hash_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def _check_image(image: np.ndarray, config: EncoderConfig) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    side = config.image_side
    if image.shape != (side, side, 3):
        raise ValueError(f"image must be {side}x{side}x3 (resize first), got {image.shape}")
    return image


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, 3) -> (H/p * W/p, p*p*3), patches in row-major order."""
    h, w, c = image.shape
    gh, gw = h // patch, w // patch
    x = image.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * gw, patch * patch * c)


class SeededMockImageEncoder(Module):
    """Grid of pseudo-random features keyed on the image bytes; no spatial meaning."""

    def __init__(self, config: EncoderConfig):
        self.config = config

    def encode(self, image: np.ndarray) -> VisualFeatureGrid:
        image = _check_image(image, self.config)
        g = self.config.grid_side
        rng = np.random.default_rng(_hash_seed("image", self.config.seed, hashlib.sha256(image.tobytes()).hexdigest()))
        grid = rng.standard_normal((g, g, self.config.visual_channels)).astype(np.float32)
        return VisualFeatureGrid(grid)


class ToyPatchEncoder(Module):
    """Per-patch flatten followed by a fixed seeded linear map.

    Pixels are centred at 0.5 before the map. With ``position_offsets`` a
    fixed per-patch vector is added to each token.
    """

    def __init__(self, config: EncoderConfig, patch_weight: np.ndarray | None = None,
                 position: np.ndarray | None = None):
        self.config = config
        p, c = config.patch_size, config.visual_channels
        n_tokens = config.grid_side ** 2
        rng = np.random.default_rng(_hash_seed("toy_patch", config.seed))
        if patch_weight is None:
            patch_weight = rng.standard_normal((p * p * 3, c)) / np.sqrt(p * p * 3)
        if position is None:
            position = rng.standard_normal((n_tokens, c)) * 0.5 if config.position_offsets else np.zeros((n_tokens, c))
        self.patch_weight = Parameter(np.asarray(patch_weight, np.float32), trainable=False)
        self.position = Parameter(np.asarray(position, np.float32), trainable=False)
        if self.patch_weight.shape != (p * p * 3, c):
            raise ValueError(f"tensor 'image.patch_weight': shape {self.patch_weight.shape} != {(p * p * 3, c)}")
        if self.position.shape != (n_tokens, c):
            raise ValueError(f"tensor 'image.position': shape {self.position.shape} != {(n_tokens, c)}")

    def encode(self, image: np.ndarray) -> VisualFeatureGrid:
        image = _check_image(image, self.config)
        tokens = patchify(image - np.float32(0.5), self.config.patch_size)
        feats = tokens @ self.patch_weight.data + self.position.data
        g = self.config.grid_side
        return VisualFeatureGrid(feats.reshape(g, g, -1).astype(np.float32))


class SeededMockTextEncoder(Module):
    """Unit vector drawn from a generator seeded by a hash of (text, seed)."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self._cache = lru_cache(maxsize=4096)(self._embed)

    def prompt(self, category: str) -> str:
        return PROMPT_TEMPLATE.format(category) if self.config.use_prompt_template else category

    def _embed(self, text: str) -> np.ndarray:
        rng = np.random.default_rng(_hash_seed("text", self.config.seed, text))
        v = rng.standard_normal(self.config.text_dim)
        v = (v / np.linalg.norm(v)).astype(np.float32)
        v.setflags(write=False)
        return v

    def encode(self, category: str) -> TextEmbedding:
        if not category or not category.strip():
            raise ValueError("category must be a non-empty string")
        return TextEmbedding(self._cache(self.prompt(category)), category)


class TableTextEncoder(SeededMockTextEncoder):
    """Looks categories up in a stored embedding table; falls back to the mock."""

    def __init__(self, config: EncoderConfig, vocab: list[str], table: np.ndarray):
        super().__init__(config)
        if table.shape != (len(vocab), config.text_dim):
            raise ValueError(f"tensor 'text.embeddings': shape {table.shape} != {(len(vocab), config.text_dim)}")
        self.embeddings = Parameter(np.asarray(table, np.float32), trainable=False)
        self.index = {w: i for i, w in enumerate(vocab)}

    def encode(self, category: str) -> TextEmbedding:
        if category in self.index:
            v = self.embeddings.data[self.index[category]].copy()
            v.setflags(write=False)
            return TextEmbedding(v, category)
        return super().encode(category)


@dataclass
class EncoderPair:
    image: Module
    text: SeededMockTextEncoder
    config: EncoderConfig

    def encode_image(self, image: np.ndarray) -> VisualFeatureGrid:
        return self.image.encode(image)

    def encode_text(self, category: str) -> TextEmbedding:
        return self.text.encode(category)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"image.{k}": v for k, v in self.image.state_dict().items()}
        out.update({f"text.{k}": v for k, v in self.text.state_dict().items()})
        return out


def build_encoders(config: EncoderConfig) -> EncoderPair:
    if config.kind == "seeded_mock":
        return EncoderPair(SeededMockImageEncoder(config), SeededMockTextEncoder(config), config)
    if config.kind == "toy_patch":
        return EncoderPair(ToyPatchEncoder(config), SeededMockTextEncoder(config), config)
    if config.weights_path is None:
        raise ValueError("pretrained_adapter needs weights_path")
    return load_pretrained_adapter(config.weights_path, config)


def encode_image(image: np.ndarray, config: EncoderConfig) -> VisualFeatureGrid:
    return build_encoders(config).encode_image(image)


def encode_text(category: str, config: EncoderConfig) -> TextEmbedding:
    return build_encoders(config).encode_text(category)


REQUIRED_ADAPTER_TENSORS = ("image.patch_weight", "image.position")


def save_encoder_weights(path: str | Path, encoders: EncoderPair, vocab: list[str] | None = None) -> None:
    """Write encoder tensors in the checkpoint container format."""
    from .checkpoint import save_checkpoint

    tensors = {k: v for k, v in encoders.tensors().items() if k.startswith("image.")}
    meta = {"kind": "encoder_weights", "encoder_config": encoders.config.to_dict()}
    if vocab is not None:
        tensors["text.embeddings"] = np.stack([encoders.encode_text(w).vector for w in vocab])
        meta["text_vocab"] = list(vocab)
    save_checkpoint(path, tensors, meta)


def load_pretrained_adapter(weights_path: str | Path, config: EncoderConfig) -> EncoderPair:
    """Build frozen encoders from a container holding patch-embedding weights.

    Required tensors: ``image.patch_weight`` (p*p*3, C_v) and ``image.position``
    (H'W', C_v). Optional ``text.embeddings`` with a ``text_vocab`` list in the
    manifest.
    """
    from .checkpoint import load_checkpoint

    path = Path(weights_path)
    if not path.is_file():
        raise FileNotFoundError(f"encoder weights not found: {path}")
    ckpt = load_checkpoint(path)
    for name in REQUIRED_ADAPTER_TENSORS:
        if name not in ckpt.tensors:
            raise KeyError(f"encoder weights {path} missing tensor {name!r}")
    image = ToyPatchEncoder(config, ckpt.tensors["image.patch_weight"], ckpt.tensors["image.position"])
    if "text.embeddings" in ckpt.tensors:
        vocab = ckpt.meta.get("text_vocab")
        if vocab is None:
            raise KeyError(f"encoder weights {path} have 'text.embeddings' but no 'text_vocab'")
        text = TableTextEncoder(config, list(vocab), ckpt.tensors["text.embeddings"])
    else:
        text = SeededMockTextEncoder(config)
    return EncoderPair(image, text, config)
