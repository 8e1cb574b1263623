"""A linear class-token segmenter with a frozen random patch embedding.

Pipeline per image::

    patches [Hf, Wf, P*P*ch] -> (append 1) @ embed -> E [Hf, Wf, De]
    E @ decoder -> F [Hf, Wf, D]
    F @ tokens.T / temperature -> patch logits [Hf, Wf, K+1]
    nearest upsample + softmax -> S [H, W, K+1]

Because the upsampling is a pure replication, S is computed at patch
resolution and replicated; pixel-level gradients are block-summed back.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import block_sum, load_tensor, save_tensor, softmax, upsample_nearest


@dataclass
class ToySegmenter:
    embed: np.ndarray    # [P*P*ch + 1, De]; last row is the constant (bias) input
    decoder: np.ndarray  # [De, D]
    tokens: np.ndarray   # [K+1, D]; row 0 is background
    patch_size: int
    temperature: float
    frozen: bool = False

    @classmethod
    def init(cls, rng: np.random.Generator, patch_size: int, channels: int, num_classes: int,
             d_embed: int = 16, d_model: int = 16) -> "ToySegmenter":
        fan_in = patch_size * patch_size * channels
        embed = rng.standard_normal((fan_in + 1, d_embed)) / np.sqrt(fan_in)
        embed[-1] = rng.standard_normal(d_embed)
        decoder = rng.standard_normal((d_embed, d_model)) / np.sqrt(d_embed)
        tokens = rng.standard_normal((num_classes + 1, d_model)) / np.sqrt(d_model)
        return cls(embed, decoder, tokens, patch_size, float(np.sqrt(d_model)))

    @property
    def num_known(self) -> int:
        return self.tokens.shape[0] - 1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


class ForwardPass:
    """Outputs of :func:`forward` plus what is needed to backpropagate."""

    def __init__(self, model: ToySegmenter, embedded: np.ndarray, features: np.ndarray,
                 patch_probs: np.ndarray):
        self.model = model
        self.embedded = embedded
        self.features = features
        self.patch_probs = patch_probs
        self._pixel_probs = None

    @property
    def probs(self) -> np.ndarray:
        """Pixel-resolution prediction S."""
        if self._pixel_probs is None:
            self._pixel_probs = upsample_nearest(self.patch_probs, self.model.patch_size, spatial_axis=-3)
        return self._pixel_probs

    def backward(self, d_pixel_logits: np.ndarray | None = None,
                 d_features: np.ndarray | None = None,
                 d_patch_logits: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Chain upstream gradients to ``(grad_decoder, grad_tokens)``.

        Logit gradients may be given per pixel or already summed per patch.
        """
        m = self.model
        d_f = np.zeros_like(self.features) if d_features is None else d_features.copy()
        grad_tokens = np.zeros_like(m.tokens)
        if d_pixel_logits is not None:
            d_patch_logits = block_sum(d_pixel_logits, m.patch_size, spatial_axis=-3)
        if d_patch_logits is not None:
            d_patch = d_patch_logits / m.temperature
            d_f += d_patch @ m.tokens
            grad_tokens = _flat(d_patch).T @ _flat(self.features)
        grad_decoder = _flat(self.embedded).T @ _flat(d_f)
        return grad_decoder, grad_tokens


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def extract_patches(images: np.ndarray, p: int) -> np.ndarray:
    """[..., H, W, ch] -> [..., H/p, W/p, p*p*ch] (row-major inside each patch)."""
    *lead, h, w, ch = images.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(*lead, h // p, p, w // p, p, ch)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)  # [..., Hf, Wf, p, p, ch]
    return x.reshape(*lead, h // p, w // p, p * p * ch)


def embed_patches(model: ToySegmenter, images: np.ndarray) -> np.ndarray:
    patches = extract_patches(np.asarray(images, dtype=np.float64), model.patch_size)
    if patches.shape[-1] + 1 != model.embed.shape[0]:
        raise ValueError(f"image channels do not match embedding: patch length {patches.shape[-1]}, "
                         f"embedding expects {model.embed.shape[0] - 1}")
    return patches @ model.embed[:-1] + model.embed[-1]


def forward(model: ToySegmenter, images: np.ndarray) -> ForwardPass:
    """Run the segmenter on ``[H, W, ch]`` or a batch ``[B, H, W, ch]``."""
    embedded = embed_patches(model, images)
    features = embedded @ model.decoder
    logits = features @ model.tokens.T / model.temperature
    return ForwardPass(model, embedded, features, softmax(logits))


def expand_for_new_classes(model: ToySegmenter, n_new: int) -> ToySegmenter:
    """Append ``n_new`` token rows, each a copy of the background token."""
    if n_new < 1:
        raise ValueError("n_new must be >= 1")
    tokens = np.vstack([model.tokens, np.repeat(model.tokens[:1], n_new, axis=0)])
    return ToySegmenter(model.embed, model.decoder.copy(), tokens, model.patch_size, model.temperature)


def snapshot(model: ToySegmenter) -> ToySegmenter:
    """Deep, read-only copy used as the old model."""
    snap = copy.deepcopy(model)
    for arr in (snap.embed, snap.decoder, snap.tokens):
        arr.flags.writeable = False
    snap.frozen = True
    return snap


def save_checkpoint(model: ToySegmenter, directory: str | Path, step: int) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"step = {step}", f"patch_size = {model.patch_size}",
             f"temperature = {model.temperature!r}"]
    for name in ("embed", "decoder", "tokens"):
        arr = getattr(model, name)
        save_tensor(d / f"{name}.clt", arr)
        lines.append(f"param = {name} {'x'.join(map(str, arr.shape))}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory: str | Path) -> tuple[ToySegmenter, int]:
    d = Path(directory)
    meta: dict[str, str] = {}
    for line in (d / "manifest.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        if key.strip() != "param":
            meta[key.strip()] = value.strip()
    params = {n: load_tensor(d / f"{n}.clt") for n in ("embed", "decoder", "tokens")}
    model = ToySegmenter(params["embed"], params["decoder"], params["tokens"],
                         int(meta["patch_size"]), float(meta["temperature"]))
    return model, int(meta["step"])
