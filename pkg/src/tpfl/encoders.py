"""Frozen twin encoders and the two kinds of trainable prompt.

The text tower reads a sequence of token vectors (learnable context plus one
frozen class token); the visual tower reads a flattened image with a
pixel-space prompt added under a template mask. Both towers are small tanh
MLPs with unit-norm outputs, generated deterministically from a seed and
never updated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from tpfl import diffgraph as dg
from tpfl import seeding

TEMPLATES = ("padding", "fixed_patch", "random_patch")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FrozenEncoder:
    kind: str
    widths: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: dg.Node) -> dg.Node:
        """[B, in_dim] -> [B, out_dim], rows on the unit sphere."""
        if x.value.ndim != 2 or x.shape[1] != self.in_dim:
            raise dg.ShapeError(f"{self.kind} encoder input", x.shape, (None, self.in_dim))
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dg.add(dg.matmul(h, dg.const(w)), dg.const(b))
            if i < last:
                h = dg.tanh(h)
        return dg.l2_normalize(h, axis=1)

    def fingerprint(self) -> str:
        digest = hashlib.sha256(self.kind.encode())
        for a in self.weights + self.biases:
            digest.update(np.ascontiguousarray(a).tobytes())
        return digest.hexdigest()


def build_encoder(kind: str, widths, seed: int, gain: float = 1.0) -> FrozenEncoder:
    """Gaussian init with variance gain**2 / fan_in; biases small Gaussian."""
    if kind not in ("text", "visual"):
        raise ValueError(f"unknown encoder kind {kind!r}")
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"bad encoder widths {widths}")
    rng = seeding.rng(seed, "backbone", seeding.stream_key(kind)[0], *widths)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(_frozen(rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))))
        biases.append(_frozen(rng.normal(0.0, 0.1, size=fan_out)))
    return FrozenEncoder(kind, widths, tuple(weights), tuple(biases))


def make_class_embeddings(seed: int, C: int, d_tok: int) -> np.ndarray:
    """Frozen stand-ins for class-name word embeddings; row c depends only on (seed, c)."""
    if C < 2:
        raise ValueError("need at least two classes")
    key = seeding.stream_key("class-token")[0]
    rows = [seeding.rng(seed, "backbone", key, c).standard_normal(d_tok) for c in range(C)]
    return _frozen(np.stack(rows))


@dataclass
class Backbone:
    """Everything frozen: both towers and the class tokens."""

    text: FrozenEncoder
    visual: FrozenEncoder
    class_embeddings: np.ndarray

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.text.fingerprint().encode())
        digest.update(self.visual.fingerprint().encode())
        digest.update(np.ascontiguousarray(self.class_embeddings).tobytes())
        return digest.hexdigest()


def build_backbone(seed: int, C: int, d_tok: int, L: int, image_shape, D: int = 32,
                   hidden: int = 64, gain: float = 1.0) -> Backbone:
    H, W, Ch = image_shape
    return Backbone(
        text=build_encoder("text", (d_tok * (L + 1), hidden, D), seed, gain),
        visual=build_encoder("visual", (H * W * Ch, hidden, D), seed, gain),
        class_embeddings=make_class_embeddings(seed, C, d_tok),
    )


# ----------------------------------------------------------------- text side


@dataclass
class TextPrompt:
    context: np.ndarray
    class_embeddings: np.ndarray
    class_position: int | None = None

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64)
        L = self.context.shape[0]
        if self.context.ndim != 2 or not 1 <= L <= 64:
            raise ValueError(f"context must be [L, d_tok] with 1 <= L <= 64, got {self.context.shape}")
        if self.class_embeddings.shape[1] != self.context.shape[1]:
            raise dg.ShapeError("TextPrompt", self.context.shape, self.class_embeddings.shape)
        if self.class_position is None:
            self.class_position = L
        if not 0 <= self.class_position <= L:
            raise ValueError(f"class_position {self.class_position} outside [0, {L}]")

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]


def _token_rows(prompt: TextPrompt, context: dg.Node, class_rows: np.ndarray) -> dg.Node:
    L, d = prompt.context.shape
    n = class_rows.shape[0]
    flat = dg.reshape(context, (1, L * d))
    tiled = dg.matmul(dg.const(np.ones((n, 1))), flat)
    cut = prompt.class_position * d
    pieces = []
    if cut > 0:
        pieces.append(dg.slice(tiled, 0, cut, axis=1))
    pieces.append(dg.const(class_rows))
    if cut < L * d:
        pieces.append(dg.slice(tiled, cut, L * d, axis=1))
    return dg.concat(pieces, axis=1)


def encode_text_all(prompt: TextPrompt, encoder: FrozenEncoder, context: dg.Node | None = None) -> dg.Node:
    """Embeddings of every class, [C, D]. Pass ``context`` to differentiate through it."""
    if context is None:
        context = dg.const(prompt.context)
    return encoder.forward(_token_rows(prompt, context, prompt.class_embeddings))


def encode_text(prompt: TextPrompt, class_id: int, encoder: FrozenEncoder,
                context: dg.Node | None = None) -> dg.Node:
    if not 0 <= class_id < prompt.n_classes:
        raise IndexError(f"class_id {class_id} outside [0, {prompt.n_classes})")
    if context is None:
        context = dg.const(prompt.context)
    rows = prompt.class_embeddings[class_id:class_id + 1]
    z = encoder.forward(_token_rows(prompt, context, rows))
    return dg.reshape(z, (encoder.out_dim,))


# --------------------------------------------------------------- visual side


def template_mask(template: str, H: int, W: int, size: int) -> np.ndarray:
    """Binary [H, W] mask. For random_patch this is the patch at the origin; it moves per batch."""
    if size < 1:
        raise ValueError("template parameter must be positive")
    mask = np.zeros((H, W))
    if template == "padding":
        if 2 * size >= min(H, W):
            mask[:] = 1.0
        else:
            mask[:size, :] = 1.0
            mask[-size:, :] = 1.0
            mask[:, :size] = 1.0
            mask[:, -size:] = 1.0
    elif template in ("fixed_patch", "random_patch"):
        if size > min(H, W):
            raise ValueError(f"patch size {size} larger than image {H}x{W}")
        mask[:size, :size] = 1.0
    else:
        raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    return mask


@dataclass
class VisualPrompt:
    delta: np.ndarray
    template: str = "padding"
    size: int = 1
    mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.ndim != 3:
            raise dg.ShapeError("VisualPrompt", self.delta.shape)
        H, W, _ = self.delta.shape
        self.mask = template_mask(self.template, H, W, self.size)
        self.delta = self.project(self.delta)

    @property
    def full_mask(self) -> np.ndarray:
        return np.repeat(self.mask[:, :, None], self.delta.shape[2], axis=2)

    def project(self, delta: np.ndarray) -> np.ndarray:
        return delta * self.full_mask

    def draw_offset(self, rng: np.random.Generator | None) -> tuple[int, int]:
        """Placement of the prompt; only random_patch consumes ``rng``."""
        if self.template != "random_patch":
            return (0, 0)
        if rng is None:
            raise ValueError("random_patch needs an rng")
        H, W, _ = self.delta.shape
        return (int(rng.integers(0, H - self.size + 1)), int(rng.integers(0, W - self.size + 1)))


def apply_visual_prompt(x, vp: VisualPrompt, rng: np.random.Generator | None = None,
                        delta: dg.Node | None = None, offset: tuple[int, int] | None = None) -> dg.Node:
    """x + masked delta, for a single image [H, W, Ch] or a batch [B, H, W, Ch]."""
    x = dg.const(x) if not isinstance(x, dg.Node) else x
    if x.shape[-3:] != vp.delta.shape or x.value.ndim not in (3, 4):
        raise dg.ShapeError("apply_visual_prompt", x.shape, vp.delta.shape)
    if delta is None:
        delta = dg.const(vp.delta)
    if offset is None:
        offset = vp.draw_offset(rng)
    mask = vp.full_mask
    if offset != (0, 0):
        delta = dg.roll(delta, offset, (0, 1))
        mask = np.roll(mask, offset, (0, 1))
    return dg.masked_add(x, delta, mask)


def encode_image(x_prompted: dg.Node, enc: FrozenEncoder) -> dg.Node:
    """[H, W, Ch] -> [D] or [B, H, W, Ch] -> [B, D]."""
    x = x_prompted if isinstance(x_prompted, dg.Node) else dg.const(x_prompted)
    single = x.value.ndim == 3
    B = 1 if single else x.shape[0]
    flat_len = int(np.prod(x.shape[-3:]))
    if flat_len != enc.in_dim:
        raise dg.ShapeError("encode_image", x.shape, (enc.in_dim,))
    z = enc.forward(dg.reshape(x, (B, flat_len)))
    return dg.reshape(z, (enc.out_dim,)) if single else z


@dataclass
class PromptPair:
    """One party's trainable state: textual context plus visual delta."""

    text: TextPrompt
    visual: VisualPrompt

    def copy(self) -> "PromptPair":
        return self.with_params(self.text.context, self.visual.delta)

    def with_params(self, context: np.ndarray, delta: np.ndarray) -> "PromptPair":
        text = TextPrompt(np.array(context, dtype=np.float64, copy=True),
                          self.text.class_embeddings, self.text.class_position)
        visual = VisualPrompt(np.array(delta, dtype=np.float64, copy=True),
                              self.visual.template, self.visual.size)
        return PromptPair(text, visual)
