"""Matching loss, contrastive augmentation toward the global prompts, and their sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tpfl import diffgraph as dg
from tpfl.encoders import Backbone, PromptPair, apply_visual_prompt, encode_image, encode_text_all

TEXT_AUG_MODES = ("per_class", "pooled")


class NonFiniteError(ValueError):
    pass


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        v = a.value if isinstance(a, dg.Node) else np.asarray(a)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"{name}: non-finite input")


def _check_gamma(gamma: float) -> None:
    if not gamma > 0:
        raise ValueError(f"temperature must be positive, got {gamma}")


def clip_matching_loss(z_text, z_vis, labels, gamma: float) -> dg.Node:
    """Mean negative log-probability of the true class under softmax(<z_vis, z_text_c> / gamma).

    z_text is [C, D], z_vis is [B, D]; both may be graph nodes.
    """
    _check_gamma(gamma)
    z_text, z_vis = dg.const(z_text), dg.const(z_vis)
    _check_finite("clip_matching_loss", z_text, z_vis)
    labels = np.asarray(labels, dtype=np.int64)
    C = z_text.shape[0]
    B = z_vis.shape[0]
    if labels.shape != (B,):
        raise dg.ShapeError("clip_matching_loss labels", labels.shape, (B,))
    if np.any(labels < 0) or np.any(labels >= C):
        raise IndexError(f"label out of range [0, {C})")
    logits = dg.scale(dg.matmul(z_vis, dg.transpose(z_text)), 1.0 / gamma)
    onehot = np.zeros((B, C))
    onehot[np.arange(B), labels] = 1.0
    picked = dg.sum(dg.mul_elem(dg.log_softmax(logits, axis=1), dg.const(onehot)))
    return dg.scale(picked, -1.0 / B)


def _infonce_rows(z_new, z_pos: np.ndarray, z_neg: np.ndarray, gamma: float) -> dg.Node:
    """Mean over rows of the two-way InfoNCE loss; z_pos and z_neg never carry gradient."""
    N = z_new.shape[0]
    s_pos = dg.reshape(dg.dot_rows(z_new, dg.const(z_pos)), (N, 1))
    s_neg = dg.reshape(dg.dot_rows(z_new, dg.const(z_neg)), (N, 1))
    logits = dg.scale(dg.concat([s_pos, s_neg], axis=1), 1.0 / gamma)
    first = np.zeros((N, 2))
    first[:, 0] = 1.0
    picked = dg.sum(dg.mul_elem(dg.log_softmax(logits, axis=1), dg.const(first)))
    return dg.scale(picked, -1.0 / N)


def _values(z) -> np.ndarray:
    return z.value if isinstance(z, dg.Node) else np.asarray(z, dtype=np.float64)


def infonce_augmented_loss(z_new, z_global, z_prev, gamma: float) -> dg.Node:
    """-log(e^{s_g/gamma} / (e^{s_g/gamma} + e^{s_p/gamma})) for single [D] embeddings.

    The global embedding is the positive, the previous local embedding the
    negative. Only ``z_new`` is differentiated.
    """
    _check_gamma(gamma)
    z_new = dg.const(z_new)
    zg, zp = _values(z_global), _values(z_prev)
    _check_finite("infonce_augmented_loss", z_new, zg, zp)
    if not z_new.shape == zg.shape == zp.shape or z_new.value.ndim != 1:
        raise dg.ShapeError("infonce_augmented_loss", z_new.shape, zg.shape, zp.shape)
    D = z_new.shape[0]
    return _infonce_rows(dg.reshape(z_new, (1, D)), zg.reshape(1, D), zp.reshape(1, D), gamma)


def text_augmented_loss(z_new, z_global, z_prev, gamma: float, mode: str = "per_class") -> dg.Node:
    """Text-side augmentation over [C, D] class embeddings.

    ``per_class`` averages one InfoNCE term per class; ``pooled`` contrasts the
    renormalized class-mean embedding of each prompt.
    """
    _check_gamma(gamma)
    z_new = dg.const(z_new)
    zg, zp = _values(z_global), _values(z_prev)
    _check_finite("text_augmented_loss", z_new, zg, zp)
    if mode == "per_class":
        return _infonce_rows(z_new, zg, zp, gamma)
    if mode == "pooled":
        pooled = dg.l2_normalize(dg.reshape(dg.sum(z_new, axis=0), (1, z_new.shape[1])), axis=1)

        def pool(z):
            m = z.sum(axis=0, keepdims=True)
            return m / np.linalg.norm(m)

        return _infonce_rows(pooled, pool(zg), pool(zp), gamma)
    raise ValueError(f"unknown text augmentation mode {mode!r}")


@dataclass
class LossBreakdown:
    l_con: float
    l_aug_text: float
    l_aug_visual: float
    total: float
    mu: float
    gamma: float
    # graph handles for the caller's backward pass; excluded from equality
    root: dg.Node | None = field(default=None, repr=False, compare=False)
    context: dg.Node | None = field(default=None, repr=False, compare=False)
    delta: dg.Node | None = field(default=None, repr=False, compare=False)


@dataclass
class FrozenTargets:
    """Embeddings of the global and previous prompts; constant for a whole local round."""

    text_global: np.ndarray
    text_prev: np.ndarray


def frozen_targets(backbone: Backbone, prompts_global: PromptPair, prompts_prev: PromptPair) -> FrozenTargets:
    return FrozenTargets(
        encode_text_all(prompts_global.text, backbone.text).value,
        encode_text_all(prompts_prev.text, backbone.text).value,
    )


def total_loss(batch, prompts_new: PromptPair, prompts_prev: PromptPair, prompts_global: PromptPair,
               mu: float, gamma: float, backbone: Backbone, *, offset=(0, 0), train_visual: bool = True,
               text_aug: str = "per_class", targets: FrozenTargets | None = None) -> LossBreakdown:
    """Matching loss plus mu times the text and visual InfoNCE terms.

    ``batch`` is ``(images [B, H, W, Ch], labels [B])``. ``offset`` places a
    random-patch prompt (the same placement is used for all three prompt
    versions). With ``train_visual=False`` the visual delta is a constant.
    Gradients flow only into the new prompts' context and delta.
    """
    if mu < 0:
        raise ValueError("mu must be non-negative")
    images, labels = batch
    images = np.asarray(images, dtype=np.float64)

    context = dg.param(prompts_new.text.context, name="context")
    delta = dg.param(prompts_new.visual.delta, name="delta") if train_visual else dg.const(prompts_new.visual.delta)

    z_text = encode_text_all(prompts_new.text, backbone.text, context)
    prompted = apply_visual_prompt(images, prompts_new.visual, delta=delta, offset=offset)
    z_vis = encode_image(prompted, backbone.visual)
    l_con = clip_matching_loss(z_text, z_vis, labels, gamma)

    if targets is None:
        targets = frozen_targets(backbone, prompts_global, prompts_prev)
    mean_image = images.mean(axis=0)

    def visual_embedding(vp, d=None):
        return encode_image(apply_visual_prompt(mean_image, vp, delta=d, offset=offset), backbone.visual)

    if mu == 0:
        # augmentation is reported but carries no gradient
        z_text_c = z_text.value
        z_vis_c = visual_embedding(prompts_new.visual).value
        l_aug_t = text_augmented_loss(z_text_c, targets.text_global, targets.text_prev, gamma, text_aug)
        l_aug_v = infonce_augmented_loss(z_vis_c, visual_embedding(prompts_global.visual),
                                         visual_embedding(prompts_prev.visual), gamma)
        root = l_con
    else:
        l_aug_t = text_augmented_loss(z_text, targets.text_global, targets.text_prev, gamma, text_aug)
        l_aug_v = infonce_augmented_loss(visual_embedding(prompts_new.visual, delta),
                                         visual_embedding(prompts_global.visual),
                                         visual_embedding(prompts_prev.visual), gamma)
        root = dg.add(l_con, dg.scale(dg.add(l_aug_t, l_aug_v), mu))

    return LossBreakdown(
        l_con=float(l_con.value),
        l_aug_text=float(l_aug_t.value),
        l_aug_visual=float(l_aug_v.value),
        total=float(root.value),
        mu=float(mu),
        gamma=float(gamma),
        root=root,
        context=context,
        delta=delta if train_visual else None,
    )
