import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpfl import diffgraph as dg
from tpfl.encoders import PromptPair, TextPrompt, VisualPrompt, build_backbone
from tpfl.losses import (LossBreakdown, clip_matching_loss, infonce_augmented_loss, text_augmented_loss,
                         total_loss)

from conftest import rel_err

# -log(e / (e + 1)), evaluated independently of the loss code
LOGISTIC_1 = math.log1p(math.exp(-1.0))


def _unit(rng, *shape):
    z = rng.normal(size=shape)
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def test_logistic_constant():
    assert LOGISTIC_1 == pytest.approx(0.313262, abs=1e-6)


def test_clip_loss_two_class_value():
    z_text = np.array([[1.0, 0.0], [0.0, 1.0]])
    z_vis = np.array([[1.0, 0.0]])
    assert float(clip_matching_loss(z_text, z_vis, [0], 1.0).value) == pytest.approx(LOGISTIC_1, abs=1e-15)


@pytest.mark.parametrize("C", [2, 5, 9])
def test_clip_loss_uniform_is_log_c(C):
    rng = np.random.default_rng(C)
    z_text = np.tile(_unit(rng, 6), (C, 1))
    z_vis = _unit(rng, 4, 6)
    labels = rng.integers(0, C, size=4)
    assert float(clip_matching_loss(z_text, z_vis, labels, 0.07).value) == pytest.approx(math.log(C), abs=1e-9)


def test_clip_loss_relabel_symmetry():
    rng = np.random.default_rng(0)
    z_text, z_vis = _unit(rng, 5, 6), _unit(rng, 7, 6)
    labels = rng.integers(0, 5, size=7)
    perm = rng.permutation(5)
    inv = np.argsort(perm)
    a = float(clip_matching_loss(z_text, z_vis, labels, 0.3).value)
    b = float(clip_matching_loss(z_text[perm], z_vis, inv[labels], 0.3).value)
    assert a == pytest.approx(b, abs=1e-12)


def test_clip_loss_errors():
    z = np.eye(2)
    with pytest.raises(IndexError):
        clip_matching_loss(z, z, [0, 2], 1.0)
    with pytest.raises(ValueError):
        clip_matching_loss(np.array([[np.nan, 0.0], [0.0, 1.0]]), z, [0, 1], 1.0)
    with pytest.raises(ValueError):
        clip_matching_loss(z, z, [0, 1], 0.0)


def test_infonce_scalar_value():
    z_new = np.array([1.0, 0.0])
    loss = infonce_augmented_loss(z_new, np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0)
    assert float(loss.value) == pytest.approx(LOGISTIC_1, abs=1e-15)


def test_infonce_identical_targets_is_ln2_with_zero_gradient():
    rng = np.random.default_rng(3)
    z = dg.param(_unit(rng, 8))
    target = _unit(rng, 8)
    loss = infonce_augmented_loss(z, target, target.copy(), 0.07)
    assert float(loss.value) == pytest.approx(math.log(2), abs=1e-9)
    assert np.all(dg.backward(loss)[z] == 0.0)


def test_infonce_decreases_as_positive_similarity_grows():
    # z_new = e0; positive at angle theta from e0, negative fixed with similarity 0.2
    neg = np.array([0.2, 0.0, math.sqrt(1 - 0.04)])
    values = []
    for s in np.linspace(-0.9, 0.9, 10):
        pos = np.array([s, math.sqrt(1 - s * s), 0.0])
        values.append(float(infonce_augmented_loss(np.array([1.0, 0, 0]), pos, neg, 0.5).value))
    assert all(b < a for a, b in zip(values, values[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_loss_ranges(seed, gamma):
    rng = np.random.default_rng(seed)
    assert float(clip_matching_loss(_unit(rng, 4, 5), _unit(rng, 3, 5), [0, 1, 3], gamma).value) >= 0
    v = float(infonce_augmented_loss(_unit(rng, 5), _unit(rng, 5), _unit(rng, 5), gamma).value)
    assert 0 < v < math.inf


def test_large_temperature_gives_uniform_values():
    rng = np.random.default_rng(1)
    assert float(clip_matching_loss(_unit(rng, 6, 4), _unit(rng, 3, 4), [0, 1, 2], 1e6).value) == pytest.approx(
        math.log(6), abs=1e-6)
    assert float(infonce_augmented_loss(_unit(rng, 4), _unit(rng, 4), _unit(rng, 4), 1e6).value) == pytest.approx(
        math.log(2), abs=1e-6)


def test_text_aug_per_class_is_mean_of_single_terms():
    rng = np.random.default_rng(4)
    zn, zg, zp = _unit(rng, 5, 6), _unit(rng, 5, 6), _unit(rng, 5, 6)
    batched = float(text_augmented_loss(zn, zg, zp, 0.2).value)
    singles = [float(infonce_augmented_loss(zn[c], zg[c], zp[c], 0.2).value) for c in range(5)]
    assert batched == pytest.approx(np.mean(singles), abs=1e-12)
    assert float(text_augmented_loss(zn, zg, zg, 0.2, "pooled").value) == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        text_augmented_loss(zn, zg, zp, 0.2, "bogus")


# ------------------------------------------------------------------ total loss


def random_setting(seed):
    """Small random backbone, three distinct prompt pairs, and a labelled batch."""
    rng = np.random.default_rng(seed)
    C, d_tok, L, shape = 3, 3, 2, (3, 3, 1)
    backbone = build_backbone(seed, C, d_tok, L, shape, D=5, hidden=6)
    template = ("padding", "fixed_patch", "random_patch")[seed % 3]

    def pair():
        return PromptPair(TextPrompt(rng.normal(0, 0.5, (L, d_tok)), backbone.class_embeddings, int(rng.integers(0, L + 1))),
                          VisualPrompt(rng.normal(0, 0.5, shape), template, 1 if template == "padding" else 2))

    new, prev, glob = pair(), pair(), pair()
    prev = new.with_params(prev.text.context, prev.visual.delta)
    glob = new.with_params(glob.text.context, glob.visual.delta)
    images = rng.normal(size=(4,) + shape)
    labels = rng.integers(0, C, size=4)
    offset = new.visual.draw_offset(rng)
    mu = float(rng.uniform(0.1, 2.0))
    gamma = float(np.exp(rng.uniform(np.log(0.07), 0.0)))
    return backbone, new, prev, glob, (images, labels), offset, mu, gamma


def _total_value(backbone, new, prev, glob, batch, offset, mu, gamma, context, delta):
    p = new.with_params(context, delta)
    return total_loss(batch, p, prev, glob, mu, gamma, backbone, offset=offset).total


@pytest.mark.parametrize("seed", range(6))
def test_total_loss_gradient_matches_fd(seed):
    backbone, new, prev, glob, batch, offset, mu, gamma = random_setting(seed)
    lb = total_loss(batch, new, prev, glob, mu, gamma, backbone, offset=offset)
    grads = dg.backward(lb.root)
    fd = dg.fd_gradient(lambda p: _total_value(backbone, new, prev, glob, batch, offset, mu, gamma, *p),
                        [new.text.context, new.visual.delta], 1e-4)
    assert rel_err(grads[lb.context], fd[0]) <= 1e-5
    assert rel_err(grads[lb.delta], fd[1]) <= 1e-5


def test_total_loss_mu_zero_is_matching_loss():
    backbone, new, prev, glob, batch, offset, _, gamma = random_setting(1)
    lb = total_loss(batch, new, prev, glob, 0.0, gamma, backbone, offset=offset)
    assert lb.total == lb.l_con
    assert lb.l_aug_text > 0 and lb.l_aug_visual > 0


def test_total_loss_degenerate_contrast():
    backbone, new, _, _, batch, offset, mu, gamma = random_setting(2)
    lb = total_loss(batch, new, new.copy(), new.copy(), mu, gamma, backbone, offset=offset)
    assert lb.l_aug_text == pytest.approx(math.log(2), abs=1e-12)
    assert lb.l_aug_visual == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_breakdown_invariant(seed):
    backbone, new, prev, glob, batch, offset, mu, gamma = random_setting(seed)
    lb = total_loss(batch, new, prev, glob, mu, gamma, backbone, offset=offset)
    assert isinstance(lb, LossBreakdown)
    assert lb.total == pytest.approx(lb.l_con + mu * (lb.l_aug_text + lb.l_aug_visual), abs=1e-12)
    assert min(lb.l_con, lb.l_aug_text, lb.l_aug_visual) >= 0


def test_only_new_prompts_receive_gradient():
    backbone, new, prev, glob, batch, offset, mu, gamma = random_setting(3)
    lb = total_loss(batch, new, prev, glob, mu, gamma, backbone, offset=offset)
    grads = dg.backward(lb.root)
    assert set(grads) == {lb.context, lb.delta}


def test_frozen_visual_prompt_gets_no_gradient():
    backbone, new, prev, glob, batch, offset, mu, gamma = random_setting(4)
    lb = total_loss(batch, new, prev, glob, mu, gamma, backbone, offset=offset, train_visual=False)
    assert lb.delta is None
    assert set(dg.backward(lb.root)) == {lb.context}


def test_negative_mu_rejected():
    backbone, new, prev, glob, batch, offset, _, gamma = random_setting(0)
    with pytest.raises(ValueError):
        total_loss(batch, new, prev, glob, -1.0, gamma, backbone)
