import numpy as np
import pytest

from tpfl import diffgraph as dg
from tpfl.config import ConfigError
from tpfl.data import Dataset
from tpfl.federation import (Adam, Contribution, GlobalPrompts, NonFiniteLossError, SGD, aggregate_prompts,
                             client_update, evaluate, learning_rate, macro_f1, sample_clients, score_embeddings,
                             server_run, setup_run)
from tpfl.losses import total_loss

from conftest import rel_err


# ----------------------------------------------------------------- aggregation


def test_aggregate_equal_weights():
    tau, ups = aggregate_prompts([(1, np.array([[2.0]]), np.zeros(1)), (1, np.array([[4.0]]), np.zeros(1))])
    np.testing.assert_array_equal(tau, [[3.0]])


def test_aggregate_weighted():
    tau, _ = aggregate_prompts([(1, np.array(0.0), np.zeros(1)), (3, np.array(4.0), np.zeros(1))])
    assert float(tau) == 3.0


def brute_force_average(contribs):
    """Separate accumulation path: numerator sum over all clients, then one division."""
    total = sum(c.n for c in contribs)
    num_t = sum(c.n * c.tau for c in contribs)
    num_u = sum(c.n * c.upsilon for c in contribs)
    return num_t / total, num_u / total


def random_contributions(rng, k):
    ids = rng.permutation(50)[:k]
    return [Contribution(int(i), int(rng.integers(1, 40)), rng.normal(size=(3, 4)), rng.normal(size=(2, 2, 1)))
            for i in ids]


@pytest.mark.parametrize("seed", range(5))
def test_aggregate_matches_brute_force(seed):
    contribs = random_contributions(np.random.default_rng(seed), 5)
    tau, ups = aggregate_prompts(contribs)
    bt, bu = brute_force_average(contribs)
    assert np.max(np.abs(tau - bt)) <= 1e-12 and np.max(np.abs(ups - bu)) <= 1e-12


def test_aggregate_permutation_invariant_and_single_exact():
    rng = np.random.default_rng(0)
    contribs = random_contributions(rng, 6)
    a = aggregate_prompts(contribs)
    b = aggregate_prompts(contribs[::-1])
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    one = contribs[0]
    tau, ups = aggregate_prompts([one])
    assert tau.tobytes() == one.tau.tobytes() and ups.tobytes() == one.upsilon.tobytes()


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate_prompts([])
    with pytest.raises(ValueError):
        aggregate_prompts([(0, np.zeros(2), np.zeros(1))])
    with pytest.raises(dg.ShapeError):
        aggregate_prompts([(1, np.zeros(2), np.zeros(1)), (1, np.zeros(3), np.zeros(1))])


# -------------------------------------------------------------------- sampling


def test_sample_all_when_k_equals_m():
    assert sample_clients(7, 7, 3, 0) == list(range(7))


def test_sample_deterministic_sorted_distinct():
    a = sample_clients(20, 6, 4, 11)
    assert a == sample_clients(20, 6, 4, 11)
    assert a == sorted(set(a)) and len(a) == 6
    assert any(sample_clients(20, 6, r, 11) != a for r in range(5, 10))


def test_sample_frequency():
    counts = np.zeros(10)
    for r in range(10_000):
        counts[sample_clients(10, 5, r, 1)] += 1
    assert np.all(np.abs(counts / 10_000 - 0.5) <= 0.02)


def test_sample_k_exceeds_m():
    with pytest.raises(ValueError):
        sample_clients(3, 4, 1, 0)


# ------------------------------------------------------------------ evaluation


def test_forced_correct_predictions(tiny_backbone):
    from tpfl.data import class_prototypes
    from tpfl.encoders import encode_image

    protos = class_prototypes(0, 4, 4, 4, 2)
    z_vis = encode_image(dg.const(protos), tiny_backbone.visual).value
    acc, f1 = score_embeddings(z_vis, z_vis, np.arange(4))
    assert acc == 1.0 and f1 == 1.0


def test_all_wrong_two_class():
    assert macro_f1([0, 0, 1, 1], [1, 1, 0, 0], 2) == 0.0
    z_text = np.eye(2)
    acc, f1 = score_embeddings(z_text, np.array([[0, 1.0], [0, 1.0], [1.0, 0], [1.0, 0]]), [0, 0, 1, 1])
    assert acc == 0.0 and f1 == 0.0


def test_macro_f1_empty_class_convention():
    assert macro_f1([0, 0], [0, 0], 3, empty=1.0) == 1.0
    assert macro_f1([0, 0], [0, 0], 3, empty=0.0) == pytest.approx(1 / 3)
    # hand computed: class 0 F1 = 2/3, class 1 F1 = 1/2 (tp=1, fp=1, fn=0 -> 2/3; ...)
    assert macro_f1([0, 0, 1], [0, 1, 1], 2) == pytest.approx((2 / 3 + 2 / 3) / 2)


def test_random_predictions_near_chance(small_config):
    setup = setup_run(small_config.replace(C=8, test_per_class=100), seed=0)
    rng = np.random.default_rng(5)
    n = 800
    labels = rng.permutation(np.repeat(np.arange(8), 100))
    noise = Dataset(rng.normal(size=(n,) + small_config.image_shape), labels, 8, "test")
    acc, _ = evaluate(setup.initial.prompts, noise, setup.backbone)
    sigma = np.sqrt(1 / 8 * 7 / 8 / n)
    assert abs(acc - 1 / 8) <= 3 * sigma


# --------------------------------------------------------------- client update


def test_zero_learning_rate_returns_global(small_config):
    for opt in ("sgd", "adam"):
        cfg = small_config.replace(alpha=0.0, optimizer=opt, variant="atpfl")
        setup = setup_run(cfg, seed=1)
        glob = GlobalPrompts(setup.initial.prompts.with_params(
            np.random.default_rng(0).normal(size=(cfg.L, cfg.d_tok)), setup.initial.prompts.visual.delta + 0.3), 1)
        tau, ups, _ = client_update(setup.clients[0], glob, cfg, setup.backbone, 1, 1)
        assert tau.tobytes() == glob.tau_g.tobytes() and ups.tobytes() == glob.upsilon_g.tobytes()


def test_single_sgd_step_is_gradient_descent(small_config):
    cfg = small_config.replace(optimizer="sgd", scheduler="none", T_loc=1, alpha=0.05, variant="atpfl", mu=0.5)
    setup = setup_run(cfg, seed=2)
    client = setup.clients[1]
    rng = np.random.default_rng(9)
    glob = GlobalPrompts(setup.initial.prompts.with_params(
        rng.normal(0, 0.3, size=(cfg.L, cfg.d_tok)), rng.normal(0, 0.3, size=cfg.image_shape)), 1)
    # a distinct previous prompt so the contrastive term is active
    client.prompts = glob.prompts.with_params(rng.normal(0, 0.3, size=(cfg.L, cfg.d_tok)), glob.upsilon_g * 0.5)
    prev = client.prompts.copy()
    batch = (client.data.images, client.data.labels)

    def f(params):
        p = glob.prompts.with_params(*params)
        return total_loss(batch, p, prev, glob.prompts, cfg.mu, cfg.gamma, setup.backbone).total

    g_ctx, g_delta = dg.fd_gradient(f, [glob.tau_g, glob.upsilon_g], 1e-4)
    tau, ups, _ = client_update(client, glob, cfg, setup.backbone, 1, 2)
    assert rel_err(glob.tau_g - tau, cfg.alpha * g_ctx) <= 1e-5
    assert rel_err(glob.upsilon_g - ups, cfg.alpha * glob.prompts.visual.project(g_delta)) <= 1e-5
    assert client.previous.text.context.tobytes() == prev.text.context.tobytes()


def test_nan_aborts_with_diagnostic(small_config):
    setup = setup_run(small_config, seed=0)
    setup.clients[2].data.images[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError, match="client 2, round 1, batch 0"):
        server_run(small_config, setup=setup)


# ---------------------------------------------------------------------- server


def test_zero_rounds(small_config):
    cfg = small_config.replace(T_g=0)
    res = server_run(cfg, seed=0)
    setup = setup_run(cfg, seed=0)
    assert res.records == []
    assert res.final.tau_g.tobytes() == setup.initial.tau_g.tobytes()


def test_invalid_config_rejected(small_config):
    with pytest.raises(ConfigError):
        server_run(small_config.replace(K=5), seed=0)


def test_fixed_seed_identical_records(small_config):
    def strip(rs):
        return [(r.seed, r.round, r.accuracy, r.macro_f1, r.l_con, r.l_aug_text, r.l_aug_visual) for r in rs]
    cfg = small_config.replace(template="random_patch", template_size=3, K=2)
    assert strip(server_run(cfg, seed=4).records) == strip(server_run(cfg, seed=4).records)


def test_dispatch_order_and_threads_do_not_matter(small_config):
    cfg = small_config.replace(template="random_patch", template_size=2)
    a = server_run(cfg, seed=5).final
    b = server_run(cfg, seed=5, order=[3, 1, 0, 2]).final
    c = server_run(cfg.replace(workers=3), seed=5).final
    for other in (b, c):
        assert np.max(np.abs(a.tau_g - other.tau_g)) <= 1e-12
        assert np.max(np.abs(a.upsilon_g - other.upsilon_g)) <= 1e-12


@pytest.mark.parametrize("template,size", [("padding", 1), ("fixed_patch", 3), ("random_patch", 2)])
def test_visual_prompt_stays_in_mask(small_config, template, size):
    res = server_run(small_config.replace(template=template, template_size=size), seed=0)
    prompts = [res.final.prompts] + [c.prompts for c in res.clients]
    for p in prompts:
        assert np.all(p.visual.delta[p.visual.full_mask == 0] == 0.0)
        assert np.any(p.visual.delta != 0.0)


def test_promptfl_never_touches_visual_prompt(small_config):
    res = server_run(small_config.replace(variant="promptfl_text_only"), seed=0)
    assert np.all(res.final.upsilon_g == 0.0)


def test_learning_rate_schedule(small_config):
    cfg = small_config.replace(T_g=4, alpha=1.0, scheduler="cosine")
    assert [learning_rate(cfg, t) for t in (1, 3)] == pytest.approx([1.0, 0.5])
    assert learning_rate(cfg.replace(scheduler="none"), 3) == 1.0


def test_optimizers_step():
    p, g = {"w": np.array([1.0, -1.0])}, {"w": np.array([0.5, -2.0])}
    np.testing.assert_allclose(SGD().step(p, g, 0.1)["w"], [0.95, -0.8])
    # first Adam step moves each coordinate by lr * sign(g) (up to eps)
    np.testing.assert_allclose(Adam().step(p, g, 0.1)["w"], [0.9, -0.9], atol=1e-7)
