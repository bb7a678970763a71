"""Server round loop, local prompt updates and sample-weighted prompt averaging."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from tpfl import diffgraph as dg
from tpfl import seeding
from tpfl.config import ExperimentConfig
from tpfl.data import Dataset, PartitionPlan, generate_synthetic, partition_label_skew, required_per_class
from tpfl.encoders import (Backbone, PromptPair, TextPrompt, VisualPrompt, apply_visual_prompt,
                           build_backbone, encode_image, encode_text_all)
from tpfl.losses import NonFiniteError, frozen_targets, total_loss

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, client: int, round: int, batch: int, detail: str = "loss"):
        self.client, self.round, self.batch = client, round, batch
        super().__init__(f"non-finite {detail} at client {client}, round {round}, batch {batch}")


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self):
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        return {k: params[k] - lr * grads[k] for k in params}


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            out[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def make_optimizer(name: str):
    return Adam() if name == "adam" else SGD()


def learning_rate(config: ExperimentConfig, round: int) -> float:
    """Per-round step size; cosine decays from alpha at round 1 toward 0 over T_g rounds."""
    if config.scheduler == "cosine" and config.T_g > 0:
        return config.alpha * 0.5 * (1.0 + math.cos(math.pi * (round - 1) / config.T_g))
    return config.alpha


# -------------------------------------------------------------------- state


@dataclass
class ClientState:
    id: int
    data: Dataset
    prompts: PromptPair
    previous: PromptPair
    optimizer: object = field(default_factory=Adam)

    @property
    def n_k(self) -> int:
        return len(self.data)


@dataclass
class GlobalPrompts:
    prompts: PromptPair
    round: int = 0

    @property
    def tau_g(self) -> np.ndarray:
        return self.prompts.text.context

    @property
    def upsilon_g(self) -> np.ndarray:
        return self.prompts.visual.delta


@dataclass
class RoundRecord:
    seed: int
    round: int
    accuracy: float
    macro_f1: float
    l_con: float
    l_aug_text: float
    l_aug_visual: float
    wall_ms: float = 0.0


@dataclass
class StepStats:
    l_con: float
    l_aug_text: float
    l_aug_visual: float


class Contribution(NamedTuple):
    client_id: int
    n: int
    tau: np.ndarray
    upsilon: np.ndarray


# -------------------------------------------------------------- aggregation


def aggregate_prompts(contributions: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Sample-weighted mean of (tau, upsilon) over contributors, in ascending client-id order.

    Accepts :class:`Contribution` tuples or bare ``(n, tau, upsilon)`` triples
    (which are treated as ids 0, 1, ...).
    """
    if not contributions:
        raise ValueError("nothing to aggregate")
    items = [c if len(c) == 4 else Contribution(i, *c) for i, c in enumerate(contributions)]
    items = sorted(items, key=lambda c: c[0])
    tau0, ups0 = np.asarray(items[0][2]), np.asarray(items[0][3])
    for c in items:
        if c[1] <= 0:
            raise ValueError(f"client {c[0]} has non-positive sample count {c[1]}")
        if np.shape(c[2]) != tau0.shape or np.shape(c[3]) != ups0.shape:
            raise dg.ShapeError("aggregate_prompts", tau0.shape, np.shape(c[2]), ups0.shape, np.shape(c[3]))
    total = float(sum(c[1] for c in items))
    tau = ups = None
    for _, n, t, u in items:
        w = n / total
        wt, wu = w * np.asarray(t, dtype=np.float64), w * np.asarray(u, dtype=np.float64)
        tau = wt if tau is None else tau + wt
        ups = wu if ups is None else ups + wu
    return tau, ups


def sample_clients(M: int, K: int, round: int, seed: int) -> list[int]:
    """K distinct ids out of M, uniform, fixed by (seed, round), ascending."""
    if not 1 <= K <= M:
        raise ValueError(f"need 1 <= K <= M, got K={K}, M={M}")
    if K == M:
        return list(range(M))
    rng = seeding.rng(seed, "sampling", 0, round)
    return sorted(int(i) for i in rng.choice(M, size=K, replace=False))


# --------------------------------------------------------------- evaluation


def macro_f1(y_true, y_pred, C: int, empty: float = 1.0) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    scores = []
    for c in range(C):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(empty if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def score_embeddings(z_text: np.ndarray, z_vis: np.ndarray, labels, f1_empty: float = 1.0) -> tuple[float, float]:
    """Accuracy and macro-F1 of argmax_c <z_vis, z_text_c>."""
    labels = np.asarray(labels)
    pred = np.argmax(z_vis @ z_text.T, axis=1)
    return float(np.mean(pred == labels)), macro_f1(labels, pred, z_text.shape[0], f1_empty)


def evaluate(prompts: PromptPair, test: Dataset, backbone: Backbone, f1_empty: float = 1.0) -> tuple[float, float]:
    """Accuracy and macro-F1 of nearest-text-embedding prediction.

    A random-patch prompt is evaluated at its canonical (origin) placement.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    z_text = encode_text_all(prompts.text, backbone.text).value
    z_vis = encode_image(apply_visual_prompt(test.images, prompts.visual, offset=(0, 0)), backbone.visual).value
    return score_embeddings(z_text, z_vis, test.labels, f1_empty)


# ------------------------------------------------------------- local update


def _batches(client: ClientState, config: ExperimentConfig, round: int, epoch: int, seed: int):
    n = client.n_k
    bs = config.batch_size or n
    if bs >= n:
        return [np.arange(n)]
    order = seeding.rng(seed, "sampling", 1, round, client.id, epoch).permutation(n)
    return [order[i:i + bs] for i in range(0, n, bs)]


def client_update(client: ClientState, global_prompts: GlobalPrompts | None, config: ExperimentConfig,
                  backbone: Backbone, round: int, seed: int) -> tuple[np.ndarray, np.ndarray, list[StepStats]]:
    """Run T_loc local epochs on the client and return its new (tau, upsilon).

    With ``global_prompts`` given the client restarts from them (federated
    variants); with ``None`` it continues from its own prompts (local
    training). Either way the round-start prompts become ``client.previous``.
    """
    if global_prompts is not None:
        client.previous = client.prompts
        client.prompts = global_prompts.prompts.copy()
        anchor = global_prompts.prompts
    else:
        client.previous = client.prompts.copy()
        anchor = client.previous
    mu = config.effective_mu
    targets = frozen_targets(backbone, anchor, client.previous)
    patch_rng = seeding.rng(seed, "patch", round, client.id)
    lr = learning_rate(config, round)
    stats = []
    batch_no = 0
    for epoch in range(config.T_loc):
        for idx in _batches(client, config, round, epoch, seed):
            offset = client.prompts.visual.draw_offset(patch_rng)
            batch = (client.data.images[idx], client.data.labels[idx])
            try:
                lb = total_loss(batch, client.prompts, client.previous, anchor, mu, config.gamma, backbone,
                                offset=offset, train_visual=config.train_visual, text_aug=config.text_aug,
                                targets=targets)
            except (NonFiniteError, dg.DomainError) as exc:
                raise NonFiniteLossError(client.id, round, batch_no, f"value ({exc})") from exc
            if not math.isfinite(lb.total):
                raise NonFiniteLossError(client.id, round, batch_no)
            grads = dg.backward(lb.root)
            params = {"context": client.prompts.text.context}
            g = {"context": grads.get(lb.context, np.zeros_like(params["context"]))}
            if config.train_visual:
                params["delta"] = client.prompts.visual.delta
                g["delta"] = grads.get(lb.delta, np.zeros_like(params["delta"]))
            for k, v in g.items():
                if not np.all(np.isfinite(v)):
                    raise NonFiniteLossError(client.id, round, batch_no, f"gradient of {k}")
            with np.errstate(over="ignore", invalid="ignore"):
                new = client.optimizer.step(params, g, lr)
            if not all(np.all(np.isfinite(v)) for v in new.values()):
                raise NonFiniteLossError(client.id, round, batch_no, "prompt update")
            client.prompts = client.prompts.with_params(
                new["context"], new.get("delta", client.prompts.visual.delta))
            stats.append(StepStats(lb.l_con, lb.l_aug_text, lb.l_aug_visual))
            batch_no += 1
    return client.prompts.text.context, client.prompts.visual.delta, stats


# ------------------------------------------------------------------- server


@dataclass
class RunSetup:
    config: ExperimentConfig
    seed: int
    backbone: Backbone
    train: Dataset
    test: Dataset
    plan: PartitionPlan
    clients: list[ClientState]
    initial: GlobalPrompts


def initial_prompts(config: ExperimentConfig, backbone: Backbone, seed: int) -> PromptPair:
    rng = seeding.rng(seed, "init")
    context = rng.normal(0.0, config.init_std, size=(config.L, config.d_tok))
    text = TextPrompt(context, backbone.class_embeddings, config.context_position)
    visual = VisualPrompt(np.zeros(config.image_shape), config.template, config.template_size)
    return PromptPair(text, visual)


def setup_run(config: ExperimentConfig, seed: int, backbone: Backbone | None = None) -> RunSetup:
    config.validate()
    if backbone is None:
        backbone = build_backbone(config.backbone_seed, config.C, config.d_tok, config.L, config.image_shape,
                                  config.D, config.hidden, config.encoder_gain)
    per_class = config.train_per_class or required_per_class(config.C, config.M, config.s, config.n_k)
    train = generate_synthetic(seed, config.C, per_class, config.H, config.W, config.Ch, config.noise_sigma, "train")
    test = generate_synthetic(seed, config.C, config.test_per_class, config.H, config.W, config.Ch,
                              config.noise_sigma, "test")
    plan = partition_label_skew(train, config.M, config.s, config.n_k, seed)
    init = initial_prompts(config, backbone, seed)
    clients = []
    for k, idx in enumerate(plan.assignments):
        if not idx:
            raise ValueError(f"client {k} has no data")
        clients.append(ClientState(k, train.subset(idx), init.copy(), init.copy(), make_optimizer(config.optimizer)))
    return RunSetup(config, seed, backbone, train, test, plan, clients, GlobalPrompts(init.copy(), 0))


@dataclass
class RunResult:
    final: GlobalPrompts
    records: list[RoundRecord]
    clients: list[ClientState]


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else 0.0


def server_run(config: ExperimentConfig, seed: int | None = None, setup: RunSetup | None = None,
               order: Sequence[int] | None = None) -> RunResult:
    """Run T_g rounds. ``order`` permutes the dispatch order of sampled clients (testing hook)."""
    if setup is None:
        setup = setup_run(config, config.seeds[0] if seed is None else seed)
    config, seed = setup.config, setup.seed
    if config.K > config.M:
        raise ValueError(f"K={config.K} exceeds M={config.M}")
    clients, backbone = setup.clients, setup.backbone
    glob = GlobalPrompts(setup.initial.prompts.copy(), 0)
    local = config.variant == "local_only"
    records = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for t in range(1, config.T_g + 1):
            start = time.perf_counter()
            chosen = list(range(config.M)) if local else sample_clients(config.M, config.K, t, seed)
            dispatch = [chosen[i] for i in order] if order is not None else chosen

            def work(cid):
                return cid, client_update(clients[cid], None if local else glob, config, backbone, t, seed)

            results = list(pool.map(work, dispatch)) if pool else [work(cid) for cid in dispatch]
            results.sort(key=lambda r: r[0])
            stats = [s for _, (_, _, st) in results for s in st]
            if local:
                scores = [evaluate(c.prompts, setup.test, backbone, config.f1_empty) for c in clients]
                acc, f1 = _mean([s[0] for s in scores]), _mean([s[1] for s in scores])
            else:
                tau, ups = aggregate_prompts(
                    [Contribution(cid, clients[cid].n_k, tau_i, ups_i) for cid, (tau_i, ups_i, _) in results])
                glob = GlobalPrompts(glob.prompts.with_params(tau, ups), t)
                acc, f1 = evaluate(glob.prompts, setup.test, backbone, config.f1_empty)
            rec = RoundRecord(seed, t, acc, f1, _mean([s.l_con for s in stats]),
                              _mean([s.l_aug_text for s in stats]), _mean([s.l_aug_visual for s in stats]),
                              (time.perf_counter() - start) * 1e3)
            log.debug("seed %d round %d acc %.4f f1 %.4f", seed, t, acc, f1)
            records.append(rec)
    finally:
        if pool:
            pool.shutdown()
    return RunResult(glob, records, clients)
