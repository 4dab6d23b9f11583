"""Training procedures: the episodic framework and the full comparison group.

All trainers start from the Vanilla checkpoint (pre-trained on the generic
domain) and are deterministic given their seed. Parameter updates are plain
SGD; the episodic update sums the gradients of the aggregation loss and the
episodic loss before a single step per module.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import model as M
from . import tensor as T
from .corpus import SentencePair, MultiDomainDataset
from .curriculum import CurriculumPlan, sample_batch, stage_of, uniform_plan

log = logging.getLogger(__name__)


@dataclass
class Hyperparams:
    alpha: float = 3e-3          # aggregation / episodic / outer lr
    beta: float = 5e-3           # domain-specific / inner lr
    epochs: int = 3
    batch_size: int = 8
    seed: int = 0
    finetune_epochs: int = 5
    finetune_lr: float | None = None   # defaults to alpha
    episodes: int | None = None        # overrides epochs for episodic trainers

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")

    @property
    def ft_lr(self) -> float:
        return self.alpha if self.finetune_lr is None else self.finetune_lr


@dataclass
class EpisodeRecord:
    episode: int
    stage: int
    domain_i: int
    partner_k: int
    loss_agg: float
    loss_spec: float
    loss_enc: float
    loss_dec: float


@dataclass
class EpisodicState:
    agg: M.EncoderDecoderModel
    specialists: dict[int, M.EncoderDecoderModel]
    plan: CurriculumPlan
    hp: Hyperparams
    progress: int = 0
    episode_log: list[EpisodeRecord] = field(default_factory=list)


def _rng(seed: int, *keys: int):
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _batch_loss(model: M.EncoderDecoderModel, batch: list[SentencePair]) -> T.Tensor:
    return M.nll_batch(model, [p.source for p in batch], [p.target for p in batch])


def _sgd_model(model: M.EncoderDecoderModel, lr: float) -> None:
    T.sgd_step(model.encoder, lr)
    T.sgd_step(model.decoder, lr)


def _train_plain(model: M.EncoderDecoderModel, pairs: list[SentencePair],
                 epochs: int, lr: float, batch_size: int, rng) -> list[float]:
    """Shuffled minibatch nll training; returns the per-step loss curve."""
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[start:start + batch_size]]
            loss = _batch_loss(model, batch)
            T.backward(loss)
            _sgd_model(model, lr)
            curve.append(loss.item())
    return curve


def pretrain_vanilla(generic_pairs: list[SentencePair], cfg: M.ModelConfig,
                     hp: Hyperparams) -> tuple[M.EncoderDecoderModel, list[float]]:
    """Train the pre-training surrogate on the generic domain from scratch."""
    if not generic_pairs:
        raise ValueError("empty generic corpus")
    model = M.init_model(cfg, _rng(hp.seed, 1))
    curve = _train_plain(model, generic_pairs, hp.epochs, hp.alpha,
                         hp.batch_size, _rng(hp.seed, 2))
    return model, curve


def train_agg(vanilla: M.EncoderDecoderModel, pairs: list[SentencePair],
              hp: Hyperparams) -> tuple[M.EncoderDecoderModel, list[float]]:
    """Continue Vanilla on the union of all seen training corpora."""
    model = vanilla.copy()
    curve = _train_plain(model, pairs, hp.epochs, hp.alpha, hp.batch_size,
                         _rng(hp.seed, 3))
    return model, curve


def train_agg_curriculum(vanilla: M.EncoderDecoderModel, plan: CurriculumPlan,
                         hp: Hyperparams) -> tuple[M.EncoderDecoderModel, list[float]]:
    """AGG trained through the curriculum scheduler instead of shuffling."""
    model = vanilla.copy()
    rng = _rng(hp.seed, 4)
    total = _total_steps(plan, hp)
    curve = []
    for step in range(total):
        stage = stage_of(step / total, plan.policy)
        batch = sample_batch(plan, stage, hp.batch_size, rng)
        loss = _batch_loss(model, batch)
        T.backward(loss)
        _sgd_model(model, hp.alpha)
        curve.append(loss.item())
    return model, curve


def _total_steps(plan: CurriculumPlan, hp: Hyperparams) -> int:
    if hp.episodes is not None:
        return hp.episodes
    n = sum(len(s) for s in plan.shards)
    return max(1, hp.epochs * max(1, n // hp.batch_size))


# ---------------------------------------------------------------------------
# episodic framework


def init_state(vanilla: M.EncoderDecoderModel, seen_ids: list[int],
               plan: CurriculumPlan, hp: Hyperparams) -> EpisodicState:
    """Aggregation model and every specialist start from the Vanilla checkpoint."""
    return EpisodicState(
        agg=vanilla.copy(),
        specialists={d: vanilla.copy() for d in seen_ids},
        plan=plan, hp=hp)


def specialist_step(state: EpisodicState, i: int, batch: list[SentencePair]) -> float:
    """One SGD step of specialist i on its own-domain batch at lr beta."""
    if any(p.domain_id != i for p in batch):
        raise T.ContractError(f"specialist_step: batch contains foreign domain pairs "
                              f"(expected domain {i})")
    spec = state.specialists[i]
    loss = _batch_loss(spec, batch)
    T.backward(loss)
    _sgd_model(spec, state.hp.beta)
    return loss.item()


def _pick_partner(state: EpisodicState, i: int, rng) -> int:
    others = [d for d in state.specialists if d != i]
    if not others:
        raise ValueError("episodic training needs at least 2 seen domains")
    return int(others[rng.integers(0, len(others))])


def _episodic_encoder_backward(state: EpisodicState, i: int,
                               batch: list[SentencePair], k: int) -> float:
    """Accumulate grad of the episodic encoder loss into the agg encoder.

    The partner decoder runs frozen: gradient flows through it into theta
    but its own parameters receive none.
    """
    frozen_dec = state.specialists[k].decoder.frozen_view()
    hybrid = M.EncoderDecoderModel(state.agg.config, state.agg.encoder, frozen_dec)
    loss = _batch_loss(hybrid, batch)
    T.backward(loss)
    return loss.item()


def _episodic_decoder_backward(state: EpisodicState, i: int,
                               batch: list[SentencePair], k: int) -> float:
    frozen_enc = state.specialists[k].encoder.frozen_view()
    hybrid = M.EncoderDecoderModel(state.agg.config, frozen_enc, state.agg.decoder)
    loss = _batch_loss(hybrid, batch)
    T.backward(loss)
    return loss.item()


def episodic_encoder_step(state: EpisodicState, i: int, batch: list[SentencePair],
                          rng) -> float:
    """Standalone episodic encoder update: theta <- theta - alpha * grad(L_enc)."""
    k = _pick_partner(state, i, rng)
    loss = _episodic_encoder_backward(state, i, batch, k)
    T.sgd_step(state.agg.encoder, state.hp.alpha)
    return loss


def episodic_decoder_step(state: EpisodicState, i: int, batch: list[SentencePair],
                          rng) -> float:
    """Standalone episodic decoder update: phi <- phi - alpha * grad(L_dec)."""
    k = _pick_partner(state, i, rng)
    loss = _episodic_decoder_backward(state, i, batch, k)
    T.sgd_step(state.agg.decoder, state.hp.alpha)
    return loss


def epi_train(state: EpisodicState) -> tuple[M.EncoderDecoderModel, list[EpisodeRecord]]:
    """The full episodic training policy.

    Per episode: round-robin source domain i; every specialist takes one step
    on its own-domain batch; then the aggregation model takes one summed
    update per module, theta from grad(L_agg + L_enc) and phi from
    grad(L_agg + L_dec), with a single partner k != i for both episodic
    losses. Batches come from the plan's scheduler at the current stage.
    """
    hp = state.hp
    seen = sorted(state.specialists)
    rng = _rng(hp.seed, 5)
    total = _total_steps(state.plan, hp)
    for ep in range(total):
        stage = stage_of(ep / total, state.plan.policy)
        i = seen[ep % len(seen)]
        spec_loss = 0.0
        for j in seen:
            batch_j = sample_batch(state.plan, stage, hp.batch_size, rng, domain_id=j)
            lj = specialist_step(state, j, batch_j)
            if j == i:
                spec_loss = lj
        k = _pick_partner(state, i, rng)
        batch_i = sample_batch(state.plan, stage, hp.batch_size, rng, domain_id=i)
        loss_agg = _batch_loss(state.agg, batch_i)
        T.backward(loss_agg)
        l_enc = _episodic_encoder_backward(state, i, batch_i, k)
        l_dec = _episodic_decoder_backward(state, i, batch_i, k)
        T.sgd_step(state.agg.encoder, hp.alpha)
        T.sgd_step(state.agg.decoder, hp.alpha)
        state.episode_log.append(EpisodeRecord(ep, stage, i, k, loss_agg.item(),
                                               spec_loss, l_enc, l_dec))
        state.progress = ep + 1
    return state.agg, state.episode_log


def train_epi(vanilla: M.EncoderDecoderModel, plan: CurriculumPlan,
              seen_ids: list[int], hp: Hyperparams) -> EpisodicState:
    """Convenience wrapper: build the state and run the episodic loop.

    With a sharded plan this is the curriculum variant; pass a uniform plan
    for the plain episodic variant.
    """
    state = init_state(vanilla, seen_ids, plan, hp)
    epi_train(state)
    return state


def train_epi_nmt(vanilla, training_pairs: list[SentencePair], seen_ids, hp):
    return train_epi(vanilla, uniform_plan(training_pairs), seen_ids, hp)


# ---------------------------------------------------------------------------
# first-order MAML baseline


def maml_train(vanilla: M.EncoderDecoderModel,
               domain_pairs: dict[int, list[SentencePair]],
               hp: Hyperparams) -> M.EncoderDecoderModel:
    """First-order MAML: inner step at beta on a support batch, outer update
    applies the query gradient evaluated at the adapted parameters to the
    original parameters at alpha."""
    if not domain_pairs:
        raise ValueError("maml_train needs at least one domain")
    model = vanilla.copy()
    rng = _rng(hp.seed, 6)
    domains = sorted(domain_pairs)
    total = hp.episodes
    if total is None:
        n = sum(len(v) for v in domain_pairs.values())
        total = max(1, hp.epochs * max(1, n // hp.batch_size))
    for _ in range(total):
        d = domains[int(rng.integers(0, len(domains)))]
        pool = domain_pairs[d]
        support = [pool[int(rng.integers(0, len(pool)))] for _ in range(hp.batch_size)]
        query = [pool[int(rng.integers(0, len(pool)))] for _ in range(hp.batch_size)]
        adapted = model.copy()
        T.backward(_batch_loss(adapted, support))
        _sgd_model(adapted, hp.beta)
        T.backward(_batch_loss(adapted, query))
        for ps, aps in ((model.encoder, adapted.encoder), (model.decoder, adapted.decoder)):
            for name, p in ps.items():
                g = aps[name].grad
                if g is None:
                    raise T.ContractError(f"maml_train: no query gradient for '{name}'")
                p.data -= hp.alpha * g
    return model


# ---------------------------------------------------------------------------
# fine-tuning


def finetune(model: M.EncoderDecoderModel, pairs: list[SentencePair],
             hp: Hyperparams) -> M.EncoderDecoderModel:
    """Per-domain adaptation on a copy; the input model is left untouched."""
    if not pairs:
        raise ValueError("empty fine-tuning split")
    adapted = model.copy()
    _train_plain(adapted, pairs, hp.finetune_epochs, hp.ft_lr, hp.batch_size,
                 _rng(hp.seed, 8))
    return adapted


def write_episode_log(records: list[EpisodeRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "stage", "domain_i", "partner_k",
                    "L_agg", "L_i", "L_enc", "L_dec"])
        for r in records:
            w.writerow([r.episode, r.stage, r.domain_i, r.partner_k,
                        r.loss_agg, r.loss_spec, r.loss_enc, r.loss_dec])
