"""Rewards and self-critical policy-gradient training for the reformulator."""

import logging
import math
import random
from dataclasses import dataclass, field

import torch

from drqr import qpp
from drqr.seq2seq import PAD, PAD_ID, TrainingDivergedError, make_batch, pair_tokens
from drqr.text import PipelineConfig, process, process_tokens

log = logging.getLogger(__name__)


def dedup_penalize(tokens):
    """Keep the first occurrence of each token; replace repeats with PAD."""
    seen = set()
    out = []
    for tok in tokens:
        if tok in seen:
            out.append(PAD)
        else:
            seen.add(tok)
            out.append(tok)
    return out


def f1_reward(predicted, truth):
    """Set-level F1 of a prediction against the ground-truth tokens.

    Repeats in the prediction become PAD first and count as wrong
    predictions: they stay in the precision denominator.
    """
    truth_set = {t for t in truth if t != PAD}
    if not truth_set:
        raise ValueError("ground truth must contain at least one token")
    pred = dedup_penalize(predicted)
    if not pred:
        return 0.0
    match = len(truth_set.intersection(t for t in pred if t != PAD))
    precision = match / len(pred)
    recall = match / len(truth_set)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class RewardConfig:
    lam: float = 0.5
    predictor: qpp.PredictorKind = qpp.PredictorKind.AVG_SCQ
    calibration: qpp.Calibration | None = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        self.predictor = qpp.PredictorKind(self.predictor)
        if self.lam < 1.0:
            if self.calibration is None or self.predictor not in self.calibration.bounds:
                raise ValueError(f"a QPP reward needs a calibration for {self.predictor}")


def qpp_reward(predicted, stats, config):
    """Normalised predictor value of the de-duplicated, stemmed prediction."""
    kept = [t for t in dedup_penalize(predicted) if t != PAD]
    terms = process_tokens(kept, config.pipeline)
    if not terms:
        return 0.0
    score = qpp.predict(stats, terms, config.predictor)
    return qpp.normalize_score(score, config.calibration)


def combined_reward(predicted, truth, stats, config):
    """``lam * F1 + (1 - lam) * QPP``."""
    r_f1 = f1_reward(predicted, truth)
    r_qpp = qpp_reward(predicted, stats, config) if config.lam < 1.0 else 0.0
    return config.lam * r_f1 + (1.0 - config.lam) * r_qpp


def calibrate(stats, query_texts, pipeline=None, kinds=tuple(qpp.PredictorKind)):
    """Predictor ranges over processed training queries, frozen for a run."""
    pipeline = pipeline or PipelineConfig()
    queries = [process(t, pipeline) for t in query_texts]
    return qpp.Calibration.from_queries(stats, [q for q in queries if q], kinds)


# -- self-critic update --------------------------------------------------------------


@dataclass
class RewardRecord:
    sample: list
    baseline: list
    r_sample: float
    r_baseline: float
    log_probs: list

    @property
    def advantage(self):
        return self.r_sample - self.r_baseline


def self_critic_loss(reformulator, sources, truths, reward_fn, max_len=20, generator=None):
    """Surrogate loss ``-mean_b (r(sample) - r(greedy)) * sum_t log p(sample_t)``.

    Returns ``(loss, records)``. Sampling and the greedy
    baseline run without dropout and without gradient; the sampled sequences
    are then re-scored with gradient. ``reward_fn(tokens, truth)`` is called
    once per finished sequence.
    """
    model, vocab = reformulator.model, reformulator.vocab
    samples = reformulator.sample_batch(sources, max_len, generator)
    greedy = reformulator.greedy_batch(sources, max_len)
    records = []
    for s, g, truth in zip(samples, greedy, truths):
        records.append(RewardRecord(s.tokens, g.tokens, reward_fn(s.tokens, truth), reward_fn(g.tokens, truth), s.log_probs))
    batch = make_batch(vocab, sources)
    M = max(len(s.ids) for s in samples)
    targets = torch.full((len(samples), M), PAD_ID, dtype=torch.long)
    for b, s in enumerate(samples):
        targets[b, : len(s.ids)] = torch.tensor(s.ids)
    was = model.training
    model.eval()
    lp = model.target_log_probs(batch, targets).sum(dim=1)
    model.train(was)
    adv = torch.tensor([r.advantage for r in records], dtype=lp.dtype)
    loss = -(adv * lp).mean()
    return loss, records


def self_critic_update(reformulator, sources, truths, reward_fn, max_len=20, generator=None):
    """Gradients of the self-critic surrogate for one batch.

    Returns ``(grads, records)`` with grads keyed by parameter name.
    """
    model = reformulator.model
    model.zero_grad()
    loss, records = self_critic_loss(reformulator, sources, truths, reward_fn, max_len, generator)
    if not math.isfinite(loss.item()):
        raise TrainingDivergedError(f"self-critic loss became {loss.item()}")
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    return grads, records


# -- RL training loop ----------------------------------------------------------------


@dataclass
class TrainingSchedule:
    n_rl_epochs: int = 20
    learning_rate: float = 5e-5
    batch_size: int = 32
    patience: int | None = 3
    max_len: int = 20
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rl_epochs < 0:
            raise ValueError("n_rl_epochs must be >= 0")


@dataclass
class RewardHistory:
    rows: list = field(default_factory=list)  # (epoch, mean_sample, mean_baseline, mean_advantage, valid_reward)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_tsv(self):
        return "".join(f"{e}\t{s:.6f}\t{b:.6f}\t{a:.6f}\n" for e, s, b, a, _ in self.rows)

    def valid_rewards(self):
        return [v for *_, v in self.rows]


def mean_greedy_reward(reformulator, examples, reward_fn, max_len=20, batch_size=64):
    total = 0.0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        decoded = reformulator.greedy_batch([s for s, _ in chunk], max_len)
        total += sum(reward_fn(d.tokens, t) for d, (_, t) in zip(decoded, chunk))
    return total / len(examples)


def make_reward_fn(stats, config):
    def reward(tokens, truth):
        return combined_reward(tokens, truth, stats, config)

    return reward


def train_drqr(reformulator, schedule, train_pairs, valid_pairs, stats, config, reward_fn=None):
    """Self-critical REINFORCE fine-tuning of an ML-pretrained reformulator.

    Epoch 0 in the history is the pretrained model's validation reward. The
    parameters of the best validation epoch are restored at the end.
    """
    model = reformulator.model
    train = train_pairs if train_pairs and isinstance(train_pairs[0], tuple) else pair_tokens(train_pairs)
    valid = valid_pairs if valid_pairs and isinstance(valid_pairs[0], tuple) else pair_tokens(valid_pairs)
    reward_fn = reward_fn or make_reward_fn(stats, config)
    history = RewardHistory()
    best_reward = mean_greedy_reward(reformulator, valid, reward_fn, schedule.max_len)
    history.rows.append((0, math.nan, math.nan, math.nan, best_reward))
    if schedule.n_rl_epochs == 0:
        return history
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    rng = random.Random(schedule.seed)
    gen = torch.Generator().manual_seed(schedule.seed)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.learning_rate)
    stale = 0
    for epoch in range(1, schedule.n_rl_epochs + 1):
        order = list(range(len(train)))
        rng.shuffle(order)
        records = []
        for i in range(0, len(order), schedule.batch_size):
            chunk = [train[j] for j in order[i : i + schedule.batch_size]]
            opt.zero_grad()
            loss, recs = self_critic_loss(
                reformulator, [s for s, _ in chunk], [t for _, t in chunk], reward_fn, schedule.max_len, gen
            )
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"self-critic loss became {loss.item()} at epoch {epoch}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.clip_norm)
            opt.step()
            records.extend(recs)
        n = len(records)
        valid_reward = mean_greedy_reward(reformulator, valid, reward_fn, schedule.max_len)
        history.rows.append(
            (
                epoch,
                sum(r.r_sample for r in records) / n,
                sum(r.r_baseline for r in records) / n,
                sum(r.advantage for r in records) / n,
                valid_reward,
            )
        )
        log.info("rl epoch %d valid reward %.4f", epoch, valid_reward)
        if valid_reward > best_reward:
            best_reward = valid_reward
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if schedule.patience is not None and stale >= schedule.patience:
                history.stopped_early = True
                break
    model.load_state_dict(best_state)
    model.eval()
    return history
