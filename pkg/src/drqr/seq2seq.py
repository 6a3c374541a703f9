"""GRU encoder-decoder with attention and a copy mechanism.

The encoder is a bidirectional GRU over the source query. At each step the
unidirectional decoder GRU consumes the previous token, attends over the
encoder states with a bilinear score ``s_t^T W h_i``, and mixes a vocabulary
softmax with the attention distribution scattered onto source tokens::

    p(y) = q_t * p_copy(y) + (1 - q_t) * p_gen(y)

Source tokens outside the vocabulary get temporary ids ``V, V+1, ...`` so the
copy path can emit them.
"""

import logging
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence

from drqr.text import tokenize

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = range(4)

CHECKPOINT_VERSION = 1
DTYPE = torch.float64


class TrainingDivergedError(RuntimeError):
    pass


class Vocabulary:
    """Token <-> id map; ids 0-3 are PAD, UNK, BOS, EOS."""

    def __init__(self, tokens, min_frequency=1):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique")
        self.min_frequency = min_frequency

    @classmethod
    def build(cls, pairs, min_frequency=1):
        """Tokens from both sides of the pairs, ordered by frequency then text."""
        pairs = list(pairs)
        if not pairs:
            raise ValueError("cannot build a vocabulary from no pairs")
        counts = Counter()
        for p in pairs:
            counts.update(tokenize(p.source_text))
            counts.update(tokenize(p.target_text))
        kept = sorted((t for t, c in counts.items() if c >= min_frequency), key=lambda t: (-counts[t], t))
        return cls(kept, min_frequency)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.id(t) for t in tokens]


# -- batching ----------------------------------------------------------------------


@dataclass
class Batch:
    src: torch.Tensor  # (B, N) in-vocab ids, OOV -> UNK
    src_ext: torch.Tensor  # (B, N) extended ids
    src_mask: torch.Tensor  # (B, N) bool
    src_lengths: torch.Tensor
    oovs: list  # per-example list of source OOV surface tokens
    src_tokens: list
    tgt: torch.Tensor | None = None  # (B, M) extended target ids ending in EOS
    tgt_tokens: list | None = None

    @property
    def n_ext(self):
        return max((len(o) for o in self.oovs), default=0)

    def __len__(self):
        return self.src.shape[0]


def make_batch(vocab, sources, targets=None):
    """Build a padded batch from token lists.

    Target tokens that are OOV but present in the source map to the source's
    temporary id; other OOV target tokens map to UNK.
    """
    if any(len(s) == 0 for s in sources):
        raise ValueError("empty source sequence")
    B = len(sources)
    N = max(len(s) for s in sources)
    src = torch.full((B, N), PAD_ID, dtype=torch.long)
    src_ext = torch.full((B, N), PAD_ID, dtype=torch.long)
    oovs = []
    for b, toks in enumerate(sources):
        local = []
        for i, tok in enumerate(toks):
            tid = vocab.id(tok)
            src[b, i] = tid
            if tid == UNK_ID and tok not in RESERVED:
                if tok not in local:
                    local.append(tok)
                src_ext[b, i] = len(vocab) + local.index(tok)
            else:
                src_ext[b, i] = tid
        oovs.append(local)
    lengths = torch.tensor([len(s) for s in sources], dtype=torch.long)
    mask = torch.arange(N).unsqueeze(0) < lengths.unsqueeze(1)
    batch = Batch(src, src_ext, mask, lengths, oovs, [list(s) for s in sources])
    if targets is not None:
        if any(len(t) == 0 for t in targets):
            raise ValueError("empty target sequence")
        M = max(len(t) for t in targets) + 1
        tgt = torch.full((B, M), PAD_ID, dtype=torch.long)
        for b, toks in enumerate(targets):
            ids = [extended_id(vocab, tok, oovs[b]) for tok in toks] + [EOS_ID]
            tgt[b, : len(ids)] = torch.tensor(ids)
        batch.tgt = tgt
        batch.tgt_tokens = [list(t) for t in targets]
    return batch


def extended_id(vocab, token, oovs):
    tid = vocab.id(token)
    if tid == UNK_ID and token in oovs:
        return len(vocab) + oovs.index(token)
    return tid


def ids_to_tokens(vocab, ids, oovs, source_tokens=None, attention=None):
    """Map extended ids back to surface tokens, stopping at EOS.

    An emitted UNK is replaced by the source token under the attention argmax
    for that step, when attention is supplied.
    """
    out = []
    V = len(vocab)
    for step, i in enumerate(ids):
        if i == EOS_ID:
            break
        if i == PAD_ID:
            out.append(PAD)
        elif i >= V:
            out.append(oovs[i - V])
        elif i == UNK_ID and attention is not None and source_tokens:
            out.append(source_tokens[int(attention[step].argmax())])
        else:
            out.append(vocab.itos[i])
    return out


# -- model -------------------------------------------------------------------------


@dataclass
class ModelConfig:
    vocab_size: int
    emb_dim: int = 32
    hidden_size: int = 32
    dropout: float = 0.1
    init_range: float = 0.1


@dataclass
class StepOutput:
    p: torch.Tensor  # (B, V + n_ext) mixture
    p_gen: torch.Tensor  # (B, V)
    alpha: torch.Tensor  # (B, N) attention, also the copy distribution over positions
    gate: torch.Tensor  # (B,) copy probability q_t
    state: torch.Tensor  # (B, H)


@dataclass
class Encoded:
    states: torch.Tensor  # (B, N, 2H)
    projected: torch.Tensor  # (B, N, H)
    init_state: torch.Tensor  # (B, H)


class CopySeq2Seq(nn.Module):
    def __init__(self, config: ModelConfig, seed=None):
        super().__init__()
        self.config = config
        V, E, H = config.vocab_size, config.emb_dim, config.hidden_size
        self.embedding = nn.Embedding(V, E)
        self.encoder = nn.GRU(E, H, batch_first=True, bidirectional=True)
        self.bridge = nn.Linear(2 * H, H)
        self.attention = nn.Linear(2 * H, H, bias=False)
        self.decoder = nn.GRUCell(E, H)
        self.output = nn.Linear(3 * H, V)
        self.copy_gate = nn.Linear(3 * H, 1)
        self.to(DTYPE)
        self.reset_parameters(None if seed is None else torch.Generator().manual_seed(seed))
        self._dropout_gen = None

    def reset_parameters(self, generator=None):
        r = self.config.init_range
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.rand(p.shape, generator=generator, dtype=DTYPE) * 2 * r - r)

    def set_dropout_generator(self, generator):
        self._dropout_gen = generator

    def _dropout(self, x):
        rate = self.config.dropout
        if not self.training or rate <= 0:
            return x
        keep = torch.rand(x.shape, generator=self._dropout_gen, dtype=x.dtype) >= rate
        return x * keep / (1.0 - rate)

    def encode(self, batch):
        emb = self._dropout(self.embedding(batch.src))
        packed = pack_padded_sequence(emb, batch.src_lengths, batch_first=True, enforce_sorted=False)
        out, h_n = self.encoder(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=batch.src.shape[1])
        out = self._dropout(out)
        init = torch.tanh(self.bridge(torch.cat([h_n[0], h_n[1]], dim=-1)))
        return Encoded(out, self.attention(out), init)

    def attend(self, state, enc, src_mask):
        scores = torch.bmm(enc.projected, state.unsqueeze(2)).squeeze(2)
        scores = scores.masked_fill(~src_mask, float("-inf"))
        alpha = torch.softmax(scores, dim=1)
        context = torch.bmm(alpha.unsqueeze(1), enc.states).squeeze(1)
        return alpha, context

    def step(self, prev_ids, prev_state, enc, batch, force_gate=None):
        """One decoder step. ``prev_ids`` may hold extended ids (mapped to UNK for input)."""
        V = self.config.vocab_size
        inp = prev_ids.masked_fill(prev_ids >= V, UNK_ID)
        emb = self._dropout(self.embedding(inp))
        state = self.decoder(emb, prev_state)
        s = self._dropout(state)
        alpha, context = self.attend(s, enc, batch.src_mask)
        feats = torch.cat([s, context], dim=-1)
        p_gen = torch.softmax(self.output(feats), dim=-1)
        gate = torch.sigmoid(self.copy_gate(feats)).squeeze(-1)
        if force_gate is not None:
            gate = torch.full_like(gate, float(force_gate))
        gen_part = (1 - gate).unsqueeze(1) * p_gen
        p = torch.cat([gen_part, gen_part.new_zeros(gen_part.shape[0], batch.n_ext)], dim=1)
        p = p.scatter_add(1, batch.src_ext, gate.unsqueeze(1) * alpha)
        return StepOutput(p, p_gen, alpha, gate, state)

    # -- scoring ------------------------------------------------------------------

    def target_log_probs(self, batch, targets=None):
        """Teacher-forced log p(y_t | y_<t) for each target position, shape (B, M).

        Positions after EOS (PAD) are zero.
        """
        tgt = batch.tgt if targets is None else targets
        enc = self.encode(batch)
        state = enc.init_state
        prev = torch.full((len(batch),), BOS_ID, dtype=torch.long)
        out = []
        for t in range(tgt.shape[1]):
            step = self.step(prev, state, enc, batch)
            lp = torch.log(step.p.gather(1, tgt[:, t : t + 1]).squeeze(1).clamp_min(1e-300))
            out.append(lp)
            state = step.state
            prev = tgt[:, t]
        lp = torch.stack(out, dim=1)
        return lp * (tgt != PAD_ID)

    def nll(self, batch):
        """Per-token average negative log-likelihood over non-PAD target positions."""
        lp = self.target_log_probs(batch)
        return -lp.sum() / (batch.tgt != PAD_ID).sum()

    # -- decoding -----------------------------------------------------------------

    @torch.no_grad()
    def decode(self, batch, max_len=20, generator=None, greedy=True):
        """Greedy (argmax, ties -> lowest id) or multinomial decoding.

        Returns ``(ids, log_probs, attention)`` per example; ids include the EOS
        if one was produced.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        was_training = self.training
        self.eval()
        try:
            enc = self.encode(batch)
            state = enc.init_state
            B = len(batch)
            prev = torch.full((B,), BOS_ID, dtype=torch.long)
            done = torch.zeros(B, dtype=torch.bool)
            ids, lps, attn = [[] for _ in range(B)], [[] for _ in range(B)], [[] for _ in range(B)]
            for _ in range(max_len):
                step = self.step(prev, state, enc, batch)
                if greedy:
                    nxt = step.p.argmax(dim=1)
                else:
                    nxt = sample_categorical(step.p, generator)
                chosen = torch.log(step.p.gather(1, nxt.unsqueeze(1)).squeeze(1))
                for b in range(B):
                    if not done[b]:
                        ids[b].append(int(nxt[b]))
                        lps[b].append(float(chosen[b]))
                        attn[b].append(step.alpha[b, : int(batch.src_lengths[b])].clone())
                done |= nxt == EOS_ID
                if bool(done.all()):
                    break
                state = step.state
                prev = nxt
            return ids, lps, attn
        finally:
            self.train(was_training)


def sample_categorical(p, generator=None):
    """One draw per row of a (B, K) probability matrix."""
    return torch.multinomial(p, 1, generator=generator).squeeze(1)


# -- single-example helpers --------------------------------------------------------


@dataclass
class Decoded:
    ids: list
    tokens: list
    log_probs: list


class Reformulator:
    """A trained model bundled with its vocabulary."""

    def __init__(self, model, vocab):
        self.model = model
        self.vocab = vocab

    def _decode(self, sources, max_len, generator, greedy):
        batch = make_batch(self.vocab, sources)
        ids, lps, attn = self.model.decode(batch, max_len, generator, greedy)
        return [
            Decoded(i, ids_to_tokens(self.vocab, i, batch.oovs[b], batch.src_tokens[b], a), lp)
            for b, (i, lp, a) in enumerate(zip(ids, lps, attn))
        ]

    def greedy_decode(self, source, max_len=20):
        return self._decode([source], max_len, None, True)[0]

    def sample_decode(self, source, max_len=20, generator=None):
        return self._decode([source], max_len, generator, False)[0]

    def greedy_batch(self, sources, max_len=20):
        return self._decode(sources, max_len, None, True)

    def sample_batch(self, sources, max_len=20, generator=None):
        return self._decode(sources, max_len, generator, False)

    def reformulate(self, text, max_len=20):
        return self.greedy_decode(tokenize(text), max_len).tokens


def encode_source(model, vocab, tokens):
    """Encoder states (N, 2H) for a single source sequence."""
    if not tokens:
        raise ValueError("empty source sequence")
    batch = make_batch(vocab, [tokens])
    return model.encode(batch).states[0]


def sequence_nll(model, vocab, source, target):
    """Loss and per-parameter gradients for one (source, target) token pair.

    The target gets EOS appended.
    """
    if not target:
        raise ValueError("empty target sequence")
    model.zero_grad()
    loss = model.nll(make_batch(vocab, [source], [target]))
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    return loss.item(), grads


# -- ML training -----------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 12
    max_epochs: int = 50
    patience: int | None = 3
    clip_norm: float = 1.0
    seed: int = 0


@dataclass
class History:
    rows: list = field(default_factory=list)  # [(epoch, train_loss, valid_loss)]
    best_epoch: int = 0
    stopped_early: bool = False

    def to_tsv(self):
        return "".join(f"{e}\t{tr:.6f}\t{va:.6f}\n" for e, tr, va in self.rows)


def pair_tokens(pairs):
    return [(tokenize(p.source_text), tokenize(p.target_text)) for p in pairs]


def batches(items, size, rng=None):
    order = list(range(len(items)))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, len(order), size):
        yield [items[j] for j in order[i : i + size]]


def evaluate_nll(model, vocab, examples, batch_size=64):
    """Token-averaged NLL in eval mode."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for chunk in batches(examples, batch_size):
            batch = make_batch(vocab, [s for s, _ in chunk], [t for _, t in chunk])
            lp = model.target_log_probs(batch)
            total += -float(lp.sum())
            count += int((batch.tgt != PAD_ID).sum())
    model.train(was)
    return total / max(count, 1)


def _check_finite(value, what):
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} became {value}; lower the learning rate or check the data")


def train_ml(model, vocab, train_pairs, valid_pairs, config=None, on_epoch=None):
    """Teacher-forced maximum-likelihood training with Adam and early stopping.

    ``train_pairs``/``valid_pairs`` are QueryPairs or (source, target) token
    lists. The parameters from the best validation epoch are restored.
    """
    config = config or TrainConfig()
    train = train_pairs if train_pairs and isinstance(train_pairs[0], tuple) else pair_tokens(train_pairs)
    valid = valid_pairs if valid_pairs and isinstance(valid_pairs[0], tuple) else pair_tokens(valid_pairs)
    if not train or not valid:
        raise ValueError("train_ml needs non-empty training and validation splits")
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model.set_dropout_generator(gen)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = History()
    best = (math.inf, {k: v.clone() for k, v in model.state_dict().items()})
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        total, count = 0.0, 0
        for chunk in batches(train, config.batch_size, rng):
            batch = make_batch(vocab, [s for s, _ in chunk], [t for _, t in chunk])
            opt.zero_grad()
            loss = model.nll(batch)
            _check_finite(loss.item(), "training loss")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            opt.step()
            n = int((batch.tgt != PAD_ID).sum())
            total += loss.item() * n
            count += n
        valid_loss = evaluate_nll(model, vocab, valid)
        _check_finite(valid_loss, "validation loss")
        history.rows.append((epoch, total / count, valid_loss))
        log.info("epoch %d train %.4f valid %.4f", epoch, total / count, valid_loss)
        if on_epoch is not None:
            on_epoch(epoch, total / count, valid_loss)
        if valid_loss < best[0]:
            best = (valid_loss, {k: v.clone() for k, v in model.state_dict().items()})
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                history.stopped_early = True
                break
    model.load_state_dict(best[1])
    model.eval()
    return history


# -- checkpoints ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, vocab, extra=None):
    torch.save(
        {
            "format": "drqr-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "vocab": vocab.itos,
            "state": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path):
    """Returns ``(model, vocab, extra)``; validates format, version and tensor shapes."""
    try:
        blob = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != "drqr-checkpoint":
        raise CheckpointError(f"{path} is not a drqr checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {blob.get('version')} != {CHECKPOINT_VERSION}")
    vocab = Vocabulary(blob["vocab"][len(RESERVED) :])
    if vocab.itos != blob["vocab"]:
        raise CheckpointError("checkpoint vocabulary has misplaced reserved tokens")
    config = ModelConfig(**blob["config"])
    if config.vocab_size != len(vocab):
        raise CheckpointError("vocabulary size does not match model config")
    model = CopySeq2Seq(config)
    expected = model.state_dict()
    state = blob["state"]
    if set(state) != set(expected):
        raise CheckpointError("checkpoint parameter names do not match the model")
    for name, tensor in state.items():
        if tensor.shape != expected[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {tuple(tensor.shape)} vs {tuple(expected[name].shape)}")
    model.load_state_dict(state)
    model.eval()
    return model, vocab, blob["extra"]
