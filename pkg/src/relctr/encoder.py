"""Lightweight transformer text encoder, relevance SFT and embedding distillation.

Texts are token lists. A single text is fed as ``[CLS] t1 .. tn [SEP]``, a
query/item pair as ``[CLS] q.. [SEP] i.. [SEP]``; the sentence embedding is
the final hidden state at the [CLS] position.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint
from .autograd import Tensor
from .layers import Embedding, LayerNorm, Linear, Module
from .optim import make_optimizer

log = logging.getLogger(__name__)

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, UNK)
N_RSL = 4


class InputError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIALS) + [t for t in sorted(set(tokens)) if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 3
    n_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 16


# sized to land near two million weights, about 1/55 of BERT-base
REFERENCE_ENCODER = EncoderConfig(vocab_size=21128, d_model=80, n_layers=3, n_heads=4, d_ff=320,
                              max_seq_len=64)


def format_text(tokens: Sequence[str], max_len: int) -> list[str]:
    if len(tokens) == 0:
        raise InputError("empty token list")
    room = max_len - 2
    if room < 1:
        raise InputError(f"max_seq_len {max_len} leaves no room for text")
    if len(tokens) > room:
        warnings.warn(f"text of {len(tokens)} tokens truncated to {room}", stacklevel=3)
        tokens = tokens[:room]
    return [CLS, *tokens, SEP]


def format_pair(query: Sequence[str], item: Sequence[str], max_len: int) -> list[str]:
    """``[CLS] query [SEP] item [SEP]``; overlong pairs lose item tokens first."""
    if len(query) == 0 or len(item) == 0:
        raise InputError("empty query or item token list")
    room = max_len - 3
    if room < 2:
        raise InputError(f"max_seq_len {max_len} too small for a pair")
    q, i = list(query), list(item)
    if len(q) + len(i) > room:
        warnings.warn(f"pair of {len(q)}+{len(i)} tokens truncated to {room}", stacklevel=3)
        keep_i = max(1, room - len(q))
        i = i[:keep_i]
        q = q[:room - len(i)]
    return [CLS, *q, SEP, *i, SEP]


class TransformerLayer(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        if d % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.h = n_heads
        self.ln1 = self.add_child("ln1", LayerNorm(d))
        self.q = self.add_child("q", Linear(d, d, rng))
        self.k = self.add_child("k", Linear(d, d, rng))
        self.v = self.add_child("v", Linear(d, d, rng))
        self.o = self.add_child("o", Linear(d, d, rng))
        self.ln2 = self.add_child("ln2", LayerNorm(d))
        self.ff1 = self.add_child("ff1", Linear(d, d_ff, rng))
        self.ff2 = self.add_child("ff2", Linear(d_ff, d, rng))

    def _split(self, x: Tensor, B: int, L: int) -> Tensor:
        dh = x.shape[-1] // self.h
        return ag.swapaxes(ag.reshape(x, (B, L, self.h, dh)), 1, 2)  # B,h,L,dh

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        B, L, d = x.shape
        dh = d // self.h
        y = self.ln1(x)
        q, k, v = (self._split(f(y), B, L) for f in (self.q, self.k, self.v))
        scores = ag.matmul(q, k.T) * (1.0 / math.sqrt(dh))
        att = ag.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
        ctx = ag.reshape(ag.swapaxes(ag.matmul(att, v), 1, 2), (B, L, d))
        x = x + self.o(ctx)
        y = self.ln2(x)
        return x + self.ff2(ag.gelu(self.ff1(y)))


class Encoder(Module):
    def __init__(self, config: EncoderConfig, vocab: Vocab | None = None, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.vocab = vocab
        d = config.d_model
        self.tok = self.add_child("tok", Embedding(config.vocab_size, d, rng, scale=0.5))
        self.pos = self.add_child("pos", Embedding(config.max_seq_len, d, rng, scale=0.5))
        # segment 0 up to and including the first [SEP], 1 afterwards
        self.seg = self.add_child("seg", Embedding(2, d, rng, scale=0.5))
        self.blocks = [self.add_child(f"layer{i}", TransformerLayer(d, config.n_heads, config.d_ff, rng))
                       for i in range(config.n_layers)]
        self.ln_f = self.add_child("ln_f", LayerNorm(d))
        self.proj = self.add_child("proj", Linear(d, d, rng))

    @property
    def d(self) -> int:
        return self.config.d_model

    def _ids(self, seqs: Sequence[Sequence[str]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.vocab is None:
            raise InputError("encoder has no vocabulary attached")
        L = max(len(s) for s in seqs)
        ids = np.zeros((len(seqs), L), dtype=np.int64)
        seg = np.zeros((len(seqs), L), dtype=np.int64)
        mask = np.zeros((len(seqs), L), dtype=bool)
        for r, s in enumerate(seqs):
            ids[r, :len(s)] = self.vocab.ids(s)
            mask[r, :len(s)] = True
            if SEP in s:
                seg[r, s.index(SEP) + 1:len(s)] = 1
        return ids, seg, mask

    def forward_formatted(self, seqs: Sequence[Sequence[str]]) -> Tensor:
        """B formatted token sequences -> B x d [CLS] embeddings."""
        ids, seg, mask = self._ids(seqs)
        B, L = ids.shape
        if L > self.config.max_seq_len:
            raise InputError(f"sequence length {L} exceeds max_seq_len {self.config.max_seq_len}")
        x = self.tok(ids) + self.pos(np.broadcast_to(np.arange(L), (B, L))) + self.seg(seg)
        for blk in self.blocks:
            x = blk(x, mask)
        cls = ag.getitem(x, (slice(None), 0))
        return self.proj(self.ln_f(cls))

    def encode_texts(self, texts: Sequence[Sequence[str]]) -> Tensor:
        return self.forward_formatted([format_text(t, self.config.max_seq_len) for t in texts])

    def encode_pairs(self, pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> Tensor:
        return self.forward_formatted([format_pair(q, i, self.config.max_seq_len) for q, i in pairs])

    def encode_text(self, tokens: Sequence[str]) -> Tensor:
        return self.encode_texts([tokens])

    def encode_pair(self, query_tokens: Sequence[str], item_tokens: Sequence[str]) -> Tensor:
        return self.encode_pairs([(query_tokens, item_tokens)])


def parameter_count(params: Module | dict[str, np.ndarray]) -> int:
    if isinstance(params, Module):
        return params.parameter_count()
    return int(sum(np.asarray(v).size for v in params.values()))


class RelevanceHead(Module):
    """Projection from the sentence embedding to the four relevance levels."""

    def __init__(self, d: int, seed: int = 0):
        super().__init__()
        self.out = self.add_child("out", Linear(d, N_RSL, np.random.default_rng(seed)))

    def __call__(self, emb: Tensor) -> Tensor:
        return self.out(emb)


class TeacherOracle:
    """Frozen wide encoder plus a fixed linear map down to the student width."""

    def __init__(self, encoder: Encoder, student_dim: int, seed: int = 0):
        self.encoder = encoder
        self.encoder.freeze()
        rng = np.random.default_rng(seed)
        dt = encoder.d
        self.map = rng.normal(0.0, 1.0 / math.sqrt(dt), size=(dt, student_dim))
        self.map.setflags(write=False)

    def __call__(self, pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> Tensor:
        with ag.no_grad():
            g = self.encoder.encode_pairs(pairs)
        return ag.Tensor(g.data @ self.map)

    def state_fingerprint(self) -> bytes:
        import hashlib
        h = hashlib.sha256()
        for n, p in self.encoder.named_parameters():
            h.update(n.encode())
            h.update(p.data.tobytes())
        h.update(self.map.tobytes())
        return h.digest()


def _check_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 1 or labels.max() > N_RSL):
        raise InputError(f"relevance labels must lie in 1..{N_RSL}")
    return labels.astype(np.int64)


def sft_risk(probs, labels) -> Tensor:
    """Mean cross-entropy of 4-way relevance distributions against rsl labels 1..4."""
    return ag.cross_entropy(probs, _check_labels(labels) - 1)


def sft_loss(encoder: Encoder, head: RelevanceHead, pairs, labels) -> Tensor:
    labels = _check_labels(labels)
    logits = head(encoder.encode_pairs(pairs))
    return ag.cross_entropy_logits(logits, labels - 1)


def distill_risk(student, target) -> Tensor:
    """Mean squared distance between student and (mapped) teacher embeddings."""
    return ag.mse(student, target)


def distill_loss(encoder: Encoder, pairs, teacher: TeacherOracle) -> Tensor:
    return distill_risk(encoder.encode_pairs(pairs), teacher(pairs))


def overall_loss(encoder: Encoder, head: RelevanceHead, pairs, labels, teacher: TeacherOracle | None,
                 distill_weight: float = 1.0, sft_weight: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (total, distill, sft); total is the plain sum at default weights.

    One encoder pass feeds both terms.
    """
    labels = _check_labels(labels)
    emb = encoder.encode_pairs(pairs)
    sft = ag.cross_entropy_logits(head(emb), labels - 1)
    if teacher is None:
        return sft, ag.Tensor(0.0), sft
    dist = distill_risk(emb, teacher(pairs))
    total = dist + sft if distill_weight == 1.0 and sft_weight == 1.0 else dist * distill_weight + sft * sft_weight
    return total, dist, sft


@dataclass
class PretrainConfig:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 4e-3
    optimizer: str = "adam"
    distill_weight: float = 1.0
    sft_weight: float = 1.0
    holdout_fraction: float = 0.1
    seed: int = 0
    checkpoint_path: str | None = None


@dataclass
class PretrainHistory:
    train_sft: list[float] = field(default_factory=list)
    train_distill: list[float] = field(default_factory=list)
    heldout_sft: list[float] = field(default_factory=list)
    heldout_distill: list[float] = field(default_factory=list)
    heldout_accuracy: list[float] = field(default_factory=list)


def relevance_accuracy(encoder: Encoder, head: RelevanceHead, pairs, labels, batch: int = 512) -> float:
    labels = _check_labels(labels)
    if len(pairs) == 0:
        return float("nan")
    preds = []
    with ag.no_grad():
        for s in range(0, len(pairs), batch):
            preds.append(head(encoder.encode_pairs(pairs[s:s + batch])).data.argmax(axis=1) + 1)
    return float(np.mean(np.concatenate(preds) == labels))


def _evaluate(encoder, head, pairs, labels, teacher, batch=512):
    sft, dist, n = 0.0, 0.0, 0
    with ag.no_grad():
        for s in range(0, len(pairs), batch):
            p, l = pairs[s:s + batch], labels[s:s + batch]
            _, d, f = overall_loss(encoder, head, p, l, teacher)
            sft += f.item() * len(p)
            dist += d.item() * len(p)
            n += len(p)
    return sft / max(n, 1), dist / max(n, 1)


def pretrain(encoder: Encoder, head: RelevanceHead, pairs, labels, teacher: TeacherOracle | None,
             config: PretrainConfig) -> PretrainHistory:
    """Jointly minimise distillation + SFT risk; trains ``encoder`` and ``head`` in place.

    With ``teacher=None`` only the SFT term is used (how the teacher itself is
    trained). Learning rate decays linearly to 10% over the run.
    """
    labels = _check_labels(labels)
    pairs = list(pairs)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(pairs))
    n_hold = int(round(config.holdout_fraction * len(pairs)))
    hold, train = order[:n_hold], order[n_hold:]
    hp, hl = [pairs[i] for i in hold], labels[hold]
    params = encoder.parameters() + head.parameters()
    opt = make_optimizer(config.optimizer, params, config.lr)
    hist = PretrainHistory()
    steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(train)
        sft_b, dist_b = [], []
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            bp, bl = [pairs[i] for i in idx], labels[idx]
            total, dist, sft = overall_loss(encoder, head, bp, bl, teacher,
                                            config.distill_weight, config.sft_weight)
            if not np.isfinite(total.item()):
                raise TrainingDivergence(f"pretraining loss is {total.item()} at epoch {epoch}, step {step}")
            ag.backward(total, params)
            opt.lr = config.lr * (1.0 - 0.9 * step / max(total_steps, 1))
            opt.step()
            step += 1
            sft_b.append(sft.item())
            dist_b.append(dist.item())
        hist.train_sft.append(float(np.median(sft_b)))
        hist.train_distill.append(float(np.median(dist_b)))
        if len(hp):
            hs, hd = _evaluate(encoder, head, hp, hl, teacher)
            hist.heldout_sft.append(hs)
            hist.heldout_distill.append(hd)
            hist.heldout_accuracy.append(relevance_accuracy(encoder, head, hp, hl))
        log.info("pretrain epoch %d sft=%.4f distill=%.4f", epoch, hist.train_sft[-1], hist.train_distill[-1])
    if config.checkpoint_path:
        save_encoder(config.checkpoint_path, encoder, head)
    return hist


def save_encoder(path: str | Path, encoder: Encoder, head: RelevanceHead | None = None) -> Path:
    arrays = {"encoder." + n: p.data for n, p in encoder.named_parameters()}
    if head is not None:
        arrays.update({"head." + n: p.data for n, p in head.named_parameters()})
    return checkpoint.save(path, arrays)


def load_encoder(path: str | Path, encoder: Encoder, head: RelevanceHead | None = None) -> None:
    arrays = checkpoint.load(path)
    encoder.load_state_dict({k[len("encoder."):]: v for k, v in arrays.items() if k.startswith("encoder.")})
    if head is not None:
        head.load_state_dict({k[len("head."):]: v for k, v in arrays.items() if k.startswith("head.")})


def relevance_pairs(world, n: int, seed: int, balanced: bool = True):
    """(query_tokens, item_tokens) pairs with rsl labels drawn from the world.

    Balanced sampling gives each relevance level an equal share.
    """
    from .synth import stream

    rng = stream(seed, "relevance-pairs")
    rsl = world.rsl
    pairs, labels = [], []
    buckets = [np.argwhere(rsl == lvl) for lvl in range(1, N_RSL + 1)]
    for k in range(n):
        if balanced:
            lvl = k % N_RSL
            if len(buckets[lvl]) == 0:
                lvl = int(np.argmax([len(b) for b in buckets]))
            qi, ii = buckets[lvl][int(rng.integers(len(buckets[lvl])))]
        else:
            qi, ii = int(rng.integers(rsl.shape[0])), int(rng.integers(rsl.shape[1]))
        pairs.append((world.queries[qi].tokens, world.items[ii].tokens))
        labels.append(int(rsl[qi, ii]))
    perm = rng.permutation(n)
    return [pairs[i] for i in perm], np.asarray(labels)[perm]


def desk_configs(vocab_size: int, student_dim: int = 32) -> tuple[EncoderConfig, EncoderConfig]:
    """(teacher, student) sizes that train in about a minute on one CPU."""
    teacher = EncoderConfig(vocab_size, d_model=48, n_layers=2, n_heads=2, d_ff=96, max_seq_len=16)
    student = EncoderConfig(vocab_size, d_model=student_dim, n_layers=2, n_heads=2, d_ff=2 * student_dim,
                            max_seq_len=16)
    return teacher, student


@dataclass
class PretrainResult:
    encoder: Encoder
    head: RelevanceHead
    teacher_history: PretrainHistory | None
    history: PretrainHistory


def pretrain_pipeline(world, n_pairs: int = 5000, seed: int = 0, student_dim: int = 32,
                      distill: bool = True, config: PretrainConfig | None = None) -> PretrainResult:
    """Train a wider teacher on relevance SFT, then distill it into the student.

    With ``distill=False`` the student is trained on SFT alone.
    """
    config = config or PretrainConfig()
    vocab = Vocab(world.vocabulary())
    pairs, labels = relevance_pairs(world, n_pairs, seed)
    t_cfg, s_cfg = desk_configs(len(vocab), student_dim)
    teacher, t_hist = None, None
    if distill:
        t_enc = Encoder(t_cfg, vocab, seed=seed + 101)
        t_head = RelevanceHead(t_cfg.d_model, seed=seed + 101)
        t_hist = pretrain(t_enc, t_head, pairs, labels, None,
                          PretrainConfig(**{**config.__dict__, "seed": seed + 1, "checkpoint_path": None}))
        teacher = TeacherOracle(t_enc, s_cfg.d_model, seed=seed + 102)
    enc = Encoder(s_cfg, vocab, seed=seed + 201)
    head = RelevanceHead(s_cfg.d_model, seed=seed + 201)
    hist = pretrain(enc, head, pairs, labels, teacher, PretrainConfig(**{**config.__dict__, "seed": seed + 2}))
    return PretrainResult(enc, head, t_hist, hist)
