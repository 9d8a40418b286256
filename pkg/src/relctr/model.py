"""Relevance-decomposed CTR model.

The click rate is a mixture over relevance levels: a relevance head gives
P(rsl=i | x), four conditional heads give P(click | rsl=i, x), and their dot
product is P(click | x). The incentive tau from the preference module then
adjusts it into the ranking score.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .debias import DebiasConfig, debias_loss
from .layers import MLP, Embedding, Linear, Module
from .preference import IncentiveHead

N_RSL = 4
FUSIONS = ("logit", "literal", "shifted")


class ModelError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_users: int
    n_queries: int
    n_items: int
    n_categories: int
    dense_dim: int = 4
    d_text: int = 32
    d_sparse: int = 8
    hidden: int = 64
    d_att: int = 16
    expert_hidden: int = 16
    # logit: sigmoid(logit(p) + tau); literal: tau * p; shifted: max(0, 1 + tau) * p
    fusion: str = "logit"
    use_preference: bool = True
    # plain Emb+MLP baseline: one sigmoid head, no text features, no tau
    plain: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ModelError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        for name in ("n_users", "n_queries", "n_items", "n_categories", "d_text", "d_sparse", "hidden"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")


@dataclass
class FeatureBatch:
    """Column-oriented model inputs; every array shares the leading batch axis.

    Text embeddings come precomputed from the (frozen) encoder. Sequence
    arrays are B x m x d with boolean masks marking real events.
    """
    user: np.ndarray
    query: np.ndarray
    item: np.ndarray
    category: np.ndarray
    rsl: np.ndarray
    dense: np.ndarray
    q_emb: np.ndarray
    i_emb: np.ndarray
    r_cur: np.ndarray
    own_q: np.ndarray
    own_r: np.ndarray
    own_mask: np.ndarray
    cross_q: np.ndarray
    cross_r: np.ndarray
    cross_mask: np.ndarray
    click: np.ndarray | None = None
    exposed: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.user)

    def take(self, rows) -> "FeatureBatch":
        kw = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            kw[f.name] = None if v is None else v[rows]
        return FeatureBatch(**kw)

    def replace(self, **kw) -> "FeatureBatch":
        return dataclasses.replace(self, **kw)


def concat_batches(batches: Sequence[FeatureBatch]) -> FeatureBatch:
    kw = {}
    for f in dataclasses.fields(FeatureBatch):
        vals = [getattr(b, f.name) for b in batches]
        kw[f.name] = None if any(v is None for v in vals) else np.concatenate(vals, axis=0)
    return FeatureBatch(**kw)


@dataclass
class Outputs:
    p_rsl: Tensor
    rsl_logits: Tensor | None
    p_cond: Tensor
    p_click: Tensor
    tau: Tensor
    score: Tensor
    # what BCE is applied to: the fused score when tau is trainable, else p_click
    trained: Tensor


@dataclass(frozen=True)
class Prediction:
    p_rsl: np.ndarray
    p_click_given_rsl: np.ndarray
    p_click: float
    tau: float
    rank_score: float


def oov_ids(ids, size: int) -> np.ndarray:
    """Shift ids by one so row 0 is the reserved out-of-vocabulary row."""
    ids = np.asarray(ids, dtype=np.int64)
    ok = (ids >= 0) & (ids < size - 1)
    return np.where(ok, ids + 1, 0)


def fuse(p_click: Tensor, tau: Tensor, mode: str) -> Tensor:
    if mode == "literal":
        return tau * p_click
    if mode == "shifted":
        return ag.relu(1.0 + tau) * p_click
    if mode == "logit":
        logit = ag.log(p_click) - ag.log(1.0 - p_click)
        return ag.sigmoid(logit + tau)
    raise ModelError(f"unknown fusion {mode!r}")


class RankModel(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = c = config
        rng = np.random.default_rng(c.seed)
        self.user_emb = self.add_child("user_emb", Embedding(c.n_users + 1, c.d_sparse, rng))
        self.query_emb = self.add_child("query_emb", Embedding(c.n_queries + 1, c.d_sparse, rng))
        self.item_emb = self.add_child("item_emb", Embedding(c.n_items + 1, c.d_sparse, rng))
        self.cate_emb = self.add_child("cate_emb", Embedding(c.n_categories + 1, c.d_sparse, rng))
        self.rsl_emb = self.add_child("rsl_emb", Embedding(N_RSL + 1, c.d_sparse, rng))
        self.dense_proj = self.add_child("dense_proj", Linear(c.dense_dim, c.d_sparse, rng))
        n_sparse = 6 * c.d_sparse
        if c.plain:
            self.trunk = self.add_child("trunk", MLP([n_sparse, c.hidden, c.hidden // 2, 1], rng))
            return
        text = 3 * c.d_text
        self.rsl_head = self.add_child("rsl_head", MLP([text + 2 * c.d_sparse, c.hidden, N_RSL], rng))
        self.trunk = self.add_child("trunk", MLP([n_sparse + text, c.hidden, c.hidden // 2, N_RSL], rng))
        # start the conditional heads near a realistic click rate
        self.trunk.layers[-1].b.data[:] = -3.0
        if c.use_preference:
            self.incentive = self.add_child(
                "incentive", IncentiveHead(c.d_text, c.d_att, c.expert_hidden, seed=c.seed + 1))

    def _sparse(self, b: FeatureBatch, rsl) -> list[Tensor]:
        c = self.config
        return [
            self.user_emb(oov_ids(b.user, c.n_users + 1)),
            self.query_emb(oov_ids(b.query, c.n_queries + 1)),
            self.item_emb(oov_ids(b.item, c.n_items + 1)),
            self.cate_emb(oov_ids(b.category, c.n_categories + 1)),
            self.rsl_emb(np.where((rsl >= 1) & (rsl <= N_RSL), rsl, 0)),
            self.dense_proj(Tensor(b.dense)),
        ]

    def forward(self, b: FeatureBatch, rsl_override=None, q_noise=None, i_noise=None) -> Outputs:
        """Scores for a batch. The overrides build debias negatives: a replaced
        relevance feature and noise added to the query or item text embedding."""
        c = self.config
        rsl = np.asarray(b.rsl if rsl_override is None else rsl_override, dtype=np.int64)
        sparse = self._sparse(b, rsl)
        B = len(b)
        if c.plain:
            p = ag.sigmoid(ag.reshape(self.trunk(ag.concat(sparse, axis=-1)), (B,)))
            p_rsl = Tensor(np.full((B, N_RSL), 1.0 / N_RSL))
            p_cond = ag.stack([p] * N_RSL, axis=1)
            tau = Tensor(np.zeros(B))
            return Outputs(p_rsl, None, p_cond, p, tau, p, p)

        q = Tensor(b.q_emb if q_noise is None else b.q_emb + q_noise)
        it = Tensor(b.i_emb if i_noise is None else b.i_emb + i_noise)
        r_cur = Tensor(b.r_cur)
        rsl_logits = self.rsl_head(ag.concat([q, it, r_cur, sparse[1], sparse[2]], axis=-1))
        p_rsl = ag.softmax(rsl_logits, axis=-1)
        p_cond = ag.sigmoid(self.trunk(ag.concat(sparse + [q, it, r_cur], axis=-1)))
        p_click = ag.tsum(p_cond * p_rsl, axis=-1)

        if c.use_preference:
            r_user, r_cate = self.incentive.pool(q, b.own_q, b.own_r, b.own_mask,
                                                 b.cross_q, b.cross_r, b.cross_mask)
            tau = self.incentive.incentive_tau(r_user, r_cate, r_cur)
            score = fuse(p_click, tau, c.fusion)
            trained = score if c.fusion == "logit" else p_click
        else:
            tau = Tensor(np.zeros(B))
            score = trained = p_click
        return Outputs(p_rsl, rsl_logits, p_cond, p_click, tau, score, trained)

    __call__ = forward

    def predict(self, b: FeatureBatch) -> list[Prediction]:
        with ag.no_grad():
            out = self.forward(b)
        return [Prediction(out.p_rsl.data[i].copy(), out.p_cond.data[i].copy(), float(out.p_click.data[i]),
                           float(out.tau.data[i]), float(out.score.data[i])) for i in range(len(b))]

    def score_arrays(self, b: FeatureBatch, chunk: int = 4096) -> dict[str, np.ndarray]:
        """p_click, tau and rank score for a large batch, without building a tape."""
        parts: dict[str, list] = {"p_click": [], "tau": [], "score": [], "p_rsl": []}
        with ag.no_grad():
            for s in range(0, len(b), chunk):
                out = self.forward(b.take(slice(s, s + chunk)))
                parts["p_click"].append(out.p_click.data)
                parts["tau"].append(out.tau.data)
                parts["score"].append(out.score.data)
                parts["p_rsl"].append(out.p_rsl.data)
        return {k: np.concatenate(v) if v else np.zeros(0) for k, v in parts.items()}


def mixture_click(p_rsl, p_cond) -> np.ndarray:
    """Reference mixture: independent dot product per row."""
    p_rsl, p_cond = np.asarray(p_rsl), np.asarray(p_cond)
    return np.einsum("ij,ij->i", p_rsl, p_cond)


@dataclass
class LossParts:
    total: Tensor
    bce: float
    rsl_ce: float
    debias: float
    n_pairs: int


def main_loss(model: RankModel, b: FeatureBatch, rng: np.random.Generator | None = None,
              lambda_rsl: float = 1.0, debias: DebiasConfig | None = None,
              fake_rsl=None, noise=None) -> LossParts:
    """BCE on clicks + lambda_rsl * relevance CE on exposed rows + debias pairs.

    ``fake_rsl`` and ``noise`` may be passed in to pin the random negatives
    (gradient checks); otherwise they are drawn from ``rng``.
    """
    if b.click is None:
        raise ModelError("main_loss needs click labels")
    out = model.forward(b)
    bce = ag.bce(out.trained, b.click)
    total = bce
    ce_val = 0.0
    exposed = np.ones(len(b), dtype=bool) if b.exposed is None else b.exposed.astype(bool)
    if lambda_rsl > 0 and out.rsl_logits is not None and exposed.any():
        rows = np.flatnonzero(exposed)
        ce = ag.cross_entropy_logits(out.rsl_logits[rows], b.rsl[rows] - 1)
        total = total + lambda_rsl * ce
        ce_val = ce.item()
    deb_val, n_pairs = 0.0, 0
    if debias is not None and debias.enabled and not model.config.plain:
        pos = np.flatnonzero((b.click == 1) & (b.rsl == 4) & exposed)
        n_pairs = int(pos.size)
        if n_pairs:
            if fake_rsl is None:
                from .debias import sample_fake_rsl
                fake_rsl = sample_fake_rsl(debias.p1, debias.p2, rng, size=n_pairs)
            if noise is None:
                noise = debias.sigma * rng.standard_normal((n_pairs, model.config.d_text))
            sub = b.take(pos)
            kw = {"q_noise": noise} if debias.noise_side == "query" else {"i_noise": noise}
            neg = model.forward(sub, rsl_override=np.asarray(fake_rsl), **kw)
            r = debias_loss(out.score[pos], neg.score, debias)
            total = total + r
            deb_val = r.item()
    val = total.item()
    if not np.isfinite(val):
        raise TrainingDivergence(f"non-finite loss: bce={bce.item()} rsl_ce={ce_val} debias={deb_val}")
    return LossParts(total, bce.item(), ce_val, deb_val, n_pairs)


def score_candidates(item_ids, scores, p_click=None, tau=None) -> list[tuple]:
    """Rows (item_id, p_click, tau, rank_score, rank) by descending score, ties by item_id."""
    item_ids = np.asarray(item_ids)
    scores = np.asarray(scores, dtype=float)
    if item_ids.size == 0:
        return []
    p_click = scores if p_click is None else np.asarray(p_click, dtype=float)
    tau = np.zeros_like(scores) if tau is None else np.asarray(tau, dtype=float)
    order = np.lexsort((item_ids, -scores))
    return [(int(item_ids[i]), float(p_click[i]), float(tau[i]), float(scores[i]), r + 1)
            for r, i in enumerate(order)]
