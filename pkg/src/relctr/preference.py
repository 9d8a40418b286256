"""Cross-user relevance preference mining and the MoE incentive score.

A user's own click history is supplemented with clicks that other users made
in the same category, picked by query-text similarity to the current query.
Target attention pools each sequence into a preference vector; a two-way
gate over a positive and a negative expert turns them into the incentive tau.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import MLP, Linear, Module
from .synth import BehaviorSequence, SearchSample, stream

MAX_OWN = 25


class InputError(ValueError):
    pass


def query_similarity(q1: Sequence[str], q2: Sequence[str]) -> float:
    """Jaccard overlap of the two token sets."""
    if not q1 or not q2:
        raise InputError("query similarity needs non-empty token lists")
    a, b = set(q1), set(q2)
    return len(a & b) / len(a | b)


@dataclass(frozen=True)
class PoolEvent:
    user_id: int
    index: int  # position within that user's click log
    query_tokens: tuple[str, ...]
    item_tokens: tuple[str, ...]
    rsl: int


class BehaviorPool:
    """Read-only snapshot of clicks, indexed by category then user."""

    def __init__(self, clicks: Sequence[SearchSample]):
        self.by_category: dict[int, dict[int, list[PoolEvent]]] = {}
        counters: dict[int, int] = {}
        for s in clicks:
            if not s.click:
                continue
            idx = counters.get(s.user_id, 0)
            counters[s.user_id] = idx + 1
            ev = PoolEvent(s.user_id, idx, s.query_tokens, s.item_tokens, s.rsl)
            self.by_category.setdefault(s.category, {}).setdefault(s.user_id, []).append(ev)
        self.users_by_category = {c: sorted(d) for c, d in self.by_category.items()}

    def users(self, category: int) -> list[int]:
        return self.users_by_category.get(category, [])

    def events(self, category: int, user_id: int) -> list[PoolEvent]:
        return self.by_category.get(category, {}).get(user_id, [])


@dataclass
class MergedSequence:
    own_events: BehaviorSequence
    cross_events: BehaviorSequence
    sampled_users: tuple[int, ...] = ()

    @property
    def m(self) -> int:
        return len(self.own_events)

    @property
    def k(self) -> int:
        return len(self.cross_events)

    @property
    def is_empty(self) -> bool:
        return self.m + self.k == 0


def _pair_key(user_id: int, query_tokens: Sequence[str]) -> int:
    return zlib.crc32(("%d|" % user_id + " ".join(query_tokens)).encode())


def build_merged_sequence(user_id: int, own: BehaviorSequence | None, current_query: Sequence[str],
                          category: int, pool: BehaviorPool | None, n_users: int = 50, top_k: int = 10,
                          seed: int = 0, max_own: int = MAX_OWN) -> MergedSequence:
    """Own history (kept whole, newest ``max_own``) plus the ``top_k`` most similar
    same-category clicks of up to ``n_users`` sampled other users.

    Ties on similarity resolve by (user_id, event index) ascending.
    """
    own_events = list(own.events) if own is not None else []
    own_seq = BehaviorSequence(user_id, own_events, max_own)
    if pool is None or top_k <= 0:
        return MergedSequence(own_seq, BehaviorSequence(user_id, [], max(top_k, 0)))
    candidates = [u for u in pool.users(category) if u != user_id]
    if len(candidates) > n_users:
        rng = stream(seed, "pool-sample", user_id, _pair_key(user_id, current_query))
        picked = sorted(int(u) for u in rng.choice(candidates, size=n_users, replace=False))
    else:
        picked = candidates
    scored = []
    for u in picked:
        for ev in pool.events(category, u):
            scored.append((-query_similarity(current_query, ev.query_tokens), ev.user_id, ev.index, ev))
    scored.sort(key=lambda t: t[:3])
    cross = [(ev.query_tokens, ev.item_tokens, ev.rsl) for *_, ev in scored[:top_k]]
    return MergedSequence(own_seq, BehaviorSequence(user_id, cross, top_k), tuple(picked))


# -- incentive head --------------------------------------------------------


def combine_tau(w, e_plus, e_minus) -> Tensor:
    """tau = w1 * softplus(E+) - w2 * softplus(E-); w is ... x 2."""
    w = ag.as_tensor(w)
    f_pos = ag.softplus(e_plus)
    f_neg = -ag.softplus(e_minus)
    return w[..., 0] * f_pos + w[..., 1] * f_neg


class IncentiveHead(Module):
    """Projections for user- and category-level target attention, gate and experts.

    Values are the relevance embeddings themselves, so every pooled
    preference is a convex combination of event embeddings.
    """

    def __init__(self, d: int, d_att: int = 16, hidden: int = 16, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.d, self.d_att = d, d_att
        self.q_user = self.add_child("q_user", Linear(d, d_att, rng, bias=False))
        self.k_user = self.add_child("k_user", Linear(d, d_att, rng, bias=False))
        self.q_cate = self.add_child("q_cate", Linear(d, d_att, rng, bias=False))
        self.k_cate = self.add_child("k_cate", Linear(d, d_att, rng, bias=False))
        self.default_user = self.add_param("default_user", rng.normal(0.0, 0.1, size=d))
        self.default_cate = self.add_param("default_cate", rng.normal(0.0, 0.1, size=d))
        self.gate = self.add_child("gate", Linear(d, 2, rng))
        self.expert_pos = self.add_child("expert_pos", MLP([3 * d, hidden, 1], rng))
        self.expert_neg = self.add_child("expert_neg", MLP([3 * d, hidden, 1], rng))

    # single-request forms ----------------------------------------------
    def user_preference(self, q_cur, own_q, own_r) -> Tensor:
        """1 x d pooled own-history relevance; learned default when the history is empty."""
        if own_q is None or ag.as_tensor(own_q).shape[0] == 0:
            return ag.reshape(self.default_user, (1, self.d))
        return ag.target_attention(self.q_user(q_cur), self.k_user(own_q), own_r, self.d_att)

    def category_preference(self, q_cur, cross_q, cross_r) -> Tensor:
        if cross_q is None or ag.as_tensor(cross_q).shape[0] == 0:
            return ag.reshape(self.default_cate, (1, self.d))
        return ag.target_attention(self.q_cate(q_cur), self.k_cate(cross_q), cross_r, self.d_att)

    def gate_weights(self, r_user) -> Tensor:
        return ag.softmax(self.gate(r_user), axis=-1)

    def experts(self, r_user, r_cate, r_cur) -> tuple[Tensor, Tensor]:
        x = ag.concat([r_user, r_cate, r_cur], axis=-1)
        e_pos = self.expert_pos(x)
        e_neg = self.expert_neg(x)
        return ag.reshape(e_pos, e_pos.shape[:-1]), ag.reshape(e_neg, e_neg.shape[:-1])

    def incentive_tau(self, r_user, r_cate, r_cur) -> Tensor:
        w = self.gate_weights(r_user)
        e_pos, e_neg = self.experts(r_user, r_cate, r_cur)
        return combine_tau(w, e_pos, e_neg)

    # batched form used in training -------------------------------------
    def pool(self, q_cur: Tensor, own_q, own_r, own_mask: np.ndarray, cross_q, cross_r,
             cross_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """B x d user- and category-level preferences with per-row fallbacks."""
        r_user = self._pool(self.q_user, self.k_user, self.default_user, q_cur, own_q, own_r, own_mask)
        r_cate = self._pool(self.q_cate, self.k_cate, self.default_cate, q_cur, cross_q, cross_r, cross_mask)
        return r_user, r_cate

    def _pool(self, qp, kp, default, q_cur, K, V, mask):
        B = q_cur.shape[0]
        fallback = ag.reshape(default, (1, self.d))
        if K is None or mask.shape[1] == 0 or not mask.any():
            return fallback + ag.Tensor(np.zeros((B, self.d)))
        pooled = ag.masked_target_attention(qp(q_cur), kp(K), V, mask, self.d_att)
        empty = ~mask.any(axis=1)
        if empty.any():
            pooled = ag.where(empty[:, None], fallback, pooled)
        return pooled
