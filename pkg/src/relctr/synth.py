"""Synthetic search world and impression logs.

Users issue queries, the engine retrieves a candidate list, a relevance gate
decides which candidates are shown, and a logistic click model decides which
shown items are clicked. Relevance levels come from token overlap between the
query and item texts, so a text encoder can learn them.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RSL_LEVELS = (1, 2, 3, 4)
FIELDS = ("user_id", "query_id", "item_id", "category", "query_tokens", "item_tokens",
          "rsl", "exposed", "click", "dense_features", "day", "session")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 1000
    n_items: int = 800
    n_queries: int = 160
    n_categories: int = 8
    category_vocab: int = 10
    shared_vocab: int = 6
    # category means of relevance sensitivity are spread evenly over this width
    sensitivity_gap: float = 0.7
    user_sensitivity_sd: float = 0.08
    cold_start_fraction: float = 0.35
    n_days: int = 9
    train_days: int = 7
    sessions_per_day: float = 2.0
    cold_train_sessions: float = 0.5
    test_sessions_per_day: float = 2.0
    candidates_per_session: int = 20
    # candidate relevance mix over rsl 1..4 (the retrieval side is mostly low relevance)
    candidate_rsl_mix: tuple[float, float, float, float] = (0.35, 0.3, 0.2, 0.15)
    exposure_strictness: float = 0.92
    exposure_sharpness: float = 1.0
    dense_dim: int = 4
    click_bias: float = -5.2
    quality_weight: float = 0.8
    rsl_weight: float = 0.3
    sensitivity_weight: float = 2.0

    def validate(self) -> None:
        if self.n_categories < 1:
            raise ConfigError("n_categories must be >= 1")
        for name in ("n_users", "n_items", "n_queries", "candidates_per_session", "n_days"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.train_days <= self.n_days:
            raise ConfigError("train_days must lie in [0, n_days]")
        if not 0.0 <= self.exposure_strictness <= 1.0:
            raise ConfigError("exposure_strictness must lie in [0, 1]")
        mix = np.asarray(self.candidate_rsl_mix, dtype=float)
        if mix.shape != (4,) or (mix < 0).any() or mix.sum() <= 0:
            raise ConfigError("candidate_rsl_mix needs four non-negative weights")
        if self.dense_dim < 1:
            raise ConfigError("dense_dim must be >= 1")

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class UserProfile:
    user_id: int
    sensitivity: np.ndarray  # per category, in [0, 1]
    home_categories: tuple[int, ...]
    cold_start: bool


@dataclass
class ItemProfile:
    item_id: int
    category: int
    tokens: tuple[str, ...]
    quality: float


@dataclass
class QueryProfile:
    query_id: int
    category: int
    tokens: tuple[str, ...]


@dataclass
class World:
    config: WorldConfig
    users: list[UserProfile]
    items: list[ItemProfile]
    queries: list[QueryProfile]
    categories: list[int]
    category_sensitivity: np.ndarray
    rng_seed: int
    # rsl[q, i]
    rsl: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.sensitivity_matrix = np.array([u.sensitivity for u in self.users])
        self.item_quality = np.array([i.quality for i in self.items])
        self.queries_by_category = {c: [q.query_id for q in self.queries if q.category == c]
                                    for c in self.categories}
        self.items_by_level = [[np.flatnonzero(row == lvl) for lvl in RSL_LEVELS] for row in self.rsl]

    def vocabulary(self) -> list[str]:
        """Every token the scheme can produce; depends on the config only, not the seed."""
        return vocabulary(self.config)


@dataclass(frozen=True)
class SearchSample:
    user_id: int
    query_id: int
    item_id: int
    category: int
    query_tokens: tuple[str, ...]
    item_tokens: tuple[str, ...]
    rsl: int
    dense_features: tuple[float, ...]
    click: int = 0
    exposed: int = 0
    day: int = 0
    session: int = 0


@dataclass
class BehaviorSequence:
    owner_user_id: int
    events: list[tuple[tuple[str, ...], tuple[str, ...], int]]
    max_length: int = 25

    def __post_init__(self):
        if len(self.events) > self.max_length:
            self.events = self.events[-self.max_length:]

    def __len__(self) -> int:
        return len(self.events)


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for one named purpose, derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                                         zlib.crc32(name.encode()), *keys]))


def vocabulary(config: WorldConfig) -> list[str]:
    toks = [f"c{c}w{j}" for c in range(config.n_categories) for j in range(config.category_vocab)]
    return sorted(toks + [f"g{j}" for j in range(config.shared_vocab)])


def relevance_level(q_tokens: Sequence[str], q_cat: int, i_tokens: Sequence[str], i_cat: int) -> int:
    """Category mismatch is irrelevant; otherwise token overlap grades 2..4."""
    if q_cat != i_cat:
        return 1
    overlap = len(set(q_tokens) & set(i_tokens))
    return 2 if overlap == 0 else (3 if overlap == 1 else 4)


def generate_world(config: WorldConfig, seed: int) -> World:
    config.validate()
    C = config.n_categories
    rng = stream(seed, "world")
    cat_vocab = [[f"c{c}w{j}" for j in range(config.category_vocab)] for c in range(C)]
    shared = [f"g{j}" for j in range(config.shared_vocab)]

    # category means spread over [0.5 - gap/2, 0.5 + gap/2], shuffled
    if C == 1:
        means = np.array([0.5])
    else:
        means = 0.5 + config.sensitivity_gap * (np.linspace(0, 1, C) - 0.5)
    means = np.clip(rng.permutation(means), 0.0, 1.0)

    queries = []
    for qid in range(config.n_queries):
        c = qid % C
        n_tok = int(rng.integers(2, 4))
        toks = tuple(rng.choice(cat_vocab[c], size=n_tok, replace=False))
        queries.append(QueryProfile(qid, c, toks))

    items = []
    by_cat = [[q for q in queries if q.category == c] for c in range(C)]
    for iid in range(config.n_items):
        c = iid % C
        # anchor on a query so that strongly relevant items exist for every query family
        anchor = by_cat[c][int(rng.integers(len(by_cat[c])))] if by_cat[c] else None
        keep = int(rng.integers(0, 3))
        toks = list(anchor.tokens[:keep]) if anchor else []
        pool = [t for t in cat_vocab[c] if t not in toks]
        toks += list(rng.choice(pool, size=int(rng.integers(1, 3)), replace=False))
        toks += list(rng.choice(shared, size=int(rng.integers(1, 3)), replace=False))
        rng.shuffle(toks)
        items.append(ItemProfile(iid, c, tuple(toks), float(rng.normal())))

    users = []
    n_cold = int(round(config.cold_start_fraction * config.n_users))
    cold = np.zeros(config.n_users, dtype=bool)
    cold[rng.permutation(config.n_users)[:n_cold]] = True
    for uid in range(config.n_users):
        offset = rng.normal(0.0, config.user_sensitivity_sd)
        sens = np.clip(means + offset + rng.normal(0.0, config.user_sensitivity_sd / 2, size=C), 0.0, 1.0)
        k = min(C, int(rng.integers(1, 3)))
        home = tuple(int(c) for c in rng.choice(C, size=k, replace=False))
        users.append(UserProfile(uid, sens, home, bool(cold[uid])))

    rsl = np.empty((len(queries), len(items)), dtype=np.int8)
    for q in queries:
        for it in items:
            rsl[q.query_id, it.item_id] = relevance_level(q.tokens, q.category, it.tokens, it.category)

    return World(config, users, items, queries, list(range(C)), means, int(seed), rsl)


def exposure_probability(rsl: np.ndarray, strictness: float, sharpness: float = 1.0) -> np.ndarray:
    """Gate: rsl 4 always shown; lower levels decay as (1 - strictness)^(sharpness * (4 - rsl))."""
    rsl = np.asarray(rsl)
    base = 1.0 - strictness
    gap = sharpness * (4 - rsl)
    with np.errstate(divide="ignore"):
        p = np.where(gap == 0, 1.0, np.power(base, np.maximum(gap, 1e-12)))
    return np.where(rsl >= 4, 1.0, p)


def click_logit(world: World, user_id: int | np.ndarray, item_id, category, rsl) -> np.ndarray:
    cfg = world.config
    user_id = np.asarray(user_id)
    sens = world.sensitivity_matrix[user_id, np.asarray(category)]
    quality = world.item_quality[np.asarray(item_id)]
    slope = cfg.rsl_weight + cfg.sensitivity_weight * sens
    return cfg.click_bias + cfg.quality_weight * quality + slope * (np.asarray(rsl) - 2.5)


def click_probability(world: World, samples: Sequence[SearchSample]) -> np.ndarray:
    if not samples:
        return np.zeros(0)
    u = np.array([s.user_id for s in samples])
    i = np.array([s.item_id for s in samples])
    c = np.array([s.category for s in samples])
    r = np.array([s.rsl for s in samples])
    return 1.0 / (1.0 + np.exp(-click_logit(world, u, i, c, r)))


def _dense_block(world: World, item_ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """n x dense_dim: a noisy quality signal followed by pure-noise columns."""
    d = world.config.dense_dim
    out = rng.normal(size=(len(item_ids), d))
    out[:, 0] = world.item_quality[item_ids] + 0.5 * out[:, 0]
    # four decimals keep file round-trips exact and lines short
    return np.round(out, 4)


def _pick_candidates(world: World, query_id: int, rng: np.random.Generator, n_cand: int) -> np.ndarray:
    """Distinct item ids whose relevance levels follow the candidate mix."""
    mix = np.asarray(world.config.candidate_rsl_mix, dtype=float)
    levels = rng.choice(4, size=n_cand, p=mix / mix.sum())
    pools = world.items_by_level[query_id]
    out = np.full(n_cand, -1, dtype=np.int64)
    for lvl in range(4):
        slots = np.flatnonzero(levels == lvl)
        if slots.size == 0:
            continue
        pool = pools[lvl]
        k = min(slots.size, pool.size)
        if k:
            out[slots[:k]] = rng.choice(pool, size=k, replace=False)
    short = np.flatnonzero(out < 0)
    if short.size:
        # not enough items at some level: top up from anything not yet picked
        rest = np.setdiff1d(np.arange(len(world.items)), out[out >= 0])
        k = min(short.size, rest.size)
        out[short[:k]] = rng.choice(rest, size=k, replace=False)
        out = out[out >= 0]
    return out


def _session(world: World, user: UserProfile, rng: np.random.Generator, n_cand: int, day: int,
             session: int, strictness: float, query_id: int | None = None) -> list[SearchSample]:
    """One search request: retrieve, gate by relevance, draw clicks on what was shown."""
    cfg = world.config
    if query_id is None:
        cat = int(rng.choice(user.home_categories))
        qs = world.queries_by_category.get(cat) or [q.query_id for q in world.queries]
        query_id = int(rng.choice(qs))
    q = world.queries[query_id]
    items = _pick_candidates(world, query_id, rng, n_cand)
    rsl = world.rsl[query_id, items].astype(np.int64)
    dense = _dense_block(world, items, rng)
    shown = rng.random(len(items)) < exposure_probability(rsl, strictness, cfg.exposure_sharpness)
    pc = 1.0 / (1.0 + np.exp(-click_logit(world, user.user_id, items, q.category, rsl)))
    clicks = shown & (rng.random(len(items)) < pc)
    return [SearchSample(user.user_id, query_id, int(i), q.category, q.tokens, world.items[i].tokens,
                         int(r), tuple(d.tolist()), int(c), int(e), day, session)
            for i, r, d, c, e in zip(items, rsl, dense, clicks, shown)]


def simulate_exposure(world: World, policy_strictness: float | None = None, n: int = 1000,
                      seed: int = 0) -> list[SearchSample]:
    """Draw ``n`` candidate impressions and gate them by relevance.

    Unexposed candidates are kept with exposed=0 so the full candidate space
    can be evaluated. Clicks are left at 0; see ``simulate_clicks``.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    cfg = world.config
    strict = cfg.exposure_strictness if policy_strictness is None else policy_strictness
    rng = stream(seed, "exposure")
    out: list[SearchSample] = []
    session = 0
    while len(out) < n:
        user = world.users[int(rng.integers(len(world.users)))]
        cands = _session(world, user, rng, min(cfg.candidates_per_session, n - len(out)), 0, session, strict)
        session += 1
        out.extend(dataclasses.replace(s, click=0) for s in cands)
    return out


def simulate_clicks(world: World, samples: Sequence[SearchSample], seed: int = 0,
                    prob_override: float | None = None) -> list[SearchSample]:
    """Label exposed samples with clicks from the ground-truth logistic model."""
    rng = stream(seed, "clicks")
    p = click_probability(world, samples) if prob_override is None else np.full(len(samples), prob_override)
    u = rng.random(len(samples))
    return [dataclasses.replace(s, click=int(bool(s.exposed) and uu < pp))
            for s, uu, pp in zip(samples, u, p)]


def counterfactual_clicks(world: World, samples: Sequence[SearchSample], seed: int = 0) -> np.ndarray:
    """Would-click labels for every candidate as if it had been shown.

    Exposed samples keep their logged click; unexposed ones are drawn from the
    ground-truth click model on a dedicated stream.
    """
    if not samples:
        return np.zeros(0, dtype=np.int64)
    p = click_probability(world, samples)
    u = stream(seed, "counterfactual").random(len(samples))
    logged = np.array([s.click for s in samples])
    exposed = np.array([s.exposed for s in samples], dtype=bool)
    return np.where(exposed, logged, (u < p).astype(np.int64)).astype(np.int64)


def generate_log(world: World, seed: int, strictness: float | None = None) -> list[SearchSample]:
    """Multi-day impression log for every user, canonical order (user, day, session, slot).

    Each user draws from its own stream, so output does not depend on the
    order users are processed in.
    """
    cfg = world.config
    strict = cfg.exposure_strictness if strictness is None else strictness
    out: list[SearchSample] = []
    for user in world.users:
        rng = stream(seed, "log", user.user_id)
        session = 0
        user_samples: list[SearchSample] = []
        for day in range(cfg.n_days):
            if day < cfg.train_days:
                if user.cold_start:
                    lam = cfg.cold_train_sessions / max(cfg.train_days, 1)
                else:
                    lam = cfg.sessions_per_day
            else:
                lam = cfg.test_sessions_per_day
            for _ in range(int(rng.poisson(lam))):
                user_samples.extend(_session(world, user, rng, cfg.candidates_per_session, day, session,
                                             strict))
                session += 1
        out.extend(user_samples)
    return out


def user_histories(samples: Iterable[SearchSample], max_length: int = 25,
                   before_day: int | None = None) -> dict[int, BehaviorSequence]:
    """Clicked (query, item, rsl) events per user in log order."""
    seqs: dict[int, list] = {}
    for s in samples:
        if not s.click or (before_day is not None and s.day >= before_day):
            continue
        seqs.setdefault(s.user_id, []).append((s.query_tokens, s.item_tokens, s.rsl))
    return {u: BehaviorSequence(u, ev, max_length) for u, ev in seqs.items()}


# -- dataset files ---------------------------------------------------------


def _format(s: SearchSample) -> str:
    return "\t".join((
        str(s.user_id), str(s.query_id), str(s.item_id), str(s.category),
        " ".join(s.query_tokens), " ".join(s.item_tokens),
        str(s.rsl), str(s.exposed), str(s.click),
        ",".join(repr(float(v)) for v in s.dense_features),
        str(s.day), str(s.session),
    ))


def _parse(line: str) -> SearchSample:
    f = line.rstrip("\n").split("\t")
    if len(f) != len(FIELDS):
        raise ValueError(f"expected {len(FIELDS)} fields, got {len(f)}")
    return SearchSample(
        user_id=int(f[0]), query_id=int(f[1]), item_id=int(f[2]), category=int(f[3]),
        query_tokens=tuple(f[4].split()), item_tokens=tuple(f[5].split()),
        rsl=int(f[6]), exposed=int(f[7]), click=int(f[8]),
        dense_features=tuple(float(v) for v in f[9].split(",")) if f[9] else (),
        day=int(f[10]), session=int(f[11]),
    )


def emit_dataset(samples: Sequence[SearchSample], path: str | Path, config_hash: str = "") -> Path:
    """Write one tab-separated record per line after a JSON metadata header."""
    path = Path(path)
    header = {"schema_version": SCHEMA_VERSION, "fields": list(FIELDS), "config_hash": config_hash,
              "n_records": len(samples)}
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("#" + json.dumps(header, sort_keys=True) + "\n")
            for s in samples:
                fh.write(_format(s) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc
    return path


def read_header(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith("#"):
        raise ValueError(f"{path}: missing metadata header")
    return json.loads(first[1:])


def load_dataset(path: str | Path) -> list[SearchSample]:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
            if not first.startswith("#"):
                raise ValueError(f"{path}: missing metadata header")
            meta = json.loads(first[1:])
            if meta.get("schema_version") != SCHEMA_VERSION:
                raise ValueError(f"{path}: unsupported schema {meta.get('schema_version')}")
            return [_parse(line) for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc


def iter_sessions(samples: Sequence[SearchSample]) -> Iterator[list[SearchSample]]:
    """Group consecutive samples sharing (user, day, session)."""
    group: list[SearchSample] = []
    key = None
    for s in samples:
        k = (s.user_id, s.day, s.session)
        if k != key and group:
            yield group
            group = []
        key = k
        group.append(s)
    if group:
        yield group
