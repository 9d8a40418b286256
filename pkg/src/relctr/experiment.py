"""Experiment plumbing: config, data preparation, training loop, evaluation, reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint
from .debias import DebiasConfig
from .encoder import Encoder, PretrainConfig, Vocab, desk_configs, load_encoder, pretrain_pipeline, save_encoder
from .metrics import UndefinedMetricError, auc, gauc, irrelevant_rate_at_10, pcoc, relaimpr
from .model import FeatureBatch, ModelConfig, RankModel, TrainingDivergence, main_loss
from .optim import make_optimizer
from .preference import BehaviorPool, build_merged_sequence
from .synth import (BehaviorSequence, SearchSample, World, WorldConfig, counterfactual_clicks, emit_dataset,
                    generate_log, generate_world, load_dataset, stream)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    # synthetic world
    n_users: int = 1000
    sessions_per_day: float = 2.0
    test_sessions_per_day: float = 2.0
    click_bias: float = -5.2
    exposure_strictness: float = 0.92
    # text encoder
    pretrain_seed: int = 0
    pretrain_pairs: int = 5000
    pretrain_epochs: int = 12
    distill: bool = True
    encoder_dim: int = 32
    # CTR training
    batch_size: int = 256
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    epochs: int = 6
    lambda_rsl: float = 1.0
    # model
    d_sparse: int = 8
    hidden: int = 64
    fusion: str = "logit"
    use_preference: bool = True
    use_cross: bool = True
    plain: bool = False
    pool_users: int = 50
    top_k: int = 10
    max_own: int = 25
    cold_threshold: int = 5
    # debias
    debias: bool = True
    debias_naive: bool = False
    p1: float = 0.2
    p2: float = 0.6
    margin: float = 0.075
    threshold: float = 0.08
    debias_w: float = 1.0
    noise_sigma: float = 1.0
    noise_side: str = "query"
    # paths (empty = in memory only)
    data_dir: str = ""
    encoder_path: str = ""
    output_dir: str = ""

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.fusion not in ("logit", "literal", "shifted"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        try:
            self.debias_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def world_config(self) -> WorldConfig:
        return WorldConfig(n_users=self.n_users, sessions_per_day=self.sessions_per_day,
                           test_sessions_per_day=self.test_sessions_per_day, click_bias=self.click_bias,
                           exposure_strictness=self.exposure_strictness)

    def debias_config(self) -> DebiasConfig:
        return DebiasConfig(p1=self.p1, p2=self.p2, margin=self.margin, threshold=self.threshold,
                            w=self.debias_w, sigma=self.noise_sigma, noise_side=self.noise_side,
                            enabled=self.debias, naive=self.debias_naive)

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


CONFIG_DOCS = {
    "seed": "master seed for world, log, pooling and training",
    "n_users": "number of simulated users",
    "sessions_per_day": "mean searches per day for active users in the training period",
    "test_sessions_per_day": "mean searches per day for every user in the test period",
    "click_bias": "intercept of the ground-truth click logit",
    "exposure_strictness": "how strongly the gate hides low-relevance candidates (0..1)",
    "pretrain_seed": "seed of the world and run used to pretrain the text encoder",
    "pretrain_pairs": "size of the relevance pair set for encoder pretraining",
    "pretrain_epochs": "epochs for teacher and student pretraining",
    "distill": "distill the student from a wider teacher (false: SFT only)",
    "encoder_dim": "student encoder width",
    "batch_size": "CTR training batch size (>= 2)",
    "learning_rate": "CTR training learning rate",
    "optimizer": "sgd or adam",
    "epochs": "CTR training epochs",
    "lambda_rsl": "weight of the relevance cross-entropy term",
    "d_sparse": "width of each sparse-feature embedding",
    "hidden": "hidden width of the click and relevance heads",
    "fusion": "how tau enters the score: logit, literal or shifted",
    "use_preference": "enable the incentive score tau",
    "use_cross": "supplement own history with other users' same-category clicks",
    "plain": "plain Emb+MLP baseline (no text, no relevance mixture, no tau)",
    "pool_users": "other users sampled per request",
    "top_k": "cross-user events kept after similarity ranking",
    "max_own": "own-history length cap",
    "cold_threshold": "users with fewer own training clicks form the cold-start slice",
    "debias": "enable the pairwise debias loss",
    "debias_naive": "plain pairwise loss without margin or truncation",
    "p1": "fake-label boundary between levels 1 and 2",
    "p2": "fake-label boundary between levels 2 and 3",
    "margin": "score gap beyond which a pair stops contributing",
    "threshold": "mean positive score at which the debias loss switches off",
    "debias_w": "debias loss weight",
    "noise_sigma": "std of the embedding noise on fake negatives",
    "noise_side": "which text embedding receives the noise: query or item",
    "data_dir": "directory written by gen-data",
    "encoder_path": "encoder checkpoint (pretrained when missing)",
    "output_dir": "where checkpoints and reports go",
}


def _coerce(name: str, typ: Any, raw: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc


def parse_overrides(pairs: Sequence[str], base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``key=value`` strings; unknown keys are rejected."""
    base = base or TrainConfig()
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kw = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip()
        if k not in types:
            raise ConfigError(f"unknown config key {k!r}")
        kw[k] = _coerce(k, types[k], v)
    cfg = dataclasses.replace(base, **kw)
    cfg.validate()
    return cfg


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` file; '#' starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return parse_overrides(lines, base)


def dump_config(cfg: TrainConfig) -> str:
    out = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out.append(f"# {CONFIG_DOCS[f.name]}")
        out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"


# -- data ----------------------------------------------------------------------


@dataclass
class RawData:
    world: World
    train: list[SearchSample]  # every training-period candidate
    test: list[SearchSample]   # every test-period candidate, logged clicks
    test_cf: np.ndarray        # would-click labels for ``test``


def generate_data(cfg: TrainConfig) -> RawData:
    wc = cfg.world_config()
    world = generate_world(wc, cfg.seed)
    samples = generate_log(world, cfg.seed)
    train = [s for s in samples if s.day < wc.train_days]
    test = [s for s in samples if s.day >= wc.train_days]
    return RawData(world, train, test, counterfactual_clicks(world, test, cfg.seed))


def write_data(raw: RawData, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = raw.world.config.digest()
    emit_dataset(raw.train, out / "train.tsv", h)
    emit_dataset(raw.test, out / "test.tsv", h)
    cf = [dataclasses.replace(s, click=int(c)) for s, c in zip(raw.test, raw.test_cf)]
    emit_dataset(cf, out / "test_full.tsv", h)
    emit_dataset([s for s in raw.train if s.click], out / "pool.tsv", h)
    meta = {"seed": raw.world.rng_seed, "world_config": dataclasses.asdict(raw.world.config)}
    (out / "world.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return out


def read_data(data_dir: str | Path) -> RawData:
    d = Path(data_dir)
    need = [d / n for n in ("world.json", "train.tsv", "test.tsv", "test_full.tsv")]
    missing = [str(p) for p in need if not p.exists()]
    if missing:
        raise ConfigError("missing inputs: " + ", ".join(missing))
    meta = json.loads((d / "world.json").read_text())
    wc = meta["world_config"]
    wc["candidate_rsl_mix"] = tuple(wc["candidate_rsl_mix"])
    world = generate_world(WorldConfig(**wc), int(meta["seed"]))
    test = load_dataset(d / "test.tsv")
    cf = np.array([s.click for s in load_dataset(d / "test_full.tsv")], dtype=np.int64)
    return RawData(world, load_dataset(d / "train.tsv"), test, cf)


# -- text embeddings -----------------------------------------------------------


class TextEmbeddings:
    """Lazily filled tables of frozen-encoder embeddings keyed by token tuples."""

    def __init__(self, encoder: Encoder, chunk: int = 512):
        self.encoder = encoder
        self.chunk = chunk
        self.d = encoder.d
        self._index: dict[str, dict] = {"text": {}, "pair": {}}
        self._rows: dict[str, list[np.ndarray]] = {"text": [], "pair": []}
        self._tables: dict[str, np.ndarray] = {}

    def _ensure(self, kind: str, keys) -> None:
        idx = self._index[kind]
        todo = list(dict.fromkeys(k for k in keys if k not in idx))
        if not todo:
            return
        with ag.no_grad():
            for s in range(0, len(todo), self.chunk):
                part = todo[s:s + self.chunk]
                if kind == "text":
                    emb = self.encoder.encode_texts(part).data
                else:
                    emb = self.encoder.encode_pairs(part).data
                for k, row in zip(part, emb):
                    idx[k] = len(idx)
                    self._rows[kind].append(row)
        self._tables.pop(kind, None)

    def text_ids(self, texts) -> np.ndarray:
        texts = list(texts)
        self._ensure("text", texts)
        return np.array([self._index["text"][t] for t in texts], dtype=np.int64)

    def pair_ids(self, pairs) -> np.ndarray:
        pairs = list(pairs)
        self._ensure("pair", pairs)
        return np.array([self._index["pair"][p] for p in pairs], dtype=np.int64)

    def table(self, kind: str) -> np.ndarray:
        if kind not in self._tables:
            rows = self._rows[kind]
            self._tables[kind] = np.vstack(rows) if rows else np.zeros((0, self.d))
        return self._tables[kind]


# -- indexed sample sets ---------------------------------------------------------


@dataclass
class IndexedSet:
    """Samples as index arrays into the embedding tables; ``batch`` gathers rows."""
    samples: list[SearchSample]
    labels: np.ndarray
    exposed: np.ndarray
    cols: dict[str, np.ndarray]
    texts: TextEmbeddings
    use_cross: bool = True

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, rows) -> FeatureBatch:
        c = self.cols
        T, P = self.texts.table("text"), self.texts.table("pair")

        def seq(q_idx, p_idx, on=True):
            mask = (q_idx >= 0) & on
            q = T[np.maximum(q_idx, 0)] if T.size else np.zeros(q_idx.shape + (self.texts.d,))
            r = P[np.maximum(p_idx, 0)] if P.size else np.zeros(p_idx.shape + (self.texts.d,))
            return q * mask[..., None], r * mask[..., None], mask

        oq, orr, om = seq(c["own_q"][rows], c["own_p"][rows])
        cq, cr, cm = seq(c["cross_q"][rows], c["cross_p"][rows], self.use_cross)
        return FeatureBatch(
            user=c["user"][rows], query=c["query"][rows], item=c["item"][rows], category=c["category"][rows],
            rsl=c["rsl"][rows], dense=c["dense"][rows],
            q_emb=T[c["q"][rows]], i_emb=T[c["i"][rows]], r_cur=P[c["p"][rows]],
            own_q=oq, own_r=orr, own_mask=om, cross_q=cq, cross_r=cr, cross_mask=cm,
            click=self.labels[rows], exposed=self.exposed[rows])

    def all(self) -> FeatureBatch:
        return self.batch(np.arange(len(self)))


class HistoryIndex:
    """Own click histories and cross-user pools, visible strictly before a day."""

    def __init__(self, train: Sequence[SearchSample], train_days: int, seed: int, pool_users: int,
                 top_k: int, max_own: int):
        self.train_days = train_days
        self.seed, self.pool_users, self.top_k, self.max_own = seed, pool_users, top_k, max_own
        clicks = [s for s in train if s.click]
        self.by_user: dict[int, list[SearchSample]] = {}
        for s in clicks:
            self.by_user.setdefault(s.user_id, []).append(s)
        self.pools = {d: BehaviorPool([s for s in clicks if s.day < d]) for d in range(1, train_days + 1)}
        self._cache: dict[tuple, tuple[list, list]] = {}

    def own_count(self, user_id: int) -> int:
        return len(self.by_user.get(user_id, []))

    def sequences(self, user_id: int, query_tokens, category: int, day: int):
        cutoff = min(day, self.train_days)
        key = (user_id, query_tokens, cutoff)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        own = [(s.query_tokens, s.item_tokens, s.rsl) for s in self.by_user.get(user_id, []) if s.day < cutoff]
        pool = self.pools.get(cutoff)
        merged = build_merged_sequence(user_id, BehaviorSequence(user_id, own, self.max_own), query_tokens,
                                       category, pool, self.pool_users, self.top_k, self.seed, self.max_own)
        out = (merged.own_events.events, merged.cross_events.events)
        self._cache[key] = out
        return out


def index_samples(samples: Sequence[SearchSample], labels, texts: TextEmbeddings, hist: HistoryIndex,
                  use_cross: bool = True) -> IndexedSet:
    n = len(samples)
    K, M = hist.top_k, hist.max_own
    cols = {
        "user": np.array([s.user_id for s in samples], dtype=np.int64),
        "query": np.array([s.query_id for s in samples], dtype=np.int64),
        "item": np.array([s.item_id for s in samples], dtype=np.int64),
        "category": np.array([s.category for s in samples], dtype=np.int64),
        "rsl": np.array([s.rsl for s in samples], dtype=np.int64),
        "dense": np.array([s.dense_features for s in samples], dtype=float).reshape(n, -1),
        "q": texts.text_ids(s.query_tokens for s in samples),
        "i": texts.text_ids(s.item_tokens for s in samples),
        "p": texts.pair_ids((s.query_tokens, s.item_tokens) for s in samples),
        "own_q": np.full((n, M), -1, dtype=np.int64), "own_p": np.full((n, M), -1, dtype=np.int64),
        "cross_q": np.full((n, K), -1, dtype=np.int64), "cross_p": np.full((n, K), -1, dtype=np.int64),
    }
    for r, s in enumerate(samples):
        own, cross = hist.sequences(s.user_id, s.query_tokens, s.category, s.day)
        for name, events in (("own", own), ("cross", cross)):
            if events:
                cols[name + "_q"][r, :len(events)] = texts.text_ids(e[0] for e in events)
                cols[name + "_p"][r, :len(events)] = texts.pair_ids((e[0], e[1]) for e in events)
    labels = np.asarray(labels, dtype=np.int64)
    exposed = np.array([s.exposed for s in samples], dtype=np.int64)
    return IndexedSet(list(samples), labels, exposed, cols, texts, use_cross)


@dataclass
class Prepared:
    world: World
    train: IndexedSet       # exposed training samples
    test: IndexedSet        # exposed test samples, logged clicks
    test_full: IndexedSet   # every test candidate, would-click labels
    own_counts: dict[int, int]
    use_cross: bool = True

    def with_cross(self, use_cross: bool) -> "Prepared":
        def sw(s: IndexedSet) -> IndexedSet:
            return dataclasses.replace(s, use_cross=use_cross)
        return Prepared(self.world, sw(self.train), sw(self.test), sw(self.test_full), self.own_counts, use_cross)


def prepare(raw: RawData, encoder: Encoder, cfg: TrainConfig) -> Prepared:
    wc = raw.world.config
    train = [s for s in raw.train if s.exposed]
    hist = HistoryIndex(raw.train, wc.train_days, cfg.seed, cfg.pool_users, cfg.top_k, cfg.max_own)
    texts = TextEmbeddings(encoder)
    tr = index_samples(train, [s.click for s in train], texts, hist)
    full = index_samples(raw.test, raw.test_cf, texts, hist)
    rows = np.flatnonzero(full.exposed == 1)
    logged = np.array([s.click for s in raw.test], dtype=np.int64)
    te = IndexedSet([raw.test[i] for i in rows], logged[rows], full.exposed[rows],
                    {k: v[rows] for k, v in full.cols.items()}, texts)
    counts = {u.user_id: hist.own_count(u.user_id) for u in raw.world.users}
    return Prepared(raw.world, tr, te, full, counts).with_cross(cfg.use_cross)


# -- encoder -------------------------------------------------------------------

_ENCODER_CACHE: dict[tuple, Encoder] = {}


def get_encoder(cfg: TrainConfig, world: World) -> Encoder:
    """Load the encoder checkpoint, or pretrain one (memoised per process).

    Pretraining uses its own world drawn with ``pretrain_seed``; the token
    scheme is the same for every seed, so one encoder serves all runs.
    """
    vocab = Vocab(world.vocabulary())
    _, s_cfg = desk_configs(len(vocab), cfg.encoder_dim)
    if cfg.encoder_path and Path(cfg.encoder_path).exists():
        enc = Encoder(s_cfg, vocab)
        load_encoder(cfg.encoder_path, enc)
        return enc
    key = (tuple(vocab.itos), cfg.pretrain_seed, cfg.pretrain_pairs, cfg.pretrain_epochs, cfg.distill,
           cfg.encoder_dim)
    if key not in _ENCODER_CACHE:
        pw = generate_world(world.config, cfg.pretrain_seed)
        res = pretrain_pipeline(pw, cfg.pretrain_pairs, cfg.pretrain_seed, cfg.encoder_dim, cfg.distill,
                                PretrainConfig(epochs=cfg.pretrain_epochs))
        if cfg.encoder_path:
            save_encoder(cfg.encoder_path, res.encoder, res.head)
            # same float32-rounded weights a later process would load
            load_encoder(cfg.encoder_path, res.encoder)
        _ENCODER_CACHE[key] = res.encoder
    enc = _ENCODER_CACHE[key]
    enc.freeze()
    return enc


# -- training -------------------------------------------------------------------


def model_config(cfg: TrainConfig, world: World) -> ModelConfig:
    wc = world.config
    return ModelConfig(n_users=wc.n_users, n_queries=wc.n_queries, n_items=wc.n_items,
                       n_categories=wc.n_categories, dense_dim=wc.dense_dim, d_text=cfg.encoder_dim,
                       d_sparse=cfg.d_sparse, hidden=cfg.hidden, fusion=cfg.fusion,
                       use_preference=cfg.use_preference, plain=cfg.plain, seed=cfg.seed)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    bce: list[float] = field(default_factory=list)
    debias: list[float] = field(default_factory=list)
    active_debias_steps: list[int] = field(default_factory=list)


def train_model(cfg: TrainConfig, data: Prepared, model: RankModel | None = None) -> tuple[RankModel, TrainHistory]:
    model = model or RankModel(model_config(cfg, data.world))
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    deb = cfg.debias_config()
    rng = stream(cfg.seed, "ctr-train")
    hist = TrainHistory()
    n = len(data.train)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses, bces, debs, active = [], [], [], 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            if idx.size < 2:
                continue
            parts = main_loss(model, data.train.batch(idx), rng, cfg.lambda_rsl, deb)
            ag.backward(parts.total, params)
            opt.step()
            losses.append(parts.total.item())
            bces.append(parts.bce)
            debs.append(parts.debias)
            active += parts.debias != 0.0
        hist.loss.append(float(np.mean(losses)) if losses else float("nan"))
        hist.bce.append(float(np.mean(bces)) if bces else float("nan"))
        hist.debias.append(float(np.mean(debs)) if debs else float("nan"))
        hist.active_debias_steps.append(int(active))
        log.info("epoch %d loss=%.5f bce=%.5f debias=%.5f active=%d", epoch, hist.loss[-1], hist.bce[-1],
                 hist.debias[-1], active)
    return model, hist


# -- evaluation -------------------------------------------------------------------


@dataclass
class MetricsReport:
    auc: float | None
    gauc: float | None
    relaimpr_vs_base: float | None
    pcoc: float | None
    pcoc_deviation: float | None
    irrelevant_rate_at_10: float | None
    slices: dict
    config_hash: str
    seed: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def _safe(fn, *a):
    try:
        return fn(*a)
    except UndefinedMetricError:
        return None


def _slice_metrics(scores, labels, users, rows) -> dict:
    if rows.size == 0:
        return {"auc": None, "gauc": None, "n": 0}
    return {"auc": _safe(auc, scores[rows], labels[rows]),
            "gauc": _safe(gauc, scores[rows], labels[rows], users[rows]), "n": int(rows.size)}


def evaluate(model: RankModel, data: Prepared, cfg: TrainConfig, base_auc: float | None = None) -> MetricsReport:
    te = data.test
    s_te = model.score_arrays(te.all())["score"] if len(te) else np.zeros(0)
    y, users = te.labels, te.cols["user"]
    full = data.test_full
    s_full = model.score_arrays(full.all())["score"] if len(full) else np.zeros(0)
    y_full, u_full = full.labels, full.cols["user"]

    cold_user = np.array([data.own_counts.get(int(u), 0) < cfg.cold_threshold for u in users], dtype=bool)
    cold_full = np.array([data.own_counts.get(int(u), 0) < cfg.cold_threshold for u in u_full], dtype=bool)
    overall_auc = _safe(auc, s_te, y)
    pc = _safe(pcoc, s_te, y)

    # rank each request's candidates; requests are (user, day, session)
    keys = [(s.user_id, s.day, s.session) for s in full.samples]
    groups: dict[tuple, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    ranked = []
    for k in sorted(groups):
        idx = np.array(groups[k])
        order = np.lexsort((full.cols["item"][idx], -s_full[idx]))
        ranked.append(full.cols["rsl"][idx][order].tolist())

    slices = {
        "exposed": _slice_metrics(s_te, y, users, np.arange(len(te))),
        "exposed_cold": _slice_metrics(s_te, y, users, np.flatnonzero(cold_user)),
        "exposed_active": _slice_metrics(s_te, y, users, np.flatnonzero(~cold_user)),
        "full": _slice_metrics(s_full, y_full, u_full, np.arange(len(full))),
        "full_cold": _slice_metrics(s_full, y_full, u_full, np.flatnonzero(cold_full)),
        "full_active": _slice_metrics(s_full, y_full, u_full, np.flatnonzero(~cold_full)),
    }
    return MetricsReport(
        auc=overall_auc,
        gauc=_safe(gauc, s_te, y, users),
        relaimpr_vs_base=(relaimpr(overall_auc, base_auc) if base_auc and overall_auc is not None else None),
        pcoc=pc,
        pcoc_deviation=None if pc is None else abs(pc - 1.0),
        irrelevant_rate_at_10=_safe(irrelevant_rate_at_10, ranked) if ranked else None,
        slices=slices,
        config_hash=cfg.digest(),
        seed=cfg.seed,
    )


# -- checkpoints -------------------------------------------------------------------


def save_model(path: str | Path, model: RankModel) -> Path:
    path = Path(path)
    checkpoint.save(path, model.state_dict())
    Path(str(path) + ".json").write_text(json.dumps(dataclasses.asdict(model.config), sort_keys=True) + "\n")
    return path


def load_model(path: str | Path) -> RankModel:
    meta = Path(str(path) + ".json")
    if not Path(path).exists() or not meta.exists():
        raise ConfigError(f"missing model checkpoint {path} or its {meta.name}")
    model = RankModel(ModelConfig(**json.loads(meta.read_text())))
    model.load_state_dict(checkpoint.load(path))
    return model


# -- orchestration ------------------------------------------------------------------

_DATA_CACHE: dict[tuple, RawData] = {}
_PREP_CACHE: dict[tuple, Prepared] = {}


def get_raw(cfg: TrainConfig) -> RawData:
    if cfg.data_dir:
        return read_data(cfg.data_dir)
    key = (cfg.seed, cfg.world_config())
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = generate_data(cfg)
    return _DATA_CACHE[key]


def get_prepared(cfg: TrainConfig) -> Prepared:
    """Raw data plus frozen-encoder features, shared by runs that only differ in training knobs."""
    key = (cfg.seed, cfg.world_config(), cfg.data_dir, cfg.encoder_path, cfg.pretrain_seed, cfg.pretrain_pairs,
           cfg.pretrain_epochs, cfg.distill, cfg.encoder_dim, cfg.pool_users, cfg.top_k, cfg.max_own)
    if key not in _PREP_CACHE:
        raw = get_raw(cfg)
        enc = get_encoder(cfg, raw.world)
        _PREP_CACHE[key] = prepare(raw, enc, cfg.replace(use_cross=True))
    return _PREP_CACHE[key].with_cross(cfg.use_cross)


def clear_caches() -> None:
    _DATA_CACHE.clear()
    _PREP_CACHE.clear()
    _ENCODER_CACHE.clear()


def run_experiment(cfg: TrainConfig, base_auc: float | None = None) -> MetricsReport:
    cfg.validate()
    data = get_prepared(cfg)
    model, _ = train_model(cfg, data)
    report = evaluate(model, data, cfg, base_auc)
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(out / "model.ckpt", model)
        report.write(out / "report.json")
    return report


ABLATIONS = {
    "full": {},
    "no_encoder": {"distill": False},
    "no_preference": {"use_preference": False, "use_cross": False},
    "no_debias": {"debias": False},
    "prectr": {"distill": False, "use_preference": False, "use_cross": False, "debias": False},
    "base": {"plain": True, "use_preference": False, "use_cross": False, "debias": False},
}


def ablate(cfg: TrainConfig, variants: Sequence[str] | None = None) -> dict:
    """Each component switched off in turn; RelaImpr against the plain baseline and against PRECTR-style all-off."""
    variants = list(variants or ABLATIONS)
    for need in ("base", "prectr"):
        if need not in variants:
            variants.append(need)
    reports = {name: run_experiment(cfg.replace(**ABLATIONS[name], output_dir="")) for name in variants}
    base, ref = reports["base"], reports["prectr"]
    rows = {}
    for name, r in reports.items():
        row = {"auc": r.auc, "gauc": r.gauc, "full_auc": r.slices["full"]["auc"], "pcoc": r.pcoc,
               "irrelevant_rate_at_10": r.irrelevant_rate_at_10}
        for ref_name, ref_r in (("base", base), ("prectr", ref)):
            for m in ("auc", "gauc"):
                a, b = getattr(r, m), getattr(ref_r, m)
                row[f"ri_{m}_vs_{ref_name}"] = (_safe(relaimpr, a, b) if a is not None and b is not None else None)
        rows[name] = row
    return {"seed": cfg.seed, "config_hash": cfg.digest(), "variants": rows}


def sweep(cfg: TrainConfig, p1_values: Sequence[float], p2_values: Sequence[float],
          out_csv: str | Path | None = None) -> list[dict]:
    """AUC over a p1 x p2 grid (cells with p1 >= p2 are skipped)."""
    rows = []
    for p1 in p1_values:
        for p2 in p2_values:
            if not p1 < p2:
                continue
            r = run_experiment(cfg.replace(p1=float(p1), p2=float(p2), output_dir=""))
            rows.append({"p1": p1, "p2": p2, "auc": r.auc, "full_auc": r.slices["full"]["auc"]})
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["p1", "p2", "auc", "full_auc"])
            w.writeheader()
            w.writerows(rows)
    return rows
