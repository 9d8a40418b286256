"""Exposure-bias correction with synthetic hard negatives.

Clicked, strongly relevant samples are cloned with a downgraded relevance
label and a noised query embedding. A pairwise loss asks the model to score
the original above its clone by a margin, and switches itself off once the
batch's positive scores are already high enough.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .synth import SearchSample


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DebiasConfig:
    p1: float = 0.2
    p2: float = 0.6
    margin: float = 0.075
    threshold: float = 0.08
    w: float = 1.0
    sigma: float = 1.0
    noise_side: str = "query"  # or "item"
    enabled: bool = True
    # naive: plain pairwise loss with no margin and no truncation
    naive: bool = False

    def validate(self) -> None:
        if not 0.0 < self.p1 < self.p2 < 1.0:
            raise ConfigError(f"need 0 < p1 < p2 < 1, got p1={self.p1}, p2={self.p2}")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.w < 0:
            raise ConfigError("w must be non-negative")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.noise_side not in ("query", "item"):
            raise ConfigError(f"noise_side must be 'query' or 'item', got {self.noise_side!r}")


def _check_probs(p1: float, p2: float) -> None:
    if not (0.0 <= p1 <= p2 <= 1.0):
        raise ConfigError(f"need 0 <= p1 <= p2 <= 1, got p1={p1}, p2={p2}")


def fake_rsl_from_uniform(u, p1: float, p2: float):
    """1 below p1, 2 in [p1, p2), 3 from p2 on; vectorised over u."""
    _check_probs(p1, p2)
    u = np.asarray(u, dtype=float)
    out = np.where(u < p1, 1, np.where(u < p2, 2, 3))
    return int(out) if out.ndim == 0 else out


def sample_fake_rsl(p1: float, p2: float, rng: np.random.Generator, size=None):
    if p1 >= p2:
        # the degenerate p1 == p2 case is allowed only through fake_rsl_from_uniform
        raise ConfigError(f"p1 must be below p2, got p1={p1}, p2={p2}")
    return fake_rsl_from_uniform(rng.random(size), p1, p2)


def inject_noise(emb, rng: np.random.Generator, sigma: float = 1.0) -> np.ndarray:
    """emb + N(0, sigma^2) elementwise."""
    emb = np.asarray(emb, dtype=float)
    return emb + sigma * rng.standard_normal(emb.shape)


def qualifies(s: SearchSample) -> bool:
    return s.click == 1 and s.rsl == 4


@dataclass(frozen=True)
class DebiasPair:
    positive: SearchSample
    negative: SearchSample
    fake_rsl: int
    noise: np.ndarray  # added to the positive's query-side embedding

    def __post_init__(self):
        if not qualifies(self.positive):
            raise ValueError("positive must be clicked with rsl 4")
        if self.fake_rsl not in (1, 2, 3):
            raise ValueError("fake_rsl must lie in {1, 2, 3}")


def make_negative(positive: SearchSample, config: DebiasConfig, rng: np.random.Generator,
                  dim: int = 0) -> DebiasPair | None:
    """Clone with a downgraded relevance label; None for samples that do not qualify.

    Only the rsl field changes on the sample record. The noise vector for the
    query-side embedding travels with the pair because embeddings are not
    stored on samples.
    """
    if not qualifies(positive):
        return None
    fake = sample_fake_rsl(config.p1, config.p2, rng)
    noise = config.sigma * rng.standard_normal(dim)
    neg = dataclasses.replace(positive, rsl=fake, click=0)
    return DebiasPair(positive, neg, fake, noise)


def make_pairs(samples: Sequence[SearchSample], config: DebiasConfig, rng: np.random.Generator,
               dim: int = 0) -> list[DebiasPair]:
    out = []
    for s in samples:
        p = make_negative(s, config, rng, dim)
        if p is not None:
            out.append(p)
    return out


# -- losses ----------------------------------------------------------------


def pairwise_loss_naive(f_pos, f_neg) -> Tensor:
    """sum log(1 + exp(-(f+ - f-)))."""
    f_pos, f_neg = ag.as_tensor(f_pos), ag.as_tensor(f_neg)
    if f_pos.data.size == 0:
        return Tensor(0.0)
    return ag.tsum(ag.softplus(f_neg - f_pos))


def batch_weight(f_pos, threshold: float, w: float = 1.0) -> float:
    """Truncation weight: w while the mean positive score is below threshold, else 0."""
    m = float(np.mean(ag.as_tensor(f_pos).data))
    return 0.0 if m >= threshold else w


def debias_loss(f_pos, f_neg, config: DebiasConfig) -> Tensor:
    """w(batch) * sum log(1 + exp(max(0, margin - (f+ - f-)))).

    The naive variant drops the margin and the truncation.
    """
    f_pos, f_neg = ag.as_tensor(f_pos), ag.as_tensor(f_neg)
    if f_pos.data.size == 0 or not config.enabled:
        return Tensor(0.0)
    if config.naive:
        return config.w * pairwise_loss_naive(f_pos, f_neg)
    weight = batch_weight(f_pos, config.threshold, config.w)
    if weight == 0.0:
        # detached constant: value and every gradient are exactly zero
        return Tensor(0.0)
    gap = f_pos - f_neg
    return weight * ag.tsum(ag.softplus(ag.relu(config.margin - gap)))


def debias_loss_scalar(gaps: Sequence[float], mean_pos: float, margin: float, threshold: float,
                       w: float = 1.0) -> float:
    """Plain-float reference of the truncated margin loss."""
    if mean_pos >= threshold or not len(gaps):
        return 0.0
    return w * sum(math.log1p(math.exp(max(0.0, margin - g))) for g in gaps)
