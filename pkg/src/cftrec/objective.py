"""Counterfactual fine-tuning objective.

The causal effect of the history on the prediction of target token ``t`` is
taken in logit space,

    z_t = f(x_h, y_<t) - f(x_0, y_<t),

where ``x_0`` is the prompt with the history replaced by ``None``. The causal
loss is a position-weighted cross entropy of ``softmax(z_t)`` against
``y_t``, normalised by the sum of the weights; the training loss is
``L_n + lambda * L_c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from cftrec import autodiff as ad
from cftrec.autodiff import Tensor
from cftrec.corpus import Catalog, InstructionPair, InteractionSample, render_instruction
from cftrec.errors import ConfigError, DataError
from cftrec.model import pad_batch
from cftrec.textenc import Vocab


@dataclass(frozen=True)
class CftConfig:
    """``beta`` and ``beta_prime`` are alternatives; ``beta = 1 - 1/beta_prime``.

    ``beta_prime = inf`` gives ``beta = 1`` (no decay).
    """

    lam: float = 0.05
    beta: float | None = None
    beta_prime: float | None = 2.0
    weight_normal: bool = True
    stop_counterfactual_grad: bool = False

    def __post_init__(self):
        if (self.beta is None) == (self.beta_prime is None):
            raise ConfigError("supply exactly one of beta and beta_prime")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ConfigError(f"lambda must be a finite value >= 0, got {self.lam}")
        if self.beta_prime is not None and not self.beta_prime > 1:
            raise ConfigError(f"beta_prime must exceed 1, got {self.beta_prime}")
        if self.beta is not None and not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")

    @property
    def effective_beta(self) -> float:
        if self.beta is not None:
            return float(self.beta)
        return 1.0 - 1.0 / self.beta_prime


def token_weights(y_len: int, beta: float) -> np.ndarray:
    """Linear decay from 1 at the first target token to ``beta`` at the last."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    if y_len < 1:
        raise ConfigError("y_len must be at least 1")
    if y_len == 1:
        return np.ones(1)
    t = np.arange(y_len, dtype=np.float64)
    return 1.0 - (1.0 - beta) * t / (y_len - 1)


@dataclass
class DualBatch:
    """Aligned factual/counterfactual rows with their target positions.

    ``fact_cols[k]`` / ``cf_cols[k]`` index the position whose logits predict
    ``targets[k]`` in row ``rows[k]`` of the respective branch.
    """

    fact_ids: np.ndarray
    cf_ids: np.ndarray
    rows: np.ndarray
    fact_cols: np.ndarray
    cf_cols: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    token_pos: np.ndarray

    def __len__(self) -> int:
        return self.fact_ids.shape[0]

    @property
    def n_targets(self) -> int:
        return int(self.targets.shape[0])

    def fact_mask(self) -> np.ndarray:
        m = np.zeros(self.fact_ids.shape, dtype=bool)
        m[self.rows, self.fact_cols] = True
        return m

    def cf_mask(self) -> np.ndarray:
        m = np.zeros(self.cf_ids.shape, dtype=bool)
        m[self.rows, self.cf_cols] = True
        return m


def build_dual_batch(
    samples: Sequence[InteractionSample], catalog: Catalog, vocab: Vocab, beta: float = 1.0
) -> DualBatch:
    """Teacher-forced rows ``x_h + y`` and ``x_0 + y`` sharing the same y prefix."""
    if not samples:
        raise DataError("cannot build a batch from zero samples")
    return pairs_to_dual_batch([render_instruction(s, catalog, vocab) for s in samples], beta)


def pairs_to_dual_batch(pairs: Sequence[InstructionPair], beta: float = 1.0) -> DualBatch:
    if not pairs:
        raise DataError("cannot build a batch from zero samples")
    fact, cf = [], []
    rows, fcols, ccols, targets, weights, tpos = [], [], [], [], [], []
    for r, pair in enumerate(pairs):
        y = list(pair.y)
        # the last target token is never fed back as input
        fact.append(list(pair.x_h) + y[:-1])
        cf.append(list(pair.x_0) + y[:-1])
        w = token_weights(len(y), beta)
        for t, tok in enumerate(y):
            rows.append(r)
            fcols.append(pair.boundary_h - 1 + t)
            ccols.append(pair.boundary_0 - 1 + t)
            targets.append(tok)
            weights.append(w[t])
            tpos.append(t)
    as_int = lambda a: np.asarray(a, dtype=np.int64)  # noqa: E731
    return DualBatch(
        fact_ids=pad_batch(fact),
        cf_ids=pad_batch(cf),
        rows=as_int(rows),
        fact_cols=as_int(fcols),
        cf_cols=as_int(ccols),
        targets=as_int(targets),
        weights=np.asarray(weights, dtype=np.float64),
        token_pos=as_int(tpos),
    )


def normal_loss(fact_logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean token cross entropy of the factual logits ([M, V]).

    ``weights=None`` gives the plain mean.
    """
    targets = np.asarray(targets)
    if targets.size == 0:
        raise DataError("normal_loss over an empty target mask")
    total, wsum = ad.cross_entropy(fact_logits, targets, weights)
    if not wsum > 0:
        raise DataError("normal_loss weights sum to zero")
    return ad.scale(total, 1.0 / wsum)


def causal_loss(fact_logits: Tensor, cf_logits: Tensor, targets, weights, stop_counterfactual_grad: bool = False) -> Tensor:
    """Omega-normalised weighted cross entropy of softmax(factual - counterfactual)."""
    fact_logits, cf_logits = ad.as_tensor(fact_logits), ad.as_tensor(cf_logits)
    if fact_logits.shape != cf_logits.shape:
        raise ValueError(f"causal_loss: logit shapes differ, {fact_logits.shape} vs {cf_logits.shape}")
    if stop_counterfactual_grad:
        cf_logits = cf_logits.detach()
    effect = ad.sub(fact_logits, cf_logits)
    total, omega = ad.cross_entropy(effect, targets, weights)
    if not omega > 0:
        raise DataError("causal_loss weights sum to zero")
    return ad.scale(total, 1.0 / omega)


def combined_loss(l_n, l_c, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    l_n, l_c = ad.as_tensor(l_n), ad.as_tensor(l_c)
    return ad.add(l_n, ad.scale(l_c, lam))
