"""scikit-learn style front end: ``CFTRecommender().fit(train, catalog=...).predict(test)``."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from cftrec.corpus import Catalog, InteractionSample, corpus_vocab, render_instruction
from cftrec.decoding import GroundedList, ItemIndex, beam_search_many, ground, interleave, l2_distances
from cftrec.errors import ConfigError, DataError
from cftrec.evalkit import hit_rate
from cftrec.model import DecoderLM, ModelConfig
from cftrec.objective import CftConfig
from cftrec.textenc import Vocab, encode
from cftrec.trainer import Checkpoint, TrainConfig, Trainer


def check_samples(X, catalog: Catalog) -> list[InteractionSample]:
    """Coerce ``X`` to a list of samples whose item ids exist in ``catalog``."""
    if isinstance(X, InteractionSample):
        X = [X]
    try:
        samples = list(X)
    except TypeError:
        raise DataError(f"expected a sequence of InteractionSample, got {type(X).__name__}") from None
    if not samples:
        raise DataError("no samples given")
    n = len(catalog)
    for s in samples:
        if not isinstance(s, InteractionSample):
            raise DataError(f"expected InteractionSample, got {type(s).__name__}")
        if not all(0 <= i < n for i in s.history) or not 0 <= s.target < n:
            raise DataError(f"sample of user {s.user_id} references an item outside the catalog")
    return samples


class CFTRecommender(BaseEstimator):
    """Generative next-item recommender fine-tuned with the counterfactual objective.

    ``lam=0`` with ``beta_prime=inf`` and ``weight_normal=False`` is plain
    next-item fine-tuning. Recommendations come from beam search (five
    generated names) grounded to real items by L2 distance.
    """

    def __init__(
        self,
        lam: float = 0.05,
        beta_prime: float | None = 2.0,
        beta: float | None = None,
        weight_normal: bool = True,
        stop_counterfactual_grad: bool = False,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        d_ff: int = 256,
        dropout: float = 0.05,
        learning_rate: float = 1e-4,
        batch_size: int = 64,
        max_epochs: int = 10,
        patience_epochs: int = 1,
        weight_decay: float = 0.01,
        beam_width: int = 10,
        length_norm: bool = True,
        n_recommend: int = 20,
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.lam = lam
        self.beta_prime = beta_prime
        self.beta = beta
        self.weight_normal = weight_normal
        self.stop_counterfactual_grad = stop_counterfactual_grad
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience_epochs = patience_epochs
        self.weight_decay = weight_decay
        self.beam_width = beam_width
        self.length_norm = length_norm
        self.n_recommend = n_recommend
        self.random_state = random_state
        self.verbose = verbose

    # configuration

    def cft_config(self) -> CftConfig:
        if self.beta is not None:
            return CftConfig(self.lam, beta=self.beta, beta_prime=None, weight_normal=self.weight_normal,
                             stop_counterfactual_grad=self.stop_counterfactual_grad)
        return CftConfig(self.lam, beta_prime=self.beta_prime, weight_normal=self.weight_normal,
                         stop_counterfactual_grad=self.stop_counterfactual_grad)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience_epochs=self.patience_epochs,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            cft=self.cft_config(),
        )

    def model_config(self, vocab_size: int, max_seq_len: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            d_ff=self.d_ff, max_seq_len=max_seq_len, dropout=self.dropout, init_seed=self.random_state,
        )

    # fitting

    def fit(self, X, y=None, *, catalog: Catalog, valid=None):
        """Train on samples ``X`` with early stopping on ``valid`` (required)."""
        train = check_samples(X, catalog)
        if valid is None:
            raise DataError("fit needs a validation split for early stopping (pass valid=...)")
        valid = check_samples(valid, catalog)
        vocab = corpus_vocab(catalog)
        probe = render_instruction(train[0], catalog, vocab)
        max_len = len(probe.x_h) + len(probe.y)
        trainer = Trainer(DecoderLM(self.model_config(len(vocab), max_len)), catalog, vocab, self.train_config())
        log = (lambda row: print(row)) if self.verbose else None
        result = trainer.fit(train, valid, log=log)
        self._set_fitted(result.model, catalog, vocab, result.checkpoint)
        self.history_ = result.log
        self.best_epoch_ = result.best_epoch
        self.n_forward_ = trainer.model.forward_calls
        return self

    def _set_fitted(self, model: DecoderLM, catalog: Catalog, vocab: Vocab, ckpt: Checkpoint | None) -> None:
        self.catalog_ = catalog
        self.vocab_ = vocab
        self.model_ = model
        self.checkpoint_ = ckpt
        self.index_ = ItemIndex(model, [encode(vocab, name) for name in catalog.names])

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, catalog: Catalog, **params) -> "CFTRecommender":
        est = cls(**params)
        vocab = Vocab(tuple(ckpt.vocab))
        if vocab != corpus_vocab(catalog):
            raise DataError("checkpoint vocabulary does not match the catalog")
        est._set_fitted(ckpt.model(), catalog, vocab, ckpt)
        return est

    # inference

    def _prompts(self, samples, with_history: bool) -> list[tuple[int, ...]]:
        pairs = [render_instruction(s, self.catalog_, self.vocab_) for s in samples]
        return [p.x_h if with_history else p.x_0 for p in pairs]

    def generate(self, X, with_history: bool = True):
        """Five beam hypotheses per sample."""
        check_is_fitted(self, "model_")
        samples = check_samples(X, self.catalog_)
        n_tok = len(self.index_.names[0])
        return beam_search_many(
            self.model_, self._prompts(samples, with_history), width=self.beam_width,
            max_out_len=n_tok, length_norm=self.length_norm,
        )

    def recommend(self, X, with_history: bool = True, k: int | None = None) -> list[GroundedList]:
        check_is_fitted(self, "model_")
        k = self.n_recommend if k is None else k
        if k > len(self.catalog_):
            raise ConfigError(f"cannot recommend {k} items from a smaller catalog")
        out = []
        for hyps in self.generate(X, with_history):
            dist = l2_distances(self.index_.encode([h.tokens for h in hyps]), self.index_.reps)
            out.append(interleave(dist, k))
        return out

    def predict(self, X, with_history: bool = True) -> np.ndarray:
        """Ranked item ids, shape [n_samples, n_recommend]."""
        return np.array([g.items for g in self.recommend(X, with_history)], dtype=np.int64)

    def score(self, X, y=None) -> float:
        """HR@10 of with-history recommendations."""
        samples = check_samples(X, self.catalog_)
        return hit_rate(self.predict(samples).tolist(), [s.target for s in samples], 10)

    def ground(self, hyps: Sequence, k: int = 10) -> GroundedList:
        check_is_fitted(self, "model_")
        return ground(hyps, self.index_, k)
