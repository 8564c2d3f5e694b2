"""Micro decoder-only transformer (pre-LN, learned positions, tied output head)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from cftrec import autodiff as ad
from cftrec.autodiff import Parameter, Tensor
from cftrec.errors import ConfigError, DataError
from cftrec.textenc import BOS, PAD


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    dropout: float = 0.05
    init_seed: int = 0
    init_std: float = 0.02
    dtype: str = "float64"

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig) -> dict[str, Parameter]:
    cfg.validate()
    rng = np.random.default_rng(cfg.init_seed)
    d, f = cfg.d_model, cfg.d_ff
    params: dict[str, Parameter] = {}

    def normal(name, *shape):
        params[name] = Parameter(rng.normal(0.0, cfg.init_std, size=shape).astype(cfg.dtype), name)

    def const(name, value, n):
        params[name] = Parameter(np.full(n, value, dtype=cfg.dtype), name)

    normal("tok_emb", cfg.vocab_size, d)
    normal("pos_emb", cfg.max_seq_len, d)
    for layer in range(cfg.n_layers):
        p = f"h{layer}."
        const(p + "ln1.g", 1.0, d)
        const(p + "ln1.b", 0.0, d)
        for proj in ("q", "k", "v", "o"):
            normal(p + f"attn.w{proj}", d, d)
            const(p + f"attn.b{proj}", 0.0, d)
        const(p + "ln2.g", 1.0, d)
        const(p + "ln2.b", 0.0, d)
        normal(p + "mlp.w1", d, f)
        const(p + "mlp.b1", 0.0, f)
        normal(p + "mlp.w2", f, d)
        const(p + "mlp.b2", 0.0, d)
    const("ln_f.g", 1.0, d)
    const("ln_f.b", 0.0, d)
    return params


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """Right-pad token lists with PAD into an int array."""
    if not seqs:
        raise DataError("empty batch")
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


class DecoderLM:
    """``forward`` gives per-position next-token logits under a causal mask.

    Keys at PAD positions are masked out of attention (a query always sees
    itself, so fully padded prefixes stay finite).
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Parameter] | None = None):
        self.cfg = cfg.validate()
        self.params = init_params(cfg) if params is None else params
        self.forward_calls = 0

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _attention_mask(self, ids: np.ndarray) -> np.ndarray:
        t = ids.shape[1]
        future = np.triu(np.ones((t, t), dtype=bool), k=1)
        pad_keys = (ids == PAD)[:, None, None, :]
        own = np.eye(t, dtype=bool)[None, None]
        return future[None, None] | (pad_keys & ~own)

    def hidden(self, ids, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Final-layer-norm hidden states, shape [B, T, d_model]."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DataError(f"expected a [batch, seq] id array, got shape {ids.shape}")
        b, t = ids.shape
        cfg, P = self.cfg, self.params
        if t > cfg.max_seq_len:
            raise DataError(f"sequence length {t} exceeds max_seq_len={cfg.max_seq_len}")
        self.forward_calls += 1
        h_dim, n_h, rate = cfg.head_dim, cfg.n_heads, cfg.dropout
        mask = self._attention_mask(ids)

        x = ad.embedding(P["tok_emb"], ids) + ad.embedding(P["pos_emb"], np.arange(t))
        x = ad.dropout(x, rate, rng, training)
        for layer in range(cfg.n_layers):
            p = f"h{layer}."
            h = ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])

            def heads(name):
                proj = h @ P[p + f"attn.w{name}"] + P[p + f"attn.b{name}"]
                return ad.transpose(ad.reshape(proj, (b, t, n_h, h_dim)), (0, 2, 1, 3))

            q, k, v = heads("q"), heads("k"), heads("v")
            scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(h_dim))
            att = ad.softmax(ad.masked_fill(scores, mask, -np.inf))
            att = ad.dropout(att, rate, rng, training)
            ctx = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (b, t, cfg.d_model))
            out = ctx @ P[p + "attn.wo"] + P[p + "attn.bo"]
            x = x + ad.dropout(out, rate, rng, training)

            h = ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            ff = ad.gelu(h @ P[p + "mlp.w1"] + P[p + "mlp.b1"]) @ P[p + "mlp.w2"] + P[p + "mlp.b2"]
            x = x + ad.dropout(ff, rate, rng, training)
        return ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"])

    def project(self, hidden: Tensor) -> Tensor:
        """Tied output head: hidden @ tok_emb^T."""
        return hidden @ ad.transpose(self.params["tok_emb"], (1, 0))

    def forward(self, ids, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.project(self.hidden(ids, training, rng))

    def logits_at(self, ids, rows, cols, training: bool = False, rng=None) -> Tensor:
        """Logits only at the (row, col) positions, shape [M, vocab]."""
        return self.project(ad.take_positions(self.hidden(ids, training, rng), rows, cols))

    def encode_items(self, names: Sequence[Sequence[int]]) -> np.ndarray:
        """Mean final hidden state over each name's tokens, fed as BOS + name."""
        if not len(names):
            return np.zeros((0, self.cfg.d_model))
        for toks in names:
            if len(toks) == 0:
                raise DataError("cannot encode an empty item name")
        out = np.zeros((len(names), self.cfg.d_model))
        by_len: dict[int, list[int]] = {}
        for i, toks in enumerate(names):
            by_len.setdefault(len(toks), []).append(i)
        with ad.no_grad():
            for n, idx in sorted(by_len.items()):
                ids = np.array([[BOS, *names[i]] for i in idx], dtype=np.int64)
                h = self.hidden(ids).data
                out[idx] = h[:, 1:, :].mean(axis=1)
        return out

    def encode_item(self, tokens: Sequence[int]) -> np.ndarray:
        return self.encode_items([list(tokens)])[0]
