"""AdamW training loop with validation early stopping and binary checkpoints.

Checkpoint layout (all little-endian)::

    b"CFTCKPT1" | u32 version | u32 header length | JSON header | f64 payload | u32 CRC32(payload)

The header lists every tensor with its shape and byte offset in the payload.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from cftrec import autodiff as ad
from cftrec.corpus import Catalog, InstructionPair, InteractionSample, render_instruction
from cftrec.errors import CheckpointError, ConfigError, DataError, NumericError
from cftrec.model import DecoderLM, ModelConfig
from cftrec.runtime import tune_allocator
from cftrec.objective import CftConfig, DualBatch, combined_loss, causal_loss, normal_loss, pairs_to_dual_batch
from cftrec.textenc import Vocab

MAGIC = b"CFTCKPT1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 10
    patience_epochs: int = 1
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    cft: CftConfig = field(default_factory=CftConfig)

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if self.patience_epochs < 1:
            raise ConfigError("patience_epochs must be at least 1")
        if self.weight_decay < 0 or not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigError("invalid AdamW hyper-parameters")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["cft"] = CftConfig(**d["cft"])
        return cls(**d)


class AdamW:
    """Adam with bias correction and decoupled weight decay (Loshchilov & Hutter)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, ad.Parameter]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params: dict[str, ad.Parameter], opt: AdamW) -> None:
    opt.step(params)


@dataclass
class Checkpoint:
    model_cfg: dict
    train_cfg: dict
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    cursor: dict
    rng: dict
    vocab: list[str]
    extra: dict = field(default_factory=dict)

    def model(self) -> DecoderLM:
        cfg = ModelConfig(**self.model_cfg)
        params = {name: ad.Parameter(arr.astype(cfg.dtype), name) for name, arr in self.params.items()}
        return DecoderLM(cfg, params)


def _pack(ckpt: Checkpoint) -> bytes:
    tensors = []
    for prefix, group in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, arr in group.items():
            tensors.append((f"{prefix}/{name}", np.ascontiguousarray(arr, dtype="<f8")))
    directory, chunks, offset = [], [], 0
    for name, arr in tensors:
        raw = arr.tobytes()
        directory.append({"name": name, "dtype": "f64", "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "model_cfg": ckpt.model_cfg,
        "train_cfg": ckpt.train_cfg,
        "step": ckpt.step,
        "cursor": ckpt.cursor,
        "rng": ckpt.rng,
        "vocab": ckpt.vocab,
        "extra": ckpt.extra,
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join(
        [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes, payload, struct.pack("<I", zlib.crc32(payload))]
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_pack(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    if len(blob) < 16 + hlen + 4:
        raise CheckpointError("truncated checkpoint")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = blob[16 + hlen : -4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint payload fails CRC check (truncated or corrupt)")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * n > len(payload):
            raise CheckpointError(f"tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(entry["shape"])
        prefix, name = entry["name"].split("/", 1)
        groups[prefix][name] = arr
    return Checkpoint(
        model_cfg=header["model_cfg"],
        train_cfg=header["train_cfg"],
        params=groups["param"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        step=header["step"],
        cursor=header["cursor"],
        rng=header["rng"],
        vocab=header["vocab"],
        extra=header["extra"],
    )


@dataclass
class EpochLog:
    epoch: int
    train_Ln: float
    train_Lc: float
    train_L: float
    valid_L: float
    seconds: float


def write_epoch_log(rows: Sequence[EpochLog], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_Ln", "train_Lc", "train_L", "valid_L", "seconds"])
        for r in rows:
            w.writerow([r.epoch, repr(r.train_Ln), repr(r.train_Lc), repr(r.train_L), repr(r.valid_L), f"{r.seconds:.3f}"])
    tmp.replace(path)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLog]
    best_epoch: int
    model: DecoderLM


class Trainer:
    """Runs the dual-branch update loop for one model.

    Randomness is stateless: the epoch permutation comes from
    ``(seed, epoch)`` and each branch's dropout stream from
    ``(seed, step, branch)``, so a checkpoint only needs the cursor to resume.
    """

    def __init__(self, model: DecoderLM, catalog: Catalog, vocab: Vocab, cfg: TrainConfig):
        tune_allocator()
        self.model = model
        self.catalog = catalog
        self.vocab = vocab
        self.cfg = cfg.validate()
        self.opt = AdamW(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
        self.step = 0
        self.epoch = 0
        self.batch_in_epoch = 0
        self._pairs: dict[InteractionSample, InstructionPair] = {}

    # data

    def _pair(self, s: InteractionSample) -> InstructionPair:
        pair = self._pairs.get(s)
        if pair is None:
            pair = self._pairs[s] = render_instruction(s, self.catalog, self.vocab)
        return pair

    def dual_batch(self, samples: Sequence[InteractionSample]) -> DualBatch:
        return pairs_to_dual_batch([self._pair(s) for s in samples], self.cfg.cft.effective_beta)

    def epoch_order(self, n: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, 10, epoch]).permutation(n)

    def n_batches(self, n: int) -> int:
        return -(-n // self.cfg.batch_size)

    # one update

    def losses(self, batch: DualBatch, training: bool, rngs=(None, None)):
        cft = self.cfg.cft
        model = self.model
        fact = model.logits_at(batch.fact_ids, batch.rows, batch.fact_cols, training, rngs[0])
        cf = model.logits_at(batch.cf_ids, batch.rows, batch.cf_cols, training, rngs[1])
        l_n = normal_loss(fact, batch.targets, batch.weights if cft.weight_normal else None)
        l_c = causal_loss(fact, cf, batch.targets, batch.weights, cft.stop_counterfactual_grad)
        return l_n, l_c, combined_loss(l_n, l_c, cft.lam)

    def train_step(self, train: Sequence[InteractionSample]) -> tuple[float, float, float]:
        order = self.epoch_order(len(train), self.epoch)
        bs = self.cfg.batch_size
        idx = order[self.batch_in_epoch * bs : (self.batch_in_epoch + 1) * bs]
        batch = self.dual_batch([train[i] for i in idx.tolist()])
        rngs = tuple(np.random.default_rng([self.cfg.seed, 11, self.step, branch]) for branch in (0, 1))
        self.model.zero_grad()
        l_n, l_c, total = self.losses(batch, True, rngs)
        value = total.item()
        if not math.isfinite(value):
            raise NumericError(
                f"non-finite loss at step {self.step} (epoch {self.epoch + 1}) with lambda={self.cfg.cft.lam}"
            )
        ad.backward(total)
        self.opt.step(self.model.params)
        self.step += 1
        self.batch_in_epoch += 1
        if self.batch_in_epoch >= self.n_batches(len(train)):
            self.batch_in_epoch = 0
            self.epoch += 1
        return l_n.item(), l_c.item(), value

    def evaluate(self, samples: Sequence[InteractionSample]) -> tuple[float, float, float]:
        """Dataset-level (L_n, L_c, L) in eval mode; touches no parameters or RNG."""
        if not samples:
            raise DataError("evaluation set is empty")
        cft = self.cfg.cft
        sums = np.zeros(4)
        bs = self.cfg.batch_size
        with ad.no_grad():
            for start in range(0, len(samples), bs):
                batch = self.dual_batch(samples[start : start + bs])
                fact = self.model.logits_at(batch.fact_ids, batch.rows, batch.fact_cols)
                cf = self.model.logits_at(batch.cf_ids, batch.rows, batch.cf_cols)
                wn = batch.weights if cft.weight_normal else None
                tn, wsn = ad.cross_entropy(fact, batch.targets, wn)
                tc, wsc = ad.cross_entropy(ad.sub(fact, cf), batch.targets, batch.weights)
                sums += [tn.item(), wsn, tc.item(), wsc]
        l_n = sums[0] / sums[1]
        l_c = sums[2] / sums[3]
        return l_n, l_c, l_n + cft.lam * l_c

    # checkpoints

    def checkpoint(self, extra: dict | None = None) -> Checkpoint:
        return Checkpoint(
            model_cfg=self.model.cfg.to_dict(),
            train_cfg=self.cfg.to_dict(),
            params={k: p.data.copy() for k, p in self.model.params.items()},
            adam_m={k: a.copy() for k, a in self.opt.m.items()},
            adam_v={k: a.copy() for k, a in self.opt.v.items()},
            step=self.step,
            cursor={"epoch": self.epoch, "batch_in_epoch": self.batch_in_epoch},
            rng={"seed": self.cfg.seed, "shuffle_stream": [self.cfg.seed, 10], "dropout_stream": [self.cfg.seed, 11]},
            vocab=list(self.vocab.id_to_token),
            extra=dict(extra or {}),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, catalog: Catalog, train_cfg: TrainConfig | None = None) -> "Trainer":
        cfg = train_cfg or TrainConfig.from_dict(ckpt.train_cfg)
        trainer = cls(ckpt.model(), catalog, Vocab(tuple(ckpt.vocab)), cfg)
        dt = trainer.model.cfg.dtype
        trainer.opt.m = {k: a.astype(dt) for k, a in ckpt.adam_m.items()}
        trainer.opt.v = {k: a.astype(dt) for k, a in ckpt.adam_v.items()}
        trainer.opt.t = ckpt.step
        trainer.step = ckpt.step
        trainer.epoch = ckpt.cursor["epoch"]
        trainer.batch_in_epoch = ckpt.cursor["batch_in_epoch"]
        return trainer

    # full run

    def fit(self, train: Sequence[InteractionSample], valid: Sequence[InteractionSample], log=None) -> TrainResult:
        if not train:
            raise DataError("training set is empty")
        if not valid:
            raise DataError("validation set is empty")
        train, valid = list(train), list(valid)
        best_loss, best_epoch, best_ckpt, bad = math.inf, 0, None, 0
        rows: list[EpochLog] = []
        while self.epoch < self.cfg.max_epochs:
            t0 = time.perf_counter()
            epoch = self.epoch
            acc = np.zeros(3)
            n = 0
            while self.epoch == epoch:
                acc += self.train_step(train)
                n += 1
            valid_l = self.evaluate(valid)[2]
            if not math.isfinite(valid_l):
                raise NumericError(f"non-finite validation loss after epoch {epoch + 1} with lambda={self.cfg.cft.lam}")
            ln, lc, lt = acc / n
            rows.append(EpochLog(epoch + 1, ln, lc, lt, valid_l, time.perf_counter() - t0))
            if log is not None:
                log(rows[-1])
            if valid_l < best_loss:
                best_loss, best_epoch, bad = valid_l, epoch + 1, 0
                best_ckpt = self.checkpoint({"best_epoch": best_epoch, "valid_L": best_loss})
            else:
                bad += 1
                if bad >= self.cfg.patience_epochs:
                    break
        return TrainResult(checkpoint=best_ckpt, log=rows, best_epoch=best_epoch, model=best_ckpt.model())


def train(
    data,
    catalog: Catalog,
    vocab: Vocab,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    log=None,
) -> TrainResult:
    """Initialise a model and train it on ``data.train`` with early stopping on ``data.valid``."""
    model = DecoderLM(model_cfg)
    return Trainer(model, catalog, vocab, train_cfg).fit(data.train, data.valid, log=log)


def with_cft(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, cft=replace(cfg.cft, **changes))
