"""Synthetic catalog and interaction streams with a tunable history effect.

The next item of a user's stream is drawn from a two-part mixture::

    P(i | last) = eta * T[cat(last), cat(i)] / |cat(i)|  +  (1 - eta) * prior(i)

``T`` is a row-stochastic category transition matrix and ``prior`` is a
popularity prior that ignores the history: Zipf over a seeded ranking of the
categories, times Zipf over the item serial inside the category. At
``eta = 0`` the target is independent of the history; as ``eta`` grows, the
last history item carries more of the signal.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from cftrec.errors import ConfigError, DataError
from cftrec.textenc import BOS, NONE, SEP, Vocab, build_vocab, encode

TEMPLATE = "user history : {history} . recommend :"
HISTORY_SLOT = "{history}"
DATASET_FORMAT = 1


@dataclass(frozen=True)
class GenConfig:
    n_users: int = 500
    n_items: int = 300
    n_categories: int = 10
    tokens_per_item: int = 3
    history_len: int = 4
    stream_len: int = 14
    eta: float = 0.9
    popularity_skew: float = 1.0
    seed: int = 0

    def validate(self) -> "GenConfig":
        for name in ("n_users", "n_items", "n_categories", "tokens_per_item", "history_len", "stream_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.stream_len - self.history_len < 6:
            # fewer windows per user would round the valid and test shares to zero
            raise ConfigError("stream_len must exceed history_len by at least 6")
        if self.n_items < self.n_categories:
            raise ConfigError("n_items must be at least n_categories")
        if self.tokens_per_item < 2:
            raise ConfigError("tokens_per_item must be at least 2")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if not self.popularity_skew > 0:
            raise ConfigError("popularity_skew must be positive")
        return self


@dataclass
class ItemRecord:
    item_id: int
    name: str
    category: int
    train_popularity: int = 0


@dataclass
class Catalog:
    items: list[ItemRecord]
    n_categories: int
    seed: int = 0

    def __post_init__(self):
        for pos, item in enumerate(self.items):
            if item.item_id != pos:
                raise DataError(f"item at position {pos} has id {item.item_id}")
        names = [item.name for item in self.items]
        if len(set(names)) != len(names):
            raise DataError("item names must be unique")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def names(self) -> list[str]:
        return [item.name for item in self.items]

    @property
    def categories(self) -> np.ndarray:
        return np.array([item.category for item in self.items], dtype=np.int64)

    def by_name(self) -> dict[str, int]:
        return {item.name: item.item_id for item in self.items}


@dataclass(frozen=True)
class InteractionSample:
    user_id: int
    history: tuple[int, ...]
    target: int
    order_index: int


@dataclass
class SplitDataset:
    train: list[InteractionSample]
    valid: list[InteractionSample]
    test: list[InteractionSample]
    transition: np.ndarray | None = field(default=None, repr=False)

    def all_samples(self) -> list[InteractionSample]:
        return self.train + self.valid + self.test


@dataclass(frozen=True)
class InstructionPair:
    """Factual and counterfactual prompts for one sample, plus the target tokens."""

    x_h: tuple[int, ...]
    x_0: tuple[int, ...]
    y: tuple[int, ...]
    history_span: tuple[int, int]

    @property
    def boundary_h(self) -> int:
        return len(self.x_h)

    @property
    def boundary_0(self) -> int:
        return len(self.x_0)


def _serial_words(serial: int, n_digits: int, base: int) -> list[str]:
    digits = []
    for _ in range(n_digits):
        serial, d = divmod(serial, base)
        digits.append(d)
    return [f"{chr(ord('p') + pos)}{d}" for pos, d in enumerate(reversed(digits))]


def generate_catalog(cfg: GenConfig) -> Catalog:
    """Item names look like ``cat3 p1 q4``: a category word then serial digits."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    cats = rng.integers(0, cfg.n_categories, size=cfg.n_items)
    for _ in range(1000):
        if len(np.unique(cats)) == cfg.n_categories:
            break
        cats = rng.integers(0, cfg.n_categories, size=cfg.n_items)
    else:
        # uniform draws keep leaving a category empty; fall back to a balanced assignment
        cats = rng.permutation(np.arange(cfg.n_items) % cfg.n_categories)

    counts = np.bincount(cats, minlength=cfg.n_categories)
    n_digits = cfg.tokens_per_item - 1
    base = max(2, math.ceil(int(counts.max()) ** (1.0 / n_digits) - 1e-9))
    while base**n_digits < counts.max():
        base += 1

    next_serial = [0] * cfg.n_categories
    items = []
    for item_id, c in enumerate(cats.tolist()):
        serial = next_serial[c]
        next_serial[c] += 1
        name = " ".join([f"cat{c}"] + _serial_words(serial, n_digits, base))
        items.append(ItemRecord(item_id=item_id, name=name, category=c))
    return Catalog(items=items, n_categories=cfg.n_categories, seed=cfg.seed)


def transition_matrix(cfg: GenConfig) -> np.ndarray:
    """Row-stochastic softmax of standard normals at temperature 0.5."""
    rng = np.random.default_rng([cfg.seed, 1])
    z = rng.standard_normal((cfg.n_categories, cfg.n_categories)) / 0.5
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def popularity_prior(catalog: Catalog, cfg: GenConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 2])
    cat_rank = rng.permutation(catalog.n_categories)
    cat_mass = (cat_rank + 1.0) ** -cfg.popularity_skew
    cat_mass /= cat_mass.sum()

    cats = catalog.categories
    serial = np.zeros(len(catalog), dtype=np.int64)
    seen = np.zeros(catalog.n_categories, dtype=np.int64)
    for i, c in enumerate(cats):
        serial[i] = seen[c]
        seen[c] += 1
    within = (serial + 1.0) ** -cfg.popularity_skew
    within_total = np.bincount(cats, weights=within, minlength=catalog.n_categories)
    return cat_mass[cats] * within / within_total[cats]


def next_item_law(catalog: Catalog, cfg: GenConfig, transition: np.ndarray) -> np.ndarray:
    """Rows indexed by the last item's category; each row is a distribution over items."""
    cats = catalog.categories
    counts = np.bincount(cats, minlength=catalog.n_categories).astype(np.float64)
    history_part = transition[:, cats] / counts[cats][None, :]
    prior = popularity_prior(catalog, cfg)
    law = cfg.eta * history_part + (1.0 - cfg.eta) * prior[None, :]
    return law / law.sum(axis=1, keepdims=True)


def chronological_split(samples: Sequence[InteractionSample]) -> tuple[list, list, list]:
    """Per user, the latest tenth goes to test and the tenth before it to valid."""
    by_user: dict[int, list[InteractionSample]] = {}
    for s in samples:
        by_user.setdefault(s.user_id, []).append(s)
    train, valid, test = [], [], []
    for user in sorted(by_user):
        rows = sorted(by_user[user], key=lambda s: s.order_index)
        n = len(rows)
        n_test = int(round(0.1 * n))
        n_valid = int(round(0.1 * n))
        n_train = n - n_valid - n_test
        train.extend(rows[:n_train])
        valid.extend(rows[n_train : n_train + n_valid])
        test.extend(rows[n_train + n_valid :])
    return train, valid, test


def generate_interactions(
    catalog: Catalog, cfg: GenConfig, transition: np.ndarray | None = None
) -> SplitDataset:
    cfg.validate()
    if len(catalog) != cfg.n_items:
        raise ConfigError("catalog was not generated with this configuration")
    if transition is None:
        transition = transition_matrix(cfg)
    transition = np.asarray(transition, dtype=np.float64)
    cdf = np.cumsum(next_item_law(catalog, cfg, transition), axis=1)
    prior_cdf = np.cumsum(popularity_prior(catalog, cfg))
    cats = catalog.categories
    last = len(catalog) - 1

    samples = []
    for user in range(cfg.n_users):
        rng = np.random.default_rng([cfg.seed, 3, user])
        u = rng.random(cfg.stream_len)
        stream = [min(int(np.searchsorted(prior_cdf, u[0] * prior_cdf[-1], side="right")), last)]
        for t in range(1, cfg.stream_len):
            row = cdf[cats[stream[-1]]]
            stream.append(min(int(np.searchsorted(row, u[t] * row[-1], side="right")), last))
        h = cfg.history_len
        for end in range(h, cfg.stream_len):
            samples.append(
                InteractionSample(
                    user_id=user,
                    history=tuple(stream[end - h : end]),
                    target=stream[end],
                    order_index=end,
                )
            )
    train, valid, test = chronological_split(samples)
    return SplitDataset(train=train, valid=valid, test=test, transition=transition)


def corpus_vocab(catalog: Catalog) -> Vocab:
    return build_vocab(TEMPLATE.replace(HISTORY_SLOT, ""), catalog)


def render_instruction(sample: InteractionSample, catalog: Catalog, vocab: Vocab) -> InstructionPair:
    """Fill the history slot with the item names, or with the single token ``None``.

    Both prompts start with BOS; everything outside the history span is shared.
    """
    before, after = TEMPLATE.split(HISTORY_SLOT)
    try:
        names = [catalog.items[i].name for i in sample.history]
        target = catalog.items[sample.target].name
    except IndexError:
        raise DataError(f"sample of user {sample.user_id} references an unknown item") from None
    prefix = [BOS] + encode(vocab, before)
    suffix = encode(vocab, after)
    history: list[int] = []
    for k, name in enumerate(names):
        if k:
            history.append(SEP)
        history.extend(encode(vocab, name))
    x_h = prefix + history + suffix
    x_0 = prefix + [NONE] + suffix
    return InstructionPair(
        x_h=tuple(x_h),
        x_0=tuple(x_0),
        y=tuple(encode(vocab, target)),
        history_span=(len(prefix), len(prefix) + len(history)),
    )


def train_popularity(catalog: Catalog, train: Sequence[InteractionSample]) -> np.ndarray:
    return np.bincount([s.target for s in train], minlength=len(catalog)).astype(np.int64)


def popularity_groups(catalog: Catalog, train: Sequence[InteractionSample], n_groups: int) -> dict[int, int]:
    """Quantile binning on train-target counts; group 0 is the least popular.

    Also fills ``train_popularity`` on the catalog's items.
    """
    if n_groups < 2:
        raise ConfigError("n_groups must be at least 2")
    if n_groups > len(catalog):
        raise ConfigError(f"n_groups={n_groups} exceeds the number of items ({len(catalog)})")
    pop = train_popularity(catalog, train)
    for item, count in zip(catalog.items, pop.tolist()):
        item.train_popularity = count
    order = np.lexsort((np.arange(len(catalog)), pop))
    groups = {}
    for g, chunk in enumerate(np.array_split(order, n_groups)):
        for item_id in chunk.tolist():
            groups[item_id] = g
    return groups


# dataset directory I/O


def _sample_row(s: InteractionSample, split: str) -> dict:
    return {"user": s.user_id, "history": list(s.history), "target": s.target, "order_index": s.order_index, "split": split}


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)


def save_dataset(path, catalog: Catalog, data: SplitDataset, cfg: GenConfig) -> None:
    """Write catalog.jsonl, interactions.jsonl and manifest.json (each via temp file + rename)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    items = "".join(
        json.dumps({"id": item.item_id, "name": item.name, "category": item.category}) + "\n" for item in catalog.items
    )
    _write_atomic(out / "catalog.jsonl", items)
    rows = "".join(
        json.dumps(_sample_row(s, split)) + "\n" for split in ("train", "valid", "test") for s in getattr(data, split)
    )
    _write_atomic(out / "interactions.jsonl", rows)
    manifest = {
        "format": DATASET_FORMAT,
        "gen": asdict(cfg),
        "template": TEMPLATE,
        "transition": np.asarray(data.transition).tolist(),
    }
    _write_atomic(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(path) -> tuple[Catalog, SplitDataset, GenConfig]:
    src = Path(path)
    try:
        manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
        cfg = GenConfig(**manifest["gen"])
        items = []
        with open(src / "catalog.jsonl", encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                items.append(ItemRecord(item_id=row["id"], name=row["name"], category=row["category"]))
        splits: dict[str, list] = {"train": [], "valid": [], "test": []}
        with open(src / "interactions.jsonl", encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                splits[row["split"]].append(
                    InteractionSample(row["user"], tuple(row["history"]), row["target"], row["order_index"])
                )
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DataError(f"cannot read dataset at {src}: {exc}") from exc
    catalog = Catalog(items=items, n_categories=cfg.n_categories, seed=cfg.seed)
    data = SplitDataset(**splits, transition=np.asarray(manifest["transition"], dtype=np.float64))
    return catalog, data, replace(cfg)
