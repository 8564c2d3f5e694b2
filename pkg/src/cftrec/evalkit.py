"""Top-K metrics and popularity-group distribution analysis."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from cftrec.corpus import Catalog, InteractionSample, SplitDataset, render_instruction
from cftrec.errors import ConfigError, DataError
from cftrec.textenc import Vocab


def _ranks(recs: Sequence[Sequence[int]], targets: Sequence[int], k: int) -> np.ndarray:
    """1-based rank of each target inside its top-k list, 0 when absent."""
    if len(recs) != len(targets):
        raise DataError(f"{len(recs)} recommendation lists for {len(targets)} targets")
    if len(recs) == 0:
        raise DataError("no recommendation lists")
    if k < 1:
        raise ConfigError("K must be positive")
    out = np.zeros(len(recs), dtype=np.int64)
    for i, (lst, tgt) in enumerate(zip(recs, targets)):
        if len(lst) < k:
            raise DataError(f"list {i} has {len(lst)} items, shorter than K={k}")
        top = list(lst[:k])
        if tgt in top:
            out[i] = top.index(tgt) + 1
    return out


def hit_rate(recs: Sequence[Sequence[int]], targets: Sequence[int], k: int) -> float:
    return float((_ranks(recs, targets, k) > 0).mean())


def ndcg(recs: Sequence[Sequence[int]], targets: Sequence[int], k: int) -> float:
    """Single relevant item, so the ideal DCG is 1 and a hit at rank r scores 1/log2(r+1)."""
    r = _ranks(recs, targets, k)
    gains = np.where(r > 0, 1.0 / np.log2(np.maximum(r, 1) + 1.0), 0.0)
    return float(gains.mean())


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_test: int


def evaluate(recs: Sequence[Sequence[int]], targets: Sequence[int], ks: Sequence[int] = (5, 10)) -> MetricsReport:
    return MetricsReport(
        hr={k: hit_rate(recs, targets, k) for k in ks},
        ndcg={k: ndcg(recs, targets, k) for k in ks},
        n_test=len(targets),
    )


@dataclass
class GroupDistribution:
    shares: list[float]
    list_len: int
    with_history: bool = True


def group_distribution(
    recs: Sequence[Sequence[int]],
    groups: Mapping[int, int],
    n_groups: int,
    list_len: int = 20,
    with_history: bool = True,
) -> GroupDistribution:
    """Share of the first ``list_len`` recommended slots falling in each group."""
    if not recs:
        raise DataError("no recommendation lists")
    counts = np.zeros(n_groups)
    for lst in recs:
        if len(lst) < list_len:
            raise DataError(f"list of length {len(lst)} is shorter than {list_len}")
        for item in lst[:list_len]:
            g = groups.get(int(item))
            if g is None:
                raise DataError(f"item {item} has no popularity group")
            counts[g] += 1
    return GroupDistribution((counts / (list_len * len(recs))).tolist(), list_len, with_history)


def distribution_divergence(p: GroupDistribution | Sequence[float], q: GroupDistribution | Sequence[float]) -> float:
    """Jensen-Shannon divergence in nats."""
    p = np.asarray(getattr(p, "shares", p), dtype=np.float64)
    q = np.asarray(getattr(q, "shares", q), dtype=np.float64)
    if p.shape != q.shape:
        raise DataError(f"distributions over {p.size} and {q.size} groups")
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return max(0.0, 0.5 * kl(p, m) + 0.5 * kl(q, m))


@dataclass
class TestInputs:
    __test__ = False  # not a pytest class

    samples: list[InteractionSample]
    with_history: list[tuple[int, ...]]
    without_history: list[tuple[int, ...]]


def build_test_inputs(data: SplitDataset | Sequence[InteractionSample], catalog: Catalog, vocab: Vocab) -> TestInputs:
    samples = list(data.test if isinstance(data, SplitDataset) else data)
    if not samples:
        raise DataError("test split is empty")
    pairs = [render_instruction(s, catalog, vocab) for s in samples]
    return TestInputs(samples, [p.x_h for p in pairs], [p.x_0 for p in pairs])

