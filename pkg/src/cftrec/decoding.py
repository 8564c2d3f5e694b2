"""Beam-search generation and grounding of generated names to catalog items."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from cftrec import autodiff as ad
from cftrec.errors import ConfigError, DataError
from cftrec.textenc import BOS, EOS, NONE, PAD, SEP

N_GENERATED = 5


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool = True
    order: int = 0

    def score(self, length_norm: bool) -> float:
        return hypothesis_score(self.logprob, len(self.tokens), length_norm)


def hypothesis_score(logprob: float, length: int, length_norm: bool) -> float:
    """Length-normalised (``logprob / length``) or raw log-probability."""
    if length_norm:
        return logprob / max(length, 1)
    return logprob


def rank_hypotheses(hyps: Sequence[BeamHypothesis], length_norm: bool) -> list[BeamHypothesis]:
    """Best score first; equal scores keep creation order."""
    return sorted(hyps, key=lambda h: (-h.score(length_norm), h.order))


@dataclass
class BeamTrace:
    """Prefixes expanded at each step, for inspecting the search."""

    expanded: list[list[tuple[int, ...]]] = field(default_factory=list)


def _beam_search_group(
    model,
    prompts: np.ndarray,
    width: int,
    max_out_len: int,
    length_norm: bool,
    n_return: int,
    banned: np.ndarray,
    allow_eos: bool,
    traces: list[BeamTrace] | None,
) -> list[list[BeamHypothesis]]:
    n_prompts, plen = prompts.shape
    # live state: per prompt, list of (tokens, logprob)
    live_tokens = np.zeros((n_prompts, 1, 0), dtype=np.int64)
    live_logp = np.zeros((n_prompts, 1))
    live_count = np.ones(n_prompts, dtype=np.int64)
    finished: list[list[BeamHypothesis]] = [[] for _ in range(n_prompts)]
    counters = [0] * n_prompts
    vocab = model.cfg.vocab_size

    for step in range(max_out_len):
        w_live = live_tokens.shape[1]
        ids = np.concatenate(
            [np.repeat(prompts[:, None, :], w_live, axis=1), live_tokens], axis=2
        ).reshape(n_prompts * w_live, plen + step)
        with ad.no_grad():
            rows = np.arange(ids.shape[0])
            logits = model.logits_at(ids, rows, np.full(ids.shape[0], ids.shape[1] - 1)).data.astype(np.float64)
        logp = ad.log_softmax_np(logits).reshape(n_prompts, w_live, vocab)
        logp[:, :, banned] = -np.inf
        last = step == max_out_len - 1

        new_tokens = np.zeros((n_prompts, width, step + 1), dtype=np.int64)
        new_logp = np.full((n_prompts, width), -np.inf)
        new_count = np.zeros(n_prompts, dtype=np.int64)
        for p in range(n_prompts):
            if live_count[p] == 0:
                continue
            k = live_count[p]
            if traces is not None:
                traces[p].expanded.append([tuple(live_tokens[p, b].tolist()) for b in range(k)])
            cand = (live_logp[p, :k, None] + logp[p, :k]).reshape(-1)
            # raw log-prob pruning: every live beam has the same length here
            order = np.argsort(-cand, kind="stable")[:width]
            order = order[np.isfinite(cand[order])]
            m = 0
            for flat in order.tolist():
                b, tok = divmod(flat, vocab)
                prefix = live_tokens[p, b]
                if allow_eos and tok == EOS:
                    finished[p].append(BeamHypothesis(tuple(prefix.tolist()), float(cand[flat]), True, counters[p]))
                    counters[p] += 1
                elif last:
                    finished[p].append(
                        BeamHypothesis(tuple(prefix.tolist()) + (tok,), float(cand[flat]), True, counters[p])
                    )
                    counters[p] += 1
                else:
                    new_tokens[p, m, :step] = prefix
                    new_tokens[p, m, step] = tok
                    new_logp[p, m] = cand[flat]
                    m += 1
            new_count[p] = m
        if last:
            break
        keep = max(int(new_count.max()), 1)
        live_tokens, live_logp, live_count = new_tokens[:, :keep], new_logp[:, :keep], new_count
        if not live_count.any():
            break

    out = []
    for p in range(n_prompts):
        ranked = rank_hypotheses(finished[p], length_norm)
        if len(ranked) < n_return:
            raise DataError(
                f"beam search finished only {len(ranked)} hypotheses (< {n_return}); increase the beam width"
            )
        out.append(ranked[:n_return])
    return out


def beam_search_many(
    model,
    prompts: Sequence[Sequence[int]],
    width: int = 10,
    max_out_len: int = 3,
    length_norm: bool = True,
    n_return: int = N_GENERATED,
    allow_eos: bool = False,
    chunk: int = 64,
    traces: list[BeamTrace] | None = None,
) -> list[list[BeamHypothesis]]:
    """Run beam search for every prompt. Prompts are batched by length."""
    if width < n_return:
        raise ConfigError(f"beam width {width} is smaller than the {n_return} hypotheses requested")
    if max_out_len < 1:
        raise ConfigError("max_out_len must be at least 1")
    for pr in prompts:
        if len(pr) + max_out_len - 1 > model.cfg.max_seq_len:
            raise DataError("prompt plus output does not fit max_seq_len")
    banned = [PAD, BOS, NONE, SEP] + ([] if allow_eos else [EOS])
    banned = np.array(sorted(set(banned)), dtype=np.int64)
    results: list[list[BeamHypothesis] | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for i, pr in enumerate(prompts):
        by_len.setdefault(len(pr), []).append(i)
    for _, idx in sorted(by_len.items()):
        for start in range(0, len(idx), chunk):
            part = idx[start : start + chunk]
            arr = np.array([list(prompts[i]) for i in part], dtype=np.int64)
            sub = None if traces is None else [traces[i] for i in part]
            for i, hyps in zip(part, _beam_search_group(model, arr, width, max_out_len, length_norm, n_return, banned, allow_eos, sub)):
                results[i] = hyps
    return results


def beam_search(
    model,
    prompt: Sequence[int],
    width: int = 10,
    max_out_len: int = 3,
    length_norm: bool = True,
    n_return: int = N_GENERATED,
    allow_eos: bool = False,
    trace: BeamTrace | None = None,
) -> list[BeamHypothesis]:
    return beam_search_many(
        model, [prompt], width, max_out_len, length_norm, n_return, allow_eos,
        traces=None if trace is None else [trace],
    )[0]


# grounding


@dataclass(frozen=True)
class GroundedEntry:
    item_id: int
    distance: float
    source_rank: int
    neighbor_rank: int


@dataclass
class GroundedList:
    entries: list[GroundedEntry]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def items(self) -> list[int]:
        return [e.item_id for e in self.entries]

    @property
    def distances(self) -> list[float]:
        return [e.distance for e in self.entries]


class ItemIndex:
    """Catalog representations plus an exact-name lookup.

    A hypothesis spelling a catalog name reuses that item's stored vector,
    which is what encoding it again would produce.
    """

    def __init__(self, model, names: Sequence[Sequence[int]]):
        self.model = model
        self.names = [tuple(n) for n in names]
        self.reps = model.encode_items(self.names)
        self._by_tokens = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def encode(self, token_lists: Sequence[Sequence[int]]) -> np.ndarray:
        out = np.zeros((len(token_lists), self.reps.shape[1]))
        missing = []
        for i, toks in enumerate(token_lists):
            j = self._by_tokens.get(tuple(toks))
            if j is None:
                missing.append(i)
            else:
                out[i] = self.reps[j]
        if missing:
            out[missing] = self.model.encode_items([list(token_lists[i]) for i in missing])
        return out


def l2_distances(queries: np.ndarray, reps: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - reps[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def interleave(dist: np.ndarray, limit: int | None = None) -> GroundedList:
    """Round-robin over hypotheses; each takes its nearest item not yet used.

    Round ``r`` gives neighbor_rank ``r``. Runs until ``limit`` entries or the
    catalog is exhausted.
    """
    n_src, n_items = dist.shape
    limit = n_items if limit is None else min(limit, n_items)
    orders = np.argsort(dist, axis=1, kind="stable")
    ptr = [0] * n_src
    used = np.zeros(n_items, dtype=bool)
    entries: list[GroundedEntry] = []
    rank = 0
    while len(entries) < limit:
        rank += 1
        for s in range(n_src):
            if len(entries) >= limit:
                break
            row = orders[s]
            while ptr[s] < n_items and used[row[ptr[s]]]:
                ptr[s] += 1
            if ptr[s] >= n_items:
                continue
            item = int(row[ptr[s]])
            used[item] = True
            ptr[s] += 1
            entries.append(GroundedEntry(item, float(dist[s, item]), s + 1, rank))
    return GroundedList(entries)


def ground(hyps: Sequence[BeamHypothesis], index: ItemIndex, k: int = 10) -> GroundedList:
    """Nearest item of each hypothesis in order, then second-nearest, and so on."""
    if len(hyps) == 0:
        raise DataError("no hypotheses to ground")
    if len(index) < k:
        raise DataError(f"catalog of {len(index)} items is smaller than the list length {k}")
    dist = l2_distances(index.encode([h.tokens for h in hyps]), index.reps)
    return interleave(dist, k)


def rank_all(hyps: Sequence[BeamHypothesis], index: ItemIndex) -> GroundedList:
    """Total order over the catalog; the first 10 entries equal :func:`ground`."""
    dist = l2_distances(index.encode([h.tokens for h in hyps]), index.reps)
    return interleave(dist, None)


# recommendations file


@dataclass
class Recommendation:
    user: int
    order_index: int
    with_history: bool
    items: list[int]
    distances: list[float]


def write_recommendations(recs: Sequence[Recommendation], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for r in recs:
            row = {
                "user": r.user,
                "order_index": r.order_index,
                "with_history": r.with_history,
                "items": r.items,
                "distances": r.distances,
            }
            fh.write(json.dumps(row) + "\n")
    tmp.replace(path)


def read_recommendations(path) -> list[Recommendation]:
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    out.append(
                        Recommendation(
                            user=row["user"],
                            order_index=row.get("order_index", -1),
                            with_history=row["with_history"],
                            items=list(row["items"]),
                            distances=list(row["distances"]),
                        )
                    )
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read recommendations {path}: {exc}") from exc
    return out
