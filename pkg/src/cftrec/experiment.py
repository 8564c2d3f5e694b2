"""Multi-seed comparison of counterfactual fine-tuning against plain fine-tuning.

Per seed: generate a corpus, train the baseline (``lam=0, beta=1``, unweighted
L_n) and CFT models, pick lambda by validation HR@5, then score both on the
test split with and without history.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from cftrec.corpus import Catalog, GenConfig, InteractionSample, SplitDataset, corpus_vocab, generate_catalog
from cftrec.corpus import generate_interactions, popularity_groups, render_instruction
from cftrec.decoding import ItemIndex, Recommendation, beam_search_many, interleave, l2_distances
from cftrec.errors import NumericError
from cftrec.evalkit import distribution_divergence, evaluate, group_distribution
from cftrec.model import DecoderLM, ModelConfig
from cftrec.objective import CftConfig
from cftrec.textenc import Vocab, encode
from cftrec.trainer import TrainConfig, Trainer, TrainResult

LAMBDA_GRID = (0.01, 0.02, 0.025, 0.05, 0.1, 0.2, 0.3)
BASELINE_CFT = CftConfig(lam=0.0, beta=1.0, beta_prime=None, weight_normal=False)


def model_config_for(
    vocab: Vocab, catalog: Catalog, history_len: int, overrides: dict | None = None, seed: int = 0
) -> ModelConfig:
    """Model config sized for the corpus: prompt + target must fit max_seq_len."""
    probe = render_instruction(InteractionSample(0, (0,) * history_len, 0, 0), catalog, vocab)
    fields = {"vocab_size": len(vocab), "max_seq_len": len(probe.x_h) + len(probe.y), "init_seed": seed}
    fields.update(overrides or {})
    return ModelConfig(**fields)


def fit(data: SplitDataset, catalog: Catalog, vocab: Vocab, model_cfg: ModelConfig, train_cfg: TrainConfig, log=None) -> TrainResult:
    return Trainer(DecoderLM(model_cfg), catalog, vocab, train_cfg).fit(data.train, data.valid, log=log)


def recommend(
    model: DecoderLM,
    catalog: Catalog,
    vocab: Vocab,
    samples: Sequence[InteractionSample],
    with_history: bool = True,
    k: int = 20,
    width: int = 10,
    length_norm: bool = True,
    index: ItemIndex | None = None,
) -> list[Recommendation]:
    """Top-``k`` grounded recommendations per sample, in input order."""
    if index is None:
        index = ItemIndex(model, [encode(vocab, n) for n in catalog.names])
    pairs = [render_instruction(s, catalog, vocab) for s in samples]
    prompts = [p.x_h if with_history else p.x_0 for p in pairs]
    hyps = beam_search_many(model, prompts, width=width, max_out_len=len(pairs[0].y), length_norm=length_norm)
    out = []
    for s, h in zip(samples, hyps):
        g = interleave(l2_distances(index.encode([x.tokens for x in h]), index.reps), k)
        out.append(Recommendation(s.user_id, s.order_index, with_history, g.items, g.distances))
    return out


@dataclass
class ExperimentConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, max_epochs=5))
    lam_grid: tuple[float, ...] = LAMBDA_GRID
    beta_prime: float = 2.0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    # "first": choose lambda on the first seed's validation split and reuse it; "each": per seed
    tune: str = "first"
    n_groups: int = 5
    list_len: int = 20
    width: int = 10
    length_norm: bool = True


@dataclass
class ArmResult:
    name: str
    lam: float
    best_epoch: int
    valid_hr5: float
    test: dict
    test_without: dict
    js: float
    shares_with: list[float]
    shares_without: list[float]
    seconds: float


@dataclass
class SeedResult:
    seed: int
    baseline: ArmResult
    cft: ArmResult
    valid_by_lambda: dict[float, float]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seeds: list[SeedResult]
    seconds: float

    def hr5(self, arm: str) -> list[float]:
        return [getattr(s, arm).test["HR@5"] for s in self.seeds]

    def js(self, arm: str) -> list[float]:
        return [getattr(s, arm).js for s in self.seeds]

    def summary(self) -> dict:
        base, cft = np.array(self.hr5("baseline")), np.array(self.hr5("cft"))
        jb, jc = np.array(self.js("baseline")), np.array(self.js("cft"))
        return {
            "median_hr5_baseline": float(np.median(base)),
            "median_hr5_cft": float(np.median(cft)),
            "hr5_strict_wins": int((cft > base).sum()),
            "js_strict_wins": int((jc > jb).sum()),
            "lambdas": [s.cft.lam for s in self.seeds],
            "seconds": self.seconds,
        }


def _metrics(recs: Sequence[Recommendation], samples: Sequence[InteractionSample]) -> dict:
    rep = evaluate([r.items for r in recs], [s.target for s in samples], (5, 10))
    return {"HR@5": rep.hr[5], "HR@10": rep.hr[10], "NDCG@5": rep.ndcg[5], "NDCG@10": rep.ndcg[10]}


def _valid_hr5(model, catalog, vocab, data, cfg: ExperimentConfig) -> float:
    recs = recommend(model, catalog, vocab, data.valid, True, 5, cfg.width, cfg.length_norm)
    return evaluate([r.items for r in recs], [s.target for s in data.valid], (5,)).hr[5]


def _score_arm(name, lam, result: TrainResult, valid_hr5, catalog, vocab, data, groups, cfg, seconds) -> ArmResult:
    model = result.model
    index = ItemIndex(model, [encode(vocab, n) for n in catalog.names])
    rec_w = recommend(model, catalog, vocab, data.test, True, cfg.list_len, cfg.width, cfg.length_norm, index)
    rec_wo = recommend(model, catalog, vocab, data.test, False, cfg.list_len, cfg.width, cfg.length_norm, index)
    gw = group_distribution([r.items for r in rec_w], groups, cfg.n_groups, cfg.list_len, True)
    gwo = group_distribution([r.items for r in rec_wo], groups, cfg.n_groups, cfg.list_len, False)
    return ArmResult(
        name, lam, result.best_epoch, valid_hr5, _metrics(rec_w, data.test), _metrics(rec_wo, data.test),
        distribution_divergence(gw, gwo), gw.shares, gwo.shares, seconds,
    )


def run_experiment(cfg: ExperimentConfig | None = None, log: Callable[[str], None] | None = None) -> ExperimentResult:
    cfg = cfg or ExperimentConfig()
    say = log or (lambda msg: None)
    t_all = time.perf_counter()
    chosen: float | None = None
    seeds = []
    for i, seed in enumerate(cfg.seeds):
        gen = replace(cfg.gen, seed=seed)
        catalog = generate_catalog(gen)
        data = generate_interactions(catalog, gen)
        vocab = corpus_vocab(catalog)
        groups = popularity_groups(catalog, data.train, cfg.n_groups)
        mcfg = model_config_for(vocab, catalog, gen.history_len, cfg.model, seed)
        base_train = replace(cfg.train, seed=seed)

        t0 = time.perf_counter()
        base = fit(data, catalog, vocab, mcfg, replace(base_train, cft=BASELINE_CFT))
        base_valid = _valid_hr5(base.model, catalog, vocab, data, cfg)
        base_arm = _score_arm("baseline", 0.0, base, base_valid, catalog, vocab, data, groups, cfg, time.perf_counter() - t0)
        say(f"seed {seed} baseline valid HR@5={base_valid:.4f} test HR@5={base_arm.test['HR@5']:.4f} JS={base_arm.js:.4f}")

        grid = cfg.lam_grid if (cfg.tune == "each" or chosen is None) else (chosen,)
        valid_by_lam: dict[float, float] = {}
        fitted: dict[float, tuple[TrainResult, float]] = {}
        for lam in grid:
            t0 = time.perf_counter()
            tcfg = replace(base_train, cft=CftConfig(lam=lam, beta_prime=cfg.beta_prime))
            try:
                res = fit(data, catalog, vocab, mcfg, tcfg)
            except NumericError as exc:
                say(f"seed {seed} lambda={lam} diverged: {exc}")
                valid_by_lam[lam] = math.nan
                continue
            v = _valid_hr5(res.model, catalog, vocab, data, cfg)
            valid_by_lam[lam] = v
            fitted[lam] = (res, time.perf_counter() - t0)
            say(f"seed {seed} lambda={lam} valid HR@5={v:.4f} ({time.perf_counter() - t0:.0f}s)")
        finite = {k: v for k, v in valid_by_lam.items() if not math.isnan(v)}
        if not finite:
            raise NumericError(f"every lambda diverged on seed {seed}")
        # best validation HR@5; ties go to the smaller lambda
        lam = min(finite, key=lambda k: (-finite[k], k))
        if chosen is None or cfg.tune == "each":
            chosen = lam
        res, secs = fitted[lam]
        t0 = time.perf_counter()
        cft_arm = _score_arm("cft", lam, res, finite[lam], catalog, vocab, data, groups, cfg, secs + time.perf_counter() - t0)
        say(f"seed {seed} cft lambda={lam} test HR@5={cft_arm.test['HR@5']:.4f} JS={cft_arm.js:.4f}")
        seeds.append(SeedResult(seed, base_arm, cft_arm, valid_by_lam))
    return ExperimentResult(cfg, seeds, time.perf_counter() - t_all)


def result_rows(result: ExperimentResult) -> list[dict]:
    rows = []
    for s in result.seeds:
        for arm in (s.baseline, s.cft):
            row = {"seed": s.seed, "method": arm.name, "lambda": arm.lam, "best_epoch": arm.best_epoch,
                   "valid_HR@5": arm.valid_hr5}
            row.update(arm.test)
            row.update({f"{k}_without": v for k, v in arm.test_without.items()})
            row["JS_with_vs_without"] = arm.js
            rows.append(row)
    return rows


def config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["lam_grid"] = list(cfg.lam_grid)
    d["seeds"] = list(cfg.seeds)
    return d
