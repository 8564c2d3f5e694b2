"""Acceptance checks: one PASS/FAIL line per criterion, at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``. The multi-seed comparison
(criteria 7 and 8) trains 5 baselines plus the lambda grid and takes about
15 minutes on one CPU core.
"""

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from cftrec import autodiff as ad
from cftrec.corpus import GenConfig, corpus_vocab, generate_catalog, generate_interactions, render_instruction
from cftrec.decoding import BeamHypothesis, ItemIndex, ground, rank_hypotheses
from cftrec.evalkit import hit_rate, ndcg
from cftrec.experiment import BASELINE_CFT, ExperimentConfig, model_config_for, run_experiment
from cftrec.model import DecoderLM, ModelConfig, pad_batch
from cftrec.objective import CftConfig, build_dual_batch, causal_loss, combined_loss, normal_loss, token_weights
from cftrec.textenc import encode
from cftrec.trainer import AdamW, TrainConfig, Trainer


@pytest.fixture
def report(capsys):
    def _report(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return _report


# 1. gradient check of the full combined loss


def test_c1_gradient_check_combined_loss(small_corpus, report):
    cat, data, vocab = small_corpus
    mcfg = model_config_for(vocab, cat, 3, {"d_model": 8, "n_heads": 2, "d_ff": 16, "n_layers": 2, "dropout": 0.0})
    model = DecoderLM(mcfg)
    rng = np.random.default_rng(0)
    for p in model.params.values():
        p.data[...] = rng.normal(0.0, 0.3, size=p.shape)
    batch = build_dual_batch(data.train[:4], cat, vocab, beta=0.5)

    def loss():
        fact = model.logits_at(batch.fact_ids, batch.rows, batch.fact_cols)
        cf = model.logits_at(batch.cf_ids, batch.rows, batch.cf_cols)
        return combined_loss(normal_loss(fact, batch.targets, batch.weights), causal_loss(fact, cf, batch.targets, batch.weights), 0.3)

    t0 = time.perf_counter()
    err = ad.grad_check(loss, model.parameters(), n_coords=400)
    secs = time.perf_counter() - t0
    # the verdict is the single call above; other subsamples are shown because coordinates whose
    # true gradient is ~1e-9 hit the 1e-8 floor, where central-difference roundoff dominates
    others = [ad.grad_check(loss, model.parameters(), n_coords=400, seed=s) for s in range(1, 10)]
    robust = sum(e < 1e-5 for e in [err] + others)
    report(
        "C1 gradient check", err < 1e-5 and secs < 60,
        f"max rel err {err:.2e} (< 1e-5), {secs:.1f}s (< 60s); subsample seeds 0-9 under 1e-5: {robust}/10, worst {max(others + [err]):.1e}",
    )


# 2. token weights


def test_c2_token_weights(report):
    bad = []
    for n, beta in itertools.product(range(1, 9), (0.0, 0.4, 0.5, 1.0)):
        expected = [1.0] if n == 1 else [1.0 - (1.0 - beta) * t / (n - 1) for t in range(n)]
        got = token_weights(n, beta).tolist()
        if any(abs(a - b) > 1e-15 for a, b in zip(got, expected)):
            bad.append((n, beta))
    mapped = CftConfig(beta_prime=2.0).effective_beta
    report("C2 token weights", not bad and mapped == 0.5, f"{32 - len(bad)}/32 exact, beta'=2 -> beta={mapped}")


# 3. causal loss against a brute-force loop


def _brute_causal(fact, cf, targets, weights):
    num = den = 0.0
    for i in range(fact.shape[0]):
        z = [fact[i, v] - cf[i, v] for v in range(fact.shape[1])]
        m = max(z)
        lse = m + math.log(sum(math.exp(x - m) for x in z))
        num += weights[i] * (lse - z[targets[i]])
        den += weights[i]
    return num / den


def test_c3_causal_loss_oracle(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        b, n, v = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 9))
        beta = float(rng.uniform())
        fact, cf = rng.standard_normal((b * n, v)) * 3, rng.standard_normal((b * n, v)) * 3
        t = rng.integers(0, v, b * n)
        w = np.tile(token_weights(n, beta), b)
        got = causal_loss(ad.Tensor(fact), ad.Tensor(cf), t, w).item()
        worst = max(worst, abs(got - _brute_causal(fact, cf, t, w)))
    x = rng.standard_normal((6, 7))
    zero = causal_loss(ad.Tensor(x), ad.Tensor(x), [0, 1, 2, 3, 4, 5], np.ones(6)).item()
    ok = worst < 1e-12 and abs(zero - math.log(7)) < 1e-12
    report("C3 causal loss oracle", ok, f"max |diff| {worst:.1e} over 100 tensors, zero effect {zero:.12f} vs ln 7")


# 4. ablation equivalence with a single-branch trainer


def _single_branch_valid_losses(model, catalog, vocab, train, valid, cfg: TrainConfig, epochs):
    """Plain next-item fine-tuning, written independently of Trainer."""
    opt = AdamW(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)

    def batch(samples):
        pairs = [render_instruction(s, catalog, vocab) for s in samples]
        # teacher forcing: the last target token is never an input
        ids = pad_batch([list(p.x_h) + list(p.y[:-1]) for p in pairs])
        rows = np.repeat(np.arange(len(pairs)), [len(p.y) for p in pairs])
        cols = np.concatenate([np.arange(len(p.y)) + len(p.x_h) - 1 for p in pairs])
        return ids, rows, cols, np.concatenate([p.y for p in pairs])

    out, step = [], 0
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, 10, epoch]).permutation(len(train)).tolist()
        for start in range(0, len(train), cfg.batch_size):
            ids, rows, cols, y = batch([train[i] for i in order[start : start + cfg.batch_size]])
            model.zero_grad()
            # stream 0 is the dropout stream the dual trainer gives its factual branch
            rng = np.random.default_rng([cfg.seed, 11, step, 0])
            ad.backward(normal_loss(model.logits_at(ids, rows, cols, True, rng), y))
            opt.step(model.params)
            step += 1
        total = count = 0.0
        with ad.no_grad():
            for start in range(0, len(valid), cfg.batch_size):
                ids, rows, cols, y = batch(valid[start : start + cfg.batch_size])
                s, w = ad.cross_entropy(model.logits_at(ids, rows, cols), y)
                total, count = total + s.item(), count + w
        out.append(total / count)
    return out


def test_c4_ablation_matches_single_branch(report):
    gen = GenConfig(n_users=60, n_items=40, n_categories=4, history_len=3, stream_len=10, seed=2)
    cat = generate_catalog(gen)
    data = generate_interactions(cat, gen)
    vocab = corpus_vocab(cat)
    mcfg = model_config_for(vocab, cat, gen.history_len, {"d_model": 16, "n_heads": 2, "d_ff": 32, "dropout": 0.1}, seed=1)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=16, max_epochs=3, patience_epochs=3, seed=1, cft=BASELINE_CFT)
    dual = [r.valid_L for r in Trainer(DecoderLM(mcfg), cat, vocab, cfg).fit(data.train, data.valid).log]
    single = _single_branch_valid_losses(DecoderLM(mcfg), cat, vocab, data.train, data.valid, cfg, 3)
    diff = max(abs(a - b) for a, b in zip(dual, single))
    report("C4 ablation equivalence", len(dual) == 3 and diff < 1e-12, f"max per-epoch valid-loss diff {diff:.1e} over {len(dual)} epochs")


# 5. metric oracles


def test_c5_metric_oracles(report):
    rng = np.random.default_rng(5)
    recs = [rng.permutation(50)[:20].tolist() for _ in range(1000)]
    targets = rng.integers(0, 50, 1000).tolist()
    worst = 0.0
    for k in (1, 5, 10, 20):
        hr = dc = 0.0
        for lst, t in zip(recs, targets):
            for r in range(k):
                if lst[r] == t:
                    hr += 1
                    dc += 1 / math.log2(r + 2)
                    break
        worst = max(worst, abs(hit_rate(recs, targets, k) - hr / 1000), abs(ndcg(recs, targets, k) - dc / 1000))
    s1, s3 = ndcg([[9, 1, 2, 3, 4]], [9], 5), ndcg([[1, 2, 9, 3, 4]], [9], 5)
    report("C5 metric oracles", worst < 1e-12 and s1 == 1.0 and s3 == 0.5, f"max diff {worst:.1e}, NDCG rank1={s1}, rank3={s3}")


# 6. decoding contracts


class _Points:
    def __init__(self, points):
        self.points = points

    def encode_items(self, names):
        return np.array([self.points[tuple(n)] for n in names], dtype=np.float64)


def test_c6_decoding_contracts(report):
    a, b = BeamHypothesis((1, 2), -1.0, True, 0), BeamHypothesis((1, 2, 3, 4), -1.5, True, 1)
    flip = rank_hypotheses([a, b], False)[0] is a and rank_hypotheses([a, b], True)[0] is b

    mcfg = ModelConfig(vocab_size=12, d_model=16, n_heads=2, d_ff=32, max_seq_len=8, init_seed=4)
    names = [(5, 6, 7), (8, 9, 10), (11, 5, 6), (7, 7, 8), (9, 5, 11), (6, 8, 10)]
    index = ItemIndex(DecoderLM(mcfg), names)
    hyps = [BeamHypothesis(names[3], -0.2, True, 0)] + [BeamHypothesis((5, 5, 5 + i), -1.0, True, i + 1) for i in range(4)]
    g = ground(hyps, index, 5)
    exact = g.items[0] == 3 and g.distances[0] == 0.0

    # 12 items at x = 0..11; nearest of h1..h5 are 0, 0(taken -> 1), 4, 8, 11; second-nearest 1(taken -> 2), 2(taken -> 3), 5, 7, 10
    points = {(20 + i,): (float(i), 0.0) for i in range(12)}
    line_hyps = []
    for i, x in enumerate((0.1, 0.2, 4.1, 7.9, 10.6)):
        points[(40 + i,)] = (x, 0.0)
        line_hyps.append(BeamHypothesis((40 + i,), -float(i), True, i))
    top = ground(line_hyps, ItemIndex(_Points(points), [(20 + i,) for i in range(12)]), 10).items
    interleaved = top == [0, 1, 4, 8, 11, 2, 3, 5, 7, 10]
    report(
        "C6 decoding contracts", flip and exact and interleaved,
        f"length-norm flip={flip}, exact name at distance 0 rank 1={exact}, top-10 interleave={interleaved} {top}",
    )


# 7 and 8. multi-seed comparison


@pytest.fixture(scope="module")
def experiment():
    return run_experiment(ExperimentConfig(gen=GenConfig(n_users=500, n_items=300, n_categories=10, eta=0.9)))


def test_c7_cft_improves_hr5(experiment, report):
    s = experiment.summary()
    ok = s["median_hr5_cft"] >= s["median_hr5_baseline"] and s["hr5_strict_wins"] >= 3 and s["seconds"] < 900
    detail = (
        f"median HR@5 cft {s['median_hr5_cft']:.4f} vs baseline {s['median_hr5_baseline']:.4f}, "
        f"strict wins {s['hr5_strict_wins']}/5 (>= 3), lambda {s['lambdas'][0]}, {s['seconds']:.0f}s (< 900s); "
        f"per seed cft {experiment.hr5('cft')} baseline {experiment.hr5('baseline')}"
    )
    report("C7 CFT improves HR@5", ok, detail)


def test_c8_history_reliance(experiment, report):
    s = experiment.summary()
    detail = f"JS strictly larger for CFT in {s['js_strict_wins']}/5 seeds (>= 3); cft {experiment.js('cft')} baseline {experiment.js('baseline')}"
    report("C8 history reliance", s["js_strict_wins"] >= 3, detail)


# 9. reproducibility of the command-line pipeline


def test_c9_pipeline_reproducible(tmp_path, report):
    from cftrec.cli import main

    ini = tmp_path / "run.ini"
    ini.write_text(
        "[gen]\nn_users = 80\nn_items = 60\nn_categories = 4\nseed = 3\n"
        "[model]\nd_model = 32\nn_heads = 2\nd_ff = 64\n"
        "[train]\nmax_epochs = 2\nbatch_size = 32\nlearning_rate = 0.001\n"
    )

    def pipeline(root):
        d, r, o = root / "data", root / "run", root / "out"
        c = ["--config", str(ini)]
        codes = [
            main(["gen", "--out", str(d), *c]),
            main(["train", "--data", str(d), "--out", str(r), "--lambda", "0.05", *c]),
            main(["recommend", "--ckpt", str(r / "model.ckpt"), "--data", str(d), "--out", str(o / "w.jsonl"), "--with-history", *c]),
            main(["recommend", "--ckpt", str(r / "model.ckpt"), "--data", str(d), "--out", str(o / "wo.jsonl"), "--no-history", *c]),
            main(["eval", "--recs", str(o / "w.jsonl"), str(o / "wo.jsonl"), "--data", str(d), "--out", str(o / "metrics.csv"), *c]),
            main(["analyze", "--recs-with", str(o / "w.jsonl"), "--recs-without", str(o / "wo.jsonl"), "--data", str(d), "--out", str(o / "an"), *c]),
        ]
        assert codes == [0] * 6, codes
        return (o / "metrics.csv").read_bytes(), (o / "an" / "groups.csv").read_bytes()

    first, second = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    report("C9 reproducibility", first == second,
           f"metrics.csv identical={first[0] == second[0]}, groups.csv identical={first[1] == second[1]}")
