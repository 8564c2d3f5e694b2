import csv
import math

import numpy as np
import pytest

from cftrec.autodiff import Parameter
from cftrec.errors import CheckpointError, NumericError
from cftrec.experiment import model_config_for
from cftrec.model import DecoderLM
from cftrec.objective import CftConfig
from cftrec.trainer import (
    AdamW,
    EpochLog,
    TrainConfig,
    Trainer,
    _pack,
    load_checkpoint,
    save_checkpoint,
    with_cft,
    write_epoch_log,
)

TINY = {"d_model": 16, "n_heads": 2, "d_ff": 32}


def make_trainer(corpus, **train_kw):
    cat, data, vocab = corpus
    mcfg = model_config_for(vocab, cat, 3, TINY, seed=train_kw.get("seed", 0))
    cfg = TrainConfig(**{"learning_rate": 1e-3, "batch_size": 16, "max_epochs": 2, **train_kw})
    return Trainer(DecoderLM(mcfg), cat, vocab, cfg)


def test_adamw_zero_grad_no_decay_is_fixed_point():
    p = Parameter(np.array([1.5, -2.0]))
    AdamW(0.1).step({"p": p})
    assert p.data.tolist() == [1.5, -2.0]


def test_adamw_first_step_unit_gradient():
    p = Parameter(np.array([0.0]))
    p.grad = np.array([1.0])
    AdamW(0.1, eps=1e-12).step({"p": p})
    assert abs(p.data[0] + 0.1) < 1e-10


def test_adamw_decoupled_decay():
    p = Parameter(np.array([1.0]))
    AdamW(0.1, weight_decay=0.01).step({"p": p})
    assert abs(p.data[0] - 0.999) < 1e-15


def test_one_step_two_forwards(small_corpus):
    tr = make_trainer(small_corpus)
    tr.train_step(small_corpus[1].train)
    assert tr.model.forward_calls == 2


def test_evaluate_leaves_parameters_alone(small_corpus):
    tr = make_trainer(small_corpus, cft=CftConfig(lam=0.1))
    before = {k: p.data.copy() for k, p in tr.model.params.items()}
    a = tr.evaluate(small_corpus[1].valid)
    b = tr.evaluate(small_corpus[1].valid)
    assert a == b
    assert all((before[k] == p.data).all() for k, p in tr.model.params.items())
    assert tr.step == 0


def test_early_stop_after_worsening(small_corpus, monkeypatch):
    tr = make_trainer(small_corpus, max_epochs=6, patience_epochs=1)
    values = iter([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    monkeypatch.setattr(tr, "evaluate", lambda samples: (0.0, 0.0, next(values)))
    res = tr.fit(small_corpus[1].train, small_corpus[1].valid)
    assert len(res.log) == 2
    assert res.best_epoch == 1


def test_patience_two(small_corpus, monkeypatch):
    tr = make_trainer(small_corpus, max_epochs=6, patience_epochs=2)
    values = iter([3.0, 2.0, 2.5, 1.0, 1.5, 1.7])
    monkeypatch.setattr(tr, "evaluate", lambda samples: (0.0, 0.0, next(values)))
    res = tr.fit(small_corpus[1].train, small_corpus[1].valid)
    assert [r.epoch for r in res.log] == [1, 2, 3, 4, 5, 6]
    assert res.best_epoch == 4


def test_fit_deterministic(small_corpus):
    runs = [make_trainer(small_corpus, cft=CftConfig(lam=0.05)).fit(small_corpus[1].train, small_corpus[1].valid) for _ in range(2)]
    assert _pack(runs[0].checkpoint) == _pack(runs[1].checkpoint)
    assert [r.valid_L for r in runs[0].log] == [r.valid_L for r in runs[1].log]


def test_checkpoint_round_trip_bytes(small_corpus, tmp_path):
    tr = make_trainer(small_corpus)
    tr.train_step(small_corpus[1].train)
    save_checkpoint(tr.checkpoint({"note": "x"}), tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resume_matches_uninterrupted(small_corpus, tmp_path):
    train = small_corpus[1].train
    straight = make_trainer(small_corpus, cft=CftConfig(lam=0.1))
    for _ in range(4):
        straight.train_step(train)

    first = make_trainer(small_corpus, cft=CftConfig(lam=0.1))
    for _ in range(3):
        first.train_step(train)
    save_checkpoint(first.checkpoint(), tmp_path / "mid.ckpt")
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "mid.ckpt"), small_corpus[0])
    resumed.train_step(train)
    for k, p in straight.model.params.items():
        assert p.data.tobytes() == resumed.model.params[k].data.tobytes(), k


def test_truncated_checkpoint(small_corpus, tmp_path):
    tr = make_trainer(small_corpus)
    save_checkpoint(tr.checkpoint(), tmp_path / "c.ckpt")
    blob = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_version_and_magic_errors(small_corpus, tmp_path):
    tr = make_trainer(small_corpus)
    blob = bytearray(_pack(tr.checkpoint()))
    blob[8] = 99
    (tmp_path / "v.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + bytes(blob[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "m.ckpt")


def test_lambda_zero_curve_independent_of_beta(small_corpus):
    base = dict(cft=CftConfig(lam=0.0, beta=1.0, beta_prime=None, weight_normal=False))
    a = make_trainer(small_corpus, **base)
    b = make_trainer(small_corpus, **base)
    b.cfg = with_cft(b.cfg, beta=0.25)
    ra = a.fit(small_corpus[1].train, small_corpus[1].valid)
    rb = b.fit(small_corpus[1].train, small_corpus[1].valid)
    assert [r.valid_L for r in ra.log] == [r.valid_L for r in rb.log]


def test_non_finite_loss_names_step_and_lambda(small_corpus):
    tr = make_trainer(small_corpus, cft=CftConfig(lam=0.3))
    tr.model.params["tok_emb"].data[...] = np.nan
    with pytest.raises(NumericError, match=r"step 0.*lambda=0.3"):
        tr.train_step(small_corpus[1].train)


def test_epoch_log_csv(tmp_path):
    write_epoch_log([EpochLog(1, 2.0, 3.0, 2.15, 2.1, 0.5)], tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["epoch", "train_Ln", "train_Lc", "train_L", "valid_L", "seconds"]
    assert float(rows[1][4]) == 2.1


def test_fit_returns_best_snapshot(small_corpus):
    tr = make_trainer(small_corpus, max_epochs=3, cft=CftConfig(lam=0.05))
    res = tr.fit(small_corpus[1].train, small_corpus[1].valid)
    best = min(res.log, key=lambda r: r.valid_L)
    assert res.best_epoch == best.epoch
    check = Trainer(res.model, small_corpus[0], small_corpus[2], tr.cfg)
    assert math.isclose(check.evaluate(small_corpus[1].valid)[2], best.valid_L, rel_tol=0, abs_tol=1e-12)
