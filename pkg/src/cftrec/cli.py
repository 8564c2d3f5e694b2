"""``cftrec`` command line: gen, train, recommend, eval, analyze, sweep, compare.

Every command takes an optional ``--config`` INI file with sections
``[gen] [model] [train] [cft] [decode] [eval]``; explicit flags override it.
The resolved configuration is written next to the outputs as
``run_manifest.json``. Exit codes: 2 config error, 3 data error, 4 non-finite
loss.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from cftrec import __version__
from cftrec.corpus import GenConfig, corpus_vocab, generate_catalog, generate_interactions, load_dataset
from cftrec.corpus import popularity_groups, save_dataset
from cftrec.decoding import read_recommendations, write_recommendations
from cftrec.errors import CftError, ConfigError, DataError, NumericError
from cftrec.evalkit import distribution_divergence, evaluate, group_distribution
from cftrec.experiment import BASELINE_CFT, ExperimentConfig, config_dict, model_config_for, recommend, result_rows
from cftrec.experiment import run_experiment
from cftrec.objective import CftConfig
from cftrec.runtime import tune_allocator
from cftrec.trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint, write_epoch_log
from cftrec.model import DecoderLM

MODEL_KEYS = ("d_model", "n_layers", "n_heads", "d_ff", "dropout", "init_std", "dtype")


@dataclass
class DecodeSettings:
    width: int = 10
    length_norm: bool = True
    k: int = 20


@dataclass
class EvalSettings:
    ks: tuple[int, ...] = (5, 10)
    n_groups: int = 5
    list_len: int = 20


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    cft: CftConfig = field(default_factory=CftConfig)
    decode: DecodeSettings = field(default_factory=DecodeSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("cft", None)
        d["eval"]["ks"] = list(self.eval.ks)
        return d


# config parsing


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}") from None


def _parse_list(text: str, item=float) -> list:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if not parts:
        raise ConfigError("empty list")
    return [item(p) for p in parts]


def _coerce(value: str, default, key: str):
    if isinstance(default, bool):
        return _parse_bool(value)
    if isinstance(default, int):
        return _parse_int(value)
    if isinstance(default, float):
        return _parse_float(value)
    if isinstance(default, tuple):
        return tuple(_parse_list(value, _parse_int))
    return value


def _section_overrides(cp: configparser.ConfigParser, section: str, obj) -> dict:
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    out = {}
    for key, value in cp.items(section):
        if key not in known or key == "cft":
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        out[key] = _coerce(value, known[key], key)
    return out


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    allowed = {"gen", "model", "train", "cft", "decode", "eval"}
    for section in cp.sections():
        if section not in allowed:
            raise ConfigError(f"unknown config section [{section}]")
    if cp.has_section("gen"):
        cfg.gen = replace(cfg.gen, **_section_overrides(cp, "gen", cfg.gen))
    if cp.has_section("model"):
        for key, value in cp.items("model"):
            if key not in MODEL_KEYS:
                raise ConfigError(f"unknown key {key!r} in [model]")
            cfg.model[key] = value if key == "dtype" else (_parse_float(value) if key in ("dropout", "init_std") else _parse_int(value))
    if cp.has_section("train"):
        cfg.train = replace(cfg.train, **_section_overrides(cp, "train", cfg.train))
    if cp.has_section("cft"):
        cft = {}
        for key, value in cp.items("cft"):
            if key == "lam" or key == "lambda":
                cft["lam"] = _parse_float(value)
            elif key in ("beta", "beta_prime"):
                cft[key] = None if value.strip().lower() == "none" else _parse_float(value)
            elif key in ("weight_normal", "stop_counterfactual_grad"):
                cft[key] = _parse_bool(value)
            else:
                raise ConfigError(f"unknown key {key!r} in [cft]")
        if "beta" in cft and cft["beta"] is not None and "beta_prime" not in cft:
            cft["beta_prime"] = None
        cfg.cft = replace(cfg.cft, **cft)
    if cp.has_section("decode"):
        cfg.decode = replace(cfg.decode, **_section_overrides(cp, "decode", cfg.decode))
    if cp.has_section("eval"):
        cfg.eval = replace(cfg.eval, **_section_overrides(cp, "eval", cfg.eval))
    cfg.gen.validate()
    return cfg


# output helpers


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_manifest(out_dir: Path, command: str, run: RunConfig | None, args: argparse.Namespace, extra: dict | None = None) -> None:
    path = Path(out_dir) / "run_manifest.json"
    manifest = {}
    if path.exists():
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except ValueError:
            manifest = {}
    entry = {
        "version": __version__,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
    }
    if run is not None:
        entry["config"] = run.to_dict()
    entry.update(extra or {})
    manifest[command] = entry
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")


def bar_chart_svg(shares_with: Sequence[float], shares_without: Sequence[float]) -> str:
    """Grouped bars: with-history vs without-history share per popularity group."""
    n = len(shares_with)
    w, h, pad = 80 * n + 60, 240, 30
    top = max([*shares_with, *shares_without, 1e-12])
    scale = (h - 2 * pad) / top
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - 10}" y2="{h - pad}" stroke="black"/>',
    ]
    for g in range(n):
        x0 = pad + 10 + 80 * g
        for j, (share, colour) in enumerate(((shares_with[g], "#3b6ea5"), (shares_without[g], "#d98b2b"))):
            bh = share * scale
            parts.append(
                f'<rect x="{x0 + 30 * j}" y="{h - pad - bh:.2f}" width="28" height="{bh:.2f}" fill="{colour}"/>'
            )
        parts.append(f'<text x="{x0 + 14}" y="{h - pad + 14}">g{g}</text>')
    parts.append(f'<text x="{pad}" y="14" fill="#3b6ea5">with history</text>')
    parts.append(f'<text x="{pad + 100}" y="14" fill="#d98b2b">without history</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# commands


def _run_config(args) -> RunConfig:
    return load_run_config(getattr(args, "config", None))


def cmd_gen(args) -> int:
    run = _run_config(args)
    if args.seed is not None:
        run.gen = replace(run.gen, seed=args.seed)
    catalog = generate_catalog(run.gen)
    data = generate_interactions(catalog, run.gen)
    out = Path(args.out)
    save_dataset(out, catalog, data, run.gen)
    write_manifest(out, "gen", run, args)
    print(f"wrote {len(catalog)} items and {len(data.all_samples())} samples to {out}")
    return 0


def _train_config(run: RunConfig, args) -> TrainConfig:
    cft = run.cft
    if args.lam is not None:
        cft = replace(cft, lam=args.lam)
    if args.beta_prime is not None:
        cft = replace(cft, beta_prime=args.beta_prime, beta=None)
    if args.no_causal_loss:
        cft = replace(cft, lam=0.0)
    if args.no_token_weights:
        cft = replace(cft, beta=1.0, beta_prime=None, weight_normal=False)
    train = replace(run.train, cft=cft)
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if args.epochs is not None:
        train = replace(train, max_epochs=args.epochs)
    if args.lr is not None:
        train = replace(train, learning_rate=args.lr)
    return train.validate()


def cmd_train(args) -> int:
    run = _run_config(args)
    catalog, data, gen = load_dataset(args.data)
    vocab = corpus_vocab(catalog)
    train_cfg = _train_config(run, args)
    run.cft, run.train = train_cfg.cft, train_cfg
    mcfg = model_config_for(vocab, catalog, gen.history_len, run.model, train_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = (lambda row: print(f"epoch {row.epoch}: train L={row.train_L:.4f} valid L={row.valid_L:.4f}")) if args.verbose else None
    result = Trainer(DecoderLM(mcfg), catalog, vocab, train_cfg).fit(data.train, data.valid, log=log)
    save_checkpoint(result.checkpoint, out / "model.ckpt")
    write_epoch_log(result.log, out / "epoch_log.csv")
    write_manifest(out, "train", run, args, {"model": mcfg.to_dict(), "best_epoch": result.best_epoch})
    print(f"best epoch {result.best_epoch}; checkpoint at {out / 'model.ckpt'}")
    return 0


def cmd_recommend(args) -> int:
    run = _run_config(args)
    ckpt = load_checkpoint(args.ckpt)
    catalog, data, _ = load_dataset(args.data)
    vocab = corpus_vocab(catalog)
    if list(vocab.id_to_token) != list(ckpt.vocab):
        raise DataError("checkpoint vocabulary does not match the dataset")
    width = args.width if args.width is not None else run.decode.width
    k = args.k if args.k is not None else run.decode.k
    length_norm = run.decode.length_norm if args.length_norm is None else args.length_norm == "on"
    if k > len(catalog):
        raise ConfigError(f"cannot recommend {k} items from a catalog of {len(catalog)}")
    samples = sorted(getattr(data, args.split), key=lambda s: (s.user_id, s.order_index))
    if not samples:
        raise DataError(f"{args.split} split is empty")
    recs = recommend(ckpt.model(), catalog, vocab, samples, args.with_history, k, width, length_norm)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_recommendations(recs, out)
    write_manifest(out.parent, f"recommend:{out.name}", run, args)
    print(f"wrote {len(recs)} recommendation lists to {out}")
    return 0


def _targets_for(recs, data, split: str) -> list[int]:
    by_key = {(s.user_id, s.order_index): s.target for s in getattr(data, split)}
    try:
        return [by_key[(r.user, r.order_index)] for r in recs]
    except KeyError as exc:
        raise DataError(f"recommendation for (user, order_index)={exc.args[0]} has no {split} sample") from None


def cmd_eval(args) -> int:
    run = _run_config(args)
    ks = tuple(_parse_list(args.k, _parse_int)) if args.k else run.eval.ks
    n_groups = args.n_groups if args.n_groups is not None else run.eval.n_groups
    catalog, data, _ = load_dataset(args.data)
    groups = popularity_groups(catalog, data.train, n_groups)
    loaded = [(path, read_recommendations(path)) for path in args.recs]
    dists = {}
    for path, recs in loaded:
        if not recs:
            raise DataError(f"{path} holds no recommendations")
        variant = "with" if recs[0].with_history else "without"
        list_len = min(run.eval.list_len, min(len(r.items) for r in recs))
        dists[variant] = group_distribution([r.items for r in recs], groups, n_groups, list_len, variant == "with")
    header = ["method", "variant"] + [f"HR@{k}" for k in ks] + [f"NDCG@{k}" for k in ks] + ["JS_vs_with_history"]
    rows = []
    for path, recs in loaded:
        variant = "with" if recs[0].with_history else "without"
        rep = evaluate([r.items for r in recs], _targets_for(recs, data, args.split), ks)
        if variant == "with":
            js = 0.0
        elif "with" in dists:
            js = distribution_divergence(dists["with"], dists["without"])
        else:
            js = math.nan
        rows.append([args.method, variant, *[rep.hr[k] for k in ks], *[rep.ndcg[k] for k in ks], js])
    out = Path(args.out)
    atomic_write_text(out, _csv_text(header, rows))
    write_manifest(out.parent, f"eval:{out.name}", run, args)
    print(_csv_text(header, rows), end="")
    return 0


def cmd_analyze(args) -> int:
    run = _run_config(args)
    n_groups = args.n_groups if args.n_groups is not None else run.eval.n_groups
    list_len = args.list_len if args.list_len is not None else run.eval.list_len
    catalog, data, _ = load_dataset(args.data)
    groups = popularity_groups(catalog, data.train, n_groups)
    rw, rwo = read_recommendations(args.recs_with), read_recommendations(args.recs_without)
    if rw and not rw[0].with_history or rwo and rwo[0].with_history:
        raise DataError("--recs-with / --recs-without files have the wrong history variant")
    gw = group_distribution([r.items for r in rw], groups, n_groups, list_len, True)
    gwo = group_distribution([r.items for r in rwo], groups, n_groups, list_len, False)
    js = distribution_divergence(gw, gwo)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(
        out / "groups.csv",
        _csv_text(["group", "share_with", "share_without"], [[g, gw.shares[g], gwo.shares[g]] for g in range(n_groups)]),
    )
    atomic_write_text(out / "divergence.json", json.dumps({"js_divergence": js, "n_groups": n_groups, "list_len": list_len}, sort_keys=True) + "\n")
    atomic_write_text(out / "groups.svg", bar_chart_svg(gw.shares, gwo.shares))
    write_manifest(out, "analyze", run, args)
    print(f"JS divergence (with vs without history): {js:.6f}")
    return 0


def cmd_sweep(args) -> int:
    run = _run_config(args)
    values = _parse_list(args.values, _parse_float)
    seeds = _parse_list(args.seeds, _parse_int)
    ks = run.eval.ks
    header = ["param", "value", "seed", "status", "best_epoch", "valid_L"] + [f"HR@{k}" for k in ks] + [f"NDCG@{k}" for k in ks]
    rows = []
    for seed in seeds:
        if args.data:
            catalog, data, gen = load_dataset(args.data)
        else:
            gen = replace(run.gen, seed=seed)
            catalog = generate_catalog(gen)
            data = generate_interactions(catalog, gen)
        vocab = corpus_vocab(catalog)
        mcfg = model_config_for(vocab, catalog, gen.history_len, run.model, seed)
        for value in values:
            if args.param == "lambda":
                cft = replace(run.cft, lam=value)
            else:
                cft = replace(run.cft, beta_prime=value, beta=None)
            tcfg = replace(run.train, seed=seed, cft=cft).validate()
            try:
                res = Trainer(DecoderLM(mcfg), catalog, vocab, tcfg).fit(data.train, data.valid)
                recs = recommend(res.model, catalog, vocab, data.test, True, max(ks), run.decode.width, run.decode.length_norm)
                rep = evaluate([r.items for r in recs], [s.target for s in data.test], ks)
                valid_l = min(r.valid_L for r in res.log)
                rows.append([args.param, value, seed, "ok", res.best_epoch, valid_l, *[rep.hr[k] for k in ks], *[rep.ndcg[k] for k in ks]])
            except NumericError as exc:
                print(f"{args.param}={value} seed={seed}: {exc}", file=sys.stderr)
                rows.append([args.param, value, seed, "diverged", 0, math.nan] + [math.nan] * (2 * len(ks)))
            print(f"{args.param}={value} seed={seed}: {rows[-1][3]}")
    out = Path(args.out)
    atomic_write_text(out, _csv_text(header, rows))
    write_manifest(out.parent, f"sweep:{out.name}", run, args)
    return 0


def cmd_compare(args) -> int:
    run = _run_config(args)
    model = dict(run.model)
    train = run.train
    if args.lr is not None:
        train = replace(train, learning_rate=args.lr)
    if args.epochs is not None:
        train = replace(train, max_epochs=args.epochs)
    cfg = ExperimentConfig(
        gen=run.gen, model=model, train=train, seeds=tuple(_parse_list(args.seeds, _parse_int)), tune=args.tune,
        lam_grid=tuple(_parse_list(args.lambdas, _parse_float)), n_groups=run.eval.n_groups,
        list_len=run.eval.list_len, width=run.decode.width, length_norm=run.decode.length_norm,
    )
    result = run_experiment(cfg, log=print)
    rows = result_rows(result)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "compare.csv", _csv_text(list(rows[0]), [list(r.values()) for r in rows]))
    summary = result.summary()
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "compare", None, args, {"experiment": config_dict(cfg)})
    print(json.dumps(summary, sort_keys=True))
    return 0


def _float_or_inf(text: str) -> float:
    value = float(text)
    if math.isnan(value):
        raise argparse.ArgumentTypeError("value must not be NaN")
    return value


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="cftrec", description="Counterfactual fine-tuning for generative recommendation.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"cftrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="INI file with [gen] [model] [train] [cft] [decode] [eval]")
        p.set_defaults(func=func)
        return p

    p = command("gen", cmd_gen, "generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override [gen] seed")

    p = command("train", cmd_train, "fine-tune a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="causal-loss weight (overrides [cft] lam)")
    p.add_argument("--beta-prime", type=_float_or_inf, default=None, help="token-weight decay; beta = 1 - 1/beta'")
    p.add_argument("--no-causal-loss", action="store_true", help="drop the causal loss (lambda = 0)")
    p.add_argument("--no-token-weights", action="store_true", help="uniform token weights (beta = 1) and unweighted L_n")
    p.add_argument("--seed", type=int, default=None, help="training and init seed")
    p.add_argument("--epochs", type=int, default=None, help="maximum epochs")
    p.add_argument("--lr", type=float, default=None, help="learning rate")
    p.add_argument("--verbose", action="store_true", help="print per-epoch losses")

    p = command("recommend", cmd_recommend, "write grounded recommendation lists")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output recommendations file (JSONL)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--with-history", dest="with_history", action="store_true", default=True, help="prompt with the history")
    g.add_argument("--no-history", dest="with_history", action="store_false", help="prompt with None instead of the history")
    p.add_argument("--length-norm", choices=("on", "off"), default=None, help="length-normalised beam ranking ([decode] length_norm)")
    p.add_argument("--width", type=int, default=None, help="beam width ([decode] width)")
    p.add_argument("--k", type=int, default=None, help="list length ([decode] k)")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test", help="which split to recommend for")

    p = command("eval", cmd_eval, "HR@K / NDCG@K of recommendation files")
    p.add_argument("--recs", required=True, nargs="+", help="one or more recommendation files")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output metrics.csv")
    p.add_argument("--k", default=None, help="comma-separated cutoffs ([eval] ks)")
    p.add_argument("--method", default="model", help="method label for the metrics rows")
    p.add_argument("--n-groups", type=int, default=None, help="popularity groups for the JS column")
    p.add_argument("--split", choices=("valid", "test"), default="test", help="split the recommendations target")

    p = command("analyze", cmd_analyze, "popularity-group distribution with vs without history")
    p.add_argument("--recs-with", required=True, help="with-history recommendations")
    p.add_argument("--recs-without", required=True, help="no-history recommendations")
    p.add_argument("--data", required=True, help="dataset directory (for training popularity)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-groups", type=int, default=None, help="number of popularity groups ([eval] n_groups)")
    p.add_argument("--list-len", type=int, default=None, help="list prefix analysed ([eval] list_len)")

    p = command("sweep", cmd_sweep, "train over a grid of lambda or beta' values")
    p.add_argument("--param", choices=("lambda", "beta_prime"), required=True, help="swept hyper-parameter")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--data", default=None, help="fixed dataset directory (default: generate per seed from [gen])")
    p.add_argument("--out", required=True, help="output sweep.csv")

    p = command("compare", cmd_compare, "multi-seed CFT vs baseline comparison")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p.add_argument("--lambdas", default=",".join(map(str, ExperimentConfig().lam_grid)), help="lambda grid")
    p.add_argument("--tune", choices=("first", "each"), default="first", help="choose lambda on the first seed or per seed")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    p.add_argument("--epochs", type=int, default=5, help="maximum epochs")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    tune_allocator()
    try:
        return args.func(args)
    except CftError as exc:
        print(f"cftrec: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"cftrec: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
