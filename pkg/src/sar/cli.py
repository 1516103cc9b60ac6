"""Train, evaluate and inspect SAR rating-prediction models from the command line."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as data
from .baselines import mf_from_doc, save_mf, train_mf, train_nmf
from .evaluation import (
    HYPER_FIELDS,
    SWEEP_HEADER,
    evaluate,
    hyper_sweep,
    mean_by_value,
    sparsity_sweep,
)
from .model import (
    DivergenceError,
    SarHyperparams,
    SarModel,
    load_checkpoint,
    save_sar,
    sar_from_doc,
)
from .semantics import extract_profiles, project_profiles, write_profiles_csv
from .training import TrainConfig, train

log = logging.getLogger("sar")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    F: int = 10
    C: int = 10
    sigma: float = 1.0
    lam: float = 0.05
    eta: float = 0.6
    epsilon: float = 1e-6
    max_rounds: int = 400
    batch_size: int = 128
    tolerance: float = 1e-5
    patience: int = 5
    init_scale: float = 0.1
    threads: int = 1
    seed: int = 0
    rho: float = 0.8
    data: str = ""
    format: str = "ml100k"

    def hyperparams(self, rating_max: int) -> SarHyperparams:
        return SarHyperparams(self.F, self.C, rating_max, self.sigma, self.lam)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.eta, self.epsilon, self.max_rounds, self.batch_size, self.seed,
                           self.tolerance, self.patience, self.init_scale, self.threads)

    def validate(self) -> None:
        try:
            self.hyperparams(2)
            self.train_config()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if not 0 < self.rho < 1:
            raise UsageError(f"--rho must lie in (0, 1), got {self.rho}")
        if self.format not in data.FORMATS:
            raise UsageError(f"--format must be one of {sorted(data.FORMATS)}, got {self.format!r}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# config-file keys -> RunConfig field
CONFIG_KEYS = {f.name: f.name for f in dataclasses.fields(RunConfig)}
CONFIG_KEYS["lambda"] = "lam"


def read_config_file(path: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config: {path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"--config: {path}:{lineno}: unknown key {key!r}")
        out[CONFIG_KEYS[key]] = value
    return out


def _coerce(name: str, value):
    ftype = {f.name: f.type for f in dataclasses.fields(RunConfig)}[name]
    try:
        if ftype == "int":
            return int(value)
        if ftype == "float":
            return float(value)
        return str(value)
    except ValueError:
        raise UsageError(f"invalid value {value!r} for {name}") from None


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    if os.environ.get("SAR_THREADS") and "threads" not in values:
        values["threads"] = os.environ["SAR_THREADS"]
    for f in dataclasses.fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    cfg.validate()
    if not cfg.data:
        raise UsageError("--data is required (flag or config file)")
    return cfg


def effective_config(cfg: RunConfig, args: argparse.Namespace) -> dict:
    """Run configuration plus the command's own flags, as echoed into outputs."""
    out = cfg.as_dict()
    for key, value in sorted(vars(args).items()):
        if key not in out and key not in ("config", "verbose") and value is not None:
            out[key] = value
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--data", help="ratings file (or 'data' in the config file)")
    p.add_argument("--format", choices=sorted(data.FORMATS))
    p.add_argument("--rho", type=float, help="fraction of ratings used for training")
    p.add_argument("--seed", type=int)
    p.add_argument("--F", type=int, help="number of latent features")
    p.add_argument("--C", type=int, help="categories per feature")
    p.add_argument("--sigma", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-rounds", dest="max_rounds", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--init-scale", dest="init_scale", type=float)
    p.add_argument("--threads", type=int, help="worker threads (default $SAR_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sar", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit SAR on the training split")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="checkpoint JSON path")
    p.add_argument("--log", help="per-round CSV (default: <out>.log.csv)")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    p.add_argument("--save-split", dest="save_split", help="directory for train.txt/test.txt")

    p = sub.add_parser("eval", help="score a checkpoint on its held-out split")
    _add_run_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="metric,value CSV")

    p = sub.add_parser("predict", help="predict one rating")
    p.add_argument("--model", required=True)
    p.add_argument("--user", required=True, help="raw user ID")
    p.add_argument("--item", required=True, help="raw item ID")

    p = sub.add_parser("semantics", help="export per-feature profiles with 2-D PCA coordinates")
    _add_run_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--feature", type=int, required=True)
    p.add_argument("--kind", choices=["user", "item"], required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="retrain over a list of values of one setting")
    _add_run_flags(p)
    p.add_argument("--param", choices=["rho", "F", "C", "sigma", "lambda"], required=True)
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.add_argument("--out", help="sweep CSV")

    p = sub.add_parser("baseline", help="train and score an MF or NMF baseline")
    _add_run_flags(p)
    p.add_argument("--method", choices=["mf", "nmf"], required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--reg", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--out", help="checkpoint JSON path")

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=sorted(data.FORMATS), default="ml100k")
    return parser


def _load_data(path: str, fmt: str) -> data.RatingDataset:
    if not Path(path).is_file():
        raise UsageError(f"--data: no such file {path}")
    return data.parse_ratings(path, fmt)


def _load_doc(path: str) -> dict:
    if not Path(path).is_file():
        raise UsageError(f"--model: no such file {path}")
    return load_checkpoint(path)


def _with_checkpoint_defaults(args, doc: dict) -> None:
    """Fill unset split flags from the configuration stored at training time."""
    stored = doc.get("config", {})
    for name in ("rho", "seed", "format", "data"):
        if getattr(args, name, None) is None and name in stored:
            setattr(args, name, stored[name])


def _split_for(doc: dict, ds: data.RatingDataset, cfg: RunConfig) -> data.Split:
    if tuple(doc["user_ids"]) != ds.user_ids or tuple(doc["item_ids"]) != ds.item_ids:
        raise UsageError("--data: ID maps differ from the checkpoint's; wrong ratings file?")
    return data.split(ds, cfg.rho, cfg.seed)


def _model_from_doc(doc: dict):
    if doc.get("model_type", "sar") == "sar":
        params, hp = sar_from_doc(doc)
        return SarModel(params, hp)
    return mf_from_doc(doc)


def _print_metrics(metrics, out: str | None, header: str) -> None:
    width = max(len(name) for name, _ in metrics.rows())
    for name, value in metrics.rows():
        print(f"{name:<{width}}  {value:.6g}" if isinstance(value, float) else f"{name:<{width}}  {value}")
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(f"# config: {header}\n")
            fh.write("metric,value\n")
            for name, value in metrics.rows():
                fh.write(f"{name},{value!r}\n")


def cmd_train(args) -> None:
    cfg = build_config(args)
    ds = _load_data(cfg.data, cfg.format)
    sp = data.split(ds, cfg.rho, cfg.seed)
    hp = cfg.hyperparams(ds.rating_max)
    header = json.dumps(effective_config(cfg, args), sort_keys=True)
    if args.save_split:
        out_dir = Path(args.save_split)
        out_dir.mkdir(parents=True, exist_ok=True)
        data.write_triples(sp.train, out_dir / "train.txt")
        data.write_triples(sp.test, out_dir / "test.txt")

    def on_round(rnd, params, report):
        if args.checkpoint_every and rnd % args.checkpoint_every == 0:
            save_sar(args.out, params, hp, ds.user_ids, ds.item_ids,
                     {"config": effective_config(cfg, args), "rounds": rnd})

    params, report = train(sp.train, hp, cfg.train_config(), on_round=on_round)
    save_sar(args.out, params, hp, ds.user_ids, ds.item_ids,
             {"config": effective_config(cfg, args), "rounds": report.rounds, "stop_reason": report.stop_reason})
    log_path = args.log or f"{args.out}.log.csv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config: {header}\n")
        fh.write("\n".join(report.csv_rows()) + "\n")
    print(f"trained {report.rounds} rounds ({report.stop_reason}); "
          f"train RMSE {report.train_rmse[-1]:.4f}; checkpoint {args.out}")


def cmd_eval(args) -> None:
    doc = _load_doc(args.model)
    _with_checkpoint_defaults(args, doc)
    cfg = build_config(args)
    ds = _load_data(cfg.data, cfg.format)
    sp = _split_for(doc, ds, cfg)
    metrics = evaluate(_model_from_doc(doc), sp.test, sp.train)
    _print_metrics(metrics, args.out, json.dumps(effective_config(cfg, args), sort_keys=True))


def cmd_predict(args) -> None:
    doc = _load_doc(args.model)
    try:
        u = doc["user_ids"].index(str(args.user))
    except ValueError:
        raise UsageError(f"--user: unknown user id {args.user!r}") from None
    try:
        t = doc["item_ids"].index(str(args.item))
    except ValueError:
        raise UsageError(f"--item: unknown item id {args.item!r}") from None
    pred = _model_from_doc(doc).predict(np.array([u]), np.array([t]))[0]
    print(f"{pred:.6f}")


def cmd_semantics(args) -> None:
    doc = _load_doc(args.model)
    _with_checkpoint_defaults(args, doc)
    cfg = build_config(args)
    ds = _load_data(cfg.data, cfg.format)
    sp = _split_for(doc, ds, cfg)
    params, hp = sar_from_doc(doc)
    if not 0 <= args.feature < hp.num_features:
        raise UsageError(f"--feature must lie in [0, {hp.num_features}), got {args.feature}")
    profiles, skipped = extract_profiles(params, hp, sp.train, args.feature, args.kind)
    project_profiles(profiles)
    write_profiles_csv(profiles, args.out, "config: " + json.dumps(effective_config(cfg, args), sort_keys=True))
    print(f"wrote {len(profiles)} {args.kind} profiles to {args.out} ({len(skipped)} skipped)")


def _parse_list(flag: str, text: str, cast) -> list:
    try:
        values = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: cannot parse {text!r}") from None
    if not values:
        raise UsageError(f"{flag}: empty list")
    return values


def cmd_sweep(args) -> None:
    cfg = build_config(args)
    ds = _load_data(cfg.data, cfg.format)
    hp = cfg.hyperparams(ds.rating_max)
    seeds = _parse_list("--seeds", args.seeds, int) if args.seeds else [cfg.seed]
    values = _parse_list("--values", args.values, float)
    if args.param == "rho":
        if not all(0 < v < 1 for v in values):
            raise UsageError("--values: every rho must lie in (0, 1)")
        rows = sparsity_sweep(ds, values, hp, cfg.train_config(), seeds)
    else:
        field = HYPER_FIELDS[args.param]
        cast = int if args.param in ("F", "C") else float
        try:
            for v in values:
                dataclasses.replace(hp, **{field: cast(v)})
        except ValueError as exc:
            raise UsageError(f"--values: {exc}") from None
        rows = hyper_sweep(ds, args.param, values, hp, cfg.train_config(), cfg.rho, seeds)
    lines = [f"# config: {json.dumps(effective_config(cfg, args), sort_keys=True)}", SWEEP_HEADER]
    lines += [r.csv() for r in rows]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for value, mean in mean_by_value(rows).items():
        print(f"{args.param}={value:g}  mean RMSE {mean:.4f}")


def cmd_baseline(args) -> None:
    cfg = build_config(args)
    ds = _load_data(cfg.data, cfg.format)
    sp = data.split(ds, cfg.rho, cfg.seed)
    if args.method == "mf":
        model = train_mf(sp.train, args.k, args.lr, args.reg, args.epochs, cfg.seed)
        hyper = {"k": args.k, "lr": args.lr, "reg": args.reg, "epochs": args.epochs}
    else:
        model = train_nmf(sp.train, args.k, args.epochs, cfg.seed)
        hyper = {"k": args.k, "epochs": args.epochs}
    metrics = evaluate(model, sp.test, sp.train)
    _print_metrics(metrics, None, "")
    print(f"seconds/epoch  {np.mean(model.epoch_seconds):.4g}")
    if args.out:
        save_mf(args.out, model, ds.user_ids, ds.item_ids, hyper, {"config": effective_config(cfg, args)})


def cmd_stats(args) -> None:
    st = data.stats(_load_data(args.data, args.format))
    print(f"users     {st.num_users}")
    print(f"items     {st.num_items}")
    print(f"ratings   {st.num_ratings}")
    print(f"sparsity  {st.sparsity:.4%}")
    for r, n in st.histogram.items():
        print(f"rating {r}  {n}")


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "semantics": cmd_semantics,
    "sweep": cmd_sweep, "baseline": cmd_baseline, "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"sar: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sar: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, data.DatasetError, ValueError, OSError, KeyError) as exc:
        print(f"sar: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
