"""Command-line entry point: ``gmlfm <command> [options]``.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure,
3 oracle or gradient check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checks import DEFAULT_KS, DEFAULT_MS, GRADCHECK_SPECS, gradcheck, gradcheck_report, oracle_check
from .data import (
    UNKNOWN,
    CandidateBuilder,
    DataError,
    encode_instance,
    load_interactions,
    sample_negatives,
    split_leave_one_out,
    split_rating,
)
from .evaluate import MetricsReport, evaluate_rating, evaluate_topn, rank_items
from .io import (
    ModelFileError,
    item_attributes_from_header,
    layout_from_header,
    load_model,
    save_model,
    vocabulary_from_header,
)
from .model import KINDS, DistanceSpec, SpecError, predict_batch
from .train import HyperParams, fit, hyper_to_dict

log = logging.getLogger("gmlfm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class ExperimentConfig:
    task: str = "topn"
    data_path: str = ""
    data_format: str = "tabular"
    delimiter: str = "\t"
    n: int = 0  # libfm dimension (0 = read the sidecar)
    kind: str = "dnn"
    use_weight: bool = True
    layers: int = 2
    lr: float = 0.001
    batch_size: int = 256
    epochs: int = 20
    dropout: float = 0.2
    embed_dim: int = 64
    optimizer: str = "adam"
    l2: float = 0.0
    patience: int = 5
    init: str = "normal"
    seed: int = 0
    neg_ratio: int = 2
    candidates: int = 99
    top_k: int = 10
    output_dir: str = ""

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, raw):
        """Build and validate; the offending key is named on failure."""
        cfg = cls()
        types = {f.name: f.type for f in fields(cls)}
        for key, val in raw.items():
            key = key.replace("-", "_")
            if key == "distance":
                key = "kind"
            if key == "embed_size":
                key = "embed_dim"
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            caster = {"int": int, "float": float, "bool": _bool, "str": str}[types[key]]
            try:
                if key == "delimiter":
                    val = {"\\t": "\t", "tab": "\t"}.get(val, val)
                setattr(cfg, key, caster(val))
            except ValueError as exc:
                raise ConfigError(f"invalid value for {key!r}: {exc}") from None
        cfg.validate()
        return cfg

    def validate(self):
        if self.task not in ("rating", "topn"):
            raise ConfigError(f"task: expected 'rating' or 'topn', got {self.task!r}")
        if self.data_format not in ("tabular", "libfm"):
            raise ConfigError(f"data_format: unknown format {self.data_format!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"kind: unknown distance kind {self.kind!r}")
        try:
            self.spec()
            self.hyper()
        except (SpecError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.neg_ratio < 0:
            raise ConfigError("neg_ratio: must be >= 0")
        if self.task == "topn" and self.data_format != "tabular":
            raise ConfigError("task: top-n evaluation needs tabular data with user/item columns")

    def spec(self):
        layers = self.layers if self.kind in ("dnn", "manhattan", "chebyshev", "cosine") else 0
        return DistanceSpec(self.kind, self.use_weight, layers)

    def hyper(self):
        return HyperParams(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, dropout=self.dropout,
            k=self.embed_dim, layers=self.spec().layers, optimizer=self.optimizer, l2=self.l2,
            patience=self.patience, seed=self.seed, init=self.init,
        )

    def echo(self):
        d = asdict(self)
        d.pop("output_dir")
        d["toolkit_version"] = __version__
        return d


def read_config_file(path):
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    base = Path(path).parent
    if "data_path" in out and not Path(out["data_path"]).is_absolute():
        candidate = base / out["data_path"]
        if candidate.exists():
            out["data_path"] = str(candidate)
    return out


def write_config_file(path, cfg):
    lines = [f"# gmlfm {__version__}"]
    for k, v in asdict(cfg).items():
        v = "\\t" if v == "\t" else v
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- pipeline
def prepare(cfg, vocabulary=None):
    """Load, negative-sample and split per the task protocol."""
    if cfg.data_format == "libfm":
        loaded = load_interactions(cfg.data_path, "libfm", n=cfg.n or None)
    else:
        loaded = load_interactions(cfg.data_path, "tabular", delimiter=cfg.delimiter,
                                   vocabulary=vocabulary, reserve_unknown=vocabulary is None)
    layout, attrs = loaded.layout, loaded.item_attributes
    unk = _unknown_items(loaded.vocabulary)
    if cfg.task == "rating":
        inst = loaded.instances
        if layout.item_field is not None and cfg.neg_ratio > 0:
            inst = sample_negatives(inst, layout, cfg.neg_ratio, cfg.seed, attrs, exclude=unk)
        split = split_rating(inst, (0.7, 0.2, 0.1), cfg.seed, layout)
    else:
        split = split_leave_one_out(loaded.instances, layout)
        split.train = sample_negatives(split.train, layout, cfg.neg_ratio, cfg.seed, attrs, exclude=unk)
        n_items = layout.cardinalities[layout.position(layout.item_field)]
        split.candidates = CandidateBuilder(loaded.instances, n_items, cfg.candidates, cfg.seed, exclude=unk)
    split.item_attributes = attrs
    return loaded, split


def _unknown_items(vocab):
    if vocab is None or not vocab.reserve_unknown or "item" not in vocab.maps:
        return ()
    return (vocab.maps["item"][UNKNOWN],)


def final_metrics(cfg, params, spec, split):
    if cfg.task == "rating":
        return evaluate_rating(params, spec, split.test, config=cfg.echo())
    return evaluate_topn(params, spec, split.test, split.candidates, cfg.top_k, layout=split.layout,
                         item_attributes=split.item_attributes, config=cfg.echo())


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (ConfigError, SpecError):
        raise
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, exc) from exc


def cmd_train(cfg, force=False):
    if not cfg.data_path:
        raise ConfigError("data_path: required")
    if not cfg.output_dir:
        raise ConfigError("output_dir: required")
    out = Path(cfg.output_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output_dir: {out} is not empty (pass --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    spec, hyper = cfg.spec(), cfg.hyper()

    loaded, split = _stage("load", prepare, cfg)
    params, history = _stage("train", fit, split, spec, hyper, cfg.task)
    report = _stage("evaluate", final_metrics, cfg, params, spec, split)

    save_model(out / "model.bin", params, spec, loaded.layout, loaded.vocabulary, split.item_attributes,
               config=cfg.echo())
    meta = {"toolkit_version": __version__, "config": cfg.echo(), "hyper": hyper_to_dict(hyper),
            "spec": asdict(spec)}
    (out / "model.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_history(out / "history.tsv", history, cfg)
    (out / "metrics.txt").write_text(report.to_text())
    write_config_file(out / "config.txt", cfg)
    return report


def write_history(path, history, cfg):
    lines = [f"# gmlfm {__version__}"]
    lines += [f"# {k}={json.dumps(v)}" for k, v in sorted(cfg.echo().items())]
    lines.append("epoch\ttrain_loss\tval_metric\twall_time")
    for r in history:
        val = "" if r["val_metric"] is None else repr(r["val_metric"])
        lines.append(f"{r['epoch']}\t{r['train_loss']!r}\t{val}\t{r['wall_time']:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _model_config(model_path):
    meta = Path(model_path).with_name("model.meta.json")
    if not meta.exists():
        raise ConfigError(f"{meta} not found; evaluate needs the training config sidecar")
    return json.loads(meta.read_text())["config"]


def cmd_evaluate(model_path, data_path=None, task=None, output=None):
    params, spec, header = load_model(model_path)
    raw = _model_config(model_path)
    raw.pop("toolkit_version", None)
    if data_path:
        raw["data_path"] = data_path
    if task:
        raw["task"] = task
    cfg = ExperimentConfig.from_mapping(raw)
    vocab = vocabulary_from_header(header)
    loaded, split = _stage("load", prepare, cfg, vocab)
    if loaded.layout.n != params.n:
        raise ModelFileError(f"n mismatch (expected {params.n}, found {loaded.layout.n})")
    report = _stage("evaluate", final_metrics, cfg, params, spec, split)
    if output:
        Path(output).write_text(report.to_text())
    return report


def cmd_recommend(model_path, user, items=None, top_k=10):
    params, spec, header = load_model(model_path)
    vocab = vocabulary_from_header(header)
    layout = layout_from_header(header)
    if vocab is None or layout is None:
        raise ConfigError("model file carries no vocabulary; recommend needs tabular training data")
    attrs = item_attributes_from_header(header)
    if items is None or items == ["all"]:
        items = [c for c in vocab.maps["item"] if c != UNKNOWN]
    if not items:
        raise ConfigError("items: empty item universe")
    cats = []
    for name in layout.names:
        if name == "user":
            cats.append(vocab.encode("user", str(user)))
        elif name == "item":
            cats.append(0)
        else:
            cats.append(vocab.encode(name, UNKNOWN) if vocab.reserve_unknown else 0)
    rows = []
    for raw in items:
        it = vocab.encode("item", str(raw))
        c = list(cats)
        c[layout.position("item")] = it
        for p, v in attrs.get(it, {}).items():
            c[p] = v
        rows.append(encode_instance(c, layout).indices)
    idx = np.array(rows, dtype=np.intp)
    scores = predict_batch(params, idx, np.ones(idx.shape), spec)
    order = np.arange(len(items))
    ranked = rank_items(order, scores)
    top = ranked.items[: min(top_k, len(items))]
    return [(str(items[i]), float(scores[i])) for i in top]


def cmd_export_embeddings(model_path, field_name, output=None, delimiter="\t"):
    params, _, header = load_model(model_path)
    layout = layout_from_header(header)
    vocab = vocabulary_from_header(header)
    if layout is None or field_name not in layout.names:
        raise ConfigError(f"field: unknown field {field_name!r}")
    f = layout.position(field_name)
    off, card = layout.offsets[f], layout.cardinalities[f]
    names = {i: str(i) for i in range(card)}
    if vocab is not None:
        names = {v: k for k, v in vocab.maps[field_name].items()}
    lines = [f"# gmlfm {header.get('toolkit_version', __version__)} field={field_name} "
             f"config={json.dumps(header.get('config') or {}, sort_keys=True)}",
             delimiter.join(["category"] + [f"v{j}" for j in range(params.k)])]
    for c in range(card):
        if names.get(c) == UNKNOWN:
            continue
        lines.append(delimiter.join([names[c]] + [repr(float(x)) for x in params.V[off + c]]))
    text = "\n".join(lines) + "\n"
    if output:
        Path(output).write_text(text)
    return text


# ------------------------------------------------------------------ parser
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(s):
    return [int(x) for x in s.split(",") if x.strip()]


def build_parser():
    p = _Parser(prog="gmlfm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="split, train, evaluate and write an experiment directory")
    t.add_argument("--config")
    t.add_argument("--task")
    t.add_argument("--data", dest="data_path")
    t.add_argument("--format", dest="data_format")
    t.add_argument("--distance", dest="kind")
    t.add_argument("--layers", type=int)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--optimizer")
    t.add_argument("--l2", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir")
    t.add_argument("--use-weight")
    t.add_argument("--neg-ratio", type=int)
    t.add_argument("--init", choices=("normal", "orthogonal"))
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("evaluate", help="re-run the evaluation protocol for a saved model")
    e.add_argument("model")
    e.add_argument("--data")
    e.add_argument("--task")
    e.add_argument("--output")

    r = sub.add_parser("recommend", help="rank items for one user")
    r.add_argument("model")
    r.add_argument("--user", required=True)
    r.add_argument("--items", default="all", help="comma-separated item ids, or 'all'")
    r.add_argument("--top-k", type=int, default=10)

    o = sub.add_parser("oracle-check", help="fast second-order forms vs the pairwise sum")
    o.add_argument("--k", type=_int_list, default=list(DEFAULT_KS))
    o.add_argument("--m", type=_int_list, default=list(DEFAULT_MS))
    o.add_argument("--trials", type=int, default=1000)
    o.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gradcheck", help="tape gradients vs central differences")
    g.add_argument("--kinds", default=",".join(KINDS))
    g.add_argument("--seed", type=int, default=0)

    x = sub.add_parser("export-embeddings", help="write one field's embedding table")
    x.add_argument("model")
    x.add_argument("--field", required=True)
    x.add_argument("--output")
    return p


def _train_config(args):
    raw = read_config_file(args.config) if args.config else {}
    for key in ExperimentConfig.keys():
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    return ExperimentConfig.from_mapping(raw)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "train":
            report = cmd_train(_train_config(args), force=args.force)
            sys.stdout.write(report.to_text())
        elif args.command == "evaluate":
            sys.stdout.write(cmd_evaluate(args.model, args.data, args.task, args.output).to_text())
        elif args.command == "recommend":
            items = None if args.items == "all" else [s for s in args.items.split(",") if s]
            for item, score in cmd_recommend(args.model, args.user, items, args.top_k):
                print(f"{item}\t{score!r}")
        elif args.command == "oracle-check":
            if args.trials < 1:
                raise ConfigError("trials: must be >= 1")
            report = oracle_check(args.k, args.m, args.trials, args.seed)
            sys.stdout.write(report.to_text())
            return EXIT_OK if report.passed else EXIT_CHECK
        elif args.command == "gradcheck":
            kinds = [k for k in args.kinds.split(",") if k]
            for k in kinds:
                if k not in KINDS:
                    raise ConfigError(f"kinds: unknown distance kind {k!r}")
            specs = [s for s in GRADCHECK_SPECS if s.kind in kinds]
            ok, text = gradcheck_report(gradcheck(specs, args.seed))
            sys.stdout.write(text)
            return EXIT_OK if ok else EXIT_CHECK
        elif args.command == "export-embeddings":
            text = cmd_export_embeddings(args.model, args.field, args.output)
            if not args.output:
                sys.stdout.write(text)
        return EXIT_OK
    except (ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, ModelFileError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
