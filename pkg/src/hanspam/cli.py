"""Command-line entry point: stats, train, eval, cross, gradcheck, report.

Configuration comes from one JSON file plus flag overrides (flags win). Every
artifact lands under the output directory together with a snapshot of the
exact configuration and seed that produced it, so a run can be reproduced
from its outputs alone. Exit codes: 0 success, 1 runtime failure, 2 bad
input or configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    DatasetSpec,
    FoldError,
    PartialMatrixError,
    cross_dataset_eval,
    evaluate_scores,
    worker_count,
)
from .ingest import (
    EmptyCorpusError,
    LayoutError,
    corpus_stats,
    load_corpus,
    render_stats,
    to_document,
)
from .model import ConfigError, HanConfig, HanModel
from .training import TrainConfig, TrainingDiverged, train
from .vocab import PretrainedFormatError, VocabError, build_vocab, load_pretrained

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INPUT = 2

INPUT_ERRORS = (
    LayoutError,
    EmptyCorpusError,
    ConfigError,
    VocabError,
    PretrainedFormatError,
    FoldError,
    PartialMatrixError,
    FileNotFoundError,
    NotADirectoryError,
    json.JSONDecodeError,
)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _merge_config(args: argparse.Namespace) -> dict:
    """File settings overlaid with any flags the user actually passed."""
    cfg = {
        "seed": 0,
        "out": "out",
        "model": {},
        "train": {},
        "data": {},
        "datasets": {},
        "eval": {"kfold": 10, "expected_datasets": 5},
    }
    file_cfg = _load_config_file(getattr(args, "config", None))
    for key, value in file_cfg.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value

    for flag, target in (
        ("seed", ("seed",)),
        ("out", ("out",)),
        ("data", ("data", "path")),
        ("layout", ("data", "layout")),
        ("variant", ("model", "variant")),
        ("epochs", ("train", "epochs")),
        ("batch", ("train", "batch_size")),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            node = cfg
            for part in target[:-1]:
                node = node.setdefault(part, {})
            node[target[-1]] = value
    return cfg


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: dict, out: Path) -> None:
    (out / "config_snapshot.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _ingest(cfg: dict, min_count: int = 2, include_subject: bool = False):
    data = cfg.get("data", {})
    if "path" not in data:
        raise ConfigError("no corpus path given (use --data or the config file)")
    loaded = load_corpus(data["path"], data.get("layout", "merged"))
    model_cfg = cfg.get("model", {})
    s_max = model_cfg.get("s_max", 30)
    t_max = model_cfg.get("t_max", 50)
    docs = [
        to_document(e, s_max=s_max, t_max=t_max, include_subject=include_subject)
        for e in loaded.emails
    ]
    kept = [d for d in docs if not d.empty]
    dropped = [d.doc_id for d in docs if d.empty]
    return loaded, kept, dropped


def _build_model(cfg: dict, vocab, seed: int) -> HanModel:
    model_cfg = dict(cfg.get("model", {}))
    pretrained = model_cfg.pop("pretrained_vectors", None)
    config = HanConfig.from_dict(model_cfg) if model_cfg else HanConfig()
    if pretrained:
        table, report = load_pretrained(
            pretrained,
            vocab,
            dim=config.embed_dim,
            n_min=config.embed_n_min,
            n_max=config.embed_n_max,
            buckets=config.embed_buckets,
            seed=seed,
        )
        print(f"pretrained vectors: {report.hits} hits, {report.misses} misses", file=sys.stderr)
    else:
        table = None
    return HanModel(config, vocab, table=table, seed=seed)


def _stratified_holdout(labels: np.ndarray, frac: float, seed: int):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5B11])))
    val_idx = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_val = max(1, int(round(idx.size * frac))) if idx.size > 1 else 0
        val_idx.extend(idx[:n_val].tolist())
    val = np.zeros(labels.size, dtype=bool)
    val[val_idx] = True
    return np.flatnonzero(~val), np.flatnonzero(val)


def _train_on_documents(cfg: dict, documents, val_documents, seed: int) -> tuple[HanModel, object]:
    vocab = build_vocab(documents, min_count=cfg.get("train", {}).get("min_count", 2))
    model = _build_model(cfg, vocab, seed)
    train_cfg = TrainConfig(
        seed=seed,
        **{
            k: v
            for k, v in cfg.get("train", {}).items()
            if k in ("batch_size", "epochs", "patience", "class_weight", "lr", "clip_norm")
        },
    )
    encoded_train = model.encode(documents)
    encoded_val = model.encode(val_documents)
    result = train(model, encoded_train, encoded_val, train_cfg)
    return model, result


# --- subcommands --------------------------------------------------------------

def cmd_stats(args) -> int:
    cfg = _merge_config(args)
    loaded = load_corpus(cfg["data"]["path"], cfg["data"].get("layout", "merged"))
    stats = corpus_stats(loaded.emails, include_subject=args.include_subject)
    print(render_stats(stats))
    if args.out:
        out = _out_dir(cfg)
        _snapshot(cfg, out)
        record = stats.as_dict()
        record["seed"] = cfg["seed"]
        (out / "stats.jsonl").write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")
        (out / "skip_report.txt").write_text(
            "".join(f"{path}\t{reason}\n" for path, reason in loaded.skipped), encoding="utf-8"
        )
    if loaded.skipped:
        print(f"skipped {len(loaded.skipped)} unreadable files", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _merge_config(args)
    out = _out_dir(cfg)
    _snapshot(cfg, out)
    seed = int(cfg["seed"])

    _, kept, dropped = _ingest(cfg, include_subject=args.include_subject)
    labels = np.array([d.label for d in kept])
    train_idx, val_idx = _stratified_holdout(labels, cfg.get("train", {}).get("val_fraction", 0.1), seed)
    train_docs = [kept[i] for i in train_idx]
    val_docs = [kept[i] for i in val_idx]

    model, result = _train_on_documents(cfg, train_docs, val_docs, seed)

    history = [
        {"epoch": r.epoch, "train_loss": r.train_loss, "val_auc": r.val_auc} for r in result.log
    ]
    model.save(
        out / "checkpoint.bin",
        extra={"seed": seed, "history": history, "best_epoch": result.best_epoch},
    )
    with open(out / "epochs.jsonl", "w", encoding="utf-8") as fh:
        for r in result.log:
            fh.write(json.dumps(r.as_dict(), sort_keys=True) + "\n")
    if dropped:
        (out / "skip_report.txt").write_text("".join(f"{d}\tempty\n" for d in dropped), encoding="utf-8")
    for r in result.log:
        print(f"epoch {r.epoch}: loss {r.train_loss:.4f} val_auc {r.val_auc:.4f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _merge_config(args)
    model = HanModel.load(args.checkpoint)
    _, kept, _ = _ingest(cfg, include_subject=args.include_subject)
    encoded = model.encode(kept)
    scores = model.score(encoded)
    labels = np.array([d.label for d in kept])
    cell = evaluate_scores(scores, labels, train_id=str(args.checkpoint), test_id=cfg["data"]["path"])
    print(json.dumps(cell.as_dict(), sort_keys=True))
    if args.out:
        out = _out_dir(cfg)
        _snapshot(cfg, out)
        (out / "eval.jsonl").write_text(json.dumps(cell.as_dict(), sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_cross(args) -> int:
    cfg = _merge_config(args)
    out = _out_dir(cfg)
    _snapshot(cfg, out)
    seed = int(cfg["seed"])
    datasets_cfg = cfg.get("datasets") or {}
    if not datasets_cfg:
        raise ConfigError("cross needs a 'datasets' table in the config file")

    specs = []
    for name in sorted(datasets_cfg):
        entry = datasets_cfg[name]
        loaded = load_corpus(entry["path"], entry.get("layout", "merged"))
        model_cfg = cfg.get("model", {})
        docs = [
            to_document(
                e,
                s_max=model_cfg.get("s_max", 30),
                t_max=model_cfg.get("t_max", 50),
                include_subject=args.include_subject,
            )
            for e in loaded.emails
        ]
        docs = [d for d in docs if not d.empty]
        specs.append(
            DatasetSpec(
                name=name,
                docs=docs,
                labels=np.array([d.label for d in docs]),
                groups=[d.group for d in docs] if entry.get("diagonal", "cv") != "cv" else None,
                diagonal=entry.get("diagonal", "cv"),
            )
        )

    def train_fn(train_docs, val_docs):
        model, _ = _train_on_documents(cfg, list(train_docs), list(val_docs), seed)
        return model

    def score_fn(model, docs):
        return model.score(model.encode(list(docs)))

    matrix = cross_dataset_eval(
        specs,
        train_fn,
        score_fn,
        k=int(cfg.get("eval", {}).get("kfold", 10)),
        seed=seed,
        expected=int(cfg.get("eval", {}).get("expected_datasets", 5)),
    )
    (out / "matrix.jsonl").write_text(matrix.to_jsonl(), encoding="utf-8")
    (out / "matrix.tsv").write_text(matrix.to_tsv(), encoding="utf-8")
    print(matrix.render_auc_grid())
    print(f"threads: {worker_count()}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    failures = 0
    for name, err, ok in run_suite():
        status = "pass" if ok else "FAIL"
        print(f"{status}  {name:<22} max_rel_err={err:.3e} (tol {TOLERANCE:.0e})")
        failures += 0 if ok else 1
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


def cmd_report(args) -> int:
    path = Path(args.matrix)
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
    cell_recs = [r for r in records if "aggregate" not in r]
    agg_recs = {r["aggregate"]: r for r in records if "aggregate" in r}
    if not cell_recs:
        raise ConfigError(f"{path} holds no evaluation cells")
    cols = ["train", "test", "accuracy", "precision", "recall", "f1", "auc"]
    widths = [max(len(c), 10) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in cell_recs:
        row = [r["train_id"], r["test_id"]] + [
            f"{r[c]:.4f}" for c in ("accuracy", "precision", "recall", "f1", "auc")
        ]
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    for key in ("sd_avg", "cd_avg"):
        if key in agg_recs:
            r = agg_recs[key]
            print(f"{key.upper()}: {r['mean']:.5f} (stddev {r['stddev']:.5f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hanspam",
        description="Hierarchical attention spam classifier: ingest, train, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"hanspam {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--include-subject", action="store_true",
                       help="prepend the Subject line to the classified text")
        if data:
            p.add_argument("--data", default=None, help="corpus root directory")
            p.add_argument("--layout", default=None,
                           help="corpus layout (merged, lingspam, spamassassin, genspam, enron, trec)")

    p_stats = sub.add_parser("stats", help="corpus breakdown and superficial-feature statistics")
    common(p_stats)
    p_stats.set_defaults(fn=cmd_stats)

    p_train = sub.add_parser("train", help="train a classifier and write a checkpoint")
    common(p_train)
    p_train.add_argument("--variant", choices=("none", "cnn", "tcn"), default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--batch", type=int, default=None)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="score a corpus with a saved checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.set_defaults(fn=cmd_eval)

    p_cross = sub.add_parser("cross", help="full train-by-test dataset grid")
    common(p_cross, data=False)
    p_cross.add_argument("--variant", choices=("none", "cnn", "tcn"), default=None)
    p_cross.add_argument("--epochs", type=int, default=None)
    p_cross.add_argument("--batch", type=int, default=None)
    p_cross.set_defaults(fn=cmd_cross)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_report = sub.add_parser("report", help="render a saved matrix record file")
    p_report.add_argument("--matrix", required=True, help="matrix.jsonl produced by cross")
    p_report.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDiverged, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
