"""Command-line entry point: ``gedaes {train,eval,sweep,predict,gen-synthetic}``.

Run settings come from an optional ``key=value`` config file; every
:class:`RunConfig` field is also a ``--flag`` and flags win over the file.
The resolved settings are always written next to the run's artifacts.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from . import metrics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import (
    CorpusFormatError,
    Essay,
    SyntheticConfig,
    build_vocabulary,
    generate_synthetic,
    load_embeddings,
    parse_corpus,
    write_corpus,
)
from .kv import coerce, dataclass_pairs, read_kv_file, write_kv_file
from .model import ModelConfig
from .training import (
    DEFAULT_GRID,
    TrainConfig,
    best_gamma,
    encode_corpus,
    predict_corpus,
    sweep_gamma,
    train,
    write_sweep,
)

log = logging.getLogger("gedaes")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    train_path: str = ""
    dev_path: str = ""
    test_path: str = ""
    embedding_path: str = ""
    out: str = "runs/default"
    seed: int = 1
    min_count: int = 1
    # model
    embedding_dim: int = 300
    hidden_dim: int = 100
    gamma_lm: float = 0.1
    gamma_aes: float = 0.1
    ged_threshold: float = 0.5
    lm_vocab_cap: int = 0
    lm_combine: str = "mean"
    # optimisation
    batch_size: int = 8
    patience: int = 7
    max_epochs: int = 200
    rho: float = 0.95
    eps: float = 1e-6
    selection_metric: str = "auto"

    def model_config(self, vocab_size: int) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        kwargs = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        return ModelConfig(vocab_size=vocab_size, **kwargs)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            patience=self.patience,
            max_epochs=self.max_epochs,
            rho=self.rho,
            eps=self.eps,
            selection_metric=self.selection_metric,
            seed=self.seed,
        )


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_fields(parser, cls, skip=()):
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        parser.add_argument(_flag(f.name), dest=f.name, default=None, metavar=f.name.upper())


def _overrides(args, cls) -> dict[str, str]:
    return {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(cls)
        if getattr(args, f.name, None) is not None
    }


def resolve_run_config(args, required: tuple[str, ...] = ()) -> RunConfig:
    values: dict[str, str] = {}
    if args.config:
        try:
            values.update(read_kv_file(args.config))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    values.update(_overrides(args, RunConfig))
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for key, raw in values.items():
        try:
            kwargs[key] = coerce(str(known[key].type), raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    cfg = RunConfig(**kwargs)
    for key in required:
        path = getattr(cfg, key)
        if not path:
            raise ConfigError(f"missing required setting {key}")
        if not Path(path).exists():
            raise ConfigError(f"{key}: no such file {path}")
    if cfg.embedding_path and not Path(cfg.embedding_path).exists():
        raise ConfigError(f"embedding_path: no such file {cfg.embedding_path}")
    if cfg.patience < 1:
        raise ConfigError("patience must be >= 1")
    return cfg


def _load_labeled(path, what) -> list[Essay]:
    essays = parse_corpus(path)
    if not essays:
        raise CorpusFormatError(f"{what} corpus {path} holds no essays")
    for e in essays:
        if not e.is_labeled:
            raise CorpusFormatError(f"{what} corpus {path}: essay {e.id!r} lacks labels or a score")
    return essays


def _prepare(cfg: RunConfig):
    train_essays = _load_labeled(cfg.train_path, "train")
    dev_essays = _load_labeled(cfg.dev_path, "dev")
    vocab = build_vocabulary(train_essays, cfg.min_count)
    try:
        model_cfg = cfg.model_config(len(vocab))
        train_cfg = cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    embedding = None
    if cfg.embedding_path:
        emb = load_embeddings(cfg.embedding_path, vocab, cfg.embedding_dim, cfg.seed)
        log.info("embeddings: %d of %d rows pretrained", int(emb.pretrained.sum()), len(vocab))
        embedding = emb.matrix
    return train_essays, dev_essays, vocab, model_cfg, train_cfg, embedding


def cmd_train(args) -> int:
    cfg = resolve_run_config(args, required=("train_path", "dev_path"))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_kv_file(out / "config.resolved.txt", dataclass_pairs(cfg))
    train_essays, dev_essays, vocab, model_cfg, train_cfg, embedding = _prepare(cfg)
    params, record = train(model_cfg, train_cfg, train_essays, dev_essays, vocab, embedding)
    save_checkpoint(out / "checkpoint", params, model_cfg, vocab, cfg.seed)
    (out / "train_record.txt").write_text(record.to_lines(), encoding="utf-8")
    if record.stop_reason == "diverged":
        (out / "DIVERGED").write_text("training diverged; checkpoint holds the last good parameters\n")
        print(f"training diverged; last good checkpoint in {out / 'checkpoint'}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"best epoch {record.best_epoch} of {len(record.epochs)} ({record.stop_reason}); "
          f"artifacts in {out}")
    return EXIT_OK


def _evaluate(ckpt, essays):
    encoded = encode_corpus(essays, ckpt.vocab)
    labels, scores = predict_corpus(ckpt.params, ckpt.config, encoded)
    return labels, scores


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    essays = _load_labeled(args.corpus, "evaluation")
    labels, scores = _evaluate(ckpt, essays)
    gold_labels = [e.labels for e in essays]
    gold_scores = [e.gold_score for e in essays]
    report = metrics.evaluate(
        labels, gold_labels, scores, gold_scores, int(ckpt.config.score_min), int(ckpt.config.score_max)
    )
    if args.baseline:
        base = load_checkpoint(args.baseline)
        b_labels, b_scores = _evaluate(base, essays)
        if args.significance_metric == "f_half":
            report.p_value = metrics.significance_test(
                metrics.f_half_metric, labels, b_labels, gold_labels, args.iterations, args.seed
            )
        else:
            fn = metrics.qwk_metric if args.significance_metric == "qwk" else metrics.spearman_metric
            report.p_value = metrics.significance_test(
                fn, list(scores), list(b_scores), gold_scores, args.iterations, args.seed
            )
    print(report.table())
    print(report.to_kv())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.txt").write_text(report.to_kv() + "\n", encoding="utf-8")
    return EXIT_OK


def _parse_grid(text: str | None) -> list[float]:
    if not text:
        return list(DEFAULT_GRID)
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}") from exc


def cmd_sweep(args) -> int:
    cfg = resolve_run_config(args, required=("train_path", "dev_path"))
    grid = _parse_grid(args.grid)
    if any(not 0.0 <= g <= 1.0 for g in grid):
        raise ConfigError(f"grid values must lie in [0, 1]: {grid}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_kv_file(out / "config.resolved.txt", dataclass_pairs(cfg))
    train_essays, dev_essays, vocab, model_cfg, train_cfg, embedding = _prepare(cfg)
    test_essays = _load_labeled(cfg.test_path, "test") if cfg.test_path else None

    def keep(row, params, record):
        if args.save_checkpoints:
            point = out / f"gamma_{row.gamma_aes:.2f}"
            cfg_point = dataclasses.replace(model_cfg, gamma_aes=row.gamma_aes)
            save_checkpoint(point / "checkpoint", params, cfg_point, vocab, cfg.seed)
            (point / "train_record.txt").write_text(record.to_lines(), encoding="utf-8")

    rows = sweep_gamma(
        model_cfg, train_cfg, train_essays, dev_essays, vocab, grid, embedding,
        test_essays=test_essays, workers=args.workers, on_point=keep,
    )
    write_sweep(out / "sweep.txt", rows)
    for row in rows:
        print(row.to_line())
    print(f"best gamma_aes: GED (F0.5) {best_gamma(rows, 'f_half')}, AES (QWK) {best_gamma(rows, 'qwk')}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    essays = parse_corpus(args.corpus)
    labels, scores = _evaluate(ckpt, essays) if essays else ([], [])
    rounded = metrics.round_scores(scores, int(ckpt.config.score_min), int(ckpt.config.score_max))
    annotated = [
        Essay(e.id, e.tokens, [int(x) for x in lab], int(s))
        for e, lab, s in zip(essays, labels, rounded)
    ]
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out_path, annotated)
    print(f"wrote {len(annotated)} annotated essays to {out_path}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    overrides = _overrides(args, SyntheticConfig)
    kwargs = {}
    for f in dataclasses.fields(SyntheticConfig):
        if f.name in overrides:
            try:
                kwargs[f.name] = coerce(str(f.type), overrides[f.name])
            except ValueError as exc:
                raise ConfigError(f"bad value for {f.name}: {overrides[f.name]!r}") from exc
    try:
        syn = SyntheticConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, essays in zip(("train", "dev", "test"), generate_synthetic(syn)):
        write_corpus(out / f"{name}.txt", essays)
    write_kv_file(out / "synthetic.resolved.txt", dataclass_pairs(syn))
    print(f"wrote train/dev/test corpora to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gedaes", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (
        ("train", cmd_train, "train one model with early stopping"),
        ("sweep", cmd_sweep, "train once per gamma_aes grid point"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key=value run config file")
        _add_fields(p, RunConfig)
        if name == "sweep":
            p.add_argument("--grid", help="comma-separated gamma_aes values (default 0.0,0.1,...,1.0)")
            p.add_argument("--workers", type=int, default=1, help="grid points trained in parallel")
            p.add_argument("--save-checkpoints", action="store_true")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labelled corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="directory for eval_report.txt")
    p.add_argument("--baseline", help="second checkpoint for a paired significance test")
    p.add_argument("--significance-metric", choices=("qwk", "spearman", "f_half"), default="qwk")
    p.add_argument("--iterations", type=int, default=10000)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="annotate a corpus with predicted labels and scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gen-synthetic", help="write synthetic train/dev/test corpora")
    p.add_argument("--out", required=True)
    _add_fields(p, SyntheticConfig)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
