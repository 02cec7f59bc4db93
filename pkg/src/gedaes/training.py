"""Adadelta training with mini-batches, dev-set early stopping, and the gamma_aes sweep."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .corpus import Essay, Vocabulary
from .kv import format_record, parse_record
from .model import ModelConfig, ModelParams, forward, init_params, loss_and_grads, predict_labels

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(11))


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    patience: int = 7
    max_epochs: int = 200
    rho: float = 0.95
    eps: float = 1e-6
    selection_metric: str = "auto"  # auto | f_half | qwk
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if not 0.0 < self.rho < 1.0 or self.eps <= 0:
            raise ValueError("need 0 < rho < 1 and eps > 0")
        if self.selection_metric not in ("auto", "f_half", "qwk"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")

    def metric_for(self, model_config: ModelConfig) -> str:
        if self.selection_metric != "auto":
            return self.selection_metric
        return "qwk" if model_config.gamma_aes >= 1.0 else "f_half"


# --- optimizer -------------------------------------------------------------------


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    acc_grad: dict[str, np.ndarray] = field(default_factory=dict)
    acc_update: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, rho: float = 0.95, eps: float = 1e-6) -> "AdadeltaState":
        return cls(
            rho,
            eps,
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
        )


def adadelta_update(state: AdadeltaState, params: ModelParams, grads: dict[str, np.ndarray]):
    """One Adadelta step, in place.  A non-finite gradient rejects the whole step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
        if g.shape != getattr(params, name).shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape for {name}")
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        acc_g = state.acc_grad[name]
        acc_u = state.acc_update[name]
        acc_g *= rho
        acc_g += (1.0 - rho) * g * g
        delta = -np.sqrt(acc_u + eps) / np.sqrt(acc_g + eps) * g
        acc_u *= rho
        acc_u += (1.0 - rho) * delta * delta
        getattr(params, name)[...] += delta
    return state, params


# --- early stopping ----------------------------------------------------------------


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int = 7):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        v = -math.inf if value is None or math.isnan(value) else value
        if self.best_epoch is None or v > self.best:
            self.best, self.best_epoch, self.bad_epochs = v, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# --- records ------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_f_half: float
    dev_qwk: float
    dev_spearman: float
    seconds: float


@dataclass
class TrainRecord:
    selection_metric: str
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stop_reason: str = ""

    def selection_values(self) -> list[float]:
        key = "dev_" + self.selection_metric
        return [getattr(e, key) for e in self.epochs]

    def to_lines(self) -> str:
        lines = [
            format_record(
                [("record", "epoch")] + [(k, getattr(e, k)) for k in EpochRecord.__dataclass_fields__]
            )
            for e in self.epochs
        ]
        lines.append(
            format_record(
                [
                    ("record", "summary"),
                    ("selection_metric", self.selection_metric),
                    ("best_epoch", self.best_epoch if self.best_epoch is not None else 0),
                    ("epochs", len(self.epochs)),
                    ("stop_reason", self.stop_reason),
                ]
            )
        )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_lines(cls, text: str) -> "TrainRecord":
        record = cls(selection_metric="")
        for line in text.splitlines():
            if not line.strip():
                continue
            row = parse_record(line)
            kind = row.pop("record")
            if kind == "epoch":
                record.epochs.append(
                    EpochRecord(
                        epoch=int(row["epoch"]),
                        **{k: float(row[k]) for k in EpochRecord.__dataclass_fields__ if k != "epoch"},
                    )
                )
            elif kind == "summary":
                record.selection_metric = row["selection_metric"]
                record.best_epoch = int(row["best_epoch"]) or None
                record.stop_reason = row["stop_reason"]
        return record


# --- inference ------------------------------------------------------------------------


def encode_corpus(essays: Sequence[Essay], vocab: Vocabulary) -> list[np.ndarray]:
    return [vocab.encode(e.tokens) for e in essays]


def predict_corpus(params: ModelParams, config: ModelConfig, encoded: Sequence[np.ndarray]):
    """Per-essay predicted label arrays and real-valued scores."""
    labels, scores = [], []
    for ids in encoded:
        out = forward(params, config, ids)
        labels.append(predict_labels(out.ged_probs, config.ged_threshold))
        scores.append(out.predicted_score)
    return labels, np.array(scores)


def evaluate_corpus(
    params: ModelParams, config: ModelConfig, essays: Sequence[Essay], encoded=None, vocab=None
) -> metrics.EvalReport:
    if encoded is None:
        encoded = encode_corpus(essays, vocab)
    labels, scores = predict_corpus(params, config, encoded)
    return metrics.evaluate(
        labels,
        [e.labels for e in essays],
        scores,
        [e.gold_score for e in essays],
        int(config.score_min),
        int(config.score_max),
    )


# --- training loop ---------------------------------------------------------------------


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_essays: Sequence[Essay],
    dev_essays: Sequence[Essay],
    vocab: Vocabulary,
    embedding: np.ndarray | None = None,
    evaluate_fn: Callable[[ModelParams, int], dict] | None = None,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
) -> tuple[ModelParams, TrainRecord]:
    """Train until the dev selection metric stalls for ``patience`` epochs.

    Returns a copy of the parameters from the best dev epoch.  ``evaluate_fn``
    (params, epoch) -> {"f_half", "qwk", "spearman"} replaces the dev-set
    evaluation, which is how scripted metric sequences are injected in tests.
    """
    if not train_essays or (not dev_essays and evaluate_fn is None):
        raise ValueError("train: need non-empty train and dev corpora")
    for essay in train_essays:
        if not essay.is_labeled:
            raise ValueError(f"train: essay {essay.id!r} lacks labels or a score")
    if len(vocab) != model_config.vocab_size:
        raise ValueError("train: vocabulary size does not match model config")

    seed = train_config.seed
    rng = np.random.default_rng(seed)
    params = init_params(model_config, seed=seed, embedding=embedding)
    state = AdadeltaState.for_params(params, train_config.rho, train_config.eps)
    train_ids = encode_corpus(train_essays, vocab)
    dev_ids = encode_corpus(dev_essays, vocab) if dev_essays else []

    metric = train_config.metric_for(model_config)
    record = TrainRecord(selection_metric=metric)
    stopper = EarlyStopping(train_config.patience)
    best = params.copy()
    bs = train_config.batch_size

    for epoch in range(1, train_config.max_epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_essays))
        total = 0.0
        try:
            for b0 in range(0, len(order), bs):
                batch = order[b0 : b0 + bs]
                grads = None
                for k in batch:
                    loss, _, g = loss_and_grads(params, model_config, train_ids[k], train_essays[k])
                    if not math.isfinite(loss.e):
                        raise NonFiniteGradientError(f"non-finite loss on essay {train_essays[k].id}")
                    total += loss.e
                    if grads is None:
                        grads = g
                    else:
                        for name in grads:
                            grads[name] += g[name]
                for name in grads:
                    grads[name] /= len(batch)
                adadelta_update(state, params, grads)
        except NonFiniteGradientError as exc:
            log.warning("epoch %d: %s; keeping last good parameters", epoch, exc)
            record.stop_reason = "diverged"
            if record.best_epoch is None:
                best = params.copy()
            return best, record

        if evaluate_fn is not None:
            dev = evaluate_fn(params, epoch)
        else:
            rep = evaluate_corpus(params, model_config, dev_essays, dev_ids)
            dev = {"f_half": rep.f_half, "qwk": rep.qwk, "spearman": rep.spearman}
        record.epochs.append(
            EpochRecord(
                epoch,
                total / len(order),
                dev["f_half"],
                dev["qwk"],
                dev["spearman"],
                time.perf_counter() - start,
            )
        )
        if stopper.update(epoch, dev[metric]):
            best = params.copy()
            record.best_epoch = epoch
        log.info(
            "epoch %d loss=%.4f dev_f0.5=%.4f dev_qwk=%.4f%s",
            epoch, total / len(order), dev["f_half"], dev["qwk"],
            " *" if record.best_epoch == epoch else "",
        )
        if on_epoch is not None:
            on_epoch(epoch, params)
        if stopper.should_stop:
            record.stop_reason = "patience"
            break
    else:
        record.stop_reason = "max_epochs"
    return best, record


# --- gamma_aes sweep -----------------------------------------------------------------------


@dataclass
class SweepRow:
    gamma_aes: float
    dev_f_half: float
    dev_qwk: float
    dev_spearman: float
    best_epoch: int
    epochs: int
    selection_metric: str
    test_f_half: float = math.nan
    test_qwk: float = math.nan
    test_spearman: float = math.nan

    def to_line(self) -> str:
        return format_record((k, getattr(self, k)) for k in self.__dataclass_fields__)


SWEEP_INT_FIELDS = ("best_epoch", "epochs")


def _sweep_point(args):
    gamma, model_config, train_config, train_essays, dev_essays, test_essays, vocab, embedding = args
    cfg = replace(model_config, gamma_aes=gamma)
    params, record = train(cfg, train_config, train_essays, dev_essays, vocab, embedding)
    dev = evaluate_corpus(params, cfg, dev_essays, vocab=vocab)
    row = SweepRow(
        gamma_aes=gamma,
        dev_f_half=dev.f_half,
        dev_qwk=dev.qwk,
        dev_spearman=dev.spearman,
        best_epoch=record.best_epoch or 0,
        epochs=len(record.epochs),
        selection_metric=record.selection_metric,
    )
    if test_essays:
        test = evaluate_corpus(params, cfg, test_essays, vocab=vocab)
        row.test_f_half, row.test_qwk, row.test_spearman = test.f_half, test.qwk, test.spearman
    return row, params, record


def sweep_gamma(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_essays: Sequence[Essay],
    dev_essays: Sequence[Essay],
    vocab: Vocabulary,
    grid: Sequence[float] = DEFAULT_GRID,
    embedding: np.ndarray | None = None,
    test_essays: Sequence[Essay] | None = None,
    workers: int = 1,
    on_point: Callable[[SweepRow, ModelParams, TrainRecord], None] | None = None,
) -> list[SweepRow]:
    """Train once per gamma_aes with identical seed and data; one row per grid point."""
    grid = sorted({float(g) for g in grid})
    if not grid or any(not 0.0 <= g <= 1.0 for g in grid):
        raise ValueError(f"sweep grid must be a non-empty subset of [0, 1], got {grid}")
    jobs = [
        (g, model_config, train_config, train_essays, dev_essays, test_essays, vocab, embedding)
        for g in grid
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_sweep_point(job))
            log.info("gamma_aes=%.1f done: %s", job[0], results[-1][0].to_line())
    rows = []
    for row, params, record in results:
        if on_point is not None:
            on_point(row, params, record)
        rows.append(row)
    return rows


def best_gamma(rows: Sequence[SweepRow], metric: str) -> float:
    """gamma_aes maximising a dev metric (``f_half`` or ``qwk``); first wins ties."""
    key = "dev_" + metric
    values = [(-math.inf if math.isnan(getattr(r, key)) else getattr(r, key)) for r in rows]
    return rows[int(np.argmax(values))].gamma_aes


def write_sweep(path, rows: Sequence[SweepRow]) -> None:
    Path(path).write_text("".join(r.to_line() + "\n" for r in rows), encoding="utf-8")


def read_sweep(path) -> list[SweepRow]:
    """Parse and validate a sweep file; raises ValueError on any malformed row."""
    rows = []
    names = list(SweepRow.__dataclass_fields__)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        raw = parse_record(line)
        missing = [k for k in names if k not in raw]
        if missing:
            raise ValueError(f"{path}:{lineno}: missing fields {missing}")
        kwargs = {}
        for k in names:
            if k in SWEEP_INT_FIELDS:
                kwargs[k] = int(raw[k])
            elif k == "selection_metric":
                kwargs[k] = raw[k]
            else:
                kwargs[k] = float(raw[k])
        row = SweepRow(**kwargs)
        if not 0.0 <= row.gamma_aes <= 1.0:
            raise ValueError(f"{path}:{lineno}: gamma_aes {row.gamma_aes} outside [0, 1]")
        rows.append(row)
    gammas = [r.gamma_aes for r in rows]
    if gammas != sorted(set(gammas)):
        raise ValueError(f"{path}: gamma_aes values must be strictly increasing")
    return rows
