"""Does joint training help essay scoring?  A gamma_aes sweep on synthetic data.

Every grid point trains the same network from the same seed on the same
synthetic corpus; only gamma_aes changes.  The comparison of interest is the
best multi-task point (0 < gamma_aes < 1) against scoring alone (gamma_aes = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .corpus import SyntheticConfig, build_vocabulary, generate_synthetic
from .model import ModelConfig
from .training import SweepRow, TrainConfig, sweep_gamma

MULTI_TASK_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def default_synthetic() -> SyntheticConfig:
    return SyntheticConfig(
        n_train=2000, n_dev=200, n_test=200, min_len=10, max_len=30,
        error_rate=(0.0, 0.5), word_classes=8, misspelling_share=0.0, score_noise=1.0, seed=0,
    )


@dataclass
class DirectionalSetup:
    synthetic: SyntheticConfig = field(default_factory=default_synthetic)
    embedding_dim: int = 32
    hidden_dim: int = 32
    lm_vocab_cap: int = 500
    train: TrainConfig = field(default_factory=lambda: TrainConfig(selection_metric="qwk", max_epochs=40))
    grid: tuple[float, ...] = MULTI_TASK_GRID + (1.0,)
    min_gain: float = 0.05


@dataclass
class DirectionalResult:
    rows: list[SweepRow]
    best_gamma: float
    best_dev_qwk: float
    aes_only_dev_qwk: float
    best_test_qwk: float
    aes_only_test_qwk: float
    min_gain: float

    @property
    def dev_gain(self) -> float:
        return self.best_dev_qwk - self.aes_only_dev_qwk

    @property
    def test_gain(self) -> float:
        return self.best_test_qwk - self.aes_only_test_qwk

    @property
    def passed(self) -> bool:
        return self.dev_gain >= self.min_gain and self.test_gain > 0

    def summary(self) -> str:
        return (
            f"best multi-task gamma_aes={self.best_gamma:.1f} dev QWK {self.best_dev_qwk:.4f} "
            f"vs scoring-only {self.aes_only_dev_qwk:.4f} (gain {self.dev_gain:+.4f}, need >= {self.min_gain}); "
            f"test QWK {self.best_test_qwk:.4f} vs {self.aes_only_test_qwk:.4f} (gain {self.test_gain:+.4f})"
        )


def summarize(rows: list[SweepRow], min_gain: float = 0.05) -> DirectionalResult:
    by_gamma = {round(r.gamma_aes, 6): r for r in rows}
    if 1.0 not in by_gamma:
        raise ValueError("sweep lacks the scoring-only point gamma_aes=1.0")
    multi = [r for r in rows if 0.0 < r.gamma_aes < 1.0]
    if not multi:
        raise ValueError("sweep has no multi-task point with 0 < gamma_aes < 1")
    best = max(multi, key=lambda r: -math.inf if math.isnan(r.dev_qwk) else r.dev_qwk)
    alone = by_gamma[1.0]
    return DirectionalResult(
        rows=rows,
        best_gamma=best.gamma_aes,
        best_dev_qwk=best.dev_qwk,
        aes_only_dev_qwk=alone.dev_qwk,
        best_test_qwk=best.test_qwk,
        aes_only_test_qwk=alone.test_qwk,
        min_gain=min_gain,
    )


def run_directional(setup: DirectionalSetup | None = None, workers: int = 1, on_point=None) -> DirectionalResult:
    setup = setup or DirectionalSetup()
    train, dev, test = generate_synthetic(setup.synthetic)
    vocab = build_vocabulary(train)
    config = ModelConfig(
        vocab_size=len(vocab),
        embedding_dim=setup.embedding_dim,
        hidden_dim=setup.hidden_dim,
        lm_vocab_cap=setup.lm_vocab_cap,
    )
    rows = sweep_gamma(
        config, setup.train, train, dev, vocab, grid=setup.grid,
        test_essays=test, workers=workers, on_point=on_point,
    )
    return summarize(rows, setup.min_gain)
