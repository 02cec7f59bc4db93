import pytest

from gedaes.corpus import SyntheticConfig, build_vocabulary, generate_synthetic
from gedaes.model import ModelConfig

# acceptance lines, echoed in the terminal summary so they show without -s
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus():
    """A few short synthetic essays plus their vocabulary."""
    train, dev, test = generate_synthetic(
        SyntheticConfig(vocab_size=40, n_train=12, n_dev=6, n_test=6, min_len=4, max_len=8, seed=2)
    )
    return train, dev, test, build_vocabulary(train + dev + test)


@pytest.fixture
def small_model(small_corpus):
    vocab = small_corpus[3]
    return ModelConfig(vocab_size=len(vocab), embedding_dim=6, hidden_dim=4)
