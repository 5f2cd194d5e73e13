import numpy as np
import pytest

from invertext.data import generate_synthetic_corpus
from invertext.encoder import ToyEncoder
from invertext.text import Vocabulary


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(seed=3, size=300, vocab_size=60, len_min=3, len_max=8)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return Vocabulary.build(small_corpus.texts)


@pytest.fixture(scope="session")
def small_encoder(small_vocab):
    return ToyEncoder(small_vocab, dim=32, max_tokens=16, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_artifacts(tmp_path_factory, small_corpus, small_vocab, small_encoder):
    """Untrained tiny base/corrector checkpoints, an encoder file and a test corpus on disk."""
    import torch

    from invertext.data import Corpus, write_corpus_jsonl
    from invertext.inversion import BaseModel, CorrectorModel
    from invertext.models import InverterNet
    from invertext.training import save_checkpoint

    root = tmp_path_factory.mktemp("artifacts")
    torch.manual_seed(0)
    kw = dict(width=32, pseudo_tokens=4, max_len=8, layers=1, heads=2, ff=64)
    base = BaseModel(InverterNet(len(small_vocab), small_encoder.dim, n_projectors=1, **kw).eval(), small_vocab)
    corr = CorrectorModel(InverterNet(len(small_vocab), small_encoder.dim, n_projectors=3, **kw).eval(),
                          small_vocab)
    paths = {
        "encoder": small_encoder.save(root / "encoder.json"),
        "base": save_checkpoint(base, root / "base"),
        "corrector": save_checkpoint(corr, root / "corrector"),
        "corpus": write_corpus_jsonl(Corpus(small_corpus.entries[:40]), root / "test.jsonl"),
        "ood": write_corpus_jsonl(Corpus(small_corpus.entries[40:60]), root / "ood.jsonl"),
    }
    return {k: str(v) for k, v in paths.items()}


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
