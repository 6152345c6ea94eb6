import pytest

from sidesum.config import Config
from sidesum.corpus import SynthConfig, build_topic_vocab, build_vocab, gen_synthetic, to_sample


def tiny_config(**kw) -> Config:
    base = dict(d_model=8, heads=2, d_ff=16, encoder_layers=1, graph_layers=1, decoder_layers=1, topics=3,
                utm_hidden=8, scalar_ffn_hidden=4, max_positions=64, batch_size=4, steps=20, warmup=5,
                eval_every=10, keep_checkpoints=2, val_samples=4, max_len=6, beam=2)
    base.update(kw)
    return Config(**base)


@pytest.fixture(scope="session")
def needle_data():
    """A small needle corpus: (train samples, dev samples, vocab, topic vocab, raw corpus)."""
    corpus = gen_synthetic(SynthConfig(task="needle", n_topics=4, n_sentences=3, needle_len=2, n_train=24,
                                       n_dev=6, n_test=6), seed=0)
    vocab = build_vocab(corpus["train"], 500)
    vocab_t = build_topic_vocab(corpus["train"], 500, 1)
    train = [to_sample(r, vocab) for r in corpus["train"]]
    dev = [to_sample(r, vocab) for r in corpus["dev"]]
    return train, dev, vocab, vocab_t, corpus


_ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    """Remember (and print) one acceptance verdict; returns ``passed`` for the caller's assert."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    _ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
