"""Tokenization, vocabularies, bag-of-words vectors, corpus files and synthetic corpora."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"<pad>|<bos>|<eos>|<unk>|\w+|[^\w\s]")
_SENTENCE_END = {".", "?", "!"}

# Small English function-word list; the topic vocabulary never contains these.
STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been
    before being below between both but by can could did do does doing down during
    each few for from further had has have having he her here hers herself him
    himself his how i if in into is it its itself just me more most my myself no
    nor not now of off on once only or other our ours ourselves out over own same
    she should so some such than that the their theirs them themselves then there
    these they this those through to too under until up very was we were what when
    where which while who whom why will with would you your yours yourself
    yourselves s t don
    """.split()
)


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it into word and punctuation tokens.

    >>> tokenize("The cat sat.")
    ['the', 'cat', 'sat', '.']
    """
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def _is_topic_word(token: str) -> bool:
    return token not in STOPWORDS and token not in SPECIAL_TOKENS and any(c.isalnum() for c in token)


class Vocabulary:
    """Bidirectional token/id map.

    With ``specials=True`` (the default) ids 0-3 hold PAD, BOS, EOS and UNK and
    unknown tokens map to UNK.  Topic-model vocabularies are built with
    ``specials=False``; unknown tokens then have no id.
    """

    def __init__(self, tokens: Iterable[str] = (), specials: bool = True):
        self.specials = specials
        self.itos: list[str] = list(SPECIAL_TOKENS) if specials else []
        self.stoi: dict[str, int] = {}
        for i, tok in enumerate(self.itos):
            self.stoi[tok] = i
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.specials == other.specials

    def get(self, token: str, default: int | None = None) -> int | None:
        return self.stoi.get(token, default)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        if not self.specials:
            return [self.stoi[t] for t in tokens if t in self.stoi]
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_specials and self.specials and i < len(SPECIAL_TOKENS):
                if i == EOS:
                    break
                continue
            out.append(self.itos[i])
        return out

    def words(self) -> list[str]:
        """Non-special entries in id order."""
        return self.itos[len(SPECIAL_TOKENS):] if self.specials else list(self.itos)

    def to_dict(self) -> dict:
        return {"specials": self.specials, "tokens": self.words()}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(data["tokens"], specials=data["specials"])


def _as_token_lists(corpus: Iterable) -> Iterable[list[str]]:
    for item in corpus:
        if isinstance(item, str):
            yield tokenize(item)
        elif isinstance(item, dict):
            for key in ("document", "side_text", "summary"):
                if item.get(key):
                    yield tokenize(item[key])
        elif isinstance(item, RawRecord):
            yield item.document
            yield item.summary
            if item.side_text is not None:
                yield item.side_text
        else:
            yield list(item)


def _ranked(counts: Counter, max_entries: int, min_freq: int) -> list[str]:
    ranked = sorted((tok for tok, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return ranked[: max(max_entries, 0)]


def build_vocab(corpus: Iterable, max_size: int, min_freq: int = 1) -> Vocabulary:
    """Frequency-ranked vocabulary (ties broken lexicographically) behind the four specials.

    ``corpus`` items may be raw strings, record dicts, :class:`RawRecord` or token lists.
    """
    if max_size <= len(SPECIAL_TOKENS):
        raise ValueError("max_size must exceed the number of special tokens")
    counts = Counter()
    for toks in _as_token_lists(corpus):
        counts.update(t for t in toks if t not in SPECIAL_TOKENS)
    return Vocabulary(_ranked(counts, max_size - len(SPECIAL_TOKENS), min_freq))


def build_topic_vocab(corpus: Iterable, max_size: int, min_freq: int = 1) -> Vocabulary:
    """Topic-model vocabulary: stopwords, punctuation and specials removed."""
    counts = Counter()
    for toks in _as_token_lists(corpus):
        counts.update(t for t in toks if _is_topic_word(t))
    return Vocabulary(_ranked(counts, max_size, min_freq), specials=False)


def bow_vector(tokens: Sequence[str], vocab_t: Vocabulary) -> np.ndarray:
    """Raw counts of ``tokens`` over the topic vocabulary; other tokens are dropped."""
    counts = np.zeros(len(vocab_t), dtype=np.float64)
    for tok in tokens:
        j = vocab_t.get(tok)
        if j is not None:
            counts[j] += 1.0
    return counts


def topic_index(vocab: Vocabulary, vocab_t: Vocabulary) -> np.ndarray:
    """Map from full-vocabulary id to topic-vocabulary id (-1 when absent)."""
    index = np.full(len(vocab), -1, dtype=np.int64)
    for i, tok in enumerate(vocab.itos):
        j = vocab_t.get(tok)
        if j is not None:
            index[i] = j
    return index


def bow_from_ids(ids: Sequence[int], index: np.ndarray, size: int) -> np.ndarray:
    mapped = index[np.asarray(ids, dtype=np.int64)] if len(ids) else np.empty(0, dtype=np.int64)
    mapped = mapped[mapped >= 0]
    return np.bincount(mapped, minlength=size).astype(np.float64)


# --------------------------------------------------------------------------- records


@dataclass
class RawRecord:
    """A tokenized corpus line before vocabulary lookup."""

    id: str
    document: list[str]
    summary: list[str]
    side_text: list[str] | None = None
    side_visual: np.ndarray | None = None


@dataclass
class Sample:
    id: str
    document: list[int]
    summary: list[int]
    side_tokens: list[int] | None = None
    side_visual: np.ndarray | None = None
    # Untruncated reference tokens, used for scoring.
    reference: list[str] = field(default_factory=list)
    document_tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.side_tokens is not None and self.side_visual is not None:
            raise ValueError(f"sample {self.id}: both side variants present")
        if not self.document:
            raise ValueError(f"sample {self.id}: empty document")
        if not self.summary:
            raise ValueError(f"sample {self.id}: empty summary")

    @property
    def has_side(self) -> bool:
        if self.side_tokens is not None:
            return len(self.side_tokens) > 0
        return self.side_visual is not None and len(self.side_visual) > 0

    @property
    def side_kind(self) -> str | None:
        if self.side_tokens is not None:
            return "text"
        if self.side_visual is not None:
            return "visual"
        return None

    def without_side(self) -> "Sample":
        return Sample(self.id, self.document, self.summary, None, None, self.reference, self.document_tokens)


class CorpusFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


def parse_record(obj: dict) -> RawRecord:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    for key in ("id", "document", "summary"):
        if not isinstance(obj.get(key), str):
            raise ValueError(f"missing or non-string {key!r}")
    side_text = obj.get("side_text")
    side_visual = obj.get("side_visual")
    if side_text is not None and side_visual is not None:
        raise ValueError("both side_text and side_visual are set")
    if side_text is not None and not isinstance(side_text, str):
        raise ValueError("side_text must be a string or null")
    visual = None
    if side_visual is not None:
        visual = np.asarray(side_visual, dtype=np.float64)
        if visual.ndim != 2 or not np.isfinite(visual).all():
            raise ValueError("side_visual must be a finite array of equal-length vectors")
    return RawRecord(
        id=obj["id"],
        document=tokenize(obj["document"]),
        summary=tokenize(obj["summary"]),
        side_text=tokenize(side_text) if side_text is not None else None,
        side_visual=visual,
    )


def read_records(path) -> list[RawRecord]:
    """Parse a line-delimited JSON corpus file; blank lines are skipped."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(parse_record(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                raise CorpusFormatError(path, lineno, str(exc)) from None
    return records


def to_sample(
    rec: RawRecord,
    vocab: Vocabulary,
    max_doc_len: int = 256,
    max_side_len: int = 32,
    max_summary_len: int = 32,
) -> Sample:
    side_tokens = None
    if rec.side_text is not None:
        side_tokens = vocab.encode(rec.side_text[:max_side_len])
    side_visual = rec.side_visual[:max_side_len] if rec.side_visual is not None else None
    return Sample(
        id=rec.id,
        document=vocab.encode(rec.document[:max_doc_len]),
        summary=vocab.encode(rec.summary[:max_summary_len]),
        side_tokens=side_tokens,
        side_visual=side_visual,
        reference=list(rec.summary),
        document_tokens=list(rec.document),
    )


def load_corpus(path, vocab: Vocabulary, max_doc_len=256, max_side_len=32, max_summary_len=32) -> list[Sample]:
    return [to_sample(r, vocab, max_doc_len, max_side_len, max_summary_len) for r in read_records(path)]


def record_to_json(rec: RawRecord) -> dict:
    return {
        "id": rec.id,
        "document": detokenize(rec.document),
        "side_text": detokenize(rec.side_text) if rec.side_text is not None else None,
        "side_visual": rec.side_visual.tolist() if rec.side_visual is not None else None,
        "summary": detokenize(rec.summary),
    }


def sample_to_record(sample: Sample, vocab: Vocabulary) -> RawRecord:
    side_text = None
    if sample.side_tokens is not None:
        side_text = vocab.decode(sample.side_tokens, strip_specials=False)
    return RawRecord(
        id=sample.id,
        document=vocab.decode(sample.document, strip_specials=False),
        summary=vocab.decode(sample.summary, strip_specials=False),
        side_text=side_text,
        side_visual=sample.side_visual,
    )


def write_records(records: Iterable[RawRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), ensure_ascii=False) + "\n")


def save_corpus(samples: Iterable[Sample], vocab: Vocabulary, path) -> None:
    write_records((sample_to_record(s, vocab) for s in samples), path)


# --------------------------------------------------------------------------- synthetic


@dataclass
class SynthConfig:
    """Generator settings.

    ``task`` is ``"topic-mixture"`` (documents, sides and summaries drawn from a
    per-sample mixture of planted topics) or ``"needle"`` (the side names the key
    token of one document sentence and the summary is that sentence).
    """

    task: str = "topic-mixture"
    n_topics: int = 5
    vocab_size: int = 200
    n_train: int = 2000
    n_dev: int = 100
    n_test: int = 200
    side_kind: str = "text"  # text | visual | none
    visual_dim: int = 64
    # topic-mixture
    doc_len: int = 100
    summary_len: int = 20
    side_len: int = 10
    sentence_len: int = 10
    dirichlet_alpha: float = 0.1
    zipf_exponent: float = 1.0
    background: float = 0.0
    # needle
    n_sentences: int = 4
    needle_len: int = 5
    keys_per_topic: int = 4

    def validate(self) -> None:
        if self.task not in ("topic-mixture", "needle"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.side_kind not in ("text", "visual", "none"):
            raise ValueError(f"unknown side_kind {self.side_kind!r}")
        positive = ["n_topics", "vocab_size", "n_train", "doc_len", "summary_len", "sentence_len",
                    "n_sentences", "needle_len", "keys_per_topic", "visual_dim"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if min(self.n_dev, self.n_test, self.side_len) < 0:
            raise ValueError("split sizes and side_len must be non-negative")
        if self.dirichlet_alpha <= 0 or self.zipf_exponent < 0 or not 0 <= self.background < 1:
            raise ValueError("invalid distribution parameters")
        if self.task == "topic-mixture" and self.vocab_size < self.n_topics:
            raise ValueError("vocab_size must be at least n_topics")
        if self.task == "needle" and self.n_sentences > self.n_topics:
            raise ValueError("needle task needs n_topics >= n_sentences")


def _word(i: int, width: int) -> str:
    return f"w{i:0{width}d}"


def planted_topics(cfg: SynthConfig, rng: np.random.Generator) -> tuple[list[str], np.ndarray]:
    """Planted topic-word distributions for the topic-mixture task.

    Each topic owns a disjoint block of the vocabulary with Zipfian weights over a
    shuffled order; ``background`` spreads that much mass uniformly everywhere.
    """
    width = len(str(cfg.vocab_size - 1))
    words = [_word(i, width) for i in range(cfg.vocab_size)]
    blocks = np.array_split(rng.permutation(cfg.vocab_size), cfg.n_topics)
    dists = np.zeros((cfg.n_topics, cfg.vocab_size))
    for k, block in enumerate(blocks):
        weights = 1.0 / np.arange(1, len(block) + 1) ** cfg.zipf_exponent
        dists[k, block] = weights / weights.sum()
    dists = (1 - cfg.background) * dists + cfg.background / cfg.vocab_size
    return words, dists


def _sentences(words: list[str], sentence_len: int) -> list[str]:
    out = []
    for i in range(0, len(words), sentence_len):
        out.extend(words[i:i + sentence_len])
        out.append(".")
    return out


def _gen_mixture(cfg: SynthConfig, rng: np.random.Generator, n: int, prefix: str, words, dists, proj):
    records = []
    for i in range(n):
        theta = rng.dirichlet(np.full(cfg.n_topics, cfg.dirichlet_alpha))
        mix = theta @ dists
        mix /= mix.sum()
        draw = lambda m: [words[j] for j in rng.choice(len(words), size=m, p=mix)]  # noqa: E731
        document = _sentences(draw(cfg.doc_len), cfg.sentence_len)
        summary = _sentences(draw(cfg.summary_len), cfg.sentence_len)
        side_text = side_visual = None
        if cfg.side_kind == "text" and cfg.side_len > 0:
            side_text = draw(cfg.side_len)
        elif cfg.side_kind == "visual" and cfg.side_len > 0:
            side_visual = theta @ proj + 0.1 * rng.standard_normal((cfg.side_len, cfg.visual_dim))
        records.append(RawRecord(f"{prefix}-{i}", document, summary, side_text, side_visual))
    return records


def needle_lexicon(cfg: SynthConfig) -> tuple[list[list[str]], list[list[str]]]:
    """(key tokens, content words) per topic for the needle task."""
    per_topic = max(cfg.vocab_size // cfg.n_topics, cfg.needle_len)
    keys = [[f"k{t}x{j}" for j in range(cfg.keys_per_topic)] for t in range(cfg.n_topics)]
    content = [[f"t{t}w{j}" for j in range(per_topic)] for t in range(cfg.n_topics)]
    return keys, content


def _gen_needle(cfg: SynthConfig, rng: np.random.Generator, n: int, prefix: str, key_codes):
    keys, content = needle_lexicon(cfg)
    records = []
    for i in range(n):
        topics = rng.choice(cfg.n_topics, size=cfg.n_sentences, replace=False)
        sentences = []
        sentence_keys = []
        for t in topics:
            key_id = int(rng.integers(cfg.keys_per_topic))
            body = [content[t][j] for j in rng.choice(len(content[t]), size=cfg.needle_len, replace=False)]
            sentences.append([keys[t][key_id]] + body + ["."])
            sentence_keys.append((int(t), key_id))
        target = int(rng.integers(cfg.n_sentences))
        document = [tok for s in sentences for tok in s]
        summary = list(sentences[target])
        side_text = side_visual = None
        if cfg.side_kind == "text":
            side_text = [summary[0]]
        elif cfg.side_kind == "visual":
            t, key_id = sentence_keys[target]
            code = key_codes[t, key_id]
            side_visual = code + 0.1 * rng.standard_normal((max(cfg.side_len, 1), cfg.visual_dim))
        records.append(RawRecord(f"{prefix}-{i}", document, summary, side_text, side_visual))
    return records


def gen_synthetic(cfg: SynthConfig, seed: int) -> dict[str, list[RawRecord]]:
    """Generate ``{"train", "dev", "test"}`` record lists, fully determined by ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    splits = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    if cfg.task == "topic-mixture":
        words, dists = planted_topics(cfg, rng)
        proj = rng.standard_normal((cfg.n_topics, cfg.visual_dim))
        return {name: _gen_mixture(cfg, rng, n, name, words, dists, proj) for name, n in splits.items()}
    key_codes = rng.standard_normal((cfg.n_topics, cfg.keys_per_topic, cfg.visual_dim))
    return {name: _gen_needle(cfg, rng, n, name, key_codes) for name, n in splits.items()}


def write_synthetic(corpus: dict[str, list[RawRecord]], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, records in corpus.items():
        write_records(records, out / f"{name}.jsonl")


def split_sentences(tokens: Sequence[str]) -> list[list[str]]:
    """Split a token sequence after every '.', '?' or '!' token."""
    sentences, current = [], []
    for tok in tokens:
        current.append(tok)
        if tok in _SENTENCE_END:
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences
