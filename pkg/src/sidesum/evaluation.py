"""ROUGE-1/2/L F1, the Lead-3 baseline and corpus evaluation reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np

from . import kernels
from .corpus import Sample, split_sentences


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _as_ids(*seqs: Sequence[Hashable]) -> list[list[int]]:
    table: dict = {}
    return [[table.setdefault(tok, len(table)) for tok in seq] for seq in seqs]


def rouge_n(candidate: Sequence, reference: Sequence, n: int = 1) -> tuple[float, float, float]:
    """(precision, recall, F1) of clipped n-gram overlap; empty n-gram sets score 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    a, b = _as_ids(candidate, reference)
    overlap, n_cand, n_ref = kernels.ngram_overlap(a, b, n)
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    return p, r, _f1(p, r)


def rouge_l(candidate: Sequence, reference: Sequence) -> tuple[float, float, float]:
    if not candidate or not reference:
        return 0.0, 0.0, 0.0
    a, b = _as_ids(candidate, reference)
    lcs = kernels.lcs_length(a, b)
    p, r = lcs / len(a), lcs / len(b)
    return p, r, _f1(p, r)


@dataclass
class RougeScores:
    r1: tuple[float, float, float]
    r2: tuple[float, float, float]
    rl: tuple[float, float, float]

    @classmethod
    def compute(cls, candidate: Sequence, reference: Sequence) -> "RougeScores":
        return cls(rouge_n(candidate, reference, 1), rouge_n(candidate, reference, 2), rouge_l(candidate, reference))

    @property
    def f1(self) -> tuple[float, float, float]:
        return self.r1[2], self.r2[2], self.rl[2]


def lead3(document: Sequence[str]) -> list[str]:
    """The first three sentences (split on '.', '?' and '!') of a tokenized document."""
    return [tok for sent in split_sentences(document)[:3] for tok in sent]


@dataclass
class Report:
    rows: list[dict]
    aggregate: dict

    def write_csv(self, path) -> None:
        fields = ("id", "r1_f", "r2_f", "rl_f", "summary_len")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in [*self.rows, self.aggregate]:
                writer.writerow({k: row[k] for k in fields})


def evaluate(summarize: Callable[[Sample], Sequence[str]], samples: Sequence[Sample], report_path=None) -> Report:
    """Score ``summarize(sample)`` against each sample's reference tokens; the aggregate row holds plain means."""
    rows = []
    for s in samples:
        candidate = list(summarize(s))
        f1 = RougeScores.compute(candidate, s.reference).f1
        rows.append({"id": s.id, "r1_f": f1[0], "r2_f": f1[1], "rl_f": f1[2], "summary_len": len(candidate)})
    agg = {"id": "AGGREGATE"}
    for key in ("r1_f", "r2_f", "rl_f", "summary_len"):
        agg[key] = float(np.mean([r[key] for r in rows])) if rows else 0.0
    report = Report(rows, agg)
    if report_path:
        report.write_csv(report_path)
    return report


def model_summarizer(model, vocab, collate, beam=5, alpha=0.8, min_len=1, max_len=32, mask_side=False):
    def summarize(sample: Sample) -> list[str]:
        return vocab.decode(model.generate(sample, collate, beam, alpha, min_len, max_len, mask_side))
    return summarize
