"""Pure-Python versions of the compiled ROUGE kernels."""

from collections import Counter


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    if not a or not b:
        return 0
    row = [0] * (len(b) + 1)
    for x in a:
        diag = 0
        for j in range(1, len(b) + 1):
            up = row[j]
            row[j] = diag + 1 if x == b[j - 1] else max(up, row[j - 1])
            diag = up
    return row[-1]


def ngrams(seq, n: int) -> Counter:
    seq = list(seq)
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def ngram_overlap(a, b, n: int):
    ca, cb = ngrams(a, n), ngrams(b, n)
    return sum((ca & cb).values()), sum(ca.values()), sum(cb.values())
