"""Compare the compiled ROUGE kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--pairs 200] [--repeat 3]

Prints the best-of-``repeat`` wall time per kernel and sequence length, and the
speedup of the compiled backend.  Both backends are checked to agree first.
"""

import argparse
import sys
import timeit

import numpy as np

from sidesum import _kernels_py

try:
    from sidesum import _kernels
except ImportError:
    _kernels = None


def make_pairs(n_pairs, length, vocab, seed):
    rng = np.random.default_rng(seed)
    return [(rng.integers(0, vocab, length), rng.integers(0, vocab, length)) for _ in range(n_pairs)]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--pairs", type=int, default=200)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--lengths", type=int, nargs="+", default=[30, 100, 400])
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1

    print(f"{'kernel':<10}{'length':>8}{'python s':>12}{'compiled s':>12}{'speedup':>10}")
    for length in args.lengths:
        pairs = make_pairs(args.pairs, length, vocab=50, seed=length)
        lists = [(a.tolist(), b.tolist()) for a, b in pairs]
        for a, b in pairs[:10]:
            assert _kernels.lcs_length(a, b) == _kernels_py.lcs_length(a.tolist(), b.tolist())
            assert tuple(_kernels.ngram_overlap(a, b, 2)) == _kernels_py.ngram_overlap(a.tolist(), b.tolist(), 2)
        cases = {
            "lcs": (lambda: [_kernels_py.lcs_length(a, b) for a, b in lists],
                    lambda: [_kernels.lcs_length(a, b) for a, b in pairs]),
            "bigram": (lambda: [_kernels_py.ngram_overlap(a, b, 2) for a, b in lists],
                       lambda: [_kernels.ngram_overlap(a, b, 2) for a, b in pairs]),
        }
        for name, (slow, fast) in cases.items():
            t_py = min(timeit.repeat(slow, number=1, repeat=args.repeat))
            t_c = min(timeit.repeat(fast, number=1, repeat=args.repeat))
            print(f"{name:<10}{length:>8}{t_py:>12.4f}{t_c:>12.4f}{t_py / t_c:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
