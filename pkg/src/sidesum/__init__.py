"""Topic-aware abstractive summarization with text or visual side information."""

from .config import Config, load_config
from .corpus import Sample, SynthConfig, Vocabulary, build_topic_vocab, build_vocab, gen_synthetic, tokenize
from .kernels import BACKEND as KERNEL_BACKEND
from .model import SideSummarizer

__all__ = [
    "Config",
    "KERNEL_BACKEND",
    "Sample",
    "SideSummarizer",
    "SynthConfig",
    "Vocabulary",
    "build_topic_vocab",
    "build_vocab",
    "gen_synthetic",
    "load_config",
    "tokenize",
]

__version__ = "0.1.0"
