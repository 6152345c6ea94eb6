"""Joint training, checkpoint files and checkpoint averaging."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import Config
from .contrastive import triplet_loss
from .corpus import Sample, Vocabulary, topic_index
from .model import Batch, SideSummarizer

log = logging.getLogger(__name__)

MAGIC = b"USS1"
METRIC_FIELDS = ("step", "loss_total", "loss_s", "loss_utm", "loss_triplet", "grad_norm")


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


def label_smoothed_nll(log_probs: torch.Tensor, target: torch.Tensor, eps: float) -> torch.Tensor:
    """``-[(1 - eps) log P[t] + eps / (|V| - 1) * sum_{w != t} log P[w]]`` per position.

    ``log_probs``: [..., V]; ``target``: [...] token ids.
    """
    if not 0 <= eps < 1:
        raise ValueError("eps must lie in [0, 1)")
    target_lp = log_probs.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if eps == 0:
        return -target_lp
    others = log_probs.sum(-1) - target_lp
    return -((1 - eps) * target_lp + eps / (log_probs.shape[-1] - 1) * others)


def clip_gradients(grads, lo: float = -2.0, hi: float = 2.0):
    """Elementwise clamp of a tensor, array or iterable of tensors to ``[lo, hi]`` (in place for tensors)."""
    if lo >= hi:
        raise ValueError("clip range must satisfy lo < hi")
    if isinstance(grads, np.ndarray):
        return np.clip(grads, lo, hi)
    if torch.is_tensor(grads):
        return grads.clamp_(lo, hi)
    for g in grads:
        if g is not None:
            g.clamp_(lo, hi)
    return grads


def compute_losses(model: SideSummarizer, batch: Batch, generator=None, neg_rng=None) -> dict:
    """Loss terms for one batch; ablated terms are zero and their paths are skipped."""
    cfg = model.cfg
    out = model(batch, generator, neg_rng)
    log_probs = torch.log_softmax(out["logits"], dim=-1)
    per_token = label_smoothed_nll(log_probs, batch.dec_out, cfg.label_smoothing)
    mask = batch.dec_mask.to(per_token.dtype)
    loss_s = (per_token * mask).sum() / mask.sum()
    zero = loss_s.new_zeros(())
    loss_utm = model.utm.loss(out["utm"], batch.sum_bow, batch.has_side) if "utm" in out else zero
    if "triplet" in out:
        t = out["triplet"]
        loss_tri = triplet_loss(t["D"], t["S"], t["G"], t["D_neg"], t["S_neg"], t["G_neg"], cfg.tau, batch.has_side)
    else:
        loss_tri = zero
    total = loss_s + cfg.lambda_utm * loss_utm + cfg.lambda_tri * loss_tri
    return {"total": total, "s": loss_s, "utm": loss_utm, "triplet": loss_tri, "out": out}


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: Config
    step: int = 0
    score: float = float("nan")
    vocab: Vocabulary | None = None
    vocab_t: Vocabulary | None = None

    def build_model(self) -> SideSummarizer:
        model = SideSummarizer(self.config, len(self.vocab), len(self.vocab_t))
        load_params(model, self.params)
        model.eval()
        return model

    def topic_index(self) -> np.ndarray:
        return topic_index(self.vocab, self.vocab_t)


def model_params(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float64, copy=True) for k, v in model.state_dict().items()}


def load_params(model: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    if set(state) != set(params):
        missing = sorted(set(state) ^ set(params))
        raise ValueError(f"parameter names differ: {missing[:5]}")
    model.load_state_dict({k: torch.as_tensor(params[k], dtype=state[k].dtype) for k in state})


def write_tensors(path, params: dict[str, np.ndarray]) -> None:
    """Binary tensor file: magic, records (u32 name length, name, u32 rank, u64 dims, f64 payload), u64 count.

    All integers and floats are little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in params.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")  # tobytes() is C order; ascontiguousarray would promote 0-d
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(struct.pack("<Q", len(params)))


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic bytes")
    (count,) = struct.unpack("<Q", data[-8:])
    pos, params = 4, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(data) - 8:
        raise ValueError(f"{path}: trailing bytes or truncated records")
    return params


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Tensors go to ``path``; config, step, score and vocabularies to ``path + '.json'``."""
    write_tensors(path, ckpt.params)
    meta = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "score": ckpt.score,
        "vocab": ckpt.vocab.to_dict() if ckpt.vocab else None,
        "vocab_t": ckpt.vocab_t.to_dict() if ckpt.vocab_t else None,
    }
    Path(f"{path}.json").write_text(json.dumps(meta), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    meta = json.loads(Path(f"{path}.json").read_text(encoding="utf-8"))
    return Checkpoint(
        params=read_tensors(path),
        config=Config.from_dict(meta["config"]),
        step=meta["step"],
        score=meta["score"],
        vocab=Vocabulary.from_dict(meta["vocab"]) if meta["vocab"] else None,
        vocab_t=Vocabulary.from_dict(meta["vocab_t"]) if meta["vocab_t"] else None,
    )


def average_checkpoints(checkpoints: Sequence[Checkpoint | dict]) -> dict[str, np.ndarray]:
    """Elementwise mean of each named tensor."""
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    dicts = [c.params if isinstance(c, Checkpoint) else c for c in checkpoints]
    first = dicts[0]
    for d in dicts[1:]:
        if set(d) != set(first) or any(d[k].shape != first[k].shape for k in first):
            raise ValueError("checkpoints disagree on parameter names or shapes")
    return {k: np.mean([d[k] for d in dicts], axis=0) for k in first}


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: SideSummarizer
    checkpoints: list[Checkpoint]
    averaged: Checkpoint
    metrics: list[dict] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)


def lr_at(step: int, cfg: Config) -> float:
    if cfg.warmup <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup)


def configure_threads(threads: int) -> None:
    if threads > 0:
        torch.set_num_threads(threads)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i:i + batch_size]


def validation_score(model: SideSummarizer, samples: Sequence[Sample], vocab: Vocabulary, collate, cfg: Config) -> float:
    from .evaluation import rouge_l

    if not samples:
        return float("nan")
    was_training = model.training
    model.eval()
    scores = []
    for i in range(0, len(samples), 64):
        chunk = samples[i:i + 64]
        if cfg.val_beam == 1:
            outputs = model.greedy_batch(chunk, collate, cfg.min_len, cfg.max_len, mask_side=cfg.mask_side)
        else:
            outputs = [model.generate(s, collate, cfg.val_beam, cfg.alpha, cfg.min_len, cfg.max_len, cfg.mask_side)
                       for s in chunk]
        for s, ids in zip(chunk, outputs):
            scores.append(rouge_l(vocab.decode(ids), s.reference)[2])
    model.train(was_training)
    return float(np.mean(scores))


def train(
    cfg: Config,
    train_samples: Sequence[Sample],
    vocab: Vocabulary,
    vocab_t: Vocabulary,
    dev_samples: Sequence[Sample] | None = None,
    out_dir=None,
    on_step: Callable[[dict], None] | None = None,
    time_budget: float | None = None,
) -> TrainResult:
    """Adam with linear warmup, elementwise gradient clipping and periodic ROUGE-L validation.

    The ``keep_checkpoints`` best validation checkpoints are kept and averaged.
    Raises :class:`DivergenceError` on a non-finite loss.
    """
    cfg.validate()
    configure_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    model = SideSummarizer(cfg, len(vocab), len(vocab_t))
    model.train()
    collate = model.collator(topic_index(vocab, vocab_t))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    eps_gen = torch.Generator().manual_seed(cfg.seed + 1)
    neg_rng = np.random.default_rng(cfg.seed + 2)
    batch_rng = np.random.default_rng(cfg.seed + 3)
    dev = list(dev_samples or train_samples[: min(50, len(train_samples))])[: cfg.val_samples]
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    metrics, validation, kept = [], [], []
    started = time.monotonic()
    batches = _batches(len(train_samples), cfg.batch_size, batch_rng)

    def checkpoint(step: int) -> None:
        score = validation_score(model, dev, vocab, collate, cfg)
        validation.append((step, score))
        log.info("step %d: validation ROUGE-L %.4f", step, score)
        kept.append(Checkpoint(model_params(model), cfg, step, score, vocab, vocab_t))
        kept.sort(key=lambda c: (-c.score if math.isfinite(c.score) else math.inf, -c.step))
        del kept[cfg.keep_checkpoints:]

    for step in range(cfg.steps):
        idx = next(batches)
        batch = collate([train_samples[i] for i in idx], mask_side=cfg.mask_side)
        for group in opt.param_groups:
            group["lr"] = lr_at(step, cfg)
        losses = compute_losses(model, batch, eps_gen, neg_rng)
        total = losses["total"]
        if not torch.isfinite(total):
            raise DivergenceError(step)
        opt.zero_grad(set_to_none=True)
        total.backward()
        grads = [p.grad for p in params if p.grad is not None]
        grad_norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
        clip_gradients(grads, -cfg.clip, cfg.clip)
        opt.step()
        row = {
            "step": step,
            "loss_total": total.item(),
            "loss_s": losses["s"].item(),
            "loss_utm": losses["utm"].item(),
            "loss_triplet": losses["triplet"].item(),
            "grad_norm": grad_norm,
        }
        metrics.append(row)
        if on_step:
            on_step(row)
        out_of_time = time_budget is not None and time.monotonic() - started > time_budget
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps or out_of_time:
            checkpoint(step + 1)
        if out_of_time:
            log.warning("time budget exhausted after %d steps", step + 1)
            break

    averaged = Checkpoint(average_checkpoints(kept), cfg, kept[0].step, kept[0].score, vocab, vocab_t)
    load_params(model, averaged.params)
    model.eval()
    if out_dir:
        for c in kept:
            save_checkpoint(c, out_dir / f"step{c.step}.uss")
        save_checkpoint(averaged, out_dir / "averaged.uss")
        write_metrics(metrics, out_dir / "metrics.csv")
    return TrainResult(model, kept, averaged, metrics, validation)


def write_metrics(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_FIELDS})


# --------------------------------------------------------------------------- topic model only


def fit_topic_model(cfg: Config, samples: Sequence[Sample], vocab_t_size: int, topic_idx: np.ndarray,
                    steps: int = 2000, time_budget: float | None = None):
    """Train only the unified topic model on summary bag-of-words prediction; returns the model's UTM."""
    configure_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    model = SideSummarizer(cfg, int(topic_idx.shape[0]), vocab_t_size)
    utm = model.utm
    utm.train()
    collate = model.collator(topic_idx)
    opt = torch.optim.Adam(utm.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 3)
    batches = _batches(len(samples), cfg.batch_size, rng)
    started = time.monotonic()
    trace = []
    for step in range(steps):
        batch = collate([samples[i] for i in next(batches)], mask_side=cfg.mask_side)
        for group in opt.param_groups:
            group["lr"] = lr_at(step, cfg)
        loss = utm.loss(model.run_utm(batch, gen), batch.sum_bow, batch.has_side)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        clip_gradients([p.grad for p in utm.parameters() if p.grad is not None], -cfg.clip, cfg.clip)
        opt.step()
        trace.append(loss.item())
        if time_budget is not None and time.monotonic() - started > time_budget:
            break
    model.eval()
    return model, trace
