"""Training loop, evaluation and the block-splitting benchmark."""

import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .data import augment
from .engines import EngineSettings, compute_gradients
from .errors import ConfigError, DivergenceError
from .model import build_model, predict, save_checkpoint
from .optim import OptimizerState, adam_step, cosine_lr

log = logging.getLogger(__name__)


def topk_accuracy(logits, labels, k):
    """Fraction of rows whose label is among the ``k`` largest logits.  Ties
    go to the lower class index."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == np.asarray(labels)[:, None], axis=1)))


def evaluate(model, dataset, batch_size=500):
    """Eval-mode (top-1, top-5) accuracy in [0, 1]."""
    logits = predict(model, dataset.images, batch_size)
    return topk_accuracy(logits, dataset.labels, 1), topk_accuracy(logits, dataset.labels, 5)


@dataclass
class TrainResult:
    metrics: List[dict] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    diverged: Optional[DivergenceError] = None


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        if len(idx) >= 2:  # batchnorm needs two samples
            yield idx


def _line(record):
    return json.dumps(record, sort_keys=False) + "\n"


def train(model, train_ds, val_ds, run, out_dir=None, aug=None, engine_overrides=None):
    """Train ``model`` in place.

    Writes ``metrics.jsonl`` (and, unless ``run.log_wall_clock``, the
    wall-clock times to ``timing.jsonl``) plus checkpoints to ``out_dir``.
    On divergence the run stops; checkpoints written so far are kept and the
    error is returned in the result.
    """
    if len(train_ds) < 2:
        raise ConfigError("training set needs at least two samples")
    settings = EngineSettings.from_model(model, engine=run.engine,
                                         require_convergence=run.require_convergence,
                                         **(engine_overrides or {}))
    rng = np.random.default_rng(run.seed)
    opt = OptimizerState(lr=run.lr, weight_decay=run.weight_decay)
    result = TrainResult()
    metrics_fh = timing_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        if not run.log_wall_clock:
            timing_fh = open(os.path.join(out_dir, "timing.jsonl"), "w")
    try:
        for epoch in range(1, run.epochs + 1):
            t0 = time.perf_counter()
            opt.lr = cosine_lr(epoch - 1, run.epochs, run.lr, run.lr_min)
            losses = []
            try:
                for idx in _batches(len(train_ds), run.batch_size, rng):
                    xb = augment(train_ds.images[idx], aug, rng) if aug else train_ds.images[idx]
                    grads, _, loss = compute_gradients(model, xb, train_ds.labels[idx], settings)
                    if not all(np.all(np.isfinite(g)) for g in grads.values()):
                        raise DivergenceError("non-finite gradient", step=len(losses) + 1)
                    adam_step(model.store, grads, opt)
                    losses.append(loss)
            except DivergenceError as e:
                log.error("epoch %d diverged: %s", epoch, e)
                result.diverged = e
                break
            top1, top5 = evaluate(model, val_ds, run.eval_batch)
            seconds = time.perf_counter() - t0
            rec = {"epoch": epoch, "lr": opt.lr, "train_loss": float(np.mean(losses)),
                   "val_top1": top1, "val_top5": top5,
                   "seconds": seconds if run.log_wall_clock else None}
            result.metrics.append(rec)
            log.info("epoch %d loss %.4f top1 %.4f (%.1fs)", epoch, rec["train_loss"], top1, seconds)
            if metrics_fh:
                metrics_fh.write(_line(rec))
                metrics_fh.flush()
            if timing_fh:
                timing_fh.write(_line({"epoch": epoch, "seconds": seconds}))
            due = run.checkpoint_every and epoch % run.checkpoint_every == 0
            if out_dir and (due or epoch == run.epochs):
                path = os.path.join(out_dir, f"checkpoint_epoch{epoch}.ffebm")
                save_checkpoint(model.store, path)
                result.checkpoints.append(path)
    finally:
        for fh in (metrics_fh, timing_fh):
            if fh:
                fh.close()
    return result


SPLIT_COLUMNS = ["split", "engine", "seed", "train_loss", "val_top1", "val_top5", "seconds"]


def split_bench(base_config, splits, train_ds, val_ds, run, seeds=(0,), engines=("ep_implicit",),
                out_dir=None):
    """Train one model per (split, engine, seed) under identical budgets.

    Returns a list of rows keyed by :data:`SPLIT_COLUMNS`.
    """
    configs = [base_config.with_splits(p) for p in splits]  # validate all first
    rows = []
    for part, cfg in zip(splits, configs):
        for engine in engines:
            for seed in seeds:
                _, model = build_model(replace(cfg, seed=seed))
                r = replace(run, engine=engine, seed=seed)
                sub = None
                if out_dir:
                    sub = os.path.join(out_dir, f"split{'-'.join(map(str, part))}_{engine}_seed{seed}")
                t0 = time.perf_counter()
                res = train(model, train_ds, val_ds, r, sub)
                last = res.metrics[-1] if res.metrics else {}
                rows.append({"split": "-".join(map(str, part)), "engine": engine, "seed": seed,
                             "train_loss": last.get("train_loss", float("nan")),
                             "val_top1": last.get("val_top1", float("nan")),
                             "val_top5": last.get("val_top5", float("nan")),
                             "seconds": time.perf_counter() - t0})
    return rows


def summarize_splits(rows):
    """Mean accuracy per (split, engine), the spread across splits per
    engine, and the EP/ID gap per split (in accuracy fractions)."""
    means = {}
    for r in rows:
        means.setdefault((r["split"], r["engine"]), []).append(r["val_top1"])
    means = {k: float(np.mean(v)) for k, v in means.items()}
    engines = sorted({e for _, e in means})
    splits = sorted({s for s, _ in means})
    spread = {e: max(means[(s, e)] for s in splits) - min(means[(s, e)] for s in splits)
              for e in engines}
    gap = {}
    ep = [e for e in engines if e.startswith("ep")]
    if ep and "id" in engines:
        gap = {s: abs(means[(s, ep[0])] - means[(s, "id")]) for s in splits}
    return {"mean_top1": {f"{s}/{e}": v for (s, e), v in sorted(means.items())},
            "spread": spread, "ep_id_gap": gap}
