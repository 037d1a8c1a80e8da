"""Two-stage orchestration: PET training under terminal cost plus the bridge
running cost, few-shot splits, evaluation metrics, and run directories.

The regularizer never runs on the inference path, and an alpha of zero skips
it entirely so that runs with method set but alpha 0 are bit-identical to
method-free runs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import bridges
from .autodiff import Tensor
from .backbone import BackboneState, forward
from .latent_map import goodness_pdf, goodness_sde
from .pets import PetConfig, build_pet, save_pet
from .snapshot import save_snapshot
from .tasks import DataError, TaskSample

# Full-scale alpha search grids (desk runs use smaller grids).
FULLSCALE_ALPHA_GRID_PDF = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
FULLSCALE_ALPHA_GRID_SDE = (0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0)

# Full-scale few-shot schedule: 1k steps, dev eval every 50, batch 2.
FULLSCALE_FEWSHOT_MAX_STEPS = 1000
FULLSCALE_FEWSHOT_EVAL_EVERY = 50
FULLSCALE_FEWSHOT_BATCH_SIZE = 2


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.0
    method: str = "none"
    bridge_kind: str = bridges.BROWNIAN
    q: float = 1.0
    sigma: float = 1.0
    learning_rate: float = 5e-3
    batch_size: int = 2
    max_steps: int = 1000
    eval_every: int = 50
    seed: int = 0
    grad_clip: float = 1.0
    sde_steps: int = 8
    metric: str = "accuracy"

    def __post_init__(self):
        if self.method not in ("none", "pdf", "sde"):
            raise ValueError(f"method must be none, pdf or sde, got {self.method!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def total_loss(logits: Tensor, label_word: int, trace, mapnet, endpoints,
               cfg: TrainConfig, rng=None):
    """Terminal cross-entropy plus alpha times the running cost.

    Running cost is the negated PDF goodness (so minimizing pushes latent
    points toward the bridge) or the SDE KL. Returns (loss tensor,
    terminal value, running value). alpha == 0 skips the regularizer and
    consumes no randomness.
    """
    ce = ad.cross_entropy_with_logits(logits, label_word)
    if cfg.method == "none" or cfg.alpha == 0.0:
        return ce, ce.item(), 0.0
    if mapnet is None:
        raise ValueError(f"method {cfg.method!r} needs a fitted map")
    spec = bridges.BridgeSpec(kind=cfg.bridge_kind, beta=endpoints.row(label_word),
                              horizon=1.0, q=cfg.q, sigma=cfg.sigma)
    if cfg.method == "pdf":
        running = ad.scalar_mul(goodness_pdf(mapnet, trace, spec), -1.0)
    else:
        running = goodness_sde(mapnet, trace, spec, cfg.sde_steps, rng)
    loss = ad.add(ce, ad.scalar_mul(running, cfg.alpha))
    return loss, ce.item(), running.item()


def fewshot_split(dataset, k: int, seed: int):
    """Per class: sample 2k without replacement; first k to train, next k
    to dev. Splits are disjoint by construction."""
    rng = np.random.default_rng(seed)
    by_label = {}
    for s in dataset:
        by_label.setdefault(s.label_word, []).append(s)
    train, dev = [], []
    for label in sorted(by_label):
        pool = by_label[label]
        if len(pool) < 2 * k:
            raise DataError(
                f"class {label} has {len(pool)} examples, needs {2 * k}")
        chosen = rng.choice(len(pool), size=2 * k, replace=False)
        train.extend(pool[i] for i in chosen[:k])
        dev.extend(pool[i] for i in chosen[k:])
    return train, dev


def predict(state: BackboneState, pet, sample: TaskSample, label_words):
    """Argmax over the task's label words at the mask position."""
    with ad.no_grad():
        logits, _ = forward(state, sample.tokens, sample.mask_position, pet=pet)
    flat = logits.data.reshape(-1)
    return max(label_words, key=lambda w: flat[w])


def evaluate(state: BackboneState, pet, dataset, metric: str = "accuracy",
             label_words=None) -> float:
    """accuracy, f1 (binary, positive = larger label id), or matthews
    (0 when any denominator factor vanishes)."""
    if not dataset:
        raise DataError("empty evaluation set")
    if label_words is None:
        label_words = sorted({s.label_word for s in dataset})
    if metric in ("f1", "matthews") and len(label_words) != 2:
        raise DataError(f"{metric} needs binary labels, got {len(label_words)}")
    preds = [predict(state, pet, s, label_words) for s in dataset]
    truths = [s.label_word for s in dataset]
    if metric == "accuracy":
        return sum(p == t for p, t in zip(preds, truths)) / len(truths)
    pos = max(label_words)
    tp = sum(p == pos and t == pos for p, t in zip(preds, truths))
    fp = sum(p == pos and t != pos for p, t in zip(preds, truths))
    fn = sum(p != pos and t == pos for p, t in zip(preds, truths))
    tn = sum(p != pos and t != pos for p, t in zip(preds, truths))
    if metric == "f1":
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom else 0.0
    if metric == "matthews":
        denom2 = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        if denom2 == 0:
            return 0.0
        return (tp * tn - fp * fn) / math.sqrt(denom2)
    raise DataError(f"unknown metric {metric!r}")


def train_pet(state: BackboneState, pet_cfg: PetConfig, mapnet, endpoints,
              train_set, dev_set, cfg: TrainConfig):
    """Optimize only the PET parameters under the combined loss; dev is
    evaluated every eval_every steps and the best-on-dev parameters are
    returned together with the metric history."""
    rng = np.random.default_rng(cfg.seed)
    pet = build_pet(pet_cfg, state, rng)
    params = pet.trainables()
    adam = ad.AdamState(params, cfg.learning_rate)
    label_words = sorted({s.label_word for s in train_set})

    history = []
    best_metric = -math.inf
    best_tensors = pet.clone_tensors()
    best_step = 0
    win_loss = win_ce = win_run = 0.0
    win_n = 0

    for step in range(1, cfg.max_steps + 1):
        idx = rng.integers(0, len(train_set), size=cfg.batch_size)
        losses = []
        ce_sum = run_sum = 0.0
        for j in idx:
            s = train_set[j]
            logits, trace = forward(state, s.tokens, s.mask_position, pet=pet)
            loss_j, ce_j, run_j = total_loss(logits, s.label_word, trace,
                                             mapnet, endpoints, cfg, rng)
            losses.append(loss_j)
            ce_sum += ce_j
            run_sum += run_j
        loss = losses[0]
        for extra in losses[1:]:
            loss = ad.add(loss, extra)
        loss = ad.scalar_mul(loss, 1.0 / len(losses))
        grads = ad.backward(loss)
        ad.clip_gradients(params, grads, cfg.grad_clip)
        ad.adam_step(params, grads, adam)

        win_loss += loss.item()
        win_ce += ce_sum / len(losses)
        win_run += run_sum / len(losses)
        win_n += 1

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            dev_metric = evaluate(state, pet, dev_set, cfg.metric, label_words)
            history.append({
                "step": step,
                "train_loss": win_loss / win_n,
                "terminal_loss": win_ce / win_n,
                "running_cost": win_run / win_n,
                "dev_metric": dev_metric,
            })
            win_loss = win_ce = win_run = 0.0
            win_n = 0
            if dev_metric > best_metric:
                best_metric = dev_metric
                best_tensors = pet.clone_tensors()
                best_step = step

    pet.load_tensors(best_tensors)
    return pet, history, {"best_dev_metric": best_metric, "best_step": best_step}


def write_metrics_csv(path, history) -> None:
    cols = ("step", "train_loss", "terminal_loss", "running_cost", "dev_metric")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(cols) + "\n")
        for row in history:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float)
                             else str(row[c]) for c in cols) + "\n")


def dump_probe_traces(path, state: BackboneState, pet, dataset, meta: dict) -> None:
    """Record inference-mode hidden traces on a probe set: per sample, the
    (L+1) x d matrices of output-position states and context means."""
    tensors = {}
    labels = []
    with ad.no_grad():
        for i, s in enumerate(dataset):
            _, trace = forward(state, s.tokens, s.mask_position, pet=pet)
            tensors[f"s{i}.h_out"] = np.hstack([t.data for t in trace.h_out]).T
            tensors[f"s{i}.h_ctx"] = np.hstack([t.data for t in trace.h_ctx]).T
            labels.append(s.label_word)
    header = {"kind": "probe", "labels": labels}
    header.update(meta)
    save_snapshot(path, header, tensors)


def run_training(out_dir, state: BackboneState, pet_cfg: PetConfig, mapnet,
                 endpoints, train_set, dev_set, cfg: TrainConfig,
                 probe_set=None):
    """One run directory: config.json, metrics.csv, best checkpoint, and
    probe traces for later analysis."""
    os.makedirs(out_dir, exist_ok=True)
    pet, history, summary = train_pet(state, pet_cfg, mapnet, endpoints,
                                      train_set, dev_set, cfg)
    record = {
        "train": asdict(cfg),
        "pet": asdict(pet_cfg),
        "model": asdict(state.config),
        "summary": summary,
    }
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), history)
    save_pet(os.path.join(out_dir, "pet.bin"), pet)
    probe = probe_set if probe_set is not None else dev_set
    dump_probe_traces(os.path.join(out_dir, "probe.bin"), state, pet, probe,
                      {"alpha": cfg.alpha, "method": cfg.method,
                       "pet_kind": pet_cfg.kind})
    return pet, history, summary
