"""Training loop: multi-label cross-entropy plus a role-specialization loss.

The specialization term is built from modality-ablated views of each batch
(one extra forward pass per modality with that modality's features zeroed):

* each unique expert pays cross-entropy on the full input (it only sees its
  own modality by construction),
* the redundancy expert pays cross-entropy on the full input and on every
  single-modality ablation (either modality alone should suffice),
* the synergy expert pays cross-entropy on the full input plus a KL penalty
  toward a uniform predictive distribution on each ablated view (it should
  be ignorant whenever a modality is missing).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, sigmoid, softplus
from .model import ExpertBundle, FusionModel, JointSequence

__all__ = ["TrainConfig", "TrainLog", "bce_with_logits", "kl_to_uniform",
           "interaction_loss", "total_loss", "train", "DivergenceError"]

LOG2 = math.log(2.0)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 15
    lambda_int: float = 0.5
    tau: float = 1.0
    seed: int = 0
    # Stop once every label's validation accuracy reaches this level (the
    # epoch budget still caps the run); None trains for the full budget.
    early_stop_acc: float | None = 0.95

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.epochs, self.tau) <= 0:
            raise ValueError("lr, batch_size, epochs and tau must be positive")
        if self.lambda_int < 0:
            raise ValueError("lambda_int must be nonnegative")
        if self.early_stop_acc is not None and not 0 < self.early_stop_acc <= 1:
            raise ValueError("early_stop_acc must lie in (0, 1]")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def add(self, **kv):
        self.records.append(kv)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of per-label binary cross-entropies on sigmoid logits."""
    y = Tensor(labels)
    per = y * softplus(-logits) + (1.0 - y) * softplus(logits)
    return per.mean(axis=-1).mean()


def kl_to_uniform(logits: Tensor) -> Tensor:
    """Mean per-label KL(Bernoulli(sigmoid(z)) || Bernoulli(0.5)).

    Zero exactly when the predictive distribution is uniform; grows as the
    prediction becomes confident.
    """
    p = sigmoid(logits)
    # p*log p + (1-p)*log(1-p) + log 2, written via softplus for stability
    neg_entropy = -(p * softplus(-logits) + (1.0 - p) * softplus(logits))
    return (neg_entropy + LOG2).mean(axis=-1).mean()


def ablated_views(model: FusionModel, seq: JointSequence) -> dict[int, JointSequence]:
    """One view per modality with all its valid features zeroed."""
    views = {}
    for m in (0, 1):
        positions = [
            [int(p) for p in np.flatnonzero((seq.segments == m) & seq.valid[b])]
            for b in range(seq.features.shape[0])
        ]
        views[m] = seq.mask_features(positions)
    return views


def interaction_loss(bundle_full: ExpertBundle,
                     bundles_ablated: dict[int, ExpertBundle],
                     labels: np.ndarray) -> Tensor:
    """Role-specialization loss over full and modality-ablated views."""
    for m in (0, 1):
        if m not in bundles_ablated:
            raise ValueError(f"missing ablated view for modality {m}")
    loss = bce_with_logits(bundle_full.expert_logits["unique_a"], labels)
    loss = loss + bce_with_logits(bundle_full.expert_logits["unique_b"], labels)
    loss = loss + bce_with_logits(bundle_full.expert_logits["redundancy"], labels)
    loss = loss + bce_with_logits(bundle_full.expert_logits["synergy"], labels)
    for m in (0, 1):
        ab = bundles_ablated[m]
        loss = loss + bce_with_logits(ab.expert_logits["redundancy"], labels)
        loss = loss + kl_to_uniform(ab.expert_logits["synergy"])
    return loss


def total_loss(model: FusionModel, seq: JointSequence, labels: np.ndarray,
               cfg: TrainConfig) -> Tensor:
    bundle = model.forward(seq)
    loss = bce_with_logits(bundle.mixture, labels)
    if cfg.lambda_int > 0 and model.cfg.flavor != "dense":
        # Ablated views only feed the redundancy/synergy terms.
        ablated = {m: model.forward(v, experts=["redundancy", "synergy"])
                   for m, v in ablated_views(model, seq).items()}
        loss = loss + cfg.lambda_int * interaction_loss(bundle, ablated, labels)
    return loss


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _per_label_accuracy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    preds = (logits > 0).astype(np.float64)
    return (preds == labels).mean(axis=0)


def train(model: FusionModel, train_seq: JointSequence, val_seq: JointSequence,
          cfg: TrainConfig, log: TrainLog | None = None):
    """Train fusion parameters; returns (best parameter snapshot, log)."""
    from .harness import micro_f1, macro_f1  # local import avoids a cycle

    log = log or TrainLog()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7124)))
    opt = Adam(model.trainable_params(), cfg.lr)
    n = train_seq.features.shape[0]
    labels_all = train_seq.labels
    enc_checksum = model.encoders.checksum()
    best = {"score": -np.inf, "params": None, "epoch": -1}

    for epoch in range(cfg.epochs):
        t0 = time.time()
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = train_seq.select(idx)
            loss = total_loss(model, batch, labels_all[idx], cfg)
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"loss diverged at epoch {epoch}, batch {n_batches}: {loss.data}"
                )
            opt.zero_grad()
            backward(loss)
            opt.step()
            epoch_loss += loss.item()
            n_batches += 1
        val_logits = model.predict(val_seq)
        val_preds = (val_logits > 0).astype(np.float64)
        accs = _per_label_accuracy(val_logits, val_seq.labels)
        mi = micro_f1(val_preds, val_seq.labels)
        ma = macro_f1(val_preds, val_seq.labels)
        log.add(epoch=epoch, split="val", loss=epoch_loss / n_batches,
                acc=[round(float(a), 6) for a in accs],
                micro_f1=round(mi, 6), macro_f1=round(ma, 6),
                seconds=round(time.time() - t0, 3))
        if mi > best["score"]:
            best = {"score": mi, "epoch": epoch,
                    "params": {k: p.data.copy() for k, p in model.params.items()}}
        if cfg.early_stop_acc is not None and accs.min() >= cfg.early_stop_acc:
            break

    if best["params"] is not None:
        for k, arr in best["params"].items():
            model.params[k].data = arr
    assert model.encoders.checksum() == enc_checksum, "frozen encoders changed"
    return model, log
