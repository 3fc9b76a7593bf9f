"""Cross-entropy training with Adam and fully seeded, reproducible runs."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as hv
from .model import ModelConfig, ModelParams, build_params, forward_batch, save_checkpoint
from .tensor import Tensor

__all__ = [
    "TrainConfig", "AdamState", "EpochStats",
    "cross_entropy", "adam_step", "train", "predict", "classify_accuracy",
    "save_speakers", "load_speakers",
]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    stop_at_dev_acc: float | None = None

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr < 0.0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true labels."""
    if logits.ndim == 1:
        logits = hv.reshape(logits, (1,) + logits.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    lse = hv.log_sum_exp(logits, axis=-1)
    return hv.mean(hv.sub(lse, hv.pick(logits, labels)))


class AdamState:
    """Step counter and per-parameter moment estimates."""

    def __init__(self, params: ModelParams):
        self.step = 0
        self.m = {name: np.zeros(t.shape) for name, t in params.tensors.items()}
        self.v = {name: np.zeros(t.shape) for name, t in params.tensors.items()}


def adam_step(params: ModelParams, state: AdamState, cfg: TrainConfig):
    state.step += 1
    m_corr = 1.0 - cfg.beta1 ** state.step
    v_corr = 1.0 - cfg.beta2 ** state.step
    for name, p in params.tensors.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient in parameter {name!r} "
                               f"at step {state.step}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= cfg.lr * (m / m_corr) / (np.sqrt(v / v_corr) + cfg.eps)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    dev_acc: float
    seconds: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.loss:.6f}\t{self.train_acc:.4f}"
                f"\t{self.dev_acc:.4f}")


def _label_map(features):
    speakers = sorted({u.speaker_id for u in features})
    return speakers, {s: i for i, s in enumerate(speakers)}


def _labels_for(features, index, role):
    labels = np.empty(len(features), dtype=np.int64)
    for i, u in enumerate(features):
        if u.speaker_id not in index:
            raise ValueError(f"{role} utterance {u.utterance_id!r} has speaker "
                             f"{u.speaker_id!r} not present in the training set")
        labels[i] = index[u.speaker_id]
    return labels


def _batch_indices(order, n_frames, batch_size, uniform):
    """Split a permuted index order into batches, optionally grouping by length."""
    if not uniform:
        groups = [order]
    else:
        by_len: dict[int, list] = {}
        for i in order:
            by_len.setdefault(int(n_frames[i]), []).append(i)
        groups = [np.array(g) for g in by_len.values()]
    for g in groups:
        for lo in range(0, len(g), batch_size):
            yield np.asarray(g[lo:lo + batch_size])


def predict(features, params: ModelParams, cfg: ModelConfig,
            batch_size: int = 64) -> np.ndarray:
    """Inference-mode argmax class index per utterance."""
    frags = np.stack([u.fragments for u in features])
    n_frames = np.array([u.n_frames for u in features])
    out = np.empty(len(features), dtype=np.int64)
    uniform = cfg.mode != "hvector"
    order = np.arange(len(features))
    for idx in _batch_indices(order, n_frames, batch_size, uniform):
        logits, _ = forward_batch(frags[idx], n_frames[idx], params, cfg,
                                  training=False)
        out[idx] = np.argmax(logits.data, axis=1)
    return out


def classify_accuracy(features, labels, params, cfg, batch_size: int = 64) -> float:
    return float(np.mean(predict(features, params, cfg, batch_size) == labels))


def train(train_feats, dev_feats, model_cfg: ModelConfig, cfg: TrainConfig,
          checkpoint_path=None, log_path=None):
    """Fit a model; returns (best parameters, per-epoch stats, speaker list).

    "Best" means highest dev accuracy, ties broken by the earlier epoch. The
    shuffle order and dropout masks come from named streams off cfg.seed, so
    a rerun with the same inputs reproduces the loss trajectory bit-for-bit.
    """
    if not train_feats:
        raise ValueError("training set is empty")
    if not dev_feats:
        raise ValueError("dev set is empty")
    speakers, index = _label_map(train_feats)
    if model_cfg.n_speakers != len(speakers):
        raise ValueError(f"model expects {model_cfg.n_speakers} speakers but the "
                         f"training set has {len(speakers)}")
    y_train = _labels_for(train_feats, index, "train")
    y_dev = _labels_for(dev_feats, index, "dev")

    frags = np.stack([u.fragments for u in train_feats])
    n_frames = np.array([u.n_frames for u in train_feats])
    uniform = model_cfg.mode != "hvector"

    params = build_params(model_cfg, seed=cfg.seed)
    state = AdamState(params)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))

    history: list[EpochStats] = []
    best_acc = -1.0
    best_params = params.clone()
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.monotonic()
            order = shuffle_rng.permutation(len(train_feats))
            loss_sum = 0.0
            correct = 0
            for idx in _batch_indices(order, n_frames, cfg.batch_size, uniform):
                params.zero_grads()
                with hv.record():
                    logits, _ = forward_batch(frags[idx], n_frames[idx], params,
                                              model_cfg, training=True,
                                              rng=dropout_rng)
                    loss = cross_entropy(logits, y_train[idx])
                hv.backward(loss)
                adam_step(params, state, cfg)
                loss_sum += float(loss.data) * len(idx)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == y_train[idx]))
            dev_acc = classify_accuracy(dev_feats, y_dev, params, model_cfg)
            stats = EpochStats(
                epoch=epoch,
                loss=loss_sum / len(train_feats),
                train_acc=correct / len(train_feats),
                dev_acc=dev_acc,
                seconds=time.monotonic() - t0,
            )
            history.append(stats)
            if log_file:
                log_file.write(stats.line() + "\n")
                log_file.flush()
            if dev_acc > best_acc:
                best_acc = dev_acc
                best_params = params.clone()
            if cfg.stop_at_dev_acc is not None and dev_acc >= cfg.stop_at_dev_acc:
                break
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, best_params, model_cfg)
        save_speakers(checkpoint_path, speakers)
    return best_params, history, speakers


def _speaker_list_path(checkpoint_path):
    from pathlib import Path
    return Path(checkpoint_path).with_suffix(".spk")


def save_speakers(checkpoint_path, speakers):
    """Record the label order next to a checkpoint (one speaker id per line)."""
    _speaker_list_path(checkpoint_path).write_text(
        "".join(f"{s}\n" for s in speakers), encoding="utf-8")


def load_speakers(checkpoint_path) -> list[str]:
    path = _speaker_list_path(checkpoint_path)
    if not path.exists():
        raise FileNotFoundError(f"no speaker list at {path}")
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line]
