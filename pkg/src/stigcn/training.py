"""Training loop, evaluation, feature extraction and finite-difference checks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .metrics import topk_accuracy
from .model import STIGCN, NetworkConfig, build_stigcn
from .ops import softmax_cross_entropy
from .optim import SGDNesterov, step_lr

__all__ = [
    "TrainConfig", "TrainingError", "train", "evaluate", "extract_features", "predict_logits",
    "grad_check", "PRECISIONS", "curriculum_train_config",
]

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer recipe. ``decay_epochs`` are 0-based epoch indices at which
    the learning rate is multiplied by ``decay_factor``."""

    lr: float = 0.1
    decay_epochs: tuple[int, ...] = (30, 40)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(d) for d in self.decay_epochs))
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"decay epochs must be strictly increasing, got {list(d)}")
        if d and (d[0] < 0 or d[-1] >= self.epochs):
            raise ValueError(f"decay epochs {list(d)} must lie in [0, {self.epochs})")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def lr_at(self, epoch):
        return step_lr(epoch, self.lr, self.decay_epochs, self.decay_factor)

    def to_dict(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def curriculum_train_config(**overrides) -> TrainConfig:
    """Recipe for the synthetic 4-class curriculum."""
    base = dict(lr=0.05, decay_epochs=(7,), momentum=0.9, weight_decay=5e-4,
                batch_size=16, epochs=10, seed=0)
    return TrainConfig(**{**base, **overrides})


def _check_dataset(model: STIGCN, dataset):
    cfg = model.config
    if dataset.X.shape[3] != cfg.topology.joint_count:
        raise ValueError(f"dataset has {dataset.X.shape[3]} joints, model topology "
                         f"{cfg.topology.name!r} has {cfg.topology.joint_count}")
    if dataset.num_classes > cfg.class_count:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model only {cfg.class_count}")


def train(model: STIGCN, dataset, config: TrainConfig, log=None):
    """Mini-batch Nesterov SGD on mean cross-entropy.

    ``log`` may be a callable receiving each epoch record, or a path that
    receives JSON lines. Returns ``(model, records)``.
    """
    _check_dataset(model, dataset)
    rng = np.random.default_rng(config.seed)
    opt = SGDNesterov(model.parameters(), config.lr, config.momentum, config.weight_decay)
    X = dataset.X.astype(model.dtype, copy=False)
    y = dataset.y
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    records = []
    sink = open(log, "w") if isinstance(log, (str, bytes)) or hasattr(log, "__fspath__") else None
    try:
        model.train()
        for epoch in range(config.epochs):
            opt.lr = config.lr_at(epoch)
            order = rng.permutation(n)
            total_loss, correct = 0.0, 0
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                opt.zero_grad()
                logits = model.forward(X[idx])
                loss, dlogits = softmax_cross_entropy(logits, y[idx])
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
                model.backward(dlogits)
                opt.step()
                total_loss += float(loss) * len(idx)
                correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
            rec = {"epoch": epoch, "lr": opt.lr, "loss": total_loss / n, "train_acc": correct / n}
            records.append(rec)
            if sink is not None:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            elif callable(log):
                log(rec)
    finally:
        if sink is not None:
            sink.close()
    return model, records


def predict_logits(model: STIGCN, X, batch_size=64):
    model.eval()
    X = np.asarray(X)
    if len(X) == 0:
        return np.zeros((0, model.config.class_count))
    return np.concatenate([model.forward(X[i:i + batch_size]) for i in range(0, len(X), batch_size)])


def evaluate(model: STIGCN, dataset, ks=(1, 5), batch_size=64) -> dict:
    """Top-k accuracies in eval mode."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    _check_dataset(model, dataset)
    out = topk_accuracy(predict_logits(model, dataset.X, batch_size), dataset.y, ks)
    out["count"] = len(dataset)
    return out


def extract_features(model: STIGCN, X, batch_size=64) -> np.ndarray:
    """Pooled backbone features, one row per sample."""
    model.eval()
    X = getattr(X, "X", X)
    if len(X) == 0:
        return np.zeros((0, model.fc.c_in))
    return np.concatenate([model.features(X[i:i + batch_size]) for i in range(0, len(X), batch_size)])


# -- finite-difference checks ---------------------------------------------

def _loss(model, x, labels):
    return softmax_cross_entropy(model.forward(x), labels)[0]


def grad_check(target, tolerance=1e-4, step=1e-5, seed=0, batch=2, floor=1e-6) -> dict:
    """Central differences against the analytic gradient of every ``Param``.

    ``target`` is a ``NetworkConfig`` (built in float64 with dropout off) or a
    float64 model. Batch norm runs in train mode over the same fixed batch.
    The relative error of an element is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps exactly-zero gradients (biases ahead of batch norm) from
    turning difference noise into large ratios.
    """
    if isinstance(target, NetworkConfig):
        model = build_stigcn(replace(target, dropout=0.0), seed=seed, dtype=np.float64)
    else:
        model = target
    if model.dtype != np.float64:
        raise ValueError("gradient checks need a float64 model")
    cfg = model.config
    rng = np.random.default_rng([seed, 7])
    x = rng.standard_normal((batch, cfg.input_channels, cfg.frames, cfg.topology.joint_count,
                             cfg.bodies))
    labels = rng.integers(0, cfg.class_count, batch)
    model.train()
    model.zero_grad()
    _, dlogits = softmax_cross_entropy(model.forward(x), labels)
    model.backward(dlogits)
    rows = []
    for name, p in model.named_parameters():
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.value)
        p.value = np.ascontiguousarray(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _loss(model, x, labels)
            flat[i] = orig - step
            down = _loss(model, x, labels)
            flat[i] = orig
            numeric.flat[i] = (up - down) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        err = np.abs(analytic - numeric) / denom
        worst = int(np.argmax(err))
        rows.append({
            "name": name, "size": int(p.size), "max_rel_err": float(err.flat[worst]),
            "worst_index": [int(i) for i in np.unravel_index(worst, p.shape)],
            "passed": bool(err.flat[worst] <= tolerance),
        })
    failures = [r["name"] for r in rows if not r["passed"]]
    return {"passed": not failures, "tolerance": tolerance, "step": step, "floor": floor,
            "param_count": len(rows), "failures": failures, "params": rows}
