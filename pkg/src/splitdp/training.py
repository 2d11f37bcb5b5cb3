"""Training of the cloud-side model and accuracy evaluation.

Only the remote part is ever optimized.  Noisy fine-tuning adds, per batch,
a cross-entropy term on clipped-and-perturbed feature maps to the plain
cross-entropy term; fresh noise is drawn for every batch.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InputError
from .privacy import PrivacyParams, perturb_batch

log = logging.getLogger(__name__)

# learning rate, batch size, epochs used for the full-scale runs
FULL_SCALE_SCHEDULES = {
    "svhn": (1e-5, 300, 40),
    "gtsrb": (2e-6, 200, 100),
    "stl10": (2.7e-6, 200, 500),
    "cifar10": (1e-5, 100, 100),
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 4
    seed: int = 0
    optimizer: str = "adam"
    noisy: bool = False
    noise_params: PrivacyParams | None = None
    plain_loss_weight: float = 1.0
    noisy_loss_weight: float = 1.0
    recalibrate_norm: bool = True
    log_path: str | None = None

    def __post_init__(self):
        if self.optimizer.lower() != "adam":
            raise ConfigurationError("only the Adam optimizer is supported")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("invalid learning rate, batch size or epoch count")
        w1, w2 = self.plain_loss_weight, self.noisy_loss_weight
        if w1 < 0 or w2 < 0 or w1 + w2 <= 0:
            raise ConfigurationError("loss weights must be >= 0 with a positive sum")
        if self.noisy and self.noise_params is None:
            raise ConfigurationError("noisy training needs noise_params")

    @classmethod
    def for_dataset(cls, name: str, epoch_fraction: float = 0.1, **overrides) -> "TrainConfig":
        """Full-scale schedule of ``name`` with the epoch count scaled down."""
        lr, bs, epochs = FULL_SCALE_SCHEDULES[name]
        kw = dict(learning_rate=lr, batch_size=bs,
                  epochs=max(1, int(round(epochs * epoch_fraction))))
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class AccuracyReport:
    accuracy: float
    n_correct: tuple[int, ...]
    n_total: int
    runs: int
    per_run: tuple[float, ...]


def normalized_accuracy_loss(baseline: float, accuracy: float) -> float:
    """Accuracy drop relative to the baseline, in percent."""
    return 100.0 * (baseline - accuracy) / baseline


LossFn = Callable[[torch.nn.Module, torch.Tensor, torch.Tensor, np.random.Generator],
                  torch.Tensor]


def fit_module(model, params, train_set, config: TrainConfig, loss_fn: LossFn,
               val_set=None) -> None:
    """Adam over ``params`` for ``config.epochs`` epochs of seeded minibatches.

    Shuffling and noise use two independent streams derived from
    ``config.seed``, so changing how much noise a loss draws never changes the
    batch order.
    """
    n = len(train_set)
    if n == 0:
        raise InputError("empty training set")
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ConfigurationError("no trainable parameters")
    if config.epochs == 0:
        return
    order_rng = np.random.default_rng([config.seed, 0])
    noise_rng = np.random.default_rng([config.seed, 1])
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    dtype = model.dtype
    logf = _open_log(config.log_path)
    try:
        for epoch in range(config.epochs):
            model.train()
            perm = order_rng.permutation(n)
            total, seen = 0.0, 0
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                xb = torch.as_tensor(train_set.images[idx], dtype=dtype)
                yb = torch.as_tensor(train_set.labels[idx])
                opt.zero_grad()
                loss = loss_fn(model, xb, yb, noise_rng)
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
                seen += len(idx)
            val = evaluate(model, val_set, None, 1, 0).accuracy if val_set is not None else ""
            log.debug("epoch %d loss %.5f val %s", epoch + 1, total / seen, val)
            if logf:
                logf.write(f"{epoch + 1},{total / seen:.6f},{val}\n")
                logf.flush()
    finally:
        if logf:
            logf.close()
        model.eval()


def _open_log(path):
    if not path:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    fh = open(path, "a")
    if fresh:
        fh.write("epoch,loss,val_accuracy\n")
    return fh


def _check_model(model, train_set):
    if not model.local_frozen:
        raise ConfigurationError("the local part must be frozen before training")
    if tuple(train_set.images.shape[1:]) != tuple(model.input_shape):
        raise InputError(f"dataset images {train_set.images.shape[1:]} do not match "
                         f"model input {model.input_shape}")


def _clean_loss(model, xb, yb, rng):
    with torch.no_grad():
        fm = model.features(xb)
    return F.cross_entropy(model.classify(fm), yb)


def train_baseline(model, train_set, config: TrainConfig, val_set=None):
    """Copy of ``model`` with its remote part trained on clean feature maps."""
    if config.noisy:
        raise ConfigurationError("train_baseline expects config.noisy = False")
    _check_model(model, train_set)
    out = copy.deepcopy(model)
    fit_module(out, out.remote.parameters(), train_set, config, _clean_loss, val_set)
    return out


def noisy_finetune(model, train_set, config: TrainConfig, val_set=None):
    """Copy of ``model`` fine-tuned on plain and perturbed feature maps.

    Per batch the loss is
    ``plain_loss_weight * CE(remote(fm)) + noisy_loss_weight * CE(remote(perturb(fm)))``.
    Both passes update the batch-norm running statistics, yet after deployment
    the remote part only ever sees perturbed maps.  With
    ``config.recalibrate_norm`` those statistics are therefore re-estimated
    from one pass of perturbed training features at the end.
    """
    if not config.noisy:
        raise ConfigurationError("noisy_finetune expects config.noisy = True")
    _check_model(model, train_set)
    params = config.noise_params
    w_plain, w_noisy = config.plain_loss_weight, config.noisy_loss_weight

    def loss_fn(m, xb, yb, rng):
        with torch.no_grad():
            fm = m.features(xb)
        loss = 0.0
        if w_plain > 0:
            loss = loss + w_plain * F.cross_entropy(m.classify(fm), yb)
        if w_noisy > 0:
            noisy = perturb_batch(fm.numpy(), params, rng)
            noisy = torch.as_tensor(noisy, dtype=fm.dtype)
            loss = loss + w_noisy * F.cross_entropy(m.classify(noisy), yb)
        return loss

    out = copy.deepcopy(model)
    fit_module(out, out.remote.parameters(), train_set, config, loss_fn, val_set)
    if config.recalibrate_norm and config.epochs > 0:
        recalibrate_norm(out, train_set, params, np.random.default_rng([config.seed, 2]),
                         config.batch_size)
    return out


def recalibrate_norm(model, train_set, privacy: PrivacyParams, rng: np.random.Generator,
                     batch_size: int = 128) -> None:
    """Replace the remote batch-norm running statistics with their exact
    averages over perturbed feature maps of ``train_set``."""
    norms = [m for m in model.remote.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    model.remote.train()
    try:
        with torch.no_grad():
            for start in range(0, len(train_set), batch_size):
                xb = torch.as_tensor(train_set.images[start:start + batch_size],
                                     dtype=model.dtype)
                fm = model.features(xb)
                noisy = perturb_batch(fm.numpy(), privacy, rng)
                model.classify(torch.as_tensor(noisy, dtype=fm.dtype))
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        model.eval()


def evaluate(model, test_set, privacy: PrivacyParams | None = None, runs: int = 5,
             seed: int = 0, batch_size: int = 500) -> AccuracyReport:
    """Accuracy averaged over ``runs`` passes over ``test_set``.

    With ``privacy`` every feature map is clipped and perturbed before the
    remote pass, with fresh noise in every run.
    """
    if runs < 1:
        raise ConfigurationError("runs must be >= 1")
    n = len(test_set)
    if n == 0:
        raise InputError("empty test set")
    dtype = model.dtype
    rngs = [np.random.default_rng([seed, r]) for r in range(runs)]
    correct = np.zeros(runs, dtype=np.int64)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, n, batch_size):
            xb = torch.as_tensor(test_set.images[start:start + batch_size], dtype=dtype)
            yb = torch.as_tensor(test_set.labels[start:start + batch_size])
            fm = model.features(xb)
            for r in range(runs if privacy is not None else 1):
                inp = fm
                if privacy is not None:
                    inp = torch.as_tensor(perturb_batch(fm.numpy(), privacy, rngs[r]), dtype=dtype)
                pred = model.classify(inp).argmax(dim=1)
                correct[r] += int((pred == yb).sum())
    model.train(was_training)
    if privacy is None:
        correct[:] = correct[0]
    per_run = tuple(100.0 * int(c) / n for c in correct)
    return AccuracyReport(accuracy=float(np.mean(per_run)), n_correct=tuple(int(c) for c in correct),
                          n_total=n, runs=runs, per_run=per_run)
