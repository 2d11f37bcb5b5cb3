"""White-box input reconstruction from a client feature map.

Given the client model and an observed feature map, plain gradient descent
on a candidate image minimizes::

    ||local(x) - target||_2^2 + tv_weight * TV(x)

TV is anisotropic: the sum of absolute forward differences along rows and
columns, per channel, with no wrap-around.  Where a difference is exactly
zero its subgradient is taken as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, InputError, NumericalError
from .metrics import MetricsRecord, compute_metrics
from .privacy import PrivacyParams, perturb

INIT_MODES = ("uniform_random", "zeros", "constant_half")


@dataclass(frozen=True)
class AttackConfig:
    """Gradient-descent settings.

    ``pixel_range`` bounds the random initialization and, when
    ``project`` is true, every iterate is clamped into it.
    """

    max_iters: int = 5000
    step_size: float = 0.01
    tv_weight: float = 0.02
    init_mode: str = "uniform_random"
    seed: int = 0
    pixel_range: tuple[float, float] = (0.0, 255.0)
    project: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if not self.step_size > 0:
            raise ConfigurationError("step_size must be positive")
        if self.tv_weight < 0:
            raise ConfigurationError("tv_weight must be nonnegative")
        if self.init_mode not in INIT_MODES:
            raise ConfigurationError(f"init_mode must be one of {INIT_MODES}")
        lo, hi = self.pixel_range
        if not lo < hi:
            raise ConfigurationError("pixel_range must be increasing")
        object.__setattr__(self, "pixel_range", (float(lo), float(hi)))


@dataclass
class ReconstructionResult:
    reconstructed: np.ndarray
    final_loss: float
    loss_trace: list[float]
    iterations_run: int


class AttackOutcome(NamedTuple):
    original: np.ndarray
    reconstructed: np.ndarray | None
    metrics: MetricsRecord | None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


class ReconstructionError(NumericalError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


def _tv(x: torch.Tensor) -> torch.Tensor:
    """Per-image TV of ``(N, H, W, C)`` images, shape ``(N,)``."""
    dh = (x[:, 1:, :, :] - x[:, :-1, :, :]).abs().sum(dim=(1, 2, 3))
    dw = (x[:, :, 1:, :] - x[:, :, :-1, :]).abs().sum(dim=(1, 2, 3))
    return dh + dw


def total_variation(x) -> float:
    """Anisotropic total variation of an ``(H, W)`` or ``(H, W, C)`` image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    return float(np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum())


def _per_image_loss(model, x: torch.Tensor, target: torch.Tensor, tv_weight: float):
    """``(N,)`` losses for ``(N, H, W, C)`` candidates and ``(N, c, h, w)`` targets."""
    diff = model.features(x) - target
    loss = (diff ** 2).flatten(1).sum(dim=1)
    if tv_weight:
        loss = loss + tv_weight * _tv(x)
    return loss


def _target_tensor(model, target, n: int | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(target), dtype=model.dtype)
    shape = tuple(model.feature_shape)
    if t.shape == shape:
        t = t.unsqueeze(0)
    if tuple(t.shape[1:]) != shape or (n is not None and t.shape[0] != n):
        raise InputError(f"target shape {tuple(np.shape(target))} does not match "
                         f"feature shape {shape}")
    return t.permute(0, 3, 1, 2)


def attack_loss(model, x, target, tv_weight: float) -> float:
    """Squared feature distance plus ``tv_weight`` times the TV of ``x``."""
    xt = torch.as_tensor(np.asarray(x), dtype=model.dtype)
    if tuple(xt.shape) != tuple(model.input_shape):
        raise InputError(f"image shape {tuple(xt.shape)} does not match {model.input_shape}")
    tt = _target_tensor(model, target)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = float(_per_image_loss(model, xt[None], tt, tv_weight)[0])
    model.train(was_training)
    return out


def initial_image(config: AttackConfig, shape, seed=None) -> np.ndarray:
    lo, hi = config.pixel_range
    if config.init_mode == "zeros":
        return np.zeros(shape)
    if config.init_mode == "constant_half":
        return np.full(shape, 0.5 * (lo + hi))
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return rng.uniform(lo, hi, shape)


def _descend(model, targets: torch.Tensor, x0: np.ndarray, config: AttackConfig):
    """Batched gradient descent; images are independent of each other.

    Returns final iterates, per-image loss traces, final losses and per-image
    failure messages (``None`` when the run completed).
    """
    n = x0.shape[0]
    x = torch.as_tensor(x0, dtype=model.dtype).clone()
    lo, hi = config.pixel_range
    traces = np.zeros((n, config.max_iters))
    done = np.full(n, config.max_iters)
    errors: list[str | None] = [None] * n
    active = torch.ones(n, dtype=torch.bool)
    was_training = model.training
    model.eval()
    try:
        for t in range(config.max_iters):
            xg = x.clone().requires_grad_(True)
            loss = _per_image_loss(model, xg, targets, config.tv_weight)
            (grad,) = torch.autograd.grad(loss.sum(), xg)
            lv = loss.detach()
            ok = torch.isfinite(lv) & torch.isfinite(grad).flatten(1).all(dim=1)
            for i in torch.nonzero(active & ~ok).flatten().tolist():
                errors[i] = str(ReconstructionError("non-finite loss or gradient", t))
                done[i] = t
                active[i] = False
            traces[:, t] = lv.numpy()
            if not active.any():
                break
            step = config.step_size * grad
            step[~active] = 0
            x = x - step
            if config.project:
                x = x.clamp(lo, hi)
        with torch.no_grad():
            final = _per_image_loss(model, x, targets, config.tv_weight).numpy()
    finally:
        model.train(was_training)
    trace_lists = [traces[i, :done[i]].tolist() for i in range(n)]
    return x.numpy(), trace_lists, final, errors


def reconstruct(model, target, config: AttackConfig) -> ReconstructionResult:
    """Run ``config.max_iters`` gradient steps from the configured initial image."""
    tt = _target_tensor(model, target)
    if tt.shape[0] != 1:
        raise InputError("reconstruct takes a single feature map")
    x0 = initial_image(config, (1, *model.input_shape))
    x, traces, final, errors = _descend(model, tt, x0, config)
    if errors[0] is not None:
        raise NumericalError(errors[0])
    return ReconstructionResult(reconstructed=x[0], final_loss=float(final[0]),
                                loss_trace=traces[0], iterations_run=len(traces[0]))


def item_seed(seed: int, index: int, stream: int) -> int:
    """Seed for image ``index`` of a batch; ``stream`` separates noise from init."""
    return int(np.random.SeedSequence([int(seed), int(stream), int(index)]).generate_state(1)[0])


def attack_batch(model, images: Sequence, privacy: PrivacyParams | None,
                 config: AttackConfig, image_ids: Sequence[str] | None = None
                 ) -> list[AttackOutcome]:
    """Reconstruct every image from its (optionally perturbed) feature map.

    The target is ``perturb(local(x))`` when ``privacy`` is given, otherwise
    the clean feature map.  Image ``i`` uses noise and init seeds derived from
    ``(config.seed, i)``.  Failures are reported per item.
    """
    from .splitnet import forward_local

    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ConfigurationError("attack_batch needs a nonempty batch of images")
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(images))]
    clean = forward_local(model, images)
    targets = []
    for i, fm in enumerate(clean):
        targets.append(perturb(fm, privacy, item_seed(config.seed, i, 0))
                       if privacy is not None else fm)
    x0 = np.stack([initial_image(config, images.shape[1:], item_seed(config.seed, i, 1))
                   for i in range(len(images))])
    tt = _target_tensor(model, np.stack(targets), len(images))
    x, _, _, errors = _descend(model, tt, x0, config)
    out = []
    for i, img in enumerate(images):
        if errors[i] is not None:
            out.append(AttackOutcome(img, None, None, errors[i]))
        else:
            out.append(AttackOutcome(img, x[i], compute_metrics(img, x[i], ids[i])))
    return out


def with_seed(config: AttackConfig, seed: int) -> AttackConfig:
    return replace(config, seed=int(seed))
