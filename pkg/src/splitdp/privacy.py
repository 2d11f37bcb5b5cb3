"""Client-side Laplace perturbation of feature maps.

The client clips its feature map to infinity norm ``B`` and adds i.i.d.
Laplace noise of scale ``2B / epsilon`` to every element.  ``B`` is taken as
the median infinity norm of feature maps over a sample of training images.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigurationError, NumericalError


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class PrivacyParams:
    """Privacy budget and clipping bound for one deployment.

    ``sensitivity`` is ``2 * bound``: after clipping, any single element can
    move by at most ``2B`` between two inputs.
    """

    epsilon: float
    bound: float
    nullification_rate: float = 0.0
    sensitivity: float = field(init=False)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if not (self.bound > 0 and math.isfinite(self.bound)):
            raise ConfigurationError(f"bound must be positive and finite, got {self.bound}")
        if not 0.0 <= self.nullification_rate < 1.0:
            raise ConfigurationError("nullification_rate must lie in [0, 1)")
        object.__setattr__(self, "sensitivity", 2.0 * self.bound)

    @property
    def scale(self) -> float:
        """Laplace scale ``b = 2B / epsilon``."""
        return self.sensitivity / self.epsilon


@dataclass(frozen=True)
class BoundEstimate:
    bound: float
    sample_size: int
    per_sample_norms: tuple[float, ...]


def estimate_bound(model, samples) -> BoundEstimate:
    """Median infinity norm of the client feature maps of ``samples``.

    For an even number of samples the median is the mean of the two central
    order statistics.
    """
    from .splitnet import forward_local

    samples = np.asarray(samples)
    if samples.size == 0 or len(samples) == 0:
        raise ConfigurationError("bound estimation needs at least one sample")
    fms = forward_local(model, samples)
    if samples.shape == tuple(model.input_shape):
        fms = fms[None]
    norms = np.abs(fms.reshape(len(fms), -1)).max(axis=1).astype(np.float64)
    return bound_from_norms(norms)


def bound_from_norms(norms) -> BoundEstimate:
    norms = np.asarray(norms, dtype=np.float64)
    if norms.size == 0:
        raise ConfigurationError("bound estimation needs at least one sample")
    return BoundEstimate(bound=float(np.median(norms)), sample_size=int(norms.size),
                         per_sample_norms=tuple(float(v) for v in norms))


def clip(fm, bound: float) -> np.ndarray:
    """Scale ``fm`` down so its infinity norm is at most ``bound``.

    Maps already within the bound are returned unchanged (same values, same
    dtype); larger ones are multiplied by ``bound / ||fm||_inf``.
    """
    if not bound > 0:
        raise ConfigurationError(f"bound must be positive, got {bound}")
    fm = np.asarray(fm)
    if not np.all(np.isfinite(fm)):
        raise NumericalError("feature map contains non-finite values")
    d = float(np.max(np.abs(fm))) if fm.size else 0.0
    if d <= bound:
        return fm.copy()
    out = fm * (bound / d)
    # rounding can leave the result one ulp above the bound
    np.clip(out, -bound, bound, out=out)
    return out


def clip_batch(fms, bound: float) -> np.ndarray:
    """:func:`clip` applied independently to each map along axis 0."""
    fms = np.asarray(fms)
    return np.stack([clip(f, bound) for f in fms]) if len(fms) else fms.copy()


def laplace_sample(scale: float, shape, seed=None) -> np.ndarray:
    """I.i.d. zero-mean Laplace draws by inverse-CDF sampling.

    ``u ~ U(-1/2, 1/2)``, ``x = -scale * sign(u) * ln(1 - 2|u|)``.
    """
    if not (scale > 0 and math.isfinite(scale)):
        raise ConfigurationError(f"Laplace scale must be positive and finite, got {scale}")
    u = _rng(seed).random(shape) - 0.5
    # u = -0.5 would give log(0); nudge it to the largest finite draw
    tail = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(np.float64).tiny)
    return -scale * np.sign(u) * np.log(tail)


def laplace_logpdf(x, scale: float):
    return -np.log(2.0 * scale) - np.abs(x) / scale


def perturb(fm, params: PrivacyParams, seed=None) -> np.ndarray:
    """Clip ``fm`` to ``params.bound`` and add Laplace noise of scale ``2B/epsilon``."""
    clipped = clip(fm, params.bound)
    noise = laplace_sample(params.scale, clipped.shape, seed)
    return (clipped + noise).astype(clipped.dtype, copy=False)


def perturb_batch(fms, params: PrivacyParams, seed=None) -> np.ndarray:
    """Per-map clipping of a batch followed by one noise draw for the whole batch."""
    clipped = clip_batch(fms, params.bound)
    noise = laplace_sample(params.scale, clipped.shape, seed)
    return (clipped + noise).astype(clipped.dtype, copy=False)


def nullify(x, rate: float, seed=None) -> np.ndarray:
    """Zero ``round(rate * x.size)`` uniformly chosen elements of ``x``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"nullification rate must lie in [0, 1), got {rate}")
    out = np.array(x, copy=True)
    n = int(round(rate * out.size))
    if n:
        idx = _rng(seed).choice(out.size, size=n, replace=False)
        out.reshape(-1)[idx] = 0
    return out


def reference_bounds() -> dict[tuple[str, int], float]:
    """Clipping bounds reported for the authors' pretrained weights.

    These are weight-dependent reference values keyed by ``(dataset, case)``
    and are never used as defaults.
    """
    text = resources.files("splitdp.resources").joinpath("reference_bounds.csv").read_text()
    rows = csv.DictReader(line for line in text.splitlines() if not line.startswith("#"))
    return {(r["dataset"], int(r["case"])): float(r["bound"]) for r in rows}
