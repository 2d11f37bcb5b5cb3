"""Convolutional classifier split into a client-side and a cloud-side part.

Images enter the model as ``(H, W, C)`` arrays on the 0-255 scale; the
multiplication by ``input_scale`` (1/255 by default) happens inside
:class:`SplitModel` so that the attack and the metrics can work on raw
pixel values.  Feature maps leave the public API as ``(h, w, c)`` arrays.
"""

from __future__ import annotations

import copy
import enum
import io
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputError, NumericalError

CHECKPOINT_FORMAT = "splitdp-checkpoint"
CHECKPOINT_VERSION = 1


class SplitCase(enum.IntEnum):
    """Number of conv layers kept on the client."""

    CASE1 = 1
    CASE2 = 2
    CASE3 = 3


@dataclass(frozen=True)
class ConvLayer:
    kernel_size: int = 3
    out_channels: int = 64
    has_batchnorm: bool = True
    has_pool: bool = False


def _default_layers() -> tuple[ConvLayer, ...]:
    widths = [64, 64, 128, 128, 256, 256]
    return tuple(ConvLayer(3, w, True, i % 2 == 1) for i, w in enumerate(widths))


@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer layout of the feed-forward conv stack.

    The default is a VGG-style stack: six 3x3 conv layers with batch norm and
    ReLU, 2x2 max-pooling after layers 2, 4 and 6, and a linear head.
    """

    conv_layers: tuple[ConvLayer, ...] = field(default_factory=_default_layers)
    n_classes: int = 10
    input_shape: tuple[int, int, int] = (32, 32, 3)
    input_scale: float = 1.0 / 255.0

    def __post_init__(self):
        object.__setattr__(
            self, "conv_layers",
            tuple(c if isinstance(c, ConvLayer) else ConvLayer(*c) for c in self.conv_layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if len(self.conv_layers) < 3:
            raise ConfigurationError("architecture needs at least 3 conv layers")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be at least 2")

    @classmethod
    def from_widths(cls, widths: Sequence[int], pool_after: Sequence[int] = (2, 4, 6),
                    **kwargs) -> "ArchitectureSpec":
        """Build a 3x3/batch-norm stack with the given channel widths.

        ``pool_after`` holds 1-based layer indices followed by 2x2 max-pooling.
        """
        layers = tuple(ConvLayer(3, int(w), True, (i + 1) in set(pool_after))
                       for i, w in enumerate(widths))
        return cls(conv_layers=layers, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [list(asdict(c).values()) for c in self.conv_layers]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(conv_layers=tuple(ConvLayer(*c) for c in d["conv_layers"]),
                   n_classes=d["n_classes"], input_shape=tuple(d["input_shape"]),
                   input_scale=d["input_scale"])


def feature_shape(spec: ArchitectureSpec, case: int) -> tuple[int, int, int]:
    """Shape ``(h, w, c)`` of the client output for ``case``, from layer arithmetic."""
    case = _check_case(spec, case)
    h, w, c = spec.input_shape
    for layer in spec.conv_layers[:case]:
        # odd kernels with "same" padding keep the spatial size
        c = layer.out_channels
        if layer.has_pool:
            h, w = h // 2, w // 2
    return h, w, c


def _check_case(spec: ArchitectureSpec, case: int) -> int:
    try:
        k = int(case)
    except (TypeError, ValueError):
        raise ConfigurationError(f"invalid split case {case!r}") from None
    if not 1 <= k <= len(spec.conv_layers):
        raise ConfigurationError(
            f"split depth {k} outside 1..{len(spec.conv_layers)} conv layers")
    return k


def _conv_block(in_ch: int, layer: ConvLayer) -> nn.Sequential:
    mods: list[nn.Module] = [nn.Conv2d(in_ch, layer.out_channels, layer.kernel_size,
                                       padding=layer.kernel_size // 2)]
    if layer.has_batchnorm:
        mods.append(nn.BatchNorm2d(layer.out_channels))
    mods.append(nn.ReLU())
    if layer.has_pool:
        mods.append(nn.MaxPool2d(2))
    return nn.Sequential(*mods)


def _conv_stack(spec: ArchitectureSpec) -> list[nn.Sequential]:
    blocks, in_ch = [], spec.input_shape[2]
    for layer in spec.conv_layers:
        blocks.append(_conv_block(in_ch, layer))
        in_ch = layer.out_channels
    return blocks


def _reset_parameters(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=5 ** 0.5, generator=generator)
            fan_in = m.weight[0].numel()
            bound = 1.0 / fan_in ** 0.5
            nn.init.uniform_(m.bias, -bound, bound, generator=generator)
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()
            m.reset_running_stats()


class SplitModel(nn.Module):
    """A classifier ``remote(local(x))`` with a frozen client-side prefix.

    ``local`` maps ``(N, C, H, W)`` scaled inputs to ``(N, c, h, w)`` features,
    ``remote`` maps features to class scores.  Any pair of modules works; the
    models produced by :func:`build_model` additionally carry their
    :class:`ArchitectureSpec` and can be checkpointed.
    """

    def __init__(self, local: nn.Module, remote: nn.Module, case: int,
                 spec: ArchitectureSpec | None = None,
                 input_shape: tuple[int, int, int] = (32, 32, 3),
                 input_scale: float = 1.0 / 255.0, provenance: str = ""):
        super().__init__()
        self.local = local
        self.remote = remote
        self.case = int(case)
        self.spec = spec
        self.input_shape = tuple(spec.input_shape if spec else input_shape)
        self.input_scale = float(spec.input_scale if spec else input_scale)
        self.provenance = provenance
        self.local_frozen = False
        self._feature_shape: tuple[int, ...] | None = None

    @property
    def dtype(self) -> torch.dtype:
        for t in self.parameters():
            return t.dtype
        for t in self.buffers():
            return t.dtype
        return torch.get_default_dtype()

    @property
    def feature_shape(self) -> tuple[int, ...]:
        if self._feature_shape is None:
            with torch.no_grad():
                was_training = self.local.training
                self.local.eval()
                probe = torch.zeros((1, *self.input_shape), dtype=self.dtype)
                out = self.features(probe)
                self.local.train(was_training)
            self._feature_shape = tuple(out.shape[2:]) + (out.shape[1],)
        return self._feature_shape

    def freeze_local(self) -> "SplitModel":
        for p in self.local.parameters():
            p.requires_grad_(False)
        self.local.eval()
        self.local_frozen = True
        return self

    def train(self, mode: bool = True) -> "SplitModel":
        super().train(mode)
        if self.local_frozen:
            self.local.eval()
        return self

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """``(N, H, W, C)`` images on the pixel scale to ``(N, c, h, w)`` features."""
        return self.local(x.permute(0, 3, 1, 2) * self.input_scale)

    def classify(self, fm: torch.Tensor) -> torch.Tensor:
        return self.remote(fm)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classify(self.features(x))

    def local_state_bytes(self) -> bytes:
        """Serialized client parameters, used to check that they never change."""
        buf = io.BytesIO()
        torch.save({k: v.detach().clone() for k, v in self.local.state_dict().items()}, buf)
        return buf.getvalue()


def build_model(spec: ArchitectureSpec | None = None, case: int = SplitCase.CASE1,
                seed: int = 0) -> SplitModel:
    """Randomly initialized split model; identical parameters for identical seeds."""
    spec = spec or ArchitectureSpec()
    k = _check_case(spec, case)
    blocks = _conv_stack(spec)
    h, w, c = spec.input_shape
    for layer in spec.conv_layers:
        c = layer.out_channels
        if layer.has_pool:
            h, w = h // 2, w // 2
    remote = nn.Sequential(*blocks[k:], nn.Flatten(), nn.Linear(h * w * c, spec.n_classes))
    model = SplitModel(nn.Sequential(*blocks[:k]), remote, k, spec=spec)
    _reset_parameters(model, torch.Generator().manual_seed(int(seed)))
    return model


def as_split(model: SplitModel, case: int) -> SplitModel:
    """Re-split an architecture-backed model at another depth, sharing no storage."""
    if model.spec is None:
        raise ConfigurationError("re-splitting requires an architecture-backed model")
    k = _check_case(model.spec, case)
    blocks = list(model.local) + list(model.remote)
    blocks = copy.deepcopy(blocks)
    out = SplitModel(nn.Sequential(*blocks[:k]), nn.Sequential(*blocks[k:]), k,
                     spec=model.spec, provenance=model.provenance)
    return out.to(model.dtype)


@dataclass
class PretrainedExtractor:
    """Conv-layer parameters from a model trained on an auxiliary dataset.

    ``layers[i]`` is the state dict of conv block ``i``; a Case-k client takes
    the first k of them, so every case is a prefix of the same pretrained stack.
    """

    spec: ArchitectureSpec
    layers: list[dict[str, torch.Tensor]]
    provenance: str
    train_accuracy: float = float("nan")


def pretrain_local(spec: ArchitectureSpec, pretrain_set, config,
                   accuracy_floor: float = 0.0) -> PretrainedExtractor:
    """Train the whole conv stack on ``pretrain_set`` and keep its conv layers.

    The classifier head is sized for the pretraining label space and then
    discarded.  ``config`` is a :class:`splitdp.training.TrainConfig`; only its
    optimizer settings and seed are used.  Training accuracy below
    ``accuracy_floor`` (percent) produces a warning.
    """
    from .training import evaluate, fit_module

    n_classes = int(pretrain_set.n_classes)
    full_spec = ArchitectureSpec(conv_layers=spec.conv_layers, n_classes=n_classes,
                                 input_shape=spec.input_shape, input_scale=spec.input_scale)
    model = build_model(full_spec, len(spec.conv_layers), seed=config.seed)
    fit_module(model, model.parameters(), pretrain_set, config,
               lambda m, xb, yb, rng: nn.functional.cross_entropy(m(xb), yb))
    acc = evaluate(model, pretrain_set, None, runs=1, seed=config.seed).accuracy
    if acc < accuracy_floor:
        warnings.warn(f"pretraining accuracy {acc:.2f}% below floor {accuracy_floor:.2f}%",
                      stacklevel=2)
    layers = [{k: v.detach().clone() for k, v in block.state_dict().items()}
              for block in model.local]
    name = getattr(pretrain_set, "name", "unknown")
    prov = (f"pretrained on {name} n={len(pretrain_set)} epochs={config.epochs} "
            f"lr={config.learning_rate} seed={config.seed} train_acc={acc:.3f}")
    return PretrainedExtractor(spec=spec, layers=layers, provenance=prov, train_accuracy=acc)


def install_local(model: SplitModel, extractor: PretrainedExtractor) -> SplitModel:
    """Copy of ``model`` whose client layers come from ``extractor``, frozen."""
    if model.spec is None or model.spec.conv_layers != extractor.spec.conv_layers:
        raise ConfigurationError("extractor was trained for a different conv stack")
    out = copy.deepcopy(model)
    for block, state in zip(out.local, extractor.layers[:out.case]):
        block.load_state_dict(state)
    out.provenance = extractor.provenance
    out._feature_shape = None
    return out.freeze_local()


def _as_batch(x, shape: tuple[int, ...], dtype: torch.dtype, what: str):
    t = torch.as_tensor(np.asarray(x), dtype=dtype)
    single = t.shape == tuple(shape)
    if single:
        t = t.unsqueeze(0)
    if tuple(t.shape[1:]) != tuple(shape):
        raise InputError(f"{what} shape {tuple(np.shape(x))} does not match {tuple(shape)}")
    if not torch.isfinite(t).all():
        raise InputError(f"{what} contains non-finite values")
    return t, single


def forward_local(model: SplitModel, x) -> np.ndarray:
    """Client-side features for one ``(H, W, C)`` image or a batch of them."""
    t, single = _as_batch(x, model.input_shape, model.dtype, "image")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model.features(t).permute(0, 2, 3, 1).numpy()
    model.train(was_training)
    return out[0] if single else out


def forward_remote(model: SplitModel, fm) -> np.ndarray:
    """Class scores for one ``(h, w, c)`` feature map or a batch of them."""
    t, single = _as_batch(fm, model.feature_shape, model.dtype, "feature map")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model.classify(t.permute(0, 3, 1, 2)).numpy()
    model.train(was_training)
    return out[0] if single else out


def input_gradient(model: SplitModel, loss: Callable[[torch.Tensor], torch.Tensor],
                   x) -> np.ndarray:
    """Gradient of ``loss`` with respect to the image ``x``.

    ``loss`` receives ``x`` as a tensor in the model's dtype and must return a
    scalar tensor.  The model is evaluated in inference mode.
    """
    was_training = model.training
    model.eval()
    xt = torch.as_tensor(np.asarray(x), dtype=model.dtype).clone().requires_grad_(True)
    try:
        value = loss(xt)
        grad = None
        if value.requires_grad:
            (grad,) = torch.autograd.grad(value, xt, allow_unused=True)
    finally:
        model.train(was_training)
    if grad is None:
        return np.zeros(xt.shape, dtype=xt.detach().numpy().dtype)
    grad = grad.numpy()
    if not np.all(np.isfinite(grad)):
        raise NumericalError("input gradient contains non-finite values")
    return grad


def save_checkpoint(model: SplitModel, path) -> Path:
    """Write spec, case, both parameter sets and provenance to ``path``."""
    if model.spec is None:
        raise ConfigurationError("only architecture-backed models can be checkpointed")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "case": model.case,
        "dtype": str(model.dtype).replace("torch.", ""),
        "local_frozen": model.local_frozen,
        "provenance": model.provenance,
        "local": model.local.state_dict(),
        "remote": model.remote.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> SplitModel:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a split-model checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ConfigurationError(f"checkpoint version {payload['version']} is newer than supported")
    spec = ArchitectureSpec.from_dict(payload["spec"])
    model = build_model(spec, payload["case"], seed=0).to(getattr(torch, payload["dtype"]))
    model.local.load_state_dict(payload["local"])
    model.remote.load_state_dict(payload["remote"])
    model.provenance = payload["provenance"]
    if payload["local_frozen"]:
        model.freeze_local()
    return model


def save_extractor(extractor: PretrainedExtractor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": "splitdp-extractor", "version": CHECKPOINT_VERSION,
                "spec": extractor.spec.to_dict(), "layers": extractor.layers,
                "provenance": extractor.provenance,
                "train_accuracy": extractor.train_accuracy}, path)
    return path


def load_extractor(path) -> PretrainedExtractor:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != "splitdp-extractor":
        raise ConfigurationError(f"{path} is not a pretrained-extractor file")
    return PretrainedExtractor(spec=ArchitectureSpec.from_dict(payload["spec"]),
                               layers=payload["layers"], provenance=payload["provenance"],
                               train_accuracy=payload["train_accuracy"])
