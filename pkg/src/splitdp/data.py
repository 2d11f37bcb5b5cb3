"""Dataset ingestion, resizing and seeded train/test selection.

Raw files are expected under ``<root>/raw/<dataset>/`` in their official
distribution layout (see :data:`RAW_FILES`); :func:`fetch_dataset` can
download them, nothing else here touches the network.  Selected and resized
examples are cached under ``<root>/<dataset>/<split>/`` as a flat float32
array plus a text manifest::

    # splitdp-manifest 1
    # key <hash of the DatasetSpec>
    # shape 32 32 3 float32
    source_id<TAB>label<TAB>byte_offset
    ...

Images are float32 on the 0-255 scale with shape ``(32, 32, 3)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import pickle
import tarfile
import urllib.request
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, IngestionError, InputError

log = logging.getLogger(__name__)

IMAGE_SHAPE = (32, 32, 3)
MANIFEST_VERSION = 1

# (train, test) sizes used in the evaluation
FULL_SIZES = {
    "svhn": (73200, 26000),
    "gtsrb": (14600, 4800),
    "stl10": (10000, 3000),
    "cifar10": (50000, 10000),
    "cifar100": (50000, 10000),
    "synthetic": (20000, 5000),
}
N_CLASSES = {"svhn": 10, "gtsrb": 10, "stl10": 10, "cifar10": 10, "cifar100": 100,
             "synthetic": 10}

RAW_FILES = {
    "svhn": {
        "train_32x32.mat": "http://ufldl.stanford.edu/housenumbers/train_32x32.mat",
        "test_32x32.mat": "http://ufldl.stanford.edu/housenumbers/test_32x32.mat",
    },
    "cifar10": {
        "cifar-10-python.tar.gz": "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz",
    },
    "cifar100": {
        "cifar-100-python.tar.gz": "https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz",
    },
    "stl10": {
        "stl10_binary.tar.gz": "http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz",
    },
    "gtsrb": {
        "GTSRB_Final_Training_Images.zip": (
            "https://sid.erda.dk/public/archives/daaeac0d7ce1152aea9b61d9f1e19370/"
            "GTSRB_Final_Training_Images.zip"),
    },
}


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int
    source_id: str


@dataclass
class ImageDataset:
    """An immutable-by-convention batch of labeled ``(32, 32, 3)`` images."""

    images: np.ndarray
    labels: np.ndarray
    source_ids: list[str]
    name: str = ""
    n_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.source_ids)):
            raise InputError("images, labels and source_ids differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError(f"labels outside 0..{self.n_classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[LabeledExample]:
        for img, lab, sid in zip(self.images, self.labels, self.source_ids):
            yield LabeledExample(img, int(lab), sid)

    def subset(self, index) -> "ImageDataset":
        index = np.asarray(index, dtype=np.int64)
        return ImageDataset(self.images[index], self.labels[index],
                            [self.source_ids[i] for i in index], self.name, self.n_classes)

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], name: str = "",
                      n_classes: int = 10) -> "ImageDataset":
        examples = list(examples)
        images = (np.stack([e.image for e in examples]) if examples
                  else np.zeros((0, *IMAGE_SHAPE), np.float32))
        return cls(images, [e.label for e in examples], [e.source_id for e in examples],
                   name, n_classes)


@dataclass(frozen=True)
class DatasetSpec:
    """What to load: which dataset, how many examples, which classes, which seed.

    ``train_size``/``test_size`` default to the full evaluation sizes scaled by
    ``desk_scale``.
    """

    name: str
    train_size: int | None = None
    test_size: int | None = None
    n_classes: int | None = None
    image_shape: tuple[int, int, int] = IMAGE_SHAPE
    class_filter: tuple[int, ...] | None = None
    seed: int = 0
    desk_scale: float = 1.0

    def __post_init__(self):
        name = self.name.lower().replace("-", "").replace("_", "")
        if name not in N_CLASSES:
            raise ConfigurationError(f"unknown dataset {self.name!r}")
        object.__setattr__(self, "name", name)
        if not 0 < self.desk_scale <= 1:
            raise ConfigurationError("desk_scale must lie in (0, 1]")
        if tuple(self.image_shape) != IMAGE_SHAPE:
            raise ConfigurationError("only (32, 32, 3) images are supported")
        full = FULL_SIZES.get(name, (0, 0))
        if self.train_size is None:
            object.__setattr__(self, "train_size", int(round(full[0] * self.desk_scale)))
        if self.test_size is None:
            object.__setattr__(self, "test_size", int(round(full[1] * self.desk_scale)))
        if self.n_classes is None:
            object.__setattr__(self, "n_classes", N_CLASSES[name])
        if self.class_filter is not None:
            object.__setattr__(self, "class_filter", tuple(int(c) for c in self.class_filter))
            if len(self.class_filter) != self.n_classes:
                raise ConfigurationError("class_filter length must equal n_classes")

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def resize(image, target: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Bilinear resampling (half-pixel centers, no antialiasing) of an ``(H, W, 3)`` image."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[:2] == tuple(target):
        return image.astype(np.float64)
    t = torch.as_tensor(image, dtype=torch.float64).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(target), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def partition(examples: ImageDataset, sizes: tuple[int, int], seed: int = 0
              ) -> tuple[ImageDataset, ImageDataset]:
    """Disjoint uniformly sampled train/test subsets of ``examples``."""
    n_train, n_test = (int(s) for s in sizes)
    if n_train < 0 or n_test < 0:
        raise ConfigurationError("partition sizes must be nonnegative")
    if n_train + n_test > len(examples):
        raise ConfigurationError(
            f"need {n_train + n_test} examples, only {len(examples)} available")
    perm = np.random.default_rng(seed).permutation(len(examples))
    return examples.subset(perm[:n_train]), examples.subset(perm[n_train:n_train + n_test])


# ---------------------------------------------------------------------------
# raw readers: each returns uint8 (N, H, W, 3) images, labels, source ids


def _need(path: Path) -> Path:
    if not path.exists():
        raise IngestionError(f"missing dataset file: {path}")
    return path


def _read_svhn(raw: Path, split: str):
    from scipy.io import loadmat

    path = _need(raw / f"{split}_32x32.mat")
    try:
        mat = loadmat(path)
    except Exception as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    x = np.transpose(mat["X"], (3, 0, 1, 2))
    y = mat["y"].reshape(-1).astype(np.int64) % 10  # digit 0 is stored as 10
    return x, y, [f"svhn/{split}/{i}" for i in range(len(y))]


def _extract(raw: Path, archive: str, marker: str) -> Path:
    target = raw / marker
    if not target.exists():
        src = _need(raw / archive)
        log.info("extracting %s", src)
        if archive.endswith(".zip"):
            with zipfile.ZipFile(src) as zf:
                zf.extractall(raw)
        else:
            with tarfile.open(src) as tf:
                tf.extractall(raw, filter="data")
    return _need(target)


def _unpickle(path: Path) -> dict:
    try:
        with open(_need(path), "rb") as fh:
            return pickle.load(fh, encoding="latin1")
    except (pickle.UnpicklingError, EOFError) as exc:
        raise IngestionError(f"corrupt file {path}: {exc}") from exc


def _read_cifar(raw: Path, split: str, fine: bool):
    if fine:
        base = _extract(raw, "cifar-100-python.tar.gz", "cifar-100-python")
        batches = ["train"] if split == "train" else ["test"]
        key, tag = "fine_labels", "cifar100"
    else:
        base = _extract(raw, "cifar-10-python.tar.gz", "cifar-10-batches-py")
        batches = ([f"data_batch_{i}" for i in range(1, 6)] if split == "train"
                   else ["test_batch"])
        key, tag = "labels", "cifar10"
    xs, ys, ids = [], [], []
    for b in batches:
        d = _unpickle(base / b)
        xs.append(np.asarray(d["data"], np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        ys.append(np.asarray(d[key], np.int64))
        ids += [f"{tag}/{b}/{i}" for i in range(len(d[key]))]
    return np.concatenate(xs), np.concatenate(ys), ids


def _read_stl10(raw: Path):
    base = _extract(raw, "stl10_binary.tar.gz", "stl10_binary")
    xs, ys, ids = [], [], []
    for split in ("train", "test"):
        x = np.fromfile(_need(base / f"{split}_X.bin"), dtype=np.uint8)
        y = np.fromfile(_need(base / f"{split}_y.bin"), dtype=np.uint8).astype(np.int64) - 1
        if x.size != len(y) * 96 * 96 * 3:
            raise IngestionError(f"corrupt STL-10 file {base / f'{split}_X.bin'}")
        # stored column-major per channel
        xs.append(x.reshape(-1, 3, 96, 96).transpose(0, 3, 2, 1))
        ys.append(y)
        ids += [f"stl10/{split}/{i}" for i in range(len(y))]
    return np.concatenate(xs), np.concatenate(ys), ids


def _read_gtsrb(raw: Path, class_filter, n_classes: int):
    from PIL import Image

    base = _extract(raw, "GTSRB_Final_Training_Images.zip", "GTSRB")
    img_root = base / "Final_Training" / "Images"
    if not img_root.exists():
        img_root = base
    by_class: dict[int, list[Path]] = {}
    for d in sorted(p for p in img_root.iterdir() if p.is_dir() and p.name.isdigit()):
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in (".ppm", ".png", ".jpg"))
        if files:
            by_class[int(d.name)] = files
    if not by_class:
        raise IngestionError(f"no GTSRB class folders under {img_root}")
    if class_filter is None:
        # most populous classes; ties broken by class id
        ranked = sorted(by_class, key=lambda c: (-len(by_class[c]), c))
        class_filter = ranked[:n_classes]
    chosen = sorted(class_filter)
    missing = [c for c in chosen if c not in by_class]
    if missing:
        raise ConfigurationError(f"GTSRB classes {missing} not present")
    images, labels, ids = [], [], []
    for new_label, c in enumerate(chosen):
        for f in by_class[c]:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64)
            except OSError as exc:
                raise IngestionError(f"cannot read {f}: {exc}") from exc
            images.append(resize(arr))
            labels.append(new_label)
            ids.append(f"gtsrb/{c:05d}/{f.name}")
    return np.stack(images), np.asarray(labels), ids


def _to_dataset(x, y, ids, name, n_classes) -> ImageDataset:
    return ImageDataset(np.asarray(x, np.float32), y, list(ids), name, n_classes)


def _resized(ds: ImageDataset) -> ImageDataset:
    if ds.images.shape[1:] == IMAGE_SHAPE:
        return ds
    imgs = np.stack([resize(im) for im in ds.images]).astype(np.float32)
    return ImageDataset(imgs, ds.labels, ds.source_ids, ds.name, ds.n_classes)


def _build(spec: DatasetSpec, root: Path) -> tuple[ImageDataset, ImageDataset]:
    raw = root / "raw" / spec.name
    sizes = (spec.train_size, spec.test_size)
    n = spec.n_classes
    if spec.name == "synthetic":
        return synthetic_dataset(spec.train_size, spec.test_size, seed=spec.seed)
    if spec.name in ("svhn", "cifar10", "cifar100"):
        readers = {
            "svhn": lambda s: _read_svhn(raw, s),
            "cifar10": lambda s: _read_cifar(raw, s, fine=False),
            "cifar100": lambda s: _read_cifar(raw, s, fine=True),
        }
        pools = [_to_dataset(*readers[spec.name](s), spec.name, n) for s in ("train", "test")]
        if spec.class_filter is not None:
            pools = [_filter_classes(p, spec.class_filter) for p in pools]
        train, _ = partition(pools[0], (sizes[0], 0), seed=spec.seed)
        test, _ = partition(pools[1], (sizes[1], 0), seed=spec.seed + 1)
        return train, test
    if spec.name == "stl10":
        pool = _to_dataset(*_read_stl10(raw), "stl10", n)
        if spec.class_filter is not None:
            pool = _filter_classes(pool, spec.class_filter)
        train, test = partition(pool, sizes, seed=spec.seed)
        return _resized(train), _resized(test)
    pool = _to_dataset(*_read_gtsrb(raw, spec.class_filter, n), "gtsrb", n)
    return partition(pool, sizes, seed=spec.seed)


def _filter_classes(ds: ImageDataset, classes: Sequence[int]) -> ImageDataset:
    classes = sorted(classes)
    remap = {c: i for i, c in enumerate(classes)}
    keep = np.flatnonzero(np.isin(ds.labels, classes))
    sub = ds.subset(keep)
    sub.labels = np.asarray([remap[int(v)] for v in sub.labels], np.int64)
    return sub


def write_cache(ds: ImageDataset, directory, key: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.ascontiguousarray(ds.images, dtype=np.float32)
    images.tofile(directory / "images.f32")
    record = int(np.prod(IMAGE_SHAPE)) * 4
    lines = [f"# splitdp-manifest {MANIFEST_VERSION}", f"# key {key}",
             f"# name {ds.name} n_classes {ds.n_classes}",
             "# shape 32 32 3 float32", "source_id\tlabel\tbyte_offset"]
    lines += [f"{sid}\t{int(lab)}\t{i * record}"
              for i, (sid, lab) in enumerate(zip(ds.source_ids, ds.labels))]
    (directory / "manifest.tsv").write_text("\n".join(lines) + "\n")
    return directory


def read_cache(directory, key: str | None = None) -> ImageDataset | None:
    """Load a cached split; ``None`` when absent or built for another spec."""
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    if not manifest.exists():
        return None
    header, rows = {}, []
    for line in manifest.read_text().splitlines():
        if line.startswith("# "):
            parts = line[2:].split()
            header[parts[0]] = parts[1:]
        elif line and not line.startswith("source_id\t"):
            rows.append(line.split("\t"))
    if int(header["splitdp-manifest"][0]) > MANIFEST_VERSION:
        raise IngestionError(f"{manifest}: unsupported manifest version")
    if key is not None and header.get("key", [None])[0] != key:
        return None
    fields = header["name"]  # [name] n_classes <k>; the name may be empty
    name, n_classes = (fields[0] if len(fields) == 3 else ""), int(fields[-1])
    data = np.fromfile(directory / "images.f32", dtype=np.float32)
    record = int(np.prod(IMAGE_SHAPE))
    offsets = np.asarray([int(r[2]) // 4 for r in rows], dtype=np.int64)
    if len(rows) and offsets.max() + record > data.size:
        raise IngestionError(f"{directory / 'images.f32'} is truncated")
    images = (np.stack([data[o:o + record] for o in offsets]).reshape(-1, *IMAGE_SHAPE)
              if len(rows) else np.zeros((0, *IMAGE_SHAPE), np.float32))
    return ImageDataset(images, [int(r[1]) for r in rows], [r[0] for r in rows],
                        name, n_classes)


def load_dataset(spec: DatasetSpec, root) -> tuple[ImageDataset, ImageDataset]:
    """Seeded train/test selection for ``spec``, served from the cache when possible."""
    root = Path(root)
    key = spec.key()
    cached = [read_cache(root / spec.name / s, key) for s in ("train", "test")]
    if all(c is not None for c in cached):
        return cached[0], cached[1]
    train, test = _build(spec, root)
    for split, ds in (("train", train), ("test", test)):
        write_cache(ds, root / spec.name / split, key)
    return train, test


def fetch_dataset(name: str, root) -> Path:
    """Download the raw files of ``name`` into ``<root>/raw/<name>``."""
    name = DatasetSpec(name).name
    if name not in RAW_FILES:
        raise ConfigurationError(f"no download source for {name!r}")
    raw = Path(root) / "raw" / name
    raw.mkdir(parents=True, exist_ok=True)
    for fname, url in RAW_FILES[name].items():
        dest = raw / fname
        if dest.exists():
            continue
        log.info("downloading %s", url)
        tmp = dest.with_suffix(dest.suffix + ".part")
        try:
            urllib.request.urlretrieve(url, tmp)
        except OSError as exc:
            raise IngestionError(f"download of {url} failed: {exc}") from exc
        tmp.rename(dest)
    return raw


# ---------------------------------------------------------------------------
# synthetic stand-in


def _render_digit(rng: np.random.Generator, label: int, font_cache: dict) -> np.ndarray:
    from PIL import Image, ImageDraw, ImageFont

    size = int(rng.integers(18, 29))
    if size not in font_cache:
        font_cache[size] = ImageFont.load_default(size=size)
    bg = rng.integers(0, 256, 3)
    fg = rng.integers(0, 256, 3)
    while np.abs(fg.astype(int) - bg.astype(int)).sum() < 200:
        fg = rng.integers(0, 256, 3)
    im = Image.new("RGB", (32, 32), tuple(int(v) for v in bg))
    draw = ImageDraw.Draw(im)
    cx, cy = 16 + rng.integers(-2, 3), 16 + rng.integers(-2, 3)
    # partial neighbouring digits as distractors
    for dx in (-17, 17):
        if rng.random() < 0.5:
            draw.text((cx + dx, cy), str(int(rng.integers(10))), font=font_cache[size],
                      fill=tuple(int(v) for v in fg), anchor="mm")
    draw.text((cx, cy), str(label), font=font_cache[size],
              fill=tuple(int(v) for v in fg), anchor="mm")
    arr = np.asarray(im, dtype=np.float32)
    arr = arr + rng.normal(0.0, 6.0, arr.shape).astype(np.float32)
    return np.clip(arr, 0, 255)


def synthetic_dataset(n_train: int, n_test: int, seed: int = 0
                      ) -> tuple[ImageDataset, ImageDataset]:
    """Procedurally rendered 10-class digit images for offline runs.

    Each image shows a centred digit (its label) in a random colour on a
    random background, with random size, jitter, partial neighbouring digits
    and pixel noise.
    """
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    labels = rng.integers(0, 10, n)
    fonts: dict = {}
    images = np.stack([_render_digit(rng, int(c), fonts) for c in labels]) if n else \
        np.zeros((0, *IMAGE_SHAPE), np.float32)
    ids = [f"synthetic/{seed}/{i}" for i in range(n)]
    pool = ImageDataset(images, labels, ids, "synthetic", 10)
    return pool.subset(np.arange(n_train)), pool.subset(np.arange(n_train, n))
