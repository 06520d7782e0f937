"""Toy generators, IDX/CSV ingestion and known/unknown splits."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TOY_KINDS = ("two_gauss", "four_gauss", "uni_gauss")
TOY_SIGMA = 0.2
ANNULUS = (1.5, 2.0)


class DataFormatError(ValueError):
    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    class_names: list[str] | None = None
    ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, labels=None, class_count=None) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.features[idx],
            self.labels[idx] if labels is None else labels,
            self.class_count if class_count is None else class_count,
            ids=self.ids[idx],
        )


def gen_toy(kind: str, n_per_class: int, seed: int, sigma: float = TOY_SIGMA) -> LabeledDataset:
    """2-D toy sets, scaled into [-1, 1] by a fixed per-kind factor.

    ``two_gauss``: means (-1, 0), (1, 0). ``four_gauss``: means (+-1, +-1),
    ordered (-1,-1), (1,1), (-1,1), (1,-1). ``uni_gauss``: a Gaussian at the
    origin and a uniform annulus around it.
    """
    kind = kind.replace("-", "_")
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy kind {kind!r}; choose from {TOY_KINDS}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    if kind == "uni_gauss":
        g = rng.normal(0.0, sigma, size=(n_per_class, 2))
        r = np.sqrt(rng.uniform(ANNULUS[0] ** 2, ANNULUS[1] ** 2, size=n_per_class))
        phi = rng.uniform(0.0, 2 * np.pi, size=n_per_class)
        ring = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
        X = np.vstack([g, ring])
        extent = ANNULUS[1]
    else:
        means = [(-1.0, 0.0), (1.0, 0.0)] if kind == "two_gauss" else [(-1, -1), (1, 1), (-1, 1), (1, -1)]
        X = np.vstack([rng.normal(m, sigma, size=(n_per_class, 2)) for m in means])
        extent = 1.0 + 5.0 * sigma
    y = np.repeat(np.arange(len(X) // n_per_class), n_per_class)
    # fixed scale keeps every dataset of one kind in the same coordinates
    X = np.clip(X / extent, -1.0, 1.0)
    return LabeledDataset(X, y, int(y.max()) + 1)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 8:
        raise DataFormatError(f"{what}: file too short for an IDX header", offset=len(raw))
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{what}: truncated header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise DataFormatError(f"{what}: payload truncated, need {need} bytes", offset=len(raw))
    return dims, raw[header:header + need]


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzipped); pixels map to [-1, 1]."""
    dims, img = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    (n_lab,), lab = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if dims[0] != n_lab:
        raise DataFormatError(f"image count {dims[0]} != label count {n_lab}", offset=4)
    pixels = np.frombuffer(img, dtype=np.uint8).reshape(dims[0], dims[1] * dims[2])
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    X = pixels.astype(np.float64) / 127.5 - 1.0
    k = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(X, labels, k)


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, compress=False) -> None:
    """Write uint8 images (N, rows, cols) and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()
    opener = (lambda p: gzip.GzipFile(p, "wb", mtime=0)) if compress else (lambda p: open(p, "wb"))
    for path, blob in ((images_path, img), (labels_path, lab)):
        with opener(path) as f:
            f.write(blob)


def write_csv(ds: LabeledDataset, path) -> None:
    """Header ``x0,...,x{D-1},label``; floats in shortest round-trip form."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(ds.dim)] + ["label"])
        for row, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def read_csv(path, require_labels: bool = True) -> LabeledDataset:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataFormatError(f"{path}: empty CSV")
    header = rows[0]
    feat_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    has_label = "label" in header
    if not feat_cols or (require_labels and not has_label):
        raise DataFormatError(f"{path}: header needs x0..xD-1 columns" + (" and label" if require_labels else ""))
    try:
        X = np.array([[float(r[i]) for i in feat_cols] for r in rows[1:]], dtype=np.float64)
        if has_label:
            li = header.index("label")
            y = np.array([int(r[li]) for r in rows[1:]], dtype=np.int64)
        else:
            y = np.zeros(len(rows) - 1, dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise DataFormatError(f"{path}: malformed row ({exc})") from None
    X = X.reshape(len(rows) - 1, len(feat_cols))
    k = int(y.max()) + 1 if y.size else 1
    return LabeledDataset(X, y, k)


@dataclass
class SplitSpec:
    known_classes: list[int]
    unknown_classes: list[int] = field(default_factory=list)
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.known_classes = sorted(int(c) for c in self.known_classes)
        self.unknown_classes = sorted(int(c) for c in self.unknown_classes)
        if not self.known_classes:
            raise ValueError("known class set is empty")
        if set(self.known_classes) & set(self.unknown_classes):
            raise ValueError("known and unknown class sets overlap")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return {"known_classes": self.known_classes, "unknown_classes": self.unknown_classes,
                "train_fraction": self.train_fraction, "seed": self.seed}


def split_known_unknown(ds: LabeledDataset, spec: SplitSpec):
    """Stratified train/test split of the known classes; unknowns go to test.

    Known labels are remapped to 0..k-1 in ascending original order. The
    unknown test set keeps its original labels.
    """
    present = set(np.unique(ds.labels).tolist())
    missing = (set(spec.known_classes) | set(spec.unknown_classes)) - present
    if missing:
        raise ValueError(f"classes {sorted(missing)} are not in the dataset")
    rng = np.random.default_rng([spec.seed, 0x5B17])
    remap = {c: i for i, c in enumerate(spec.known_classes)}
    train_idx, test_idx = [], []
    for c in spec.known_classes:
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(spec.train_fraction * idx.size))
        train_idx.append(np.sort(idx[:n_train]))
        test_idx.append(np.sort(idx[n_train:]))
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    k = len(spec.known_classes)
    relabel = lambda idx: np.array([remap[c] for c in ds.labels[idx]], dtype=np.int64)
    train = ds.subset(train_idx, relabel(train_idx), k)
    test = ds.subset(test_idx, relabel(test_idx), k)
    unk_idx = np.flatnonzero(np.isin(ds.labels, spec.unknown_classes))
    unknown = ds.subset(unk_idx)
    return train, test, unknown


def stratified_subsample(ds: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """Keep ``n`` samples, spreading them over classes as evenly as possible."""
    if n >= len(ds):
        return ds
    rng = np.random.default_rng([seed, 0x5AB5])
    classes = np.unique(ds.labels)
    base, extra = divmod(n, classes.size)
    keep = []
    for i, c in enumerate(classes):
        idx = np.flatnonzero(ds.labels == c)
        take = min(idx.size, base + (1 if i < extra else 0))
        keep.append(np.sort(rng.choice(idx, size=take, replace=False)))
    return ds.subset(np.concatenate(keep))
