"""Rotated-digit benchmark construction.

Reads the digit corpus from IDX files, draws a class-balanced subset,
rotates it into one domain per angle and serves leave-one-domain-out
episodes with domain-balanced mini-batches.
"""
from __future__ import annotations

import gzip
import logging
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import (
    BadMagicError,
    ConfigError,
    CountMismatchError,
    DataError,
    IngestionError,
    TruncatedFileError,
    ValidationError,
)

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
STANDARD_ANGLES = (0, 15, 30, 45, 60, 75)
N_CLASSES = 10

# decompressed sizes of the four standard corpus files
STANDARD_FILES = {
    "train-images-idx3-ubyte": 47040016,
    "train-labels-idx1-ubyte": 60008,
    "t10k-images-idx3-ubyte": 7840016,
    "t10k-labels-idx1-ubyte": 10008,
}


@dataclass
class RawDigitSet:
    images: np.ndarray  # (M, 1, 28, 28) in [0, 1]
    labels: np.ndarray  # (M,) ints 0..9

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValidationError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class RotatedDomainSet:
    domain_label: int  # 1..N for sources; 0 for an episode's target
    angle: float
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class Episode:
    sources: list
    target: RotatedDomainSet

    @property
    def source_angles(self):
        return [d.angle for d in self.sources]


# ------------------------------------------------------------------ IDX files

def _read_bytes(path):
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_idx(data, expected_magic, path):
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: header truncated ({len(data)} bytes)")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic {magic}, expected {expected_magic}")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFileError(f"{path}: header truncated ({len(data)} bytes)")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} payload bytes, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(image_path, label_path):
    """Read an image/label IDX pair (optionally gzipped) into a :class:`RawDigitSet`."""
    try:
        images = _parse_idx(_read_bytes(image_path), IMAGE_MAGIC, image_path)
        labels = _parse_idx(_read_bytes(label_path), LABEL_MAGIC, label_path)
    except FileNotFoundError as exc:
        raise IngestionError(f"missing corpus file: {exc.filename}") from exc
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{image_path} has {images.shape[0]} images but {label_path} has {labels.shape[0]} labels")
    imgs = images.astype(np.float64)[:, None, :, :] / 255.0
    return RawDigitSet(imgs, labels.astype(np.int64))


def write_idx(images, labels, image_path, label_path):
    """Write uint8 images ``(M, H, W)`` and labels ``(M,)`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(image_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def fetch_corpus(mirror_url, dest_dir, files=None, timeout=60):
    """Download the corpus files (``<name>.gz``) from ``mirror_url``.

    Each file is decompressed and its byte length checked against
    ``files`` (defaults to :data:`STANDARD_FILES`).  Existing files of the
    right size are kept.  Returns the list of written paths.
    """
    files = STANDARD_FILES if files is None else files
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    out = []
    for name, size in files.items():
        target = dest / name
        if target.exists() and target.stat().st_size == size:
            out.append(target)
            continue
        url = mirror_url.rstrip("/") + "/" + name + ".gz"
        logger.info("fetching %s", url)
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                raw = resp.read()
        except OSError as exc:
            raise IngestionError(f"{url}: {exc}") from exc
        data = gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw
        if len(data) != size:
            raise TruncatedFileError(f"{url}: decompressed to {len(data)} bytes, expected {size}")
        target.write_bytes(data)
        out.append(target)
    return out


def bundled_digits():
    """The 5000-digit (500 per class) corpus sample shipped with mlxtend."""
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    images = (X.reshape(-1, 1, 28, 28) / 255.0).astype(np.float64)
    return RawDigitSet(images, y.astype(np.int64))


def export_bundled_idx(dest_dir, prefix="train"):
    """Write :func:`bundled_digits` as ``<prefix>-images-idx3-ubyte`` / ``-labels-idx1-ubyte``."""
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    ip, lp = dest / f"{prefix}-images-idx3-ubyte", dest / f"{prefix}-labels-idx1-ubyte"
    write_idx(X.reshape(-1, 28, 28).round().astype(np.uint8), y, ip, lp)
    return ip, lp


# ------------------------------------------------------------------ sampling

def sample_per_class(dataset, n_per_class, seed, n_classes=N_CLASSES):
    """Draw exactly ``n_per_class`` examples of each class, shuffled, seeded."""
    if n_per_class < 0:
        raise ValidationError("n_per_class must be >= 0")
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < n_per_class:
            raise DataError(f"class {c} has {idx.size} examples, need {n_per_class}")
        picked.append(rng.choice(idx, size=n_per_class, replace=False))
    order = rng.permutation(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)
    order = order.astype(np.int64)
    return RawDigitSet(dataset.images[order], dataset.labels[order])


# ------------------------------------------------------------------ rotation

def _exact_trig(angle_deg):
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    # multiples of 90 degrees map pixel centers onto pixel centers exactly
    c = np.round(c) if abs(c - np.round(c)) < 1e-12 else c
    s = np.round(s) if abs(s - np.round(s)) < 1e-12 else s
    return c, s


def rotate_batch(images, angle_deg):
    """Counterclockwise rotation of ``(M, C, H, W)`` images about their center.

    Inverse mapping with bilinear interpolation; samples falling outside
    the source grid read as 0.  Each image is resampled independently.
    """
    images = np.asarray(images)
    if angle_deg == 0:
        return images.copy()
    H, W = images.shape[-2:]
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    c, s = _exact_trig(angle_deg)
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    # y axis points up: v = cy - row
    u, v = cols - cx, cy - rows
    su = c * u + s * v
    sv = -s * u + c * v
    src_c, src_r = cx + su, cy - sv

    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr, fc = src_r - r0, src_c - c0
    out = np.zeros_like(images, dtype=np.float64)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        vals = images[..., np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)]
        out += np.where(ok, wgt, 0.0) * vals
    # weights sum to 1 only up to rounding
    return np.clip(out, 0.0, 1.0, out=out)


def rotate(image, angle_deg):
    """Rotate a single ``(C, H, W)`` image; see :func:`rotate_batch`."""
    return rotate_batch(np.asarray(image)[None], angle_deg)[0]


def build_domains(base, angles=STANDARD_ANGLES):
    """One domain per angle from the same base images; labels ``1..len(angles)``."""
    angles = list(angles)
    if len(set(angles)) != len(angles):
        raise ValidationError(f"duplicate angles in {angles}")
    return [
        RotatedDomainSet(k + 1, a, rotate_batch(base.images, a), base.labels.copy())
        for k, a in enumerate(angles)
    ]


def make_episode(domains, target_angle):
    """Hold out ``target_angle``; the rest become sources labelled 1..N by ascending angle."""
    by_angle = {d.angle: d for d in domains}
    if target_angle not in by_angle:
        raise ValidationError(f"target angle {target_angle} not among {sorted(by_angle)}")
    rest = sorted((a for a in by_angle if a != target_angle))
    sources = [
        RotatedDomainSet(j + 1, a, by_angle[a].images, by_angle[a].labels)
        for j, a in enumerate(rest)
    ]
    t = by_angle[target_angle]
    return Episode(sources, RotatedDomainSet(0, t.angle, t.images, t.labels))


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray  # 1-based source labels
    indices: np.ndarray  # position within each sample's own domain


class BalancedBatchSampler:
    """Domain-balanced batches drawn from per-domain reshuffled cycles.

    Domain ``j`` walks an endless sequence made of independent seeded
    permutations of its samples.  ``batch(t)`` is a pure function of
    ``(seed, t)``, so iteration can resume anywhere.
    """

    def __init__(self, episode, batch_size, seed):
        n = len(episode.sources)
        if n < 1:
            raise ConfigError("sources", "episode has no source domains")
        if batch_size < 1 or batch_size % n:
            raise ConfigError("batch_size", f"{batch_size} is not a positive multiple of {n} source domains")
        self.episode = episode
        self.batch_size = batch_size
        self.per_domain = batch_size // n
        self.seed = seed
        self._perms = {}

    def _perm(self, j, cycle):
        key = (j, cycle)
        if key not in self._perms:
            if len(self._perms) > 64:
                self._perms.clear()
            n = len(self.episode.sources[j])
            self._perms[key] = np.random.default_rng([self.seed, j, cycle]).permutation(n)
        return self._perms[key]

    def domain_indices(self, j, t):
        n = len(self.episode.sources[j])
        if n == 0:
            raise DataError(f"source domain {j + 1} is empty")
        pos = np.arange(t * self.per_domain, (t + 1) * self.per_domain)
        cycles, offs = pos // n, pos % n
        return np.array([self._perm(j, int(c))[o] for c, o in zip(cycles, offs)], dtype=np.int64)

    def batch(self, t):
        imgs, labels, doms, idx = [], [], [], []
        for j, dom in enumerate(self.episode.sources):
            sel = self.domain_indices(j, t)
            imgs.append(dom.images[sel])
            labels.append(dom.labels[sel])
            doms.append(np.full(sel.size, dom.domain_label, dtype=np.int64))
            idx.append(sel)
        return Batch(np.concatenate(imgs), np.concatenate(labels), np.concatenate(doms), np.concatenate(idx))

    def __iter__(self):
        t = 0
        while True:
            yield self.batch(t)
            t += 1


def batch_sampler(episode, batch_size, seed, start=0):
    """Infinite iterator of balanced batches starting at iteration ``start``."""
    sampler = BalancedBatchSampler(episode, batch_size, seed)
    t = start
    while True:
        yield sampler.batch(t)
        t += 1
