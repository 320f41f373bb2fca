"""Datasets: IDX/CSV ingestion, synthetic generators, augmentation and the
effective dataset size."""
import csv
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.kind + str(v.itemsize): k for k, v in IDX_TYPES.items()}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")

    @property
    def n_orig(self):
        return len(self.y)

    def __len__(self):
        return len(self.y)

    def subset(self, idx, name=None):
        return Dataset(self.x[idx], self.y[idx], self.n_classes, name or self.name)

    def split(self, n_val, rng):
        """Random train/validation split with ``n_val`` validation examples."""
        perm = rng.permutation(len(self))
        return self.subset(perm[n_val:], f"{self.name}:train"), self.subset(perm[:n_val], f"{self.name}:val")


# -- IDX ----------------------------------------------------------------------

def read_idx(path):
    """Read an IDX file into an array of its stored dtype."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated header at byte {len(data)}")
    if data[0] != 0 or data[1] != 0 or data[2] not in IDX_TYPES:
        raise ValueError(f"{path}: bad IDX magic at byte 0: {data[:4].hex()}")
    dtype = IDX_TYPES[data[2]]
    ndim = data[3]
    hdr = 4 + 4 * ndim
    if len(data) < hdr:
        raise ValueError(f"{path}: truncated dimension list at byte {len(data)}, expected {hdr}")
    dims = struct.unpack(f">{ndim}I", data[4:hdr])
    need = hdr + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) < need:
        raise ValueError(f"{path}: truncated payload at byte {len(data)}, expected {need}")
    if len(data) > need:
        raise ValueError(f"{path}: {len(data) - need} trailing bytes after byte {need}")
    return np.frombuffer(data, dtype=dtype, offset=hdr).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array):
    array = np.asarray(array)
    key = array.dtype.kind + str(array.dtype.itemsize)
    if key not in IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    code = IDX_CODES[key]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path, n_classes=10, channel_axis=True):
    """MNIST-format image/label pair -> :class:`Dataset` with pixels in ``[0, 1]``."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    if channel_axis and x.ndim == 3:
        x = x[:, None]
    return Dataset(x, labels.astype(np.int64), n_classes, str(images_path))


def load_csv(path, label_column="label", n_classes=None):
    """CSV with a header row; every column except ``label_column`` is a feature."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if label_column not in (reader.fieldnames or []):
            raise ValueError(f"{path}: no label column {label_column!r}")
        feats = [c for c in reader.fieldnames if c != label_column]
        rows = list(reader)
    x = np.array([[float(r[c]) for c in feats] for r in rows], dtype=np.float64).reshape(len(rows), len(feats))
    y = np.array([int(r[label_column]) for r in rows], dtype=np.int64)
    k = n_classes if n_classes is not None else int(y.max()) + 1
    return Dataset(x, y, k, str(path))


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_manifest(manifest_path):
    """Check every ``{"file": sha256}`` entry of a JSON manifest (paths relative to it)."""
    import os

    base = os.path.dirname(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    bad = [f for f, digest in manifest.items() if file_sha256(os.path.join(base, f)) != digest]
    if bad:
        raise ValueError(f"checksum mismatch: {bad}")
    return True


# -- synthetic ----------------------------------------------------------------

def two_moons(n, noise, rng):
    n0 = n - n // 2
    n1 = n // 2
    t0 = np.pi * rng.uniform(n0)
    t1 = np.pi * rng.uniform(n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower])
    y = np.r_[np.zeros(n0, np.int64), np.ones(n1, np.int64)]
    x = x + noise * rng.normal(x.shape)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def blob_centers(n_classes, radius=4.0):
    ang = 2 * np.pi * np.arange(n_classes) / n_classes
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gaussian_blobs(n, noise, rng, centers):
    centers = np.asarray(centers, dtype=float)
    k = len(centers)
    y = np.arange(n) % k
    y = y[rng.permutation(n)]
    x = centers[y] + noise * rng.normal((n, centers.shape[1]))
    return x, y


def make_synthetic(kind, n, noise, seed, n_classes=3, centers=None, shift=None):
    """Deterministic toy datasets: ``"two-moons"`` or ``"gaussian-blobs"``.

    Classes are balanced to within one example. For blobs, ``centers``
    overrides the default ring of radius 4 and ``shift`` translates every
    center (useful as an out-of-distribution set).
    """
    from .tensor import RngStream

    if n < 2:
        raise ValueError("need at least 2 examples")
    rng = RngStream(seed, 0x5EED)
    if kind == "two-moons":
        x, y = two_moons(n, noise, rng)
        return Dataset(x, y, 2, f"two-moons(n={n},noise={noise},seed={seed})")
    if kind == "gaussian-blobs":
        c = blob_centers(n_classes) if centers is None else np.asarray(centers, float)
        if shift is not None:
            c = c + np.asarray(shift, float)
        x, y = gaussian_blobs(n, noise, rng, c)
        return Dataset(x, y, len(c), f"gaussian-blobs(n={n},noise={noise},seed={seed})")
    raise ValueError(f"unknown synthetic dataset {kind!r}")


def load_digits(flat=True):
    """The 8x8 handwritten digits bundled with scikit-learn, scaled to ``[0, 1]``."""
    from sklearn.datasets import load_digits as _load

    d = _load()
    x = d.data / 16.0
    if not flat:
        x = x.reshape(-1, 1, 8, 8)
    return Dataset(x, d.target, 10, "digits8x8")


# -- augmentation -------------------------------------------------------------

@dataclass
class AugmentationSpec:
    pad: int = 0
    crop: int | None = None
    hflip: bool = True
    hflip_prob: float = 0.5

    def crop_positions(self, size):
        """Distinct crops counted by the corners-plus-centre heuristic."""
        crop = size if self.crop is None else self.crop
        return 5 if crop < size + 2 * self.pad else 1

    def rho(self, size):
        return self.crop_positions(size) * (2 if self.hflip else 1)


def effective_n(n_orig, rho):
    """Effective dataset size ``rho * N``."""
    if isinstance(rho, AugmentationSpec):
        raise TypeError("pass a numeric rho; use AugmentationSpec.rho(size) for the heuristic")
    if rho < 1:
        raise ValueError("rho must be >= 1")
    return rho * n_orig


def augment(x, spec, rng, flip=None, return_offsets=False):
    """Random crop from the zero-padded image plus random horizontal flip.

    ``x`` is ``[M, C, H, W]``. ``flip`` forces flipping on (True) or off
    (False) for every image instead of the random coin.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"augment expects [M, C, H, W] images, got {x.shape}")
    m, _, h, w = x.shape
    crop = h if spec.crop is None else spec.crop
    ph, pw = h + 2 * spec.pad, w + 2 * spec.pad
    if crop > ph or crop > pw:
        raise ValueError(f"crop {crop} larger than padded size {ph}x{pw}")
    if spec.pad:
        x = np.pad(x, ((0, 0), (0, 0), (spec.pad, spec.pad), (spec.pad, spec.pad)))
    oy = rng.integers(0, ph - crop + 1, size=m)
    ox = rng.integers(0, pw - crop + 1, size=m)
    if flip is None:
        do_flip = rng.uniform(m) < (spec.hflip_prob if spec.hflip else 0.0)
    else:
        do_flip = np.full(m, bool(flip))
    out = np.empty((m, x.shape[1], crop, crop))
    for i in range(m):
        img = x[i, :, oy[i]:oy[i] + crop, ox[i]:ox[i] + crop]
        out[i] = img[:, :, ::-1] if do_flip[i] else img
    if return_offsets:
        return out, np.stack([oy, ox], axis=1)
    return out


def minibatches(n, batch_size, rng, drop_last=False):
    """Index batches for one epoch: shuffled, without replacement."""
    perm = rng.permutation(n)
    stop = n - (n % batch_size) if drop_last else n
    for lo in range(0, stop, batch_size):
        yield perm[lo:lo + batch_size]
