"""Array primitives: seeded RNG streams, Gaussian sampling, unfold/fold and
tensor serialization.

Tensors are plain C-ordered (row-major) ``numpy.float64`` arrays. The binary
form is little-endian: ``u32 rank``, ``rank`` x ``u32 dim``, then the ``f64``
payload in row-major order.
"""
import io
import json
import struct

import numpy as np

DTYPE = np.float64

_U32 = struct.Struct("<I")


class RngStream:
    """Deterministic random stream keyed by ``(seed, stream)``.

    Backed by the Philox-4x64 counter-based generator with the two 64-bit
    words of its key set to ``seed`` and ``stream``. Identical keys replay the
    same sequence; distinct stream ids give independent sequences. A stream is
    single-owner: never share one between threads.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self.gen = np.random.Generator(bitgen)

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self.gen.random(shape)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def child(self, *ids: int) -> "RngStream":
        """Derive an independent stream from this one's key and ``ids``."""
        return RngStream(self.seed, derive_stream_id(self.stream, *ids))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def derive_stream_id(*ids: int) -> int:
    """Hash a tuple of non-negative integers into a 64-bit stream id."""
    words = [int(i) & 0xFFFFFFFFFFFFFFFF for i in ids]
    # SeedSequence mixes entropy with a fixed, documented hash
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)
    return int(state[0])


def gaussian_sample(mean, stddev, rng: RngStream) -> np.ndarray:
    """Return ``mean + eps * stddev`` with ``eps ~ N(0, I)`` drawn from ``rng``."""
    mean = np.asarray(mean, dtype=DTYPE)
    stddev = np.asarray(stddev, dtype=DTYPE)
    if mean.shape != stddev.shape:
        raise ValueError(f"shape mismatch: mean {mean.shape} vs stddev {stddev.shape}")
    if np.any(stddev < 0):
        raise ValueError("stddev must be elementwise non-negative")
    eps = rng.normal(mean.shape)
    return mean + eps * stddev


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_args(h, w, kernel, stride, padding):
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError(f"invalid kernel={kernel}, stride={stride}, padding={padding}")
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ValueError(
            f"kernel {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )


def unfold_batch(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """im2col for a batch ``[M, C, H, W]`` -> ``[M, C*k*k, H_out*W_out]``.

    Row ``c*k*k + i*k + j`` of the result holds input channel ``c`` at kernel
    offset ``(i, j)``; column ``oh*W_out + ow`` is output position ``(oh, ow)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    m, c, h, w = x.shape
    _check_conv_args(h, w, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # M, C, Ho, Wo, k, k
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(m, c * kernel * kernel, ho * wo)
    return np.ascontiguousarray(cols)


def unfold(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """im2col for one input ``[C, H, W]`` -> ``[C*k*k, H_out*W_out]``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3:
        raise ValueError(f"expected [C, H, W] input, got shape {x.shape}")
    return unfold_batch(x[None], kernel, stride, padding)[0]


def fold_batch(cols: np.ndarray, input_shape, kernel: int, stride: int = 1, padding: int = 0):
    """Adjoint of :func:`unfold_batch`: scatter-add columns back to ``[M, C, H, W]``."""
    m = cols.shape[0]
    c, h, w = input_shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    cols = cols.reshape(m, c, kernel, kernel, ho, wo)
    out = np.zeros((m, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def check_finite(x: np.ndarray, name: str = "tensor"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {name}")
    return x


# -- serialization ----------------------------------------------------------

def write_tensor(fh, x: np.ndarray) -> None:
    x = np.asarray(x, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
    fh.write(_U32.pack(x.ndim))
    for d in x.shape:
        fh.write(_U32.pack(d))
    fh.write(x.tobytes(order="C"))


def read_tensor(fh) -> np.ndarray:
    head = fh.read(4)
    if len(head) != 4:
        raise ValueError("truncated tensor header")
    (rank,) = _U32.unpack(head)
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise ValueError("truncated tensor dims")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError(f"truncated tensor payload: expected {8 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape)


def tensor_to_bytes(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    x = read_tensor(buf)
    if buf.read(1):
        raise ValueError("trailing bytes after tensor")
    return x


def tensor_to_json(x: np.ndarray) -> str:
    x = np.asarray(x, dtype=DTYPE)
    return json.dumps({"shape": list(x.shape), "values": x.ravel().tolist()})


def tensor_from_json(text: str) -> np.ndarray:
    obj = json.loads(text)
    shape = tuple(obj["shape"])
    values = np.asarray(obj["values"], dtype=DTYPE)
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{values.size} values do not fill shape {shape}")
    return values.reshape(shape)
