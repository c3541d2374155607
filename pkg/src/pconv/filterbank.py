"""Splat, lattice convolution and slice over a fixed pair of feature sets."""

import struct
from dataclasses import dataclass

import numpy as np

from .lattice import ABSENT, LatticeMap, OffsetTable, elevate, locate_many, neighbor_offsets

KERNEL_MAGIC = b"PCNV"
KERNEL_VERSION = 1

# bounds the (nodes x offsets x channels) gather buffer in convolve
_CHUNK_NODES = 32768


def _as_features(f, d, name):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        f = f.reshape(-1, d) if d == 1 else f[None, :]
    if f.ndim != 2 or f.shape[1] != d:
        raise ValueError(f"{name} must have shape (N, {d}), got {f.shape}")
    if len(f) == 0:
        raise ValueError(f"{name} is empty")
    return f


def _as_signal(values, rows, name="values"):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2 or values.shape[0] != rows:
        raise ValueError(f"{name} must have {rows} rows, got shape {values.shape}")
    return values


@dataclass(frozen=True, eq=False)
class PermutohedralFrame:
    """Precomputed lattice structure binding input and output feature sets.

    Splat and slice entries are stored as dense (samples, d+1) arrays of node
    indices and barycentric weights. ``neighbors[j, n]`` is the node at offset
    ``n`` from node ``j`` or ABSENT.
    """

    d: int
    s: int
    keys: np.ndarray
    splat_index: np.ndarray
    splat_weight: np.ndarray
    slice_index: np.ndarray
    slice_weight: np.ndarray
    neighbors: np.ndarray
    offset_table: OffsetTable

    @property
    def node_count(self) -> int:
        return len(self.keys)

    @property
    def n_in(self) -> int:
        return len(self.splat_index)

    @property
    def n_out(self) -> int:
        return len(self.slice_index)

    @property
    def splat_entries(self):
        """(sample, node, weight) triplets as three flat arrays."""
        i = np.repeat(np.arange(self.n_in), self.d + 1)
        return i, self.splat_index.ravel(), self.splat_weight.ravel()

    @property
    def slice_entries(self):
        k = np.repeat(np.arange(self.n_out), self.d + 1)
        return k, self.slice_index.ravel(), self.slice_weight.ravel()


def build_frame(features_in, features_out, d: int, s: int) -> PermutohedralFrame:
    """Build the lattice for ``features_in`` and ``features_out``.

    The node set is every simplex vertex touched by an input or output sample,
    numbered in order of first appearance (inputs first).
    """
    table = neighbor_offsets(d, s)
    f_in = _as_features(features_in, d, "features_in")
    f_out = _as_features(features_out, d, "features_out")
    n_in = len(f_in)
    d1 = d + 1

    keys, bary, _ = locate_many(elevate(np.concatenate([f_in, f_out])))
    lmap = LatticeMap(d)
    nodes = lmap.insert_many(keys.reshape(-1, d1)).reshape(-1, d1)
    node_keys = lmap.keys()

    neighbors = lmap.neighbor_table(table.key_offsets, _CHUNK_NODES)

    return PermutohedralFrame(
        d=d,
        s=s,
        keys=node_keys,
        splat_index=nodes[:n_in],
        splat_weight=bary[:n_in],
        slice_index=nodes[n_in:],
        slice_weight=bary[n_in:],
        neighbors=neighbors,
        offset_table=table,
    )


@dataclass
class Kernel:
    """Filter weights of shape (c_out, c_in, offsets) in canonical offset order."""

    d: int
    s: int
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        expected = (self.s + 1) ** (self.d + 1) - self.s ** (self.d + 1)
        if self.weights.ndim != 3 or self.weights.shape[2] != expected:
            raise ValueError(
                f"kernel for d={self.d}, s={self.s} needs shape (c_out, c_in, {expected}), "
                f"got {self.weights.shape}"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("kernel weights must be finite")

    @property
    def c_out(self):
        return self.weights.shape[0]

    @property
    def c_in(self):
        return self.weights.shape[1]

    def copy(self):
        return Kernel(self.d, self.s, self.weights.copy())

    @classmethod
    def delta(cls, d, s, channels=1):
        table = neighbor_offsets(d, s)
        w = np.zeros((channels, channels, len(table)))
        w[np.arange(channels), np.arange(channels), table.zero_index] = 1.0
        return cls(d, s, w)

    def transposed(self, table: OffsetTable) -> "Kernel":
        """Kernel of the adjoint convolution: channels swapped, offsets negated."""
        return Kernel(self.d, self.s, self.weights.transpose(1, 0, 2)[:, :, table.negation_map])


def gaussian_kernel(d: int, s: int, sigma: float) -> Kernel:
    """Normalised Gaussian over the neighbourhood, sigma in units of one lattice step."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    table = neighbor_offsets(d, s)
    sq = (table.offsets.astype(np.float64) ** 2).sum(axis=1)
    w = np.exp(-sq / (2.0 * sigma**2 * (d * d + d)))
    return Kernel(d, s, (w / w.sum())[None, None, :])


def splat(frame: PermutohedralFrame, values) -> np.ndarray:
    values = _as_signal(values, frame.n_in)
    m = frame.node_count
    idx = frame.splat_index.ravel()
    out = np.empty((m, values.shape[1]))
    for c in range(values.shape[1]):
        contrib = (frame.splat_weight * values[:, c : c + 1]).ravel()
        out[:, c] = np.bincount(idx, weights=contrib, minlength=m)
    return out


def _gather_conv(neighbors, lattice_values, weights):
    m = len(neighbors)
    padded = np.concatenate([lattice_values, np.zeros((1, lattice_values.shape[1]))])
    # ABSENT == -1 picks the trailing zero row
    out = np.empty((m, weights.shape[0]))
    for lo in range(0, m, _CHUNK_NODES):
        g = padded[neighbors[lo : lo + _CHUNK_NODES]]
        out[lo : lo + len(g)] = np.einsum("mnc,ocn->mo", g, weights, optimize=True)
    return out


def convolve(frame: PermutohedralFrame, lattice_values, kernel: Kernel) -> np.ndarray:
    lattice_values = _as_signal(lattice_values, frame.node_count, "lattice_values")
    if kernel.weights.shape[2] != len(frame.offset_table):
        raise ValueError("kernel offset count does not match the frame")
    if kernel.c_in != lattice_values.shape[1]:
        raise ValueError(
            f"kernel expects {kernel.c_in} input channels, got {lattice_values.shape[1]}"
        )
    return _gather_conv(frame.neighbors, lattice_values, kernel.weights)


def slice(frame: PermutohedralFrame, lattice_values) -> np.ndarray:  # noqa: A001
    lattice_values = _as_signal(lattice_values, frame.node_count, "lattice_values")
    return np.einsum("kv,kvc->kc", frame.slice_weight, lattice_values[frame.slice_index])


def splat_adjoint(frame: PermutohedralFrame, lattice_values) -> np.ndarray:
    """Transpose of splat: gather node values back to the input samples."""
    lattice_values = _as_signal(lattice_values, frame.node_count, "lattice_values")
    return np.einsum("iv,ivc->ic", frame.splat_weight, lattice_values[frame.splat_index])


def slice_adjoint(frame: PermutohedralFrame, values) -> np.ndarray:
    """Transpose of slice: scatter output-sample values onto the nodes."""
    values = _as_signal(values, frame.n_out)
    m = frame.node_count
    idx = frame.slice_index.ravel()
    out = np.empty((m, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(
            idx, weights=(frame.slice_weight * values[:, c : c + 1]).ravel(), minlength=m
        )
    return out


def filter_signal(frame, values, kernel):
    """Full splat -> convolve -> slice pipeline."""
    return slice(frame, convolve(frame, splat(frame, values), kernel))


def normalized_filter(frame, values, kernel, fill=None, floor=1e-12):
    """Pipeline output divided by the pipeline applied to ones.

    Output samples whose normalisation weight is below ``floor`` (no input
    within reach of the kernel) get ``fill``; by default the input mean.
    """
    values = _as_signal(values, frame.n_in)
    num = filter_signal(frame, values, kernel)
    den = filter_signal(frame, np.ones_like(values), kernel)
    if fill is None:
        fill = values.mean(axis=0)
    empty = np.abs(den) < floor
    out = num / np.where(empty, 1.0, den)
    return np.where(empty, fill, out)


def dense_oracle(frame: PermutohedralFrame, kernel: Kernel) -> np.ndarray:
    """Materialise slice @ conv @ splat as one dense matrix. Test use only.

    Signals are flattened sample-major, so the result has shape
    (n_out * c_out, n_in * c_in) and acts on ``values.reshape(-1)``.
    The convolution block is assembled from key arithmetic rather than the
    frame's neighbour table.
    """
    d1 = frame.d + 1
    m = frame.node_count
    co, ci = kernel.c_out, kernel.c_in

    s_in = np.zeros((m, frame.n_in))
    for i in range(frame.n_in):
        for v in range(d1):
            s_in[frame.splat_index[i, v], i] += frame.splat_weight[i, v]
    s_out = np.zeros((frame.n_out, m))
    for k in range(frame.n_out):
        for v in range(d1):
            s_out[k, frame.slice_index[k, v]] += frame.slice_weight[k, v]

    where = {tuple(key.tolist()): j for j, key in enumerate(frame.keys)}
    conv = np.zeros((m, co, m, ci))
    for j, key in enumerate(frame.keys):
        for n, step in enumerate(frame.offset_table.key_offsets):
            src = where.get(tuple((key + step).tolist()))
            if src is not None:
                conv[j, :, src, :] += kernel.weights[:, :, n]

    left = np.kron(s_out, np.eye(co))
    right = np.kron(s_in, np.eye(ci))
    return left @ conv.reshape(m * co, m * ci) @ right


def save_kernel(path, kernel: Kernel):
    w = np.ascontiguousarray(kernel.weights, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(KERNEL_MAGIC)
        fh.write(struct.pack("<5I", KERNEL_VERSION, kernel.d, kernel.s, kernel.c_out, kernel.c_in))
        fh.write(w.tobytes())


def load_kernel(path) -> Kernel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24 or data[:4] != KERNEL_MAGIC:
        raise ValueError(f"{path}: not a kernel file")
    version, d, s, c_out, c_in = struct.unpack("<5I", data[4:24])
    if version != KERNEL_VERSION:
        raise ValueError(f"{path}: unsupported kernel version {version}")
    n = (s + 1) ** (d + 1) - s ** (d + 1)
    count = c_out * c_in * n
    body = data[24:]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {count} weights, found {len(body) // 8}")
    w = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(c_out, c_in, n)
    return Kernel(d, s, w)


__all__ = [
    "ABSENT",
    "Kernel",
    "PermutohedralFrame",
    "build_frame",
    "convolve",
    "dense_oracle",
    "filter_signal",
    "normalized_filter",
    "gaussian_kernel",
    "load_kernel",
    "save_kernel",
    "slice",
    "slice_adjoint",
    "splat",
    "splat_adjoint",
]
