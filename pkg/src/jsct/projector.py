"""Parallel-beam geometry, exact ray/pixel intersection lengths and projections.

The image grid is centred on the origin.  Columns run along +x, rows run
along -y (row 0 is the top of the image) and voxel ``j = row * n_cols + col``.
For a view at angle ``theta`` every ray travels along ``(cos theta, sin theta)``
and is offset from the origin by ``u`` along ``(-sin theta, cos theta)``,
where ``u`` is the detector bin centre.  Rays are stored view-major:
ray ``i = view * n_dets + det``.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

__all__ = [
    "Geometry",
    "SystemMatrix",
    "SubsetPartition",
    "build_system_matrix",
    "forward_project",
    "back_project",
    "compute_Z",
    "partition_rays",
    "save_system_matrix",
    "load_system_matrix",
]

MAGIC = b"JSCT-H1"
_ENTRY = np.dtype([("j", "<u4"), ("h", "<f8")])


@dataclass(frozen=True)
class Geometry:
    """2D parallel-beam scan of an ``n_rows x n_cols`` pixel grid.

    ``view_angles`` defaults to ``n_views`` angles spaced uniformly over
    ``[0, pi)``; passing explicit angles overrides that.
    """

    n_rows: int
    n_cols: int
    pixel_size: float = 1.0
    n_views: int = 1
    n_dets: int = 1
    det_spacing: float = 1.0
    view_angles: tuple = field(default=None)

    def __post_init__(self):
        for name in ("n_rows", "n_cols", "n_views", "n_dets"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (self.pixel_size > 0 and self.det_spacing > 0):
            raise ValueError("pixel_size and det_spacing must be positive")
        if self.view_angles is None:
            angles = tuple(v * math.pi / self.n_views for v in range(self.n_views))
        else:
            angles = tuple(float(a) for a in self.view_angles)
            if len(angles) != self.n_views:
                raise ValueError(
                    f"got {len(angles)} view angles for n_views={self.n_views}"
                )
        object.__setattr__(self, "view_angles", angles)

    @property
    def n_rays(self) -> int:
        return self.n_views * self.n_dets

    @property
    def n_voxels(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def detector_offsets(self) -> np.ndarray:
        return (np.arange(self.n_dets) - (self.n_dets - 1) / 2.0) * self.det_spacing

    def ray(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(point, unit_direction)`` of ray ``i``."""
        view, det = divmod(i, self.n_dets)
        theta = self.view_angles[view]
        e = np.array([math.cos(theta), math.sin(theta)])
        a = np.array([-math.sin(theta), math.cos(theta)])
        return self.detector_offsets[det] * a, e


class SystemMatrix:
    """Row-compressed nonnegative matrix of intersection lengths (mm).

    Backed by a CSR array whose buffers are made read-only, so instances can
    be shared freely.  The transpose is cached for back projection.
    """

    def __init__(self, csr):
        csr = sparse.csr_array(csr, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        if csr.nnz and csr.data.min() < 0:
            raise ValueError("system matrix entries must be nonnegative")
        for arr in (csr.data, csr.indices, csr.indptr):
            arr.flags.writeable = False
        self._csr = csr
        self._csr_t = None
        self._row_sums = None

    @classmethod
    def from_rows(cls, rows, n: int) -> "SystemMatrix":
        """Build from an iterable of ``(indices, lengths)`` pairs, one per ray."""
        indptr = [0]
        indices, data = [], []
        for idx, h in rows:
            idx = np.asarray(idx, dtype=np.int64)
            h = np.asarray(h, dtype=np.float64)
            if idx.shape != h.shape:
                raise ValueError("indices and lengths differ in shape")
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError("column index out of range")
            if np.unique(idx).size != idx.size:
                raise ValueError("duplicate column index within a row")
            indices.append(idx)
            data.append(h)
            indptr.append(indptr[-1] + idx.size)
        m = len(indptr) - 1
        indices = np.concatenate(indices) if indices else np.zeros(0, np.int64)
        data = np.concatenate(data) if data else np.zeros(0)
        return cls(sparse.csr_array((data, indices, np.asarray(indptr)), shape=(m, n)))

    @classmethod
    def from_dense(cls, a) -> "SystemMatrix":
        return cls(sparse.csr_array(np.asarray(a, dtype=np.float64)))

    @property
    def csr(self):
        return self._csr

    @property
    def csr_t(self):
        if self._csr_t is None:
            t = self._csr.T.tocsr()
            t.sort_indices()
            self._csr_t = t
        return self._csr_t

    @property
    def m(self) -> int:
        return self._csr.shape[0]

    @property
    def n(self) -> int:
        return self._csr.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._csr.shape

    @property
    def nnz(self) -> int:
        return self._csr.nnz

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self._csr.indptr[i], self._csr.indptr[i + 1]
        return self._csr.indices[lo:hi], self._csr.data[lo:hi]

    @property
    def rows(self):
        return (self.row(i) for i in range(self.m))

    @property
    def row_sums(self) -> np.ndarray:
        if self._row_sums is None:
            out = np.asarray(self._csr.sum(axis=1), dtype=np.float64).ravel()
            out.flags.writeable = False
            self._row_sums = out
        return self._row_sums

    def take_rows(self, rays) -> "SystemMatrix":
        return SystemMatrix(self._csr[np.asarray(rays, dtype=np.int64)])

    def toarray(self) -> np.ndarray:
        return self._csr.toarray()

    def __repr__(self):
        return f"SystemMatrix(m={self.m}, n={self.n}, nnz={self.nnz})"


def _trace_ray(point, e, geom: Geometry):
    """Siddon-style traversal of one ray; returns (voxel indices, lengths)."""
    s = geom.pixel_size
    half = np.array([geom.n_cols * s / 2.0, geom.n_rows * s / 2.0])
    t_lo, t_hi = -np.inf, np.inf
    for k in range(2):
        if abs(e[k]) < 1e-15:
            if not (-half[k] <= point[k] <= half[k]):
                return None
            continue
        t1 = (-half[k] - point[k]) / e[k]
        t2 = (half[k] - point[k]) / e[k]
        t_lo = max(t_lo, min(t1, t2))
        t_hi = min(t_hi, max(t1, t2))
    if not t_hi - t_lo > 1e-12 * s:
        return None

    ts = [np.array([t_lo, t_hi])]
    for k, n_planes in ((0, geom.n_cols), (1, geom.n_rows)):
        if abs(e[k]) < 1e-15:
            continue
        planes = -half[k] + s * np.arange(n_planes + 1)
        t = (planes - point[k]) / e[k]
        ts.append(t[(t > t_lo) & (t < t_hi)])
    ts = np.unique(np.concatenate(ts))
    seg = np.diff(ts)
    keep = seg > 1e-12 * s
    seg = seg[keep]
    mid = 0.5 * (ts[:-1] + ts[1:])[keep]
    col = np.floor((point[0] + mid * e[0] + half[0]) / s).astype(np.int64)
    row = np.floor((half[1] - (point[1] + mid * e[1])) / s).astype(np.int64)
    np.clip(col, 0, geom.n_cols - 1, out=col)
    np.clip(row, 0, geom.n_rows - 1, out=row)
    j = row * geom.n_cols + col
    # near-corner slivers can land a second time in an already visited pixel
    uj, inv = np.unique(j, return_inverse=True)
    return uj, np.bincount(inv, weights=seg, minlength=uj.size)


def build_system_matrix(geom: Geometry) -> SystemMatrix:
    """Ray-trace every ray of ``geom`` through the pixel grid.

    Rays that miss the image give empty rows and are kept so that row ``i``
    always corresponds to ray ``i``.
    """
    half_diag = 0.5 * geom.pixel_size * math.hypot(geom.n_rows, geom.n_cols)
    half_width = 0.5 * geom.n_dets * geom.det_spacing
    if half_width < half_diag:
        warnings.warn(
            f"detector half-width {half_width:g} mm does not cover the image "
            f"half-diagonal {half_diag:g} mm; some pixels may be truncated",
            stacklevel=2,
        )
    n = geom.n_voxels
    indptr = np.zeros(geom.n_rays + 1, dtype=np.int64)
    indices, data = [], []
    for i in range(geom.n_rays):
        point, e = geom.ray(i)
        hit = _trace_ray(point, e, geom)
        if hit is None:
            indptr[i + 1] = indptr[i]
            continue
        idx, h = hit
        indices.append(idx)
        data.append(h)
        indptr[i + 1] = indptr[i] + idx.size
    indices = np.concatenate(indices) if indices else np.zeros(0, np.int64)
    data = np.concatenate(data) if data else np.zeros(0)
    return SystemMatrix(sparse.csr_array((data, indices, indptr), shape=(geom.n_rays, n)))


def forward_project(H: SystemMatrix, x) -> np.ndarray:
    """Line integrals ``l = H x``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != H.n:
        raise ValueError(f"image has {x.size} voxels, system matrix expects {H.n}")
    return H.csr @ x


def back_project(H: SystemMatrix, w, rays=None) -> np.ndarray:
    """Adjoint projection ``sum_{i in rays} w_i h_ij``.

    ``w`` has either one entry per ray of ``H`` or, when ``rays`` is given,
    one entry per listed ray.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    if rays is None:
        if w.size != H.m:
            raise ValueError(f"got {w.size} ray weights, system matrix has {H.m} rays")
        return H.csr_t @ w
    rays = np.asarray(rays, dtype=np.int64).ravel()
    if rays.size and (rays.min() < 0 or rays.max() >= H.m):
        raise IndexError("ray index out of bounds")
    if w.size == H.m:
        w = w[rays]
    elif w.size != rays.size:
        raise ValueError(
            f"got {w.size} ray weights for a subset of {rays.size} rays (M={H.m})"
        )
    return H.csr[rays].T @ w


def compute_Z(H: SystemMatrix) -> float:
    """Largest row sum of ``H``; the Jensen weight normaliser."""
    z = float(H.row_sums.max()) if H.m else 0.0
    if not z > 0:
        raise ValueError("system matrix has no nonzero row")
    return z


@dataclass(frozen=True)
class SubsetPartition:
    """Disjoint cover of the rays with per-subset data back-projections.

    ``blocks[k]`` is the row-restriction of ``H`` to ``subsets[k]`` and
    ``backprojections[k]`` holds ``sum_{i in subset k} d_i h_ij``.
    """

    n_subsets: int
    subsets: tuple
    backprojections: np.ndarray
    blocks: tuple

    @property
    def full_backprojection(self) -> np.ndarray:
        return self.backprojections.sum(axis=0)


def partition_rays(geom: Geometry, H: SystemMatrix, d, n_subsets: int) -> SubsetPartition:
    """Interleaved-view partition: view ``v`` goes to subset ``v mod n_subsets``."""
    n_subsets = int(n_subsets)
    if not 1 <= n_subsets <= geom.n_views:
        raise ValueError(f"n_subsets must lie in [1, {geom.n_views}], got {n_subsets}")
    if H.m != geom.n_rays:
        raise ValueError("system matrix does not match geometry")
    d = np.asarray(d, dtype=np.float64).ravel()
    if d.size != H.m:
        raise ValueError(f"got {d.size} measurements for {H.m} rays")
    det = np.arange(geom.n_dets)
    subsets, blocks, bp = [], [], []
    for k in range(n_subsets):
        views = np.arange(k, geom.n_views, n_subsets)
        rays = (views[:, None] * geom.n_dets + det[None, :]).ravel()
        rays.flags.writeable = False
        block = H if n_subsets == 1 else H.take_rows(rays)
        subsets.append(rays)
        blocks.append(block)
        bp.append(block.csr_t @ d[rays])
    bp = np.asarray(bp)
    bp.flags.writeable = False
    return SubsetPartition(n_subsets, tuple(subsets), bp, tuple(blocks))


def save_system_matrix(H: SystemMatrix, path) -> None:
    """Write ``H`` in the ``JSCT-H1`` little-endian binary layout."""
    csr = H.csr
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<QQ", H.m, H.n))
        for i in range(H.m):
            lo, hi = csr.indptr[i], csr.indptr[i + 1]
            f.write(struct.pack("<Q", hi - lo))
            entries = np.empty(hi - lo, dtype=_ENTRY)
            entries["j"] = csr.indices[lo:hi]
            entries["h"] = csr.data[lo:hi]
            f.write(entries.tobytes())


def load_system_matrix(path) -> SystemMatrix:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a JSCT-H1 system matrix file")
    pos = len(MAGIC)
    m, n = struct.unpack_from("<QQ", buf, pos)
    pos += 16
    indptr = np.zeros(m + 1, dtype=np.int64)
    chunks = []
    for i in range(m):
        (count,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        chunks.append(np.frombuffer(buf, dtype=_ENTRY, count=count, offset=pos))
        pos += count * _ENTRY.itemsize
        indptr[i + 1] = indptr[i] + count
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    entries = np.concatenate(chunks) if chunks else np.zeros(0, dtype=_ENTRY)
    csr = sparse.csr_array(
        (entries["h"].astype(np.float64), entries["j"].astype(np.int64), indptr),
        shape=(m, n),
    )
    return SystemMatrix(csr)
