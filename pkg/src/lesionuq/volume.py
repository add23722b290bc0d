"""Dense 3D volume types and bit-exact NPY v1.0 file I/O.

Memory convention: one flat float64 (or int32 for labels) buffer in
C-order with x fastest, i.e. linear = x + nx*(y + ny*z).  On disk this is
an NPY array of shape (nz, ny, nx).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, InputError, ShapeError

# Desk-scale guard on each axis; module-level so callers can raise it.
MAX_DIM = 512

_NPY_MAGIC = b"\x93NUMPY"


@dataclass(frozen=True)
class Dims:
    """Voxel counts along x, y, z."""

    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            n = getattr(self, name)
            if not isinstance(n, (int, np.integer)) or n <= 0:
                raise ShapeError(f"{name} must be a positive integer, got {n!r}")
            if n > MAX_DIM:
                raise ShapeError(f"{name}={n} exceeds the desk-scale guard ({MAX_DIM})")

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def shape3d(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx) matching the on-disk layout."""
        return (self.nz, self.ny, self.nx)


def to_linear(x, y, z, dims: Dims):
    """(x,y,z) -> linear index; accepts scalars or arrays."""
    return x + dims.nx * (y + dims.ny * z)


def to_xyz(linear, dims: Dims):
    """Linear index -> (x,y,z); accepts scalars or arrays."""
    x = linear % dims.nx
    rest = linear // dims.nx
    return x, rest % dims.ny, rest // dims.ny


@dataclass(frozen=True)
class Volume:
    """Immutable scalar field over a 3D grid, stored flat in float64."""

    dims: Dims
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        if arr.size != self.dims.n_voxels:
            raise ShapeError(
                f"data length {arr.size} != nx*ny*nz = {self.dims.n_voxels}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError("volume contains non-finite values")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Volume":
        """Build from a (nz, ny, nx) array."""
        if arr.ndim != 3:
            raise ShapeError(f"expected rank-3 array, got rank {arr.ndim}")
        nz, ny, nx = arr.shape
        return cls(Dims(nx, ny, nz), np.asarray(arr, dtype=np.float64).reshape(-1))

    def as_3d(self) -> np.ndarray:
        return self.data.reshape(self.dims.shape3d)


@dataclass(frozen=True)
class LabelVolume:
    """Non-negative integer labels; 0 is background, labels are {0..K}."""

    dims: Dims
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype.kind not in "iu":
            raise DataError(f"labels must be integer-typed, got {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype=np.int32).reshape(-1)
        if arr.size != self.dims.n_voxels:
            raise ShapeError(
                f"data length {arr.size} != nx*ny*nz = {self.dims.n_voxels}"
            )
        if arr.size and arr.min() < 0:
            raise DataError("labels must be non-negative")
        k = int(arr.max()) if arr.size else 0
        if k > 0:
            present = np.bincount(arr, minlength=k + 1) > 0
            if not present[1:].all():
                missing = np.nonzero(~present[1:])[0] + 1
                raise DataError(f"label ids not contiguous, missing {missing[:5].tolist()}")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "LabelVolume":
        if arr.ndim != 3:
            raise ShapeError(f"expected rank-3 array, got rank {arr.ndim}")
        nz, ny, nx = arr.shape
        return cls(Dims(nx, ny, nz), arr.reshape(-1))

    def as_3d(self) -> np.ndarray:
        return self.data.reshape(self.dims.shape3d)

    @property
    def max_label(self) -> int:
        return int(self.data.max()) if self.data.size else 0


@dataclass(frozen=True)
class McEnsemble:
    """T aligned foreground-probability volumes from stochastic passes."""

    samples: tuple[Volume, ...]

    def __post_init__(self):
        samples = tuple(self.samples)
        if len(samples) < 2:
            raise InputError(f"ensemble needs T >= 2 samples, got {len(samples)}")
        dims = samples[0].dims
        for i, s in enumerate(samples):
            if s.dims != dims:
                raise InputError(f"sample {i} dims {s.dims} != {dims}")
            if s.data.min() < 0.0 or s.data.max() > 1.0:
                raise DataError(f"sample {i} has probabilities outside [0,1]")
        object.__setattr__(self, "samples", samples)

    @property
    def t(self) -> int:
        return len(self.samples)

    @property
    def dims(self) -> Dims:
        return self.samples[0].dims


def _read_npy(path) -> np.ndarray:
    """Load an NPY v1.0 rank-3 array with typed errors."""
    try:
        f = open(path, "rb")
    except OSError:
        raise
    with f:
        head = f.read(8)
        if len(head) < 8 or head[:6] != _NPY_MAGIC:
            raise FormatError(f"{path}: not an NPY file (bad magic)")
        if head[6:8] != b"\x01\x00":
            raise FormatError(
                f"{path}: unsupported NPY version {head[6]}.{head[7]}, need 1.0"
            )
        try:
            shape, fortran, dtype = np.lib.format.read_array_header_1_0(f)
        except ValueError as e:
            raise FormatError(f"{path}: malformed NPY header: {e}") from None
        if len(shape) != 3:
            raise ShapeError(f"{path}: expected rank 3, got shape {shape}")
        count = int(np.prod(shape))
        payload = f.read()
    expected = count * dtype.itemsize
    if len(payload) < expected:
        raise FormatError(
            f"{path}: truncated payload ({len(payload)} bytes, need {expected})"
        )
    arr = np.frombuffer(payload[:expected], dtype=dtype).reshape(
        shape, order="F" if fortran else "C"
    )
    return np.ascontiguousarray(arr)


def load_volume(path) -> Volume:
    arr = _read_npy(path)
    if arr.dtype.kind in "iub":
        raise DataError(
            f"{path}: integer-typed file; use load_label_volume for label data"
        )
    if arr.dtype.kind != "f":
        raise DataError(f"{path}: unsupported dtype {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: volume contains non-finite values")
    return Volume.from_array(arr.astype(np.float64))


def load_label_volume(path) -> LabelVolume:
    arr = _read_npy(path)
    if arr.dtype.kind not in "iu":
        raise DataError(f"{path}: expected integer-typed labels, got {arr.dtype}")
    return LabelVolume.from_array(arr)


def save_volume(v, path) -> None:
    """Write NPY v1.0: float64 LE for Volume, uint8/uint32 for labels."""
    if isinstance(v, Volume):
        arr = v.as_3d().astype("<f8")
    elif isinstance(v, LabelVolume):
        dt = "<u1" if v.max_label <= 255 else "<u4"
        arr = v.as_3d().astype(dt)
    else:
        raise InputError(f"cannot save object of type {type(v).__name__}")
    with open(path, "wb") as f:
        np.lib.format.write_array(f, arr, version=(1, 0))
