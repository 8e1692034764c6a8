"""Volume container and the RVOL on-disk format.

RVOL layout (little-endian)::

    offset  size  field
    0       6     magic b"RVOL1\\0"
    6       12    dims, 3 x uint32 (x, y, z)
    18      12    spacing_mm, 3 x float32
    30      4     dtype tag, uint32 (0 = float32)
    34      30    zero padding up to 64 bytes
    64      ...   voxels, x-fastest (Fortran) order
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RVOL1\x00"
HEADER_SIZE = 64
DTYPE_FLOAT32 = 0
_HEADER = struct.Struct("<6s3I3fI")


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    """3D scalar grid with voxel spacing in millimetres.

    ``data`` is indexed ``[x, y, z]``.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume has an empty axis: {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        sp = tuple(float(s) for s in self.spacing_mm)
        if len(sp) != 3 or min(sp) <= 0:
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing_mm}")
        self.spacing_mm = sp

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)


def write_rvol(path, volume: Volume) -> None:
    header = _HEADER.pack(MAGIC, *volume.shape, *volume.spacing_mm, DTYPE_FLOAT32)
    header += b"\x00" * (HEADER_SIZE - len(header))
    payload = np.asarray(volume.data, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(header + payload)


def read_rvol(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, nx, ny, nz, sx, sy, sz, dtype = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if dtype != DTYPE_FLOAT32:
        raise VolumeFormatError(f"{path}: unsupported dtype tag {dtype}")
    n = nx * ny * nz
    if len(raw) != HEADER_SIZE + 4 * n:
        raise VolumeFormatError(
            f"{path}: payload is {len(raw) - HEADER_SIZE} bytes, expected {4 * n}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE, count=n)
    data = data.reshape((nx, ny, nz), order="F").astype(np.float32)
    return Volume(data, (sx, sy, sz))


def normalize_intensity(data: np.ndarray, lo_pct: float = 0.5, hi_pct: float = 99.5) -> np.ndarray:
    """Clip to the [lo_pct, hi_pct] percentiles and rescale to [0, 1].

    A flat input maps to zeros.
    """
    data = np.asarray(data, dtype=np.float64)
    lo, hi = np.percentile(data, [lo_pct, hi_pct])
    if hi <= lo:
        return np.zeros_like(data)
    return (np.clip(data, lo, hi) - lo) / (hi - lo)
