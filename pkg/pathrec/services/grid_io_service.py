import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from pathrec.models.errors import ConfigError, GridFormatError
from pathrec.models.scene import LengthUnit, VoxelGridField

logger = logging.getLogger(__name__)

GRID_MAGIC = b"VGRD"
GRID_VERSION = 1
# magic, version, dims, origin, voxel_size, unit tag
_HEADER = struct.Struct("<4sI3I3d3dB")
HEADER_SIZE = _HEADER.size
MAX_VOXELS = 1 << 31

_UNIT_TAGS = {LengthUnit.m: 0, LengthUnit.km: 1}
_TAG_UNITS = {tag: unit for unit, tag in _UNIT_TAGS.items()}


class GridIOService:
    """VGRD voxel grid files: little-endian header followed by an x-fastest float32 payload"""

    @staticmethod
    def encode(field: VoxelGridField) -> bytes:
        header = _HEADER.pack(
            GRID_MAGIC,
            GRID_VERSION,
            *[int(n) for n in field.dims],
            *[float(o) for o in field.origin],
            *[float(s) for s in field.voxel_size],
            _UNIT_TAGS[field.unit],
        )
        return header + np.asarray(field.values, dtype="<f4").tobytes()

    @staticmethod
    def decode(data: bytes) -> VoxelGridField:
        if len(data) < 4 or data[:4] != GRID_MAGIC:
            raise GridFormatError(f"bad magic {data[:4]!r}, expected {GRID_MAGIC!r}", offset=0)
        if len(data) < HEADER_SIZE:
            raise GridFormatError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes", offset=len(data))
        _, version, nx, ny, nz, ox, oy, oz, sx, sy, sz, unit_tag = _HEADER.unpack_from(data, 0)
        if version != GRID_VERSION:
            raise GridFormatError(f"unsupported version {version}", offset=4)
        n_voxels = nx * ny * nz
        if min(nx, ny, nz) < 1 or n_voxels > MAX_VOXELS:
            raise GridFormatError(f"dims {nx}x{ny}x{nz} out of range", offset=8)
        if unit_tag not in _TAG_UNITS:
            raise GridFormatError(f"unknown unit tag {unit_tag}", offset=HEADER_SIZE - 1)
        expected = HEADER_SIZE + 4 * n_voxels
        if len(data) < expected:
            raise GridFormatError(f"truncated payload: {len(data)} of {expected} bytes", offset=len(data))
        values = np.frombuffer(data, dtype="<f4", count=n_voxels, offset=HEADER_SIZE).astype(np.float64)
        return VoxelGridField(
            dims=(nx, ny, nz),
            origin=(ox, oy, oz),
            voxel_size=(sx, sy, sz),
            unit=_TAG_UNITS[unit_tag],
            values=values,
        )

    @staticmethod
    def save_grid(path: Union[str, Path], field: VoxelGridField) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(GridIOService.encode(field))
        except OSError as e:
            error_msg = f"Cannot write grid {path}: {str(e)}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        logger.debug(f"   Grid written: {path} dims={field.dims}")

    @staticmethod
    def load_grid(path: Union[str, Path]) -> VoxelGridField:
        path = Path(path)
        if not path.is_file():
            error_msg = f"Grid file not found: {path}"
            logger.error(f"❌ {error_msg}")
            raise ConfigError(error_msg)
        try:
            return GridIOService.decode(path.read_bytes())
        except GridFormatError as e:
            logger.error(f"❌ {path}: {str(e)}")
            raise
