"""Binary PGM (P5) images and the CMG1 grid container

CMG1 layout, all little-endian:

    magic        4 bytes  b"CMG1"
    kind         u8       0 = float32 grid, 1 = uint8 labels
    width        u32
    height       u32
    depth        u32
    num_classes  u8       labels only, 0 otherwise
    spacing      3 x f32  mm, x y z
    payload               row-major (depth, height, width)
"""

import logging
import re
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .confidence import ConfidenceMap
from .exceptions import FormatError, InputError
from .grids import Image2D, LabelMap, ProbMap, Volume3D, normalize_intensities

logger = logging.getLogger(__name__)

PGM_MAGIC = b'P5'
PGM_MAX_VALUE = 65535

CMG_MAGIC = b'CMG1'
CMG_HEADER = np.dtype([
    ('magic', 'S4'),
    ('kind', 'u1'),
    ('width', '<u4'),
    ('height', '<u4'),
    ('depth', '<u4'),
    ('num_classes', 'u1'),
    ('spacing', '<f4', (3,)),
])
CMG_MAX_ELEMENTS = 2**31

_PGM_TOKEN = re.compile(rb'\s*(?:#[^\n]*\n\s*)*(\S+)')


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

class PgmImage(NamedTuple):
    samples: np.ndarray
    max_value: int


def decode_pgm(data: bytes) -> PgmImage:
    """Decode a binary P5 PGM

    The header is magic, width, height and maxval separated by whitespace,
    with '#' comments running to the end of a line. A single whitespace
    byte separates maxval from the payload. Samples are one byte when
    maxval <= 255, else two bytes big-endian.

    Returns
    -------
    PgmImage
        samples (H, W) as uint8 or uint16, and maxval.

    Raises
    ------
    FormatError
        Wrong magic, malformed header, maxval outside 1..65535 or a
        truncated payload.
    """
    if not data.startswith(PGM_MAGIC):
        msg = f'not a binary PGM: magic {data[:2]!r}, expected {PGM_MAGIC!r}'
        raise FormatError(msg)
    pos = len(PGM_MAGIC)
    fields = []
    for _ in range(3):
        match = _PGM_TOKEN.match(data, pos)
        if match is None or not match.group(1).isdigit():
            msg = 'malformed PGM header'
            raise FormatError(msg)
        fields.append(int(match.group(1)))
        pos = match.end()
    width, height, max_value = fields
    if width < 1 or height < 1:
        msg = f'PGM dimensions must be positive, got {width}x{height}'
        raise FormatError(msg)
    if not 1 <= max_value <= PGM_MAX_VALUE:
        msg = f'PGM maxval must lie in 1..{PGM_MAX_VALUE}, got {max_value}'
        raise FormatError(msg)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        msg = 'PGM header must end with a single whitespace byte'
        raise FormatError(msg)
    pos += 1

    dtype = np.dtype('u1') if max_value <= 255 else np.dtype('>u2')
    expected = width * height * dtype.itemsize
    payload = data[pos:]
    if len(payload) < expected:
        msg = f'truncated PGM payload: expected {expected} bytes, got {len(payload)}'
        raise FormatError(msg)
    samples = np.frombuffer(payload[:expected], dtype=dtype).reshape(height, width)
    return PgmImage(samples=samples.astype(dtype.newbyteorder('=')), max_value=max_value)


def encode_pgm(grid: np.ndarray, max_value: int = 255) -> bytes:
    """Encode a [0, 1] grid as P5 with linear quantization round(v * maxval)"""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        msg = f'PGM export needs a 2D grid, got shape {grid.shape}'
        raise InputError(msg)
    if not 1 <= max_value <= PGM_MAX_VALUE:
        msg = f'maxval must lie in 1..{PGM_MAX_VALUE}, got {max_value}'
        raise InputError(msg)
    quantized = np.rint(np.clip(grid, 0.0, 1.0) * max_value)
    dtype = '>u1' if max_value <= 255 else '>u2'
    header = f'P5\n{grid.shape[1]} {grid.shape[0]}\n{max_value}\n'.encode('ascii')
    return header + quantized.astype(dtype).tobytes()


def read_pgm(path: Path | str, spacing: Tuple[float, float] = (1.0, 1.0)) -> Image2D:
    """Read a PGM file as an Image2D normalized by its maxval"""
    pgm = decode_pgm(Path(path).read_bytes())
    return normalize_intensities(pgm.samples, pgm.max_value, spacing)


def write_pgm(grid: np.ndarray, path: Path | str, max_value: int = 255) -> None:
    Path(path).write_bytes(encode_pgm(grid, max_value))


# ---------------------------------------------------------------------------
# CMG1
# ---------------------------------------------------------------------------

class GridKind(IntEnum):
    FLOAT32 = 0
    LABELS = 1

    @property
    def dtype(self) -> np.dtype:
        return np.dtype('<f4') if self is GridKind.FLOAT32 else np.dtype('u1')


class GridFile(BaseModel):
    """An in-memory CMG1 file

    Attributes
    ----------
    kind : GridKind
    data : numpy.ndarray
        (depth, height, width) float32 or uint8.
    num_classes : int
        Label count for LABELS grids, 0 for FLOAT32.
    spacing : Tuple[float, float, float]
        (sx, sy, sz) in mm.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: GridKind
    data: np.ndarray
    num_classes: int = 0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @model_validator(mode='after')
    def _check(self) -> 'GridFile':
        if self.data.ndim != 3:
            msg = f'grid data must be (depth, height, width), got shape {self.data.shape}'
            raise ValueError(msg)
        if self.data.dtype != self.kind.dtype.newbyteorder('='):
            msg = f'{self.kind.name} grids hold {self.kind.dtype}, got {self.data.dtype}'
            raise ValueError(msg)
        if self.kind is GridKind.LABELS and not 2 <= self.num_classes <= 255:
            msg = f'label grids need 2..255 classes, got {self.num_classes}'
            raise ValueError(msg)
        return self

    @property
    def depth(self) -> int:
        return int(self.data.shape[0])

    def _single_slice(self) -> np.ndarray:
        if self.depth != 1:
            msg = f'expected a single slice, got depth {self.depth}'
            raise InputError(msg)
        return self.data[0]

    def to_image(self) -> Image2D:
        return Image2D(data=self._single_slice(), spacing=self.spacing[:2])

    def to_volume(self) -> Volume3D:
        return Volume3D(data=self.data, spacing=self.spacing)

    def to_confidence_map(self) -> ConfidenceMap:
        return ConfidenceMap(data=self._single_slice())

    def to_label_map(self) -> LabelMap:
        if self.kind is not GridKind.LABELS:
            msg = 'not a label grid'
            raise InputError(msg)
        if self.depth == 1:
            return LabelMap(
                data=self.data[0], num_classes=self.num_classes, spacing=self.spacing[:2]
            )
        return LabelMap(data=self.data, num_classes=self.num_classes, spacing=self.spacing)

    def to_prob_map(self, normalized: bool = True) -> ProbMap:
        """Channels are stored along depth, one z-slice per class"""
        return ProbMap(data=np.moveaxis(self.data, 0, -1), normalized=normalized)


def grid_from(
    obj: Image2D | Volume3D | ConfidenceMap | LabelMap | ProbMap | np.ndarray,
    spacing: Tuple[float, float, float] | None = None
) -> GridFile:
    """Wrap a library grid for writing"""
    if isinstance(obj, LabelMap):
        data = obj.data if obj.data.ndim == 3 else obj.data[None]
        sp = tuple(obj.spacing) + (1.0,) * (3 - len(obj.spacing))
        if obj.num_classes > 255 or obj.data.max() > 255:
            msg = 'label grids hold at most 255 classes'
            raise InputError(msg)
        return GridFile(
            kind=GridKind.LABELS,
            data=data.astype(np.uint8),
            num_classes=obj.num_classes,
            spacing=spacing or sp,
        )
    if isinstance(obj, ProbMap):
        if obj.data.ndim != 3:
            msg = 'only 2D probability maps can be stored'
            raise InputError(msg)
        data = np.moveaxis(obj.data, -1, 0)
        sp = (1.0, 1.0, 1.0)
    elif isinstance(obj, Volume3D):
        data, sp = obj.data, obj.spacing
    elif isinstance(obj, Image2D):
        data, sp = obj.data[None], obj.spacing + (1.0,)
    else:
        arr = obj.data if isinstance(obj, ConfidenceMap) else np.asarray(obj)
        if arr.ndim not in (2, 3):
            msg = f'cannot store a grid of shape {arr.shape}'
            raise InputError(msg)
        data = arr[None] if arr.ndim == 2 else arr
        sp = (1.0, 1.0, 1.0)
    return GridFile(
        kind=GridKind.FLOAT32,
        data=np.ascontiguousarray(data, dtype=np.float32),
        spacing=spacing or sp,
    )


def encode_grid(grid: GridFile) -> bytes:
    header = np.zeros(1, dtype=CMG_HEADER)
    header['magic'] = CMG_MAGIC
    header['kind'] = int(grid.kind)
    header['depth'], header['height'], header['width'] = grid.data.shape
    header['num_classes'] = grid.num_classes
    header['spacing'] = grid.spacing
    payload = np.ascontiguousarray(grid.data, dtype=grid.kind.dtype)
    return header.tobytes() + payload.tobytes()


def decode_grid(data: bytes) -> GridFile:
    """Parse CMG1 bytes

    Raises
    ------
    FormatError
        Bad magic, unknown kind, dimension overflow, or a payload whose
        length differs from the header's (the message names both).
    """
    if len(data) < CMG_HEADER.itemsize:
        msg = f'short CMG1 header: expected {CMG_HEADER.itemsize} bytes, got {len(data)}'
        raise FormatError(msg)
    header = np.frombuffer(data[:CMG_HEADER.itemsize], dtype=CMG_HEADER)[0]
    if header['magic'] != CMG_MAGIC:
        msg = f'bad magic {bytes(header["magic"])!r}, expected {CMG_MAGIC!r}'
        raise FormatError(msg)
    try:
        kind = GridKind(int(header['kind']))
    except ValueError:
        msg = f'unknown grid kind {int(header["kind"])}'
        raise FormatError(msg) from None
    shape = (int(header['depth']), int(header['height']), int(header['width']))
    n_elements = shape[0] * shape[1] * shape[2]
    if n_elements == 0 or n_elements > CMG_MAX_ELEMENTS:
        msg = f'grid dimensions {shape[2]}x{shape[1]}x{shape[0]} out of range'
        raise FormatError(msg)
    expected = n_elements * kind.dtype.itemsize
    actual = len(data) - CMG_HEADER.itemsize
    if actual != expected:
        msg = f'payload length mismatch: expected {expected} bytes, got {actual}'
        raise FormatError(msg)
    payload = np.frombuffer(data[CMG_HEADER.itemsize:], dtype=kind.dtype).reshape(shape)
    try:
        return GridFile(
            kind=kind,
            data=payload.astype(kind.dtype.newbyteorder('=')),
            num_classes=int(header['num_classes']),
            spacing=tuple(float(s) for s in header['spacing']),
        )
    except ValueError as err:
        msg = f'invalid CMG1 grid: {err}'
        raise FormatError(msg) from err


def read_grid(path: Path | str) -> GridFile:
    grid = decode_grid(Path(path).read_bytes())
    logger.debug('read %s grid %s from %s', grid.kind.name, grid.data.shape, path)
    return grid


def write_grid(grid: GridFile, path: Path | str) -> None:
    """Write (create or truncate) a CMG1 file"""
    Path(path).write_bytes(encode_grid(grid))
